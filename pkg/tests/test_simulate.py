import numpy as np
import pytest

from swpower.correlation import IccSet
from swpower.errors import ValidationError
from swpower.simulate import (
    SimScenario,
    cluster_rng,
    generate_dataset,
    reports_to_csv,
    run_power_study,
    run_type1_study,
    secular_trend,
)


def scenario(**kw):
    icc = IccSet.from_params([0.05, 0.1], [0.025, 0.05], 0.02, 0.01, 0.4)
    kw.setdefault("replicates", 3)
    return SimScenario(4, 2, 5, 10, icc, (0.4, 0.5), **kw)


class TestTrend:
    def test_geometric(self):
        np.testing.assert_allclose(secular_trend(4), [0.0, 0.1, 0.15, 0.175])

    def test_none_and_explicit(self):
        assert np.all(secular_trend(3, "none") == 0)
        np.testing.assert_array_equal(secular_trend(3, [1, 2, 3]), [1, 2, 3])

    def test_bad_length(self):
        with pytest.raises(ValidationError, match="length"):
            secular_trend(3, [1, 2])


class TestGenerate:
    def test_dimensions(self):
        d = generate_dataset(scenario(), 0)
        assert (d.I, d.T, d.L) == (8, 5, 2)
        assert d.n == 8 * 5 * 10
        np.testing.assert_array_equal(np.nan_to_num(d.treatment_matrix()), scenario().schedule().treatment)

    def test_reproducible(self):
        a = generate_dataset(scenario(), 4)
        b = generate_dataset(scenario(), 4)
        np.testing.assert_array_equal(a.y, b.y)

    def test_replicates_differ(self):
        assert not np.allclose(generate_dataset(scenario(), 0).y, generate_dataset(scenario(), 1).y)

    def test_cluster_streams_independent_of_order(self):
        a = cluster_rng(5, 2, 3).standard_normal(4)
        cluster_rng(5, 2, 0).standard_normal(100)
        b = cluster_rng(5, 2, 3).standard_normal(4)
        np.testing.assert_array_equal(a, b)

    def test_closed_cohort_subjects_repeat(self):
        icc = IccSet.from_params([0.05], [0.02], design="cc", rho2=[0.5])
        sc = SimScenario(2, 2, 3, 6, icc, (0.3,), replicates=1)
        d = generate_dataset(sc, 0)
        assert d.closed_cohort
        assert set(d.subject[(d.cluster == 0) & (d.period == 2)]) == set(range(6))

    def test_empirical_moments(self):
        # large scenario: sample residual variance approaches the specified total
        icc = IccSet.from_params([0.05], [0.02])
        sc = SimScenario(3, 10, 4, 50, icc, (0.0,), variances=2.0, trend="none", replicates=1)
        d = generate_dataset(sc, 0)
        assert d.y.var() == pytest.approx(2.0, rel=0.1)


class TestNullPatterns:
    @pytest.mark.parametrize("null,expect", [("first-zero", [0, 0.5]), ("second-zero", [0.4, 0]),
                                             ("all-zero", [0, 0])])
    def test_true_effects(self, null, expect):
        np.testing.assert_array_equal(scenario(null=null).true_effects(), expect)

    def test_power_study_rejects_null(self):
        with pytest.raises(ValidationError, match="type"):
            run_power_study(scenario(null="first-zero"))

    def test_type1_study_needs_null(self):
        with pytest.raises(ValidationError):
            run_type1_study(scenario())

    def test_unknown_pattern(self):
        with pytest.raises(ValidationError):
            scenario(null="some-zero")

    def test_second_zero_needs_two_endpoints(self):
        icc = IccSet.from_params([0.05], [0.02])
        with pytest.raises(ValidationError, match="endpoints"):
            SimScenario(2, 2, 3, 5, icc, (0.3,), null="second-zero")


class TestReports:
    def test_single_replicate_has_no_se(self):
        rep = run_power_study(scenario(replicates=1))
        assert rep.valid + rep.failed == 1
        assert rep.se is None

    def test_study_and_csv(self, tmp_path):
        rep = run_power_study(scenario(replicates=4, base_seed=7))
        assert rep.valid == 4 and not rep.invalid
        assert 0 <= rep.empirical <= 1 and rep.se is not None
        assert rep.discrepancy == pytest.approx(rep.empirical - rep.predicted)
        path = tmp_path / "sim.csv"
        text = reports_to_csv([rep], path)
        header, row = text.split("\r\n")[:2]
        assert header.startswith("rho2_12,rho0,rho1") and header.endswith(",seed")
        assert row.endswith(",7")
        reports_to_csv([rep], path, append=True)
        assert path.read_bytes().decode().count("\r\n") == 3

    def test_reproducible_study(self):
        a = run_power_study(scenario(replicates=3, base_seed=11))
        b = run_power_study(scenario(replicates=3, base_seed=11))
        assert a.rejections == b.rejections and a.predicted == b.predicted

    def test_bad_replicates(self):
        with pytest.raises(ValidationError):
            scenario(replicates=0)
