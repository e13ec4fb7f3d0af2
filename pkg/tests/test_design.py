import numpy as np
import pytest

from swpower.design import DesignSchedule, build_standard_schedule, design_constants, read_schedule_csv
from swpower.errors import ValidationError


class TestStandardSchedule:
    def test_staircase_shape(self):
        s = build_standard_schedule(4, 4, 5, 12)
        assert (s.I, s.T, s.N) == (16, 5, 12)
        # first sequence crosses over at period 2, last at period 5
        np.testing.assert_array_equal(s.treatment[0], [0, 1, 1, 1, 1])
        np.testing.assert_array_equal(s.treatment[-1], [0, 0, 0, 0, 1])
        assert s.sequences == ((2, 4), (3, 4), (4, 4), (5, 4))

    def test_design_constants_by_hand(self):
        # treated periods per cluster: 4, 3, 2, 1 (x4 clusters each)
        dc = design_constants(build_standard_schedule(4, 4, 5, 12))
        assert dc.U == 4 * (4 + 3 + 2 + 1)
        assert dc.V == 4 * (16 + 9 + 4 + 1)
        assert dc.W == 0 + 4**2 + 8**2 + 12**2 + 16**2

    def test_constants_match_definitions_on_random_matrix(self, rng):
        for _ in range(20):
            S = int(rng.integers(2, 5))
            T = S + int(rng.integers(1, 3))
            s = build_standard_schedule(S, int(rng.integers(1, 4)), T, 3)
            X = s.treatment
            dc = design_constants(s)
            assert dc.U == X.sum()
            assert dc.V == sum(r.sum() ** 2 for r in X)
            assert dc.W == sum(c.sum() ** 2 for c in X.T)

    def test_fewer_sequences_than_steps(self):
        s = build_standard_schedule(2, 3, 5, 4)
        assert s.sequences == ((3, 3), (5, 3))

    def test_too_few_periods(self):
        with pytest.raises(ValidationError, match="too short"):
            build_standard_schedule(4, 1, 4, 5)

    def test_single_sequence_is_collinear(self):
        with pytest.raises(ValidationError, match="collinear"):
            build_standard_schedule(1, 3, 2, 5)

    def test_with_size(self):
        s = build_standard_schedule(2, 2, 3, 5).with_size(9)
        assert s.N == 9 and s.I == 4


class TestScheduleValidation:
    def test_rejects_non_binary(self):
        with pytest.raises(ValidationError, match="0 or 1"):
            DesignSchedule(np.array([[0, 0.5], [0, 1]]), 3)

    def test_rejects_reversal(self):
        with pytest.raises(ValidationError, match="leaves the intervention"):
            DesignSchedule(np.array([[0, 1, 0], [0, 0, 1]]), 3)

    def test_rejects_always_treated(self):
        with pytest.raises(ValidationError, match="every period"):
            DesignSchedule(np.array([[1, 1, 1], [0, 0, 1]]), 3)

    def test_rejects_untreated(self):
        with pytest.raises(ValidationError, match="no cluster-period"):
            DesignSchedule(np.zeros((3, 3)), 3)

    def test_sequences_inferred(self):
        s = DesignSchedule(np.array([[0, 1, 1], [0, 1, 1], [0, 0, 1]]), 2)
        assert s.sequences == ((2, 2), (3, 1))


class TestScheduleCsv:
    def test_roundtrip(self, tmp_path):
        p = tmp_path / "sched.csv"
        p.write_text("0,1,1\n0,0,1\n\n")
        s = read_schedule_csv(p, 7)
        assert s.I == 2 and s.T == 3 and s.N == 7

    def test_bad_cell_reports_line(self, tmp_path):
        p = tmp_path / "sched.csv"
        p.write_text("0,1,1\n0,x,1\n")
        with pytest.raises(ValidationError, match=":2:"):
            read_schedule_csv(p, 7)

    def test_ragged(self, tmp_path):
        p = tmp_path / "sched.csv"
        p.write_text("0,1,1\n0,1\n")
        with pytest.raises(ValidationError, match="unequal"):
            read_schedule_csv(p, 7)
