"""End-to-end acceptance checks.

Each test records one PASS/FAIL line (shown in the terminal summary and on
stdout with ``-s``) and then asserts the criterion at its stated tolerance.
"""

from __future__ import annotations

import math
import time
import warnings

import numpy as np
import pytest

import conftest
from props import PROPERTIES
from randcfg import random_common_params, random_icc, random_schedule, relerr
from swpower.correlation import CLOSED_COHORT, CROSS_SECTIONAL, IccSet, apply_cac, icc_to_variance_components
from swpower.design import build_standard_schedule, design_constants
from swpower.errors import DegenerateLimitError
from swpower.mlmm import FitControls, ModelParams, fit_em, standard_errors
from swpower.oracle import brute_force_covariance
from swpower.power import PowerQuery, power_iu, power_omnibus, sensitivity_sweep
from swpower.simulate import SimScenario, generate_dataset, run_power_study, run_type1_study, secular_trend
from swpower.variance import (
    covariance_common_icc,
    covariance_cross_sectional,
    effect_covariance,
    limiting_covariance,
    variance_both_common,
    variance_common_effect,
    variance_common_icc_diag,
    variance_hooper_girling,
)

MODES = (CROSS_SECTIONAL, CLOSED_COHORT)

# Home-care shared decision-making design: two quality-of-life subscales.
HOME_RHO0 = [0.006, 0.029]
HOME_RHO1 = [0.00002, 0.0068]
HOME_RHO2_12 = 0.58
HOME_EFFECTS = [0.30, 0.35]

# One-at-a-time ICC sensitivity points and their reference power (%).
# Between-period ICCs are CAC = 0.2 times the base within-period values
# unless the point sets the CAC itself.
SENSITIVITY_REFERENCE = [
    ({"cac": 0.0}, 86.9), ({"cac": 0.2}, 86.2), ({"cac": 0.5}, 86.0), ({"cac": 0.8}, 86.5),
    ({"rho0_12": -0.004}, 86.1), ({"rho0_12": -0.002}, 86.1), ({"rho0_12": 0.002}, 86.2), ({"rho0_12": 0.004}, 86.3),
    ({"rho0_2": 0.012}, 88.6), ({"rho0_2": 0.017}, 87.7), ({"rho0_2": 0.023}, 87.0),
    ({"rho0_2": 0.035}, 85.3), ({"rho0_2": 0.041}, 84.4), ({"rho0_2": 0.046}, 83.7),
    ({"rho0_1": 0.002}, 87.2), ({"rho0_1": 0.004}, 86.6), ({"rho0_1": 0.005}, 86.3),
    ({"rho0_1": 0.007}, 85.9), ({"rho0_1": 0.008}, 85.7), ({"rho0_1": 0.010}, 85.5),
    ({"rho2_12": 0.23}, 85.1), ({"rho2_12": 0.35}, 85.3), ({"rho2_12": 0.46}, 85.7),
    ({"rho2_12": 0.70}, 86.7), ({"rho2_12": 0.81}, 87.3), ({"rho2_12": 0.93}, 88.4),
]

# Two-endpoint validation scenarios (CAC 0.5, cross-sectional):
# rho2_12, (rho0_1, rho1_1), (rho0_2, rho1_2), (rho0_12, rho1_12), effects, I, N, T, predicted power (%)
VALIDATION_SCENARIOS = [
    (0.2, (0.02, 0.01), (0.02, 0.01), (0.01, 0.005), (0.43, 0.43), 20, 13, 3, 84.5),
    (0.2, (0.02, 0.01), (0.10, 0.05), (0.01, 0.005), (0.40, 0.38), 12, 25, 5, 85.2),
    (0.2, (0.02, 0.01), (0.20, 0.10), (0.01, 0.005), (0.39, 0.56), 12, 25, 4, 83.6),
    (0.2, (0.10, 0.05), (0.02, 0.01), (0.01, 0.005), (0.38, 0.33), 12, 25, 5, 82.6),
    (0.2, (0.10, 0.05), (0.10, 0.05), (0.05, 0.025), (0.49, 0.98), 12, 15, 4, 85.6),
    (0.2, (0.10, 0.05), (0.20, 0.10), (0.05, 0.025), (0.59, 0.99), 12, 20, 3, 84.2),
    (0.2, (0.20, 0.10), (0.02, 0.01), (0.01, 0.005), (0.47, 0.22), 20, 18, 5, 82.2),
    (0.2, (0.20, 0.10), (0.10, 0.05), (0.05, 0.025), (0.92, 0.92), 10, 12, 3, 84.1),
    (0.2, (0.20, 0.10), (0.20, 0.10), (0.10, 0.05), (0.54, 0.81), 12, 25, 4, 83.9),
    (0.5, (0.02, 0.01), (0.02, 0.01), (0.01, 0.005), (0.30, 0.28), 30, 10, 4, 84.4),
    (0.5, (0.02, 0.01), (0.10, 0.05), (0.01, 0.005), (0.34, 0.88), 16, 22, 3, 82.4),
    (0.5, (0.02, 0.01), (0.20, 0.10), (0.01, 0.005), (0.42, 0.83), 8, 20, 5, 86.3),
    (0.5, (0.10, 0.05), (0.02, 0.01), (0.01, 0.005), (0.38, 0.55), 21, 10, 4, 84.0),
    (0.5, (0.10, 0.05), (0.10, 0.05), (0.05, 0.025), (0.52, 0.68), 8, 25, 5, 84.8),
    (0.5, (0.10, 0.05), (0.20, 0.10), (0.05, 0.025), (0.62, 0.62), 22, 8, 3, 83.9),
    (0.5, (0.20, 0.10), (0.02, 0.01), (0.01, 0.005), (0.84, 0.29), 26, 18, 3, 84.7),
    (0.5, (0.20, 0.10), (0.10, 0.05), (0.05, 0.025), (0.60, 0.60), 12, 16, 4, 85.0),
    (0.5, (0.20, 0.10), (0.20, 0.10), (0.10, 0.05), (0.32, 0.84), 24, 24, 5, 85.7),
    (0.8, (0.02, 0.01), (0.02, 0.01), (0.01, 0.005), (0.31, 0.55), 12, 16, 5, 84.4),
    (0.8, (0.02, 0.01), (0.10, 0.05), (0.01, 0.005), (0.29, 0.57), 30, 14, 3, 83.1),
    (0.8, (0.02, 0.01), (0.20, 0.10), (0.01, 0.005), (0.20, 0.84), 30, 17, 4, 81.4),
    (0.8, (0.10, 0.05), (0.02, 0.01), (0.01, 0.005), (0.31, 0.62), 20, 13, 5, 84.2),
    (0.8, (0.10, 0.05), (0.10, 0.05), (0.05, 0.025), (0.82, 0.92), 8, 22, 3, 85.2),
    (0.8, (0.10, 0.05), (0.20, 0.10), (0.05, 0.025), (0.45, 0.45), 18, 18, 4, 83.7),
    (0.8, (0.20, 0.10), (0.02, 0.01), (0.01, 0.005), (0.99, 0.25), 28, 25, 3, 85.6),
    (0.8, (0.20, 0.10), (0.10, 0.05), (0.05, 0.025), (0.63, 0.31), 24, 17, 4, 84.1),
    (0.8, (0.20, 0.10), (0.20, 0.10), (0.10, 0.05), (0.82, 0.82), 8, 10, 5, 86.1),
]

# one scenario per rho2_12 block, spread over T = 3, 3, 5
SIMULATION_ROWS = (0, 14, 21)


def _record(k: int, ok: bool, detail: str) -> None:
    status = "PASS" if ok else "FAIL"
    conftest.ACCEPTANCE[k] = (status, detail)
    print(f"criterion {k}: {status}  {detail}")


def _home_query(**kw) -> PowerQuery:
    sched = build_standard_schedule(4, 4, 5, 12)
    icc = IccSet.from_params(HOME_RHO0, HOME_RHO1, 0.0, 0.0, HOME_RHO2_12)
    kw.setdefault("effects", HOME_EFFECTS)
    return PowerQuery(sched, icc, **kw)


def _scenario_query(row) -> PowerQuery:
    r2, e1, e2, btw, eff, I, N, T, _ = row
    sched = build_standard_schedule(T - 1, I // (T - 1), T, N)
    icc = IccSet.from_params([e1[0], e2[0]], [e1[1], e2[1]], btw[0], btw[1], r2)
    return PowerQuery(sched, icc, list(eff))


def _scenario_sim(row, replicates: int, null: str = "none") -> SimScenario:
    r2, e1, e2, btw, eff, I, N, T, _ = row
    icc = IccSet.from_params([e1[0], e2[0]], [e1[1], e2[1]], btw[0], btw[1], r2)
    index = VALIDATION_SCENARIOS.index(row)
    return SimScenario(T - 1, I // (T - 1), T, N, icc, eff, replicates=replicates,
                       base_seed=2025 + index, null=null)


class TestAcceptance:
    def test_c01_headline_power(self):
        t0 = time.perf_counter()
        res = power_iu(_home_query())
        elapsed = time.perf_counter() - t0
        pct = 100 * res.power
        ok = abs(pct - 86.3) <= 0.3 and elapsed < 1.0
        _record(1, ok, f"IU power {pct:.2f}% (target 86.3 +/- 0.3), {elapsed:.2f} s")
        assert ok

    def test_c02_sensitivity_grid(self):
        t0 = time.perf_counter()
        base = _home_query()
        base = PowerQuery(base.design, apply_cac(base.icc, 0.2), base.effects)
        rows = sensitivity_sweep(base, points=[p for p, _ in SENSITIVITY_REFERENCE])
        elapsed = time.perf_counter() - t0
        diffs = np.array([100 * r.result.power - ref for r, (_, ref) in zip(rows, SENSITIVITY_REFERENCE)])
        worst = float(np.max(np.abs(diffs)))
        ok = len(rows) == 26 and worst <= 0.3 and elapsed < 30
        _record(2, ok, f"26 rows, max |diff| {worst:.3f} pp (tol 0.3), {elapsed:.1f} s")
        assert ok

    def test_c03_validation_predictions(self):
        t0 = time.perf_counter()
        diffs = np.array([100 * power_iu(_scenario_query(row)).power - row[-1] for row in VALIDATION_SCENARIOS])
        elapsed = time.perf_counter() - t0
        worst = float(np.max(np.abs(diffs)))
        ok = len(diffs) == 27 and worst <= 0.5 and elapsed < 30
        _record(3, ok, f"27 rows, max |diff| {worst:.3f} pp (tol 0.5), {elapsed:.1f} s")
        assert ok

    def test_c04_omnibus_calibration(self):
        eff = [0.052, 0.102]
        documented = power_omnibus(_home_query(effects=eff, test="omnibus", noncentrality="per-cluster"))
        pct = 100 * documented.power
        alternates = {}
        for nc in ("fgls", "per-cluster"):
            for rule, df in (("paper-default", None), ("custom", 13.0), ("custom", 14.0), ("normal", None)):
                q = _home_query(effects=eff, test="omnibus", noncentrality=nc, df_rule=rule, df=df)
                label = f"{nc}/{'chi2' if rule == 'normal' else int(power_omnibus(q).df)}"
                alternates[label] = 100 * power_omnibus(q).power
        ok = abs(pct - 86.5) <= 1.5
        best = min(alternates.values(), key=lambda v: abs(v - 86.5))
        ok_build = ok or abs(best - 86.5) <= 3.0
        alt = ", ".join(f"{k} {v:.1f}%" for k, v in alternates.items())
        _record(4, ok and ok_build, f"F(2,12), per-cluster noncentrality: {pct:.2f}% (target 86.5 +/- 1.5); {alt}")
        assert ok

    def test_c05_oracle_equivalence(self):
        rng = np.random.default_rng(5)
        t0 = time.perf_counter()
        worst = {"general": 0.0, "common-effect": 0.0, "both": 0.0, "common-icc": 0.0}
        for mode in MODES:
            for _ in range(200):
                sched = random_schedule(rng)
                dc = design_constants(sched)
                L = int(rng.integers(1, 4))
                icc = random_icc(rng, L, mode)
                sd = rng.uniform(0.5, 3.0, L)
                vc = icc_to_variance_components(icc, sd)
                worst["general"] = max(worst["general"], relerr(
                    effect_covariance(sched, icc, sd).omega, brute_force_covariance(sched, vc, mode).omega))
                ce = variance_common_effect(dc, icc, sched.I, sched.T, sched.N)
                ce_ref = brute_force_covariance(sched, vc, mode, common_effect=True).omega[0, 0]
                worst["common-effect"] = max(worst["common-effect"], abs(ce / ce_ref - 1))
                Lc, p, icc_c = random_common_params(rng, mode, sched.N, sched.T)
                vc_c = icc_to_variance_components(icc_c, 1.0)
                both = variance_both_common(dc, p, 1.0, sched.I, sched.T, sched.N, Lc, mode, scaled=True)
                both_ref = brute_force_covariance(sched, vc_c, mode, common_effect=True).omega[0, 0]
                worst["both"] = max(worst["both"], abs(both / both_ref - 1))
                om_c = covariance_common_icc(dc, p, 1.0, sched.I, sched.T, sched.N, Lc, mode).omega
                worst["common-icc"] = max(worst["common-icc"], relerr(om_c, brute_force_covariance(sched, vc_c, mode).omega))
        elapsed = time.perf_counter() - t0
        ok = max(worst.values()) < 1e-8 and elapsed < 120
        detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
        _record(5, ok, f"200 configs x 2 modes, max rel err: {detail}; {elapsed:.1f} s")
        assert ok

    def test_c06_theorem_suite(self):
        rng = np.random.default_rng(6)
        violations = 0
        eq_worst = 0.0
        gap_min = math.inf
        for mode in MODES:
            for _ in range(500):
                sched = random_schedule(rng, I_max=30, N_max=30)
                dc = design_constants(sched)
                I, T, N = sched.I, sched.T, sched.N
                L, p, icc = random_common_params(rng, mode, N, T)
                extra = {"rho2": p["rho2"]} if mode == CLOSED_COHORT else {}
                hg = variance_hooper_girling(dc, I, T, N, mode, rho0=p["rho0"], rho1=p["rho1"], **extra)
                diag_general = effect_covariance(sched, icc).omega[0, 0]
                diag_icc = variance_common_icc_diag(dc, p, 1.0, I, T, N, L, mode)
                if diag_general > hg * (1 + 1e-12) or diag_icc > hg * (1 + 1e-12):
                    violations += 1
                both = variance_both_common(dc, p, 1.0, I, T, N, L, mode)
                if not both < diag_icc:
                    violations += 1
                gap_min = min(gap_min, 1 - both / diag_icc)
                # constructed case on the tau-lambda proportional surface
                L, p, icc = random_common_params(rng, mode, N, T, proportional=True)
                extra = {"rho2": p["rho2"]} if mode == CLOSED_COHORT else {}
                hg = variance_hooper_girling(dc, I, T, N, mode, rho0=p["rho0"], rho1=p["rho1"], **extra)
                eq = max(abs(variance_common_icc_diag(dc, p, 1.0, I, T, N, L, mode) / hg - 1),
                          abs(effect_covariance(sched, icc).omega[0, 0] / hg - 1))
                eq_worst = max(eq_worst, eq)
                if eq > 1e-10:
                    violations += 1
        ok = violations == 0
        _record(6, ok, f"500 configs x 2 modes: {violations} violations; equality cases max rel dev {eq_worst:.1e}; "
                       f"min relative gain of common effect {gap_min:.2e}")
        assert ok

    def test_c07_limiting_variance(self):
        sched = build_standard_schedule(4, 4, 5, 12)
        dc = design_constants(sched)
        base = IccSet.from_params(HOME_RHO0, HOME_RHO1, 0.0, 0.0, HOME_RHO2_12)
        errs = {}
        for cac in (0.2, 0.5, 0.8):
            icc = apply_cac(base, cac)
            big = covariance_cross_sectional(dc, icc, 1.0, sched.I, sched.T, 10**6).omega
            errs[cac] = relerr(big, limiting_covariance(dc, icc, 1.0, sched.I, sched.T))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            degenerate = apply_cac(base, 1.0)
        try:
            limiting_covariance(dc, degenerate, 1.0, sched.I, sched.T)
            raised = False
        except DegenerateLimitError:
            raised = True
        ok = max(errs.values()) < 1e-3 and raised
        detail = ", ".join(f"CAC {c}: {e:.1e}" for c, e in errs.items())
        _record(7, ok, f"N=1e6 vs limit rel err {detail}; CAC=1 degenerate error raised: {raised}")
        assert ok

    def test_c08_em_correctness(self):
        t0 = time.perf_counter()
        # (a) monotone log-likelihood on 50 small random datasets
        rng = np.random.default_rng(0)
        worst_drop = 0.0
        fitted = 0
        k = 0
        while fitted < 50:
            mode = MODES[k % 2]
            k += 1
            r0 = rng.uniform(0.01, 0.2, 2)
            r1 = r0 * rng.uniform(0, 1, 2)
            r012 = rng.uniform(-0.3, 0.5) * r0.min()
            extra = dict(design="cc", rho2=rng.uniform(0.2, 0.5, 2), rho21_between=0.05) if mode == CLOSED_COHORT else {}
            icc = IccSet.from_params(r0, r1, r012, r012 * rng.uniform(0, 1), rng.uniform(0.1, 0.7), **extra)
            try:
                icc.validate()
            except ValueError:
                continue
            T = int(rng.integers(3, 6))
            sc = SimScenario(T - 1, int(rng.integers(1, 3)), T, int(rng.integers(2, 6)), icc, (0.3, 0.2),
                             replicates=1, base_seed=k)
            fit = fit_em(generate_dataset(sc, 0), controls=FitControls(se_method="none", tol=1e-8, max_iter=500))
            ll = np.asarray(fit.loglik_trace)
            worst_drop = min(worst_drop, float(np.min(np.diff(ll) / np.abs(ll[1:]))))
            fitted += 1
        # allow only floating-point roundoff in the relative change
        ok_a = worst_drop >= -1e-12

        # (b) recovery on one large dataset
        icc = IccSet.from_params([0.02, 0.02], [0.01, 0.01], 0.01, 0.005, 0.2)
        sc = SimScenario(3, 20, 4, 25, icc, (0.3, 0.3), replicates=1, base_seed=2024)
        data = generate_dataset(sc, 0)
        fit = fit_em(data, controls=FitControls(se_method="fgls"))
        est = fit.icc()
        icc_err = max(float(np.max(np.abs(getattr(est, n) - getattr(icc, n)))) for n in ("rho0", "rho1", "rho2"))
        formula_sd = effect_covariance(sc.schedule(), icc, sc.sd).sd
        z = (fit.delta - np.asarray(sc.effects) * sc.sd) / formula_sd
        ok_b = icc_err <= 0.02 and bool(np.all(np.abs(z) <= 2))

        # (c) numerical-Hessian SE at the true parameters vs the closed form
        vc = icc_to_variance_components(icc, sc.sd)
        truth = ModelParams(np.tile(secular_trend(4)[:, None], (1, 2)), np.asarray(sc.effects) * sc.sd, vc)
        se, _ = standard_errors(data, truth, method="hessian")
        se_rel = float(np.max(np.abs(se / formula_sd - 1)))
        ok_c = se_rel <= 0.10
        elapsed = time.perf_counter() - t0
        ok = ok_a and ok_b and ok_c and elapsed < 300
        _record(8, ok, f"(a) 50 fits, worst rel loglik change {worst_drop:.1e}; (b) max ICC err {icc_err:.4f}, "
                       f"|z| {np.abs(z).max():.2f}; (c) SE rel dev {se_rel:.3f}; {elapsed:.1f} s")
        assert ok

    @pytest.mark.slow
    def test_c09_simulation_validation(self):
        t0 = time.perf_counter()
        R = 500
        alpha = 0.05
        type1_bound = alpha + 3 * math.sqrt(alpha * (1 - alpha) / R)
        parts = []
        ok = True
        for idx in SIMULATION_ROWS:
            row = VALIDATION_SCENARIOS[idx]
            rep = run_power_study(_scenario_sim(row, R))
            gap = 100 * rep.discrepancy
            e1 = run_type1_study(_scenario_sim(row, R, "first-zero")).empirical
            e2 = run_type1_study(_scenario_sim(row, R, "second-zero")).empirical
            ok &= abs(gap) <= 4.0 and max(e1, e2) <= type1_bound and not rep.invalid
            parts.append(f"row {idx + 1}: emp {100 * rep.empirical:.1f}% vs pred {100 * rep.predicted:.1f}% "
                         f"(gap {gap:+.1f}), type-I ({100 * e1:.1f}, {100 * e2:.1f})%")
        elapsed = time.perf_counter() - t0
        ok &= elapsed < 1800
        _record(9, ok, "; ".join(parts) + f"; type-I bound {100 * type1_bound:.2f}%; {elapsed:.0f} s")
        assert ok

    def test_c10_property_suites(self):
        t0 = time.perf_counter()
        cases = 1000
        failures = {}
        for name, check in PROPERTIES.items():
            bad = 0
            for seed in range(cases):
                try:
                    check(seed)
                except AssertionError:
                    bad += 1
            failures[name] = bad
        elapsed = time.perf_counter() - t0
        ok = not any(failures.values())
        detail = ", ".join(f"{k} {cases - v}/{cases}" for k, v in failures.items())
        _record(10, ok, f"{detail}; {elapsed:.0f} s")
        assert ok
