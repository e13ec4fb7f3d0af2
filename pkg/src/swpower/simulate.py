"""Monte Carlo checks of the power formulas: simulate trials, fit by EM, count rejections."""

from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .correlation import IccSet, icc_to_variance_components
from .design import DesignSchedule, build_standard_schedule
from .errors import SwpowerError, ValidationError
from .mlmm import FitControls, TrialDataset, fit_em
from .power import PowerQuery, atomic_write, power_iu

NULL_PATTERNS = ("none", "first-zero", "second-zero", "all-zero")


def secular_trend(T: int, kind="geometric") -> np.ndarray:
    """Period means shared by all endpoints.

    ``"geometric"``: mu_1 = 0 and mu_{j+1} - mu_j = 0.1 * 0.5^(j-1), a small
    increasing trend.  ``"none"``: all zero.  An explicit length-T sequence is
    returned unchanged.
    """
    if isinstance(kind, str):
        if kind == "none":
            return np.zeros(T)
        if kind == "geometric":
            inc = 0.1 * 0.5 ** np.arange(T - 1)
            return np.concatenate([[0.0], np.cumsum(inc)])
        raise ValidationError(f"unknown trend {kind!r}")
    mu = np.asarray(kind, dtype=float)
    if mu.shape != (T,):
        raise ValidationError(f"trend must have length T={T}")
    return mu


@dataclass(frozen=True)
class SimScenario:
    num_sequences: int
    clusters_per_sequence: int
    T: int
    N: int
    icc: IccSet
    effects: tuple  # standardized, delta_l / sigma_yl
    variances: tuple | float = 4.0
    trend: str | tuple = "geometric"
    alpha: float = 0.05
    replicates: int = 500
    base_seed: int = 2024
    null: str = "none"
    se_method: str = "fgls"
    tol: float = 1e-5
    max_iter: int = 5000

    def __post_init__(self):
        if self.replicates < 1:
            raise ValidationError("replicates must be >= 1")
        if self.null not in NULL_PATTERNS:
            raise ValidationError(f"null pattern must be one of {NULL_PATTERNS}")
        L = self.icc.L
        eff = tuple(float(e) for e in np.broadcast_to(np.asarray(self.effects, dtype=float), (L,)))
        var = tuple(float(v) for v in np.broadcast_to(np.asarray(self.variances, dtype=float), (L,)))
        if any(v <= 0 for v in var):
            raise ValidationError("variances must be positive")
        if self.null in ("first-zero", "second-zero") and L < (1 if self.null == "first-zero" else 2):
            raise ValidationError(f"null pattern {self.null!r} needs more endpoints")
        object.__setattr__(self, "effects", eff)
        object.__setattr__(self, "variances", var)
        self.icc.validate()
        self.schedule()  # validates dimensions

    @property
    def L(self) -> int:
        return self.icc.L

    @property
    def I(self) -> int:  # noqa: E743
        return self.num_sequences * self.clusters_per_sequence

    @property
    def sd(self) -> np.ndarray:
        return np.sqrt(np.asarray(self.variances))

    def schedule(self) -> DesignSchedule:
        return build_standard_schedule(self.num_sequences, self.clusters_per_sequence, self.T, self.N)

    def true_effects(self) -> np.ndarray:
        """Standardized effects after applying the null pattern."""
        e = np.array(self.effects)
        if self.null == "first-zero":
            e[0] = 0.0
        elif self.null == "second-zero":
            e[1] = 0.0
        elif self.null == "all-zero":
            e[:] = 0.0
        return e


def _factor(M):
    w, U = np.linalg.eigh((M + M.T) / 2)
    return U * np.sqrt(np.clip(w, 0.0, None))


def cluster_rng(base_seed: int, replicate: int, cluster: int) -> np.random.Generator:
    """Counter-based stream keyed by (base seed, replicate, cluster)."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([base_seed, replicate, cluster])))


def generate_dataset(scenario: SimScenario, replicate_index: int) -> TrialDataset:
    sc = scenario
    vc = icc_to_variance_components(sc.icc, sc.sd)
    sched = sc.schedule()
    X = sched.treatment
    I, T, N, L = sched.I, sched.T, sched.N, sc.L
    mu = secular_trend(T, sc.trend)
    delta = sc.true_effects() * sc.sd
    Fb, Fs, Fe = _factor(vc.sigma_b), _factor(vc.sigma_s), _factor(vc.sigma_eps)
    Fg = _factor(vc.sigma_gamma) if vc.closed_cohort else None
    ys = np.empty((I, T, N, L))
    for i in range(I):
        rng = cluster_rng(sc.base_seed, replicate_index, i)
        b = rng.standard_normal(L) @ Fb.T
        s = rng.standard_normal((T, L)) @ Fs.T
        eps = rng.standard_normal((T, N, L)) @ Fe.T
        y = mu[:, None, None] + X[i][:, None, None] * delta + b + s[:, None, :] + eps
        if Fg is not None:
            y = y + (rng.standard_normal((N, L)) @ Fg.T)[None, :, :]
        ys[i] = y
    ci, pj, sk = np.meshgrid(np.arange(I), np.arange(T), np.arange(N), indexing="ij")
    return TrialDataset(
        ci.ravel(), pj.ravel(), sk.ravel(), X[ci.ravel(), pj.ravel()], ys.reshape(-1, L), sc.icc.design_kind, T
    )


@dataclass
class SimReport:
    scenario: SimScenario
    kind: str  # "power" or "type1"
    rejections: int
    valid: int
    failed: int
    predicted: float
    elapsed: float
    diagnostics: list = field(default_factory=list)

    @property
    def empirical(self) -> float:
        return self.rejections / self.valid if self.valid else float("nan")

    @property
    def se(self) -> float | None:
        """Binomial SE sqrt(p (1 - p) / R); undefined (None) for fewer than two replicates."""
        if self.valid < 2:
            return None
        p = self.empirical
        return math.sqrt(p * (1 - p) / self.valid)

    @property
    def discrepancy(self) -> float:
        return self.empirical - self.predicted

    @property
    def invalid(self) -> bool:
        """More than 2% of replicates failed to fit."""
        total = self.valid + self.failed
        return total == 0 or self.failed > 0.02 * total


def _predicted(sc: SimScenario) -> float:
    q = PowerQuery(sc.schedule(), sc.icc, sc.true_effects(), alpha=sc.alpha)
    return power_iu(q).power


def _run(sc: SimScenario, kind: str, progress=None) -> SimReport:
    from .power import critical_values

    t0 = time.perf_counter()
    c = critical_values(sc.alpha, sc.I, sc.L)[0]
    controls = FitControls(tol=sc.tol, max_iter=sc.max_iter, se_method=sc.se_method)
    rej = valid = failed = 0
    diags = []
    for r in range(sc.replicates):
        try:
            data = generate_dataset(sc, r)
            fit = fit_em(data, controls=controls)
        except SwpowerError as exc:
            failed += 1
            diags.append({"replicate": r, "converged": False, "error": str(exc)})
            continue
        if not fit.converged:
            failed += 1
            diags.append({"replicate": r, "converged": False, "iterations": fit.iterations})
            continue
        valid += 1
        hit = bool(np.all(fit.wald > c))
        rej += hit
        diags.append({"replicate": r, "converged": True, "iterations": fit.iterations, "clips": fit.clips,
                      "reject": hit})
        if progress is not None:
            progress(r)
    return SimReport(sc, kind, rej, valid, failed, _predicted(sc), time.perf_counter() - t0, diags)


def run_power_study(scenario: SimScenario, progress=None) -> SimReport:
    """Empirical IU-test power: proportion of replicates where every Wald statistic exceeds t_alpha(I - 2L)."""
    if scenario.null != "none":
        raise ValidationError("power study needs null pattern 'none'; use run_type1_study")
    return _run(scenario, "power", progress)


def run_type1_study(scenario: SimScenario, progress=None) -> SimReport:
    """Empirical rejection rate with one or more effects set to zero."""
    if scenario.null == "none":
        raise ValidationError("type-I study needs a null pattern other than 'none'")
    return _run(scenario, "type1", progress)


REPORT_COLUMNS = ["rho2_12", "rho0", "rho1", "rho0_12", "rho1_12", "effects", "I", "N", "T", "null", "reps",
                  "valid", "failed", "empirical", "se", "predicted", "discrepancy", "invalid", "seed"]


def reports_to_csv(reports: list[SimReport], path=None, *, append: bool = False) -> str:
    """Table-4-style rows, RFC-4180 CSV (percent scale for rates)."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    if not append:
        w.writerow(REPORT_COLUMNS)
    for rep in reports:
        sc = rep.scenario
        icc = sc.icc
        L = icc.L
        off = (0, 1) if L > 1 else (0, 0)
        w.writerow([
            f"{icc.rho2[off]:g}",
            " ".join(f"{v:g}" for v in np.diag(icc.rho0)),
            " ".join(f"{v:g}" for v in np.diag(icc.rho1)),
            f"{icc.rho0[off]:g}" if L > 1 else "",
            f"{icc.rho1[off]:g}" if L > 1 else "",
            " ".join(f"{v:g}" for v in sc.true_effects()),
            sc.I, sc.N, sc.T, sc.null, sc.replicates, rep.valid, rep.failed,
            f"{100 * rep.empirical:.1f}",
            "" if rep.se is None else f"{100 * rep.se:.2f}",
            f"{100 * rep.predicted:.1f}",
            f"{100 * rep.discrepancy:.1f}",
            int(rep.invalid),
            sc.base_seed,
        ])
    text = buf.getvalue()
    if path is not None:
        if append:
            with open(path, "a", newline="") as fh:
                fh.write(text)
        else:
            atomic_write(path, text)
    return text


__all__ = [
    "NULL_PATTERNS",
    "SimReport",
    "SimScenario",
    "cluster_rng",
    "generate_dataset",
    "reports_to_csv",
    "run_power_study",
    "run_type1_study",
    "secular_trend",
]
