"""Power and sample size for co-primary endpoints in stepped-wedge trials.

Three tests are supported:

* ``iu``: intersection-union test; reject when every endpoint's Wald t
  statistic exceeds its critical value.
* ``omnibus``: quadratic Wald test of delta = 0 against a noncentral F.
* ``common-effect``: single shared standardized effect delta'.
"""

from __future__ import annotations

import csv
import io
import itertools
import math
import os
import re
import tempfile
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import stats

from .correlation import IccSet, apply_cac
from .design import DesignSchedule, build_standard_schedule, design_constants
from .errors import InfeasibleError, ValidationError
from .mvt import RectProbSpec, mvt_rect_prob, noncentral_t_cdf, t_quantile
from .variance import EffectCovariance, effect_covariance, variance_common_effect

TESTS = ("iu", "omnibus", "common-effect")
DF_RULES = ("paper-default", "normal", "custom")
NONCENTRALITY = ("fgls", "per-cluster")


@dataclass(frozen=True)
class PowerQuery:
    """Inputs for one power evaluation.

    ``effects`` are on the outcome scale (delta_l); with ``marginal_sd`` left
    at 1 they are standardized effects delta_l / sigma_yl.  For the
    common-effect test ``effects`` holds the single shared delta'.
    ``margins`` are noninferiority margins on the same scale as ``effects``.
    """

    design: DesignSchedule
    icc: IccSet
    effects: np.ndarray
    marginal_sd: np.ndarray | float = 1.0
    alpha: float = 0.05
    test: str = "iu"
    margins: np.ndarray | None = None
    df_rule: str = "paper-default"
    df: float | None = None
    two_sided: bool = False
    noncentrality: str = "fgls"
    t_form: str = "noncentral"
    accuracy: float = 1e-4
    seed: int = 20240101

    def __post_init__(self):
        if self.test not in TESTS:
            raise ValidationError(f"test must be one of {TESTS}, got {self.test!r}")
        if self.df_rule not in DF_RULES:
            raise ValidationError(f"df_rule must be one of {DF_RULES}")
        if self.df_rule == "custom" and (self.df is None or self.df <= 0):
            raise ValidationError("df_rule='custom' needs a positive df")
        if self.noncentrality not in NONCENTRALITY:
            raise ValidationError(f"noncentrality must be one of {NONCENTRALITY}")
        if not 0.0 < self.alpha < 1.0:
            raise ValidationError("alpha must lie in (0, 1)")
        eff = np.atleast_1d(np.asarray(self.effects, dtype=float))
        L = self.icc.L
        want = 1 if self.test == "common-effect" else L
        if eff.shape != (want,):
            raise ValidationError(f"expected {want} effect value(s) for test {self.test!r}, got {eff.size}")
        sd = np.broadcast_to(np.asarray(self.marginal_sd, dtype=float), (L,)).copy()
        if np.any(sd <= 0):
            raise ValidationError("marginal SDs must be positive")
        marg = np.zeros(want) if self.margins is None else np.atleast_1d(np.asarray(self.margins, dtype=float))
        if marg.shape != (want,):
            raise ValidationError("margins must match the effects vector")
        for name, v in (("effects", eff), ("marginal_sd", sd), ("margins", marg)):
            v.setflags(write=False)
            object.__setattr__(self, name, v)

    @property
    def L(self) -> int:
        return self.icc.L

    def with_design(self, design: DesignSchedule) -> PowerQuery:
        return replace(self, design=design)


@dataclass(frozen=True)
class PowerResult:
    power: float
    eta: np.ndarray
    critical_values: np.ndarray
    covariance: np.ndarray
    error: float
    df: float
    test: str
    converged: bool = True
    noncentrality: float | None = None
    extra: dict = field(default_factory=dict)

    def summary(self) -> str:
        c = ", ".join(f"{v:.4f}" for v in self.critical_values)
        e = ", ".join(f"{v:.4f}" for v in self.eta)
        lines = [
            f"test: {self.test}",
            f"power: {100 * self.power:.1f}%  (integration error {self.error:.1e})",
            f"df: {self.df:g}",
            f"critical values: {c}",
            f"eta: {e}",
        ]
        if self.noncentrality is not None:
            lines.append(f"noncentrality: {self.noncentrality:.4f}")
        return "\n".join(lines)


def resolve_df(test: str, I: int, L: int, df_rule: str = "paper-default", df: float | None = None) -> float:
    """Reference degrees of freedom: I - 2L (IU, omnibus) or I - L - 1 (common effect)."""
    if df_rule == "normal":
        return math.inf
    if df_rule == "custom":
        if df is None or df <= 0:
            raise ValidationError("custom df must be positive")
        return float(df)
    nu = I - L - 1 if test == "common-effect" else I - 2 * L
    if nu < 1:
        raise ValidationError(f"degrees of freedom {nu} < 1 for I={I}, L={L} ({test} test)")
    return float(nu)


def critical_values(alpha: float, I: int, L: int, df_rule: str = "paper-default", *, df: float | None = None,
                    test: str = "iu", two_sided: bool = False) -> np.ndarray:
    """Common critical value c_1 = ... = c_L = t_alpha(df), unadjusted for multiplicity."""
    nu = resolve_df(test, I, L, df_rule, df)
    a = alpha / 2 if two_sided else alpha
    k = 1 if test == "common-effect" else L
    return np.full(k, t_quantile(a, nu))


def _covariance(q: PowerQuery) -> EffectCovariance:
    q.icc.validate()
    return effect_covariance(q.design, q.icc, q.marginal_sd)


def power_iu(q: PowerQuery) -> PowerResult:
    """Probability that every endpoint's Wald statistic clears its critical value."""
    cov = _covariance(q)
    sd = cov.sd
    eta = (q.effects - q.margins) / sd
    nu = resolve_df("iu", q.design.I, q.L, q.df_rule, q.df)
    c = critical_values(q.alpha, q.design.I, q.L, q.df_rule, df=q.df, two_sided=q.two_sided)
    spec = RectProbSpec(
        lower=c,
        upper=np.full(q.L, np.inf),
        correlation=cov.correlation,
        df=nu,
        mean=eta,
        accuracy=q.accuracy,
        seed=q.seed,
        form=q.t_form,
    )
    res = mvt_rect_prob(spec)
    return PowerResult(res.probability, eta, c, cov.omega, res.error, nu, "iu", res.converged,
                       extra={"method": res.method})


def power_omnibus(q: PowerQuery) -> PowerResult:
    """Power of the Wald chi-square/F test of delta = 0.

    The statistic delta_hat' Omega^{-1} delta_hat / L is referred to
    F(L, I - 2L) (or chi-square_L / L under ``df_rule='normal'``).  The
    noncentrality is delta' Omega^{-1} delta by default; the
    ``'per-cluster'`` convention multiplies it by I, treating Omega as the
    covariance contributed by a single cluster.
    """
    cov = _covariance(q)
    d = q.effects - q.margins
    ncp = float(d @ np.linalg.solve(cov.omega, d))
    if q.noncentrality == "per-cluster":
        ncp *= q.design.I
    L = q.L
    nu = resolve_df("omnibus", q.design.I, L, q.df_rule, q.df)
    if math.isinf(nu):
        crit = float(stats.chi2.isf(q.alpha, L))
        power = float(stats.ncx2.sf(crit, L, ncp)) if ncp > 0 else q.alpha
    else:
        crit = float(stats.f.isf(q.alpha, L, nu))
        power = float(stats.ncf.sf(crit, L, nu, ncp)) if ncp > 0 else q.alpha
    eta = d / cov.sd
    return PowerResult(power, eta, np.array([crit]), cov.omega, 0.0, nu, "omnibus", True, ncp,
                       extra={"noncentrality_rule": q.noncentrality})


def power_common_effect(q: PowerQuery) -> PowerResult:
    """One-sided t power for the shared standardized effect, DF = I - L - 1."""
    q.icc.validate()
    dc = design_constants(q.design)
    var = variance_common_effect(dc, q.icc, q.design.I, q.design.T, q.design.N)
    nu = resolve_df("common-effect", q.design.I, q.L, q.df_rule, q.df)
    c = critical_values(q.alpha, q.design.I, q.L, q.df_rule, df=q.df, test="common-effect",
                        two_sided=q.two_sided)
    eta = abs(float(q.effects[0] - q.margins[0])) / math.sqrt(var)
    power = 1.0 - noncentral_t_cdf(float(c[0]), nu, eta)
    return PowerResult(float(power), np.array([eta]), c, np.array([[var]]), 0.0, nu, "common-effect")


def compute_power(q: PowerQuery) -> PowerResult:
    return {"iu": power_iu, "omnibus": power_omnibus, "common-effect": power_common_effect}[q.test](q)


# ---------------------------------------------------------------------------
# sample size search


@dataclass(frozen=True)
class SampleSizeResult:
    I: int  # noqa: E741
    N: int
    power: float
    feasible: bool
    evaluations: int
    result: PowerResult | None = None


def _standard_query(template: PowerQuery, S: int, I: int, N: int) -> PowerQuery:  # noqa: E741
    sched = build_standard_schedule(S, I // S, template.design.T, N)
    return template.with_design(sched)


def sample_size_search(
    target_power: float,
    template: PowerQuery,
    *,
    num_sequences: int | None = None,
    I_max: int = 200,
    I_min: int = 1,
    N_max: int = 25,
    N_min: int = 1,
    order: str = "I-first",
) -> SampleSizeResult:
    """Smallest standard design reaching ``target_power``.

    ``order='I-first'`` scans I over multiples of the number of sequences and
    returns the smallest I for which some N <= N_max suffices, paired with the
    smallest such N.  ``order='N-first'`` does the converse.  Raises
    InfeasibleError (carrying the best design evaluated) if no design
    within the caps reaches the target.  ``I_min`` skips smaller cluster
    counts (e.g. to pin I and search N only, set I_min = I_max = I).
    """
    if not template.alpha < target_power < 1.0:
        raise ValidationError(f"target power must lie in (alpha, 1), got {target_power}")
    if order not in ("I-first", "N-first"):
        raise ValidationError("order must be 'I-first' or 'N-first'")
    S = num_sequences if num_sequences is not None else len(template.design.sequences)
    T = template.design.T
    if T < S + 1:
        raise ValidationError(f"T={T} cannot host {S} sequences")
    if N_min < 1 or N_max < N_min:
        raise ValidationError("need 1 <= N_min <= N_max")
    L = template.L
    min_df = L + 2 if template.test == "common-effect" else 2 * L + 1
    if template.df_rule != "paper-default":
        min_df = 1
    I_grid = [I for I in range(S, I_max + 1, S) if I >= max(min_df, I_min)]
    if not I_grid:
        raise ValidationError(f"I_max={I_max} leaves no admissible cluster count")
    evals = 0
    best = None
    cache = {}

    def power_at(I, N):  # noqa: E741
        nonlocal evals, best
        if (I, N) not in cache:
            evals += 1
            res = compute_power(_standard_query(template, S, I, N))
            cache[(I, N)] = res
            if best is None or res.power > best[2]:
                best = (I, N, res.power)
        return cache[(I, N)]

    def smallest(values, f):
        """Smallest v in sorted ``values`` with f(v) >= target, assuming monotone f."""
        if power_at(*f(values[-1])).power < target_power:
            return None
        lo, hi = 0, len(values) - 1
        while lo < hi:
            mid = (lo + hi) // 2
            if power_at(*f(values[mid])).power >= target_power:
                hi = mid
            else:
                lo = mid + 1
        return values[lo]

    Ns = list(range(N_min, N_max + 1))
    if order == "I-first":
        for I in I_grid:  # noqa: E741
            N = smallest(Ns, lambda n: (I, n))
            if N is not None:
                r = power_at(I, N)
                return SampleSizeResult(I, N, r.power, True, evals, r)
    else:
        for N in Ns:
            I = smallest(I_grid, lambda i: (i, N))  # noqa: E741
            if I is not None:
                r = power_at(I, N)
                return SampleSizeResult(I, N, r.power, True, evals, r)
    bI, bN, bp = best
    raise InfeasibleError(
        f"no design with I <= {I_max}, N <= {N_max} reaches power {target_power:.3f} "
        f"(best {100 * bp:.1f}% at I={bI}, N={bN})",
        best=SampleSizeResult(bI, bN, bp, False, evals, cache[(bI, bN)]),
    )


# ---------------------------------------------------------------------------
# sensitivity sweeps

_AXIS_RE = re.compile(r"^(rho0|rho1|rho2|rho21)_(\d+(?:_\d+)?)$")


def _axis_indices(suffix: str, L: int):
    if "_" in suffix:
        parts = [int(p) for p in suffix.split("_")]
    elif L < 10:
        parts = [int(ch) for ch in suffix]
    else:
        raise ValidationError(f"with L >= 10 write axis indices as e.g. rho0_10_11 (got {suffix!r})")
    if len(parts) not in (1, 2) or any(not 1 <= p <= L for p in parts):
        raise ValidationError(f"axis index {suffix!r} out of range for L={L}")
    return [p - 1 for p in parts]


def apply_icc_overrides(icc: IccSet, overrides: dict) -> IccSet:
    """Return a copy of ``icc`` with named entries replaced.

    Names: ``rho0_l``, ``rho1_l`` (endpoint-specific), ``rho0_lm``,
    ``rho1_lm``, ``rho2_lm`` (between-endpoint), and for closed cohorts
    ``rho2_l`` (intra-subject, endpoint-specific) and ``rho21_lm``.  A
    ``cac`` entry is applied last, after all within-period overrides.
    """
    mats = {"rho0": icc.rho0.copy(), "rho1": icc.rho1.copy(), "rho2": icc.rho2.copy(),
            "rho2prime": None if icc.rho2prime is None else icc.rho2prime.copy()}
    cac = None
    for name, value in overrides.items():
        if name == "cac":
            cac = float(value)
            continue
        m = _AXIS_RE.match(name)
        if not m:
            raise ValidationError(f"unknown sensitivity axis {name!r}")
        kind, idx = m.group(1), _axis_indices(m.group(2), icc.L)
        if len(idx) == 1:
            l = idx[0]  # noqa: E741
            if kind in ("rho0", "rho1"):
                target = mats[kind]
            elif kind == "rho2" and icc.closed_cohort:
                target = mats["rho2prime"]
            else:
                raise ValidationError(f"axis {name!r} is not defined for a {icc.design_kind} design")
            target[l, l] = float(value)
        else:
            l, m2 = idx
            if l == m2:
                raise ValidationError(f"between-endpoint axis {name!r} needs two distinct endpoints")
            if kind == "rho21":
                if not icc.closed_cohort:
                    raise ValidationError(f"axis {name!r} needs a closed-cohort design")
                target = mats["rho2prime"]
            else:
                target = mats[kind]
            target[l, m2] = target[m2, l] = float(value)
    out = IccSet(icc.design_kind, mats["rho0"], mats["rho1"], mats["rho2"], mats["rho2prime"])
    if cac is not None:
        out = apply_cac(out, cac)
    return out


@dataclass(frozen=True)
class SweepRow:
    values: dict
    result: PowerResult


def _point_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def sensitivity_sweep(base: PowerQuery, grid: dict | None = None, *, points: list[dict] | None = None) -> list[SweepRow]:
    """Evaluate power over ICC perturbations.

    ``grid`` maps axis names to value lists and is expanded as a Cartesian
    product; ``points`` lists explicit override dicts (one row each).  Both
    may be given; grid rows come first.  With neither, the base query is
    evaluated once.
    """
    combos: list[dict] = []
    if grid:
        names = list(grid)
        for vals in itertools.product(*(list(grid[n]) for n in names)):
            combos.append(dict(zip(names, vals)))
    if points:
        combos.extend(dict(p) for p in points)
    if not combos:
        combos = [{}]
    rows = []
    for i, over in enumerate(combos):
        icc = apply_icc_overrides(base.icc, over)
        q = replace(base, icc=icc, seed=_point_seed(base.seed, i))
        rows.append(SweepRow(over, compute_power(q)))
    return rows


def sweep_to_csv(rows: list[SweepRow], path=None, *, seed: int | None = None) -> str:
    """Render sweep rows as RFC-4180 CSV; write atomically when ``path`` is given."""
    axes: list[str] = []
    for r in rows:
        for k in r.values:
            if k not in axes:
                axes.append(k)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    header = axes + ["power", "mc_error", "df", "c"] + (["seed"] if seed is not None else [])
    w.writerow(header)
    for r in rows:
        res = r.result
        line = [r.values.get(a, "") for a in axes]
        line += [f"{100 * res.power:.1f}", f"{100 * res.error:.3f}", f"{res.df:g}", f"{res.critical_values[0]:.6f}"]
        if seed is not None:
            line.append(seed)
        w.writerow(line)
    text = buf.getvalue()
    if path is not None:
        atomic_write(path, text)
    return text


def atomic_write(path, text: str) -> None:
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


__all__ = [
    "PowerQuery",
    "PowerResult",
    "SampleSizeResult",
    "SweepRow",
    "apply_icc_overrides",
    "compute_power",
    "critical_values",
    "power_common_effect",
    "power_iu",
    "power_omnibus",
    "resolve_df",
    "sample_size_search",
    "sensitivity_sweep",
    "sweep_to_csv",
]
