"""Multivariate linear mixed model for stepped-wedge data, fitted by EM.

Model for subject k in cluster i, period j (L-vector outcome):

    y_ijk = mu_j + X_ij delta + b_i + s_ij (+ gamma_ik) + eps_ijk

with b ~ N(0, Sigma_b), s ~ N(0, Sigma_s), gamma ~ N(0, Sigma_gamma) in
closed cohorts, and eps ~ N(0, Sigma_eps).  ``mu_j`` are cell-coded period
means (beta_0 + beta_j).  In the common-effect model the treatment term is
X_ij diag(Sigma_eps)^{1/2} delta'.

The random effects of a cluster are stacked in "slots": slot 0 holds b_i,
slots 1..T hold s_i1..s_iT and, for closed cohorts, slots T+1.. hold the
subject effects.  Z_i is the observation-by-slot indicator matrix.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import linalg

from .correlation import (
    CLOSED_COHORT,
    CROSS_SECTIONAL,
    IccSet,
    VarianceComponents,
    canonical_mode,
    variance_components_to_icc,
)
from .errors import IdentifiabilityError, SingularMatrixError, ValidationError

LOG2PI = math.log(2 * math.pi)
CLIP_EIG = 1e-8


# ---------------------------------------------------------------------------
# data


@dataclass(frozen=True)
class TrialDataset:
    """Long-format trial data.

    ``cluster``, ``period`` and ``subject`` are 0-based integer codes;
    ``treatment`` is the 0/1 indicator of the observation's cluster-period and
    ``y`` is the n x L outcome matrix.
    """

    cluster: np.ndarray
    period: np.ndarray
    subject: np.ndarray
    treatment: np.ndarray
    y: np.ndarray
    mode: str = CROSS_SECTIONAL
    num_periods: int | None = None

    def __post_init__(self):
        c = np.asarray(self.cluster, dtype=np.int64)
        p = np.asarray(self.period, dtype=np.int64)
        s = np.asarray(self.subject, dtype=np.int64)
        x = np.asarray(self.treatment, dtype=float)
        y = np.asarray(self.y, dtype=float)
        if y.ndim == 1:
            y = y[:, None]
        n = y.shape[0]
        if not (c.shape == p.shape == s.shape == x.shape == (n,)):
            raise ValidationError("dataset columns have different lengths")
        if n == 0:
            raise ValidationError("dataset is empty")
        if np.any(c < 0) or np.any(p < 0) or np.any(s < 0):
            raise ValidationError("cluster, period and subject codes must be non-negative")
        if not np.all(np.isfinite(y)):
            raise ValidationError("outcomes must be complete and finite")
        if not np.all((x == 0) | (x == 1)):
            raise ValidationError("treatment must be 0/1")
        mode = canonical_mode(self.mode)
        T = int(p.max()) + 1 if self.num_periods is None else int(self.num_periods)
        if p.max() >= T:
            raise ValidationError("period code exceeds num_periods")
        # relabel clusters densely so I = number of distinct clusters
        _, c = np.unique(c, return_inverse=True)
        cell = c * T + p
        xs = np.zeros(int(cell.max()) + 1)
        xs[cell] = x
        if np.any(xs[cell] != x):
            raise ValidationError("treatment varies within a cluster-period")
        key = (cell * (s.max() + 1) + s)
        if np.unique(key).size != n:
            raise ValidationError("subject index repeated within a cluster-period")
        for name, v in (("cluster", c), ("period", p), ("subject", s), ("treatment", x), ("y", y)):
            v.setflags(write=False)
            object.__setattr__(self, name, v)
        object.__setattr__(self, "mode", mode)
        object.__setattr__(self, "num_periods", T)

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def L(self) -> int:
        return self.y.shape[1]

    @property
    def I(self) -> int:  # noqa: E743
        return int(self.cluster.max()) + 1

    @property
    def T(self) -> int:
        return self.num_periods

    @property
    def closed_cohort(self) -> bool:
        return self.mode == CLOSED_COHORT

    def treatment_matrix(self) -> np.ndarray:
        X = np.full((self.I, self.T), np.nan)
        X[self.cluster, self.period] = self.treatment
        return X

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\r\n")
        w.writerow(["cluster", "period", "subject", "treatment"] + [f"y{l + 1}" for l in range(self.L)])
        for k in range(self.n):
            w.writerow([int(self.cluster[k]) + 1, int(self.period[k]) + 1, int(self.subject[k]) + 1,
                        int(self.treatment[k])] + [repr(float(v)) for v in self.y[k]])
        text = buf.getvalue()
        if path is not None:
            from .power import atomic_write

            atomic_write(path, text)
        return text


def read_dataset_csv(path, mode: str = CROSS_SECTIONAL) -> TrialDataset:
    """Read ``cluster, period, subject, treatment, y1..yL`` (1-based codes, header row)."""
    rows = []
    with open(Path(path), newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValidationError(f"{path}: empty file") from None
        header = [h.strip().lower() for h in header]
        if header[:4] != ["cluster", "period", "subject", "treatment"] or len(header) < 5:
            raise ValidationError(f"{path}:1: header must be cluster,period,subject,treatment,y1,...")
        width = len(header)
        for lineno, rec in enumerate(reader, start=2):
            if not rec or all(not f.strip() for f in rec):
                continue
            if len(rec) != width:
                raise ValidationError(f"{path}:{lineno}: expected {width} fields, found {len(rec)}")
            try:
                ids = [int(v) for v in rec[:4]]
                ys = [float(v) for v in rec[4:]]
            except ValueError:
                raise ValidationError(f"{path}:{lineno}: could not parse numeric field") from None
            if min(ids[:3]) < 1:
                raise ValidationError(f"{path}:{lineno}: cluster/period/subject codes are 1-based")
            if not all(math.isfinite(v) for v in ys):
                raise ValidationError(f"{path}:{lineno}: missing or non-finite outcome")
            rows.append(ids + ys)
    if not rows:
        raise ValidationError(f"{path}: no data rows")
    a = np.array(rows, dtype=float)
    return TrialDataset(a[:, 0].astype(int) - 1, a[:, 1].astype(int) - 1, a[:, 2].astype(int) - 1,
                        a[:, 3], a[:, 4:], mode)


# ---------------------------------------------------------------------------
# parameters


@dataclass(frozen=True)
class ModelParams:
    """Fixed effects and variance components.

    ``delta`` has length L, or length 1 (the shared delta') when
    ``common_effect`` is set.
    """

    period_means: np.ndarray
    delta: np.ndarray
    vc: VarianceComponents
    common_effect: bool = False

    def __post_init__(self):
        object.__setattr__(self, "period_means", np.atleast_2d(np.asarray(self.period_means, dtype=float)))
        object.__setattr__(self, "delta", np.atleast_1d(np.asarray(self.delta, dtype=float)))

    def effect_vector(self) -> np.ndarray:
        """Treatment shift on each endpoint (delta_l = sigma_eps,l delta' in the common model)."""
        if self.common_effect:
            return np.sqrt(np.diag(self.vc.sigma_eps)) * self.delta[0]
        return self.delta


# ---------------------------------------------------------------------------
# structure shared by likelihood, E-step and M-step


class _Layout:
    """Index bookkeeping for one dataset."""

    def __init__(self, data: TrialDataset):
        self.data = data
        I, T, L = data.I, data.T, data.L
        self.I, self.T, self.L = I, T, L
        cc = data.closed_cohort
        if cc:
            # subject slots numbered densely within each cluster
            key = data.cluster * (int(data.subject.max()) + 1) + data.subject
            uniq, inv = np.unique(key, return_inverse=True)
            cl_of = uniq // (int(data.subject.max()) + 1)
            first = np.searchsorted(cl_of, np.arange(I))
            local = np.arange(uniq.size) - first[cl_of]
            self.K = np.bincount(cl_of, minlength=I)
            subj_slot = 1 + T + local[inv]
        else:
            self.K = np.zeros(I, dtype=int)
            subj_slot = None
        self.q = 1 + T + int(self.K.max())
        q = self.q
        self.slots = [np.zeros(data.n, dtype=np.int64), 1 + data.period]
        if cc:
            self.slots.append(subj_slot)
        # Z'Z per cluster and grouping of clusters with identical structure
        ztz = np.zeros((I, q, q))
        for a in self.slots:
            for b in self.slots:
                np.add.at(ztz, (data.cluster, a, b), 1.0)
        self.ztz = ztz
        self.n_i = np.bincount(data.cluster, minlength=I)
        keys = {}
        self.pattern = np.empty(I, dtype=np.int64)
        for i in range(I):
            k = (ztz[i].tobytes(), int(self.K[i]))
            self.pattern[i] = keys.setdefault(k, len(keys))
        self.pattern_rep = np.array([np.flatnonzero(self.pattern == g)[0] for g in range(len(keys))])
        # cells
        self.cell = data.cluster * T + data.period
        self.cell_n = np.bincount(self.cell, minlength=I * T).astype(float)
        X = np.zeros(I * T)
        X[self.cell] = data.treatment
        self.cell_x = X
        self.cell_period = np.tile(np.arange(T), I)

    def slot_sums(self, R: np.ndarray) -> np.ndarray:
        """Z_i' R for every cluster: array (I, q, L)."""
        out = np.zeros((self.I, self.q, self.L))
        for a in self.slots:
            np.add.at(out, (self.data.cluster, a), R)
        return out

    def expand(self, E: np.ndarray) -> np.ndarray:
        """Z_i E_i stacked over observations: (n, L) from slot effects (I, q, L)."""
        out = np.zeros((self.data.n, self.L))
        for a in self.slots:
            out += E[self.data.cluster, a]
        return out

    def sigma_phi_sqrt(self, vc: VarianceComponents, i: int) -> np.ndarray:
        T, L = self.T, self.L
        blocks = [_psd_sqrt(vc.sigma_b)] + [_psd_sqrt(vc.sigma_s)] * T
        if self.data.closed_cohort:
            g = _psd_sqrt(vc.sigma_gamma)
            blocks += [g] * int(self.K[i])
        out = linalg.block_diag(*blocks)
        pad = self.q * L - out.shape[0]
        if pad:
            out = linalg.block_diag(out, np.zeros((pad, pad)))
        return out


def _psd_sqrt(M):
    w, U = np.linalg.eigh((M + M.T) / 2)
    return (U * np.sqrt(np.clip(w, 0.0, None))) @ U.T


def _mean(layout: _Layout, params: ModelParams) -> np.ndarray:
    d = layout.data
    mu = params.period_means
    if mu.shape != (layout.T, layout.L):
        raise ValidationError(f"period_means must be {layout.T} x {layout.L}")
    return mu[d.period] + d.treatment[:, None] * params.effect_vector()[None, :]


@dataclass
class _EStep:
    loglik: float
    E: np.ndarray  # (I, q, L) posterior means
    Vpost: list  # per pattern (qL x qL)
    R: np.ndarray  # residual y - mean


def _estep(layout: _Layout, params: ModelParams) -> _EStep:
    vc = params.vc
    L, q = layout.L, layout.q
    try:
        ce = linalg.cho_factor(vc.sigma_eps, lower=True)
    except linalg.LinAlgError:
        raise SingularMatrixError("sigma_eps") from None
    Winv = linalg.cho_solve(ce, np.eye(L))
    logdet_eps = 2.0 * np.sum(np.log(np.diag(ce[0])))
    R = layout.data.y - _mean(layout, params)
    U = layout.slot_sums(R) @ Winv  # (I, q, L)
    quad = float(np.einsum("kl,lm,km->", R, Winv, R))
    logdet = layout.data.n * logdet_eps
    Vpost = []
    E = np.zeros_like(U)
    for g, rep in enumerate(layout.pattern_rep):
        members = np.flatnonzero(layout.pattern == g)
        H = np.kron(layout.ztz[rep], Winv)
        S = layout.sigma_phi_sqrt(vc, rep)
        M = np.eye(q * L) + S @ H @ S
        cm = linalg.cho_factor(M, lower=True)
        V = S @ linalg.cho_solve(cm, S)
        V = (V + V.T) / 2
        Vpost.append(V)
        logdet += members.size * 2.0 * np.sum(np.log(np.diag(cm[0])))
        u = U[members].reshape(members.size, q * L)
        Eu = u @ V
        quad -= float(np.einsum("ia,ia->", u, Eu))
        E[members] = Eu.reshape(members.size, q, L)
    ll = -0.5 * (layout.data.n * L * LOG2PI + logdet + quad)
    return _EStep(ll, E, Vpost, R)


def marginal_loglik(data: TrialDataset, params: ModelParams, *, _layout: _Layout | None = None) -> float:
    """Log-likelihood of the observed outcomes with the random effects integrated out."""
    layout = _layout or _Layout(data)
    return _estep(layout, params).loglik


def posterior_moments(data: TrialDataset, params: ModelParams, cluster: int):
    """Posterior mean and covariance of cluster ``cluster``'s stacked random effects.

    Returns ``(E, V)`` with E of length q L ordered slot-major
    (b, s_1..s_T[, gamma_1..gamma_K]) and V the matching covariance.
    """
    layout = _Layout(data)
    if not 0 <= cluster < layout.I:
        raise ValidationError(f"cluster index {cluster} out of range")
    es = _estep(layout, params)
    g = layout.pattern[cluster]
    qi = 1 + layout.T + int(layout.K[cluster])
    k = qi * layout.L
    return es.E[cluster][:qi].reshape(-1).copy(), es.Vpost[g][:k, :k].copy()


# ---------------------------------------------------------------------------
# M-step pieces


def _clip(M, counter):
    M = (M + M.T) / 2
    w, U = np.linalg.eigh(M)
    if w.min() < CLIP_EIG:
        counter[0] += 1
        w = np.maximum(w, CLIP_EIG)
        M = (U * w) @ U.T
    return M


def _fixed_design(layout: _Layout, common_effect: bool, scale=None) -> np.ndarray:
    """Cell-level fixed-effect design G, shape (cells, L, p)."""
    T, L = layout.T, layout.L
    C = layout.I * T
    p = T * L + (1 if common_effect else L)
    G = np.zeros((C, L, p))
    eye = np.eye(L)
    for j in range(T):
        rows = layout.cell_period == j
        G[rows, :, j * L:(j + 1) * L] = eye
    if common_effect:
        G[:, :, T * L] = layout.cell_x[:, None] * np.asarray(scale)[None, :]
    else:
        G[:, :, T * L:] = layout.cell_x[:, None, None] * eye
    return G


def _gls_beta(layout, Ytilde, Winv, common_effect, scale):
    """Weighted least squares for (period means, delta) given adjusted outcomes."""
    G = _fixed_design(layout, common_effect, scale)
    n = layout.cell_n
    Rsum = np.zeros((layout.I * layout.T, layout.L))
    np.add.at(Rsum, layout.cell, Ytilde)
    info = np.einsum("c,cap,ab,cbq->pq", n, G, Winv, G)
    score = np.einsum("cap,ab,cb->p", G, Winv, Rsum)
    try:
        theta = linalg.solve(info, score, assume_a="pos")
    except (linalg.LinAlgError, ValueError):
        raise IdentifiabilityError("fixed effects are not identifiable (period and treatment collinear)") from None
    T, L = layout.T, layout.L
    return theta[: T * L].reshape(T, L), theta[T * L:]


def _check_identifiable(layout: _Layout):
    d = layout.data
    if layout.I < 2:
        raise IdentifiabilityError("at least two clusters are required")
    sd = d.y.std(axis=0)
    if np.any(sd <= 1e-12 * (1 + np.abs(d.y).max(axis=0))):
        bad = int(np.flatnonzero(sd <= 1e-12 * (1 + np.abs(d.y).max(axis=0)))[0]) + 1
        raise IdentifiabilityError(f"outcome y{bad} has zero variance")
    G = _fixed_design(layout, False)
    A = np.einsum("c,cap,caq->pq", layout.cell_n, G, G)
    if np.linalg.matrix_rank(A) < A.shape[0]:
        raise IdentifiabilityError("fixed effects are not identifiable (period and treatment collinear)")


def initial_params(data: TrialDataset, common_effect: bool = False, *, _layout=None) -> ModelParams:
    """OLS start: per-endpoint period+treatment fit; residual covariance split 1 : 0.1 : 0.1."""
    layout = _layout or _Layout(data)
    _check_identifiable(layout)
    mu, delta = _gls_beta(layout, data.y, np.eye(data.L), False, None)
    R = data.y - mu[data.period] - data.treatment[:, None] * delta[None, :]
    S = np.atleast_2d(np.cov(R, rowvar=False, bias=True))
    if np.linalg.eigvalsh(S).min() <= 1e-10 * np.trace(S):
        raise IdentifiabilityError("residual covariance is singular (linearly dependent outcomes)")
    vc = VarianceComponents(0.1 * S, 0.1 * S, S.copy(), 0.1 * S if data.closed_cohort else None)
    if common_effect:
        sc = np.sqrt(np.diag(S))
        d0 = np.atleast_1d(np.mean(delta / sc))
        return ModelParams(mu, d0, vc, True)
    return ModelParams(mu, delta, vc, False)


# ---------------------------------------------------------------------------
# fitting


@dataclass(frozen=True)
class FitControls:
    tol: float = 1e-5
    max_iter: int = 5000
    se_method: str = "hessian"  # "hessian", "fgls" or "none"
    hessian_step: float = 1e-4


@dataclass
class FitResult:
    params: ModelParams
    loglik_trace: list
    iterations: int
    converged: bool
    clips: int
    se: np.ndarray | None = None
    covariance: np.ndarray | None = None
    se_method: str = "none"
    mode: str = CROSS_SECTIONAL
    extra: dict = field(default_factory=dict)

    @property
    def vc(self) -> VarianceComponents:
        return self.params.vc

    @property
    def delta(self) -> np.ndarray:
        """Endpoint-scale effects (delta_l = sigma_eps,l delta' for the common model)."""
        return self.params.effect_vector()

    @property
    def period_means(self) -> np.ndarray:
        return self.params.period_means

    @property
    def beta0(self) -> np.ndarray:
        return self.params.period_means[0]

    @property
    def beta_period(self) -> np.ndarray:
        """Period effects relative to period 1 (rows 2..T)."""
        return self.params.period_means[1:] - self.params.period_means[0]

    @property
    def loglik(self) -> float:
        return self.loglik_trace[-1]

    @property
    def wald(self) -> np.ndarray | None:
        """w_l = delta_hat_l / SE_l (a single value for the common-effect model)."""
        if self.se is None:
            return None
        return self.params.delta / self.se

    def icc(self) -> IccSet:
        return variance_components_to_icc(self.vc)

    def report(self, seed: int | None = None) -> str:
        p = self.params
        L = self.vc.L
        out = [f"mode: {self.mode}", f"converged: {self.converged} after {self.iterations} iterations",
               f"log-likelihood: {self.loglik:.6f}", f"eigenvalue clips: {self.clips}"]
        if seed is not None:
            out.append(f"seed: {seed}")
        if p.common_effect:
            out.append(f"delta' (shared standardized effect): {p.delta[0]:.6f}")
            if self.se is not None:
                out.append(f"  SE {self.se[0]:.6f}  Wald {self.wald[0]:.4f}")
            out.append("endpoint-scale effects delta_l = sigma_eps,l * delta': "
                       + ", ".join(f"{v:.6f}" for v in self.delta))
        else:
            for l in range(L):  # noqa: E741
                line = f"delta_{l + 1}: {p.delta[l]:.6f}"
                if self.se is not None:
                    line += f"  SE {self.se[l]:.6f}  Wald {self.wald[l]:.4f}"
                out.append(line)
        out.append("period means (rows = periods):")
        for j, row in enumerate(p.period_means):
            out.append(f"  period {j + 1}: " + ", ".join(f"{v:.6f}" for v in row))
        icc = self.icc()
        out.append("ICCs")
        out.append("  endpoint-specific   rho0^l: " + ", ".join(f"{v:.5f}" for v in np.diag(icc.rho0)))
        out.append("                      rho1^l: " + ", ".join(f"{v:.5f}" for v in np.diag(icc.rho1)))
        if icc.closed_cohort:
            out.append("                      rho2^l: " + ", ".join(f"{v:.5f}" for v in np.diag(icc.rho2prime)))
        for l in range(L):  # noqa: E741
            for m in range(l + 1, L):
                line = (f"  between {l + 1},{m + 1}:  rho0={icc.rho0[l, m]:.5f}  rho1={icc.rho1[l, m]:.5f}  "
                        f"rho2={icc.rho2[l, m]:.5f}")
                if icc.closed_cohort:
                    line += f"  rho21={icc.rho2prime[l, m]:.5f}"
                out.append(line)
        out.append("variance components")
        for name in ("sigma_b", "sigma_s", "sigma_gamma", "sigma_eps"):
            M = getattr(self.vc, name)
            if M is not None:
                out.append(f"  {name}: " + "; ".join(", ".join(f"{v:.5f}" for v in r) for r in M))
        return "\n".join(out)


def _mstep(layout: _Layout, params: ModelParams, es: _EStep, clips) -> ModelParams:
    d = layout.data
    L, T, q, I = layout.L, layout.T, layout.q, layout.I
    E = es.E
    # second moments of the random effects
    Ebb = np.zeros((L, L))
    Ess = np.zeros((L, L))
    Egg = np.zeros((L, L))
    contr = np.zeros((L, L))  # sum_i sum_ab (Z'Z)_ab V_ab
    for g, rep in enumerate(layout.pattern_rep):
        members = np.flatnonzero(layout.pattern == g)
        m = members.size
        V4 = es.Vpost[g].reshape(q, L, q, L)
        Ebb += m * V4[0, :, 0, :]
        for j in range(T):
            Ess += m * V4[1 + j, :, 1 + j, :]
        K = int(layout.K[rep])
        for k in range(K):
            Egg += m * V4[1 + T + k, :, 1 + T + k, :]
        contr += m * np.einsum("ab,albm->lm", layout.ztz[rep], V4)
    Ebb += np.einsum("il,im->lm", E[:, 0], E[:, 0])
    Ess += np.einsum("ijl,ijm->lm", E[:, 1:1 + T], E[:, 1:1 + T])
    sigma_b = _clip(Ebb / I, clips)
    sigma_s = _clip(Ess / (I * T), clips)
    sigma_g = None
    if d.closed_cohort:
        Egg += np.einsum("ikl,ikm->lm", E[:, 1 + T:], E[:, 1 + T:])
        sigma_g = _clip(Egg / layout.K.sum(), clips)
    # fixed effects given the current residual covariance
    ZE = layout.expand(E)
    Ytilde = d.y - ZE
    Winv = np.linalg.inv(params.vc.sigma_eps)
    scale = np.sqrt(np.diag(params.vc.sigma_eps)) if params.common_effect else None
    mu, delta = _gls_beta(layout, Ytilde, Winv, params.common_effect, scale)
    new = ModelParams(mu, delta, params.vc, params.common_effect)
    e = Ytilde - _mean(layout, new)
    sigma_eps = _clip((e.T @ e + contr) / d.n, clips)
    vc = VarianceComponents(sigma_b, sigma_s, sigma_eps, sigma_g)
    return ModelParams(mu, delta, vc, params.common_effect)


def fit_em(data: TrialDataset, *, common_effect: bool = False, controls: FitControls | None = None,
           init: ModelParams | None = None, mode: str | None = None) -> FitResult:
    """Maximum likelihood fit by EM with the random effects as missing data.

    Each iteration runs the E-step (posterior moments of every cluster's
    random effects), then conditional M-steps for the covariance blocks of
    the random effects, the fixed effects (weighted by Sigma_eps^{-1}) and
    Sigma_eps.  Stops when the relative change in marginal log-likelihood is
    below ``controls.tol`` or after ``controls.max_iter`` iterations.
    """
    controls = controls or FitControls()
    if mode is not None and canonical_mode(mode) != data.mode:
        data = replace(data, mode=canonical_mode(mode))
    layout = _Layout(data)
    params = init if init is not None else initial_params(data, common_effect, _layout=layout)
    if params.common_effect != common_effect:
        raise ValidationError("initial parameters disagree with common_effect flag")
    clips = [0]
    trace = []
    converged = False
    es = _estep(layout, params)
    trace.append(es.loglik)
    it = 0
    while it < controls.max_iter:
        it += 1
        params = _mstep(layout, params, es, clips)
        es = _estep(layout, params)
        trace.append(es.loglik)
        if abs(trace[-1] - trace[-2]) < controls.tol * abs(trace[-2]):
            converged = True
            break
    res = FitResult(params, trace, it, converged, clips[0], mode=data.mode)
    if controls.se_method != "none":
        se, cov = standard_errors(data, params, method=controls.se_method, step=controls.hessian_step,
                                  _layout=layout)
        res.se, res.covariance, res.se_method = se, cov, controls.se_method
    return res


# ---------------------------------------------------------------------------
# standard errors


def _chol_pack(M):
    C = np.linalg.cholesky((M + M.T) / 2)
    C[np.diag_indices_from(C)] = np.log(np.diag(C))
    return C[np.tril_indices_from(C)]


def _chol_unpack(v, L):
    C = np.zeros((L, L))
    C[np.tril_indices(L)] = v
    C[np.diag_indices(L)] = np.exp(np.diag(C))
    return C @ C.T


def _pack(params: ModelParams) -> np.ndarray:
    vc = params.vc
    parts = [params.period_means.ravel(), params.delta]
    for M in (vc.sigma_b, vc.sigma_s, vc.sigma_eps) + ((vc.sigma_gamma,) if vc.sigma_gamma is not None else ()):
        parts.append(_chol_pack(M))
    return np.concatenate(parts)


def _unpack(theta, template: ModelParams) -> ModelParams:
    T, L = template.period_means.shape
    k = T * L
    mu = theta[:k].reshape(T, L)
    nd = template.delta.size
    delta = theta[k:k + nd]
    k += nd
    m = L * (L + 1) // 2
    blocks = []
    nblk = 4 if template.vc.sigma_gamma is not None else 3
    for _ in range(nblk):
        blocks.append(_chol_unpack(theta[k:k + m], L))
        k += m
    vc = VarianceComponents(blocks[0], blocks[1], blocks[2], blocks[3] if nblk == 4 else None)
    return ModelParams(mu, delta, vc, template.common_effect)


def numerical_hessian(f, theta, step: float = 1e-4) -> np.ndarray:
    """Central-difference Hessian with steps h_i = step (1 + |theta_i|)."""
    theta = np.asarray(theta, dtype=float)
    p = theta.size
    h = step * (1.0 + np.abs(theta))
    f0 = f(theta)
    Hs = np.zeros((p, p))
    fp = np.empty(p)
    fm = np.empty(p)
    for i in range(p):
        e = np.zeros(p)
        e[i] = h[i]
        fp[i], fm[i] = f(theta + e), f(theta - e)
        Hs[i, i] = (fp[i] - 2 * f0 + fm[i]) / h[i] ** 2
    for i in range(p):
        for j in range(i + 1, p):
            ei = np.zeros(p)
            ej = np.zeros(p)
            ei[i], ej[j] = h[i], h[j]
            v = (f(theta + ei + ej) - f(theta + ei - ej) - f(theta - ei + ej) + f(theta - ei - ej)) / (4 * h[i] * h[j])
            Hs[i, j] = Hs[j, i] = v
    return Hs


def _fgls_information(layout: _Layout, params: ModelParams) -> np.ndarray:
    """sum_i G_i' V_i^{-1} G_i for the fixed effects, via Woodbury."""
    vc = params.vc
    L, q, T = layout.L, layout.q, layout.T
    Winv = np.linalg.inv(vc.sigma_eps)
    scale = np.sqrt(np.diag(vc.sigma_eps)) if params.common_effect else None
    G = _fixed_design(layout, params.common_effect, scale)
    p = G.shape[2]
    info = np.einsum("c,cap,ab,cbq->pq", layout.cell_n, G, Winv, G)
    es_V = []
    for rep in layout.pattern_rep:
        H = np.kron(layout.ztz[rep], Winv)
        S = layout.sigma_phi_sqrt(vc, rep)
        M = np.eye(q * L) + S @ H @ S
        es_V.append(S @ linalg.solve(M, S, assume_a="pos"))
    # per cluster slot sums of Winv G (cells contribute to slot 0, slot 1+j and subject slots)
    WG = np.einsum("ab,cbp->cap", Winv, G)  # (cells, L, p)
    d = layout.data
    obs_WG = WG[layout.cell]  # (n, L, p)
    Ug = np.zeros((layout.I, q, L, p))
    for a in layout.slots:
        np.add.at(Ug, (d.cluster, a), obs_WG)
    for i in range(layout.I):
        u = Ug[i].reshape(q * L, p)
        info -= u.T @ es_V[layout.pattern[i]] @ u
    return (info + info.T) / 2


def standard_errors(data: TrialDataset, params: ModelParams, *, method: str = "hessian", step: float = 1e-4,
                    _layout: _Layout | None = None):
    """Standard errors of the treatment effect(s) and the covariance used.

    ``method='hessian'`` differentiates the marginal log-likelihood
    numerically over (fixed effects, log-Cholesky covariance factors) and
    returns the treatment block of the inverse observed information, computed
    as a Schur complement so near-boundary variance directions do not
    contaminate it.  ``method='fgls'`` uses (sum_i G_i' V_i^{-1} G_i)^{-1}
    at the estimates.
    """
    layout = _layout or _Layout(data)
    T, L = layout.T, layout.L
    nb = T * L + params.delta.size
    if method == "fgls":
        info = _fgls_information(layout, params)
        cov = np.linalg.inv(info)
    elif method == "hessian":
        theta0 = _pack(params)

        def f(th):
            try:
                return _estep(layout, _unpack(th, params)).loglik
            except SingularMatrixError:
                return -np.inf

        H = -numerical_hessian(f, theta0, step)
        if not np.all(np.isfinite(H)):
            raise SingularMatrixError("observed information", "non-finite entries")
        Hbb, Hbs, Hss = H[:nb, :nb], H[:nb, nb:], H[nb:, nb:]
        Hss_pinv = np.linalg.pinv(Hss, rcond=1e-10, hermitian=True)
        info = Hbb - Hbs @ Hss_pinv @ Hbs.T
        cov = np.linalg.inv((info + info.T) / 2)
    else:
        raise ValidationError(f"unknown SE method {method!r}")
    dcov = cov[T * L:nb, T * L:nb]
    var = np.diag(dcov)
    if np.any(var <= 0) or not np.all(np.isfinite(var)):
        raise SingularMatrixError("treatment-effect covariance", "non-positive variance")
    return np.sqrt(var), cov


__all__ = [
    "FitControls",
    "FitResult",
    "ModelParams",
    "TrialDataset",
    "fit_em",
    "initial_params",
    "marginal_loglik",
    "numerical_hessian",
    "posterior_moments",
    "read_dataset_csv",
    "standard_errors",
]
