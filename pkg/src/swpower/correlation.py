"""ICC parameter sets, their variance-component mapping, and derived matrices.

All ICC families are held as symmetric L x L matrices whose diagonals carry
the endpoint-specific values:

    rho0       within-period          diag rho0^l,  off-diag rho0^{ll'}
    rho1       between-period         diag rho1^l,  off-diag rho1^{ll'}
    rho2       intra-subject          diag 1,       off-diag rho2^{ll'}
               (closed cohort: within-period intra-subject rho2,0^{ll'})
    rho2prime  closed cohort only     diag rho2^l,  off-diag rho2,1^{ll'}

With Lam = diag(sigma_y) the variance components are

    Sigma_b     = Lam rho1 Lam
    Sigma_s     = Lam (rho0 - rho1) Lam
    Sigma_gamma = Lam (rho2prime - rho1) Lam                (closed cohort)
    Sigma_eps   = Lam (rho2 - rho0) Lam                     (cross-sectional)
                = Lam (rho2 - rho0 - rho2prime + rho1) Lam  (closed cohort)
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError

CROSS_SECTIONAL = "cross-sectional"
CLOSED_COHORT = "closed-cohort"
_MODE_ALIASES = {
    "cs": CROSS_SECTIONAL,
    "cross-sectional": CROSS_SECTIONAL,
    "cross_sectional": CROSS_SECTIONAL,
    "cc": CLOSED_COHORT,
    "closed-cohort": CLOSED_COHORT,
    "closed_cohort": CLOSED_COHORT,
}

# Smallest admissible eigenvalue, on the correlation scale, of the error block
# (strictly PD) and of the random-effect blocks (PSD; zero blocks such as
# Sigma_b under CAC = 0 are legitimate design inputs).
PD_TOL = 1e-10


def canonical_mode(mode: str) -> str:
    try:
        return _MODE_ALIASES[str(mode).lower()]
    except KeyError:
        raise ValidationError(f"unknown design mode {mode!r}") from None


def _sym(name, m, L):
    m = np.array(m, dtype=float)
    if m.shape != (L, L):
        raise ValidationError(f"{name} must be {L}x{L}, got shape {m.shape}")
    if not np.allclose(m, m.T, atol=1e-14, rtol=0):
        raise ValidationError(f"{name} must be symmetric")
    m = (m + m.T) / 2
    m.setflags(write=False)
    return m


def _between(value, diag, L):
    """Fill an L x L matrix from a scalar or matrix of between-endpoint values."""
    diag = np.asarray(diag, dtype=float)
    if value is None:
        value = 0.0
    v = np.asarray(value, dtype=float)
    if v.ndim == 0:
        m = np.full((L, L), float(v))
    else:
        m = np.array(v, dtype=float)
        if m.shape != (L, L):
            raise ValidationError(f"between-endpoint matrix must be {L}x{L}")
    np.fill_diagonal(m, diag)
    return m


def _min_eig(m):
    return float(np.linalg.eigvalsh((m + m.T) / 2).min())


@dataclass(frozen=True)
class IccSet:
    design_kind: str
    rho0: np.ndarray
    rho1: np.ndarray
    rho2: np.ndarray
    rho2prime: np.ndarray | None = None

    def __post_init__(self):
        kind = canonical_mode(self.design_kind)
        object.__setattr__(self, "design_kind", kind)
        L = np.atleast_2d(self.rho0).shape[0]
        for name in ("rho0", "rho1", "rho2"):
            object.__setattr__(self, name, _sym(name, np.atleast_2d(getattr(self, name)), L))
        if kind == CLOSED_COHORT:
            if self.rho2prime is None:
                raise ValidationError("closed-cohort ICC set needs rho2prime")
            object.__setattr__(self, "rho2prime", _sym("rho2prime", np.atleast_2d(self.rho2prime), L))
        elif self.rho2prime is not None:
            raise ValidationError("rho2prime is only defined for closed-cohort designs")
        if not np.allclose(np.diag(self.rho2), 1.0, atol=1e-12):
            raise ValidationError("rho2 must have unit diagonal")

    @property
    def L(self) -> int:
        return self.rho0.shape[0]

    @property
    def closed_cohort(self) -> bool:
        return self.design_kind == CLOSED_COHORT

    @classmethod
    def from_params(
        cls,
        rho0,
        rho1,
        rho0_between=0.0,
        rho1_between=0.0,
        rho2_between=0.0,
        *,
        design: str = CROSS_SECTIONAL,
        rho2=None,
        rho21_between=0.0,
        cac: float | None = None,
    ) -> IccSet:
        """Assemble an ICC set from endpoint-specific vectors and between-endpoint values.

        Between-endpoint arguments accept a scalar (same value for every pair)
        or an L x L matrix whose diagonal is ignored.  For closed cohorts
        ``rho2_between`` is the within-period intra-subject ICC rho2,0, ``rho2``
        the endpoint-specific intra-subject ICCs and ``rho21_between`` the
        between-period intra-subject ICCs.  When ``cac`` is given, ``rho1`` and
        ``rho1_between`` are ignored and derived from the within-period values.
        """
        rho0 = np.atleast_1d(np.asarray(rho0, dtype=float))
        L = rho0.size
        g0 = _between(rho0_between, rho0, L)
        if cac is not None:
            g1 = _cac_matrix(g0, cac)
        else:
            rho1 = np.broadcast_to(np.asarray(rho1, dtype=float), (L,))
            g1 = _between(rho1_between, rho1, L)
        g2 = _between(rho2_between, np.ones(L), L)
        g2p = None
        kind = canonical_mode(design)
        if kind == CLOSED_COHORT:
            if rho2 is None:
                raise ValidationError("closed-cohort designs need the intra-subject ICCs rho2")
            g2p = _between(rho21_between, np.broadcast_to(np.asarray(rho2, dtype=float), (L,)), L)
        elif rho2 is not None:
            raise ValidationError("endpoint-specific rho2 is only defined for closed-cohort designs")
        return cls(kind, g0, g1, g2, g2p)

    @classmethod
    def common(cls, L, rho0, rho1, rho00, rho11, rho2, *, design=CROSS_SECTIONAL, rho20=None, rho21=None):
        """Exchangeable (common-across-endpoints) parameterization.

        Cross-sectional: ``rho2`` is the intra-subject ICC.  Closed cohort:
        ``rho2`` is the endpoint-specific intra-subject ICC and ``rho20``,
        ``rho21`` the within/between-period intra-subject ICCs.
        """
        kind = canonical_mode(design)
        I, J = np.eye(L), np.ones((L, L))
        g0 = (rho0 - rho00) * I + rho00 * J
        g1 = (rho1 - rho11) * I + rho11 * J
        if kind == CROSS_SECTIONAL:
            if rho20 is not None or rho21 is not None:
                raise ValidationError("rho20/rho21 are closed-cohort parameters")
            return cls(kind, g0, g1, (1 - rho2) * I + rho2 * J)
        if rho20 is None or rho21 is None:
            raise ValidationError("closed-cohort common ICCs need rho20 and rho21")
        return cls(kind, g0, g1, (1 - rho20) * I + rho20 * J, (rho2 - rho21) * I + rho21 * J)

    def components(self) -> dict[str, np.ndarray]:
        """Variance-component blocks on the correlation scale (unit marginal variance)."""
        out = {"sigma_b": self.rho1, "sigma_s": self.rho0 - self.rho1}
        if self.closed_cohort:
            out["sigma_gamma"] = self.rho2prime - self.rho1
            out["sigma_eps"] = self.rho2 - self.rho0 - self.rho2prime + self.rho1
        else:
            out["sigma_eps"] = self.rho2 - self.rho0
        return out

    def validate(self, *, strict_order: bool = True) -> IccSet:
        """Check ordering constraints and positive (semi)definiteness of the implied blocks.

        Raises ValidationError naming the offending block.  Returns self so
        calls can be chained.
        """
        off = ~np.eye(self.L, dtype=bool)
        tol = 1e-12
        # Orderings compare magnitudes so that negative between-endpoint ICCs
        # (e.g. rho1 = CAC * rho0 < 0) remain admissible.
        a0, a1, a2 = np.abs(self.rho0), np.abs(self.rho1), np.abs(self.rho2)
        if strict_order:
            if np.any(np.diag(a1) > np.diag(a0) + tol):
                raise ValidationError("between-period ICC rho1^l exceeds within-period rho0^l")
            if np.any(a1[off] > a0[off] + tol):
                raise ValidationError("between-period |rho1^{ll'}| exceeds within-period |rho0^{ll'}|")
            if np.any(a0[off] > a2[off] + tol):
                raise ValidationError("within-period |rho0^{ll'}| exceeds intra-subject |rho2^{ll'}|")
            if self.closed_cohort and np.any(np.abs(self.rho2prime[off]) > a2[off] + tol):
                raise ValidationError("between-period intra-subject |rho2,1^{ll'}| exceeds |rho2,0^{ll'}|")
        for name, block in self.components().items():
            lo = _min_eig(block)
            if name == "sigma_eps":
                if lo < PD_TOL:
                    raise ValidationError(
                        f"implied {name} is not positive definite (smallest eigenvalue {lo:.3g})"
                    )
            elif lo < -PD_TOL:
                raise ValidationError(
                    f"implied {name} is not positive semidefinite (smallest eigenvalue {lo:.3g})"
                )
        return self


@dataclass(frozen=True)
class VarianceComponents:
    sigma_b: np.ndarray
    sigma_s: np.ndarray
    sigma_eps: np.ndarray
    sigma_gamma: np.ndarray | None = None

    def __post_init__(self):
        L = np.atleast_2d(self.sigma_eps).shape[0]
        for name in ("sigma_b", "sigma_s", "sigma_eps"):
            object.__setattr__(self, name, _sym(name, np.atleast_2d(getattr(self, name)), L))
        if self.sigma_gamma is not None:
            object.__setattr__(self, "sigma_gamma", _sym("sigma_gamma", np.atleast_2d(self.sigma_gamma), L))

    @property
    def L(self) -> int:
        return self.sigma_eps.shape[0]

    @property
    def closed_cohort(self) -> bool:
        return self.sigma_gamma is not None

    @property
    def total(self) -> np.ndarray:
        tot = self.sigma_b + self.sigma_s + self.sigma_eps
        if self.sigma_gamma is not None:
            tot = tot + self.sigma_gamma
        return tot

    @property
    def marginal_sd(self) -> np.ndarray:
        return np.sqrt(np.diag(self.total))

    def validate(self) -> VarianceComponents:
        scale = float(np.max(np.diag(self.total)))
        blocks = {"sigma_b": self.sigma_b, "sigma_s": self.sigma_s, "sigma_eps": self.sigma_eps}
        if self.sigma_gamma is not None:
            blocks["sigma_gamma"] = self.sigma_gamma
        for name, block in blocks.items():
            lo = _min_eig(block) / scale
            if name == "sigma_eps" and lo < PD_TOL:
                raise ValidationError(f"{name} is not positive definite (relative smallest eigenvalue {lo:.3g})")
            if lo < -PD_TOL:
                raise ValidationError(f"{name} is not positive semidefinite (relative smallest eigenvalue {lo:.3g})")
        return self


@dataclass(frozen=True)
class IccMatrices:
    gamma0: np.ndarray
    gamma1: np.ndarray
    gamma2: np.ndarray
    gamma2prime: np.ndarray | None = None

    @property
    def L(self) -> int:
        return self.gamma0.shape[0]

    @property
    def closed_cohort(self) -> bool:
        return self.gamma2prime is not None


@dataclass(frozen=True)
class EigenSummary:
    mode: str
    lambda1: float
    lambda2: float | None
    lambda3: float
    lambda4: float | None
    tau2: float | None
    tau3: float
    tau4: float | None

    def pair(self):
        """(lambda_a, lambda_b, tau_a, tau_b) entering the common-ICC variances."""
        if self.mode == CROSS_SECTIONAL:
            return self.lambda2, self.lambda3, self.tau2, self.tau3
        return self.lambda3, self.lambda4, self.tau3, self.tau4


def icc_to_variance_components(icc: IccSet, marginal_sd) -> VarianceComponents:
    icc.validate()
    sd = np.broadcast_to(np.asarray(marginal_sd, dtype=float), (icc.L,))
    if np.any(sd <= 0):
        raise ValidationError("marginal standard deviations must be positive")
    scale = np.outer(sd, sd)
    c = icc.components()
    return VarianceComponents(
        sigma_b=c["sigma_b"] * scale,
        sigma_s=c["sigma_s"] * scale,
        sigma_eps=c["sigma_eps"] * scale,
        sigma_gamma=c["sigma_gamma"] * scale if icc.closed_cohort else None,
    )


def variance_components_to_icc(vc: VarianceComponents) -> IccSet:
    vc.validate()
    sd = vc.marginal_sd
    inv = 1.0 / np.outer(sd, sd)
    rho1 = vc.sigma_b * inv
    rho0 = (vc.sigma_b + vc.sigma_s) * inv
    rho2 = vc.total * inv
    np.fill_diagonal(rho2, 1.0)
    if vc.closed_cohort:
        return IccSet(CLOSED_COHORT, rho0, rho1, rho2, (vc.sigma_b + vc.sigma_gamma) * inv)
    return IccSet(CROSS_SECTIONAL, rho0, rho1, rho2)


def build_icc_matrices(icc: IccSet) -> IccMatrices:
    return IccMatrices(
        np.array(icc.rho0),
        np.array(icc.rho1),
        np.array(icc.rho2),
        None if icc.rho2prime is None else np.array(icc.rho2prime),
    )


def eigen_summary(
    N: int,
    T: int,
    mode: str,
    *,
    rho0: float,
    rho1: float,
    rho00: float,
    rho11: float,
    rho2: float,
    rho20: float | None = None,
    rho21: float | None = None,
) -> EigenSummary:
    """Eigenvalues lambda_k and between-endpoint analogues tau_k for common ICCs.

    Cross-sectional: ``rho2`` is the intra-subject ICC.  Closed cohort:
    ``rho2`` is the endpoint-specific intra-subject ICC and ``rho20``/``rho21``
    the within/between-period intra-subject ICCs.
    """
    mode = canonical_mode(mode)
    if mode == CROSS_SECTIONAL:
        if rho20 is not None or rho21 is not None:
            raise ValidationError("rho20/rho21 supplied in cross-sectional mode")
        tau2 = (N - 1) * rho00 - N * rho11 + rho2
        return EigenSummary(
            mode,
            lambda1=1 - rho0,
            lambda2=1 + (N - 1) * rho0 - N * rho1,
            lambda3=1 + (N - 1) * rho0 + (T - 1) * N * rho1,
            lambda4=None,
            tau2=tau2,
            tau3=tau2 + T * N * rho11,
            tau4=None,
        )
    if rho20 is None or rho21 is None:
        raise ValidationError("closed-cohort mode needs rho20 and rho21")
    tau3 = rho20 - rho21 + (N - 1) * (rho00 - rho11)
    return EigenSummary(
        mode,
        lambda1=1 - rho0 + rho1 - rho2,
        lambda2=None,
        lambda3=1 + (N - 1) * (rho0 - rho1) - rho2,
        lambda4=1 + (N - 1) * rho0 + (T - 1) * (N - 1) * rho1 + (T - 1) * rho2,
        tau2=None,
        tau3=tau3,
        tau4=tau3 + T * (rho21 + (N - 1) * rho11),
    )


def _cac_matrix(rho0, cac):
    cac = float(cac)
    if not 0.0 <= cac <= 1.0:
        raise ValidationError(f"CAC must lie in [0, 1], got {cac}")
    if cac == 1.0:
        warnings.warn(
            "CAC = 1 makes within- and between-period ICCs equal; the N -> infinity "
            "variance limit is degenerate",
            stacklevel=3,
        )
    return cac * np.asarray(rho0, dtype=float)


def apply_cac(icc: IccSet, cac: float) -> IccSet:
    """Replace every between-period ICC by ``cac`` times its within-period counterpart."""
    return IccSet(icc.design_kind, icc.rho0, _cac_matrix(icc.rho0, cac), icc.rho2, icc.rho2prime)
