"""Closed-form covariance of the intervention-effect estimators.

Every formula shares the design multipliers

    a = I T U - T W + U^2 - I V      (within-cluster contrast information)
    b = U^2 - I V                    (between-cluster adjustment)

and a pair of L x L "eigen-blocks" (A, B): for cross-sectional designs
A = G2 - N G1 + (N-1) G0 and B = G2 + (T-1) N G1 + (N-1) G0; for closed
cohorts A = (N-1)(G0 - G1) + G2 - G2' and
B = (T-1)(N-1) G1 + (T-1) G2' + (N-1) G0 + G2.  The effect covariance is

    Omega = (I T / N) Lam [a A^{-1} - b B^{-1}]^{-1} Lam,  Lam = diag(sigma_y).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .correlation import (
    CLOSED_COHORT,
    CROSS_SECTIONAL,
    IccMatrices,
    IccSet,
    VarianceComponents,
    build_icc_matrices,
    canonical_mode,
    eigen_summary,
)
from .design import DesignConstants, DesignSchedule, design_constants
from .errors import DegenerateLimitError, SingularMatrixError, ValidationError

VARIANTS = (
    "general-cs",
    "general-cc",
    "common-icc-cs",
    "common-icc-cc",
    "common-effect-cs",
    "common-effect-cc",
    "both-cs",
    "both-cc",
    "hooper-girling",
)


@dataclass(frozen=True)
class EffectCovariance:
    omega: np.ndarray
    variant: str

    @property
    def sd(self) -> np.ndarray:
        return np.sqrt(np.diag(self.omega))

    @property
    def correlation(self) -> np.ndarray:
        sd = self.sd
        R = self.omega / np.outer(sd, sd)
        np.fill_diagonal(R, 1.0)
        return R


def spd_inverse(M, name: str) -> np.ndarray:
    """Inverse of a symmetric positive definite matrix via Cholesky."""
    M = np.atleast_2d(np.asarray(M, dtype=float))
    try:
        c = linalg.cho_factor((M + M.T) / 2, lower=True)
    except linalg.LinAlgError:
        lo = float(np.linalg.eigvalsh((M + M.T) / 2).min())
        raise SingularMatrixError(name, f"smallest eigenvalue {lo:.3g}") from None
    inv = linalg.cho_solve(c, np.eye(M.shape[0]))
    return (inv + inv.T) / 2


def design_multipliers(dc: DesignConstants, I: int, T: int) -> tuple[float, float]:
    a = I * T * dc.U - T * dc.W + dc.U**2 - I * dc.V
    b = dc.U**2 - I * dc.V
    return float(a), float(b)


def eigen_blocks(icc: IccMatrices, T: int, N: int) -> tuple[np.ndarray, np.ndarray]:
    G0, G1, G2 = icc.gamma0, icc.gamma1, icc.gamma2
    if icc.closed_cohort:
        G2p = icc.gamma2prime
        A = (N - 1) * (G0 - G1) + G2 - G2p
        B = (T - 1) * (N - 1) * G1 + (T - 1) * G2p + (N - 1) * G0 + G2
    else:
        A = G2 - N * G1 + (N - 1) * G0
        B = G2 + (T - 1) * N * G1 + (N - 1) * G0
    return A, B


def _bracket(a, b, A, B):
    return a * spd_inverse(A, "A (within-cluster block)") - b * spd_inverse(B, "B (cluster-total block)")


def _as_matrices(icc) -> IccMatrices:
    return build_icc_matrices(icc) if isinstance(icc, IccSet) else icc


def _sd(sd, L):
    sd = np.broadcast_to(np.asarray(sd, dtype=float), (L,))
    if np.any(sd <= 0):
        raise ValidationError("marginal standard deviations must be positive")
    return sd


def _omega_from_icc(dc, icc, sd, I, T, N, variant):
    icc = _as_matrices(icc)
    sd = _sd(sd, icc.L)
    a, b = design_multipliers(dc, I, T)
    A, B = eigen_blocks(icc, T, N)
    M = _bracket(a, b, A, B)
    Minv = spd_inverse(M, "information bracket")
    omega = (I * T / N) * Minv * np.outer(sd, sd)
    return EffectCovariance((omega + omega.T) / 2, variant)


def covariance_cross_sectional(dc: DesignConstants, icc, sd, I: int, T: int, N: int) -> EffectCovariance:
    """Effect covariance for the cross-sectional model from the ICC matrices."""
    m = _as_matrices(icc)
    if m.closed_cohort:
        raise ValidationError("closed-cohort ICC matrices passed to the cross-sectional formula")
    return _omega_from_icc(dc, m, sd, I, T, N, "general-cs")


def covariance_closed_cohort(dc: DesignConstants, icc, sd, I: int, T: int, N: int) -> EffectCovariance:
    """Effect covariance for the closed-cohort model from the ICC matrices."""
    m = _as_matrices(icc)
    if not m.closed_cohort:
        raise ValidationError("closed-cohort formula needs the between-period intra-subject matrix")
    return _omega_from_icc(dc, m, sd, I, T, N, "general-cc")


def covariance_cross_sectional_vc(dc: DesignConstants, vc: VarianceComponents, I: int, T: int, N: int) -> EffectCovariance:
    """Same covariance written directly in variance components."""
    if vc.closed_cohort:
        return covariance_closed_cohort_vc(dc, vc, I, T, N)
    a, b = design_multipliers(dc, I, T)
    inner = vc.sigma_s + vc.sigma_eps / N
    M = a * spd_inverse(inner, "Sigma_s + Sigma_eps/N") - b * spd_inverse(
        T * vc.sigma_b + inner, "T Sigma_b + Sigma_s + Sigma_eps/N"
    )
    omega = I * T * spd_inverse(M, "information bracket")
    return EffectCovariance(omega, "general-cs")


def covariance_closed_cohort_vc(dc: DesignConstants, vc: VarianceComponents, I: int, T: int, N: int) -> EffectCovariance:
    a, b = design_multipliers(dc, I, T)
    A = N * vc.sigma_s + vc.sigma_eps
    B = T * N * vc.sigma_b + N * vc.sigma_s + T * vc.sigma_gamma + vc.sigma_eps
    M = a * spd_inverse(A, "N Sigma_s + Sigma_eps") - b * spd_inverse(B, "cluster-total block")
    omega = (I * T / N) * spd_inverse(M, "information bracket")
    return EffectCovariance(omega, "general-cc")


def effect_covariance(schedule: DesignSchedule, icc: IccSet, sd=1.0, N: int | None = None) -> EffectCovariance:
    """Dispatch on the ICC set's design kind for a concrete schedule."""
    dc = design_constants(schedule)
    N = schedule.N if N is None else N
    if icc.closed_cohort:
        return covariance_closed_cohort(dc, icc, sd, schedule.I, schedule.T, N)
    return covariance_cross_sectional(dc, icc, sd, schedule.I, schedule.T, N)


def common_effect_weights(icc: IccSet) -> np.ndarray:
    """Residual SD of each endpoint on the correlation scale (omega / sigma_y)."""
    r = 1 - np.diag(icc.rho0)
    if icc.closed_cohort:
        r = r + np.diag(icc.rho1) - np.diag(icc.rho2prime)
    if np.any(r <= 0):
        raise ValidationError("residual variance share must be positive for the common-effect model")
    return np.sqrt(r)


def variance_common_effect(dc: DesignConstants, icc: IccSet, I: int, T: int, N: int, mode: str | None = None) -> float:
    """Variance of the shared standardized effect estimator.

    The shared effect acts on every endpoint scaled by its residual SD, so the
    result is free of the marginal SDs.
    """
    if mode is not None and canonical_mode(mode) != icc.design_kind:
        raise ValidationError(f"mode {mode!r} does not match ICC set ({icc.design_kind})")
    w = common_effect_weights(icc)
    a, b = design_multipliers(dc, I, T)
    A, B = eigen_blocks(build_icc_matrices(icc), T, N)
    Ainv = spd_inverse(A, "A (within-cluster block)")
    Binv = spd_inverse(B, "B (cluster-total block)")
    info = a * (w @ Ainv @ w) - b * (w @ Binv @ w)
    if info <= 0:
        raise SingularMatrixError("common-effect information", f"value {info:.3g}")
    return float(I * T / N / info)


def _common_summary(N, T, mode, common):
    return eigen_summary(N, T, mode, **common)


def covariance_common_icc(dc: DesignConstants, common: dict, sd, I: int, T: int, N: int, L: int, mode: str) -> EffectCovariance:
    """Exchangeable-form covariance built from lambda/tau (the common-ICC matrix form)."""
    mode = canonical_mode(mode)
    es = _common_summary(N, T, mode, common)
    la, lb, ta, tb = es.pair()
    Id, J = np.eye(L), np.ones((L, L))
    a, b = design_multipliers(dc, I, T)
    M = _bracket(a, b, (la - ta) * Id + ta * J, (lb - tb) * Id + tb * J)
    sd = _sd(sd, L)
    omega = (I * T / N) * spd_inverse(M, "information bracket") * np.outer(sd, sd)
    return EffectCovariance(omega, "common-icc-cs" if mode == CROSS_SECTIONAL else "common-icc-cc")


def variance_common_icc_diag(dc: DesignConstants, common: dict, sd_y: float, I: int, T: int, N: int, L: int, mode: str) -> float:
    """Analytical diagonal element of the common-ICC covariance."""
    es = _common_summary(N, T, canonical_mode(mode), common)
    la, lb, ta, tb = es.pair()
    a, b = design_multipliers(dc, I, T)
    ea, eb = la + (L - 1) * ta, lb + (L - 1) * tb
    d1 = a * (lb - tb) - b * (la - ta)
    d2 = a * eb - b * ea
    if d1 <= 0 or d2 <= 0 or min(la, lb, ea, eb) <= 0:
        raise SingularMatrixError("common-ICC bracket", f"terms {d1:.3g}, {d2:.3g}")
    num = a * la * (lb - tb) * eb - b * lb * (la - ta) * ea
    return float((I * T / N) * sd_y**2 / d1 * num / d2)


def variance_both_common(dc: DesignConstants, common: dict, sd_y: float, I: int, T: int, N: int, L: int, mode: str, *, scaled: bool = False) -> float:
    """Variance under common ICCs and a common effect.

    ``scaled=False`` returns the variance of the endpoint-l effect estimator
    on its original scale (delta_l = sigma_yl lambda1^{1/2} delta');
    ``scaled=True`` returns the variance of the shared standardized effect.
    """
    es = _common_summary(N, T, canonical_mode(mode), common)
    la, lb, ta, tb = es.pair()
    a, b = design_multipliers(dc, I, T)
    ea, eb = la + (L - 1) * ta, lb + (L - 1) * tb
    den = a * eb - b * ea
    if den <= 0:
        raise SingularMatrixError("common-effect bracket", f"value {den:.3g}")
    v = (I * T / (L * N)) * ea * eb / den
    if scaled:
        return float(v / es.lambda1)
    return float(sd_y**2 * v)


def variance_hooper_girling(dc: DesignConstants, I: int, T: int, N: int, mode: str, *, rho0: float, rho1: float, rho2: float | None = None, sd_y: float = 1.0) -> float:
    """Single-outcome variance (nested exchangeable / block exchangeable)."""
    mode = canonical_mode(mode)
    a, b = design_multipliers(dc, I, T)
    if mode == CROSS_SECTIONAL:
        la = 1 + (N - 1) * rho0 - N * rho1
        lb = 1 + (N - 1) * rho0 + (T - 1) * N * rho1
    else:
        if rho2 is None:
            raise ValidationError("closed-cohort univariate variance needs rho2")
        la = 1 + (N - 1) * (rho0 - rho1) - rho2
        lb = 1 + (N - 1) * rho0 + (T - 1) * (N - 1) * rho1 + (T - 1) * rho2
    den = a * lb - b * la
    if den <= 0 or la <= 0:
        raise SingularMatrixError("univariate bracket", f"value {den:.3g}")
    return float((I * T / N) * sd_y**2 * la * lb / den)


def limiting_covariance(dc: DesignConstants, icc, sd, I: int, T: int) -> np.ndarray:
    """Cross-sectional effect covariance in the limit N -> infinity.

    Both eigen-blocks grow linearly in N, cancelling the leading I T / N, so
    the limit is I T Lam [a (G0 - G1)^{-1} - b (G0 + (T-1) G1)^{-1}]^{-1} Lam.
    It exists only when G0 - G1 is nonsingular.
    """
    m = _as_matrices(icc)
    if m.closed_cohort:
        raise ValidationError("limiting covariance is defined for cross-sectional designs")
    sd = _sd(sd, m.L)
    D = m.gamma0 - m.gamma1
    if np.allclose(D, 0.0, atol=1e-14):
        raise DegenerateLimitError("Gamma0 - Gamma1", "within- and between-period ICC matrices are equal; limit is zero")
    a, b = design_multipliers(dc, I, T)
    try:
        Dinv = spd_inverse(D, "Gamma0 - Gamma1")
    except SingularMatrixError as exc:
        raise DegenerateLimitError("Gamma0 - Gamma1", str(exc)) from None
    M = a * Dinv - b * spd_inverse(m.gamma0 + (T - 1) * m.gamma1, "Gamma0 + (T-1) Gamma1")
    return I * T * spd_inverse(M, "limit bracket") * np.outer(sd, sd)


__all__ = [
    "CLOSED_COHORT",
    "CROSS_SECTIONAL",
    "EffectCovariance",
    "VARIANTS",
    "common_effect_weights",
    "covariance_closed_cohort",
    "covariance_closed_cohort_vc",
    "covariance_common_icc",
    "covariance_cross_sectional",
    "covariance_cross_sectional_vc",
    "design_multipliers",
    "effect_covariance",
    "eigen_blocks",
    "limiting_covariance",
    "spd_inverse",
    "variance_both_common",
    "variance_common_effect",
    "variance_common_icc_diag",
    "variance_hooper_girling",
]
