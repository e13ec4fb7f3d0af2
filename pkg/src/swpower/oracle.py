"""Dense individual-level FGLS covariance, used to check every closed form.

Builds each cluster's full (T N L) x (T N L) covariance from the variance
components and the fixed-effects design, then inverts the summed
information matrix.  Nothing here uses the design constants or the ICC
eigen-structure.
"""

from __future__ import annotations

import numpy as np
from scipy import linalg

from .correlation import VarianceComponents, canonical_mode, CLOSED_COHORT
from .design import DesignSchedule
from .errors import ValidationError
from .variance import EffectCovariance

MAX_CLUSTER_DIM = 2000


def cluster_covariance(vc: VarianceComponents, T: int, N: int, mode: str) -> np.ndarray:
    """Covariance of one cluster's outcomes, ordered (period, subject, endpoint)."""
    JT, IT = np.ones((T, T)), np.eye(T)
    JN, IN = np.ones((N, N)), np.eye(N)
    V = np.kron(JT, np.kron(JN, vc.sigma_b)) + np.kron(IT, np.kron(JN, vc.sigma_s))
    V += np.kron(IT, np.kron(IN, vc.sigma_eps))
    if canonical_mode(mode) == CLOSED_COHORT:
        if vc.sigma_gamma is None:
            raise ValidationError("closed-cohort oracle needs sigma_gamma")
        V += np.kron(JT, np.kron(IN, vc.sigma_gamma))
    return V


def fixed_design(x_row, N: int, L: int, *, common_effect_scale=None, period_coding: str = "cell") -> np.ndarray:
    """Individual-level fixed-effects design for one cluster.

    Columns: period effects per endpoint, then one treatment column per
    endpoint (or a single shared column weighted by ``common_effect_scale``).
    ``period_coding="cell"`` uses T period means; ``"reference"`` uses an
    intercept plus T - 1 contrasts.  Both span the same space.
    """
    T = len(x_row)
    if period_coding == "cell":
        P = np.eye(T)
    elif period_coding == "reference":
        P = np.hstack([np.ones((T, 1)), np.eye(T)[:, 1:]])
    else:
        raise ValidationError(f"unknown period coding {period_coding!r}")
    per = np.kron(np.kron(P, np.ones((N, 1))), np.eye(L))
    x = np.repeat(np.asarray(x_row, dtype=float), N)[:, None]
    if common_effect_scale is None:
        trt = np.kron(x, np.eye(L))
    else:
        trt = np.kron(x, np.asarray(common_effect_scale, dtype=float)[:, None])
    return np.hstack([per, trt])


def brute_force_covariance(
    schedule: DesignSchedule,
    vc: VarianceComponents,
    mode: str,
    *,
    common_effect: bool = False,
    period_coding: str = "cell",
) -> EffectCovariance:
    """Treatment block of (sum_i Z_i' V_i^{-1} Z_i)^{-1}.

    With ``common_effect=True`` the treatment enters every endpoint as
    sigma_eps,l * delta' and the 1 x 1 variance of delta' is returned.
    """
    T, N, L = schedule.T, schedule.N, vc.L
    if T * N * L > MAX_CLUSTER_DIM:
        raise ValidationError(f"oracle cluster dimension {T * N * L} exceeds cap {MAX_CLUSTER_DIM}")
    V = cluster_covariance(vc, T, N, mode)
    cf = linalg.cho_factor(V, lower=True)
    scale = np.sqrt(np.diag(vc.sigma_eps)) if common_effect else None
    info = 0.0
    for x_row in schedule.treatment:
        Z = fixed_design(x_row, N, L, common_effect_scale=scale, period_coding=period_coding)
        info = info + Z.T @ linalg.cho_solve(cf, Z)
    cov = np.linalg.inv(info)
    k = 1 if common_effect else L
    block = cov[-k:, -k:]
    block = (block + block.T) / 2
    mode = canonical_mode(mode)
    tag = ("common-effect-" if common_effect else "general-") + ("cc" if mode == CLOSED_COHORT else "cs")
    return EffectCovariance(block, tag)
