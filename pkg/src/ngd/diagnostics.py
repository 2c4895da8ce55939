"""Heterogeneity statistics, error metrics and empirical error-bound reports."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .engine import NgdState, Trajectory
from .losses import ShardedProblem
from .topology import balance_stats

__all__ = [
    "HeterogeneityStats",
    "ErrorBoundReport",
    "heterogeneity",
    "mse",
    "discrepancy_to_global",
    "curvature_bounds",
    "bound_report",
    "contraction_rates",
    "initial_phase",
    "fit_bound_constant",
]


@dataclass(frozen=True)
class HeterogeneityStats:
    se_sxx: float
    se_sxy: float
    se_grad0: float

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class ErrorBoundReport:
    """Every term of the two-phase error decomposition plus condition flags.

    Field names are a stable output contract (serialised by :meth:`to_dict`).
    """

    lhs_discrepancy: float
    bound_factor: float
    hetero_factor: float
    kappa1: float
    kappa2: float
    kappa3: float
    kappa4: float
    delta0_max: float
    iteration: int
    opt_error_at_t: float
    global_stat_error: float
    se_w: float
    sigma_max_w: float
    sigma_min_I_minus_w: float
    rho: float
    linear_bound_condition: bool | None
    general_bound_condition: bool
    degenerate_curvature: bool

    def to_dict(self) -> dict:
        return asdict(self)


def _theta(state) -> np.ndarray:
    return state.theta_all if isinstance(state, NgdState) else np.asarray(state, dtype=float)


def heterogeneity(shards: ShardedProblem, theta0) -> HeterogeneityStats:
    sxx, sxy = shards.sxx, shards.sxy
    dxx = sxx - sxx.mean(axis=0)
    dxy = sxy - sxy.mean(axis=0)
    # tr[(S_m - S)^2] is the squared Frobenius norm for symmetric S_m - S.
    se_sxx = np.sqrt((dxx**2).sum() / shards.m_clients)
    se_sxy = np.sqrt((dxy**2).sum() / shards.m_clients)
    g = shards.gradients(np.asarray(theta0, dtype=float))
    se_g = np.sqrt((g**2).sum() / shards.m_clients)
    return HeterogeneityStats(float(se_sxx), float(se_sxy), float(se_g))


def mse(state, theta0) -> float:
    """Average over clients of the squared error against ``theta0``."""
    th = _theta(state)
    return float(((th - np.asarray(theta0)) ** 2).sum() / th.shape[0])


def discrepancy_to_global(state, theta_ge) -> float:
    th = _theta(state)
    return float(np.sqrt(((th - np.asarray(theta_ge)) ** 2).sum() / th.shape[0]))


def curvature_bounds(shards: ShardedProblem, theta_ge) -> dict:
    """kappa1/kappa2 from second moments, kappa3/kappa4 from local Hessians at ``theta_ge``."""
    lam_sxx = np.linalg.eigvalsh(shards.sxx)
    hess = shards.hessians(np.asarray(theta_ge, dtype=float))
    lam_h = np.linalg.eigvalsh(hess)
    return {
        "kappa1": float(np.linalg.eigvalsh(shards.sxx.mean(axis=0))[0]),
        "kappa2": float(lam_sxx[:, -1].max()),
        "kappa3": float(lam_h[:, 0].min()),
        "kappa4": float(lam_h[:, -1].max()),
    }


def bound_report(
    shards: ShardedProblem,
    w,
    alpha: float,
    trajectory,
    theta_ge,
    theta0,
    *,
    iteration: int | None = None,
    start=None,
    balance=None,
) -> ErrorBoundReport:
    """Assemble the discrepancy and every bound term for one run.

    ``trajectory`` is a :class:`Trajectory` (its final state is used) or a
    final (M, p) parameter matrix.  For a bare matrix, ``iteration`` gives t
    (default 0, in which case the start is the matrix itself); otherwise the
    start defaults to zeros.  ``balance`` skips recomputing the topology
    statistics when the caller already has them.
    """
    if isinstance(trajectory, Trajectory):
        final = trajectory.final_state.theta_all
        t = trajectory.final_state.iteration
        if start is None:
            start = trajectory.states[0] if trajectory.states else np.zeros_like(final)
    else:
        final = _theta(trajectory)
        t = 0 if iteration is None else int(iteration)
        if start is None:
            start = final if t == 0 else np.zeros_like(final)
    start = np.asarray(start, dtype=float)
    theta_ge = np.asarray(theta_ge, dtype=float)
    bal = balance_stats(w) if balance is None else balance
    kap = curvature_bounds(shards, theta_ge)
    het = heterogeneity(shards, theta0)
    se_w = bal.se_w
    if shards.kind == "linear":
        hetero = het.se_sxx + het.se_sxy
        linear_ok = bool(
            alpha * kap["kappa2"] * bal.sigma_max_w + se_w
            < kap["kappa1"] / kap["kappa2"] * bal.sigma_min_I_minus_w / (4 * bal.sigma_max_w)
        )
    else:
        hetero = het.se_grad0
        linear_ok = None
    k3, k4 = kap["kappa3"], kap["kappa4"]
    degenerate = not k3 > 0
    general_ok = bool(
        not degenerate
        and bal.rho < 1
        and alpha * bal.sigma_max_w * k4 + se_w < 0.5 / k4 * k3 * (1 - bal.rho)
    )
    delta0 = float(np.linalg.norm(start - theta_ge, axis=1).max())
    factor = 1.0 - alpha * k3
    opt = delta0 * abs(factor) ** t if not degenerate else float("nan")
    return ErrorBoundReport(
        lhs_discrepancy=discrepancy_to_global(final, theta_ge),
        bound_factor=se_w + alpha,
        hetero_factor=float(hetero),
        kappa1=kap["kappa1"],
        kappa2=kap["kappa2"],
        kappa3=k3,
        kappa4=k4,
        delta0_max=delta0,
        iteration=int(t),
        opt_error_at_t=float(opt),
        global_stat_error=float(np.linalg.norm(theta_ge - np.asarray(theta0))),
        se_w=se_w,
        sigma_max_w=bal.sigma_max_w,
        sigma_min_I_minus_w=bal.sigma_min_I_minus_w,
        rho=bal.rho,
        linear_bound_condition=linear_ok,
        general_bound_condition=general_ok,
        degenerate_curvature=degenerate,
    )


def contraction_rates(errors) -> np.ndarray:
    """Successive ratios ``e[t+1] / e[t]`` of an error sequence."""
    e = np.asarray(errors, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        return e[1:] / e[:-1]


def initial_phase(errors, factor: float = 10.0) -> np.ndarray:
    """Boolean mask of the leading stretch where the error exceeds ``factor`` x its terminal value."""
    e = np.asarray(errors, dtype=float)
    above = e > factor * e[-1]
    if not above[0]:
        return np.zeros_like(above)
    stop = np.argmin(above) if not above.all() else above.size
    mask = np.zeros_like(above)
    mask[:stop] = True
    return mask


def fit_bound_constant(lhs, bound_factor, hetero_factor) -> float:
    """Median ratio ``lhs / (bound_factor * hetero_factor)`` over replicates."""
    lhs = np.asarray(lhs, dtype=float)
    rhs = np.asarray(bound_factor, dtype=float) * np.asarray(hetero_factor, dtype=float)
    return float(np.median(lhs / rhs))
