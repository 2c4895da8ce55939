"""Network gradient descent iterations and their linear-dynamics analysis.

Parameters of all clients are kept as an (M, p) matrix ``Theta``.  One
iteration averages neighbours (``W @ Theta``) and then every client takes a
gradient step on its own shard.  For least squares the recursion is the
affine system ``vec(Theta') = Delta (W kron I_p) vec(Theta) + alpha Sxy``;
``stable_solution_ols`` and ``contraction_spectral_radius`` analyse that
system directly.

Several independent problems can be simulated in one batch by stacking their
clients and using a block-diagonal ``W`` (see :func:`run_batch`).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.linalg
import scipy.sparse as sp
from scipy.spatial.distance import pdist

from .errors import Diverged, InvalidArgument, NumericalFailure, SingularOmega
from .losses import LocalSuffStats, ShardedProblem
from .topology import WeightMatrix

__all__ = [
    "NgdState",
    "RunConfig",
    "Trajectory",
    "BatchTrajectory",
    "StableSolution",
    "OverparamReport",
    "DENSE_EIG_LIMIT",
    "neighborhood_average",
    "ngd_step",
    "run",
    "run_batch",
    "block_diagonal",
    "contraction_operator",
    "stable_solution_ols",
    "contraction_spectral_radius",
    "subspace_spectral_radius",
    "central_client_threshold",
    "circle_threshold",
    "overparam_check",
]

DENSE_EIG_LIMIT = 4096
OMEGA_COND_LIMIT = 1e12


@dataclass(frozen=True, eq=False)
class NgdState:
    theta_all: np.ndarray
    iteration: int = 0

    def __post_init__(self):
        theta = np.array(self.theta_all, dtype=float)
        if theta.ndim != 2:
            raise InvalidArgument(f"theta_all must be (M, p), got shape {theta.shape}")
        theta.setflags(write=False)
        object.__setattr__(self, "theta_all", theta)


@dataclass(frozen=True)
class RunConfig:
    alpha: float
    max_iterations: int
    init: object = "zeros"
    record_every: int = 1
    divergence_guard: float = 1e8
    early_stop: bool = False
    early_stop_tol: float = 1e-12
    track_spread: bool = True
    keep_states: bool = False

    def __post_init__(self):
        if not self.alpha > 0:
            raise InvalidArgument(f"alpha must be positive, got {self.alpha}")
        if int(self.max_iterations) != self.max_iterations or self.max_iterations < 1:
            raise InvalidArgument(f"max_iterations must be >= 1, got {self.max_iterations}")
        if self.record_every < 1:
            raise InvalidArgument("record_every must be >= 1")
        if not self.divergence_guard > 0:
            raise InvalidArgument("divergence_guard must be positive")
        if isinstance(self.init, str) and self.init != "zeros":
            raise InvalidArgument(f"unknown initializer {self.init!r}")


@dataclass
class Trajectory:
    """Snapshots of a single run; t = 0 is always recorded, and so is the last iteration."""

    iterations: np.ndarray
    mse: np.ndarray
    discrepancy: np.ndarray
    spread: np.ndarray
    final_state: NgdState
    stopped_early: bool = False
    states: list = field(default_factory=list)

    @property
    def log_mse(self) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return np.log(self.mse)


@dataclass
class BatchTrajectory:
    """Per-group snapshot metrics, arrays of shape (snapshots, groups)."""

    iterations: np.ndarray
    mse: np.ndarray
    discrepancy: np.ndarray
    spread: np.ndarray
    final_theta: np.ndarray
    diverged_at: np.ndarray
    stopped_early: bool = False
    states: list = field(default_factory=list)


@dataclass(frozen=True)
class StableSolution:
    theta_star: np.ndarray
    omega_condition: float


@dataclass(frozen=True)
class OverparamReport:
    radius: float
    converges: bool
    leading_term_radius: float | None = None
    leading_term_case: str | None = None
    alpha_threshold: float | None = None

    def to_dict(self) -> dict:
        return {
            "radius": self.radius,
            "converges": self.converges,
            "leading_term_radius": self.leading_term_radius,
            "leading_term_case": self.leading_term_case,
            "alpha_threshold": self.alpha_threshold,
        }


def _w_entries(w):
    if isinstance(w, WeightMatrix):
        return w.entries
    if sp.issparse(w):
        return w
    return np.asarray(w, dtype=float)


def _dense_w(w) -> np.ndarray:
    e = _w_entries(w)
    return e.toarray() if sp.issparse(e) else e


def block_diagonal(weights: Sequence) -> sp.csr_matrix:
    """Sparse block-diagonal stack of several weighting matrices."""
    return sp.block_diag([sp.csr_matrix(_dense_w(w)) for w in weights], format="csr")


def neighborhood_average(state: NgdState, w) -> np.ndarray:
    e = _w_entries(w)
    theta = state.theta_all if isinstance(state, NgdState) else np.asarray(state, dtype=float)
    if e.shape[1] != theta.shape[0]:
        raise InvalidArgument(f"W is {e.shape} but Theta has {theta.shape[0]} rows")
    return np.asarray(e @ theta)


def ngd_step(state: NgdState, w, problem: ShardedProblem, alpha: float, divergence_guard: float = 1e8) -> NgdState:
    if alpha < 0:
        raise InvalidArgument(f"alpha must be nonnegative, got {alpha}")
    avg = neighborhood_average(state, w)
    new = avg - alpha * problem.gradients(avg) if alpha else avg
    t = state.iteration + 1
    if not np.all(np.isfinite(new)) or np.abs(new).max() > divergence_guard:
        raise Diverged(f"parameters exceeded {divergence_guard:g} at iteration {t}", t)
    return NgdState(new, t)


def _initial_theta(init, k: int, p: int) -> np.ndarray:
    if isinstance(init, str):
        return np.zeros((k, p))
    theta = np.array(init, dtype=float)
    if theta.shape != (k, p):
        raise InvalidArgument(f"initial Theta must be ({k}, {p}), got {theta.shape}")
    return theta


def _group_metrics(theta, groups, theta0s, refs, track_spread):
    g = theta.reshape(groups, -1, theta.shape[1])
    m = g.shape[1]
    mse = ((g - theta0s[:, None, :]) ** 2).sum(axis=(1, 2)) / m
    disc = np.sqrt(((g - refs[:, None, :]) ** 2).sum(axis=(1, 2)) / m)
    if track_spread:
        spread = np.array([pdist(block).max() if m > 1 and np.all(np.isfinite(block)) else np.nan for block in g])
    else:
        spread = np.full(groups, np.nan)
    return mse, disc, spread


def run_batch(
    problem: ShardedProblem,
    w,
    config: RunConfig,
    groups: int = 1,
    theta0s=None,
    references=None,
) -> BatchTrajectory:
    """Run NGD on ``groups`` independent equal-size problems stacked in ``problem``.

    ``w`` must be block diagonal with matching blocks.  A group whose
    parameters blow past ``divergence_guard`` (or become non-finite) is frozen
    at NaN and its divergence iteration reported; other groups continue.
    """
    k, p = problem.m_clients, problem.p
    if k % groups:
        raise InvalidArgument(f"{k} clients cannot be split into {groups} groups")
    e = _w_entries(w)
    if e.shape != (k, k):
        raise InvalidArgument(f"W must be ({k}, {k}), got {e.shape}")
    theta0s = np.zeros((groups, p)) if theta0s is None else np.asarray(theta0s, dtype=float).reshape(groups, p)
    refs = np.zeros((groups, p)) if references is None else np.asarray(references, dtype=float).reshape(groups, p)
    m = k // groups
    alpha = config.alpha
    guard = config.divergence_guard

    theta = _initial_theta(config.init, k, p)
    diverged_at = np.full(groups, -1, dtype=np.int64)
    its, mses, discs, spreads, states = [], [], [], [], []

    def record(t, th):
        mse, disc, spread = _group_metrics(th, groups, theta0s, refs, config.track_spread)
        its.append(t)
        mses.append(mse)
        discs.append(disc)
        spreads.append(spread)
        if config.keep_states:
            states.append(th.copy())

    record(0, theta)
    stopped = False
    t = 0
    with np.errstate(over="ignore", invalid="ignore"):
        for t in range(1, config.max_iterations + 1):
            avg = np.asarray(e @ theta)
            new = avg - alpha * problem.gradients(avg, guard=False)
            peak = np.abs(new.reshape(groups, -1)).max(axis=1)
            bad = ~(peak <= guard) & (diverged_at < 0)
            if bad.any():
                diverged_at[bad] = t
                new.reshape(groups, m, p)[bad] = np.nan
            if config.early_stop:
                live = diverged_at < 0
                change = np.abs((new - theta).reshape(groups, -1)[live])
                if change.size == 0 or change.max() < config.early_stop_tol:
                    stopped = True
            theta = new
            if t % config.record_every == 0 or t == config.max_iterations or stopped:
                record(t, theta)
            if stopped:
                break
    return BatchTrajectory(
        iterations=np.array(its),
        mse=np.array(mses),
        discrepancy=np.array(discs),
        spread=np.array(spreads),
        final_theta=theta.reshape(groups, m, p),
        diverged_at=diverged_at,
        stopped_early=stopped,
        states=states,
    )


def run(problem: ShardedProblem, w, config: RunConfig, theta0=None, reference=None) -> Trajectory:
    """Apply ``config.max_iterations`` NGD steps from the configured start.

    Records MSE against ``theta0``, discrepancy against ``reference`` (for
    instance the global estimator) and the largest pairwise distance between
    clients.  Raises :class:`Diverged` when the guard trips.
    """
    bt = run_batch(problem, w, config, 1, theta0, reference)
    if bt.diverged_at[0] >= 0:
        raise Diverged(f"parameters exceeded {config.divergence_guard:g}", int(bt.diverged_at[0]))
    final = NgdState(bt.final_theta[0], int(bt.iterations[-1]))
    return Trajectory(
        iterations=bt.iterations,
        mse=bt.mse[:, 0],
        discrepancy=bt.discrepancy[:, 0],
        spread=bt.spread[:, 0],
        final_state=final,
        stopped_early=bt.stopped_early,
        states=bt.states,
    )


def _local_curvatures(shards, theta_ref=None) -> np.ndarray:
    if isinstance(shards, ShardedProblem):
        if shards.kind != "linear" and theta_ref is None:
            raise InvalidArgument("general losses need a reference point for the local Hessians")
        return shards.hessians(theta_ref)
    mats = [s.sigma_xx if isinstance(s, LocalSuffStats) else np.asarray(s, dtype=float) for s in shards]
    return np.stack(mats)


def _xy_stack(shards) -> np.ndarray:
    if isinstance(shards, ShardedProblem):
        return shards.sxy
    return np.stack([s.sigma_xy for s in shards])


def contraction_operator(shards, w, alpha: float, theta_ref=None) -> np.ndarray:
    """Dense q x q matrix ``Delta (W kron I_p)`` with ``Delta_m = I - alpha H_m``."""
    h = _local_curvatures(shards, theta_ref)
    wd = _dense_w(w)
    m, p = h.shape[0], h.shape[1]
    if wd.shape != (m, m):
        raise InvalidArgument(f"W is {wd.shape} but there are {m} shards")
    delta = np.eye(p)[None] - alpha * h
    return np.einsum("ij,iab->iajb", wd, delta).reshape(m * p, m * p)


def stable_solution_ols(shards, w, alpha: float) -> StableSolution:
    """Fixed point of the least-squares NGD recursion by a direct solve."""
    b = contraction_operator(shards, w, alpha)
    q = b.shape[0]
    rhs = alpha * _xy_stack(shards).ravel()
    omega = np.eye(q) - b
    with warnings.catch_warnings():
        # exact singularity shows up in rcond and is reported below
        warnings.simplefilter("ignore", scipy.linalg.LinAlgWarning)
        lu, piv = scipy.linalg.lu_factor(omega, check_finite=True)
    anorm = np.linalg.norm(omega, 1)
    rcond = scipy.linalg.lapack.dgecon(lu, anorm, norm="1")[0]
    cond = np.inf if rcond == 0 else 1.0 / rcond
    if not cond <= OMEGA_COND_LIMIT:
        raise SingularOmega(f"Omega is numerically singular (condition ~ {cond:.3g})")
    x = scipy.linalg.lu_solve((lu, piv), rhs)
    resid = np.linalg.norm(x - (b @ x + rhs)) / max(np.linalg.norm(x), np.finfo(float).tiny)
    if resid > 1e-8:
        raise NumericalFailure(f"stable solution residual {resid:.3g} exceeds 1e-8")
    m = _local_curvatures(shards).shape[0]
    return StableSolution(x.reshape(m, -1), float(cond))


def subspace_spectral_radius(
    apply,
    q: int,
    block: int = 32,
    tol: float = 1e-12,
    max_iter: int = 10_000,
    seed: int = 0,
) -> tuple[float, int]:
    """Largest |eigenvalue| of a real operator by block power iteration.

    ``apply`` maps a (q, b) array to (q, b).  Ritz values of the projected
    block capture complex-conjugate and equal-modulus eigenvalues as long as
    the block is at least as large as the leading cluster.
    """
    b = min(block, q)
    rng = np.random.default_rng(seed)
    v, _ = np.linalg.qr(rng.standard_normal((q, b)))
    prev = None
    calm = 0
    est = np.nan
    for k in range(1, max_iter + 1):
        z = apply(v)
        est = float(np.abs(np.linalg.eigvals(v.T @ z)).max())
        v, r = np.linalg.qr(z)
        if not np.all(np.isfinite(r)):
            break
        if np.abs(np.diag(r)).min() == 0.0:
            # invariant subspace found exactly
            return est, k
        if prev is not None and abs(est - prev) <= tol * max(est, 1e-300):
            calm += 1
            if calm >= 5:
                return est, k
        else:
            calm = 0
        prev = est
    raise NumericalFailure(f"power iteration did not converge in {max_iter} iterations", best_estimate=est)


def contraction_spectral_radius(shards, w, alpha: float, theta_ref=None, method: str = "auto") -> float:
    """Spectral radius of ``Delta (W kron I_p)``.

    ``method`` is ``"dense"`` (complex eigensolve), ``"power"`` (block power
    iteration through matrix-free products) or ``"auto"`` (dense when
    q <= DENSE_EIG_LIMIT).
    """
    return contraction_spectrum(shards, w, alpha, theta_ref, method)[0]


def contraction_spectrum(shards, w, alpha: float, theta_ref=None, method: str = "auto") -> tuple[float, str]:
    h = _local_curvatures(shards, theta_ref)
    m, p = h.shape[0], h.shape[1]
    q = m * p
    if method == "auto":
        method = "dense" if q <= DENSE_EIG_LIMIT else "power"
    if method == "dense":
        try:
            ev = scipy.linalg.eigvals(contraction_operator(h, w, alpha), check_finite=True)
        except (np.linalg.LinAlgError, ValueError) as exc:
            raise NumericalFailure(f"dense eigensolver failed: {exc}") from exc
        return float(np.abs(ev).max()), "dense"
    if method != "power":
        raise InvalidArgument(f"unknown method {method!r}")
    e = _w_entries(w)
    delta = np.eye(p)[None] - alpha * h

    def apply(v):
        blocks = v.reshape(m, p, -1)
        avg = np.asarray(e @ blocks.reshape(m, -1)).reshape(m, p, -1)
        return np.matmul(delta, avg).reshape(q, -1)

    est, _ = subspace_spectral_radius(apply, q)
    return est, "power"


def _topology_case(w) -> str | None:
    wd = _dense_w(w)
    m = wd.shape[0]
    star = np.zeros((m, m))
    star[0, 1:] = 1.0 / (m - 1)
    star[1:, 0] = 1.0
    if np.array_equal(wd, star):
        return "central_client"
    shift = np.roll(np.eye(m), 1, axis=1)
    if np.array_equal(wd, shift):
        return "circle_d1"
    return None


def central_client_threshold(shards) -> float:
    """``2(M-1) / {M lambda_max(Sxx) + (M-2) lambda_max(Sxx^(1))}``, client 1 at the centre."""
    h = _local_curvatures(shards)
    m = h.shape[0]
    lam_all = np.linalg.eigvalsh(h.mean(axis=0))[-1]
    lam_c = np.linalg.eigvalsh(h[0])[-1]
    return float(2.0 * (m - 1) / (m * lam_all + (m - 2) * lam_c))


def circle_threshold(shards) -> float:
    """``2 / (M lambda_max(Sxx))``: below it the circle leading term has radius < 1."""
    h = _local_curvatures(shards)
    return float(2.0 / (h.shape[0] * np.linalg.eigvalsh(h.mean(axis=0))[-1]))


def leading_term(shards, w, alpha: float):
    """First-order expansion of the cycle product for star and directed-cycle graphs."""
    case = _topology_case(w)
    h = _local_curvatures(shards)
    m, p = h.shape[0], h.shape[1]
    sxx = h.mean(axis=0)
    if case == "central_client":
        mat = np.eye(p) - alpha * (m * sxx + (m - 2) * h[0]) / (m - 1)
        return case, mat, central_client_threshold(h)
    if case == "circle_d1":
        return case, np.eye(p) - alpha * m * sxx, circle_threshold(h)
    return None, None, None


def overparam_check(shards, w, alpha: float) -> OverparamReport:
    """Exact contraction radius plus, for star/cycle graphs, the leading-term radius.

    Local second-moment matrices may be rank deficient (n < p).
    """
    radius = contraction_spectral_radius(shards, w, alpha)
    case, mat, thr = leading_term(shards, w, alpha)
    lead = None if mat is None else float(np.abs(np.linalg.eigvalsh(mat)).max())
    return OverparamReport(
        radius=radius,
        converges=bool(radius < 1.0 - 1e-10),
        leading_term_radius=lead,
        leading_term_case=case,
        alpha_threshold=thr,
    )
