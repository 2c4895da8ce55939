"""Local losses, gradients and Hessians for the three model families.

Conventions (per client with ``n`` observations):

* linear: the update direction is ``Sxx @ theta - Sxy``, i.e. half the
  calculus gradient of ``mean((y - x theta)^2)``; the Hessian is ``Sxx``.
* logistic / poisson: the loss is twice the average negative
  log-likelihood, so the gradient is ``(2/n) X^T (mu - y)`` and the
  Hessian ``(2/n) X^T diag(v) X``.

Learning rates are therefore not commensurate across families.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from functools import cached_property
from typing import Sequence

import numpy as np
import scipy.linalg

from .data_gen import MODEL_KINDS, Dataset, Partition
from .errors import InvalidArgument, NumericalFailure, NumericOverflow, SingularMatrix, SolverFailure

__all__ = [
    "EXP_LIMIT",
    "LocalSuffStats",
    "GlobalEstimate",
    "ShardedProblem",
    "suff_stats",
    "local_loss",
    "local_gradient",
    "local_hessian",
    "global_estimator",
    "max_stable_lr",
]

EXP_LIMIT = 700.0


@dataclass(frozen=True)
class LocalSuffStats:
    sigma_xx: np.ndarray
    sigma_xy: np.ndarray


@dataclass(frozen=True)
class GlobalEstimate:
    theta: np.ndarray
    grad_norm_at_solution: float
    iterations_used: int


def _check_kind(kind: str) -> None:
    if kind not in MODEL_KINDS:
        raise InvalidArgument(f"unknown model kind {kind!r}")


def _linear_predictor(x: np.ndarray, theta: np.ndarray, kind: str, guard: bool) -> np.ndarray:
    # x: (K, n, p), theta: (K, p)
    eta = np.matmul(x, theta[:, :, None])[:, :, 0]
    if guard and kind == "poisson" and np.any(eta > EXP_LIMIT):
        raise NumericOverflow(f"poisson linear predictor exceeds {EXP_LIMIT}")
    return eta


def _sigmoid(eta: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * eta))


def batch_loss(kind, x, y, theta, guard=True) -> np.ndarray:
    n = x.shape[1]
    eta = _linear_predictor(x, theta, kind, guard)
    if kind == "linear":
        r = y - eta
        return (r * r).sum(axis=1) / n
    if kind == "logistic":
        return 2.0 * (np.logaddexp(0.0, eta) - y * eta).sum(axis=1) / n
    # log(y!) dropped: it does not depend on theta.
    with np.errstate(over="ignore"):
        return 2.0 * (np.exp(eta) - y * eta).sum(axis=1) / n


def batch_gradient(kind, x, y, theta, sxx=None, sxy=None, guard=True) -> np.ndarray:
    """Per-client update directions for stacked shards ``x`` (K, n, p)."""
    if kind == "linear":
        if sxx is None:
            sxx = np.matmul(x.transpose(0, 2, 1), x) / x.shape[1]
            sxy = np.matmul(x.transpose(0, 2, 1), y[:, :, None])[:, :, 0] / x.shape[1]
        return np.matmul(sxx, theta[:, :, None])[:, :, 0] - sxy
    n = x.shape[1]
    eta = _linear_predictor(x, theta, kind, guard)
    if kind == "logistic":
        r = _sigmoid(eta) - y
    else:
        with np.errstate(over="ignore"):
            r = np.exp(eta) - y
    return np.matmul(r[:, None, :], x)[:, 0, :] * (2.0 / n)


def batch_hessian(kind, x, y, theta, guard=True) -> np.ndarray:
    n = x.shape[1]
    xt = x.transpose(0, 2, 1)
    if kind == "linear":
        return np.matmul(xt, x) / n
    eta = _linear_predictor(x, theta, kind, guard)
    if kind == "logistic":
        s = _sigmoid(eta)
        v = s * (1.0 - s)
    else:
        v = np.exp(eta)
    return np.matmul(xt * v[:, None, :], x) * (2.0 / n)


def _as_shard(shard) -> tuple[np.ndarray, np.ndarray]:
    x, y = shard
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    if y.shape != (x.shape[0],):
        raise InvalidArgument(f"shard shapes disagree: x={x.shape}, y={y.shape}")
    return x, y


def _as_theta(theta, p: int) -> np.ndarray:
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    if theta.shape != (p,):
        raise InvalidArgument(f"theta must have length {p}, got shape {theta.shape}")
    return theta


def suff_stats(shard_x, shard_y) -> LocalSuffStats:
    x, y = _as_shard((shard_x, shard_y))
    n = x.shape[0]
    return LocalSuffStats(x.T @ x / n, x.T @ y / n)


def local_loss(kind: str, shard, theta) -> float:
    _check_kind(kind)
    x, y = _as_shard(shard)
    theta = _as_theta(theta, x.shape[1])
    return float(batch_loss(kind, x[None], y[None], theta[None])[0])


def local_gradient(kind: str, shard, theta) -> np.ndarray:
    _check_kind(kind)
    x, y = _as_shard(shard)
    theta = _as_theta(theta, x.shape[1])
    return batch_gradient(kind, x[None], y[None], theta[None])[0]


def local_hessian(kind: str, shard, theta) -> np.ndarray:
    _check_kind(kind)
    x, y = _as_shard(shard)
    theta = _as_theta(theta, x.shape[1])
    return batch_hessian(kind, x[None], y[None], theta[None])[0]


@dataclass(frozen=True, eq=False)
class ShardedProblem:
    """The whole sample split into ``M`` equal shards, stacked as (M, n, p)."""

    kind: str
    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        _check_kind(self.kind)
        x = np.asarray(self.x, dtype=float)
        y = np.asarray(self.y, dtype=float)
        if x.ndim != 3 or y.shape != x.shape[:2]:
            raise InvalidArgument(f"expected x (M, n, p) and y (M, n), got {x.shape} and {y.shape}")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)

    @classmethod
    def from_partition(cls, dataset: Dataset, part: Partition) -> "ShardedProblem":
        idx = part.shard_indices
        return cls(dataset.model_kind, dataset.x[idx], dataset.y[idx])

    @classmethod
    def from_shards(cls, kind: str, shards: Sequence) -> "ShardedProblem":
        pairs = [_as_shard(s) for s in shards]
        return cls(kind, np.stack([p[0] for p in pairs]), np.stack([p[1] for p in pairs]))

    @classmethod
    def concat(cls, problems: Sequence["ShardedProblem"]) -> "ShardedProblem":
        kinds = {p.kind for p in problems}
        if len(kinds) != 1:
            raise InvalidArgument(f"cannot stack different model kinds {kinds}")
        return cls(kinds.pop(), np.concatenate([p.x for p in problems]), np.concatenate([p.y for p in problems]))

    @property
    def m_clients(self) -> int:
        return self.x.shape[0]

    @property
    def n(self) -> int:
        return self.x.shape[1]

    @property
    def p(self) -> int:
        return self.x.shape[2]

    @cached_property
    def sxx(self) -> np.ndarray:
        return np.matmul(self.x.transpose(0, 2, 1), self.x) / self.n

    @cached_property
    def sxy(self) -> np.ndarray:
        return np.matmul(self.x.transpose(0, 2, 1), self.y[:, :, None])[:, :, 0] / self.n

    def suff_stats(self) -> list[LocalSuffStats]:
        return [LocalSuffStats(a, b) for a, b in zip(self.sxx, self.sxy)]

    def shard(self, m: int) -> tuple[np.ndarray, np.ndarray]:
        return self.x[m], self.y[m]

    def _thetas(self, theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        if theta.ndim == 1:
            theta = np.broadcast_to(theta, (self.m_clients, self.p))
        if theta.shape != (self.m_clients, self.p):
            raise InvalidArgument(f"theta must be ({self.m_clients}, {self.p}), got {theta.shape}")
        return theta

    def gradients(self, theta, guard: bool = True) -> np.ndarray:
        """Row m is client m's update direction at row m of ``theta`` (or a shared vector)."""
        theta = self._thetas(theta)
        if self.kind == "linear":
            return batch_gradient("linear", self.x, self.y, theta, self.sxx, self.sxy)
        return batch_gradient(self.kind, self.x, self.y, theta, guard=guard)

    def hessians(self, theta) -> np.ndarray:
        if self.kind == "linear":
            return self.sxx
        return batch_hessian(self.kind, self.x, self.y, self._thetas(theta))

    def losses(self, theta) -> np.ndarray:
        return batch_loss(self.kind, self.x, self.y, self._thetas(theta))

    def pooled(self) -> tuple[np.ndarray, np.ndarray]:
        return self.x.reshape(-1, self.p), self.y.reshape(-1)


def _solve_linear(x: np.ndarray, y: np.ndarray) -> GlobalEstimate:
    n = x.shape[0]
    sxx = x.T @ x / n
    sxy = x.T @ y / n
    try:
        with warnings.catch_warnings():
            # singularity is reported through rcond below
            warnings.simplefilter("ignore", scipy.linalg.LinAlgWarning)
            lu = scipy.linalg.lu_factor(sxx, check_finite=True)
        rcond = scipy.linalg.lapack.dgecon(lu[0], np.linalg.norm(sxx, 1), norm="1")[0]
    except (ValueError, np.linalg.LinAlgError) as exc:
        raise SingularMatrix(f"sample second-moment matrix is singular: {exc}") from exc
    if not rcond > 1e-14:
        raise SingularMatrix(f"sample second-moment matrix is singular (rcond={rcond:.3g})")
    theta = scipy.linalg.lu_solve(lu, sxy)
    return GlobalEstimate(theta, float(np.linalg.norm(sxx @ theta - sxy)), 1)


def _newton(kind, x, y, tolerance, max_iter, max_halvings=30) -> GlobalEstimate:
    x3, y2 = x[None], y[None]
    p = x.shape[1]
    theta = np.zeros(p)

    def loss_at(th):
        with np.errstate(over="ignore", invalid="ignore"):
            eta = x @ th
            if kind == "poisson" and np.any(eta > EXP_LIMIT):
                return np.inf
            return float(batch_loss(kind, x3, y2, th[None], guard=False)[0])

    loss = loss_at(theta)
    history = []
    for it in range(max_iter + 1):
        grad = batch_gradient(kind, x3, y2, theta[None])[0]
        gnorm = float(np.linalg.norm(grad))
        history.append(gnorm)
        if gnorm <= tolerance:
            return GlobalEstimate(theta, gnorm, it)
        if it == max_iter:
            break
        hess = batch_hessian(kind, x3, y2, theta[None])[0]
        try:
            step = scipy.linalg.solve(hess, grad, assume_a="pos")
        except (np.linalg.LinAlgError, ValueError):
            step = np.linalg.lstsq(hess, grad, rcond=None)[0]
        t = 1.0
        for _ in range(max_halvings + 1):
            cand = theta - t * step
            cand_loss = loss_at(cand)
            if cand_loss <= loss:
                break
            t *= 0.5
        else:
            # No decrease possible at machine precision: accept only if already tiny.
            if gnorm <= 1e3 * tolerance:
                return GlobalEstimate(theta, gnorm, it)
            raise SolverFailure(
                "Newton line search failed to decrease the loss",
                {"iteration": it, "grad_norm": gnorm, "history": history},
            )
        theta, loss = cand, cand_loss
    raise SolverFailure(
        f"Newton did not reach gradient norm {tolerance} in {max_iter} iterations",
        {"grad_norm": history[-1], "history": history},
    )


def global_estimator(kind: str, data, tolerance: float = 1e-10, max_iter: int = 200) -> GlobalEstimate:
    """Whole-sample OLS (direct solve) or MLE (damped Newton from zero).

    ``data`` is a :class:`Dataset`, a :class:`ShardedProblem` or an ``(x, y)`` pair.
    """
    _check_kind(kind)
    if isinstance(data, Dataset):
        x, y = data.x, data.y
    elif isinstance(data, ShardedProblem):
        x, y = data.pooled()
    else:
        x, y = _as_shard(data)
    if kind == "linear":
        return _solve_linear(x, y)
    return _newton(kind, x, y, tolerance, max_iter)


def max_stable_lr(shards: Sequence) -> float:
    """``2 / max_m lambda_max(H_m)`` over local Hessians or sufficient statistics."""
    mats = [s.sigma_xx if isinstance(s, LocalSuffStats) else np.asarray(s, dtype=float) for s in shards]
    if not mats:
        raise InvalidArgument("max_stable_lr needs at least one shard")
    try:
        lam = max(np.linalg.eigvalsh(m)[-1] for m in mats)
    except np.linalg.LinAlgError as exc:
        raise NumericalFailure(f"eigensolver failed: {exc}") from exc
    if lam <= 0:
        return float("inf")
    return float(2.0 / lam)
