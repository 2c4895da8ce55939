"""Synthetic regression datasets and their partition across clients.

Three generators follow the simulation designs: a sparse linear model with
AR(0.5) correlated normal covariates, a logistic model with equicorrelated
covariates, and a Poisson model mixing AR(0.2) normals with standardised
Bernoulli covariates.  All randomness comes from ``numpy.random.default_rng``
(PCG64) seeded by the caller, so a (generator, N, seed) triple always yields
the same dataset.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InvalidArgument

__all__ = [
    "MODEL_KINDS",
    "PRNG_NAME",
    "LINEAR_THETA0",
    "LOGISTIC_THETA0",
    "POISSON_THETA0",
    "Dataset",
    "Partition",
    "ar_covariance",
    "equicorrelated_covariance",
    "logistic_prob",
    "poisson_mean",
    "gen_linear",
    "gen_logistic",
    "gen_poisson",
    "generate",
    "partition_homogeneous",
    "partition_heterogeneous",
    "partition",
    "write_dataset",
    "read_dataset",
    "write_partition",
    "read_partition",
]

MODEL_KINDS = ("linear", "logistic", "poisson")
PATTERNS = ("homogeneous", "heterogeneous")
PRNG_NAME = "numpy.PCG64"

LINEAR_THETA0 = np.array([3.0, 1.5, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0])
LOGISTIC_THETA0 = np.array([0.5, 0.5, 0.5, 0.5, 0.5, -1.25])
POISSON_THETA0 = np.array([1.2, 0.6, 0.0, 0.0, 0.8, 0.0, 0.0, 0.0])


@dataclass(frozen=True, eq=False)
class Dataset:
    model_kind: str
    x: np.ndarray
    y: np.ndarray
    theta0: np.ndarray
    seed: int = 0
    noise_sd: float | None = None

    def __post_init__(self):
        if self.model_kind not in MODEL_KINDS:
            raise InvalidArgument(f"unknown model kind {self.model_kind!r}")
        x = np.asarray(self.x, dtype=float)
        y = np.asarray(self.y, dtype=float)
        theta0 = np.asarray(self.theta0, dtype=float)
        if x.ndim != 2 or y.shape != (x.shape[0],) or theta0.shape != (x.shape[1],):
            raise InvalidArgument(
                f"inconsistent shapes x={x.shape} y={y.shape} theta0={theta0.shape}"
            )
        if self.model_kind == "logistic" and not np.isin(y, (0.0, 1.0)).all():
            raise InvalidArgument("logistic responses must be 0/1")
        if self.model_kind == "poisson" and (np.any(y < 0) or np.any(y != np.floor(y))):
            raise InvalidArgument("poisson responses must be nonnegative integers")
        for arr in (x, y, theta0):
            arr.setflags(write=False)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "theta0", theta0)

    @property
    def n_total(self) -> int:
        return self.x.shape[0]

    @property
    def p(self) -> int:
        return self.x.shape[1]

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(f"{self.model_kind} {self.n_total} {self.p}".encode())
        for arr in (self.theta0, self.x, self.y):
            h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        return h.hexdigest()


@dataclass(frozen=True, eq=False)
class Partition:
    """Equal-size, disjoint shards of sample indices (0-based in memory)."""

    m_clients: int
    shard_indices: np.ndarray
    pattern: str = field(default="homogeneous")

    def __post_init__(self):
        idx = np.asarray(self.shard_indices, dtype=np.int64)
        if idx.ndim != 2 or idx.shape[0] != self.m_clients:
            raise InvalidArgument(f"expected {self.m_clients} shards of equal size, got shape {idx.shape}")
        flat = np.sort(idx.ravel())
        if not np.array_equal(flat, np.arange(flat.size)):
            raise InvalidArgument("shards must be disjoint and cover 0..N-1")
        if self.pattern not in PATTERNS:
            raise InvalidArgument(f"unknown pattern {self.pattern!r}")
        idx.setflags(write=False)
        object.__setattr__(self, "shard_indices", idx)

    @property
    def n(self) -> int:
        return self.shard_indices.shape[1]

    def shards(self, dataset: Dataset) -> list[tuple[np.ndarray, np.ndarray]]:
        return [(dataset.x[i], dataset.y[i]) for i in self.shard_indices]


def ar_covariance(p: int, rho: float) -> np.ndarray:
    """cov(X_j, X_k) = rho^|j-k|."""
    j = np.arange(p)
    return rho ** np.abs(j[:, None] - j[None, :]).astype(float)


def equicorrelated_covariance(p: int, rho: float) -> np.ndarray:
    return np.full((p, p), rho) + (1.0 - rho) * np.eye(p)


def _correlated_normal(rng: np.random.Generator, n: int, cov: np.ndarray) -> np.ndarray:
    chol = np.linalg.cholesky(cov)
    return rng.standard_normal((n, cov.shape[0])) @ chol.T


def _check_n(n_total: int) -> int:
    if int(n_total) != n_total or n_total < 1:
        raise InvalidArgument(f"n_total must be a positive integer, got {n_total}")
    return int(n_total)


def logistic_prob(x: np.ndarray, theta: np.ndarray) -> np.ndarray:
    """P(Y = 1 | X = x)."""
    return 1.0 / (1.0 + np.exp(-(np.asarray(x) @ theta)))


def poisson_mean(x: np.ndarray, theta: np.ndarray) -> np.ndarray:
    return np.exp(np.asarray(x) @ theta)


def gen_linear(n_total: int, seed: int, *, noise_sd: float = 1.0, p: int = 8) -> Dataset:
    """Y = X theta0 + eps with AR(0.5) covariates.

    ``p`` larger than 8 pads theta0 with zeros (used for locally
    over-parameterised designs); ``noise_sd=0`` gives noiseless responses.
    """
    n = _check_n(n_total)
    if p < LINEAR_THETA0.size:
        raise InvalidArgument(f"linear design needs p >= {LINEAR_THETA0.size}, got {p}")
    theta0 = np.zeros(p)
    theta0[: LINEAR_THETA0.size] = LINEAR_THETA0
    rng = np.random.default_rng(seed)
    x = _correlated_normal(rng, n, ar_covariance(p, 0.5))
    eps = rng.standard_normal(n)
    y = x @ theta0 + noise_sd * eps
    return Dataset("linear", x, y, theta0, seed=seed, noise_sd=noise_sd)


def gen_logistic(n_total: int, seed: int) -> Dataset:
    n = _check_n(n_total)
    theta0 = LOGISTIC_THETA0.copy()
    rng = np.random.default_rng(seed)
    x = _correlated_normal(rng, n, equicorrelated_covariance(theta0.size, 0.5))
    y = (rng.random(n) < logistic_prob(x, theta0)).astype(float)
    return Dataset("logistic", x, y, theta0, seed=seed)


def gen_poisson(n_total: int, seed: int) -> Dataset:
    n = _check_n(n_total)
    theta0 = POISSON_THETA0.copy()
    rng = np.random.default_rng(seed)
    normals = _correlated_normal(rng, n, ar_covariance(6, 0.2))
    # Bernoulli(0.5) standardised with population moments: (b - 0.5) / 0.5
    bern = 2.0 * rng.integers(0, 2, size=(n, 2)) - 1.0
    x = np.hstack([normals, bern])
    y = rng.poisson(poisson_mean(x, theta0)).astype(float)
    return Dataset("poisson", x, y, theta0, seed=seed)


def generate(kind: str, n_total: int, seed: int, **kwargs) -> Dataset:
    gens = {"linear": gen_linear, "logistic": gen_logistic, "poisson": gen_poisson}
    if kind not in gens:
        raise InvalidArgument(f"unknown model kind {kind!r}")
    return gens[kind](n_total, seed, **kwargs)


def _block_count(n_total: int, m_clients: int) -> int:
    if int(m_clients) != m_clients or m_clients < 1:
        raise InvalidArgument(f"m_clients must be a positive integer, got {m_clients}")
    if n_total % m_clients:
        raise InvalidArgument(f"m_clients={m_clients} does not divide N={n_total}")
    return n_total // m_clients


def partition_homogeneous(dataset: Dataset, m_clients: int, seed: int) -> Partition:
    """Random permutation of the sample cut into M equal consecutive blocks."""
    n = _block_count(dataset.n_total, m_clients)
    # Separate stream from the generator's so data and assignment stay independent.
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(1,)))
    perm = rng.permutation(dataset.n_total)
    return Partition(m_clients, perm.reshape(m_clients, n), "homogeneous")


def partition_heterogeneous(dataset: Dataset, m_clients: int) -> Partition:
    n = _block_count(dataset.n_total, m_clients)
    order = np.argsort(dataset.y, kind="stable")
    return Partition(m_clients, order.reshape(m_clients, n), "heterogeneous")


def partition(dataset: Dataset, m_clients: int, pattern: str, seed: int) -> Partition:
    if pattern == "homogeneous":
        return partition_homogeneous(dataset, m_clients, seed)
    if pattern == "heterogeneous":
        return partition_heterogeneous(dataset, m_clients)
    raise InvalidArgument(f"unknown pattern {pattern!r}")


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def write_dataset(dataset: Dataset, path) -> None:
    """Columnar text: ``kind N p seed`` header, ``theta0 ...`` line, then ``y x1 .. xp`` rows."""
    lines = [
        f"{dataset.model_kind} {dataset.n_total} {dataset.p} {dataset.seed}",
        "theta0 " + " ".join(_fmt(v) for v in dataset.theta0),
    ]
    data = np.column_stack([dataset.y, dataset.x])
    lines.extend(" ".join(_fmt(v) for v in row) for row in data)
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")


def read_dataset(path) -> Dataset:
    with open(path, encoding="ascii") as fh:
        kind, n_total, p, seed = fh.readline().split()
        theta_line = fh.readline().split()
        if not theta_line or theta_line[0] != "theta0":
            raise InvalidArgument(f"{path}: missing theta0 line")
        theta0 = np.array([float(v) for v in theta_line[1:]])
        data = np.loadtxt(fh, ndmin=2)
    n_total, p = int(n_total), int(p)
    if data.shape != (n_total, p + 1):
        raise InvalidArgument(f"{path}: expected {n_total}x{p + 1} rows, got {data.shape}")
    return Dataset(kind, data[:, 1:], data[:, 0], theta0, seed=int(seed))


def write_partition(part: Partition, path) -> None:
    """``M n pattern`` header, then one line of 1-based sample indices per client."""
    lines = [f"{part.m_clients} {part.n} {part.pattern}"]
    lines.extend(" ".join(str(i + 1) for i in row) for row in part.shard_indices)
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")


def read_partition(path) -> Partition:
    lines = Path(path).read_text(encoding="ascii").splitlines()
    m, n, pattern = lines[0].split()
    rows = [[int(t) - 1 for t in ln.split()] for ln in lines[1:] if ln.strip()]
    idx = np.array(rows, dtype=np.int64)
    if idx.shape != (int(m), int(n)):
        raise InvalidArgument(f"{path}: expected {m} shards of {n}, got {idx.shape}")
    return Partition(int(m), idx, pattern)
