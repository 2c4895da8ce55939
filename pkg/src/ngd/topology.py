"""Communication graphs for network gradient descent.

A graph is stored as a binary adjacency matrix ``A`` where ``A[i, j] == 1``
means client ``i`` receives parameters from client ``j``.  Row normalisation
gives the averaging (weighting) matrix ``W``.

Three builders are provided: central-client (star), circle-type and
fixed-degree random graphs.
"""

from __future__ import annotations

import hashlib
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.sparse import csgraph, csr_matrix

from .errors import InvalidArgument, NumericalFailure, TopologyGenerationFailure

__all__ = [
    "AdjacencyMatrix",
    "WeightMatrix",
    "BalanceStats",
    "build_central_client",
    "build_circle",
    "build_fixed_degree",
    "to_weight_matrix",
    "se_w",
    "balance_stats",
    "is_strongly_connected",
    "write_edge_list",
    "read_edge_list",
    "MAX_RESAMPLE_ATTEMPTS",
]

MAX_RESAMPLE_ATTEMPTS = 64
POSITIVE_EIG_TOL = 1e-10


@dataclass(frozen=True, eq=False)
class AdjacencyMatrix:
    """Binary M x M adjacency with zero diagonal and nonzero row degrees."""

    entries: np.ndarray
    name: str = "custom"

    def __post_init__(self):
        a = np.asarray(self.entries)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise InvalidArgument(f"adjacency must be square, got shape {a.shape}")
        if a.shape[0] < 2:
            raise InvalidArgument("adjacency needs at least 2 clients")
        if not np.isin(a, (0, 1)).all():
            raise InvalidArgument("adjacency entries must be 0 or 1")
        if np.any(np.diag(a) != 0):
            raise InvalidArgument("adjacency diagonal must be zero")
        if np.any(a.sum(axis=1) < 1):
            bad = np.flatnonzero(a.sum(axis=1) < 1)
            raise InvalidArgument(f"clients {(bad + 1).tolist()} have in-degree 0")
        a = a.astype(np.int8)
        a.setflags(write=False)
        object.__setattr__(self, "entries", a)

    @property
    def m_clients(self) -> int:
        return self.entries.shape[0]

    @property
    def degrees(self) -> np.ndarray:
        return self.entries.sum(axis=1).astype(np.int64)

    def digest(self) -> str:
        """Stable sha256 of the edge structure."""
        h = hashlib.sha256()
        h.update(str(self.m_clients).encode())
        h.update(np.packbits(self.entries.astype(bool)).tobytes())
        return h.hexdigest()

    def __eq__(self, other):
        if not isinstance(other, AdjacencyMatrix):
            return NotImplemented
        return np.array_equal(self.entries, other.entries)

    def __hash__(self):
        return hash(self.digest())


@dataclass(frozen=True, eq=False)
class WeightMatrix:
    """Row-stochastic averaging matrix ``w_ij = a_ij / d_i``."""

    entries: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.entries, dtype=float)
        if w.ndim != 2 or w.shape[0] != w.shape[1]:
            raise InvalidArgument(f"weight matrix must be square, got shape {w.shape}")
        if np.any(w < 0):
            raise InvalidArgument("weights must be nonnegative")
        if not np.allclose(w.sum(axis=1), 1.0, rtol=0, atol=1e-12):
            raise InvalidArgument("weight matrix rows must sum to 1")
        w = w.copy()
        w.setflags(write=False)
        object.__setattr__(self, "entries", w)

    @property
    def m_clients(self) -> int:
        return self.entries.shape[0]

    def sparse(self) -> csr_matrix:
        return csr_matrix(self.entries)


@dataclass(frozen=True)
class BalanceStats:
    se2_w: float
    sigma_max_w: float
    sigma_min_I_minus_w: float
    rho: float

    @property
    def se_w(self) -> float:
        return float(np.sqrt(self.se2_w))

    def to_dict(self) -> dict:
        return {
            "se2_w": self.se2_w,
            "se_w": self.se_w,
            "sigma_max_w": self.sigma_max_w,
            "sigma_min_I_minus_w": self.sigma_min_I_minus_w,
            "rho": self.rho,
        }


def _check_m(m_clients: int) -> int:
    if int(m_clients) != m_clients or m_clients < 2:
        raise InvalidArgument(f"m_clients must be an integer >= 2, got {m_clients}")
    return int(m_clients)


def _check_degree(m_clients: int, degree: int) -> int:
    if int(degree) != degree or not 1 <= degree <= m_clients - 1:
        raise InvalidArgument(f"degree must lie in [1, {m_clients - 1}], got {degree}")
    return int(degree)


def build_central_client(m_clients: int) -> AdjacencyMatrix:
    """Star graph: client 1 exchanges with everybody, nobody else talks."""
    m = _check_m(m_clients)
    a = np.zeros((m, m), dtype=np.int8)
    a[0, 1:] = 1
    a[1:, 0] = 1
    return AdjacencyMatrix(a, name="central_client")


def build_circle(m_clients: int, degree: int) -> AdjacencyMatrix:
    """Each client receives from the next ``degree`` clients, cyclically."""
    m = _check_m(m_clients)
    d = _check_degree(m, degree)
    a = np.zeros((m, m), dtype=np.int8)
    rows = np.arange(m)
    for k in range(1, d + 1):
        a[rows, (rows + k) % m] = 1
    return AdjacencyMatrix(a, name=f"circle({d})")


def _sample_fixed_degree(m: int, d: int, rng: np.random.Generator) -> np.ndarray:
    # Ranking iid uniform keys gives a uniform D-subset without replacement per row.
    keys = rng.random((m, m))
    np.fill_diagonal(keys, np.inf)
    chosen = np.argpartition(keys, d - 1, axis=1)[:, :d]
    a = np.zeros((m, m), dtype=np.int8)
    a[np.repeat(np.arange(m), d), chosen.ravel()] = 1
    return a


def build_fixed_degree(
    m_clients: int,
    degree: int,
    seed: int,
    *,
    require_strongly_connected: bool = False,
    max_attempts: int = MAX_RESAMPLE_ATTEMPTS,
) -> AdjacencyMatrix:
    """Random graph where every client picks ``degree`` distinct senders.

    With ``require_strongly_connected`` the draw is repeated with seeds
    ``seed, seed + 1, ...`` until the graph is strongly connected.  For small
    degrees on many clients that almost never happens, so plain sampling is
    the default.
    """
    m = _check_m(m_clients)
    d = _check_degree(m, degree)
    attempts = max_attempts if require_strongly_connected else 1
    for k in range(attempts):
        a = AdjacencyMatrix(
            _sample_fixed_degree(m, d, np.random.default_rng(seed + k)),
            name=f"fixed_degree({d})",
        )
        if not require_strongly_connected or is_strongly_connected(a):
            if k > 0:
                warnings.warn(f"fixed-degree graph needed {k} resamples to be strongly connected")
            return a
    raise TopologyGenerationFailure(
        f"no strongly connected fixed-degree graph (M={m}, D={d}) in {attempts} attempts from seed {seed}"
    )


def to_weight_matrix(adj: AdjacencyMatrix) -> WeightMatrix:
    a = np.asarray(adj.entries, dtype=float)
    deg = a.sum(axis=1)
    if np.any(deg == 0):
        raise InvalidArgument("adjacency has a row with zero in-degree")
    return WeightMatrix(a / deg[:, None])


def _entries(w) -> np.ndarray:
    return np.asarray(w.entries if isinstance(w, WeightMatrix) else w, dtype=float)


def se_w(w: WeightMatrix) -> tuple[float, float]:
    """Mean squared deviation of the column sums of ``W`` from one, and its root."""
    e = _entries(w)
    dev = e.sum(axis=0) - 1.0
    se2 = float(dev @ dev / e.shape[0])
    return se2, float(np.sqrt(se2))


def _eigvalsh(mat: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.eigvalsh(mat)
    except np.linalg.LinAlgError as exc:
        raise NumericalFailure(f"symmetric eigensolver failed: {exc}") from exc


def balance_stats(w: WeightMatrix) -> BalanceStats:
    e = _entries(w)
    m = e.shape[0]
    se2, _ = se_w(e)
    sigma_max = np.sqrt(max(_eigvalsh(e.T @ e)[-1], 0.0))
    i_w = np.eye(m) - e
    ev = _eigvalsh(i_w.T @ i_w)
    pos = ev[ev > POSITIVE_EIG_TOL]
    sigma_min = float(np.sqrt(pos[0])) if pos.size else 0.0
    centred = e - e.mean(axis=0, keepdims=True)
    # W^T (I - 11^T/M) W == centred^T centred
    rho = np.sqrt(max(_eigvalsh(centred.T @ centred)[-1], 0.0))
    return BalanceStats(se2_w=se2, sigma_max_w=float(sigma_max), sigma_min_I_minus_w=sigma_min, rho=float(rho))


def is_strongly_connected(adj: AdjacencyMatrix) -> bool:
    a = adj.entries if isinstance(adj, AdjacencyMatrix) else np.asarray(adj)
    n_comp, _ = csgraph.connected_components(csr_matrix(a), directed=True, connection="strong")
    return n_comp == 1


def write_edge_list(adj: AdjacencyMatrix, path) -> None:
    """Write ``M`` then one 1-indexed ``row col`` pair per edge (``a[row, col] == 1``)."""
    rows, cols = np.nonzero(adj.entries)
    lines = [str(adj.m_clients)] + [f"{r + 1} {c + 1}" for r, c in zip(rows, cols)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")


def read_edge_list(path, name: str = "custom") -> AdjacencyMatrix:
    text = Path(path).read_text(encoding="ascii")
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise InvalidArgument(f"{path}: empty edge list")
    try:
        m = int(lines[0])
        pairs = [tuple(int(t) for t in ln.split()) for ln in lines[1:]]
    except ValueError as exc:
        raise InvalidArgument(f"{path}: malformed edge list ({exc})") from exc
    a = np.zeros((m, m), dtype=np.int64)
    for pair in pairs:
        if len(pair) != 2 or not all(1 <= v <= m for v in pair):
            raise InvalidArgument(f"{path}: bad edge {pair}")
        if a[pair[0] - 1, pair[1] - 1]:
            raise InvalidArgument(f"{path}: duplicate edge {pair}")
        a[pair[0] - 1, pair[1] - 1] = 1
    return AdjacencyMatrix(a, name=name)
