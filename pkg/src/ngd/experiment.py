"""Seeded Monte-Carlo harness reproducing the simulation studies.

A run is described by an :class:`ExperimentConfig`.  Replicate ``r`` uses
seed ``base_seed + r`` for data generation and partitioning; the fixed-degree
graph is drawn from a seed derived from the same value.  Replicates are
simulated in fixed-size batches (block-diagonal averaging matrix), batches
may be spread over worker processes, and everything is merged in a fixed
order so the files written do not depend on the worker count.

Config files are INI-style key/value text; see ``README.md`` for the schema.
"""

from __future__ import annotations

import configparser
import csv
import hashlib
import io
import itertools
import json
import math
import re
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import data_gen, diagnostics, engine, losses, topology
from .errors import ConfigError, InvalidArgument, NGDError, NumericalFailure, SchemaVersionMismatch

__all__ = [
    "SCHEMA_VERSION",
    "SWEEP_ALPHA",
    "ExperimentConfig",
    "parse_topology",
    "load_configs",
    "parse_config_text",
    "derive_seed",
    "build_replicate",
    "run_experiment",
    "sweep_degree",
    "diagnose",
    "gen_data",
    "report",
    "read_csv",
]

SCHEMA_VERSION = 1
BATCH_REPLICATES = 25
SWEEP_ALPHA = {"linear": 2e-3, "logistic": 2e-2, "poisson": 2e-4}
_TOPO_RE = re.compile(r"^(central_client|circle|fixed_degree)(?:\((\d+)\))?$")


def parse_topology(spec: str) -> tuple[str, int | None]:
    m = _TOPO_RE.match(spec.replace(" ", ""))
    if not m:
        raise ConfigError(f"unknown topology {spec!r}")
    kind, deg = m.group(1), m.group(2)
    if kind == "central_client":
        if deg is not None:
            raise ConfigError("central_client takes no degree")
        return kind, None
    if deg is None:
        raise ConfigError(f"{kind} needs a degree, e.g. {kind}(2)")
    return kind, int(deg)


def derive_seed(seed: int, purpose: int) -> int:
    """Independent 63-bit seed for one purpose (e.g. graph sampling) of a replicate."""
    state = np.random.SeedSequence([int(seed), int(purpose)]).generate_state(2, np.uint32)
    return int((int(state[0]) << 31) ^ int(state[1]))


@dataclass(frozen=True)
class ExperimentConfig:
    model: str
    n_total: int
    m_clients: int
    topology: str
    alpha_list: tuple
    pattern: str = "homogeneous"
    replicates: int = 100
    iterations: tuple = (3000,)
    base_seed: int = 0
    record_every: int = 10
    p: int | None = None
    divergence_guard: float = 1e8
    spectral_replicates: int = 1
    write_trajectories: bool = True

    def __post_init__(self):
        alphas = tuple(float(a) for a in np.atleast_1d(self.alpha_list))
        its = tuple(int(t) for t in np.atleast_1d(self.iterations))
        if len(its) == 1 and len(alphas) > 1:
            its = its * len(alphas)
        object.__setattr__(self, "alpha_list", alphas)
        object.__setattr__(self, "iterations", its)
        self.validate()

    def validate(self) -> None:
        if self.model not in data_gen.MODEL_KINDS:
            raise ConfigError(f"unknown model {self.model!r}")
        if self.pattern not in data_gen.PATTERNS:
            raise ConfigError(f"unknown pattern {self.pattern!r}")
        kind, deg = parse_topology(self.topology)
        if self.m_clients < 2 or self.n_total < 1 or self.n_total % self.m_clients:
            raise ConfigError(f"m_clients={self.m_clients} must be >= 2 and divide n_total={self.n_total}")
        if deg is not None and not 1 <= deg < self.m_clients:
            raise ConfigError(f"degree {deg} outside [1, {self.m_clients - 1}]")
        if not self.alpha_list or any(not a > 0 for a in self.alpha_list):
            raise ConfigError("alpha_list must hold positive learning rates")
        if len(self.iterations) != len(self.alpha_list) or any(t < 1 for t in self.iterations):
            raise ConfigError("iterations must be one positive integer or one per alpha")
        if self.replicates < 1:
            raise ConfigError("replicates must be >= 1")
        if self.record_every < 1:
            raise ConfigError("record_every must be >= 1")
        if self.p is not None and self.model != "linear":
            raise ConfigError("p can only be set for the linear model")

    @property
    def n(self) -> int:
        return self.n_total // self.m_clients

    def to_dict(self) -> dict:
        d = asdict(self)
        d["alpha_list"] = list(self.alpha_list)
        d["iterations"] = list(self.iterations)
        return d

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def tag(self) -> str:
        topo = self.topology.replace("(", "-").replace(")", "")
        return f"{self.model}_{topo}_{self.pattern}"


_INT_KEYS = {"n_total", "m_clients", "replicates", "base_seed", "record_every", "p", "spectral_replicates"}
_FLOAT_KEYS = {"divergence_guard"}
_BOOL_KEYS = {"write_trajectories"}


def _split_list(value: str) -> list[str]:
    # commas at depth 0 only, so "circle(1), central_client" splits cleanly
    return [v.strip() for v in value.split(",") if v.strip()]


def _coerce(key: str, value: str):
    try:
        if key == "alpha_list":
            return tuple(float(v) for v in _split_list(value))
        if key == "iterations":
            return tuple(int(v) for v in _split_list(value))
        if key in _INT_KEYS:
            return int(value)
        if key in _FLOAT_KEYS:
            return float(value)
        if key in _BOOL_KEYS:
            return value.strip().lower() in ("1", "true", "yes", "on")
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {value!r}") from exc
    return value.strip()


def parse_config_text(text: str) -> tuple[list[ExperimentConfig], dict]:
    """Parse INI text into configs (one per sweep combination) and extra sweep keys."""
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse config: {exc}") from exc
    if not cp.has_section("experiment"):
        raise ConfigError("config needs an [experiment] section")
    known = set(ExperimentConfig.__dataclass_fields__)
    base = {}
    for key, value in cp.items("experiment"):
        if key not in known:
            raise ConfigError(f"unknown config key {key!r}")
        base[key] = _coerce(key, value)
    axes, extra = {}, {}
    if cp.has_section("sweep"):
        for key, value in cp.items("sweep"):
            if key == "degrees":
                extra["degrees"] = [int(v) for v in _split_list(value)]
            elif key in ("topology", "pattern", "model"):
                axes[key] = _split_list(value)
            else:
                raise ConfigError(f"unknown sweep axis {key!r}")
    configs = []
    names = sorted(axes)
    for combo in itertools.product(*(axes[n] for n in names)) if names else [()]:
        fields = dict(base, **dict(zip(names, combo)))
        try:
            configs.append(ExperimentConfig(**fields))
        except TypeError as exc:
            raise ConfigError(f"incomplete config: {exc}") from exc
        except InvalidArgument as exc:
            raise ConfigError(str(exc)) from exc
    return configs, extra


def load_configs(path) -> tuple[list[ExperimentConfig], dict]:
    return parse_config_text(Path(path).read_text())


# -- replicate construction -------------------------------------------------


@dataclass
class Replicate:
    index: int
    seed: int
    dataset: data_gen.Dataset
    problem: losses.ShardedProblem
    adjacency: topology.AdjacencyMatrix
    weights: topology.WeightMatrix
    theta_ge: np.ndarray


def build_topology(spec: str, m_clients: int, seed: int) -> topology.AdjacencyMatrix:
    kind, deg = parse_topology(spec)
    if kind == "central_client":
        return topology.build_central_client(m_clients)
    if kind == "circle":
        return topology.build_circle(m_clients, deg)
    return topology.build_fixed_degree(m_clients, deg, derive_seed(seed, 2))


def build_replicate(cfg: ExperimentConfig, r: int) -> Replicate:
    seed = cfg.base_seed + r
    kwargs = {"p": cfg.p} if cfg.p is not None else {}
    ds = data_gen.generate(cfg.model, cfg.n_total, seed, **kwargs)
    part = data_gen.partition(ds, cfg.m_clients, cfg.pattern, seed)
    prob = losses.ShardedProblem.from_partition(ds, part)
    adj = build_topology(cfg.topology, cfg.m_clients, seed)
    ge = losses.global_estimator(cfg.model, ds).theta
    return Replicate(r, seed, ds, prob, adj, topology.to_weight_matrix(adj), ge)


# -- simulation ---------------------------------------------------------------


def _run_chunk(cfg: ExperimentConfig, alpha_index: int, reps: list[int]) -> dict:
    alpha = cfg.alpha_list[alpha_index]
    t_max = cfg.iterations[alpha_index]
    built = [build_replicate(cfg, r) for r in reps]
    problem = losses.ShardedProblem.concat([b.problem for b in built])
    w = engine.block_diagonal([b.weights for b in built])
    run_cfg = engine.RunConfig(
        alpha=alpha,
        max_iterations=t_max,
        record_every=cfg.record_every,
        divergence_guard=cfg.divergence_guard,
    )
    bt = engine.run_batch(
        problem,
        w,
        run_cfg,
        groups=len(built),
        theta0s=np.stack([b.dataset.theta0 for b in built]),
        references=np.stack([b.theta_ge for b in built]),
    )
    out = {"alpha_index": alpha_index, "replicates": []}
    balances: dict = {}
    for g, b in enumerate(built):
        key = b.adjacency.digest()
        if key not in balances:
            balances[key] = topology.balance_stats(b.weights)
        bal = balances[key]
        meta = {
            "replicate": b.index,
            "seed": b.seed,
            "topology_digest": b.adjacency.digest(),
            "strongly_connected": topology.is_strongly_connected(b.adjacency),
            "se2_w": bal.se2_w,
            "global_mse": float(((b.theta_ge - b.dataset.theta0) ** 2).sum()),
            "diverged_at": int(bt.diverged_at[g]),
        }
        ref = None if cfg.model == "linear" else b.theta_ge
        hess = b.problem.suff_stats() if cfg.model == "linear" else b.problem.hessians(b.theta_ge)
        meta["max_stable_lr"] = losses.max_stable_lr(hess)
        if b.index < cfg.spectral_replicates:
            try:
                radius, method = engine.contraction_spectrum(b.problem, b.weights, alpha, theta_ref=ref)
                meta["spectral_radius"], meta["spectral_method"] = radius, method
            except NumericalFailure as exc:
                meta["spectral_radius"], meta["spectral_method"] = exc.best_estimate, f"failed: {exc}"
        else:
            meta["spectral_radius"], meta["spectral_method"] = None, "skipped"
        if bt.diverged_at[g] < 0:
            rep = diagnostics.bound_report(
                b.problem, b.weights, alpha, bt.final_theta[g], b.theta_ge, b.dataset.theta0,
                iteration=int(bt.iterations[-1]), balance=bal,
            )
            meta["bound_report"] = rep.to_dict()
        else:
            meta["bound_report"] = None
        out["replicates"].append(
            {
                "meta": meta,
                "iterations": bt.iterations,
                "mse": bt.mse[:, g],
                "discrepancy": bt.discrepancy[:, g],
                "spread": bt.spread[:, g],
            }
        )
    return out


def _jobs(cfg: ExperimentConfig) -> list[tuple[int, list[int]]]:
    reps = list(range(cfg.replicates))
    chunks = [reps[i : i + BATCH_REPLICATES] for i in range(0, len(reps), BATCH_REPLICATES)]
    return [(a, c) for a in range(len(cfg.alpha_list)) for c in chunks]


def _execute(cfg: ExperimentConfig, workers: int) -> list[dict]:
    jobs = _jobs(cfg)
    if workers <= 1:
        return [_run_chunk(cfg, a, c) for a, c in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(_run_chunk, cfg, a, c) for a, c in jobs]
        return [f.result() for f in futures]


# -- file output ----------------------------------------------------------------


def _f(v) -> str:
    v = float(v)
    if math.isnan(v):
        return "nan"
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return repr(v)


def _log(v: float) -> float:
    with np.errstate(divide="ignore", invalid="ignore"):
        return float(np.log(v))


def _header(digest: str) -> str:
    return f"# schema_version={SCHEMA_VERSION} config_digest={digest}\n"


def _write_csv(path: Path, digest: str, columns: list[str], rows) -> None:
    buf = io.StringIO()
    buf.write(_header(digest))
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_f(v) if isinstance(v, (float, np.floating)) else v for v in row])
    path.write_text(buf.getvalue())


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True, allow_nan=True) + "\n")


def read_csv(path) -> tuple[dict, list[dict]]:
    """Read a result CSV; returns (header fields, rows as dicts of strings)."""
    text = Path(path).read_text().splitlines()
    if not text or not text[0].startswith("#"):
        raise SchemaVersionMismatch(SCHEMA_VERSION, None)
    header = dict(kv.split("=", 1) for kv in text[0][1:].split())
    found = header.get("schema_version")
    if found != str(SCHEMA_VERSION):
        raise SchemaVersionMismatch(SCHEMA_VERSION, found)
    rows = list(csv.DictReader(text[1:]))
    return header, rows


def aggregate_rows(records: list[tuple[float, int, int, float, float, int]]):
    """Median log-MSE and discrepancy per (alpha, iteration) over non-diverged replicates.

    ``records`` holds (alpha, replicate, iteration, log_mse, discrepancy, diverged).
    """
    groups: dict = {}
    for alpha, _, it, lm, disc, div in records:
        key = (alpha, it)
        groups.setdefault(key, ([], []))
        if not div:
            groups[key][0].append(lm)
            groups[key][1].append(disc)
    out = []
    for (alpha, it), (lms, discs) in sorted(groups.items()):
        med_lm = float(np.median(lms)) if lms else float("nan")
        med_d = float(np.median(discs)) if discs else float("nan")
        out.append((alpha, it, med_lm, med_d, len(lms)))
    return out


def run_experiment(cfg: ExperimentConfig, out_dir, workers: int = 1) -> Path:
    """Simulate every (alpha, replicate) and write the result files to ``out_dir``."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc
    digest = cfg.digest()
    results = _execute(cfg, workers)

    per_rep, finals, bounds, refs = [], [], [], {}
    traj_dir = out / "trajectories"
    if cfg.write_trajectories:
        traj_dir.mkdir(exist_ok=True)
    for chunk in results:
        a_idx = chunk["alpha_index"]
        alpha = cfg.alpha_list[a_idx]
        for rep in chunk["replicates"]:
            meta = rep["meta"]
            r = meta["replicate"]
            div_at = meta["diverged_at"]
            refs[r] = (meta["seed"], meta["global_mse"])
            rows = []
            for it, m, d, s in zip(rep["iterations"], rep["mse"], rep["discrepancy"], rep["spread"]):
                flagged = int(div_at >= 0 and it >= div_at)
                per_rep.append((alpha, r, meta["seed"], int(it), float(m), _log(m), float(d), float(s), flagged))
                rows.append((int(it), float(m), _log(m), float(d), float(s)))
            last = rows[-1]
            finals.append(
                (alpha, r, meta["seed"], int(rep["iterations"][-1]), last[1], last[2], last[3],
                 div_at, _log(meta["global_mse"]))
            )
            bounds.append({"alpha": alpha, "replicate": r, "report": meta["bound_report"]})
            if cfg.write_trajectories:
                stem = f"a{a_idx}_r{r:04d}"
                _write_csv(
                    traj_dir / f"{stem}.csv",
                    digest,
                    ["iteration", "mse", "log_mse", "discrepancy_to_global", "consensus_spread"],
                    rows,
                )
                side = {k: v for k, v in meta.items() if k != "bound_report"}
                side.update(
                    schema_version=SCHEMA_VERSION,
                    config=cfg.to_dict(),
                    config_digest=digest,
                    alpha=alpha,
                    prng=data_gen.PRNG_NAME,
                )
                _write_json(traj_dir / f"{stem}.json", side)

    per_rep.sort(key=lambda row: (row[0], row[1], row[3]))
    finals.sort(key=lambda row: (row[0], row[1]))
    bounds.sort(key=lambda b: (b["alpha"], b["replicate"]))
    _write_csv(
        out / "replicates.csv",
        digest,
        ["alpha", "replicate", "seed", "iteration", "mse", "log_mse", "discrepancy_to_global",
         "consensus_spread", "diverged"],
        per_rep,
    )
    agg = aggregate_rows([(row[0], row[1], row[3], row[5], row[6], row[8]) for row in per_rep])
    _write_csv(
        out / "aggregate.csv",
        digest,
        ["alpha", "iteration", "median_log_mse", "median_discrepancy", "n_replicates"],
        agg,
    )
    _write_csv(
        out / "final.csv",
        digest,
        ["alpha", "replicate", "seed", "iteration", "mse", "log_mse", "discrepancy_to_global",
         "diverged_at", "global_log_mse"],
        finals,
    )
    ref_rows = [(r, s, g, _log(g)) for r, (s, g) in sorted(refs.items())]
    _write_csv(out / "reference.csv", digest, ["replicate", "seed", "global_mse", "global_log_mse"], ref_rows)
    _write_json(
        out / "bounds.json",
        {"schema_version": SCHEMA_VERSION, "config_digest": digest, "reports": bounds},
    )
    global_med = float(np.median([_log(g) for _, g in refs.values()]))
    _write_json(
        out / "manifest.json",
        {
            "schema_version": SCHEMA_VERSION,
            "kind": "run",
            "config": cfg.to_dict(),
            "config_digest": digest,
            "prng": data_gen.PRNG_NAME,
            "global_median_log_mse": global_med,
            "diverged_replicates": sum(1 for f in finals if f[7] >= 0),
            "files": ["replicates.csv", "aggregate.csv", "final.csv", "reference.csv", "bounds.json"],
        },
    )
    return out


def sweep_degree(cfg: ExperimentConfig, degrees, out_dir, workers: int = 1, alpha: float | None = None) -> Path:
    """Run the fixed-degree graph at every degree with the model's sweep learning rate."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    alpha = SWEEP_ALPHA[cfg.model] if alpha is None else alpha
    degrees = [int(d) for d in degrees]
    for d in degrees:
        if not 1 <= d < cfg.m_clients:
            raise ConfigError(f"degree {d} outside [1, {cfg.m_clients - 1}]")
    base = replace(cfg, alpha_list=(alpha,), iterations=(max(cfg.iterations),))
    rows, runs = [], []
    for d in degrees:
        sub = replace(base, topology=f"fixed_degree({d})")
        path = run_experiment(sub, out / f"degree_{d}", workers)
        runs.append(f"degree_{d}")
        _, finals = read_csv(path / "final.csv")
        for row in finals:
            rows.append((d, int(row["replicate"]), float(row["log_mse"]), float(row["global_log_mse"]),
                         int(row["diverged_at"])))
    digest = base.digest()
    _write_csv(
        out / "degree_table.csv",
        digest,
        ["degree", "replicate", "final_log_mse", "global_log_mse", "diverged_at"],
        rows,
    )
    summary = []
    for d in degrees:
        vals = [r[2] for r in rows if r[0] == d and r[4] < 0]
        summary.append((d, *_five_numbers(vals)))
    glob = sorted({(r[1], r[3]) for r in rows})
    summary.append(("global", *_five_numbers([g for _, g in glob])))
    _write_csv(out / "degree_summary.csv", digest, ["degree", "min", "q1", "median", "q3", "max"], summary)
    _write_json(
        out / "manifest.json",
        {
            "schema_version": SCHEMA_VERSION,
            "kind": "sweep_degree",
            "config": base.to_dict(),
            "config_digest": digest,
            "alpha": alpha,
            "degrees": degrees,
            "runs": runs,
        },
    )
    return out


def _five_numbers(values) -> tuple[float, float, float, float, float]:
    if not len(values):
        return (float("nan"),) * 5
    q = np.quantile(np.asarray(values, dtype=float), [0.0, 0.25, 0.5, 0.75, 1.0])
    return tuple(float(v) for v in q)


# -- diagnostics without simulation ------------------------------------------


def diagnose(cfg: ExperimentConfig, replicate: int = 0) -> dict:
    """Topology, curvature and spectral report for one replicate, no NGD iterations."""
    b = build_replicate(cfg, replicate)
    bal = topology.balance_stats(b.weights)
    het = diagnostics.heterogeneity(b.problem, b.dataset.theta0)
    kap = diagnostics.curvature_bounds(b.problem, b.theta_ge)
    ref = None if cfg.model == "linear" else b.theta_ge
    hess = b.problem.suff_stats() if cfg.model == "linear" else b.problem.hessians(b.theta_ge)
    notes = []
    per_alpha = []
    overparam = cfg.n < b.problem.p
    for alpha in cfg.alpha_list:
        entry: dict = {"alpha": alpha}
        try:
            radius, method = engine.contraction_spectrum(b.problem, b.weights, alpha, theta_ref=ref)
            entry.update(spectral_radius=radius, spectral_method=method)
        except NumericalFailure as exc:
            entry.update(spectral_radius=exc.best_estimate, spectral_method="power (not converged)")
            notes.append(f"alpha={alpha}: {exc}")
        rep = diagnostics.bound_report(
            b.problem, b.weights, alpha, b.theta_ge[None].repeat(cfg.m_clients, 0), b.theta_ge,
            b.dataset.theta0, balance=bal,
        )
        entry["linear_bound_condition"] = rep.linear_bound_condition
        entry["general_bound_condition"] = rep.general_bound_condition
        if overparam and cfg.model == "linear":
            case, mat, thr = engine.leading_term(b.problem, b.weights, alpha)
            lead = None if mat is None else float(np.abs(np.linalg.eigvalsh(mat)).max())
            r = entry.get("spectral_radius")
            entry["overparam"] = {
                "radius": r,
                "converges": bool(r is not None and r < 1 - 1e-10),
                "leading_term_radius": lead,
                "leading_term_case": case,
                "alpha_threshold": thr,
            }
        per_alpha.append(entry)
    return {
        "schema_version": SCHEMA_VERSION,
        "config": cfg.to_dict(),
        "config_digest": cfg.digest(),
        "replicate": replicate,
        "seed": b.seed,
        "topology_digest": b.adjacency.digest(),
        "strongly_connected": topology.is_strongly_connected(b.adjacency),
        "n": cfg.n,
        "p": b.problem.p,
        "locally_overparameterized": overparam,
        "balance": bal.to_dict(),
        "heterogeneity": het.to_dict(),
        "curvature": kap,
        "max_stable_lr": losses.max_stable_lr(hess),
        "global_estimate": b.theta_ge.tolist(),
        "per_alpha": per_alpha,
        "notes": notes,
    }


def gen_data(cfg: ExperimentConfig, out_dir, replicate: int = 0) -> dict:
    """Persist one replicate's dataset, partition and graph; returns digests."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    seed = cfg.base_seed + replicate
    kwargs = {"p": cfg.p} if cfg.p is not None else {}
    ds = data_gen.generate(cfg.model, cfg.n_total, seed, **kwargs)
    part = data_gen.partition(ds, cfg.m_clients, cfg.pattern, seed)
    adj = build_topology(cfg.topology, cfg.m_clients, seed)
    data_gen.write_dataset(ds, out / "dataset.txt")
    data_gen.write_partition(part, out / "partition.txt")
    topology.write_edge_list(adj, out / "topology.txt")
    info = {
        "schema_version": SCHEMA_VERSION,
        "config_digest": cfg.digest(),
        "seed": seed,
        "prng": data_gen.PRNG_NAME,
        "dataset_digest": ds.digest(),
        "topology_digest": adj.digest(),
    }
    _write_json(out / "data_manifest.json", info)
    return info


# -- report ---------------------------------------------------------------------


def _load_manifest(path: Path) -> tuple[Path, dict]:
    path = Path(path)
    mpath = path / "manifest.json" if path.is_dir() else path
    try:
        manifest = json.loads(mpath.read_text())
    except OSError as exc:
        raise OSError(f"cannot read result manifest {mpath}: {exc}") from exc
    if manifest.get("schema_version") != SCHEMA_VERSION:
        raise SchemaVersionMismatch(SCHEMA_VERSION, manifest.get("schema_version"))
    return mpath.parent, manifest


def report(result_paths, out_dir) -> dict:
    """Merge run and degree-sweep results into plotting-ready tables.

    Writes ``curves.csv`` (median log-MSE per iteration), ``final.csv``
    (five-number summaries of final log-MSE) and, when degree sweeps are
    present, ``degree_box.csv``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    curves, finals, boxes = [], [], []
    run_dirs, digests = [], []
    for p in result_paths:
        base, manifest = _load_manifest(Path(p))
        digests.append(manifest["config_digest"])
        if manifest["kind"] == "sweep_degree":
            _, rows = read_csv(base / "degree_summary.csv")
            model = manifest["config"]["model"]
            pattern = manifest["config"]["pattern"]
            for row in rows:
                boxes.append((model, pattern, manifest["alpha"], row["degree"],
                              *(float(row[k]) for k in ("min", "q1", "median", "q3", "max"))))
        else:
            run_dirs.append((base, manifest))
    for base, manifest in run_dirs:
        cfg = manifest["config"]
        key = (cfg["model"], cfg["topology"], cfg["pattern"])
        _, agg = read_csv(base / "aggregate.csv")
        for row in agg:
            curves.append((*key, float(row["alpha"]), int(row["iteration"]), float(row["median_log_mse"])))
        _, fin = read_csv(base / "final.csv")
        by_alpha: dict = {}
        for row in fin:
            if int(row["diverged_at"]) < 0:
                by_alpha.setdefault(float(row["alpha"]), []).append(float(row["log_mse"]))
        for alpha in sorted(by_alpha):
            finals.append((*key, alpha, *_five_numbers(by_alpha[alpha]), manifest["global_median_log_mse"]))
    digest = hashlib.sha256(" ".join(sorted(digests)).encode()).hexdigest()
    _write_csv(out / "curves.csv", digest,
               ["model", "topology", "pattern", "alpha", "iteration", "median_log_mse"], curves)
    _write_csv(out / "final.csv", digest,
               ["model", "topology", "pattern", "alpha", "min", "q1", "median", "q3", "max",
                "global_median_log_mse"], finals)
    written = ["curves.csv", "final.csv"]
    if boxes:
        _write_csv(out / "degree_box.csv", digest,
                   ["model", "pattern", "alpha", "degree", "min", "q1", "median", "q3", "max"], boxes)
        written.append("degree_box.csv")
    return {"out": str(out), "files": written, "runs": len(run_dirs), "sweeps": len(boxes) > 0}
