"""Operator command line: cluster logs, run replacements, build tables, simulate.

Exit codes: 0 success, 1 runtime failure, 2 usage or validation error. Every
flag can also be set through a JSON or TOML config file passed with --config;
explicit flags win over the config file, which wins over built-in defaults.
Outputs are written atomically (temp file + rename).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import tempfile

import numpy as np

from . import __version__
from .cache import entry_cost_bytes
from .clustering import (
    build_repository,
    dump_repository_json,
    load_repository,
    save_repository,
)
from .cache import SemanticCacheState, run_replacement
from .controller import build_t2h, default_grid
from .core import load_query_log, synthetic_embed
from .simulator import (
    MODES,
    ServingSystem,
    SimConfig,
    experiment_sweeps,
    run_simulation,
    write_rows_csv,
    write_trace_csv,
)
from .workload import ReplayQuerySource, WorkloadSpec, load_token_histogram

logger = logging.getLogger(__name__)

_UNSET = object()

_SIZE_SUFFIXES = {"kb": 1 << 10, "mb": 1 << 20, "gb": 1 << 30, "k": 1 << 10, "m": 1 << 20, "g": 1 << 30, "b": 1}


def parse_size(text: str) -> int:
    """Parse a byte size like '64MB', '512kb', or a plain integer."""
    s = str(text).strip().lower()
    for suffix, mult in sorted(_SIZE_SUFFIXES.items(), key=lambda kv: -len(kv[0])):
        if s.endswith(suffix):
            number = s[: -len(suffix)].strip()
            return int(float(number) * mult)
    return int(s)


def parse_grid(text: str) -> list[float]:
    """Parse 'top:floor:step' into a descending threshold grid."""
    parts = text.split(":")
    if len(parts) != 3:
        raise ValueError(f"grid must look like 0.98:0.60:0.02, got {text!r}")
    top, floor, step = (float(p) for p in parts)
    if step <= 0 or floor > top:
        raise ValueError(f"bad grid bounds in {text!r}")
    count = int(round((top - floor) / step)) + 1
    return [round(top - step * k, 10) for k in range(count)]


def parse_sweep(text: str) -> tuple[str, list]:
    """Parse a sweep spec: 'rps:1..30[:step]', 'capacity:0.02,0.06', 'policy:all'."""
    if ":" not in text:
        raise ValueError(f"sweep must look like kind:values, got {text!r}")
    kind, payload = text.split(":", 1)
    kind = kind.strip()
    if kind == "policy":
        if payload.strip() == "all":
            return kind, list(MODES)
        return kind, [m.strip() for m in payload.split(",") if m.strip()]
    default_step = {"rps": 1.0, "cv": 1.0, "capacity": 0.02}.get(kind)
    if default_step is None:
        raise ValueError(f"unknown sweep kind {kind!r}")
    if ".." in payload:
        bounds, _, step_text = payload.partition("..")[2].partition(":")
        lo = float(payload.split("..")[0])
        hi = float(bounds)
        step = float(step_text) if step_text else default_step
        values = []
        v = lo
        while v <= hi + 1e-9:
            values.append(round(v, 10))
            v += step
        return kind, values
    return kind, [float(x) for x in payload.split(",") if x.strip()]


def _atomic_write_text(path: str, text: str) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=".part")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _load_config_file(path: str) -> dict:
    with open(path, "rb") as fh:
        raw = fh.read()
    if path.endswith(".toml"):
        import tomllib

        return tomllib.loads(raw.decode("utf-8"))
    return json.loads(raw.decode("utf-8"))


def _resolve(args: argparse.Namespace, defaults: dict) -> dict:
    """Merge precedence: explicit flag > config file > default."""
    config = {}
    if getattr(args, "config", None):
        config = _load_config_file(args.config)
        unknown = set(config) - set(defaults)
        if unknown:
            logger.warning("ignoring unknown config keys: %s", sorted(unknown))
    out = {}
    for key, default in defaults.items():
        flag = getattr(args, key, _UNSET)
        if flag is not _UNSET and flag is not None:
            out[key] = flag
        elif key in config:
            out[key] = config[key]
        else:
            out[key] = default
    return out


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON or TOML file supplying flag defaults")
    parser.add_argument("--seed", type=int, default=None, help="RNG seed (default: 0)")
    parser.add_argument("-v", "--verbose", action="count", default=0,
                        help="increase log verbosity")


# ---------------------------------------------------------------------------
# cluster
# ---------------------------------------------------------------------------

_CLUSTER_DEFAULTS = dict(seed=0, theta_c=0.86, min_size=2, dim=768, json_dump=None)


def cmd_cluster(args: argparse.Namespace) -> int:
    opts = _resolve(args, _CLUSTER_DEFAULTS)
    log = load_query_log(args.input)
    for r in log:
        if r.embedding is None:
            r.embedding = synthetic_embed(r.text, opts["dim"], opts["seed"])
        if r.response is None:
            r.response = ""
    if not log:
        print("warning: empty input log; writing an empty repository", file=sys.stderr)
    repo = build_repository(log, theta_c=opts["theta_c"], min_community_size=opts["min_size"])
    if repo.dim == 0:
        repo.dim = opts["dim"]
    save_repository(repo, args.out)
    json_dump = opts["json_dump"] or (args.out + ".json")
    dump_repository_json(repo, json_dump)
    sizes = sorted((c.cluster_size for c in repo.centroids), reverse=True)
    n_comm = sum(1 for s in sizes if s >= 2)
    n_single = sum(1 for s in sizes if s < 2)
    print(f"{n_comm} communities, {n_single} singletons from {len(log)} queries")
    print(f"centroids: {len(repo.centroids)}  theta_c: {repo.theta_c}  dim: {repo.dim}")
    if sizes:
        hist = {}
        for s in sizes:
            bucket = 1 if s < 2 else (2 if s < 10 else (10 if s < 100 else 100))
            hist[bucket] = hist.get(bucket, 0) + 1
        pretty = ", ".join(f">={k}: {hist[k]}" for k in sorted(hist))
        print(f"cluster-size histogram: {pretty}")
    print(f"wrote {args.out} and {json_dump}")
    return 0


# ---------------------------------------------------------------------------
# replace
# ---------------------------------------------------------------------------

_REPLACE_DEFAULTS = dict(seed=0, theta_c=None, batch_size=64, capacity=None,
                         capacity_entries=None, out=None, log=None, no_overflow=False)


def cmd_replace(args: argparse.Namespace) -> int:
    opts = _resolve(args, _REPLACE_DEFAULTS)
    if opts["capacity"] is not None and opts["capacity_entries"] is not None:
        raise ValueError("conflicting flags: --capacity and --capacity-entries; pass one")
    if opts["capacity"] is None and opts["capacity_entries"] is None:
        raise ValueError("one of --capacity or --capacity-entries is required")
    repo = load_repository(args.repo)
    if opts["capacity"] is not None:
        capacity_bytes = parse_size(opts["capacity"])
    else:
        outputs = [c.output for c in repo.centroids] or [""]
        mean_out = int(round(float(np.mean([len(o.encode("utf-8")) for o in outputs]))))
        capacity_bytes = int(opts["capacity_entries"]) * entry_cost_bytes(repo.dim, "x" * mean_out)
    cache = SemanticCacheState(
        capacity_bytes, overflow_enabled=not opts["no_overflow"]
    )
    if args.cache:
        current = load_repository(args.cache)
        if current.dim != repo.dim:
            raise ValueError(
                f"dimension mismatch: cache snapshot {current.dim}, repository {repo.dim}"
            )
        cache.update_centroids(current.centroids)
    sink = None
    log_lines: list[str] = []
    if opts["log"]:
        sink = lambda event: log_lines.append(json.dumps(event, sort_keys=True))
    epoch = run_replacement(cache, repo, theta_c=opts["theta_c"],
                            batch_size=opts["batch_size"], log_sink=sink)
    event = cache.replacement_log[-1]
    print(
        f"epoch {epoch}: merged {event['merged']}, appended {event['appended']}, "
        f"evicted {event['evicted']}"
    )
    print(f"bytes: {event['bytes_before']} -> {event['bytes_after']} (capacity {capacity_bytes})")
    if opts["log"]:
        _atomic_write_text(opts["log"], "\n".join(log_lines) + "\n")
    if opts["out"]:
        from .clustering import CentroidRepository

        live = sorted(cache.centroids.values(), key=lambda c: c.id)
        result = CentroidRepository(
            centroids=live, theta_c=repo.theta_c,
            source_query_count=repo.source_query_count, built_at=repo.built_at, dim=repo.dim,
        )
        save_repository(result, opts["out"])
        print(f"wrote {opts['out']}")
    return 0


# ---------------------------------------------------------------------------
# simulate / sweep
# ---------------------------------------------------------------------------

_SIM_DEFAULTS = dict(
    seed=0, mode="siso", rps=8.0, cv=1.0, duration=600.0,
    capacity_frac=0.06, capacity_entries=None, slo_mult=1.3, theta=0.86,
    dim=256, clusters=200, per_cluster=20, intra_sim=0.9, zipf_s=1.0,
    queries=None, train_frac=0.95, lookup="hnsw", ttft=0.5, tbt=0.05,
    tokens_file=None, servers=1, queue_bound=None, no_overflow=False,
    window=10.0, steady_after=0.0, out=None, trace=None,
)


def _build_sim(opts: dict) -> tuple[WorkloadSpec, SimConfig, object | None, ServingSystem | None]:
    if opts["capacity_entries"] is not None and opts.get("_capacity_frac_set"):
        raise ValueError("conflicting flags: --capacity-frac and --capacity-entries; pass one")
    tokens = [11]
    if opts["tokens_file"]:
        tokens = load_token_histogram(opts["tokens_file"])
    config = SimConfig(
        mode=opts["mode"],
        dim=opts["dim"],
        seed=opts["seed"],
        n_clusters=opts["clusters"],
        per_cluster=opts["per_cluster"],
        intra_sim=opts["intra_sim"],
        corpus_zipf_s=opts["zipf_s"],
        stream_zipf_s=opts["zipf_s"],
        capacity_fraction=opts["capacity_frac"],
        capacity_entries=opts["capacity_entries"],
        overflow_enabled=not opts["no_overflow"],
        theta_fixed=opts["theta"],
        lookup_backend=opts["lookup"],
        slo_multiplier=opts["slo_mult"],
        ttft=opts["ttft"],
        tbt=opts["tbt"],
        output_tokens=tokens,
        servers=opts["servers"],
        queue_bound=opts["queue_bound"],
        window_seconds=opts["window"],
        steady_after=opts["steady_after"],
    )
    workload = WorkloadSpec(
        rps=opts["rps"], cv=opts["cv"], duration=opts["duration"], seed=opts["seed"]
    )
    source = None
    system = None
    if opts["queries"]:
        records = load_query_log(opts["queries"])
        records.sort(key=lambda r: (r.timestamp, r.id))
        for r in records:
            if r.embedding is None:
                r.embedding = synthetic_embed(r.text, config.dim, config.seed)
            if r.response is None:
                r.response = ""
        split = max(1, int(len(records) * opts["train_frac"]))
        train, test = records[:split], records[split:] or records[:split]
        source = ReplayQuerySource(list(test), dim=config.dim, embed_seed=config.seed)
        t2h_source = ReplayQuerySource(list(test), dim=config.dim, embed_seed=config.seed)
        system = ServingSystem(config, train_log=train, t2h_source=t2h_source)
    return workload, config, source, system


def _add_sim_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--mode", choices=MODES, default=None,
                        help="serving mode (default: siso)")
    parser.add_argument("--rps", type=float, default=None, help="mean arrival rate (default: 8)")
    parser.add_argument("--cv", type=float, default=None,
                        help="interarrival coefficient of variation (default: 1.0)")
    parser.add_argument("--duration", type=float, default=None,
                        help="simulated seconds (default: 600)")
    parser.add_argument("--capacity-frac", type=float, default=None, dest="capacity_frac",
                        help="cache capacity as a fraction of corpus vectors (default: 0.06)")
    parser.add_argument("--capacity-entries", type=int, default=None, dest="capacity_entries",
                        help="cache capacity as an absolute entry count")
    parser.add_argument("--slo-mult", type=float, default=None, dest="slo_mult",
                        help="latency objective multiplier (default: 1.3)")
    parser.add_argument("--theta", type=float, default=None,
                        help="fixed retrieval threshold for non-adaptive modes (default: 0.86)")
    parser.add_argument("--dim", type=int, default=None,
                        help="embedding dimension (default: 256)")
    parser.add_argument("--clusters", type=int, default=None,
                        help="planted clusters (default: 200)")
    parser.add_argument("--per-cluster", type=int, default=None, dest="per_cluster",
                        help="mean queries per planted cluster (default: 20)")
    parser.add_argument("--intra-sim", type=float, default=None, dest="intra_sim",
                        help="expected within-cluster cosine (default: 0.9)")
    parser.add_argument("--zipf-s", type=float, default=None, dest="zipf_s",
                        help="cluster popularity skew (default: 1.0)")
    parser.add_argument("--queries", default=None,
                        help="JSONL log to replay instead of a planted corpus")
    parser.add_argument("--train-frac", type=float, default=None, dest="train_frac",
                        help="fraction of the replay log used for clustering (default: 0.95)")
    parser.add_argument("--lookup", choices=("hnsw", "exact"), default=None,
                        help="retrieval backend (default: hnsw)")
    parser.add_argument("--ttft", type=float, default=None,
                        help="backend time to first token, seconds (default: 0.5)")
    parser.add_argument("--tbt", type=float, default=None,
                        help="backend time between tokens, seconds (default: 0.05)")
    parser.add_argument("--tokens-file", default=None, dest="tokens_file",
                        help="token-length histogram file, one integer per line")
    parser.add_argument("--servers", type=int, default=None,
                        help="parallel backend servers (default: 1)")
    parser.add_argument("--queue-bound", type=int, default=None, dest="queue_bound",
                        help="reject arrivals beyond this backend queue depth (default: unbounded)")
    parser.add_argument("--no-overflow", action="store_true", default=None, dest="no_overflow",
                        help="disable the individual-vector overflow region")
    parser.add_argument("--window", type=float, default=None,
                        help="controller window seconds (default: 10)")
    parser.add_argument("--steady-after", type=float, default=None, dest="steady_after",
                        help="measure steady-state metrics from this time (default: 0)")


def cmd_simulate(args: argparse.Namespace) -> int:
    opts = _resolve(args, _SIM_DEFAULTS)
    workload, config, source, system = _build_sim(opts)
    report = run_simulation(workload, config, source=source, system=system)
    print(
        f"mode {report.mode}: hit_ratio {report.hit_ratio:.4f}  "
        f"slo_attainment {report.slo_attainment:.4f}  p99_e2e {report.p99_e2e:.4f}s"
    )
    if opts["out"]:
        _atomic_write_text(opts["out"], report.to_json() + "\n")
        print(f"wrote {opts['out']}")
    if opts["trace"]:
        write_trace_csv(report, opts["trace"])
        print(f"wrote {opts['trace']}")
    return 0


_SWEEP_DEFAULTS = dict(_SIM_DEFAULTS, sweep=None, modes="siso,gptcache-lru")
_SWEEP_DEFAULTS.pop("out")


def cmd_sweep(args: argparse.Namespace) -> int:
    opts = _resolve(args, _SWEEP_DEFAULTS)
    if not opts["sweep"]:
        raise ValueError("--sweep is required (e.g. rps:1..30, capacity:0.02..0.2, policy:all)")
    kind, values = parse_sweep(opts["sweep"])
    modes = [m.strip() for m in str(opts["modes"]).split(",") if m.strip()]
    for m in modes:
        if m not in MODES:
            raise ValueError(f"unknown mode {m!r}; expected one of {MODES}")
    opts = dict(opts, out=None, trace=None)
    workload, config, source, _ = _build_sim(opts)
    if source is not None:
        raise ValueError("sweeps currently run on planted corpora; drop --queries")
    rows = experiment_sweeps(workload, config, kind, values, modes=modes)
    write_rows_csv(rows, args.out)
    print(f"{len(rows)} rows -> {args.out}")
    return 0


# ---------------------------------------------------------------------------
# t2h
# ---------------------------------------------------------------------------

_T2H_DEFAULTS = dict(seed=0, sample_frac=0.05, grid="0.98:0.60:0.02",
                     capacity_entries=None, dim=None, out=None)


def cmd_t2h(args: argparse.Namespace) -> int:
    opts = _resolve(args, _T2H_DEFAULTS)
    repo = load_repository(args.cache)
    records = load_query_log(args.queries)
    dim = opts["dim"] or repo.dim
    for r in records:
        if r.embedding is None:
            r.embedding = synthetic_embed(r.text, dim, opts["seed"])
    entries = opts["capacity_entries"] or max(1, len(repo.centroids))
    outputs = [c.output for c in repo.centroids] or [""]
    mean_out = int(round(float(np.mean([len(o.encode("utf-8")) for o in outputs]))))
    cache = SemanticCacheState(entries * entry_cost_bytes(repo.dim, "x" * mean_out))
    run_replacement(cache, repo)
    grid = parse_grid(opts["grid"])
    lookup = lambda vec, theta: cache.lookup(vec, theta) is not None
    table = build_t2h(
        lookup,
        [r.embedding for r in records],
        sample_fraction=opts["sample_frac"],
        grid=grid,
        seed=opts["seed"],
    )
    lines = ["theta,hit_ratio"]
    for theta, h in table.entries:
        lines.append(f"{theta},{h}")
    text = "\n".join(lines)
    print(text)
    if opts["out"]:
        _atomic_write_text(opts["out"], text + "\n")
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="semcache",
        description="Centroid-based semantic cache: clustering, replacement, "
        "threshold tables, and serving simulation.",
    )
    parser.add_argument("--version", action="version", version=f"semcache {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("cluster", help="cluster a query log into a centroid repository")
    p.add_argument("--input", required=True, help="JSONL query log")
    p.add_argument("--theta-c", type=float, default=None, dest="theta_c",
                   help="clustering threshold (default: 0.86)")
    p.add_argument("--min-size", type=int, default=None, dest="min_size",
                   help="minimum community size (default: 2)")
    p.add_argument("--out", required=True, help="repository snapshot path")
    p.add_argument("--json-dump", default=None, dest="json_dump",
                   help="JSON debug dump path (default: <out>.json)")
    p.add_argument("--dim", type=int, default=None,
                   help="embedding dimension for records without vectors (default: 768)")
    _add_common(p)
    p.set_defaults(func=cmd_cluster)

    p = sub.add_parser("replace", help="run one merge/filter/update replacement round")
    p.add_argument("--repo", required=True, help="new centroid repository snapshot")
    p.add_argument("--cache", default=None, help="snapshot holding the current cache set")
    p.add_argument("--capacity", default=None, help="cache capacity in bytes (e.g. 64MB)")
    p.add_argument("--capacity-entries", type=int, default=None, dest="capacity_entries",
                   help="cache capacity as an entry count")
    p.add_argument("--theta-c", type=float, default=None, dest="theta_c",
                   help="merge threshold (default: from the repository)")
    p.add_argument("--batch-size", type=int, default=None, dest="batch_size",
                   help="centroids swapped per update batch (default: 64)")
    p.add_argument("--out", default=None, help="write the resulting cache set as a snapshot")
    p.add_argument("--log", default=None, help="append replacement events as JSONL")
    p.add_argument("--no-overflow", action="store_true", default=None, dest="no_overflow",
                   help="disable the individual-vector overflow region")
    _add_common(p)
    p.set_defaults(func=cmd_replace)

    p = sub.add_parser("simulate", help="run one serving simulation")
    _add_sim_flags(p)
    p.add_argument("--out", default=None, help="write the report JSON here")
    p.add_argument("--trace", default=None, help="write the controller trace CSV here")
    _add_common(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("sweep", help="run a family of simulations and emit tidy CSV")
    p.add_argument("--sweep", default=None,
                   help="rps:1..30 | cv:2..10 | capacity:0.02..0.20 | policy:all")
    p.add_argument("--modes", default=None,
                   help="comma-separated modes (default: siso,gptcache-lru)")
    _add_sim_flags(p)
    p.add_argument("--out", required=True, help="CSV output path")
    _add_common(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("t2h", help="build and print a threshold-to-hit-ratio table")
    p.add_argument("--cache", required=True, help="centroid repository snapshot to warm from")
    p.add_argument("--queries", required=True, help="JSONL log of recent queries")
    p.add_argument("--sample-frac", type=float, default=None, dest="sample_frac",
                   help="query sample fraction (default: 0.05)")
    p.add_argument("--grid", default=None, help="top:floor:step (default: 0.98:0.60:0.02)")
    p.add_argument("--capacity-entries", type=int, default=None, dest="capacity_entries",
                   help="cache capacity in entries (default: the whole repository)")
    p.add_argument("--dim", type=int, default=None,
                   help="embedding dimension for records without vectors")
    p.add_argument("--out", default=None, help="also write the table as CSV")
    _add_common(p)
    p.set_defaults(func=cmd_t2h)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING
    if args.verbose == 1:
        level = logging.INFO
    elif args.verbose >= 2:
        level = logging.DEBUG
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        logger.exception("command failed")
        print(f"error: {exc}", file=sys.stderr)
        return 1


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
