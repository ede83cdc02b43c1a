"""``adasum`` command-line driver.

Subcommands write CSV into ``--out-dir`` together with a ``manifest.json``
describing the run. Exit codes: 0 success, 2 usage, 3 numeric failure,
4 protocol or transport failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .collective import TCPTransport, fuse, run_ranks, sum_allreduce
from .collective.ops import PHASE_ALLREDUCE, adasum_rvh, sum_rvh
from .collective.transport import RankContext
from .combiner import (MIN_COS_ANGLE, expected_combined, lemma_checks, ordered_pair_average,
                       random_distribution)
from .errors import (ConfigError, DegenerateDistributionError, NumericError, ProtocolError,
                     TransportError)
from .oracle import CSV_COLUMNS as ERROR_COLUMNS
from .oracle import SeqErrorConfig, relative_error_experiment
from .training.data import Dataset, make_dataset, train_test_split
from .training.distributed import METRIC_COLUMNS, TrainConfig, train, train_worker
from .training.models import make_model

log = logging.getLogger("adasum")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_PROTOCOL = 0, 2, 3, 4
BENCH_COLUMNS = ("bytes", "op", "median_s", "p95_s")
LEMMA_COLUMNS = ("trial", "dim", "n_atoms", "cos_angle", "norm_ratio", "eig_min", "eig_max",
                 "pair_average_err", "violation")
LEMMA_TOL = 1e-9


class UsageError(Exception):
    pass


# --- argument handling --------------------------------------------------------


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value file; command-line flags take precedence")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", default="runs")
    p.add_argument("-v", "--verbose", action="store_true")


def _training(p: argparse.ArgumentParser) -> None:
    p.add_argument("--ranks", type=int, default=1)
    p.add_argument("--transport", choices=("inproc", "tcp"), default="inproc")
    p.add_argument("--rank", type=int, help="run only this rank (multi-process TCP)")
    p.add_argument("--world-size", type=int)
    p.add_argument("--base-port", type=int)
    p.add_argument("--reduction", choices=("sum", "adasum"), default="adasum")
    p.add_argument("--local-steps", type=int, default=1)
    p.add_argument("--node-size", type=int, default=1)
    p.add_argument("--precision", choices=("f64", "f16"), default="f64")
    p.add_argument("--loss-scale-init", type=float, default=2.0 ** 15)
    p.add_argument("--loss-scale-growth-interval", type=int, default=2000)
    p.add_argument("--model", choices=("logistic", "mlp"), default="mlp")
    p.add_argument("--hidden", type=int, default=32)
    p.add_argument("--dataset", default="two_spirals",
                   help="gauss_blobs, two_spirals or digits_csv:PATH")
    p.add_argument("--n-samples", type=int, default=20000)
    p.add_argument("--n-features", type=int, default=2, help="gauss_blobs only")
    p.add_argument("--epochs", type=float, default=2.0)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--max-lr", type=float, default=0.4)
    p.add_argument("--warmup-frac", type=float, default=0.17)
    p.add_argument("--optimizer", choices=("sgd", "momentum", "adam", "lamb"), default="momentum")
    p.add_argument("--debug", action="store_true", help="check parameter consistency every step")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="adasum", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a desk model and write metrics.csv")
    _common(p)
    _training(p)

    p = sub.add_parser("orthogonality", help="log per-layer orthogonality to orth.csv")
    _common(p)
    _training(p)
    p.set_defaults(ranks=16)

    p = sub.add_parser("bench", help="time adasum_rvh against sum_rvh, write bench.csv")
    _common(p)
    p.add_argument("--ranks", type=int, default=8)
    p.add_argument("--transport", choices=("inproc", "tcp"), default="inproc")
    p.add_argument("--min-log2-bytes", type=int, default=10)
    p.add_argument("--max-log2-bytes", type=int, default=26)
    p.add_argument("--tensors", type=int, default=64)
    p.add_argument("--trials", type=int, default=20)

    p = sub.add_parser("lemma-check", help="sweep random distributions, write lemmas.csv")
    _common(p)
    p.add_argument("--trials", type=int, default=1000)
    p.add_argument("--dims", default="2,3,5,8", help="comma-separated dimensions")
    p.add_argument("--atoms", default="2,3,6,12", help="comma-separated atom counts")

    p = sub.add_parser("seq-error", help="compare updates with exact-Hessian emulation, write error.csv")
    _common(p)
    p.add_argument("--ranks", type=int, default=16)
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--max-lr", type=float, default=1.0, help="constant step size of the emulation")
    p.add_argument("--n-features", type=int, default=16)
    p.add_argument("--n-samples", type=int, default=20000)
    p.add_argument("--trajectory", choices=("adasum", "sum", "oracle"), default="adasum")
    parser.set_defaults(_subparsers=sub.choices)
    return parser


def read_config_file(path) -> dict[str, str]:
    """Parse ``key=value`` lines; ``#`` starts a comment. Keys may use dashes."""
    out = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read config file: {exc}") from exc
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def _truthy(value: str) -> bool:
    v = value.lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise UsageError(f"not a boolean: {value!r}")


def parse_args(argv=None) -> argparse.Namespace:
    """Parse flags, filling anything not given on the command line from ``--config``."""
    parser = build_parser()
    args = parser.parse_args(argv)
    if not args.config:
        return args
    values = read_config_file(args.config)
    sub = args._subparsers[args.command]
    actions = {a.dest: a for a in sub._actions}
    defaults = {}
    for key, value in values.items():
        action = actions.get(key)
        if action is None or key in ("config", "help"):
            raise UsageError(f"unknown config key {key!r} for {args.command}")
        if isinstance(action, argparse._StoreTrueAction):
            defaults[key] = _truthy(value)
        else:
            if action.choices is not None and value not in action.choices:
                raise UsageError(f"{key}: {value!r} not in {sorted(action.choices)}")
            try:
                defaults[key] = action.type(value) if action.type else value
            except ValueError as exc:
                raise UsageError(f"{key}: {exc}") from exc
    sub.set_defaults(**defaults)
    return parser.parse_args(argv)


# --- artifacts ----------------------------------------------------------------


def content_hash(payload: bytes) -> str:
    """Git blob hash of ``payload``."""
    return hashlib.sha1(b"blob %d\0" % len(payload) + payload).hexdigest()


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


class CsvSink:
    """Append rows to a CSV file, flushing after each so partial runs survive."""

    def __init__(self, path: Path, columns):
        self.path = path
        self.columns = tuple(columns)
        self._fh = open(path, "w", newline="")
        self._w = csv.writer(self._fh, lineterminator="\n")
        self._w.writerow(self.columns)
        self._fh.flush()

    def __call__(self, row: dict) -> None:
        self._w.writerow([_fmt(row[c]) for c in self.columns])
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()


def write_manifest(out_dir: Path, args: argparse.Namespace, argv, started: str, outputs,
                   extra: dict | None = None) -> Path:
    config = {k: v for k, v in sorted(vars(args).items())
              if k not in ("out_dir", "verbose") and not k.startswith("_")}
    inputs = json.dumps(config, sort_keys=True).encode()
    dataset = config.get("dataset", "")
    if isinstance(dataset, str) and dataset.startswith("digits_csv:"):
        inputs += Path(dataset.split(":", 1)[1]).read_bytes()
    manifest = {
        "command": ["adasum", *argv],
        "config": config,
        "seed": args.seed,
        "content_hash": content_hash(inputs),
        "started": started,
        "finished": _now(),
        "outputs": {str(p.name): content_hash(p.read_bytes()) for p in outputs if p.exists()},
    }
    manifest.update(extra or {})
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, default=str) + "\n")
    return path


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


# --- commands -----------------------------------------------------------------


def _dataset(args) -> tuple[Dataset, Dataset]:
    kw = {}
    if args.dataset in ("gauss_blobs", "two_spirals"):
        kw["n_samples"] = args.n_samples
    if args.dataset == "gauss_blobs":
        kw["n_features"] = args.n_features
    try:
        data = make_dataset(args.dataset, args.seed, **kw)
    except (FileNotFoundError, ValueError) as exc:
        raise UsageError(str(exc)) from exc
    return train_test_split(data, 0.2, args.seed)


def _train_config(args, **overrides) -> TrainConfig:
    cfg = TrainConfig(
        ranks=args.ranks, batch_size=args.batch_size, local_steps=args.local_steps,
        reduction=args.reduction, precision=args.precision, seed=args.seed, epochs=args.epochs,
        model=args.model, hidden=args.hidden, optimizer=args.optimizer, max_lr=args.max_lr,
        warmup_frac=args.warmup_frac, node_size=args.node_size, transport=args.transport,
        loss_scale_init=args.loss_scale_init,
        loss_scale_growth_interval=args.loss_scale_growth_interval, debug=args.debug,
        **overrides,
    )
    if args.world_size is not None:
        cfg.ranks = args.world_size
    cfg.validate()
    return cfg


def _run_training(args, cfg: TrainConfig, on_row):
    train_set, test_set = _dataset(args)
    if cfg.model == "logistic" and train_set.n_classes != 2:
        raise UsageError("logistic model needs a two-class dataset")
    if args.rank is None:
        return train(cfg, train_set, test_set, on_row=on_row, seed=args.seed)
    # One process per rank over TCP; every process needs the same base port.
    if args.world_size is None or args.base_port is None:
        raise UsageError("--rank needs --world-size and --base-port")
    if not 0 <= args.rank < args.world_size:
        raise UsageError("--rank out of range")
    model = make_model(cfg.model, train_set.X.shape[1], train_set.n_classes, cfg.hidden)
    ep = TCPTransport(args.rank, args.world_size, args.base_port)
    try:
        return train_worker(RankContext(args.rank, args.world_size, ep), cfg, model,
                            train_set, test_set, on_row if args.rank == 0 else None)
    finally:
        ep.close()


def cmd_train(args, argv) -> int:
    started = _now()
    cfg = _train_config(args)
    out = _out_dir(args)
    writes = args.rank in (None, 0)
    sink = CsvSink(out / "metrics.csv", METRIC_COLUMNS) if writes else None
    try:
        result = _run_training(args, cfg, sink)
    finally:
        if sink is not None:
            sink.close()
    if writes:
        write_manifest(out, args, argv, started, [out / "metrics.csv"], {
            "allreduce_calls": result.allreduce_calls,
            "accepted_steps": result.accepted_steps,
            "rejected_steps": result.rejected_steps,
        })
        print(f"final loss {result.final_loss:.6g} accuracy {result.final_accuracy:.4f} "
              f"allreduce calls {result.allreduce_calls}")
    return EXIT_OK


def cmd_orthogonality(args, argv) -> int:
    started = _now()
    cfg = _train_config(args, track_orthogonality=True)
    out = _out_dir(args)
    train_set, _ = _dataset(args)
    n_layers = make_model(cfg.model, train_set.X.shape[1], train_set.n_classes, cfg.hidden).layout.n_layers
    columns = ("step", "orthogonality_mean", *(f"layer_{i}" for i in range(n_layers)))
    args.rank = None
    result = _run_training(args, cfg, None)
    sink = CsvSink(out / "orth.csv", columns)
    for step, per_layer in enumerate(result.orthogonality, 1):
        sink({"step": step, "orthogonality_mean": float(np.nanmean(per_layer)),
              **{f"layer_{i}": float(v) for i, v in enumerate(per_layer)}})
    sink.close()
    write_manifest(out, args, argv, started, [out / "orth.csv"],
                   {"allreduce_calls": result.allreduce_calls})
    means = [float(np.nanmean(o)) for o in result.orthogonality]
    q = max(1, len(means) // 4)
    print(f"orthogonality first quartile {np.mean(means[:q]):.4f} last quartile {np.mean(means[-q:]):.4f}")
    return EXIT_OK


def bench_collectives(ranks: int, log2_sizes, n_tensors: int = 64, trials: int = 20,
                      transport: str = "inproc", seed: int = 0) -> list[dict]:
    """Median and p95 latency of both collectives on fused payloads of 2**k bytes.

    Only the collective call is timed. Ranks line up on a small allreduce
    before each call, and the order of the two ops alternates per trial.
    """
    def worker(ctx):
        warm = np.ones(2 * ctx.size)
        adasum_rvh(ctx, warm)
        sum_rvh(ctx, warm)
        rows = []
        for k in log2_sizes:
            n = max(n_tensors, (1 << k) // 8)
            rng = np.random.default_rng([seed, ctx.rank, k])
            parts = np.array_split(rng.standard_normal(n), n_tensors)
            [buf] = fuse(list(enumerate(parts)), threshold=n * 8)
            times = {"adasum_rvh": [], "sum_rvh": []}
            for t in range(trials):
                order = ("adasum_rvh", "sum_rvh") if t % 2 == 0 else ("sum_rvh", "adasum_rvh")
                for op in order:
                    sum_allreduce(ctx, np.zeros(1), phase=PHASE_ALLREDUCE, depth=t % 8)
                    t0 = time.perf_counter()
                    if op == "adasum_rvh":
                        adasum_rvh(ctx, buf.data, buf.layout)
                    else:
                        sum_rvh(ctx, buf.data)
                    times[op].append(time.perf_counter() - t0)
            for op in ("adasum_rvh", "sum_rvh"):
                rows.append({"bytes": n * 8, "op": op, "median_s": float(np.median(times[op])),
                             "p95_s": float(np.percentile(times[op], 95))})
        return rows

    return run_ranks(ranks, worker, transport=transport, seed=seed)[0]


def cmd_bench(args, argv) -> int:
    started = _now()
    if args.min_log2_bytes > args.max_log2_bytes or args.trials < 1 or args.tensors < 1:
        raise UsageError("empty benchmark sweep")
    out = _out_dir(args)
    rows = bench_collectives(args.ranks, range(args.min_log2_bytes, args.max_log2_bytes + 1),
                             args.tensors, args.trials, args.transport, args.seed)
    sink = CsvSink(out / "bench.csv", BENCH_COLUMNS)
    for row in rows:
        sink(row)
    sink.close()
    write_manifest(out, args, argv, started, [out / "bench.csv"])
    return EXIT_OK


def lemma_sweep(trials: int, dims, atoms, seed: int) -> list[dict]:
    rng = np.random.default_rng(seed)
    rows = []
    for trial in range(trials):
        dim = int(dims[trial % len(dims)])
        n_atoms = int(atoms[(trial // len(dims)) % len(atoms)])
        X = random_distribution(rng, dim, n_atoms)
        try:
            rep = lemma_checks(X)
        except DegenerateDistributionError:
            continue
        err = float(np.max(np.abs(expected_combined(X) - ordered_pair_average(X))))
        violation = (rep.cos_angle < MIN_COS_ANGLE - LEMMA_TOL
                     or not 1 - LEMMA_TOL <= rep.norm_ratio <= 2 + LEMMA_TOL
                     or rep.eig_min < 1 - LEMMA_TOL or rep.eig_max > 2 + LEMMA_TOL
                     or err > 1e-10)
        rows.append({"trial": trial, "dim": dim, "n_atoms": n_atoms, "cos_angle": rep.cos_angle,
                     "norm_ratio": rep.norm_ratio, "eig_min": rep.eig_min, "eig_max": rep.eig_max,
                     "pair_average_err": err, "violation": int(violation)})
    return rows


def _int_list(s: str) -> list[int]:
    try:
        out = [int(v) for v in s.split(",") if v.strip()]
    except ValueError as exc:
        raise UsageError(f"bad integer list {s!r}") from exc
    if not out or min(out) < 1:
        raise UsageError(f"bad integer list {s!r}")
    return out


def cmd_lemma_check(args, argv) -> int:
    started = _now()
    dims, atoms = _int_list(args.dims), _int_list(args.atoms)
    out = _out_dir(args)
    rows = lemma_sweep(args.trials, dims, atoms, args.seed)
    sink = CsvSink(out / "lemmas.csv", LEMMA_COLUMNS)
    for row in rows:
        sink(row)
    sink.close()
    bad = sum(r["violation"] for r in rows)
    write_manifest(out, args, argv, started, [out / "lemmas.csv"], {"violations": bad})
    print(f"{len(rows)} distributions, {bad} violations")
    return EXIT_NUMERIC if bad else EXIT_OK


def cmd_seq_error(args, argv) -> int:
    started = _now()
    cfg = SeqErrorConfig(ranks=args.ranks, steps=args.steps, batch_size=args.batch_size,
                         lr=args.max_lr, seed=args.seed, n_features=args.n_features,
                         n_samples=args.n_samples, advance=args.trajectory)
    out = _out_dir(args)
    sink = CsvSink(out / "error.csv", ERROR_COLUMNS)
    rows = relative_error_experiment(cfg)
    for row in rows:
        sink(row)
    sink.close()
    write_manifest(out, args, argv, started, [out / "error.csv"])
    print(f"median relative error adasum {np.nanmedian([r['rel_err_adasum'] for r in rows]):.4f} "
          f"sum {np.nanmedian([r['rel_err_sum'] for r in rows]):.4f}")
    return EXIT_OK


def _out_dir(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


COMMANDS = {
    "train": cmd_train,
    "orthogonality": cmd_orthogonality,
    "bench": cmd_bench,
    "lemma-check": cmd_lemma_check,
    "seq-error": cmd_seq_error,
}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parse_args(argv)
    except UsageError as exc:
        print(f"adasum: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args, argv)
    except (UsageError, ConfigError) as exc:
        print(f"adasum: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericError, FloatingPointError) as exc:
        print(f"adasum: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ProtocolError, TransportError) as exc:
        print(f"adasum: communication failure: {exc}", file=sys.stderr)
        return EXIT_PROTOCOL


if __name__ == "__main__":
    sys.exit(main())
