"""Command line: ``dfgr <command> [--config FILE] [--section.key=value ...]``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time

import numpy as np

from . import checkpoint
from . import config as cfgmod
from .datagen import (
    Dataset,
    IngestError,
    UnavailableError,
    bayes_auc,
    generate,
    ingest,
    split_cutoff,
    time_split,
    write_dataset,
)
from .flops import CostModel, grid_csv, measure_runtime, paradigm_flops, LAYER_FORMULA
from .heads import probabilities, score as head_score
from .hstu import forward_candidates
from .oracle import sweep
from .sequence import Candidate, build_inference
from .trainer import TrainingDiverged, config_dict, train

log = logging.getLogger("dfgr")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class NumericalFailure(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _write_json(path: str, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=float)
        fh.write("\n")


def _load_config(args, extra: list[str]) -> cfgmod.RunConfig:
    bad = [e for e in extra if not (e.startswith("--") and "." in e.split("=", 1)[0] and "=" in e)]
    if bad:
        raise UsageError(f"unrecognized arguments: {' '.join(bad)}")
    try:
        return cfgmod.load(args.config, extra)
    except OSError as exc:
        raise UsageError(f"cannot read config: {exc}") from None
    except cfgmod.ConfigError as exc:
        raise UsageError(str(exc)) from None


def _build(run: cfgmod.RunConfig, section: str):
    try:
        return run.build(section)
    except cfgmod.ConfigError as exc:
        raise UsageError(str(exc)) from None


def _dataset(run: cfgmod.RunConfig, path: str | None, sidecar: str | None) -> Dataset:
    data_cfg = _build(run, "data")
    path = path or data_cfg.path
    sidecar = sidecar or data_cfg.sidecar or None
    if not path:
        return generate(_build(run, "gen"))
    try:
        return ingest(path, sidecar=sidecar)
    except (OSError, IngestError) as exc:
        raise DataError(str(exc)) from None


# ---------------------------------------------------------------- commands


def cmd_gen_data(args, run) -> int:
    spec = _build(run, "gen")
    data = generate(spec)
    sidecar = args.sidecar or f"{args.out}.probs"
    try:
        write_dataset(data, args.out, sidecar)
    except OSError as exc:
        raise DataError(f"cannot write dataset: {exc}") from None
    summary = {
        "config": run.resolved()["gen"],
        "users": len(data.sequences),
        "interactions": data.num_interactions,
        "positive_rate": float(data.labels().mean()),
        "bayes_auc": bayes_auc(data),
        "out": args.out,
        "sidecar": sidecar,
    }
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def cmd_train(args, run) -> int:
    tcfg = _build(run, "train")
    data_cfg = _build(run, "data")
    data = _dataset(run, args.data, args.sidecar)
    if not data.sequences:
        raise DataError("dataset is empty")
    cutoff = split_cutoff(data, data_cfg.train_fraction)
    split = time_split(data, cutoff)
    os.makedirs(args.out_dir, exist_ok=True)
    try:
        enc, report, _ = train(tcfg, data, split.valid_masks)
    except TrainingDiverged as exc:
        raise NumericalFailure(str(exc)) from None
    checkpoint.save(enc, os.path.join(args.out_dir, "checkpoint.bin"))
    with open(os.path.join(args.out_dir, "metrics.csv"), "w", encoding="utf-8") as fh:
        fh.write(report.csv())
    summary = {
        "config": run.resolved(),
        "train_config": config_dict(tcfg),
        "cutoff": cutoff,
        "auc": report.auc,
        "gauc": report.gauc,
        "eval_loss": report.eval_loss,
        "final_train_loss": report.loss_curve[-1] if report.loss_curve else None,
        "parameters": enc.num_parameters(),
        "train_flops": report.train_flops,
        "eval_timestamp": report.eval_timestamp,
    }
    try:
        summary["bayes_auc_valid"] = bayes_auc(data, split.valid_masks)
    except (UnavailableError, ValueError):
        summary["bayes_auc_valid"] = None
    _write_json(os.path.join(args.out_dir, "summary.json"), summary)
    print(json.dumps({k: summary[k] for k in ("auc", "gauc", "eval_loss")}, sort_keys=True))
    return EXIT_OK


def cmd_check_oracle(args, run) -> int:
    oc = _build(run, "oracle")
    t0 = time.perf_counter()
    result = sweep(
        configs=oc.configs,
        seed=oc.seed,
        max_n=oc.max_n,
        dims=oc.dims,
        heads=oc.heads,
        layers=oc.layers,
        residual=oc.residual,
        tolerance=oc.tolerance,
        fault=oc.fault or None,
    )
    report = result.to_dict()
    report["seconds"] = time.perf_counter() - t0
    report["config"] = run.resolved()["oracle"]
    if args.out:
        _write_json(args.out, report)
    print(json.dumps(report, sort_keys=True))
    if not result.passed:
        first = result.failures[0]
        print(
            f"oracle mismatch: config {first['config']} position {first['position']} "
            f"abs diff {first['abs_diff']:.3e}",
            file=sys.stderr,
        )
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_bench_flops(args, run) -> int:
    bc = _build(run, "bench")
    try:
        grid = [int(x) for x in bc.grid.split(",") if x.strip()]
        models = [CostModel(B=bc.B, N=N, K=bc.K, D=bc.D, H=bc.H, L=bc.L, m=bc.m) for N in grid]
    except ValueError as exc:
        raise UsageError(f"bench: {exc}") from None
    runtimes = None
    if args.with_runtime:
        runtimes = {}
        for model in models:
            if model.N > bc.max_runtime_n:
                continue
            for p in ("METAGR", "SFGR", "DFGR"):
                runtimes[(model, p)] = measure_runtime(model, p, bc.trials).median
    text = grid_csv(models, runtimes)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
        _write_json(
            f"{os.path.splitext(args.out)[0]}.json",
            {
                "config": run.resolved()["bench"],
                "layer_formula": LAYER_FORMULA,
                "reports": [paradigm_flops(m).to_dict() for m in models],
            },
        )
    else:
        sys.stdout.write(text)
    return EXIT_OK


def read_candidates(path: str) -> list[Candidate]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.rstrip("\n").split("\t")
            try:
                item = int(parts[0])
                slots = {}
                for extra in parts[1:]:
                    name, eq, value = extra.partition("=")
                    if not eq:
                        raise ValueError(extra)
                    slots[name] = int(value)
            except ValueError:
                raise DataError(f"{path} line {lineno}: malformed candidate") from None
            out.append(Candidate(item, slots))
    return out


def score_candidates(enc, seq, candidates, m: int, request_ts=None) -> np.ndarray:
    """Probabilities for ``candidates`` in input order, ``m`` per forward pass."""
    from .autograd import no_grad

    scores = []
    with no_grad():
        for batch in build_inference(seq, candidates, enc.tables, m, request_ts):
            Y = forward_candidates(batch, enc)
            # keep one candidate per stacked matmul so no row shares a BLAS tile
            z = head_score(Y.reshape(Y.shape[0], 1, Y.shape[1]), enc.head)
            scores.append(probabilities(z.data).reshape(-1))
    return np.concatenate(scores) if scores else np.array([])


def cmd_score(args, run) -> int:
    try:
        enc = checkpoint.load(args.checkpoint)
    except (OSError, checkpoint.CheckpointError) as exc:
        raise DataError(f"cannot load checkpoint: {exc}") from None
    try:
        hist = ingest(args.history)
    except (OSError, IngestError) as exc:
        raise DataError(str(exc)) from None
    if len(hist.sequences) > 1:
        raise DataError("history file must contain exactly one user")
    from .sequence import UserSequence

    seq = hist.sequences[0] if hist.sequences else UserSequence(0, [])
    try:
        cands = read_candidates(args.candidates)
    except OSError as exc:
        raise DataError(str(exc)) from None
    if args.m < 1:
        raise UsageError("--m must be >= 1")
    probs = score_candidates(enc, seq, cands, args.m, args.request_ts)
    lines = [f"{c.item_id}\t{p!r}" for c, p in zip(cands, probs.tolist())]
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write("".join(line + "\n" for line in lines))
    return EXIT_OK


# ---------------------------------------------------------------- entry


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dfgr", description=__doc__.splitlines()[0], allow_abbrev=False)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)


    g = sub.add_parser("gen-data", allow_abbrev=False, help="generate a synthetic log and its probability sidecar")
    g.add_argument("--out", required=True)
    g.add_argument("--sidecar")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", allow_abbrev=False, help="train a model; writes checkpoint, metrics CSV, summary JSON")
    t.add_argument("--data")
    t.add_argument("--sidecar")
    t.add_argument("--out-dir", required=True)
    t.set_defaults(func=cmd_train)

    o = sub.add_parser("check-oracle", allow_abbrev=False, help="dual-flow vs per-target oracle sweep")
    o.add_argument("--out")
    o.set_defaults(func=cmd_check_oracle)

    b = sub.add_parser("bench-flops", allow_abbrev=False, help="analytic FLOP grid as CSV")
    b.add_argument("--out")
    b.add_argument("--with-runtime", action="store_true")
    b.set_defaults(func=cmd_bench_flops)

    s = sub.add_parser("score", allow_abbrev=False, help="score candidates for one user history")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--history", required=True)
    s.add_argument("--candidates", required=True)
    s.add_argument("--m", type=int, default=64)
    s.add_argument("--request-ts", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_score)

    for sp in (g, t, o, b, s):
        sp.add_argument("--config")
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args, extra = parser.parse_known_args(argv)
        if not getattr(args, "command", None):
            raise UsageError("a command is required: gen-data, train, check-oracle, bench-flops, score")
        logging.basicConfig(
            level=logging.INFO if args.verbose else logging.WARNING,
            format="%(asctime)s %(name)s %(message)s",
        )
        run = _load_config(args, extra)
        return args.func(args, run)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalFailure as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
