"""Command-line entry point: ``peav <subcommand> --config cfg.json --out-dir DIR``.

Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .collective import CollectiveLedger, ShardedBatch, bench_gather, gather_naive, gather_packed
from .config import canonical_json, config_hash, load_config, merge
from .errors import ConfigurationError, FormatError, NumericError, ParameterError
from .frame import read_annotations
from .harness import (contrastive_corpus, evaluate_retrieval, evaluate_sed, fit_contrastive, fit_frame,
                      pair_coverage, prepare_contrastive, prepare_frame, psds_params, registry_from,
                      sed_corpus)
from .model import init_heads, load_checkpoint, save_checkpoint
from .numeric import PrngStream, l2_normalize
from .objective import PairRegistry, registry_params
from .retrieval import metrics_csv, metrics_json
from .sed import ScoreTrack
from .training import init_frame_params, sed_report

log = logging.getLogger("peav")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=1, allow_nan=True) + "\n", encoding="utf-8")


def _out_dir(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _header(cfg: dict, command: str) -> dict:
    return {"command": command, "config_hash": config_hash(cfg), "version": __version__}


def _finite(params: dict) -> bool:
    return all(np.all(np.isfinite(v)) for v in params.values())


# ---------------------------------------------------------------- commands

def cmd_gen_data(cfg, args) -> int:
    out = _out_dir(args)
    if cfg["data"]["kind"] == "sed":
        corpus = sed_corpus(cfg)
        corpus.write(out)
        n = len(corpus.timelines)
    else:
        corpus = contrastive_corpus(cfg)
        corpus.write(out)
        n = len(corpus.clips)
    _write_json(out / "report.json", {**_header(cfg, "gen-data"), "kind": cfg["data"]["kind"], "n_clips": n})
    log.info("wrote %d clips to %s", n, out)
    return EXIT_OK


def _save(path: Path, cfg: dict, kind: str, params: dict, step: int, pairs=None) -> None:
    header = {"experiment": cfg, "config_hash": config_hash(cfg), "kind": kind, "step": step}
    if pairs is not None:
        header["pairs"] = pairs
    save_checkpoint(path, header, params)


def cmd_train(cfg, args) -> int:
    out = _out_dir(args)
    if cfg["mode"] == "frame":
        return _train_frame(cfg, args, out)
    setup = prepare_contrastive(cfg, data_dir=args.data_dir)
    registry = registry_from(cfg)
    names = [p.name for p in registry]
    init = {**init_heads(setup.model, cfg["seed"]), **registry_params(registry)}
    last = {"params": init, "step": 0}

    def on_step(step, res, params, reg):
        if _finite(params):
            last["params"], last["step"] = params, step + 1

    try:
        result = fit_contrastive(setup, registry, cfg, on_step=on_step)
    except NumericError as exc:
        _save(out / "checkpoint.bin", cfg, "contrastive", last["params"], last["step"], names)
        log.error("numeric failure: %s; kept checkpoint from step %d", exc, last["step"])
        return EXIT_NUMERIC
    with open(out / "losses.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "total", *names])
        for step, total, per_pair in result.history:
            w.writerow([step, repr(total), *(repr(v) for v in per_pair)])
    params = result.params if result.history else init
    _save(out / "checkpoint.bin", cfg, "contrastive", params, len(result.history), names)
    hist = result.history
    _write_json(out / "report.json", {
        **_header(cfg, "train"), "mode": "contrastive", "pairs": names, "steps": len(hist),
        "initial_loss": hist[0][1] if hist else None, "final_loss": hist[-1][1] if hist else None,
        "alpha": {p.name: p.alpha for p in result.registry},
        "beta": {p.name: p.beta for p in result.registry},
    })
    return EXIT_OK


def _train_frame(cfg, args, out: Path) -> int:
    setup = prepare_frame(cfg, data_dir=args.data_dir)
    init = init_frame_params(setup.model, cfg["seed"])
    last = {"params": init, "step": 0}

    def on_step(step, mode, res, params):
        if _finite(params):
            last["params"], last["step"] = params, step + 1

    try:
        result = fit_frame(setup, cfg, on_step=on_step)
    except NumericError as exc:
        _save(out / "checkpoint.bin", cfg, "frame", last["params"], last["step"])
        log.error("numeric failure: %s; kept checkpoint from step %d", exc, last["step"])
        return EXIT_NUMERIC
    with open(out / "losses.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "mode", "loss"])
        for step, mode, loss in result.history:
            w.writerow([step, mode, repr(loss)])
    _save(out / "checkpoint.bin", cfg, "frame", result.params, len(result.history))
    hist = result.history
    _write_json(out / "report.json", {
        **_header(cfg, "train"), "mode": "frame", "steps": len(hist),
        "local_steps": result.counter.local, "global_steps": result.counter.global_,
        "initial_loss": hist[0][2] if hist else None, "final_loss": hist[-1][2] if hist else None,
    })
    return EXIT_OK


def _load(args, kind: str):
    if not args.checkpoint:
        raise ConfigurationError("--checkpoint is required")
    header, params = load_checkpoint(args.checkpoint)
    if header.get("kind") != kind:
        raise ConfigurationError(f"checkpoint holds a {header.get('kind')} model, expected {kind}")
    return header, params


def _eval_config(cfg: dict, header: dict) -> dict:
    # model, seed and data generation come from training; evaluation settings from the current config
    trained = header["experiment"]
    return merge(trained, {"eval": cfg["eval"]})


def cmd_eval_retrieval(cfg, args) -> int:
    out = _out_dir(args)
    header, params = _load(args, "contrastive")
    ecfg = _eval_config(cfg, header)
    setup = prepare_contrastive(ecfg, data_dir=args.data_dir)
    metrics = evaluate_retrieval(setup, params, ecfg)
    extra = {**_header(cfg, "eval-retrieval"), "checkpoint_config_hash": header["config_hash"]}
    (out / "metrics.csv").write_text(metrics_csv(metrics), encoding="utf-8")
    (out / "metrics.json").write_text(metrics_json(metrics, extra) + "\n", encoding="utf-8")
    return EXIT_OK


def _read_predictions(path) -> list[ScoreTrack]:
    tracks = []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                tracks.append(ScoreTrack(rec["clip"], rec["class"], rec["scores"]))
            except (json.JSONDecodeError, KeyError) as exc:
                raise ConfigurationError(f"{path}:{n}: bad prediction record ({exc})") from None
    return tracks


def cmd_eval_sed(cfg, args) -> int:
    out = _out_dir(args)
    if args.predictions:
        tracks = _read_predictions(args.predictions)
        if args.annotations:
            timelines = read_annotations(args.annotations)
        else:
            corpus = sed_corpus(cfg, args.data_dir)
            timelines = corpus.timelines
        wanted = {t.clip for t in tracks}
        timelines = [t for t in timelines if t.clip_id in wanted]
        report = sed_report(tracks, timelines, psds_params(cfg), cfg["eval"]["median_filter"],
                            cfg["eval"]["segment_s"])
        extra = {}
    else:
        header, params = _load(args, "frame")
        ecfg = _eval_config(cfg, header)
        setup = prepare_frame(ecfg, data_dir=args.data_dir)
        report = evaluate_sed(setup, params, ecfg)
        extra = {"checkpoint_config_hash": header["config_hash"]}
    report = {**report, **_header(cfg, "eval-sed"), **extra,
              "median_filter": cfg["eval"]["median_filter"]}
    _write_json(out / "report.json", report)
    return EXIT_OK


def cmd_ablate_pairs(cfg, args) -> int:
    out = _out_dir(args)
    setup = prepare_contrastive(cfg, data_dir=args.data_dir)
    rows = pair_coverage(setup, cfg["ablation"]["rows"], cfg["ablation"]["seeds"], cfg)
    _write_json(out / "report.json", {**_header(cfg, "ablate-pairs"), "rows": rows})
    with open(out / "metrics.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        tasks = list(rows[0]["r1"])
        w.writerow(["pairs", "seed", *tasks, "cross_modal_avg"])
        for r in rows:
            w.writerow([" ".join(r["pairs"]), r["seed"], *(f"{r['r1'][t]:.6f}" for t in tasks),
                        f"{r['cross_modal_avg']:.6f}"])
    return EXIT_OK


def _measured_gather(W: int, P: int, seed: int, B: int = 16, C_h: int = 8) -> dict:
    """Run both strategies on a small random batch to confirm counts and equivalence."""
    pairs = PairRegistry.finetune().pairs[:P]
    registry = PairRegistry(pairs)
    rng = PrngStream(seed, "bench")
    bundle = {t: l2_normalize(rng.child(t).normal(size=(max(B, W), C_h))) for t in registry.streams()}
    batch = ShardedBatch.split(bundle, W)
    ln, lp = CollectiveLedger(), CollectiveLedger()
    naive = gather_naive(batch, registry, ln)
    packed = gather_packed(batch, registry, lp)
    diff = max(abs(a - b) for a, b in zip(naive.per_pair, packed.per_pair))
    gdiff = max(float(np.max(np.abs(gn[k] - gp[k])))
                for gn, gp in zip(naive.shard_grads, packed.shard_grads) for k in gn)
    return {"naive_calls": ln.gather_calls, "packed_calls": lp.gather_calls,
            "naive_payload_floats": ln.payload_floats, "packed_payload_floats": lp.payload_floats,
            "max_loss_diff": diff, "max_grad_diff": gdiff}


def cmd_bench_gather(cfg, args) -> int:
    out = _out_dir(args)
    b = dict(cfg["bench"])
    for key in ("W", "P", "B", "C_h"):
        v = getattr(args, key)
        if v is not None:
            b[key] = v
    report = bench_gather(b["W"], b["P"], b["B"], b["C_h"], b["latency_per_call"], b["bandwidth"])
    if b["P"] <= len(PairRegistry.finetune()):
        report["measured"] = _measured_gather(b["W"], b["P"], cfg["seed"])
    report = {**report, **_header(cfg, "bench-gather")}
    _write_json(out / "report.json", report)
    print(canonical_json(report["strategies"]))
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval-retrieval": cmd_eval_retrieval,
    "eval-sed": cmd_eval_sed,
    "ablate-pairs": cmd_ablate_pairs,
    "bench-gather": cmd_bench_gather,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="peav", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"peav {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON experiment config")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config entry, e.g. training.steps=100")
        p.add_argument("--out-dir", required=True)
        p.add_argument("-v", "--verbose", action="store_true")
        if name in ("train", "eval-retrieval", "eval-sed", "ablate-pairs"):
            p.add_argument("--data-dir", help="corpus written by gen-data (default: generate from config)")
        if name in ("eval-retrieval", "eval-sed"):
            p.add_argument("--checkpoint")
        if name == "eval-sed":
            p.add_argument("--predictions", help="JSON lines {clip, class, scores}")
            p.add_argument("--annotations", help="ground-truth JSON lines")
        if name == "bench-gather":
            for key in ("W", "P", "B"):
                p.add_argument(f"--{key}", type=int)
            p.add_argument("--C", dest="C_h", type=int)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = load_config(args.config, args.overrides)
        return COMMANDS[args.command](cfg, args)
    except (ConfigurationError, ParameterError) as exc:
        print(f"peav: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, FormatError) as exc:
        print(f"peav: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except NumericError as exc:
        print(f"peav: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
