"""Command-line entry point: reproducible dataset, training, audit runs.

Every invocation owns a run directory and writes exactly one `run.json`
manifest there: the subcommand, the fully resolved config (flags override
config-file keys), all seeds, input hashes, tool version and timestamps.
Passing a previous `run.json` as `--config` reproduces the run.

Exit codes: 0 success, 1 usage/config error, 2 runtime failure,
3 inconclusive audit.
"""

from __future__ import annotations

import argparse
import os
import sys
import time
from pathlib import Path

from . import __version__, runio
from .benchmark import (EnvelopeSpec, REAL_DATA_REFERENCE, build_dataset,
                        default_sweep, make_manifest, preset_spec, image_grid)
from .design import AuditBudget, audit_envelope, parameter_sweep
from .model import CheckpointVariantError
from .training import (TrainConfig, TrainingDivergedError, evaluate,
                       evaluate_checkpoint, load_pairs, train)

__all__ = ["main"]

OUT_ROOT_ENV = "ENVPEEK_OUT_ROOT"

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2
EXIT_INCONCLUSIVE = 3


class UsageError(Exception):
    """Bad flags, bad config documents, or missing inputs."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _out_root() -> Path:
    return Path(os.environ.get(OUT_ROOT_ENV, "envpeek_runs"))


def _parse_size(text: str):
    """'WIDTHxHEIGHT' -> (height, width)."""
    try:
        w, h = (int(v) for v in text.lower().split("x"))
    except ValueError as exc:
        raise UsageError(f"bad size {text!r}, expected WIDTHxHEIGHT like 320x240") from exc
    return (h, w)


def _load_config(path) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise UsageError(f"config file not found: {p}")
    try:
        doc = runio.read_json(p)
    except Exception as exc:
        raise UsageError(f"config file {p} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise UsageError(f"config file {p} must hold a JSON object")
    # A previous run manifest reproduces the run it came from.
    if "config" in doc and "subcommand" in doc:
        return dict(doc["config"])
    return doc


def _fresh_seed() -> int:
    return int.from_bytes(os.urandom(4), "big")


def _resolve_seed(args_seed, cfg: dict) -> int:
    if args_seed is not None:
        return int(args_seed)
    if cfg.get("seed") is not None:
        return int(cfg["seed"])
    return _fresh_seed()


def _write_run_manifest(out_dir, subcommand: str, config: dict, input_hashes: dict) -> None:
    runio.write_json(Path(out_dir) / "run.json", {
        "subcommand": subcommand,
        "config": config,
        "input_hashes": input_hashes,
        "tool_version": __version__,
        "created_at": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
    })


def _envelope_from_cfg(cfg: dict, preset: str | None) -> EnvelopeSpec:
    name = preset or cfg.get("preset")
    if name is not None:
        try:
            spec = preset_spec(name)
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
    elif "envelope" in cfg:
        try:
            spec = EnvelopeSpec.from_dict(cfg["envelope"])
        except (TypeError, ValueError) as exc:
            raise UsageError(f"bad envelope spec: {exc}") from exc
    else:
        raise UsageError("need --preset or an 'envelope' section in the config")
    overrides = {k: cfg[k] for k in ("k_t", "k_A", "kernel_size", "L") if k in cfg}
    if overrides:
        from dataclasses import replace
        spec = replace(spec, **overrides)
    return spec


# ---------------------------------------------------------------------------
# Subcommand handlers
# ---------------------------------------------------------------------------

def _cmd_generate(args) -> int:
    cfg = _load_config(args.config)
    seed = _resolve_seed(args.seed, cfg)
    spec = _envelope_from_cfg(cfg, args.preset)
    pairs = args.pairs or cfg.get("pairs", 500)
    content_size = _parse_size(args.content_size) if args.content_size else tuple(
        cfg.get("content_size", (256, 256)))
    capture_size = _parse_size(args.capture_size) if args.capture_size else tuple(
        cfg.get("capture_size", (240, 320)))
    if spec.identity_pose:
        capture_size = content_size
    setup_id = args.setup_id or cfg.get("setup_id") or (args.preset or "setup")
    out = Path(args.out) if args.out else _out_root() / "datasets" / setup_id

    manifest = make_manifest(setup_id, spec, pairs=int(pairs), content_size=content_size,
                             capture_size=capture_size, seed=seed,
                             jitter=cfg.get("jitter"))
    build_dataset(manifest, out)
    resolved = {"preset": args.preset or cfg.get("preset"), "envelope": spec.to_dict(),
                "pairs": int(pairs), "content_size": list(content_size),
                "capture_size": list(capture_size), "seed": seed, "setup_id": setup_id,
                "jitter": manifest.jitter}
    _write_run_manifest(out, "generate", resolved, {})
    print(f"dataset: {out} ({pairs} pairs, hash {runio.sha256_tree(out)[:12]})")
    return EXIT_OK


def _require_dataset(path_str) -> Path:
    if path_str is None:
        raise UsageError("--dataset is required")
    p = Path(path_str)
    if not (p / "manifest.json").exists():
        raise UsageError(f"dataset not found (no manifest.json): {p}")
    return p


def _cmd_train(args) -> int:
    cfg = _load_config(args.config)
    seed = _resolve_seed(args.seed, cfg)
    dataset_dir = _require_dataset(args.dataset or cfg.get("dataset"))
    variant = args.variant or cfg.get("variant", "full")
    tc_kwargs = {
        "lr": args.lr if args.lr is not None else cfg.get("lr", 1e-3),
        "weight_decay": (args.weight_decay if args.weight_decay is not None
                         else cfg.get("weight_decay", 5e-4)),
        "iterations": (args.iterations if args.iterations is not None
                       else cfg.get("iterations", 4000)),
        "batch_size": (args.batch_size if args.batch_size is not None
                       else cfg.get("batch_size", 16)),
        "seed": seed,
        "variant": variant,
    }
    try:
        config = TrainConfig(**tc_kwargs)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    out = Path(args.out) if args.out else _out_root() / "train" / f"{dataset_dir.name}_{variant}"

    pairs = load_pairs(dataset_dir)
    resolved = {"dataset": str(dataset_dir), **config.to_dict()}
    _write_run_manifest(out, "train", resolved, {"dataset": pairs.dataset_hash})
    model, _ = train(pairs, config, run_dir=out)
    report = evaluate(model, pairs, metadata={"dataset": str(dataset_dir)})
    report.write(out)
    print(f"run: {out}")
    print(f"test SSIM {report.aggregate.ssim:.4f} (input baseline {report.baseline_aggregate.ssim:.4f})")
    return EXIT_OK


def _cmd_eval(args) -> int:
    cfg = _load_config(args.config)
    dataset_dir = _require_dataset(args.dataset or cfg.get("dataset"))
    ckpt = Path(args.checkpoint or cfg.get("checkpoint", ""))
    if not ckpt.exists():
        raise UsageError(f"checkpoint not found: {ckpt}")
    out = Path(args.out) if args.out else _out_root() / "eval" / ckpt.stem
    pairs = load_pairs(dataset_dir)
    try:
        report = evaluate_checkpoint(ckpt, pairs, metadata={"dataset": str(dataset_dir),
                                                            "checkpoint": str(ckpt)})
    except (ValueError, CheckpointVariantError) as exc:
        raise UsageError(str(exc)) from exc
    report.write(out)
    _write_run_manifest(out, "eval", {"dataset": str(dataset_dir), "checkpoint": str(ckpt)},
                        {"dataset": pairs.dataset_hash, "checkpoint": runio.sha256_file(ckpt)})
    print(f"test SSIM {report.aggregate.ssim:.4f} over {len(report.per_image)} images -> {out}")
    return EXIT_OK


def _budget_from(args, cfg: dict) -> AuditBudget:
    kwargs = {}
    for key in ("pairs", "iterations", "batch_size", "threshold", "test_fraction"):
        flag = getattr(args, key, None)
        if flag is not None:
            kwargs[key] = flag
        elif key in cfg:
            kwargs[key] = cfg[key]
    if getattr(args, "content_size", None):
        kwargs["content_size"] = _parse_size(args.content_size)
    elif "content_size" in cfg:
        kwargs["content_size"] = tuple(cfg["content_size"])
    if getattr(args, "capture_size", None):
        kwargs["capture_size"] = _parse_size(args.capture_size)
    elif "capture_size" in cfg:
        kwargs["capture_size"] = tuple(cfg["capture_size"])
    try:
        return AuditBudget(**kwargs)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _cmd_audit(args) -> int:
    cfg = _load_config(args.config)
    seed = _resolve_seed(args.seed, cfg)
    spec = _envelope_from_cfg(cfg, args.preset)
    budget = _budget_from(args, cfg)
    name = args.preset or cfg.get("preset") or "envelope"
    out = Path(args.out) if args.out else _out_root() / "audit" / name
    resolved = {"preset": args.preset or cfg.get("preset"), "envelope": spec.to_dict(),
                "seed": seed, **budget.to_dict()}
    _write_run_manifest(out, "audit", resolved, {})
    verdict = audit_envelope(spec, budget, out, seed=seed)
    ssim_txt = (f"{verdict.attack_metrics.ssim:.4f}" if verdict.attack_metrics else "n/a")
    print(f"verdict: {verdict.verdict} (attack SSIM {ssim_txt}, "
          f"threshold {verdict.threshold}) -> {out}")
    if verdict.verdict == "inconclusive":
        return EXIT_INCONCLUSIVE
    return EXIT_OK


def _cmd_sweep(args) -> int:
    cfg = _load_config(args.config)
    seed = _resolve_seed(args.seed, cfg)
    base = _envelope_from_cfg(cfg, args.preset) if (args.preset or "envelope" in cfg
                                                    or cfg.get("preset")) else preset_spec("easy")
    budget = _budget_from(args, cfg)
    sweep = default_sweep(base, full=args.full or cfg.get("full", False))
    if args.axes:
        wanted = [a.strip() for a in args.axes.split(",") if a.strip()]
        missing = [a for a in wanted if a not in sweep.axes]
        if missing:
            raise UsageError(f"unknown sweep axes: {missing}")
        sweep = type(sweep)(base=sweep.base, axes={a: sweep.axes[a] for a in wanted})
    out = Path(args.out) if args.out else _out_root() / "sweep" / (args.preset or "easy")
    resolved = {"preset": args.preset or cfg.get("preset"), "envelope": base.to_dict(),
                "axes": {k: list(v) for k, v in sweep.axes.items()},
                "forward_only": bool(args.forward_only), "seed": seed, **budget.to_dict()}
    _write_run_manifest(out, "sweep", resolved, {})
    report = parameter_sweep(sweep, budget, out, seed=seed, audit=not args.forward_only)
    failures = [s for s in report["setups"] if "error" in s]
    print(f"sweep: {len(report['setups'])} setups, {len(failures)} failed -> {out}")
    return EXIT_OK


def _cmd_report(args) -> int:
    run_dirs = [Path(r) for r in args.runs]
    rows = []
    for run in run_dirs:
        metrics_path = run / "metrics.json"
        if not metrics_path.exists():
            raise UsageError(f"no metrics.json in run directory {run}")
        doc = runio.read_json(metrics_path)
        rows.append({
            "run": run.name,
            "variant": doc["metadata"].get("variant", "unknown"),
            "model": doc["aggregate"],
            "baseline": doc["baseline_aggregate"],
        })
    out = Path(args.out) if args.out else _out_root() / "report"
    out.mkdir(parents=True, exist_ok=True)

    variants = {}
    baselines = []
    for row in rows:
        variants.setdefault(row["variant"], []).append(row["model"])
        baselines.append(row["baseline"])

    def _mean(dicts):
        return {m: sum(d[m] for d in dicts) / len(dicts) for m in ("psnr", "rmse", "ssim")}

    table = {"input_baseline": _mean(baselines)}
    table.update({v: _mean(ms) for v, ms in variants.items()})
    report = {"runs": rows, "averaged": table, "real_data_reference": REAL_DATA_REFERENCE}
    runio.write_json(out / "report.json", report)
    csv_rows = [[name, r["psnr"], r["rmse"], r["ssim"]] for name, r in table.items()]
    runio.write_csv(out / "report.csv", ["model", "psnr", "rmse", "ssim"], csv_rows)
    lines = ["# Attack comparison", "", "| model | PSNR | RMSE | SSIM |", "|---|---|---|---|"]
    for name, r in table.items():
        lines.append(f"| {name} | {r['psnr']:.4f} | {r['rmse']:.4f} | {r['ssim']:.4f} |")
    ref = REAL_DATA_REFERENCE
    lines += ["", "Published real-capture reference (context only): attack "
              f"{ref['attack_model']['psnr']}/{ref['attack_model']['rmse']}/"
              f"{ref['attack_model']['ssim']}, raw capture "
              f"{ref['cam_captured']['psnr']}/{ref['cam_captured']['rmse']}/"
              f"{ref['cam_captured']['ssim']} (PSNR/RMSE/SSIM)."]
    (out / "report.md").write_text("\n".join(lines) + "\n")
    _write_run_manifest(out, "report", {"runs": [str(r) for r in run_dirs]},
                        {r.name: runio.sha256_file(r / "metrics.json") for r in run_dirs})
    print(f"report -> {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def _build_parser() -> _Parser:
    parser = _Parser(prog="envpeek",
                     description="Simulate, attack, and audit paper envelopes.")
    parser.add_argument("--version", action="version", version=f"envpeek {__version__}")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    def add_common(p):
        p.add_argument("--config", help="JSON config file (or a previous run.json)")
        p.add_argument("--seed", type=int, help="seed for all stochastic components")
        p.add_argument("--out", help=f"output directory (default under ${OUT_ROOT_ENV})")

    p = sub.add_parser("generate", help="build a synthetic paired dataset")
    add_common(p)
    p.add_argument("--preset", help="envelope preset (easy/medium/hard/safe/identity)")
    p.add_argument("--pairs", type=int, help="number of image pairs")
    p.add_argument("--content-size", help="hidden content resolution, WIDTHxHEIGHT")
    p.add_argument("--capture-size", help="capture resolution, WIDTHxHEIGHT")
    p.add_argument("--setup-id", help="dataset identifier")
    p.set_defaults(func=_cmd_generate)

    p = sub.add_parser("train", help="train an attack model on a dataset")
    add_common(p)
    p.add_argument("--dataset", help="dataset directory")
    p.add_argument("--variant", help="model variant",
                   choices=["full", "black_box", "no_warp", "no_refine",
                            "no_A_constraint", "no_J_constraint"])
    p.add_argument("--iterations", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--weight-decay", type=float)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    add_common(p)
    p.add_argument("--checkpoint", help="checkpoint file")
    p.add_argument("--dataset", help="dataset directory")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("audit", help="attack an envelope and classify safe/unsafe")
    add_common(p)
    p.add_argument("--preset", help="envelope preset to audit")
    p.add_argument("--pairs", type=int, help="audit dataset size")
    p.add_argument("--iterations", type=int, help="audit training iterations")
    p.add_argument("--batch-size", type=int)
    p.add_argument("--threshold", type=float, help="unsafe SSIM threshold")
    p.add_argument("--content-size", help="WIDTHxHEIGHT")
    p.add_argument("--capture-size", help="WIDTHxHEIGHT")
    p.set_defaults(func=_cmd_audit)

    p = sub.add_parser("sweep", help="sweep optical parameters, auditing each setup")
    add_common(p)
    p.add_argument("--preset", help="base envelope preset")
    p.add_argument("--axes", help="comma list from kernel_size,k_t,k_A,L,h_jitter,gaussian_sigma")
    p.add_argument("--full", action="store_true", help="sweep all six axes")
    p.add_argument("--forward-only", action="store_true",
                   help="skip training; only render strips and baseline curves")
    p.add_argument("--pairs", type=int)
    p.add_argument("--iterations", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--threshold", type=float)
    p.add_argument("--content-size", help="WIDTHxHEIGHT")
    p.add_argument("--capture-size", help="WIDTHxHEIGHT")
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("report", help="combine run metrics into a comparison table")
    add_common(p)
    p.add_argument("--runs", nargs="+", required=True, help="run directories with metrics.json")
    p.set_defaults(func=_cmd_report)

    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDivergedError as exc:
        print(f"training diverged: {exc} (last checkpoint: {exc.checkpoint_path})",
              file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
