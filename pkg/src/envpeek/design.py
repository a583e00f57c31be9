"""Counter-attack workflow: audit envelopes and search for safe designs.

An audit attacks a candidate envelope end to end: generate a paired
dataset under that envelope, train the full attack model at a desk-scale
budget, and score the recovered content on the held-out split. The
envelope is unsafe when the attack's mean SSIM reaches the threshold.
The default threshold (0.35) sits between a raw capture's similarity and
a successful attack's, and the raw SSIM is always reported so verdicts
can be recomputed for any other threshold without retraining.

Safe designs are searched by greedy coordinate steps along the three
optical levers that defeat the attack, in order: raise the surface
reflection k_A, lower the transmittance k_t, grow the blur kernel.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import runio
from .benchmark import (EnvelopeSpec, SweepSpec, apply_axis, build_dataset,
                        image_grid, make_manifest, pair_pose)
from .content import ContentSpec, generate_content
from .imaging import envelope_to_config, simulate_capture
from .metrics import MetricsTriple, ssim
from .training import (PairSet, TrainConfig, TrainingDivergedError, evaluate,
                       load_pairs, train)

__all__ = [
    "AuditBudget",
    "SafetyVerdict",
    "RecommendResult",
    "audit_envelope",
    "parameter_sweep",
    "recommend_design",
    "DEFAULT_SAFETY_THRESHOLD",
]

# Attack SSIM at or above this marks the envelope unsafe.
DEFAULT_SAFETY_THRESHOLD = 0.35

# Smoke-test floor: audits below this size say nothing about safety.
MIN_AUDIT_ITERATIONS = 200
MIN_AUDIT_PAIRS = 100


@dataclass(frozen=True)
class AuditBudget:
    """Desk-scale attack budget: dataset size, resolution and train length."""

    pairs: int = 100
    iterations: int = 1000
    batch_size: int = 8
    content_size: tuple = (64, 64)
    capture_size: tuple = (60, 80)
    threshold: float = DEFAULT_SAFETY_THRESHOLD
    test_fraction: float = 0.1
    lr: float = 1e-3
    weight_decay: float = 5e-4

    def __post_init__(self):
        if self.iterations < MIN_AUDIT_ITERATIONS:
            raise ValueError(f"audit budget needs >= {MIN_AUDIT_ITERATIONS} iterations")
        if self.pairs < MIN_AUDIT_PAIRS:
            raise ValueError(f"audit budget needs >= {MIN_AUDIT_PAIRS} pairs")

    def to_dict(self) -> dict:
        return {"pairs": self.pairs, "iterations": self.iterations,
                "batch_size": self.batch_size, "content_size": list(self.content_size),
                "capture_size": list(self.capture_size), "threshold": self.threshold,
                "test_fraction": self.test_fraction, "lr": self.lr,
                "weight_decay": self.weight_decay}

    @classmethod
    def from_dict(cls, d: dict) -> "AuditBudget":
        d = dict(d)
        d["content_size"] = tuple(d["content_size"])
        d["capture_size"] = tuple(d["capture_size"])
        return cls(**d)

    def train_config(self, seed: int, variant: str = "full") -> TrainConfig:
        return TrainConfig(lr=self.lr, weight_decay=self.weight_decay,
                           iterations=self.iterations, batch_size=self.batch_size,
                           seed=seed, variant=variant)


@dataclass
class SafetyVerdict:
    envelope: dict
    attack_metrics: MetricsTriple | None
    baseline_metrics: MetricsTriple | None
    threshold: float
    verdict: str  # "safe" | "unsafe" | "inconclusive"
    seed: int
    budget: dict
    evidence: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "envelope": self.envelope,
            "attack_metrics": self.attack_metrics.as_dict() if self.attack_metrics else None,
            "baseline_metrics": self.baseline_metrics.as_dict() if self.baseline_metrics else None,
            "threshold": self.threshold,
            "verdict": self.verdict,
            "seed": self.seed,
            "budget": self.budget,
            "evidence": self.evidence,
        }


def _frames_for(spec: EnvelopeSpec, budget: AuditBudget):
    # The degenerate transparent envelope keeps both frames equal.
    if spec.identity_pose:
        return budget.content_size, budget.content_size
    return budget.content_size, budget.capture_size


def audit_envelope(spec: EnvelopeSpec, budget: AuditBudget, out_dir,
                   seed: int = 0, jitter: float | None = None) -> SafetyVerdict:
    """Attack one envelope design and classify it safe or unsafe.

    Fully seeded: dataset generation, training and evaluation all derive
    from `seed`. Training divergence yields an "inconclusive" verdict,
    never "safe". Evidence grids and the verdict JSON land in `out_dir`.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    content_size, capture_size = _frames_for(spec, budget)
    manifest = make_manifest("audit", spec, pairs=budget.pairs,
                             content_size=content_size, capture_size=capture_size,
                             seed=seed, test_fraction=budget.test_fraction,
                             jitter=jitter)
    dataset_dir = out / "dataset"
    if not (dataset_dir / "manifest.json").exists():
        build_dataset(manifest, dataset_dir)
    pairs = load_pairs(dataset_dir)

    envelope_doc = {
        "spec": spec.to_dict(),
        "optics": envelope_to_config(spec.materialize(content_size, capture_size)),
    }
    cfg = budget.train_config(seed=seed)
    try:
        model, _ = train(pairs, cfg, run_dir=out / "train")
    except TrainingDivergedError as exc:
        verdict = SafetyVerdict(envelope=envelope_doc, attack_metrics=None,
                                baseline_metrics=None, threshold=budget.threshold,
                                verdict="inconclusive", seed=seed, budget=budget.to_dict(),
                                evidence={"divergence": str(exc)})
        runio.write_json(out / "verdict.json", verdict.to_dict())
        return verdict

    report = evaluate(model, pairs, metadata={"audit_seed": seed})
    report.write(out)
    grid_path = out / "evidence.png"
    _evidence_grid(model, pairs, grid_path)
    attack = report.aggregate
    verdict_str = "unsafe" if attack.ssim >= budget.threshold else "safe"
    verdict = SafetyVerdict(
        envelope=envelope_doc,
        attack_metrics=attack,
        baseline_metrics=report.baseline_aggregate,
        threshold=budget.threshold,
        verdict=verdict_str,
        seed=seed,
        budget=budget.to_dict(),
        evidence={"grid": str(grid_path), "dataset": str(dataset_dir),
                  "metrics": str(out / "metrics.json")},
    )
    runio.write_json(out / "verdict.json", verdict.to_dict())
    return verdict


def _evidence_grid(model, pairs: PairSet, path, max_images: int = 8) -> None:
    caps, gts = pairs.subset(pairs.test_indices[:max_images])
    with torch.no_grad():
        trace = model(caps)
    resized = torch.nn.functional.interpolate(caps, size=pairs.content_size,
                                              mode="bilinear", align_corners=False)
    rows = [[resized[k].permute(1, 2, 0).numpy(),
             trace.J_hat[k].permute(1, 2, 0).numpy(),
             gts[k].permute(1, 2, 0).numpy()] for k in range(caps.shape[0])]
    image_grid(rows, path)


# ---------------------------------------------------------------------------
# Sweeps
# ---------------------------------------------------------------------------

def _forward_baseline_ssim(spec: EnvelopeSpec, budget: AuditBudget,
                           seed: int, samples: int = 12) -> float:
    """Mean SSIM between pose-aligned captures and contents, no training.

    Measures the optical degradation alone: the capture is rendered in the
    content frame so pose misalignment cannot mask blur or wash-out.
    """
    from dataclasses import replace
    content_size, _ = _frames_for(spec, budget)
    aligned = replace(spec, identity_pose=True)
    cs = ContentSpec(height=content_size[0], width=content_size[1])
    contents = generate_content(samples, cs, seed)
    seeds = make_manifest("probe", aligned, pairs=samples, content_size=content_size,
                          capture_size=content_size, seed=seed, jitter=0.0).pair_seeds
    vals = []
    for i, content in enumerate(contents):
        env = aligned.materialize(content_size, content_size, noise_seed=seeds[i])
        cap = simulate_capture(content, env)
        vals.append(float(ssim(cap, content)))
    return float(np.mean(vals))


def _parameter_strip(spec_levels, budget: AuditBudget, seed: int, path) -> None:
    """One sample content rendered under each level of one axis, side by side.

    Optical axes render pose-aligned so the strip shows the degradation
    progression directly; the pose-jitter axis renders the jittered capture.
    """
    from dataclasses import replace
    row = []
    for spec, jitter in spec_levels:
        content_size, capture_size = _frames_for(spec, budget)
        content = generate_content(1, ContentSpec(height=content_size[0],
                                                  width=content_size[1]), seed)[0]
        if jitter is None:
            aligned = replace(spec, identity_pose=True)
            env = aligned.materialize(content_size, content_size, noise_seed=seed)
            row.append(simulate_capture(content, env))
        else:
            manifest = make_manifest("strip", spec, pairs=2, content_size=content_size,
                                     capture_size=capture_size, seed=seed, jitter=jitter)
            env = spec.materialize(content_size, capture_size, noise_seed=seed,
                                   pose=pair_pose(manifest, 0))
            cap = torch.from_numpy(simulate_capture(content, env))
            resized = torch.nn.functional.interpolate(
                cap.permute(2, 0, 1).unsqueeze(0), size=content_size,
                mode="bilinear", align_corners=False)
            row.append(resized[0].permute(1, 2, 0).numpy())
    image_grid([row], path)


def parameter_sweep(sweep: SweepSpec, budget: AuditBudget, out_dir, seed: int = 0,
                    audit: bool = True) -> dict:
    """Audit every single-parameter variation and render degradation strips.

    Per-setup failures are isolated and recorded; the sweep continues.
    Returns the report dict (also written to sweep.json, curves.csv and
    per-axis curve plots).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    setups = []
    by_axis = {}
    for axis, level, spec, jitter in sweep.setups():
        setup_id = f"{axis}_{level}"
        entry = {"setup_id": setup_id, "axis": axis, "level": level}
        try:
            entry["baseline_ssim"] = _forward_baseline_ssim(spec, budget, seed)
            if audit:
                verdict = audit_envelope(spec, budget, out / "setups" / setup_id,
                                         seed=seed, jitter=jitter)
                entry["verdict"] = verdict.verdict
                entry["attack_ssim"] = (verdict.attack_metrics.ssim
                                        if verdict.attack_metrics else None)
        except Exception as exc:  # noqa: BLE001 - isolate per-setup failures
            entry["error"] = f"{type(exc).__name__}: {exc}"
        setups.append(entry)
        by_axis.setdefault(axis, []).append(entry)

    for axis, entries in by_axis.items():
        specs = [apply_axis(sweep.base, axis, e["level"]) for e in entries]
        _parameter_strip(specs, budget, seed, out / f"strip_{axis}.png")
        _plot_axis_curve(axis, entries, out / f"curve_{axis}.png")

    report = {"base": sweep.base.to_dict(), "budget": budget.to_dict(),
              "seed": seed, "setups": setups}
    runio.write_json(out / "sweep.json", report)
    rows = [[e["setup_id"], e["axis"], e["level"], e.get("baseline_ssim"),
             e.get("attack_ssim"), e.get("verdict"), e.get("error")] for e in setups]
    runio.write_csv(out / "curves.csv",
                    ["setup_id", "axis", "level", "baseline_ssim", "attack_ssim",
                     "verdict", "error"], rows)
    return report


def _plot_axis_curve(axis: str, entries: list, path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    levels = [e["level"] for e in entries]
    fig, ax = plt.subplots(figsize=(4, 3))
    base_vals = [e.get("baseline_ssim") for e in entries]
    if all(v is not None for v in base_vals):
        ax.plot(levels, base_vals, "o-", label="capture vs content")
    attack_vals = [e.get("attack_ssim") for e in entries]
    if all(v is not None for v in attack_vals):
        ax.plot(levels, attack_vals, "s-", label="attack recovery")
    ax.set_xlabel(axis)
    ax.set_ylabel("SSIM")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


# ---------------------------------------------------------------------------
# Design search
# ---------------------------------------------------------------------------

# The documented lever order and step direction toward a safer envelope.
LEVER_ORDER = ("k_A", "k_t", "kernel_size")


@dataclass
class RecommendResult:
    found: bool
    design: EnvelopeSpec | None
    verdict: SafetyVerdict | None
    audits: list
    message: str

    def to_dict(self) -> dict:
        return {"found": self.found,
                "design": self.design.to_dict() if self.design else None,
                "verdict": self.verdict.to_dict() if self.verdict else None,
                "audits": self.audits, "message": self.message}


def _ordered_levels(axis: str, values) -> list:
    # Toward protection: k_A up, k_t down, kernel_size up.
    return sorted(set(values), reverse=(axis == "k_t"))


def recommend_design(base: EnvelopeSpec, ranges: dict, budget: AuditBudget,
                     out_dir, seed: int = 0) -> RecommendResult:
    """Greedy search for the first safe design inside the allowed ranges.

    Starts from the least protective corner of the ranges and steps one
    level at a time along the levers (k_A first, then k_t, then the blur
    kernel), auditing after every step.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    levels = {}
    for axis in LEVER_ORDER:
        if axis in ranges and len(ranges[axis]) > 0:
            levels[axis] = _ordered_levels(axis, ranges[axis])
    if not levels:
        raise ValueError("ranges must cover at least one of k_A, k_t, kernel_size")

    current = base
    for axis, vals in levels.items():
        current, _ = apply_axis(current, axis, vals[0])

    audits = []
    step = 0

    def run_audit(spec: EnvelopeSpec):
        nonlocal step
        label = f"step{step:02d}"
        step += 1
        verdict = audit_envelope(spec, budget, out / label, seed=seed)
        audits.append({"step": label, "k_A": spec.k_A, "k_t": spec.k_t,
                       "kernel_size": spec.kernel_size,
                       "ssim": verdict.attack_metrics.ssim if verdict.attack_metrics else None,
                       "verdict": verdict.verdict})
        return verdict

    verdict = run_audit(current)
    if verdict.verdict == "safe":
        result = RecommendResult(True, current, verdict, audits, "base of range is safe")
        runio.write_json(out / "recommendation.json", result.to_dict())
        return result

    for axis in LEVER_ORDER:
        for value in levels.get(axis, [])[1:]:
            current, _ = apply_axis(current, axis, value)
            verdict = run_audit(current)
            if verdict.verdict == "safe":
                result = RecommendResult(True, current, verdict, audits,
                                         f"safe after raising protection via {axis}")
                runio.write_json(out / "recommendation.json", result.to_dict())
                return result

    result = RecommendResult(False, None, None, audits, "no safe design in range")
    runio.write_json(out / "recommendation.json", result.to_dict())
    return result
