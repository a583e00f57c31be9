"""Training and evaluation of the see-through model.

The objective combines the reconstruction loss on the refined output with
two physically-motivated constraints: the coarse dehazed estimate should
already resemble the hidden content (squared error on J_coarse), and the
predicted surface reflection should resemble the warped capture, which it
dominates under room light (squared error on A, down-weighted by 0.1).
Constraint terms are pixel means so the weights are resolution
independent. Degraded variants drop their designated terms exactly.

Optimization follows the published recipe: Adam at lr 1e-3 for 4000
iterations with batch size 16, and a penalty factor of 5e-4 applied as a
multiplicative weight decay each step. The decay is deliberately not
scaled by the learning rate, so setting lr to zero still shrinks weights.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import runio
from .imaging import load_image
from .metrics import MetricsTriple, compute_triple, recon_loss_nchw
from .model import AttackModel, ForwardTrace, VARIANTS, load_checkpoint, save_checkpoint

__all__ = [
    "LossWeights",
    "TrainConfig",
    "TrainState",
    "TrainingDivergedError",
    "PairSet",
    "load_pairs",
    "total_loss",
    "train",
    "evaluate",
    "evaluate_checkpoint",
    "MetricsReport",
]

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
# Tolerance band for the transmittance clamp check at every step.
T_BOUNDS = (0.01 - 1e-6, 1.0 + 1e-6)


class TrainingDivergedError(RuntimeError):
    """Loss went non-finite; the last good checkpoint is retained."""

    def __init__(self, message, checkpoint_path=None):
        super().__init__(message)
        self.checkpoint_path = checkpoint_path


@dataclass(frozen=True)
class LossWeights:
    recon: float = 1.0
    j_constraint: float = 1.0
    a_constraint: float = 0.1


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    weight_decay: float = 5e-4
    iterations: int = 4000
    batch_size: int = 16
    seed: int = 0
    variant: str = "full"
    loss_weights: LossWeights = field(default_factory=LossWeights)
    checkpoint_interval: int = 500

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.iterations < 1 or self.batch_size < 1:
            raise ValueError("iterations and batch_size must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["loss_weights"] = asdict(self.loss_weights)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "loss_weights" in d:
            d["loss_weights"] = LossWeights(**d["loss_weights"])
        return cls(**d)

    def config_hash(self) -> str:
        return runio.sha256_text(runio.stable_json_dumps(self.to_dict()))


@dataclass
class TrainState:
    iteration: int
    loss_history: list
    optimizer_state: dict


# ---------------------------------------------------------------------------
# Paired samples
# ---------------------------------------------------------------------------

@dataclass
class PairSet:
    """Paired captures and hidden contents held in memory as NCHW tensors."""

    captures: torch.Tensor
    contents: torch.Tensor
    train_indices: list
    test_indices: list
    dataset_hash: str = ""

    def __post_init__(self):
        if self.captures.shape[0] != self.contents.shape[0]:
            raise ValueError("captures and contents must pair up one-to-one")
        overlap = set(self.train_indices) & set(self.test_indices)
        if overlap:
            raise ValueError(f"train/test splits overlap: {sorted(overlap)[:5]}")

    @property
    def capture_size(self):
        return tuple(self.captures.shape[-2:])

    @property
    def content_size(self):
        return tuple(self.contents.shape[-2:])

    def subset(self, indices):
        idx = torch.as_tensor(list(indices), dtype=torch.long)
        return self.captures[idx], self.contents[idx]


def load_pairs(dataset_dir) -> PairSet:
    """Load a dataset directory (gt/, cap/, split.json) into memory."""
    root = Path(dataset_dir)
    split = runio.read_json(root / "split.json")
    n = len(split["train"]) + len(split["test"])
    captures, contents = [], []
    for i in range(n):
        contents.append(load_image(root / "gt" / f"{i:04d}.png"))
        captures.append(load_image(root / "cap" / f"{i:04d}.png"))
    caps = torch.from_numpy(np.stack(captures)).permute(0, 3, 1, 2).contiguous()
    gts = torch.from_numpy(np.stack(contents)).permute(0, 3, 1, 2).contiguous()
    return PairSet(captures=caps, contents=gts,
                   train_indices=list(split["train"]), test_indices=list(split["test"]),
                   dataset_hash=runio.sha256_tree(root))


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------

def _active_terms(variant: str):
    j_on = variant not in ("black_box", "no_J_constraint")
    a_on = variant not in ("black_box", "no_A_constraint")
    return j_on, a_on


def total_loss(trace: ForwardTrace, target: torch.Tensor, weights: LossWeights,
               variant: str = "full"):
    """Weighted sum of reconstruction and constraint terms.

    Returns (total tensor, breakdown dict); the breakdown entries are the
    weighted contributions and sum to the total. Dropped terms are exact
    zeros.
    """
    recon = weights.recon * recon_loss_nchw(target, trace.J_hat)
    total = recon
    breakdown = {"recon": float(recon.detach())}

    j_on, a_on = _active_terms(variant)
    if j_on:
        if trace.J_coarse is None:
            raise ValueError(f"variant {variant!r} requires a J_coarse trace field")
        j_term = weights.j_constraint * ((target - trace.J_coarse) ** 2).mean()
        total = total + j_term
        breakdown["j_term"] = float(j_term.detach())
    else:
        breakdown["j_term"] = 0.0
    if a_on:
        if trace.A_pred is None:
            raise ValueError(f"variant {variant!r} requires an A_pred trace field")
        a_term = weights.a_constraint * ((trace.A_pred - trace.warped_input) ** 2).mean()
        total = total + a_term
        breakdown["a_term"] = float(a_term.detach())
    else:
        breakdown["a_term"] = 0.0
    return total, breakdown


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

def _batch_stream(n: int, batch_size: int, seed: int):
    """Seeded shuffled mini-batch indices, reshuffled every epoch."""
    gen = torch.Generator().manual_seed(seed)
    batch = min(batch_size, n)
    while True:
        order = torch.randperm(n, generator=gen).tolist()
        for start in range(0, n - batch + 1, batch):
            yield order[start:start + batch]


def train(pairs: PairSet, config: TrainConfig, run_dir=None,
          model: AttackModel | None = None):
    """Run the optimization for exactly `config.iterations` steps.

    Writes (when `run_dir` is given) the resolved config manifest, a
    per-iteration loss CSV, periodic checkpoints, and a final checkpoint.
    Non-finite losses abort with the last good checkpoint retained.
    Returns (model, TrainState).
    """
    torch.manual_seed(config.seed)
    if model is None:
        model = AttackModel(config.variant, pairs.capture_size, pairs.content_size)
    elif model.variant != config.variant:
        raise ValueError(f"model variant {model.variant!r} does not match config {config.variant!r}")
    model.train()

    optimizer = torch.optim.Adam(model.parameters(), lr=config.lr, betas=ADAM_BETAS,
                                 eps=ADAM_EPS, weight_decay=0.0)
    train_caps, train_gts = pairs.subset(pairs.train_indices)
    stream = _batch_stream(len(pairs.train_indices), config.batch_size, config.seed)

    run_dir = Path(run_dir) if run_dir is not None else None
    ckpt_dir = None
    last_ckpt = None
    cfg_hash = config.config_hash()
    if run_dir is not None:
        ckpt_dir = run_dir / "checkpoints"
        ckpt_dir.mkdir(parents=True, exist_ok=True)
        runio.write_json(run_dir / "manifest.json", {
            "config": config.to_dict(),
            "dataset_hash": pairs.dataset_hash,
            "config_hash": cfg_hash,
            "train_size": len(pairs.train_indices),
            "test_size": len(pairs.test_indices),
            "capture_size": list(pairs.capture_size),
            "content_size": list(pairs.content_size),
        })

    history = []
    decay = 1.0 - config.weight_decay
    for it in range(1, config.iterations + 1):
        idx = torch.as_tensor(next(stream), dtype=torch.long)
        optimizer.zero_grad()
        trace = model(train_caps[idx])
        if trace.t_pred is not None:
            with torch.no_grad():
                tmin, tmax = float(trace.t_pred.min()), float(trace.t_pred.max())
            if tmin < T_BOUNDS[0] or tmax > T_BOUNDS[1]:
                raise RuntimeError(f"transmittance left [0.01, 1] at iteration {it}: [{tmin}, {tmax}]")
        loss, breakdown = total_loss(trace, train_gts[idx], config.loss_weights, config.variant)
        if not math.isfinite(float(loss.detach())):
            if run_dir is not None:
                runio.write_csv(run_dir / "loss.csv",
                                ["iteration", "total", "recon", "j_term", "a_term"], history)
            raise TrainingDivergedError(
                f"non-finite loss at iteration {it}", checkpoint_path=last_ckpt)
        loss.backward()
        optimizer.step()
        if config.weight_decay > 0:
            with torch.no_grad():
                for p in model.parameters():
                    p.mul_(decay)
        history.append([it, float(loss.detach()), breakdown["recon"], breakdown["j_term"],
                        breakdown["a_term"]])
        if ckpt_dir is not None and (it % config.checkpoint_interval == 0 or it == config.iterations):
            last_ckpt = ckpt_dir / f"ckpt_{it:06d}.pt"
            save_checkpoint(last_ckpt, model, optimizer.state_dict(), it, cfg_hash)

    if run_dir is not None:
        runio.write_csv(run_dir / "loss.csv",
                        ["iteration", "total", "recon", "j_term", "a_term"], history)
        save_checkpoint(run_dir / "checkpoint_final.pt", model, optimizer.state_dict(),
                        config.iterations, cfg_hash)
    model.eval()
    state = TrainState(iteration=config.iterations, loss_history=history,
                       optimizer_state=optimizer.state_dict())
    return model, state


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

@dataclass
class MetricsReport:
    """Per-image and aggregate quality of the recovered content.

    The baseline rows score the model's aligned input (the warped capture)
    against the hidden content, the analogue of judging the raw camera
    capture itself.
    """

    per_image: list
    aggregate: MetricsTriple
    baseline_per_image: list
    baseline_aggregate: MetricsTriple
    metadata: dict

    def to_dict(self) -> dict:
        return {
            "per_image": self.per_image,
            "aggregate": self.aggregate.as_dict(),
            "baseline_per_image": self.baseline_per_image,
            "baseline_aggregate": self.baseline_aggregate.as_dict(),
            "metadata": self.metadata,
        }

    def write(self, out_dir) -> None:
        out_dir = Path(out_dir)
        runio.write_json(out_dir / "metrics.json", self.to_dict())
        rows = [[r["index"], "model", r["psnr"], r["rmse"], r["ssim"]] for r in self.per_image]
        rows.append(["mean", "model", self.aggregate.psnr, self.aggregate.rmse,
                     self.aggregate.ssim])
        rows += [[r["index"], "input_baseline", r["psnr"], r["rmse"], r["ssim"]]
                 for r in self.baseline_per_image]
        rows.append(["mean", "input_baseline", self.baseline_aggregate.psnr,
                     self.baseline_aggregate.rmse, self.baseline_aggregate.ssim])
        runio.write_csv(out_dir / "metrics.csv", ["image", "row", "psnr", "rmse", "ssim"], rows)


def _mean_triple(triples) -> MetricsTriple:
    return MetricsTriple(
        psnr=float(np.mean([t.psnr for t in triples])),
        rmse=float(np.mean([t.rmse for t in triples])),
        ssim=float(np.mean([t.ssim for t in triples])),
    )


def evaluate(model: AttackModel, pairs: PairSet, metadata: dict | None = None,
             batch_size: int = 16) -> MetricsReport:
    """Score the model on the held-out split of `pairs`."""
    if not pairs.test_indices:
        raise ValueError("test set is empty")
    model.eval()
    caps, gts = pairs.subset(pairs.test_indices)
    rows, base_rows, triples, base_triples = [], [], [], []
    with torch.no_grad():
        for start in range(0, caps.shape[0], batch_size):
            trace = model(caps[start:start + batch_size])
            for k in range(trace.J_hat.shape[0]):
                idx = pairs.test_indices[start + k]
                gt = gts[start + k].permute(1, 2, 0)
                pred_triple = compute_triple(trace.J_hat[k].permute(1, 2, 0), gt)
                base_triple = compute_triple(trace.warped_input[k].permute(1, 2, 0), gt)
                rows.append({"index": idx, **pred_triple.as_dict()})
                base_rows.append({"index": idx, **base_triple.as_dict()})
                triples.append(pred_triple)
                base_triples.append(base_triple)
    meta = {"variant": model.variant, "test_size": len(pairs.test_indices),
            "dataset_hash": pairs.dataset_hash}
    if metadata:
        meta.update(metadata)
    return MetricsReport(per_image=rows, aggregate=_mean_triple(triples),
                         baseline_per_image=base_rows,
                         baseline_aggregate=_mean_triple(base_triples), metadata=meta)


def evaluate_checkpoint(checkpoint_path, pairs: PairSet, expected_variant=None,
                        metadata=None) -> MetricsReport:
    """Load a checkpoint (validating sizes against the dataset) and evaluate."""
    model, payload = load_checkpoint(checkpoint_path, expected_variant)
    if model.capture_size != pairs.capture_size or model.content_size != pairs.content_size:
        raise ValueError(
            f"checkpoint frames cap={model.capture_size} content={model.content_size} do not "
            f"match dataset cap={pairs.capture_size} content={pairs.content_size}")
    meta = dict(metadata or {})
    meta["checkpoint_iteration"] = payload["iteration"]
    return evaluate(model, pairs, metadata=meta)
