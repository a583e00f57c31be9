"""Synthetic benchmark generation and comparison reports.

Datasets pair procedurally generated hidden contents with simulated
captures under a parameterized envelope. Three difficulty presets map the
physical setups (thin envelope under bright light, thicker envelope,
thick envelope under dim light) onto the optical parameters; `safe` is
the known counter-attack design (kernel 17, k_A 1.0, k_t 0.1) and
`identity` is the degenerate fully transparent envelope.

Every pair is reproducible bit-exactly from the manifest: per-pair seeds
drive both the pose jitter (the hidden page is re-placed by hand between
captures, so each pair gets a small random homography perturbation) and
the sensor noise.
"""

from __future__ import annotations

import shutil
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from . import runio
from .content import ContentSpec, generate_content, smooth_field
from .imaging import (BlurSpec, EnvelopeParams, Homography, NoiseSpec,
                      envelope_to_config, save_image, simulate_capture)
from .metrics import MetricsTriple, compute_triple
from .training import (PairSet, TrainConfig, evaluate, evaluate_checkpoint,
                       load_pairs, train)

__all__ = [
    "EnvelopeSpec",
    "PRESETS",
    "preset_spec",
    "DatasetManifest",
    "make_manifest",
    "build_dataset",
    "load_manifest",
    "SweepSpec",
    "default_sweep",
    "apply_axis",
    "run_benchmark",
    "image_grid",
    "REAL_DATA_REFERENCE",
]

# Published real-capture study results (physical envelopes), embedded in
# report footers as context only; synthetic runs are never compared
# against them.
REAL_DATA_REFERENCE = {
    "attack_model": {"psnr": 15.0275, "rmse": 0.3127, "ssim": 0.4449},
    "cam_captured": {"psnr": 8.2767, "rmse": 0.6682, "ssim": 0.2695},
}

DEFAULT_PAIR_COUNT = 500
DEFAULT_TEST_FRACTION = 0.1
DEFAULT_CONTENT_SIZE = (256, 256)
DEFAULT_CAPTURE_SIZE = (240, 320)
DEFAULT_JITTER = 0.05


# ---------------------------------------------------------------------------
# Envelope specification (scalars + texture seeds -> EnvelopeParams)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EnvelopeSpec:
    """Resolution-free description of an envelope; `materialize` renders the
    transmittance/reflection textures at concrete frame sizes."""

    L: float = 1.0
    kernel_size: int = 5
    sigma: float | None = None
    k_t: float = 0.75
    k_A: float = 0.3
    gaussian_sigma: float = 0.01
    poisson_scale: float = 512.0
    texture_seed: int = 7
    margin: float = 0.92          # fraction of the capture the content spans
    identity_pose: bool = False   # identity homography (frames must match)
    t_range: tuple = (0.85, 1.0)  # transmittance texture value range
    a_color: tuple = (0.72, 0.58, 0.38)  # kraft-paper reflection tint

    def to_dict(self) -> dict:
        d = {
            "L": self.L, "kernel_size": self.kernel_size, "sigma": self.sigma,
            "k_t": self.k_t, "k_A": self.k_A, "gaussian_sigma": self.gaussian_sigma,
            "poisson_scale": self.poisson_scale, "texture_seed": self.texture_seed,
            "margin": self.margin, "identity_pose": self.identity_pose,
            "t_range": list(self.t_range), "a_color": list(self.a_color),
        }
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EnvelopeSpec":
        d = dict(d)
        d["a_color"] = tuple(d.get("a_color", (0.72, 0.58, 0.38)))
        d["t_range"] = tuple(d.get("t_range", (0.85, 1.0)))
        return cls(**d)

    def base_homography(self, content_size, capture_size) -> Homography:
        """Content frame embedded centrally in the capture frame.

        Scales so the content keeps its pixel aspect ratio and spans
        `margin` of the capture height.
        """
        if self.identity_pose:
            if tuple(content_size) != tuple(capture_size):
                raise ValueError("identity_pose requires equal content and capture sizes")
            return Homography.identity()
        ch, cw = content_size
        ph, pw = capture_size
        sy = self.margin
        sx = self.margin * (cw / ch) * (ph / pw)
        return Homography(np.diag([sx, sy, 1.0]))

    def materialize(self, content_size, capture_size, noise_seed: int = 0,
                    pose: Homography | None = None) -> EnvelopeParams:
        rng = np.random.default_rng(np.random.SeedSequence([self.texture_seed]))
        # Transmittance texture: smooth paper-fiber variation.
        t_base = smooth_field(content_size, rng, low=self.t_range[0],
                              high=self.t_range[1], cells=8)
        # Reflection texture: tinted envelope face with smooth mottling.
        mottle = smooth_field(capture_size, rng, low=0.75, high=1.0, cells=8)
        a_base = np.clip(mottle * np.asarray(self.a_color, dtype=np.float32), 0.0, 1.0)
        h = pose if pose is not None else self.base_homography(content_size, capture_size)
        return EnvelopeParams(
            L=self.L,
            H=h,
            blur=BlurSpec(kernel_size=self.kernel_size, sigma=self.sigma),
            k_t=self.k_t,
            k_A=self.k_A,
            t_base=t_base,
            A_base=a_base.astype(np.float32),
            noise=NoiseSpec(gaussian_sigma=self.gaussian_sigma,
                            poisson_scale=self.poisson_scale, seed=noise_seed),
        )


PRESETS = {
    # Thin envelope, bright room light: most signal survives.
    "easy": EnvelopeSpec(L=1.0, kernel_size=5, k_t=0.75, k_A=0.3),
    # Thicker envelope: less transmitted light, more spread.
    "medium": EnvelopeSpec(L=1.0, kernel_size=9, k_t=0.45, k_A=0.5),
    # Thick envelope under dim light.
    "hard": EnvelopeSpec(L=0.6, kernel_size=13, k_t=0.2, k_A=0.7,
                         gaussian_sigma=0.015, poisson_scale=256.0),
    # Known counter-attack design: strong blur, opaque, reflective face.
    "safe": EnvelopeSpec(L=1.0, kernel_size=17, k_t=0.1, k_A=1.0),
    # Degenerate fully transparent "envelope": capture equals content.
    "identity": EnvelopeSpec(L=1.0, kernel_size=1, k_t=1.0, k_A=0.0,
                             gaussian_sigma=0.0, poisson_scale=0.0,
                             identity_pose=True, t_range=(1.0, 1.0)),
}


def preset_spec(name: str) -> EnvelopeSpec:
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; available: {sorted(PRESETS)}")
    return PRESETS[name]


# ---------------------------------------------------------------------------
# Dataset manifests and building
# ---------------------------------------------------------------------------

@dataclass
class DatasetManifest:
    setup_id: str
    envelope: EnvelopeSpec
    content: ContentSpec
    content_seed: int
    pair_count: int
    content_size: tuple
    capture_size: tuple
    split: dict
    seed: int
    pair_seeds: list
    jitter: float = DEFAULT_JITTER

    def to_dict(self) -> dict:
        return {
            "setup_id": self.setup_id,
            "envelope": self.envelope.to_dict(),
            "content": self.content.to_dict(),
            "content_seed": self.content_seed,
            "pair_count": self.pair_count,
            "content_size": list(self.content_size),
            "capture_size": list(self.capture_size),
            "split": self.split,
            "seed": self.seed,
            "pair_seeds": self.pair_seeds,
            "jitter": self.jitter,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetManifest":
        return cls(
            setup_id=d["setup_id"],
            envelope=EnvelopeSpec.from_dict(d["envelope"]),
            content=ContentSpec.from_dict(d["content"]),
            content_seed=d["content_seed"],
            pair_count=d["pair_count"],
            content_size=tuple(d["content_size"]),
            capture_size=tuple(d["capture_size"]),
            split=d["split"],
            seed=d["seed"],
            pair_seeds=list(d["pair_seeds"]),
            jitter=d["jitter"],
        )


def _pair_seed(master: int, index: int) -> int:
    return int(np.random.SeedSequence([master, 1000 + index]).generate_state(1)[0])


def make_manifest(setup_id: str, envelope: EnvelopeSpec, pairs: int = DEFAULT_PAIR_COUNT,
                  content_size=DEFAULT_CONTENT_SIZE, capture_size=DEFAULT_CAPTURE_SIZE,
                  seed: int = 0, test_fraction: float = DEFAULT_TEST_FRACTION,
                  jitter: float | None = None) -> DatasetManifest:
    """Resolve a dataset description: split indices and per-pair seeds."""
    if pairs < 2:
        raise ValueError("need at least 2 pairs to split")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    order = [int(i) for i in rng.permutation(pairs)]
    n_test = max(1, round(pairs * test_fraction))
    split = {"train": sorted(order[:-n_test]), "test": sorted(order[-n_test:])}
    if jitter is None:
        jitter = 0.0 if envelope.identity_pose else DEFAULT_JITTER
    spec = ContentSpec(height=content_size[0], width=content_size[1])
    return DatasetManifest(
        setup_id=setup_id, envelope=envelope, content=spec,
        content_seed=int(np.random.SeedSequence([seed, 2]).generate_state(1)[0]),
        pair_count=pairs, content_size=tuple(content_size),
        capture_size=tuple(capture_size), split=split, seed=seed,
        pair_seeds=[_pair_seed(seed, i) for i in range(pairs)], jitter=jitter,
    )


_CANONICAL_CORNERS = np.array([[-1.0, -1.0], [1.0, -1.0], [1.0, 1.0], [-1.0, 1.0]])


def pair_pose(manifest: DatasetManifest, index: int) -> Homography:
    """The jittered content-to-capture homography for one pair."""
    base = manifest.envelope.base_homography(manifest.content_size, manifest.capture_size)
    if manifest.jitter == 0:
        return base
    rng = np.random.default_rng(np.random.SeedSequence([manifest.pair_seeds[index], 1]))
    base_dst = np.array([(base.matrix @ np.array([x, y, 1.0]))[:2] /
                         (base.matrix @ np.array([x, y, 1.0]))[2]
                         for x, y in _CANONICAL_CORNERS])
    # +-jitter of the frame size in pixels is +-2*jitter in normalized units.
    dst = base_dst + rng.uniform(-2 * manifest.jitter, 2 * manifest.jitter, size=(4, 2))
    return Homography.from_points(_CANONICAL_CORNERS, dst)


def build_dataset(manifest: DatasetManifest, out_dir) -> Path:
    """Write gt/NNNN.png, cap/NNNN.png, split.json and manifest.json.

    Fails atomically: on error, everything created here is removed before
    the exception propagates.
    """
    out = Path(out_dir)
    created = not out.exists()
    try:
        (out / "gt").mkdir(parents=True, exist_ok=True)
        (out / "cap").mkdir(parents=True, exist_ok=True)
        contents = generate_content(manifest.pair_count, manifest.content, manifest.content_seed)
        for i, content in enumerate(contents):
            env = manifest.envelope.materialize(
                manifest.content_size, manifest.capture_size,
                noise_seed=manifest.pair_seeds[i], pose=pair_pose(manifest, i))
            capture = simulate_capture(content, env)
            save_image(out / "gt" / f"{i:04d}.png", content)
            save_image(out / "cap" / f"{i:04d}.png", capture)
        runio.write_json(out / "split.json", manifest.split)
        runio.write_json(out / "manifest.json", manifest.to_dict())
    except BaseException:
        if created and out.exists():
            shutil.rmtree(out)
        raise
    return out


def load_manifest(dataset_dir) -> DatasetManifest:
    return DatasetManifest.from_dict(runio.read_json(Path(dataset_dir) / "manifest.json"))


# ---------------------------------------------------------------------------
# Parameter sweeps
# ---------------------------------------------------------------------------

SWEEP_AXES = ("kernel_size", "k_t", "k_A", "L", "h_jitter", "gaussian_sigma")


@dataclass(frozen=True)
class SweepSpec:
    """Single-parameter variations around a base envelope.

    Each (axis, level) pair defines one setup in which exactly that axis
    differs from the base.
    """

    base: EnvelopeSpec
    axes: dict = field(default_factory=dict)

    def __post_init__(self):
        for axis, levels in self.axes.items():
            if axis not in SWEEP_AXES:
                raise ValueError(f"unknown sweep axis {axis!r}; expected one of {SWEEP_AXES}")
            if len(levels) < 1:
                raise ValueError(f"axis {axis!r} needs at least one level")

    def setups(self):
        """Yield (axis, level, spec, jitter_override) for every setup."""
        for axis, levels in self.axes.items():
            for level in levels:
                spec, jitter = apply_axis(self.base, axis, level)
                yield axis, level, spec, jitter


def apply_axis(spec: EnvelopeSpec, axis: str, value):
    """Vary exactly one controllable parameter; returns (spec, jitter or None)."""
    if axis == "kernel_size":
        return replace(spec, kernel_size=int(value), sigma=None), None
    if axis == "k_t":
        return replace(spec, k_t=float(value)), None
    if axis == "k_A":
        return replace(spec, k_A=float(value)), None
    if axis == "L":
        return replace(spec, L=float(value)), None
    if axis == "gaussian_sigma":
        return replace(spec, gaussian_sigma=float(value)), None
    if axis == "h_jitter":
        return spec, float(value)
    raise ValueError(f"unknown sweep axis {axis!r}")


def default_sweep(base: EnvelopeSpec | None = None, full: bool = False) -> SweepSpec:
    """Nine default setups: three levels over kernel size, k_t and k_A.

    With `full=True`, also sweeps environment light, pose jitter and
    Gaussian noise (the remaining controllable parameters).
    """
    base = base or PRESETS["easy"]
    axes = {
        "kernel_size": [1, 9, 17],
        "k_t": [0.8, 0.4, 0.1],
        "k_A": [0.2, 0.6, 1.0],
    }
    if full:
        axes["L"] = [1.0, 0.6, 0.3]
        axes["h_jitter"] = [0.02, 0.05, 0.1]
        axes["gaussian_sigma"] = [0.0, 0.02, 0.05]
    return SweepSpec(base=base, axes=axes)


# ---------------------------------------------------------------------------
# Evaluation helpers and the comparison report
# ---------------------------------------------------------------------------

def input_baseline(pairs: PairSet) -> tuple[MetricsTriple, list]:
    """Model-free baseline: the capture resized to the content frame."""
    caps, gts = pairs.subset(pairs.test_indices)
    resized = torch.nn.functional.interpolate(caps, size=pairs.content_size,
                                              mode="bilinear", align_corners=False)
    triples = []
    rows = []
    for k, idx in enumerate(pairs.test_indices):
        t = compute_triple(resized[k].permute(1, 2, 0), gts[k].permute(1, 2, 0))
        triples.append(t)
        rows.append({"index": idx, **t.as_dict()})
    mean = MetricsTriple(
        psnr=float(np.mean([t.psnr for t in triples])),
        rmse=float(np.mean([t.rmse for t in triples])),
        ssim=float(np.mean([t.ssim for t in triples])),
    )
    return mean, rows


def image_grid(rows, path, pad: int = 2) -> None:
    """Save a grid PNG; `rows` is a list of lists of equal-size HxWx3 arrays."""
    rendered = []
    for row in rows:
        padded = [np.pad(np.asarray(img, dtype=np.float32), ((pad, pad), (pad, pad), (0, 0)),
                         constant_values=1.0) for img in row]
        rendered.append(np.concatenate(padded, axis=1))
    grid = np.concatenate(rendered, axis=0)
    save_image(path, np.clip(grid, 0.0, 1.0))


def run_benchmark(dataset_dirs, variants, config: TrainConfig, out_dir,
                  reuse: bool = True, train_missing: bool = True) -> dict:
    """Train/evaluate every (setup, variant) and emit the comparison table.

    Rows are the variants plus the model-free input baseline; columns are
    PSNR/RMSE/SSIM averaged over the setups, with per-setup detail tables
    alongside. Results land in `out_dir` as JSON, CSV and markdown.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    per_setup = {}
    for dataset_dir in dataset_dirs:
        dataset_dir = Path(dataset_dir)
        manifest = load_manifest(dataset_dir)
        pairs = load_pairs(dataset_dir)
        setup_rows = {}
        base_mean, _ = input_baseline(pairs)
        setup_rows["input_baseline"] = base_mean.as_dict()
        for variant in variants:
            run_dir = out / "runs" / manifest.setup_id / variant
            ckpt = run_dir / "checkpoint_final.pt"
            if ckpt.exists() and reuse:
                report = evaluate_checkpoint(ckpt, pairs, expected_variant=variant)
            elif train_missing:
                cfg = replace(config, variant=variant)
                model, _ = train(pairs, cfg, run_dir=run_dir)
                report = evaluate(model, pairs, metadata={"setup_id": manifest.setup_id})
                report.write(run_dir)
                _write_sample_grid(model, pairs, run_dir / "samples.png")
            else:
                raise FileNotFoundError(
                    f"no checkpoint for setup {manifest.setup_id} variant {variant} "
                    f"and training is disabled")
            setup_rows[variant] = report.aggregate.as_dict()
        per_setup[manifest.setup_id] = setup_rows

    row_names = ["input_baseline"] + list(variants)
    averaged = {}
    for name in row_names:
        averaged[name] = {
            m: float(np.mean([per_setup[s][name][m] for s in per_setup]))
            for m in ("psnr", "rmse", "ssim")
        }
    result = {"per_setup": per_setup, "averaged": averaged,
              "real_data_reference": REAL_DATA_REFERENCE}
    runio.write_json(out / "report.json", result)
    rows = [[name, averaged[name]["psnr"], averaged[name]["rmse"], averaged[name]["ssim"]]
            for name in row_names]
    runio.write_csv(out / "report.csv", ["model", "psnr", "rmse", "ssim"], rows)
    _write_markdown_report(out / "report.md", result, row_names)
    return result


def _write_sample_grid(model, pairs: PairSet, path, max_images: int = 6) -> None:
    """Capture / warped input / recovered / ground truth columns."""
    caps, gts = pairs.subset(pairs.test_indices[:max_images])
    with torch.no_grad():
        trace = model(caps)
    resized_caps = torch.nn.functional.interpolate(caps, size=pairs.content_size,
                                                   mode="bilinear", align_corners=False)
    rows = []
    for k in range(caps.shape[0]):
        rows.append([
            resized_caps[k].permute(1, 2, 0).numpy(),
            trace.warped_input[k].permute(1, 2, 0).numpy(),
            trace.J_hat[k].permute(1, 2, 0).numpy(),
            gts[k].permute(1, 2, 0).numpy(),
        ])
    image_grid(rows, path)


def _write_markdown_report(path, result: dict, row_names) -> None:
    lines = ["# Benchmark comparison", "",
             "Mean over setups (higher PSNR/SSIM better, lower RMSE better):", "",
             "| model | PSNR | RMSE | SSIM |", "|---|---|---|---|"]
    for name in row_names:
        r = result["averaged"][name]
        lines.append(f"| {name} | {r['psnr']:.4f} | {r['rmse']:.4f} | {r['ssim']:.4f} |")
    lines += ["", "## Per-setup detail", ""]
    for setup, rows in result["per_setup"].items():
        lines += [f"### {setup}", "", "| model | PSNR | RMSE | SSIM |", "|---|---|---|---|"]
        for name, r in rows.items():
            lines.append(f"| {name} | {r['psnr']:.4f} | {r['rmse']:.4f} | {r['ssim']:.4f} |")
        lines += ["", f"Sample grids: `runs/{setup}/<variant>/samples.png`", ""]
    ref = result["real_data_reference"]
    lines += [
        "---",
        "Published real-capture reference (physical envelopes; context only, "
        "not comparable to synthetic runs): "
        f"attack model {ref['attack_model']['psnr']}/{ref['attack_model']['rmse']}/"
        f"{ref['attack_model']['ssim']}, raw capture {ref['cam_captured']['psnr']}/"
        f"{ref['cam_captured']['rmse']}/{ref['cam_captured']['ssim']} (PSNR/RMSE/SSIM).",
    ]
    Path(path).write_text("\n".join(lines) + "\n")
