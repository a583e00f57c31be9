"""envpeek: simulate, attack, and audit paper envelopes.

A forward simulator renders camera captures of content sealed inside an
envelope (blur, transmittance, surface reflection, pose, noise); a
three-stage learned model inverts the capture to recover the hidden
content; and the audit workflow uses that attack to certify envelope
designs safe or unsafe.
"""

__version__ = "0.1.0"

from .imaging import (BlurSpec, DegenerateHomographyError, EnvelopeParams,
                      Homography, NoiseSpec, apply_blur, dehaze_inverse,
                      load_image, pixel_translation, save_image, simulate_capture,
                      warp_image)
from .metrics import MetricsTriple, compute_triple, psnr, recon_loss, rmse, ssim
from .model import AttackModel, ForwardTrace, VARIANTS, load_checkpoint, save_checkpoint
from .training import (LossWeights, MetricsReport, PairSet, TrainConfig,
                       TrainingDivergedError, evaluate, load_pairs, total_loss, train)
from .content import ContentSpec, generate_content
from .benchmark import (DatasetManifest, EnvelopeSpec, SweepSpec, build_dataset,
                        default_sweep, load_manifest, make_manifest, preset_spec,
                        run_benchmark)
from .design import (AuditBudget, RecommendResult, SafetyVerdict, audit_envelope,
                     parameter_sweep, recommend_design)

__all__ = [
    "__version__",
    "BlurSpec", "DegenerateHomographyError", "EnvelopeParams", "Homography",
    "NoiseSpec", "apply_blur", "dehaze_inverse", "load_image", "pixel_translation",
    "save_image", "simulate_capture", "warp_image",
    "MetricsTriple", "compute_triple", "psnr", "recon_loss", "rmse", "ssim",
    "AttackModel", "ForwardTrace", "VARIANTS", "load_checkpoint", "save_checkpoint",
    "LossWeights", "MetricsReport", "PairSet", "TrainConfig", "TrainingDivergedError",
    "evaluate", "load_pairs", "total_loss", "train",
    "ContentSpec", "generate_content",
    "DatasetManifest", "EnvelopeSpec", "SweepSpec", "build_dataset", "default_sweep",
    "load_manifest", "make_manifest", "preset_spec", "run_benchmark",
    "AuditBudget", "RecommendResult", "SafetyVerdict", "audit_envelope",
    "parameter_sweep", "recommend_design",
]
