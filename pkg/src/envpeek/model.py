"""The learned see-through model: warp, dehaze, refine.

Three stages invert the envelope capture process:

  * WarpingNet regresses an 8-DoF homography from a downsampled copy of
    the capture and warps the full-resolution capture into the content
    frame (identity at initialization, so training starts from a plain
    resize).
  * DehazingNet runs a shared encoder-decoder backbone over the warped
    capture and predicts the surface reflection map A and transmittance
    map t through two light heads; the coarse content estimate is the
    physical inversion (warped - A) / t.
  * RefineNet adds a residual correction for blur, noise, and color,
    starting from the identity (zero-initialized last layer).

Degraded variants rewire the stages: `no_warp` replaces the warp with a
resize, `no_refine` returns the coarse estimate, `black_box` keeps only
the backbone plus a direct 3-channel prediction head, and the two
constraint variants share the full architecture (they differ only in the
training loss).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .imaging import T_FLOOR, dehaze_inverse, warp_tensor

__all__ = [
    "VARIANTS",
    "ForwardTrace",
    "AttackModel",
    "NonFiniteActivationError",
    "CheckpointVariantError",
    "homography_from_offsets",
    "save_checkpoint",
    "load_checkpoint",
    "PIX2PIX_REFERENCE_PARAM_COUNT",
    "CHECKPOINT_SCHEMA_VERSION",
]

VARIANTS = ("full", "black_box", "no_warp", "no_refine", "no_A_constraint", "no_J_constraint")

# Parameter count of the standard pix2pix U-Net generator (3->3 channels,
# 64 base filters), kept as a fixed reference: this model must stay smaller.
PIX2PIX_REFERENCE_PARAM_COUNT = 54_414_019

CHECKPOINT_SCHEMA_VERSION = 1


class NonFiniteActivationError(RuntimeError):
    """A stage produced NaN/Inf activations; training state is unusable."""


class CheckpointVariantError(ValueError):
    """Checkpoint carries a different variant than the one requested."""


@dataclass
class ForwardTrace:
    """Intermediate results of one forward pass (batched NCHW tensors).

    `black_box` traces carry None for A_pred, t_pred, J_coarse and H_pred;
    `no_warp` traces carry None for H_pred only.
    """

    warped_input: torch.Tensor
    A_pred: Optional[torch.Tensor]
    t_pred: Optional[torch.Tensor]
    J_coarse: Optional[torch.Tensor]
    J_hat: torch.Tensor
    H_pred: Optional[torch.Tensor]


def homography_from_offsets(offsets: torch.Tensor) -> torch.Tensor:
    """(B, 8) offsets -> (B, 3, 3) matrices: identity plus offsets, h33 = 1."""
    b = offsets.shape[0]
    zeros = torch.zeros(b, 1, dtype=offsets.dtype, device=offsets.device)
    delta = torch.cat([offsets, zeros], dim=1).reshape(b, 3, 3)
    eye = torch.eye(3, dtype=offsets.dtype, device=offsets.device).unsqueeze(0)
    return eye + delta


def _check_finite(name: str, t: torch.Tensor) -> torch.Tensor:
    if not torch.isfinite(t).all():
        raise NonFiniteActivationError(f"non-finite activations in {name}")
    return t


class WarpingNet(nn.Module):
    """Homography regressor: conv(16), pool, conv(32), pool, fc(128), fc(8).

    Regresses from a 4x downsampled copy of the capture; the final layer is
    zero-initialized so the predicted homography starts at the identity.
    """

    def __init__(self, capture_size):
        super().__init__()
        ch, cw = capture_size
        self.conv1 = nn.Conv2d(3, 16, 3, padding=1)
        self.conv2 = nn.Conv2d(16, 32, 3, padding=1)
        dh, dw = ch // 4, cw // 4
        feat = 32 * (dh // 4) * (dw // 4)
        if feat <= 0:
            raise ValueError(f"capture size {capture_size} too small for the warp regressor")
        self.fc1 = nn.Linear(feat, 128)
        self.fc2 = nn.Linear(128, 8)
        nn.init.zeros_(self.fc2.weight)
        nn.init.zeros_(self.fc2.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        small = F.interpolate(x, scale_factor=0.25, mode="bilinear", align_corners=False)
        v = F.max_pool2d(F.relu(self.conv1(small)), 2)
        v = F.max_pool2d(F.relu(self.conv2(v)), 2)
        v = v.flatten(1)
        v = F.relu(self.fc1(v))
        return self.fc2(v)


class Backbone(nn.Module):
    """Encoder-decoder feature extractor: 64-channel map at half resolution."""

    def __init__(self):
        super().__init__()
        self.enc1 = nn.Conv2d(3, 32, 3, stride=2, padding=1)
        self.enc2 = nn.Conv2d(32, 64, 3, stride=2, padding=1)
        self.dec = nn.ConvTranspose2d(64, 64, 4, stride=2, padding=1)
        self.skip = nn.Conv2d(32, 64, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        e1 = F.relu(self.enc1(x))
        e2 = F.relu(self.enc2(e1))
        return F.relu(self.dec(e2) + self.skip(e1))


class TransmittanceHead(nn.Module):
    """Deconvolution then convolution, sigmoid output clipped to [0.01, 1]."""

    def __init__(self):
        super().__init__()
        self.up = nn.ConvTranspose2d(64, 32, 4, stride=2, padding=1)
        self.out = nn.Conv2d(32, 3, 3, padding=1)

    def forward(self, f: torch.Tensor) -> torch.Tensor:
        t = torch.sigmoid(self.out(F.relu(self.up(f))))
        return t.clamp(T_FLOOR, 1.0)


class ReflectionHead(nn.Module):
    """Two convolutions, a deconvolution, sigmoid output in [0, 1]."""

    def __init__(self):
        super().__init__()
        self.conv1 = nn.Conv2d(64, 32, 3, padding=1)
        self.conv2 = nn.Conv2d(32, 32, 3, padding=1)
        self.up = nn.ConvTranspose2d(32, 3, 4, stride=2, padding=1)

    def forward(self, f: torch.Tensor) -> torch.Tensor:
        a = F.relu(self.conv1(f))
        a = F.relu(self.conv2(a))
        return torch.sigmoid(self.up(a))


class RefineNet(nn.Module):
    """Residual detail restoration with a global skip connection.

    The last layer is zero-initialized, so the stage is the identity at
    the start of training.
    """

    def __init__(self):
        super().__init__()
        self.conv1 = nn.Conv2d(3, 32, 3, padding=1)
        self.conv2 = nn.Conv2d(32, 32, 3, padding=1)
        self.conv3 = nn.Conv2d(32, 3, 3, padding=1)
        nn.init.zeros_(self.conv3.weight)
        nn.init.zeros_(self.conv3.bias)

    def forward(self, j_coarse: torch.Tensor) -> torch.Tensor:
        r = F.relu(self.conv1(j_coarse))
        r = F.relu(self.conv2(r))
        return (j_coarse + self.conv3(r)).clamp(0.0, 1.0)


class DirectHead(nn.Module):
    """Direct 3-channel prediction from the backbone feature map."""

    def __init__(self):
        super().__init__()
        self.out = nn.Conv2d(64, 3, 3, padding=1)

    def forward(self, f: torch.Tensor, out_size) -> torch.Tensor:
        f = F.interpolate(f, size=out_size, mode="bilinear", align_corners=False)
        return torch.sigmoid(self.out(f))


class AttackModel(nn.Module):
    """Composed inverse model for one variant at fixed frame sizes."""

    def __init__(self, variant: str, capture_size, content_size):
        super().__init__()
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
        ch, cw = content_size
        if ch % 4 or cw % 4:
            raise ValueError(f"content size must be divisible by 4, got {content_size}")
        self.variant = variant
        self.capture_size = tuple(capture_size)
        self.content_size = tuple(content_size)

        self.warping_net = WarpingNet(capture_size) if variant not in ("no_warp", "black_box") else None
        self.backbone = Backbone()
        if variant == "black_box":
            self.t_head = None
            self.a_head = None
            self.refine_net = None
            self.direct_head = DirectHead()
        else:
            self.t_head = TransmittanceHead()
            self.a_head = ReflectionHead()
            self.refine_net = RefineNet() if variant != "no_refine" else None
            self.direct_head = None

    def forward(self, captures: torch.Tensor) -> ForwardTrace:
        if tuple(captures.shape[-2:]) != self.capture_size:
            raise ValueError(
                f"capture size {tuple(captures.shape[-2:])} does not match model {self.capture_size}")
        if self.warping_net is not None:
            offsets = _check_finite("warping_net", self.warping_net(captures))
            h_pred = homography_from_offsets(offsets)
            warped = warp_tensor(captures, h_pred, self.content_size)
        else:
            h_pred = None
            warped = F.interpolate(captures, size=self.content_size, mode="bilinear",
                                   align_corners=False)
        _check_finite("warp", warped)

        feat = _check_finite("backbone", self.backbone(warped))
        if self.variant == "black_box":
            j_hat = _check_finite("direct_head", self.direct_head(feat, self.content_size))
            return ForwardTrace(warped_input=warped, A_pred=None, t_pred=None,
                                J_coarse=None, J_hat=j_hat, H_pred=None)

        t_pred = _check_finite("t_head", self.t_head(feat))
        a_pred = _check_finite("a_head", self.a_head(feat))
        j_coarse = dehaze_inverse(warped, a_pred, t_pred)
        if self.refine_net is not None:
            j_hat = _check_finite("refine_net", self.refine_net(j_coarse))
        else:
            j_hat = j_coarse
        return ForwardTrace(warped_input=warped, A_pred=a_pred, t_pred=t_pred,
                            J_coarse=j_coarse, J_hat=j_hat, H_pred=h_pred)

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())


def save_checkpoint(path, model: AttackModel, optimizer_state=None, iteration: int = 0,
                    config_hash: str = "") -> None:
    """Persist weights with variant, frame sizes, optimizer state and step."""
    torch.save({
        "schema_version": CHECKPOINT_SCHEMA_VERSION,
        "variant": model.variant,
        "capture_size": list(model.capture_size),
        "content_size": list(model.content_size),
        "state_dict": model.state_dict(),
        "optimizer_state": optimizer_state,
        "iteration": int(iteration),
        "config_hash": config_hash,
    }, path)


def load_checkpoint(path, expected_variant: str | None = None):
    """Load a checkpoint archive; returns (model, payload dict).

    Raises CheckpointVariantError when `expected_variant` disagrees with
    the stored tag.
    """
    payload = torch.load(path, map_location="cpu", weights_only=False)
    version = payload.get("schema_version")
    if version != CHECKPOINT_SCHEMA_VERSION:
        raise ValueError(f"unsupported checkpoint schema version {version}")
    variant = payload["variant"]
    if expected_variant is not None and variant != expected_variant:
        raise CheckpointVariantError(
            f"checkpoint variant {variant!r} does not match requested {expected_variant!r}")
    model = AttackModel(variant, tuple(payload["capture_size"]), tuple(payload["content_size"]))
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, payload
