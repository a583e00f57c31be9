"""Image quality metrics: PSNR, RMSE, SSIM, and the reconstruction loss.

All metrics operate on [0, 1] float images (H x W x 3, numpy or torch)
and agree between training and evaluation because nothing is quantized.
Numpy inputs return plain floats; torch inputs return scalar tensors and
keep the autograd graph, so `ssim` and `recon_loss` double as loss terms.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .imaging import require_image

__all__ = ["MetricsTriple", "psnr", "rmse", "ssim", "recon_loss", "recon_loss_nchw",
           "compute_triple", "PSNR_CAP_DB", "SSIM_WINDOW", "SSIM_SIGMA"]

# Identical images are reported at this cap instead of infinity.
PSNR_CAP_DB = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
_SSIM_C1 = 0.01 ** 2
_SSIM_C2 = 0.03 ** 2


@dataclass(frozen=True)
class MetricsTriple:
    psnr: float
    rmse: float
    ssim: float

    def as_dict(self) -> dict:
        return {"psnr": self.psnr, "rmse": self.rmse, "ssim": self.ssim}


def _pair(x, y, name):
    require_image(x, f"{name} first argument")
    require_image(y, f"{name} second argument")
    if tuple(x.shape) != tuple(y.shape):
        raise ValueError(f"{name}: shape mismatch {tuple(x.shape)} vs {tuple(y.shape)}")
    tensor_in = isinstance(x, torch.Tensor) or isinstance(y, torch.Tensor)
    if not isinstance(x, torch.Tensor):
        x = torch.from_numpy(np.asarray(x, dtype=np.float64))
    if not isinstance(y, torch.Tensor):
        y = torch.from_numpy(np.asarray(y, dtype=np.float64))
    if x.dtype != y.dtype:
        y = y.to(x.dtype)
    return x, y, tensor_in


def psnr(x, y) -> float:
    """Peak signal-to-noise ratio in dB for peak value 1, capped at 99 dB."""
    xt, yt, _ = _pair(x, y, "psnr")
    mse = float(((xt - yt) ** 2).mean())
    if mse < 1e-10:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, -10.0 * math.log10(mse))


def rmse(x, y) -> float:
    """Root mean squared error over all pixels and channels."""
    xt, yt, _ = _pair(x, y, "rmse")
    return float(((xt - yt) ** 2).mean().sqrt())


def _gaussian_1d(dtype, device):
    half = (SSIM_WINDOW - 1) // 2
    xs = torch.arange(-half, half + 1, dtype=dtype, device=device)
    g = torch.exp(-0.5 * (xs / SSIM_SIGMA) ** 2)
    return g / g.sum()


def _window_filter(stack: torch.Tensor, c: int) -> torch.Tensor:
    # The Gaussian window is an outer product, so the 2D filtering runs as
    # two 1D passes; all five SSIM statistics share one batched call.
    g = _gaussian_1d(stack.dtype, stack.device)
    wx = g.reshape(1, 1, 1, SSIM_WINDOW).expand(c, 1, 1, SSIM_WINDOW)
    wy = g.reshape(1, 1, SSIM_WINDOW, 1).expand(c, 1, SSIM_WINDOW, 1)
    return F.conv2d(F.conv2d(stack, wx, groups=c), wy, groups=c)


def ssim(x, y):
    """Mean structural similarity with an 11x11 Gaussian window, sigma 1.5.

    Computed per channel over valid window positions and averaged. Returns
    a float for numpy inputs, a differentiable scalar tensor for torch.
    """
    xt, yt, tensor_in = _pair(x, y, "ssim")
    h, w = xt.shape[0], xt.shape[1]
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise ValueError(f"ssim needs images at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}")
    val = _ssim_chw(xt.permute(2, 0, 1).unsqueeze(0), yt.permute(2, 0, 1).unsqueeze(0))
    return val if tensor_in else float(val)


def _ssim_chw(x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    b, c = x.shape[0], x.shape[1]
    stack = torch.cat([x, y, x * x, y * y, x * y], dim=0)
    filtered = _window_filter(stack, c)
    mu_x, mu_y, e_xx, e_yy, e_xy = filtered.split(b, dim=0)
    mu_xx = mu_x * mu_x
    mu_yy = mu_y * mu_y
    mu_xy = mu_x * mu_y
    var_x = e_xx - mu_xx
    var_y = e_yy - mu_yy
    cov = e_xy - mu_xy

    num = (2 * mu_xy + _SSIM_C1) * (2 * cov + _SSIM_C2)
    den = (mu_xx + mu_yy + _SSIM_C1) * (var_x + var_y + _SSIM_C2)
    return (num / den).mean()


def recon_loss(target, prediction):
    """Reconstruction objective: mean absolute difference plus 1 - SSIM.

    Zero iff the images are identical; the SSIM term supplies structural
    gradients that the pixel term alone lacks.
    """
    xt, yt, tensor_in = _pair(target, prediction, "recon_loss")
    val = (xt - yt).abs().mean() + 1.0 - _ssim_chw(
        xt.permute(2, 0, 1).unsqueeze(0), yt.permute(2, 0, 1).unsqueeze(0))
    return val if tensor_in else float(val)


def recon_loss_nchw(target: torch.Tensor, prediction: torch.Tensor) -> torch.Tensor:
    """Batched reconstruction loss over (B, C, H, W) tensors.

    Equals the mean of per-image `recon_loss` values exactly: both the
    absolute term and the SSIM window population are uniform across the
    batch.
    """
    if target.shape != prediction.shape:
        raise ValueError(f"shape mismatch {tuple(target.shape)} vs {tuple(prediction.shape)}")
    if target.shape[-2] < SSIM_WINDOW or target.shape[-1] < SSIM_WINDOW:
        raise ValueError(f"recon loss needs frames at least {SSIM_WINDOW} px per side")
    return (target - prediction).abs().mean() + 1.0 - _ssim_chw(target, prediction)


def compute_triple(x, y) -> MetricsTriple:
    """All three metrics for a prediction/reference pair."""
    return MetricsTriple(psnr=psnr(x, y), rmse=rmse(x, y), ssim=float(ssim(x, y)))
