"""Independent brute-force reference implementations for the test suite.

Everything here is deliberately written as plain nested-loop / dense numpy
float64 code with no shared machinery from the package, so failures in
the fast paths cannot hide.
"""

import math

import numpy as np

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


def shift_oracle(img: np.ndarray, dx: int, dy: int) -> np.ndarray:
    """Integer pixel shift with zero fill, the reference for translation warps."""
    h, w, _ = img.shape
    out = np.zeros_like(img)
    for i in range(h):
        for j in range(w):
            si, sj = i - dy, j - dx
            if 0 <= si < h and 0 <= sj < w:
                out[i, j] = img[si, sj]
    return out


def gaussian_kernel2d(size: int, sigma: float) -> np.ndarray:
    half = (size - 1) // 2
    xs = np.arange(-half, half + 1, dtype=np.float64)
    g = np.exp(-0.5 * (xs / sigma) ** 2)
    k = np.outer(g, g)
    return k / k.sum()


def dense_blur_oracle(img: np.ndarray, size: int, sigma: float) -> np.ndarray:
    """Direct dense convolution with reflective (mirror) boundary handling."""
    if size == 1:
        return img.copy()
    half = (size - 1) // 2
    kernel = gaussian_kernel2d(size, sigma)
    padded = np.pad(img.astype(np.float64), ((half, half), (half, half), (0, 0)),
                    mode="reflect")
    h, w, c = img.shape
    out = np.zeros((h, w, c), dtype=np.float64)
    for i in range(h):
        for j in range(w):
            patch = padded[i:i + size, j:j + size, :]
            for ch in range(c):
                out[i, j, ch] = float((patch[:, :, ch] * kernel).sum())
    return out


def rmse_loop_oracle(x: np.ndarray, y: np.ndarray) -> float:
    total = 0.0
    count = 0
    h, w, c = x.shape
    for i in range(h):
        for j in range(w):
            for ch in range(c):
                d = float(x[i, j, ch]) - float(y[i, j, ch])
                total += d * d
                count += 1
    return math.sqrt(total / count)


def ssim_loop_oracle(x: np.ndarray, y: np.ndarray) -> float:
    """Windowed SSIM with explicit loops over valid window positions."""
    h, w, c = x.shape
    kernel = gaussian_kernel2d(SSIM_WINDOW, SSIM_SIGMA)
    vals = []
    for ch in range(c):
        for i in range(h - SSIM_WINDOW + 1):
            for j in range(w - SSIM_WINDOW + 1):
                px = x[i:i + SSIM_WINDOW, j:j + SSIM_WINDOW, ch].astype(np.float64)
                py = y[i:i + SSIM_WINDOW, j:j + SSIM_WINDOW, ch].astype(np.float64)
                mx = float((px * kernel).sum())
                my = float((py * kernel).sum())
                vx = float((px * px * kernel).sum()) - mx * mx
                vy = float((py * py * kernel).sum()) - my * my
                cov = float((px * py * kernel).sum()) - mx * my
                num = (2 * mx * my + SSIM_C1) * (2 * cov + SSIM_C2)
                den = (mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2)
                vals.append(num / den)
    return float(np.mean(vals))


def recon_loss_oracle(target: np.ndarray, pred: np.ndarray) -> float:
    h, w, c = target.shape
    total = 0.0
    for i in range(h):
        for j in range(w):
            for ch in range(c):
                total += abs(float(target[i, j, ch]) - float(pred[i, j, ch]))
    return total / (h * w * c) + 1.0 - ssim_loop_oracle(target, pred)


def total_loss_oracle(target, j_hat, j_coarse, a_pred, warped, weights) -> float:
    """Scalar-loop version of the training objective on single images."""
    recon = recon_loss_oracle(target, j_hat)
    h, w, c = target.shape
    j_term = 0.0
    a_term = 0.0
    for i in range(h):
        for j in range(w):
            for ch in range(c):
                dj = float(target[i, j, ch]) - float(j_coarse[i, j, ch])
                da = float(a_pred[i, j, ch]) - float(warped[i, j, ch])
                j_term += dj * dj
                a_term += da * da
    n = h * w * c
    return weights[0] * recon + weights[1] * j_term / n + weights[2] * a_term / n
