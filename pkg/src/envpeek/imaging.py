"""Image formation for camera captures of sealed envelopes.

The capture model: the hidden content radiance J is blurred by light
spreading between the page and the envelope face, attenuated by the
envelope's per-pixel transmittance, scaled by the environment light L,
warped into the camera frame by a homography, and summed with the
surface-reflected radiance of the envelope front face. Gaussian sensor
noise attaches to the blurred transmitted radiance, Poisson shot noise
to the final composed capture:

    I = clip( warp( clip(L * (J (*) h) * t + n_gauss) , H ) + k_A * A ) |> poisson |> clip

All images are H x W x 3 arrays of radiance in [0, 1]. Every operation
accepts either numpy arrays or torch tensors and returns the same kind;
the torch path is differentiable, which the learned inverse model relies
on for `warp_image` and `dehaze_inverse`.

Homographies act on normalized coordinates: pixel (row i, col j) of an
H x W frame maps to (x, y) = (2j/(W-1) - 1, 2i/(H-1) - 1). This makes a
3x3 matrix meaningful between frames of different sizes (the identity is
then a plain resize) and is the convention the warp regressor predicts in.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

__all__ = [
    "ImagePlane",
    "DegenerateHomographyError",
    "Homography",
    "pixel_translation",
    "BlurSpec",
    "NoiseSpec",
    "EnvelopeParams",
    "warp_image",
    "warp_tensor",
    "apply_blur",
    "simulate_capture",
    "dehaze_inverse",
    "gaussian_kernel1d",
    "load_image",
    "save_image",
    "envelope_to_config",
    "envelope_from_config",
]

# Public image type: H x W x 3 float array, radiance in [0, 1].
ImagePlane = np.ndarray

MIN_SIDE = 8
# Transmittance floor: envelopes are never fully opaque, and the dehazing
# division must stay bounded.
T_FLOOR = 0.01


class DegenerateHomographyError(ValueError):
    """Raised when a homography is singular or numerically non-invertible."""


def require_image(img, name: str = "image", min_side: int = MIN_SIDE):
    """Validate an H x W x 3 image (numpy or torch) and return it unchanged."""
    shape = tuple(img.shape)
    if len(shape) != 3 or shape[2] != 3:
        raise ValueError(f"{name}: expected H x W x 3 array, got shape {shape}")
    if shape[0] < min_side or shape[1] < min_side:
        raise ValueError(f"{name}: sides must be >= {min_side}, got {shape[:2]}")
    if isinstance(img, torch.Tensor):
        if not torch.isfinite(img).all():
            raise ValueError(f"{name}: contains non-finite values")
    else:
        if not np.isfinite(img).all():
            raise ValueError(f"{name}: contains non-finite values")
    return img


def _to_chw(img):
    """(H, W, 3) numpy/torch -> (1, 3, H, W) torch, plus a restore flag."""
    if isinstance(img, torch.Tensor):
        return img.permute(2, 0, 1).unsqueeze(0), False
    t = torch.from_numpy(np.ascontiguousarray(img))
    return t.permute(2, 0, 1).unsqueeze(0), True


def _from_chw(t, to_numpy: bool):
    img = t.squeeze(0).permute(1, 2, 0)
    if to_numpy:
        return img.contiguous().numpy()
    return img


# ---------------------------------------------------------------------------
# Homography
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Homography:
    """3x3 projective transform on normalized coordinates, h33 fixed to 1."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.shape != (3, 3):
            raise ValueError(f"homography matrix must be 3x3, got {m.shape}")
        if not np.isfinite(m).all():
            raise DegenerateHomographyError("homography contains non-finite entries")
        if abs(m[2, 2]) < 1e-12:
            raise DegenerateHomographyError("homography h33 is zero; cannot normalize")
        m = m / m[2, 2]
        if abs(np.linalg.det(m)) <= 1e-8:
            raise DegenerateHomographyError("homography is singular (|det| <= 1e-8)")
        object.__setattr__(self, "matrix", m)

    @classmethod
    def identity(cls) -> "Homography":
        return cls(np.eye(3))

    @classmethod
    def from_params(cls, offsets) -> "Homography":
        """Build from 8 free parameters added to the identity, h33 = 1."""
        p = np.asarray(offsets, dtype=np.float64).reshape(8)
        m = np.eye(3)
        m.flat[:8] += p
        return cls(m)

    @classmethod
    def from_points(cls, src, dst) -> "Homography":
        """Solve the homography mapping 4 source points onto 4 destinations.

        Standard direct linear solve of the 8x8 system; points are
        (x, y) pairs in normalized coordinates.
        """
        src = np.asarray(src, dtype=np.float64)
        dst = np.asarray(dst, dtype=np.float64)
        if src.shape != (4, 2) or dst.shape != (4, 2):
            raise ValueError("from_points expects four (x, y) pairs for src and dst")
        a = np.zeros((8, 8))
        b = np.zeros(8)
        for i, ((x, y), (u, v)) in enumerate(zip(src, dst)):
            a[2 * i] = [x, y, 1, 0, 0, 0, -u * x, -u * y]
            a[2 * i + 1] = [0, 0, 0, x, y, 1, -v * x, -v * y]
            b[2 * i] = u
            b[2 * i + 1] = v
        try:
            h = np.linalg.solve(a, b)
        except np.linalg.LinAlgError as exc:
            raise DegenerateHomographyError(f"degenerate point correspondence: {exc}") from exc
        m = np.append(h, 1.0).reshape(3, 3)
        return cls(m)

    @property
    def params(self) -> np.ndarray:
        """The 8 free parameters (matrix minus identity, row-major, h33 dropped)."""
        return (self.matrix - np.eye(3)).flat[:8].copy()

    def inverse(self) -> "Homography":
        return Homography(np.linalg.inv(self.matrix))

    def __matmul__(self, other: "Homography") -> "Homography":
        return Homography(self.matrix @ other.matrix)


def pixel_translation(dx: float, dy: float, size) -> Homography:
    """Homography translating by (dx, dy) pixels within an (H, W) frame."""
    h, w = size
    m = np.eye(3)
    m[0, 2] = 2.0 * dx / (w - 1)
    m[1, 2] = 2.0 * dy / (h - 1)
    return Homography(m)


# ---------------------------------------------------------------------------
# Warping
# ---------------------------------------------------------------------------

def _normalized_grid(oh: int, ow: int, dtype, device):
    ys = torch.linspace(-1.0, 1.0, oh, dtype=dtype, device=device)
    xs = torch.linspace(-1.0, 1.0, ow, dtype=dtype, device=device)
    gy, gx = torch.meshgrid(ys, xs, indexing="ij")
    ones = torch.ones_like(gx)
    return torch.stack([gx, gy, ones], dim=-1).reshape(-1, 3)


def warp_tensor(x: torch.Tensor, hmat: torch.Tensor, out_size) -> torch.Tensor:
    """Warp a (B, C, H, W) tensor by (3, 3) or (B, 3, 3) homography matrices.

    Output pixel y samples the input at H^-1 y (bilinear, zeros outside).
    Differentiable in both the image and the homography entries. Sampling
    coordinates are computed in float64 so that integer-pixel transforms
    (identity, integer translations) reproduce source pixels exactly.
    """
    if hmat.dim() == 2:
        hmat = hmat.unsqueeze(0)
    b, c, h, w = x.shape
    if hmat.shape[0] == 1 and b > 1:
        hmat = hmat.expand(b, 3, 3)
    det = torch.linalg.det(hmat.detach())
    if not torch.isfinite(hmat.detach()).all() or bool((det.abs() <= 1e-8).any()):
        raise DegenerateHomographyError("cannot warp by a singular homography")
    oh, ow = out_size
    if oh < MIN_SIDE or ow < MIN_SIDE:
        raise ValueError(f"warp output size must be >= {MIN_SIDE}x{MIN_SIDE}")

    hinv = torch.linalg.inv(hmat.to(torch.float64))
    pts = _normalized_grid(oh, ow, torch.float64, x.device)
    mapped = pts @ hinv.transpose(1, 2)
    wz = mapped[..., 2]
    wz = torch.where(wz.abs() < 1e-12, torch.full_like(wz, 1e-12), wz)
    # Normalized -> pixel coordinates of the source frame.
    xp = (mapped[..., 0] / wz + 1.0) * (w - 1) / 2.0
    yp = (mapped[..., 1] / wz + 1.0) * (h - 1) / 2.0
    # Snap coordinates that are integers up to representation error, so
    # integer-pixel transforms reproduce and zero-fill exactly. The snap is
    # straight-through: it changes the value, not the gradient, so training
    # does not stall when a pose lands exactly on the pixel grid (the
    # identity initialization always does).
    xr = torch.round(xp)
    yr = torch.round(yp)
    xp = torch.where((xp - xr).abs() < 1e-9, xp + (xr - xp).detach(), xp)
    yp = torch.where((yp - yr).abs() < 1e-9, yp + (yr - yp).detach(), yp)
    # Clamping far outside the frame keeps indices finite; those samples are
    # zero-masked below, so the dead gradient there is correct.
    xp = xp.clamp(-2.0, w + 1.0)
    yp = yp.clamp(-2.0, h + 1.0)

    x0 = torch.floor(xp)
    y0 = torch.floor(yp)
    fx = (xp - x0).to(x.dtype)
    fy = (yp - y0).to(x.dtype)
    x0i = x0.long()
    y0i = y0.long()

    flat = x.reshape(b, c, h * w)
    out = torch.zeros(b, c, oh * ow, dtype=x.dtype, device=x.device)
    for dy, dx, wgt in ((0, 0, (1 - fx) * (1 - fy)), (0, 1, fx * (1 - fy)),
                        (1, 0, (1 - fx) * fy), (1, 1, fx * fy)):
        xi = x0i + dx
        yi = y0i + dy
        inside = ((xi >= 0) & (xi < w) & (yi >= 0) & (yi < h))
        idx = (yi.clamp(0, h - 1) * w + xi.clamp(0, w - 1))
        vals = torch.gather(flat, 2, idx.unsqueeze(1).expand(b, c, oh * ow))
        out = out + (wgt * inside.to(x.dtype)).unsqueeze(1) * vals
    return out.reshape(b, c, oh, ow)


def warp_image(img, h: Homography, out_size=None):
    """Warp an H x W x 3 image by a homography, sampling with zero padding.

    `out_size` is (H, W) of the output frame; defaults to the input size.
    Accepts a `Homography` or a raw 3x3 tensor (the latter keeps gradients).
    """
    require_image(img, "warp input")
    if out_size is None:
        out_size = tuple(img.shape[:2])
    x, to_np = _to_chw(img)
    if isinstance(h, Homography):
        # Full float64 precision for the transform regardless of image dtype;
        # warp_tensor does all coordinate math in float64 anyway.
        hmat = torch.as_tensor(h.matrix, dtype=torch.float64)
    else:
        hmat = torch.as_tensor(h)
        if hmat.shape != (3, 3):
            raise ValueError("homography tensor must be 3x3")
    return _from_chw(warp_tensor(x, hmat, out_size), to_np)


# ---------------------------------------------------------------------------
# Blur
# ---------------------------------------------------------------------------

def _auto_sigma(kernel_size: int) -> float:
    # The usual size-to-sigma rule for Gaussian kernels, so sweeping only
    # the kernel size still changes the blur strength.
    return 0.3 * ((kernel_size - 1) * 0.5 - 1.0) + 0.8


@dataclass(frozen=True)
class BlurSpec:
    """Isotropic Gaussian blur, truncated at `kernel_size` and renormalized.

    `sigma=None` derives the width from the kernel size. `size_map`, when
    given, is an H x W integer array of odd per-pixel kernel sizes for
    spatially variant blur (content farther from the envelope face blurs
    with a larger kernel).
    """

    kernel_size: int
    sigma: float | None = None
    size_map: np.ndarray | None = None

    def __post_init__(self):
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError(f"kernel_size must be a positive odd integer, got {self.kernel_size}")
        if self.sigma is not None and self.sigma <= 0:
            raise ValueError(f"sigma must be > 0, got {self.sigma}")
        if self.size_map is not None:
            sizes = np.unique(np.asarray(self.size_map))
            if sizes.min() < 1 or (sizes % 2 == 0).any():
                raise ValueError("size_map entries must be positive odd integers")

    def sigma_for(self, kernel_size: int) -> float:
        return self.sigma if self.sigma is not None else _auto_sigma(kernel_size)


def gaussian_kernel1d(size: int, sigma: float, dtype=torch.float64) -> torch.Tensor:
    """Normalized 1-D Gaussian weights truncated to `size` taps."""
    if size % 2 == 0:
        raise ValueError("kernel size must be odd")
    if size == 1:
        return torch.ones(1, dtype=dtype)
    half = (size - 1) // 2
    xs = torch.arange(-half, half + 1, dtype=dtype)
    k = torch.exp(-0.5 * (xs / sigma) ** 2)
    return k / k.sum()


def _blur_chw(x: torch.Tensor, size: int, sigma: float) -> torch.Tensor:
    if size == 1:
        return x
    half = (size - 1) // 2
    if half >= min(x.shape[-2], x.shape[-1]):
        raise ValueError(f"kernel size {size} too large for image {tuple(x.shape[-2:])}")
    k = gaussian_kernel1d(size, sigma, dtype=x.dtype).to(x.device)
    c = x.shape[1]
    # Separable passes; reflective padding keeps constants exactly constant.
    wx = k.reshape(1, 1, 1, size).expand(c, 1, 1, size)
    wy = k.reshape(1, 1, size, 1).expand(c, 1, size, 1)
    x = F.pad(x, (half, half, 0, 0), mode="reflect")
    x = F.conv2d(x, wx, groups=c)
    x = F.pad(x, (0, 0, half, half), mode="reflect")
    x = F.conv2d(x, wy, groups=c)
    return x


def apply_blur(img, spec: BlurSpec):
    """Blur an image with normalized Gaussian weights over each neighborhood.

    With a `size_map`, each pixel takes the blur of its own kernel size
    (one pass per distinct size, then a per-pixel select).
    """
    require_image(img, "blur input")
    x, to_np = _to_chw(img)
    if spec.size_map is None:
        out = _blur_chw(x, spec.kernel_size, spec.sigma_for(spec.kernel_size))
        return _from_chw(out, to_np)
    size_map = np.asarray(spec.size_map)
    if size_map.shape != tuple(img.shape[:2]):
        raise ValueError(f"size_map shape {size_map.shape} != image spatial shape {tuple(img.shape[:2])}")
    out = torch.zeros_like(x)
    for size in np.unique(size_map):
        mask = torch.from_numpy((size_map == size).astype(np.float64)).to(x.dtype)
        out = out + mask * _blur_chw(x, int(size), spec.sigma_for(int(size)))
    return _from_chw(out, to_np)


# ---------------------------------------------------------------------------
# Noise and envelope parameters
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class NoiseSpec:
    """Sensor noise: additive Gaussian on the transmitted radiance, Poisson
    shot noise on the composed capture. Both strengths zero => deterministic
    output irrespective of the seed."""

    gaussian_sigma: float = 0.0
    poisson_scale: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.gaussian_sigma < 0 or self.poisson_scale < 0:
            raise ValueError("noise strengths must be >= 0")


@dataclass(frozen=True)
class EnvelopeParams:
    """The controllable optical parameters of a simulated envelope.

    `t_base` is the unit transmittance texture in the content frame (same
    size as the hidden content); `A_base` the unit surface-reflection
    texture in the capture frame (its size defines the capture size).
    `k_t` and `k_A` scale their strengths; `L` is the environment light
    behind the content; `H` maps content coordinates into the capture.
    """

    L: float
    H: Homography
    blur: BlurSpec
    k_t: float
    k_A: float
    t_base: np.ndarray
    A_base: np.ndarray
    noise: NoiseSpec = field(default_factory=NoiseSpec)

    def __post_init__(self):
        if self.L <= 0:
            raise ValueError(f"L must be > 0, got {self.L}")
        if not 0.0 < self.k_t <= 1.0:
            raise ValueError(f"k_t must be in (0, 1], got {self.k_t}")
        if not 0.0 <= self.k_A <= 1.0:
            raise ValueError(f"k_A must be in [0, 1], got {self.k_A}")
        require_image(self.t_base, "t_base")
        require_image(self.A_base, "A_base")

    @property
    def capture_size(self):
        return tuple(self.A_base.shape[:2])

    @property
    def content_size(self):
        return tuple(self.t_base.shape[:2])


def simulate_capture(J, env: EnvelopeParams):
    """Render the camera-captured envelope front face for hidden content J.

    Pipeline order: transmit-blur, Gaussian noise, clip, homography warp
    into the capture frame, add surface reflection, Poisson noise, clip.
    The output size is the capture frame, i.e. `A_base`'s size; `t_base`
    must match J. Deterministic for a fixed `env.noise.seed`.
    """
    require_image(J, "J")
    if tuple(env.t_base.shape) != tuple(J.shape):
        raise ValueError(
            f"t_base shape {tuple(env.t_base.shape)} does not match content {tuple(J.shape)}")
    x, to_np = _to_chw(J)
    dtype = x.dtype
    t_base, _ = _to_chw(env.t_base)
    a_base, _ = _to_chw(env.A_base)
    t_base = t_base.to(dtype)
    a_base = a_base.to(dtype)

    gen = torch.Generator().manual_seed(int(env.noise.seed))

    t_eff = (env.k_t * t_base).clamp(T_FLOOR, 1.0)
    x = env.L * _blur_apply_chw(x, env.blur) * t_eff
    if env.noise.gaussian_sigma > 0:
        x = x + env.noise.gaussian_sigma * torch.randn(x.shape, generator=gen, dtype=dtype)
    x = x.clamp(0.0, 1.0)

    hmat = torch.as_tensor(env.H.matrix, dtype=torch.float64)
    x = warp_tensor(x, hmat, env.capture_size)
    x = x + env.k_A * a_base
    if env.noise.poisson_scale > 0:
        scale = env.noise.poisson_scale
        x = torch.poisson(x.clamp(min=0.0) * scale, generator=gen) / scale
    x = x.clamp(0.0, 1.0)
    return _from_chw(x, to_np)


def _blur_apply_chw(x: torch.Tensor, spec: BlurSpec) -> torch.Tensor:
    if spec.size_map is None:
        return _blur_chw(x, spec.kernel_size, spec.sigma_for(spec.kernel_size))
    out = torch.zeros_like(x)
    size_map = np.asarray(spec.size_map)
    for size in np.unique(size_map):
        mask = torch.from_numpy((size_map == size).astype(np.float64)).to(x.dtype)
        out = out + mask * _blur_chw(x, int(size), spec.sigma_for(int(size)))
    return out


def dehaze_inverse(I_warped, A, t):
    """Recover the blurred transmitted radiance: (I - A) / t, clipped to [0, 1].

    `t` is clamped to [0.01, 1] so the division stays bounded even on
    unclamped inputs. Differentiable in all three arguments.
    """
    if isinstance(I_warped, torch.Tensor) or isinstance(A, torch.Tensor) or isinstance(t, torch.Tensor):
        i_t = I_warped if isinstance(I_warped, torch.Tensor) else torch.as_tensor(I_warped)
        a_t = A if isinstance(A, torch.Tensor) else torch.as_tensor(A, dtype=i_t.dtype)
        t_t = t if isinstance(t, torch.Tensor) else torch.as_tensor(t, dtype=i_t.dtype)
        return ((i_t - a_t) / t_t.clamp(T_FLOOR, 1.0)).clamp(0.0, 1.0)
    t_c = np.clip(t, T_FLOOR, 1.0)
    return np.clip((I_warped - A) / t_c, 0.0, 1.0)


# ---------------------------------------------------------------------------
# PNG I/O and envelope config documents
# ---------------------------------------------------------------------------

def load_image(path) -> np.ndarray:
    """Read an 8-bit RGB PNG into an H x W x 3 float32 array in [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    return arr / 255.0


def save_image(path, img) -> None:
    """Write a [0, 1] image as 8-bit RGB PNG (round to nearest level, clamp)."""
    require_image(img, "image to save")
    if isinstance(img, torch.Tensor):
        img = img.detach().cpu().numpy()
    data = np.clip(np.round(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(data, mode="RGB").save(path, format="PNG")


def envelope_to_config(env: EnvelopeParams) -> dict:
    """Flatten the scalar envelope parameters into a key-value document.

    Textures are not embedded; they are regenerated from their own spec or
    stored alongside as PNGs by the dataset builder.
    """
    return {
        "L": env.L,
        "homography": [float(v) for v in env.H.matrix.flat[:8]],
        "blur.kernel_size": env.blur.kernel_size,
        "blur.sigma": env.blur.sigma_for(env.blur.kernel_size),
        "k_t": env.k_t,
        "k_A": env.k_A,
        "noise.gaussian_sigma": env.noise.gaussian_sigma,
        "noise.poisson_scale": env.noise.poisson_scale,
        "seed": env.noise.seed,
    }


def envelope_from_config(cfg: dict, t_base: np.ndarray, A_base: np.ndarray) -> EnvelopeParams:
    """Rebuild EnvelopeParams from a flat config document plus textures."""
    hvals = list(cfg["homography"]) + [1.0]
    h = Homography(np.asarray(hvals, dtype=np.float64).reshape(3, 3))
    return EnvelopeParams(
        L=float(cfg["L"]),
        H=h,
        blur=BlurSpec(kernel_size=int(cfg["blur.kernel_size"]), sigma=float(cfg["blur.sigma"])),
        k_t=float(cfg["k_t"]),
        k_A=float(cfg["k_A"]),
        t_base=t_base,
        A_base=A_base,
        noise=NoiseSpec(
            gaussian_sigma=float(cfg["noise.gaussian_sigma"]),
            poisson_scale=float(cfg["noise.poisson_scale"]),
            seed=int(cfg["seed"]),
        ),
    )
