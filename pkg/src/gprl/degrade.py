"""The forward downscaling operator and the robustness corruptions.

Downscaling is separable Catmull-Rom bicubic (a = -0.5) with the kernel
stretched by the factor (antialiased resize), align-centers coordinates and
mirror padding, realized as a precomputed linear map so its gradient is the
transpose map. Corruptions are input preparation only and never sit on the
differentiable path; the solver's data term always uses the plain bicubic
operator regardless of how the observation was actually produced.

Corruption specs are small strings: gauss:SIGMA, sp:FRACTION, blur:SIGMA,
motion:LENGTH (length quoted at the 1024-pixel reference scale), or none.
"""

from __future__ import annotations

import functools

import numpy as np

from .errors import ConfigError
from .seeds import derive_seed
from .tensor import Tensor, linear2d

CATMULL_ROM_A = -0.5
REFERENCE_SIDE = 1024  # motion-blur lengths are quoted at this scale


def _catmull_rom(s: np.ndarray) -> np.ndarray:
    """Cubic convolution kernel with a = -0.5 (partition of unity)."""
    s = np.abs(s)
    a = CATMULL_ROM_A
    out = np.where(
        s <= 1.0,
        (a + 2.0) * s ** 3 - (a + 3.0) * s ** 2 + 1.0,
        np.where(s < 2.0, a * s ** 3 - 5.0 * a * s ** 2 + 8.0 * a * s - 4.0 * a, 0.0))
    return out


def _mirror(j: np.ndarray, n: int) -> np.ndarray:
    """Mirror indices without edge repeat: -1 -> 1, n -> n-2."""
    period = 2 * (n - 1) if n > 1 else 1
    j = np.abs(j) % period
    return np.where(j >= n, period - j, j)


@functools.lru_cache(maxsize=32)
def resample_matrix(n: int, factor: int) -> np.ndarray:
    """[n/factor, n] bicubic downscaling matrix (rows sum to 1)."""
    if factor < 1 or n % factor:
        raise ConfigError(f"factor {factor} does not divide image side {n}")
    m = n // factor
    out = np.zeros((m, n))
    support = 2 * factor
    for row in range(m):
        center = (row + 0.5) * factor - 0.5  # align-centers input coordinate
        lo = int(np.floor(center)) - support + 1
        taps = np.arange(lo, lo + 2 * support)
        weights = _catmull_rom((taps - center) / factor)
        cols = _mirror(taps, n)
        for c, w in zip(cols, weights):
            out[row, c] += w
        out[row] /= out[row].sum()
    return out


def bicubic_matrices(side: int, factor: int) -> tuple[np.ndarray, np.ndarray]:
    m = resample_matrix(side, factor)
    return m, m


def bicubic_downsample(img, factor: int):
    """Downscale a [side, side] image; Tensor in, Tensor out (differentiable),
    ndarray in, ndarray out."""
    if isinstance(img, Tensor):
        side = img.shape[0]
        rows, cols = bicubic_matrices(side, factor)
        return linear2d(img, rows, cols)
    arr = np.asarray(img)
    rows, cols = bicubic_matrices(arr.shape[0], factor)
    return (rows.astype(arr.dtype) @ arr @ cols.T.astype(arr.dtype))


# -- corruptions ------------------------------------------------------------------


def gaussian_noise(img: np.ndarray, sigma: float, seed: int) -> np.ndarray:
    if sigma < 0:
        raise ConfigError("noise sigma must be nonnegative")
    if sigma == 0:
        return np.asarray(img, dtype=np.float32).copy()
    rng = np.random.default_rng(derive_seed(seed, "gaussian-noise"))
    out = np.asarray(img, dtype=np.float32) + rng.normal(
        0.0, sigma, size=np.shape(img)).astype(np.float32)
    return np.clip(out, 0.0, 1.0)


def salt_pepper(img: np.ndarray, fraction: float, seed: int) -> np.ndarray:
    if not 0 <= fraction <= 1:
        raise ConfigError("salt & pepper fraction must lie in [0, 1]")
    out = np.asarray(img, dtype=np.float32).copy()
    count = int(round(fraction * out.size))
    if count == 0:
        return out
    rng = np.random.default_rng(derive_seed(seed, "salt-pepper"))
    pos = rng.choice(out.size, size=count, replace=False)
    flat = out.ravel()
    half = count // 2
    flat[pos[:half]] = 0.0
    flat[pos[half:]] = 1.0
    return out


def gaussian_kernel(sigma: float) -> np.ndarray:
    if sigma <= 0:
        raise ConfigError("blur sigma must be positive")
    radius = int(np.ceil(3 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def _conv_reflect(img: np.ndarray, kr: np.ndarray, kc: np.ndarray) -> np.ndarray:
    from .tensor import _reflect_conv_matrix
    mr = _reflect_conv_matrix(img.shape[0], kr)
    mc = _reflect_conv_matrix(img.shape[1], kc)
    return (mr @ np.asarray(img, dtype=np.float64) @ mc.T).astype(np.float32)


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    k = gaussian_kernel(sigma)
    return _conv_reflect(img, k, k)


def motion_blur(img: np.ndarray, length: int) -> np.ndarray:
    """Horizontal averaging over `length` pixels."""
    side = np.shape(img)[1]
    if length < 1:
        raise ConfigError("motion length must be >= 1")
    if length > side:
        raise ConfigError(f"motion length {length} exceeds image side {side}")
    k = np.ones(length, dtype=np.float64) / length
    if length % 2 == 0:  # pad to odd support for a centered kernel
        k = np.concatenate([k, [0.0]])
    return _conv_reflect(img, np.array([1.0]), k)


# -- corruption specs and the robustness pipeline ------------------------------------


def parse_corruption_spec(spec: str) -> tuple[str, float]:
    spec = spec.strip()
    if spec in ("", "none"):
        return ("none", 0.0)
    if ":" not in spec:
        raise ConfigError(f"bad corruption spec {spec!r} (expected kind:param)")
    kind, _, raw = spec.partition(":")
    kind = kind.strip()
    if kind not in ("gauss", "sp", "blur", "motion"):
        raise ConfigError(f"unknown corruption kind {kind!r}")
    try:
        value = float(raw)
    except ValueError:
        raise ConfigError(f"bad corruption parameter {raw!r}") from None
    if value < 0:
        raise ConfigError("corruption parameter must be nonnegative")
    return kind, value


def scaled_motion_length(reference_length: float, side: int) -> int:
    """Map a 1024-scale motion length onto the working resolution."""
    return max(1, int(np.floor(reference_length * side / REFERENCE_SIDE + 0.5)))


def robustness_pipeline(img_hr: np.ndarray, spec: str, factor: int,
                        seed: int = 0) -> np.ndarray:
    """Corrupted low-resolution observation from a clean high-resolution image.

    Noise, salt & pepper and blur corrupt the downscaled image; motion blur
    runs on the high-resolution image first, then downscaling.
    """
    kind, value = parse_corruption_spec(spec)
    hr = np.asarray(img_hr, dtype=np.float32)
    if kind == "motion":
        length = scaled_motion_length(value, hr.shape[0])
        return bicubic_downsample(motion_blur(hr, length), factor)
    lr = bicubic_downsample(hr, factor)
    if kind == "none":
        return lr
    if kind == "gauss":
        return gaussian_noise(lr, value, seed)
    if kind == "sp":
        return salt_pepper(lr, value, seed)
    return gaussian_blur(lr, value)
