"""Image quality metrics and the gaussianization diagnostics.

SSIM uses uniform (not Gaussian) sliding windows; the reduced multi-scale
variant multiplies per-scale contrast-structure terms and applies luminance
only at the coarsest scale (2 scales fit a side of 32 with window 8). PSNR
of identical images returns the 99 dB cap instead of infinity. The chi^2
CDF is computed from scratch via the regularized lower incomplete gamma
(series / continued fraction), so the statistics need no external library.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .degrade import bicubic_downsample
from .flow import FlowModel, flow_eval
from .generator import GeneratorBundle, mapping_eval
from .seeds import derive_seed

PSNR_CAP = 99.0
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2

# asymptotic Kolmogorov critical coefficients c(alpha): D_crit = c / sqrt(n)
KS_COEFFS = {0.10: 1.22385, 0.05: 1.35810, 0.01: 1.62762}


def _check_pair(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """10 log10(1 / MSE) for [0,1] images, capped at 99 dB for exact matches."""
    a, b = _check_pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, max(0.0, 10.0 * math.log10(1.0 / mse)))


def _window_stats(img: np.ndarray, window: int):
    """Means and window sums over all sliding windows via integral images."""
    pad = np.zeros((img.shape[0] + 1, img.shape[1] + 1))
    pad[1:, 1:] = np.cumsum(np.cumsum(img, axis=0), axis=1)
    s = (pad[window:, window:] - pad[:-window, window:]
         - pad[window:, :-window] + pad[:-window, :-window])
    return s / (window * window)


def _ssim_maps(a: np.ndarray, b: np.ndarray, window: int):
    n = window * window
    mu_a = _window_stats(a, window)
    mu_b = _window_stats(b, window)
    mean_aa = _window_stats(a * a, window)
    mean_bb = _window_stats(b * b, window)
    mean_ab = _window_stats(a * b, window)
    var_a = mean_aa - mu_a ** 2
    var_b = mean_bb - mu_b ** 2
    cov = mean_ab - mu_a * mu_b
    lum = (2 * mu_a * mu_b + SSIM_C1) / (mu_a ** 2 + mu_b ** 2 + SSIM_C1)
    cs = (2 * cov + SSIM_C2) / (var_a + var_b + SSIM_C2)
    return lum, cs


def ssim(a: np.ndarray, b: np.ndarray, window: int = 8) -> float:
    """Mean structural similarity over uniform sliding windows."""
    a, b = _check_pair(a, b)
    if min(a.shape) < window:
        raise ValueError(f"image side {a.shape} smaller than window {window}")
    lum, cs = _ssim_maps(a, b, window)
    return float(np.mean(lum * cs))


def _halve(img: np.ndarray) -> np.ndarray:
    h, w = img.shape
    return img[: h - h % 2, : w - w % 2].reshape(h // 2, 2, w // 2, 2).mean(axis=(1, 3))


def ms_ssim(a: np.ndarray, b: np.ndarray, scales: int = 2, window: int = 8) -> float:
    """Product of per-scale contrast-structure terms, luminance at the
    coarsest scale only; each scale halves the resolution by 2x2 averaging."""
    a, b = _check_pair(a, b)
    need = window * 2 ** (scales - 1)
    if min(a.shape) < need:
        raise ValueError(
            f"side {min(a.shape)} supports at most "
            f"{int(math.log2(min(a.shape) // window)) + 1} scales with window {window} "
            f"(needs side >= {need})")
    out = 1.0
    for scale in range(scales):
        lum, cs = _ssim_maps(a, b, window)
        if scale == scales - 1:
            out *= float(np.mean(lum * cs))
        else:
            out *= float(np.mean(cs))
            a, b = _halve(a), _halve(b)
    return out


def lr_consistency(x_hat: np.ndarray, y: np.ndarray, factor: int) -> float:
    """Mean per-pixel l1 between the downscaled reconstruction and the
    observation (identical to the solver's data term at its final point)."""
    lr = bicubic_downsample(np.asarray(x_hat, dtype=np.float64), factor)
    y = np.asarray(y, dtype=np.float64)
    if lr.shape != y.shape:
        raise ValueError(f"downscaled shape {lr.shape} != observation {y.shape}")
    return float(np.mean(np.abs(lr - y)))


# -- chi-squared CDF from scratch ---------------------------------------------------


def _gamma_series(a: float, x: float) -> float:
    term = 1.0 / a
    total = term
    n = a
    for _ in range(500):
        n += 1.0
        term *= x / n
        total += term
        if abs(term) < abs(total) * 1e-16:
            break
    return total * math.exp(-x + a * math.log(x) - math.lgamma(a))


def _gamma_cf(a: float, x: float) -> float:
    tiny = 1e-300
    b = x + 1.0 - a
    c = 1.0 / tiny
    d = 1.0 / b
    h = d
    for i in range(1, 500):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        if abs(d) < tiny:
            d = tiny
        c = b + an / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-16:
            break
    return h * math.exp(-x + a * math.log(x) - math.lgamma(a))


def gammainc_lower(a: float, x: float) -> float:
    """Regularized lower incomplete gamma P(a, x)."""
    if a <= 0:
        raise ValueError("shape parameter must be positive")
    if x < 0:
        raise ValueError("argument must be nonnegative")
    if x == 0:
        return 0.0
    if x < a + 1.0:
        return _gamma_series(a, x)
    return 1.0 - _gamma_cf(a, x)


def chi2_cdf(x, dof: int):
    """CDF of the chi-squared distribution with dof degrees of freedom."""
    arr = np.asarray(x, dtype=np.float64)
    flat = [gammainc_lower(dof / 2.0, max(v, 0.0) / 2.0) for v in arr.ravel()]
    out = np.asarray(flat).reshape(arr.shape)
    return float(out) if np.ndim(x) == 0 else out


def ks_statistic(samples: np.ndarray, cdf) -> float:
    """One-sample Kolmogorov-Smirnov statistic against a callable CDF."""
    s = np.sort(np.asarray(samples, dtype=np.float64))
    n = len(s)
    f = np.asarray([cdf(v) for v in s])
    upper = np.max(np.arange(1, n + 1) / n - f)
    lower = np.max(f - np.arange(0, n) / n)
    return float(max(upper, lower))


def ks_critical(n: int, alpha: float = 0.01) -> float:
    if alpha not in KS_COEFFS:
        raise ValueError(f"alpha must be one of {sorted(KS_COEFFS)}")
    return KS_COEFFS[alpha] / math.sqrt(n)


# -- gaussianization diagnostics -------------------------------------------------------


@dataclass
class GaussianizationReport:
    dim: int
    sample_count: int
    mean_sq_norm: float          # of the gaussianized styles
    var_sq_norm: float
    mean_sq_norm_raw: float      # of the raw styles
    ks_stat_flowed: float
    ks_stat_raw: float
    ks_threshold: float
    flowed_passes: bool
    raw_fails: bool

    @property
    def passed(self) -> bool:
        return self.flowed_passes and self.raw_fails


def gaussianization_report(flow: FlowModel, gen: GeneratorBundle,
                           sample_count: int = 5000, seed: int = 0,
                           alpha: float = 0.01) -> GaussianizationReport:
    """Squared-norm diagnostics of the gaussianized style distribution.

    Draws fresh Gaussian latents, maps them to styles, and compares the
    squared norms of the gaussianized and raw styles against chi^2_d by a
    KS test: a healthy flow passes while the raw styles fail.
    """
    if sample_count < 1000:
        raise ValueError("need at least 1000 samples for stable statistics")
    rng = np.random.default_rng(derive_seed(seed, "gaussianization-report"))
    z = rng.standard_normal((sample_count, gen.latent_dim)).astype(np.float32)
    w = mapping_eval(gen, z)
    flowed, _ = flow_eval(flow, w)
    sq_flowed = np.sum(flowed.astype(np.float64) ** 2, axis=1)
    sq_raw = np.sum(w.astype(np.float64) ** 2, axis=1)
    d = gen.latent_dim
    cdf = lambda v: gammainc_lower(d / 2.0, max(v, 0.0) / 2.0)
    ks_flowed = ks_statistic(sq_flowed, cdf)
    ks_raw = ks_statistic(sq_raw, cdf)
    threshold = ks_critical(sample_count, alpha)
    return GaussianizationReport(
        dim=d, sample_count=sample_count,
        mean_sq_norm=float(np.mean(sq_flowed)),
        var_sq_norm=float(np.var(sq_flowed)),
        mean_sq_norm_raw=float(np.mean(sq_raw)),
        ks_stat_flowed=ks_flowed, ks_stat_raw=ks_raw, ks_threshold=threshold,
        flowed_passes=ks_flowed < threshold, raw_fails=ks_raw >= threshold)


@dataclass
class MetricsRecord:
    psnr: float
    ssim: float
    ms_ssim: float
    lr_consistency_l1: float
    density_score: float
    norm_stat: float
