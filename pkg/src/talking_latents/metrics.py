"""PSNR, SSIM, mouth landmark distance, FID and an inference throughput benchmark.

Image metrics take float frames ``(H, W, 3)`` (or ``(H, W)``) in ``[0, 1]``.
Pipeline outputs in ``[-1, 1]`` are mapped with ``(x + 1) / 2`` first.
"""

from __future__ import annotations

import math
import time
import warnings
from dataclasses import dataclass

import numpy as np
import torch

from .errors import DimensionError, NumericalError

LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])


def _pair(x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise DimensionError(f"image shapes differ: {x.shape} vs {y.shape}")
    return x, y


def psnr(x, y, max_val: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; ``inf`` when the images are identical."""
    x, y = _pair(x, y)
    if max_val <= 0:
        raise ValueError("max_val must be positive")
    mse = np.mean((x - y) ** 2)
    if mse == 0.0:
        return math.inf
    return float(10.0 * np.log10(max_val**2 / mse))


def to_luma(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3 and img.shape[-1] == 3:
        return img @ LUMA_WEIGHTS
    if img.ndim == 2:
        return img
    raise DimensionError(f"expected (H, W) or (H, W, 3) image, got {img.shape}")


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(ax**2) / (2.0 * sigma**2))
    g /= g.sum()
    return np.outer(g, g)


def _filter_valid(img: np.ndarray, window: np.ndarray) -> np.ndarray:
    patches = np.lib.stride_tricks.sliding_window_view(img, window.shape)
    return np.einsum("ijkl,kl->ij", patches, window)


def ssim(
    x,
    y,
    data_range: float = 1.0,
    window_size: int = 11,
    sigma: float = 1.5,
    k1: float = 0.01,
    k2: float = 0.03,
    return_cs: bool = False,
):
    """Mean SSIM over all fully-covered 11x11 Gaussian windows of the luma channel.

    With ``return_cs`` also returns the mean contrast-structure term (the SSIM
    map without its luminance factor).
    """
    x, y = _pair(x, y)
    x, y = to_luma(x), to_luma(y)
    if min(x.shape) < window_size:
        raise DimensionError(f"image {x.shape} is smaller than the {window_size}x{window_size} window")
    win = gaussian_window(window_size, sigma)
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    mu_x = _filter_valid(x, win)
    mu_y = _filter_valid(y, win)
    var_x = _filter_valid(x * x, win) - mu_x * mu_x
    var_y = _filter_valid(y * y, win) - mu_y * mu_y
    cov = _filter_valid(x * y, win) - mu_x * mu_y
    luminance = (2.0 * mu_x * mu_y + c1) / (mu_x * mu_x + mu_y * mu_y + c1)
    cs = (2.0 * cov + c2) / (var_x + var_y + c2)
    value = float(np.mean(luminance * cs))
    if return_cs:
        return value, float(np.mean(cs))
    return value


def lmd(gt, gen) -> float:
    """Mean Euclidean distance over frames and mouth points; inputs ``(T, M, 2)``."""
    gt = np.asarray(gt, dtype=np.float64)
    gen = np.asarray(gen, dtype=np.float64)
    if gt.ndim != 3 or gt.shape[-1] != 2:
        raise DimensionError(f"landmarks must be (T, M, 2), got {gt.shape}")
    if gt.shape != gen.shape:
        raise DimensionError(f"landmark counts differ: {gt.shape} vs {gen.shape}")
    return float(np.mean(np.linalg.norm(gt - gen, axis=-1)))


@dataclass(frozen=True)
class GaussianStats:
    mu: np.ndarray
    sigma: np.ndarray
    n: int = 0

    def __post_init__(self):
        mu = np.atleast_1d(np.asarray(self.mu, dtype=np.float64))
        sigma = np.atleast_2d(np.asarray(self.sigma, dtype=np.float64))
        if sigma.shape != (mu.size, mu.size):
            raise DimensionError(f"sigma shape {sigma.shape} does not match mu of size {mu.size}")
        if not np.allclose(sigma, sigma.T, atol=1e-8, rtol=0.0):
            raise NumericalError("covariance is not symmetric to 1e-8")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma", sigma)

    @property
    def dim(self) -> int:
        return self.mu.size


def _psd_sqrt(mat: np.ndarray, tol: float, what: str) -> np.ndarray:
    sym = 0.5 * (mat + mat.T)
    vals, vecs = np.linalg.eigh(sym)
    if vals.min() < -tol:
        raise NumericalError(f"{what} is not PSD: most negative eigenvalue {vals.min():.3e}")
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def fid(stats_a: GaussianStats, stats_b: GaussianStats, tol: float = 1e-6) -> float:
    """``||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2))``.

    The trace of the product's square root is taken as the trace of
    ``sqrt(S_a^(1/2) S_b S_a^(1/2))``, a symmetric PSD matrix with the same
    eigenvalues as ``S_a S_b``.
    """
    if stats_a.dim != stats_b.dim:
        raise DimensionError(f"feature dimensions differ: {stats_a.dim} vs {stats_b.dim}")
    root_a = _psd_sqrt(stats_a.sigma, tol, "covariance a")
    _psd_sqrt(stats_b.sigma, tol, "covariance b")
    middle = root_a @ stats_b.sigma @ root_a
    vals = np.linalg.eigvalsh(0.5 * (middle + middle.T))
    if vals.min() < -tol:
        raise NumericalError(f"covariance product is not PSD: most negative eigenvalue {vals.min():.3e}")
    tr_sqrt = np.sum(np.sqrt(np.clip(vals, 0.0, None)))
    diff = stats_a.mu - stats_b.mu
    value = float(diff @ diff + np.trace(stats_a.sigma) + np.trace(stats_b.sigma) - 2.0 * tr_sqrt)
    return max(value, 0.0)


def feature_stats(features: np.ndarray) -> GaussianStats:
    """Mean and (maximum-likelihood, ``1/n``) covariance of ``(n, d)`` features."""
    features = np.asarray(features, dtype=np.float64)
    n = features.shape[0]
    mu = features.mean(axis=0)
    if n < 2:
        warnings.warn("feature statistics from a single sample; covariance regularized by 1e-6 I", RuntimeWarning)
        return GaussianStats(mu, 1e-6 * np.eye(mu.size), n)
    centered = features - mu
    sigma = centered.T @ centered / n
    return GaussianStats(mu, 0.5 * (sigma + sigma.T), n)


def compute_feature_stats(frames, extractor) -> GaussianStats:
    """Pooled extractor features of ``(N, H, W, 3)`` frames in ``[-1, 1]``."""
    with torch.no_grad():
        feats = extractor(torch.as_tensor(np.asarray(frames), dtype=torch.float64)).numpy()
    return feature_stats(feats)


def frames_to_unit(frames) -> np.ndarray:
    return (np.asarray(frames, dtype=np.float64) + 1.0) / 2.0


def evaluate_clips(pred_frames, gt_frames, extractor, pred_landmarks=None, gt_landmarks=None, cfg=None) -> dict:
    """PSNR, SSIM, FID and LMD for aligned lists of ``(T, H, W, 3)`` clips in ``[-1, 1]``."""
    from .config import MetricsConfig

    cfg = cfg or MetricsConfig()
    if len(pred_frames) != len(gt_frames):
        raise DimensionError(f"{len(pred_frames)} predicted clips vs {len(gt_frames)} ground-truth clips")
    psnrs, ssims = [], []
    for p_clip, g_clip in zip(pred_frames, gt_frames):
        if len(p_clip) != len(g_clip):
            raise DimensionError(f"clip lengths differ: {len(p_clip)} vs {len(g_clip)}")
        for p, g in zip(frames_to_unit(p_clip), frames_to_unit(g_clip)):
            psnrs.append(psnr(p, g, cfg.dynamic_range))
            ssims.append(
                ssim(p, g, cfg.dynamic_range, cfg.ssim_window, cfg.ssim_sigma, cfg.ssim_k1, cfg.ssim_k2)
            )
    all_pred = np.concatenate(list(pred_frames))
    all_gt = np.concatenate(list(gt_frames))
    fid_value = fid(compute_feature_stats(all_pred, extractor), compute_feature_stats(all_gt, extractor))
    lmd_value = None
    if pred_landmarks is not None and gt_landmarks is not None:
        dists = [lmd(g, p) * len(g) for p, g in zip(pred_landmarks, gt_landmarks)]
        lmd_value = float(sum(dists) / sum(len(g) for g in gt_landmarks))
    return {
        "PSNR": float(np.mean(psnrs)),
        "SSIM": float(np.mean(ssims)),
        "FID": fid_value,
        "LMD": lmd_value,
        "n_clips": len(gt_frames),
        "n_frames": len(psnrs),
    }


def format_report(results: dict[str, dict]) -> str:
    """Text table with one row per dataset: PSNR, SSIM, FID, LMD."""
    lines = [f"{'dataset':<16}{'PSNR↑':>10}{'SSIM↑':>10}{'FID↓':>12}{'LMD↓':>10}"]
    for name, r in results.items():
        lmd_txt = "n/a" if r.get("LMD") is None else f"{r['LMD']:.4f}"
        lines.append(f"{name:<16}{r['PSNR']:>10.3f}{r['SSIM']:>10.4f}{r['FID']:>12.5f}{lmd_txt:>10}")
    return "\n".join(lines)


def bench_inference(pipeline, identity, waveform, n_frames: int | None = None, repeats: int = 1) -> dict:
    """Frames per second of end-to-end generation, with a per-stage time breakdown.

    ``pipeline`` must provide ``generate(identity, waveform, timings=dict)``.
    The first call is a warm-up and is not timed.
    """
    pipeline.generate(identity, waveform, n_frames=n_frames)
    stage_totals: dict[str, float] = {}
    frames = 0
    start = time.perf_counter()
    for _ in range(repeats):
        timings: dict[str, float] = {}
        clip = pipeline.generate(identity, waveform, n_frames=n_frames, timings=timings)
        frames += len(clip.frames)
        for k, v in timings.items():
            stage_totals[k] = stage_totals.get(k, 0.0) + v
    elapsed = time.perf_counter() - start
    return {
        "fps": frames / elapsed,
        "frames": frames,
        "seconds": elapsed,
        "stages": {k: v / repeats for k, v in stage_totals.items()},
    }
