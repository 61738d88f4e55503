"""Pixel, feature and sprite-specific metrics. All kernels are pure numpy."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import DetectionError, ShapeError
from ..sprite_world.render import detect_joints, to_pixels

PSNR_CAP = 100.0
SSIM_WINDOW = 7
SSIM_C1 = 1e-4
SSIM_C2 = 9e-4
FEATURE_LEVELS = 3
FEATURE_TILE = 8
ORIENTATION_BINS = 4
HIST_BINS = 8


def _frames(x) -> np.ndarray:
    x = np.asarray(getattr(x, "frames", x), dtype=np.float64)
    return x[None] if x.ndim == 3 else x


def psnr(a, b) -> float:
    a, b = _frames(a), _frames(b)
    if a.shape != b.shape:
        raise ShapeError(f"psnr shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse < 1e-10:
        return PSNR_CAP
    return float(10.0 * np.log10(1.0 / mse))


def ssim(a, b) -> float:
    """Mean SSIM of channel-mean grayscale frames over all valid 7x7 windows and frames."""
    a, b = _frames(a), _frames(b)
    if a.shape != b.shape:
        raise ShapeError(f"ssim shape mismatch {a.shape} vs {b.shape}")
    if min(a.shape[1:3]) < SSIM_WINDOW:
        raise ValueError(f"frames {a.shape[1:3]} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    scores = []
    for fa, fb in zip(a.mean(axis=-1), b.mean(axis=-1)):
        wa = sliding_window_view(fa, (SSIM_WINDOW, SSIM_WINDOW))
        wb = sliding_window_view(fb, (SSIM_WINDOW, SSIM_WINDOW))
        mu_a, mu_b = wa.mean(axis=(-2, -1)), wb.mean(axis=(-2, -1))
        var_a = (wa**2).mean(axis=(-2, -1)) - mu_a**2
        var_b = (wb**2).mean(axis=(-2, -1)) - mu_b**2
        cov = (wa * wb).mean(axis=(-2, -1)) - mu_a * mu_b
        num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
        den = (mu_a**2 + mu_b**2 + SSIM_C1) * (var_a + var_b + SSIM_C2)
        scores.append(np.mean(num / den))
    return float(np.mean(scores))


_BINOMIAL = np.array([1, 4, 6, 4, 1], dtype=np.float64) / 16.0


def _blur_down(img: np.ndarray) -> np.ndarray:
    pad = np.pad(img, ((2, 2), (2, 2), (0, 0)), mode="reflect")
    rows = sum(_BINOMIAL[k] * pad[k:k + img.shape[0]] for k in range(5))
    out = sum(_BINOMIAL[k] * rows[:, k:k + img.shape[1]] for k in range(5))
    return out[::2, ::2]


def _tile_features(img: np.ndarray) -> np.ndarray:
    h, w, c = img.shape
    th, tw = h // FEATURE_TILE, w // FEATURE_TILE
    if th == 0 or tw == 0:
        return np.zeros(0)
    img = img[: th * FEATURE_TILE, : tw * FEATURE_TILE]
    tiles = img.reshape(th, FEATURE_TILE, tw, FEATURE_TILE, c).transpose(0, 2, 1, 3, 4)
    means = tiles.mean(axis=(2, 3))
    variances = tiles.var(axis=(2, 3))
    gray = img.mean(axis=-1)
    gy, gx = np.gradient(gray)
    mag = np.hypot(gx, gy)
    ang = np.mod(np.arctan2(gy, gx), np.pi)
    bins = np.minimum((ang / np.pi * ORIENTATION_BINS).astype(int), ORIENTATION_BINS - 1)
    onehot = (bins[..., None] == np.arange(ORIENTATION_BINS)) * mag[..., None]
    hist = onehot.reshape(th, FEATURE_TILE, tw, FEATURE_TILE, ORIENTATION_BINS).mean(axis=(1, 3))
    return np.concatenate([means, variances, hist], axis=-1).ravel()


def featurize(video) -> np.ndarray:
    """Per-frame descriptor: 3-level Gaussian pyramid, 8x8-pixel tiles, and per tile the
    channel means, channel variances and a 4-bin gradient-orientation histogram.

    Returns (T, dim); dim depends only on the frame resolution.
    """
    feats = []
    for frame in _frames(video):
        level, parts = frame, []
        for k in range(FEATURE_LEVELS):
            parts.append(_tile_features(level))
            if k + 1 < FEATURE_LEVELS:
                level = _blur_down(level)
        feats.append(np.concatenate(parts))
    return np.stack(feats)


def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh((m + m.T) / 2)
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def fid(features_a, features_b) -> float:
    """Frechet distance between Gaussian fits of two feature sets (rows are samples)."""
    fa, fb = np.asarray(features_a, np.float64), np.asarray(features_b, np.float64)
    if fa.ndim != 2 or fb.ndim != 2 or len(fa) < 2 or len(fb) < 2:
        raise ValueError("fid needs at least 2 samples per side, as (N, d) arrays")
    mu_a, mu_b = fa.mean(axis=0), fb.mean(axis=0)
    cov_a, cov_b = np.cov(fa, rowvar=False), np.cov(fb, rowvar=False)
    root_a = _psd_sqrt(cov_a)
    # Tr (Sa Sb)^1/2 == Tr (Sa^1/2 Sb Sa^1/2)^1/2, and the latter is symmetric PSD
    cross = np.linalg.eigvalsh((root_a @ cov_b @ root_a + (root_a @ cov_b @ root_a).T) / 2)
    tr_cross = np.sqrt(np.clip(cross, 0.0, None)).sum()
    value = float(np.sum((mu_a - mu_b) ** 2) + np.trace(cov_a) + np.trace(cov_b) - 2 * tr_cross)
    return max(value, 0.0)


@dataclass
class MotionErrorResult:
    mean_px: float
    misses: int
    detections: int
    frames: int

    def __float__(self):
        return self.mean_px


def motion_error(video, track, joint_colors, tol: float = 0.1) -> MotionErrorResult:
    """Mean pixel distance between detected marker centroids and ground-truth joints.

    ``track`` is a MotionTrack-like object or an (F, J, 2) array of normalised
    positions; undetected joints count as misses and are excluded from the mean.
    """
    frames = _frames(video)
    joints = np.asarray(getattr(track, "track", getattr(track, "joints", track)), np.float64)
    n = joints.shape[0]
    if frames.shape[0] < n:
        raise ShapeError(f"video has {frames.shape[0]} frames, track needs {n}")
    h, w = frames.shape[1:3]
    gt = to_pixels(joints, h, w)
    errors, misses, empty_frames = [], 0, 0
    for f in range(n):
        found = detect_joints(frames[f], np.asarray(joint_colors), tol)
        ok = ~np.isnan(found[:, 0])
        if not ok.any():
            empty_frames += 1
        misses += int((~ok).sum())
        errors.extend(np.linalg.norm(found[ok] - gt[f][ok], axis=-1))
    if empty_frames > 0.5 * n:
        raise DetectionError(f"no joint detected in {empty_frames}/{n} frames")
    mean = float(np.mean(errors)) if errors else float("nan")
    return MotionErrorResult(mean, misses, len(errors), n)


def color_histogram(pixels: np.ndarray) -> np.ndarray:
    """Normalised joint RGB histogram with 8 bins per channel (512 bins)."""
    px = np.asarray(pixels, np.float64).reshape(-1, 3)
    idx = np.clip((px * HIST_BINS).astype(int), 0, HIST_BINS - 1)
    flat = (idx[:, 0] * HIST_BINS + idx[:, 1]) * HIST_BINS + idx[:, 2]
    hist = np.bincount(flat, minlength=HIST_BINS**3).astype(np.float64)
    return hist / max(hist.sum(), 1.0)


def garment_fidelity(video, garment, masks) -> float:
    """Histogram intersection of masked video colours vs the garment texture, averaged over frames."""
    frames = _frames(video)
    texture = np.asarray(getattr(garment, "texture", garment))
    masks = np.asarray(masks, bool)
    if masks.shape != frames.shape[:3]:
        raise ShapeError(f"masks {masks.shape} do not align with video {frames.shape[:3]}")
    if not masks.any():
        raise ValueError("garment masks are empty in every frame")
    ref = color_histogram(texture)
    scores = [np.minimum(color_histogram(f[m]), ref).sum()
              for f, m in zip(frames, masks) if m.any()]
    return float(np.mean(scores))
