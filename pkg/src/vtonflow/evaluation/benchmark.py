"""Sampling a checkpoint on benchmark triplets and scoring the results."""
from __future__ import annotations

import zlib

import numpy as np

from ..backbone import SampleConfig, TryOnDiT, sample
from ..trainer.data import bundle_for, target_for
from ..trainer.plan import StagePlan
from ..video import VideoTensor
from .metrics import garment_fidelity, motion_error, psnr, ssim


def sample_seed(seed: int, key: str) -> int:
    """Per-triplet sampling seed; independent of which other triplets are sampled."""
    return int(np.random.SeedSequence([seed, zlib.crc32(key.encode())]).generate_state(1)[0])


def final_stage(ckpt) -> dict:
    """Resolution, length and conditions of the last main stage a checkpoint was trained for."""
    plan = StagePlan.from_dict(ckpt.meta["plan"])
    s = plan.main_stages[-1]
    return {"resolution": tuple(s.resolution), "frames": s.frames, "conditions": s.conditions}


def sample_triplet(model: TryOnDiT, triplet, final: dict, steps: int = 20, guidance: float = 1.0,
                   seed: int = 0, fps: float = 8.0) -> VideoTensor:
    conds = final["conditions"]
    bundle = bundle_for(triplet, final["resolution"], final["frames"], use_text="text" in conds,
                        use_motion="motion" in conds)
    shape = (final["frames"],) + tuple(final["resolution"])
    cfg = SampleConfig(steps, guidance, sample_seed(seed, triplet.id), shape, fps)
    return sample(model, bundle, cfg)


def pool_masks(masks: np.ndarray, resolution) -> np.ndarray:
    """Downscale boolean masks, keeping only pixels fully covered by the garment."""
    f, h, w = masks.shape
    th, tw = resolution
    if (h, w) == (th, tw):
        return masks
    return masks.reshape(f, th, h // th, tw, w // tw).all(axis=(2, 4))


def evaluate_sample(video, triplet, dataset) -> dict:
    """PSNR/SSIM against ground truth, motion error and per-garment fidelity for one sample."""
    frames = np.asarray(getattr(video, "frames", video))
    t, h, w = frames.shape[:3]
    target = target_for(triplet, (h, w), t)
    if target.shape != frames.shape:
        raise ValueError(f"{triplet.id}: sample {frames.shape} vs ground truth {target.shape}")
    corpus = dataset.corpus
    row = {"id": triplet.id, "psnr": psnr(frames, target), "ssim": ssim(frames, target)}
    avatar = corpus.avatar(triplet.avatar_id)
    track = dataset.scenes[triplet.target_scene].track[:t]
    try:
        me = motion_error(frames, track, avatar.joint_marker_colors)
        row.update(motion_error=me.mean_px, motion_misses=me.misses)
    except Exception as exc:  # detection failures are data, not crashes
        row.update(motion_error=float("nan"), motion_misses=-1, motion_note=str(exc))
    for gid in triplet.garment_ids:
        g = corpus.garment(gid)
        masks = pool_masks(triplet.garment_masks[gid][:t], (h, w))
        row[f"fidelity_{g.garment_type}"] = garment_fidelity(frames, g, masks) if masks.any() else float("nan")
    return row


def summarize(rows: list[dict]) -> dict:
    """Mean of every numeric column, ignoring NaNs (None when a column has no finite value)."""
    out = {}
    for key in sorted({k for r in rows for k in r if k not in ("id", "motion_note")}):
        vals = np.asarray([r.get(key, np.nan) for r in rows], np.float64)
        out[key] = float(np.nanmean(vals)) if np.isfinite(vals).any() else None
    out["n"] = len(rows)
    return out


def evaluate_checkpoint(ckpt, dataset, triplets, steps: int = 20, guidance: float = 1.0,
                        seed: int = 0) -> tuple[dict, list[dict]]:
    """Sample every triplet from ``ckpt`` and score it; returns ``(summary, rows)``."""
    from ..trainer.engine import model_from_config

    model = model_from_config(ckpt.model_config)
    model.load_state_dict(ckpt.params)
    model.eval()
    final = final_stage(ckpt)
    rows = []
    for t in triplets:
        video = sample_triplet(model, t, final, steps, guidance, seed, dataset.config.fps)
        rows.append(evaluate_sample(video, t, dataset))
    return summarize(rows), rows
