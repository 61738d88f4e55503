"""Turning triplets into (target, condition bundle) training/eval examples."""
from __future__ import annotations

import numpy as np

from ..conditioning import CondBundle
from ..sprite_world.assets import GARMENT_RES
from ..sprite_world.triplets import TripletSample
from ..video import area_downscale, resize_nearest

PATCH = 8


def downscale_to(frames: np.ndarray, resolution) -> np.ndarray:
    """Area-average (..., H, W, C) frames down to ``resolution``."""
    h, w = frames.shape[-3:-1]
    th, tw = resolution
    if (h, w) == (th, tw):
        return frames
    if h % th or w % tw or h // th != w // tw:
        raise ValueError(f"cannot area-downscale {h}x{w} to {th}x{tw}")
    return area_downscale(frames, h // th)


def bundle_for(triplet: TripletSample, resolution, frames: int | None = None,
               use_text: bool = True, use_motion: bool = True,
               garment_images=None) -> CondBundle:
    """Conditions for ``triplet`` at a stage resolution.

    User and garment images stay at the fixed condition resolution; the motion
    reference follows the generation resolution and frame count.
    """
    motion = None
    if use_motion:
        motion = downscale_to(triplet.motion_ref.frames[:frames], resolution)
    user = downscale_to(triplet.user_image, GARMENT_RES) if triplet.user_image.shape[:2] != GARMENT_RES \
        else triplet.user_image
    garments = [resize_nearest(g, GARMENT_RES) for g in (garment_images or triplet.garments)]
    return CondBundle(
        user_image=user,
        garments=garments,
        text=list(triplet.caption) if use_text else None,
        motion_ref=motion,
    )


def target_for(triplet: TripletSample, resolution, frames: int | None = None) -> np.ndarray:
    return downscale_to(triplet.target_video.frames[:frames], resolution)


def placement_mask(triplet: TripletSample, resolution, frames: int | None = None) -> np.ndarray:
    """Union of target garment masks max-pooled to the token grid, (T, H/8, W/8) float."""
    union = np.zeros_like(next(iter(triplet.garment_masks.values()))[:frames])
    for m in triplet.garment_masks.values():
        union = union | m[:frames]
    t, h, w = union.shape
    th, tw = resolution[0] // PATCH, resolution[1] // PATCH
    pooled = union.reshape(t, th, h // th, tw, w // tw).max(axis=(2, 4))
    return pooled.astype(np.float32)
