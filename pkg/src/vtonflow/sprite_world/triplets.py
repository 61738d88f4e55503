"""Cross-matched try-on triplets and garment extraction by segmentation."""
from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from itertools import permutations

import numpy as np

from ..errors import EmptySegmentationError, ShapeError
from ..video import VideoTensor, resize_nearest
from .assets import GARMENT_RES
from .render import SceneRender

NEUTRAL_GRAY = 0.5
TYPE_ORDER = {"top": 0, "one_piece": 1, "bottom": 2}


@dataclass
class TripletSample:
    id: str
    avatar_id: int
    user_scene: str
    target_scene: str
    user_image: np.ndarray  # (H, W, 3)
    garments: list[np.ndarray]  # garment condition images of set B
    garment_ids: list[int]
    motion_ref: VideoTensor  # skeleton video of the target
    target_video: VideoTensor
    caption: list[str]
    garment_masks: dict[int, np.ndarray] = field(default_factory=dict)
    user_frame: int = 0
    split: str = "train"

    @property
    def is_reconstruction(self) -> bool:
        return self.user_scene == self.target_scene


def caption_for(garments, motion_name: str) -> list[str]:
    """Template caption; a pure function of the garment set and the motion."""
    ordered = sorted(garments, key=lambda g: (TYPE_ORDER[g.garment_type], g.id))
    words = ["person", "wearing"]
    for i, g in enumerate(ordered):
        if i:
            words.append("and")
        words.extend(g.caption_words)
    words.extend(["doing", motion_name])
    return words


def build_triplets(renders, corpus, include_reconstruction: bool = False) -> list[TripletSample]:
    """Cross-match renders of the same avatar wearing different garment sets.

    For every ordered pair (A, B) of distinct garment sets worn by one avatar the
    user image is frame 0 of a render wearing A and the target is the render
    wearing B.
    """
    by_avatar: dict[int, list[SceneRender]] = defaultdict(list)
    for r in renders:
        if r.num_frames < 1:
            raise ValueError(f"scene {r.scene_id!r} has no frames")
        by_avatar[r.avatar_id].append(r)

    out = []
    for aid in sorted(by_avatar):
        group = by_avatar[aid]
        by_set: dict[tuple, list[SceneRender]] = defaultdict(list)
        for r in group:
            by_set[tuple(sorted(r.garment_ids))].append(r)
        keys = list(by_set)
        pairs = list(permutations(keys, 2))
        if include_reconstruction:
            pairs += [(k, k) for k in keys]
        for set_a, set_b in pairs:
            source = by_set[set_a][0]
            for target in by_set[set_b]:
                out.append(make_triplet(source, target, corpus))
    return out


def make_triplet(source: SceneRender, target: SceneRender, corpus) -> TripletSample:
    garments = [corpus.garment(g) for g in target.garment_ids]
    return TripletSample(
        id=f"{source.scene_id}->{target.scene_id}",
        avatar_id=target.avatar_id,
        user_scene=source.scene_id,
        target_scene=target.scene_id,
        user_image=source.video.frames[0],
        garments=[g.texture for g in garments],
        garment_ids=list(target.garment_ids),
        motion_ref=target.skeleton_video,
        target_video=target.video,
        caption=caption_for(garments, corpus.motion(target.motion_id).name),
        garment_masks=target.garment_masks,
    )


def extract_garment(image: np.ndarray, mask: np.ndarray, size=GARMENT_RES) -> np.ndarray:
    """Cut the masked garment out of ``image`` onto neutral gray, nearest-resized to ``size``."""
    if mask.shape != image.shape[:2]:
        raise ShapeError(f"mask shape {mask.shape} does not match image {image.shape[:2]}")
    if not mask.any():
        raise EmptySegmentationError("segmentation mask is empty")
    rows, cols = np.nonzero(mask)
    r0, r1, c0, c1 = rows.min(), rows.max() + 1, cols.min(), cols.max() + 1
    crop = np.where(mask[r0:r1, c0:c1, None], image[r0:r1, c0:c1], np.float32(NEUTRAL_GRAY))
    return resize_nearest(crop.astype(np.float32), size)
