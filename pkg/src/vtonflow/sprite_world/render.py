"""Deterministic rasteriser for sprite avatars wearing textured garments."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..video import VideoTensor, quantize
from .assets import (
    BACKGROUND, L_ELB, L_HIP, L_KNEE, L_SH, NECK, HEAD, R_ELB, R_HIP, R_KNEE, R_SH,
    AvatarSpec, GarmentAsset, MotionTrack, retarget,
)

PATCH = 8
MARKER_RADIUS = 1.5

# Sizes below are fractions of the frame height, so a 2x render is a 2x sprite.
LIMB_RADIUS = 0.035
HEAD_RADIUS = 0.065
SLEEVE_FRACTION = 0.6

_SKIN, _MARKER_BASE, _GARMENT_BASE = 1, 100, 10


@dataclass
class SceneRender:
    video: VideoTensor
    garment_masks: dict[int, np.ndarray]  # garment id -> (F, H, W) bool
    skeleton_video: VideoTensor
    avatar_id: int
    garment_ids: list[int]
    motion_id: int
    track: np.ndarray  # (F, J, 2) retargeted joint positions, normalised
    scene_id: str = ""
    extra: dict = field(default_factory=dict)

    def __eq__(self, other):
        return (self.video == other.video and self.skeleton_video == other.skeleton_video
                and self.avatar_id == other.avatar_id and self.garment_ids == other.garment_ids
                and self.motion_id == other.motion_id and self.scene_id == other.scene_id
                and np.array_equal(self.track, other.track)
                and self.garment_masks.keys() == other.garment_masks.keys()
                and all(np.array_equal(self.garment_masks[k], other.garment_masks[k])
                        for k in self.garment_masks))

    @property
    def num_frames(self) -> int:
        return self.video.frames.shape[0]


def validate_garment_set(garments) -> None:
    types = [g.garment_type for g in garments]
    if len(set(types)) != len(types):
        raise ValueError(f"garment set has two garments of the same type: {types}")
    if "one_piece" in types and len(types) > 1:
        raise ValueError("a one_piece garment cannot be combined with top/bottom garments")
    if not types:
        raise ValueError("garment set is empty")


def to_pixels(joints: np.ndarray, h: int, w: int) -> np.ndarray:
    """Normalised (x, y) -> continuous (col, row) pixel coordinates; pixel centres are integers."""
    return np.stack([joints[..., 0] * w - 0.5, joints[..., 1] * h - 0.5], axis=-1)


def resample_track(joints: np.ndarray, src_fps: float, dst_fps: float) -> np.ndarray:
    """Linear-in-time joint interpolation to a new frame rate (same clip duration)."""
    frames = joints.shape[0]
    if dst_fps == src_fps or frames == 1:
        return joints.copy()
    n_out = int(round((frames - 1) * dst_fps / src_fps)) + 1
    t = np.arange(n_out) * src_fps / dst_fps
    lo = np.minimum(np.floor(t).astype(int), frames - 1)
    hi = np.minimum(lo + 1, frames - 1)
    a = (t - lo)[:, None, None]
    return (1 - a) * joints[lo] + a * joints[hi]


class _Canvas:
    def __init__(self, h: int, w: int):
        self.h, self.w = h, w
        self.rows, self.cols = np.mgrid[0:h, 0:w].astype(np.float64)
        self.rgb = np.broadcast_to(BACKGROUND, (h, w, 3)).copy()
        self.owner = np.zeros((h, w), dtype=np.int32)

    def paint(self, mask: np.ndarray, color, owner: int) -> None:
        self.rgb[mask] = color
        self.owner[mask] = owner

    def disc(self, center, radius: float) -> np.ndarray:
        return (self.cols - center[0]) ** 2 + (self.rows - center[1]) ** 2 <= radius**2

    def capsule(self, p0, p1, radius: float) -> np.ndarray:
        d = np.asarray(p1, float) - np.asarray(p0, float)
        denom = max(float(d @ d), 1e-12)
        u = np.clip(((self.cols - p0[0]) * d[0] + (self.rows - p0[1]) * d[1]) / denom, 0.0, 1.0)
        dx = self.cols - (p0[0] + u * d[0])
        dy = self.rows - (p0[1] + u * d[1])
        return dx**2 + dy**2 <= radius**2

    def _triangle(self, verts, uvs):
        (x0, y0), (x1, y1), (x2, y2) = verts
        det = (y1 - y2) * (x0 - x2) + (x2 - x1) * (y0 - y2)
        if abs(det) < 1e-9:
            return np.zeros((self.h, self.w), bool), None
        l0 = ((y1 - y2) * (self.cols - x2) + (x2 - x1) * (self.rows - y2)) / det
        l1 = ((y2 - y0) * (self.cols - x2) + (x0 - x2) * (self.rows - y2)) / det
        l2 = 1.0 - l0 - l1
        inside = (l0 >= -1e-9) & (l1 >= -1e-9) & (l2 >= -1e-9)
        uv = l0[..., None] * uvs[0] + l1[..., None] * uvs[1] + l2[..., None] * uvs[2]
        return inside, uv

    def quad_uv(self, corners):
        """Mask and texture coordinates of a quad given as (TL, TR, BR, BL)."""
        tl, tr, br, bl = corners
        uv = np.array([(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)])
        m1, uv1 = self._triangle((tl, tr, br), (uv[0], uv[1], uv[2]))
        m2, uv2 = self._triangle((tl, br, bl), (uv[0], uv[2], uv[3]))
        mask = m1 | m2
        coords = np.zeros((self.h, self.w, 2))
        if uv2 is not None:
            coords[m2] = uv2[m2]
        if uv1 is not None:
            coords[m1] = uv1[m1]
        return mask, coords

    def textured_quad(self, corners, texture, owner: int) -> None:
        mask, uv = self.quad_uv(corners)
        th, tw = texture.shape[:2]
        r = np.clip((uv[..., 1] * th).astype(int), 0, th - 1)
        c = np.clip((uv[..., 0] * tw).astype(int), 0, tw - 1)
        self.rgb[mask] = texture[r[mask], c[mask]]
        self.owner[mask] = owner


def _expand(corners, amount: float):
    corners = np.asarray(corners, float)
    center = corners.mean(axis=0)
    d = corners - center
    n = np.linalg.norm(d, axis=1, keepdims=True)
    return corners + amount * d / np.maximum(n, 1e-9)


def _limb_quad(p0, p1, half_width: float, length_fraction: float = 1.0):
    p0, p1 = np.asarray(p0, float), np.asarray(p1, float)
    d = p1 - p0
    end = p0 + length_fraction * d
    n = np.array([-d[1], d[0]]) / max(np.linalg.norm(d), 1e-9) * half_width
    return (p0 - n, p0 + n, end + n, end - n)


def _draw_frame(canvas: _Canvas, pts: np.ndarray, skin, garments, marker_colors) -> None:
    h = canvas.h
    limb_r = LIMB_RADIUS * h
    # body
    canvas.paint(canvas.quad_uv((pts[L_SH], pts[R_SH], pts[R_HIP], pts[L_HIP]))[0], skin, _SKIN)
    for a, b in ((NECK, HEAD), (L_SH, L_ELB), (R_SH, R_ELB), (L_HIP, L_KNEE), (R_HIP, R_KNEE),
                 (L_SH, R_SH), (L_HIP, R_HIP)):
        canvas.paint(canvas.capsule(pts[a], pts[b], limb_r), skin, _SKIN)
    canvas.paint(canvas.disc(pts[HEAD], HEAD_RADIUS * h), skin, _SKIN)

    by_type = {g.garment_type: g for g in garments}
    order = [t for t in ("bottom", "one_piece", "top") if t in by_type]
    for gtype in order:
        g = by_type[gtype]
        owner = _GARMENT_BASE + g.id
        if gtype == "bottom":
            waist = 0.08
            l_top = pts[L_HIP] + waist * (pts[NECK] - pts[L_HIP])
            r_top = pts[R_HIP] + waist * (pts[NECK] - pts[R_HIP])
            quad = _expand((l_top, r_top, pts[R_KNEE], pts[L_KNEE]), 1.2 * limb_r)
            canvas.textured_quad(quad, g.texture, owner)
        else:
            lower = (pts[R_KNEE], pts[L_KNEE]) if gtype == "one_piece" else (pts[R_HIP], pts[L_HIP])
            quad = _expand((pts[L_SH], pts[R_SH]) + lower, 1.2 * limb_r)
            canvas.textured_quad(quad, g.texture, owner)
            for sh, el in ((L_SH, L_ELB), (R_SH, R_ELB)):
                sleeve = _limb_quad(pts[sh], pts[el], 1.4 * limb_r, SLEEVE_FRACTION)
                canvas.textured_quad(sleeve, g.texture, owner)

    for j, color in enumerate(marker_colors):
        canvas.paint(canvas.disc(pts[j], MARKER_RADIUS), color, _MARKER_BASE + j)


def render_scene(avatar: AvatarSpec, garment_set, motion: MotionTrack, resolution,
                 fps: float | None = None, scene_id: str = "") -> SceneRender:
    """Rasterise ``avatar`` wearing ``garment_set`` while performing ``motion``.

    The motion is linearly resampled to ``fps`` (default: the motion's own
    rate) and retargeted to the avatar's bone lengths. Output pixels are
    snapped to the 8-bit grid so PNG persistence is lossless.
    """
    garments: list[GarmentAsset] = list(garment_set)
    validate_garment_set(garments)
    h, w = resolution
    if h % PATCH or w % PATCH:
        raise ValueError(f"resolution {resolution} must be a multiple of {PATCH}")
    fps = motion.fps if fps is None else float(fps)
    track = retarget(resample_track(motion.joints, motion.fps, fps), avatar.segment_lengths)
    if track.min() < 0 or track.max() > 1:
        raise ValueError("retargeted motion leaves the [0, 1] scene")
    pix = to_pixels(track, h, w)

    frames, owners = [], []
    for f in range(track.shape[0]):
        canvas = _Canvas(h, w)
        _draw_frame(canvas, pix[f], avatar.skin_color, garments, avatar.joint_marker_colors)
        frames.append(canvas.rgb)
        owners.append(canvas.owner)

    owners = np.stack(owners)
    masks = {g.id: owners == _GARMENT_BASE + g.id for g in garments}
    return SceneRender(
        video=VideoTensor(quantize(np.stack(frames)), fps),
        garment_masks=masks,
        skeleton_video=render_skeleton(track, avatar.joint_marker_colors, (h, w), fps),
        avatar_id=avatar.id,
        garment_ids=[g.id for g in garments],
        motion_id=motion.id,
        track=track,
        scene_id=scene_id,
    )


def render_skeleton(track: np.ndarray, colors: np.ndarray, resolution, fps: float) -> VideoTensor:
    """Joint markers as radius-1.5 discs on black, one frame per track frame."""
    h, w = resolution
    pix = to_pixels(track, h, w)
    canvas = _Canvas(h, w)
    out = np.zeros((track.shape[0], h, w, 3))
    for f in range(track.shape[0]):
        for j, color in enumerate(colors):
            out[f][canvas.disc(pix[f, j], MARKER_RADIUS)] = color
    return VideoTensor(quantize(out), fps)


def detect_joints(frame: np.ndarray, colors: np.ndarray, tol: float = 0.1) -> np.ndarray:
    """Centroid of pixels within max-abs ``tol`` of each marker colour; NaN when absent."""
    out = np.full((len(colors), 2), np.nan)
    for j, color in enumerate(colors):
        hit = np.all(np.abs(frame - color) <= tol, axis=-1)
        if hit.any():
            rows, cols = np.nonzero(hit)
            out[j] = (cols.mean(), rows.mean())
    return out
