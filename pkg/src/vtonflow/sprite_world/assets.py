"""Procedural avatars, garments and motion tracks for the sprite try-on world."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..video import from_uint8

GARMENT_TYPES = ("top", "bottom", "one_piece")
GARMENT_RES = (32, 48)  # H x W of every flat garment image / garment condition

JOINT_NAMES = (
    "head", "neck", "l_shoulder", "r_shoulder", "l_elbow",
    "r_elbow", "l_hip", "r_hip", "l_knee", "r_knee",
)
NUM_JOINTS = len(JOINT_NAMES)
HEAD, NECK, L_SH, R_SH, L_ELB, R_ELB, L_HIP, R_HIP, L_KNEE, R_KNEE = range(NUM_JOINTS)

# (parent, child); bone k drives joint BONES[k][1]. Parents always precede children.
BONES = (
    (NECK, HEAD), (NECK, L_SH), (NECK, R_SH), (L_SH, L_ELB), (R_SH, R_ELB),
    (NECK, L_HIP), (NECK, R_HIP), (L_HIP, L_KNEE), (R_HIP, R_KNEE),
)
NUM_BONES = len(BONES)

CANONICAL_LENGTHS = np.array([0.13, 0.09, 0.09, 0.14, 0.14, 0.30, 0.30, 0.21, 0.21])
# absolute bone angles, 0 = pointing down (+y), positive rotates towards +x
REST_ANGLES = np.array([np.pi, -np.pi / 2, np.pi / 2, -0.45, 0.45, -0.17, 0.17, -0.08, 0.08])

# Garment palette: channel values sit at 8-bin histogram centres and keep a
# >= 0.18 max-abs margin from every joint marker colour.
PALETTE_NAMES = (
    "red", "green", "blue", "yellow", "purple", "teal", "gold", "pink",
    "navy", "olive", "white", "black", "gray", "brown", "lime", "sky",
)
PALETTE_U8 = np.array([
    (207, 48, 48), (48, 175, 48), (48, 80, 207), (207, 207, 48),
    (175, 48, 207), (48, 175, 175), (207, 175, 48), (207, 80, 175),
    (48, 48, 80), (80, 80, 48), (207, 207, 207), (48, 48, 48),
    (175, 175, 175), (80, 48, 48), (175, 207, 48), (80, 175, 207),
], dtype=np.uint8)
PALETTE = from_uint8(PALETTE_U8)

MARKER_U8 = np.array([
    (255, 0, 0), (0, 255, 0), (0, 0, 255), (255, 255, 0), (255, 0, 255),
    (0, 255, 255), (255, 128, 0), (128, 0, 255), (0, 255, 128), (255, 0, 128),
], dtype=np.uint8)
MARKER_COLORS = from_uint8(MARKER_U8)

SKIN_U8 = np.array([(240, 200, 160), (200, 150, 110), (150, 105, 75), (225, 175, 140)], dtype=np.uint8)
BACKGROUND = from_uint8(np.array([24, 24, 32], dtype=np.uint8))

PATTERNS = ("striped", "banded", "checked", "dotted")
MOTION_TEMPLATES = ("idle", "turn", "wave", "dance", "squat", "march")


@dataclass
class AvatarSpec:
    id: int
    segment_lengths: np.ndarray  # (NUM_BONES,)
    skin_color: np.ndarray  # (3,)
    joint_marker_colors: np.ndarray = field(default_factory=lambda: MARKER_COLORS.copy())

    def __eq__(self, other):
        return (self.id == other.id
                and np.array_equal(self.segment_lengths, other.segment_lengths)
                and np.array_equal(self.skin_color, other.skin_color)
                and np.array_equal(self.joint_marker_colors, other.joint_marker_colors))


@dataclass
class GarmentAsset:
    id: int
    garment_type: str
    texture: np.ndarray  # GARMENT_RES + (3,)
    caption_words: list[str]

    def __eq__(self, other):
        return (self.id == other.id and self.garment_type == other.garment_type
                and self.caption_words == other.caption_words
                and np.array_equal(self.texture, other.texture))


@dataclass
class MotionTrack:
    id: int
    name: str
    fps: float
    joints: np.ndarray  # (F, J, 2) normalised (x, y)

    def __eq__(self, other):
        return (self.id == other.id and self.name == other.name and self.fps == other.fps
                and np.array_equal(self.joints, other.joints))

    @property
    def num_frames(self) -> int:
        return self.joints.shape[0]


@dataclass
class Corpus:
    avatars: list[AvatarSpec]
    garments: list[GarmentAsset]
    motions: list[MotionTrack]

    def garment(self, gid: int) -> GarmentAsset:
        return self._by_id(self.garments, gid)

    def avatar(self, aid: int) -> AvatarSpec:
        return self._by_id(self.avatars, aid)

    def motion(self, mid: int) -> MotionTrack:
        return self._by_id(self.motions, mid)

    @staticmethod
    def _by_id(items, key):
        for item in items:
            if item.id == key:
                return item
        raise KeyError(key)

    def __eq__(self, other):
        return (self.avatars == other.avatars and self.garments == other.garments
                and self.motions == other.motions)


def bone_lengths(joints: np.ndarray) -> np.ndarray:
    """Per-frame bone lengths, shape (F, NUM_BONES)."""
    parents = np.array([p for p, _ in BONES])
    children = np.array([c for _, c in BONES])
    return np.linalg.norm(joints[:, children] - joints[:, parents], axis=-1)


def forward_kinematics(root: np.ndarray, angles: np.ndarray, lengths: np.ndarray) -> np.ndarray:
    """Joint positions from root (neck) trajectory (F, 2) and absolute bone angles (F, B)."""
    frames = root.shape[0]
    joints = np.zeros((frames, NUM_JOINTS, 2))
    joints[:, NECK] = root
    for k, (parent, child) in enumerate(BONES):
        direction = np.stack([np.sin(angles[:, k]), np.cos(angles[:, k])], axis=-1)
        joints[:, child] = joints[:, parent] + lengths[k] * direction
    return joints


def retarget(joints: np.ndarray, lengths: np.ndarray) -> np.ndarray:
    """Keep the neck trajectory and bone directions, impose new bone lengths."""
    out = np.zeros_like(joints)
    out[:, NECK] = joints[:, NECK]
    for k, (parent, child) in enumerate(BONES):
        d = joints[:, child] - joints[:, parent]
        d = d / np.linalg.norm(d, axis=-1, keepdims=True)
        out[:, child] = out[:, parent] + lengths[k] * d
    return out


def _smooth_noise(rng: np.random.Generator, frames: int, shape: tuple, amp: float) -> np.ndarray:
    t = np.arange(frames)[:, None] / max(frames - 1, 1)
    out = np.zeros((frames,) + shape)
    for _ in range(2):
        freq = rng.uniform(0.3, 1.2, size=shape)
        phase = rng.uniform(0, 2 * np.pi, size=shape)
        out += amp * 0.5 * np.sin(2 * np.pi * freq * t.reshape((frames,) + (1,) * len(shape)) + phase)
    return out


def motion_angles(template: str, rng: np.random.Generator, frames: int):
    """Root trajectory (F, 2) and absolute bone angles (F, B) for a motion template."""
    cycles = rng.uniform(0.6, 1.2)
    phase = 2 * np.pi * cycles * np.arange(frames) / max(frames - 1, 1) + rng.uniform(0, 2 * np.pi)
    amp = rng.uniform(0.7, 1.0)
    root = np.tile([rng.uniform(0.45, 0.55), rng.uniform(0.28, 0.32)], (frames, 1))
    angles = np.tile(REST_ANGLES, (frames, 1))
    s, c = np.sin(phase), np.cos(phase)

    if template == "idle":
        angles[:, 3] -= 0.1 * amp * s
        angles[:, 4] += 0.1 * amp * s
        angles[:, 0] += 0.08 * amp * c
        root[:, 1] += 0.008 * s
    elif template == "turn":
        angles += 0.25 * amp * s[:, None]
        root[:, 0] += 0.04 * amp * s
    elif template == "wave":
        angles[:, 4] = 2.2 + 0.45 * amp * s
        angles[:, 3] -= 0.15 * amp * c
    elif template == "dance":
        angles[:, 3] = -0.5 - 0.9 * amp * (1 + s)
        angles[:, 4] = 0.5 + 0.9 * amp * (1 + c)
        angles[:, 7] -= 0.2 * amp * s
        angles[:, 8] += 0.2 * amp * s
        root[:, 0] += 0.05 * amp * s
    elif template == "squat":
        depth = 0.5 * (1 - c)
        root[:, 1] += 0.05 * amp * depth
        angles[:, 7] -= 0.5 * amp * depth
        angles[:, 8] += 0.5 * amp * depth
        angles[:, 3] -= 0.6 * amp * depth
        angles[:, 4] += 0.6 * amp * depth
    elif template == "march":
        angles[:, 7] += 0.35 * amp * s
        angles[:, 8] += 0.35 * amp * s
        angles[:, 3] -= 0.3 * amp * s
        angles[:, 4] -= 0.3 * amp * s
        root[:, 1] += 0.01 * np.abs(s)
    else:
        raise ValueError(f"unknown motion template {template!r}")

    angles[:, 3:] += _smooth_noise(rng, frames, (NUM_BONES - 3,), 0.06)
    return root, angles


def _texture(rng: np.random.Generator, primary: int, secondary: int, pattern: str) -> np.ndarray:
    h, w = GARMENT_RES
    yy, xx = np.mgrid[0:h, 0:w]
    if pattern == "striped":
        band = int(rng.integers(6, 9))
        use_second = (yy // band) % 2 == 1
    elif pattern == "banded":
        band = int(rng.integers(8, 13))
        use_second = (xx // band) % 2 == 1
    elif pattern == "checked":
        cell = int(rng.integers(8, 13))
        use_second = ((yy // cell) + (xx // cell)) % 2 == 1
    elif pattern == "dotted":
        cell = 12
        cy, cx = (yy % cell) - cell / 2 + 0.5, (xx % cell) - cell / 2 + 0.5
        use_second = cy**2 + cx**2 <= 4.2**2
    else:
        raise ValueError(pattern)
    tex = np.where(use_second[..., None], PALETTE[secondary], PALETTE[primary])
    return tex.astype(np.float32)


def gen_assets(seed: int, counts, frames: int = 9) -> Corpus:
    """Deterministic corpus of avatars, garments (per type) and motions.

    ``counts`` is ``(avatars, garments_per_type, motions)`` or a mapping with
    those keys.
    """
    if isinstance(counts, dict):
        n_av, n_g, n_m = counts["avatars"], counts["garments_per_type"], counts["motions"]
    else:
        n_av, n_g, n_m = counts
    if min(n_av, n_g, n_m) < 1:
        raise ValueError(f"asset counts must be >= 1, got {(n_av, n_g, n_m)}")
    root = np.random.SeedSequence(seed)
    av_ss, g_ss, m_ss = root.spawn(3)

    rng = np.random.default_rng(av_ss)
    avatars = []
    for i in range(n_av):
        scale = rng.uniform(0.9, 1.08)
        jitter = rng.uniform(0.95, 1.05, size=NUM_BONES)
        jitter[2] = jitter[1]  # symmetric shoulders
        jitter[6] = jitter[5]
        jitter[8] = jitter[7]
        avatars.append(AvatarSpec(
            id=i,
            segment_lengths=CANONICAL_LENGTHS * scale * jitter,
            skin_color=from_uint8(SKIN_U8[int(rng.integers(len(SKIN_U8)))]),
        ))

    rng = np.random.default_rng(g_ss)
    garments = []
    gid = 0
    for gtype in GARMENT_TYPES:
        for _ in range(n_g):
            primary, secondary = rng.choice(len(PALETTE), size=2, replace=False)
            pattern = PATTERNS[int(rng.integers(len(PATTERNS)))]
            garments.append(GarmentAsset(
                id=gid,
                garment_type=gtype,
                texture=_texture(rng, int(primary), int(secondary), pattern),
                caption_words=[pattern, PALETTE_NAMES[primary], gtype.replace("_", "")],
            ))
            gid += 1

    rng = np.random.default_rng(m_ss)
    motions = []
    for i in range(n_m):
        # the first motions cycle through every template, the rest are random
        template = MOTION_TEMPLATES[i % len(MOTION_TEMPLATES)] if i < len(MOTION_TEMPLATES) \
            else MOTION_TEMPLATES[int(rng.integers(len(MOTION_TEMPLATES)))]
        root_traj, angles = motion_angles(template, rng, frames)
        joints = forward_kinematics(root_traj, angles, CANONICAL_LENGTHS)
        motions.append(MotionTrack(id=i, name=template, fps=8.0, joints=joints))
    return Corpus(avatars, garments, motions)
