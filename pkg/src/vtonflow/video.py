"""Dense pixel video container and PNG-directory persistence."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image


@dataclass
class VideoTensor:
    """T x H x W x C float32 frames in [0, 1] plus a frame rate."""

    frames: np.ndarray
    fps: float

    def __post_init__(self):
        if self.frames.ndim != 4:
            raise ValueError(f"expected T x H x W x C frames, got shape {self.frames.shape}")

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return tuple(self.frames.shape)

    def __len__(self) -> int:
        return self.frames.shape[0]

    def __eq__(self, other) -> bool:
        if not isinstance(other, VideoTensor):
            return NotImplemented
        return self.fps == other.fps and np.array_equal(self.frames, other.frames)


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def from_uint8(img: np.ndarray) -> np.ndarray:
    return np.asarray(img, dtype=np.float32) / np.float32(255.0)


def quantize(x: np.ndarray) -> np.ndarray:
    """Snap values to the 8-bit grid so a PNG round trip is lossless."""
    return from_uint8(to_uint8(x))


def save_png(path: Path, img: np.ndarray) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = to_uint8(img) if img.dtype != np.uint8 else img
    Image.fromarray(arr).save(path, format="PNG")


def load_png(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        return from_uint8(np.array(im.convert("RGB")))


def save_mask_png(path: Path, mask: np.ndarray) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.where(mask, 255, 0).astype(np.uint8)).save(path, format="PNG")


def load_mask_png(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.array(im.convert("L")) > 127


def write_video(directory: str | Path, video: VideoTensor) -> None:
    """Write ``frames/%05d.png`` plus ``video.json`` (fps, shape)."""
    directory = Path(directory)
    for i, frame in enumerate(video.frames):
        save_png(directory / "frames" / f"{i:05d}.png", frame)
    meta = {"fps": video.fps, "shape": list(video.shape)}
    (directory / "video.json").write_text(json.dumps(meta, indent=2))


def read_video(directory: str | Path) -> VideoTensor:
    directory = Path(directory)
    meta = json.loads((directory / "video.json").read_text())
    n = meta["shape"][0]
    frames = np.stack([load_png(directory / "frames" / f"{i:05d}.png") for i in range(n)])
    return VideoTensor(frames, float(meta["fps"]))


def area_downscale(frames: np.ndarray, factor: int) -> np.ndarray:
    """Average non-overlapping ``factor x factor`` blocks over the H, W axes."""
    if factor == 1:
        return frames
    *lead, h, w, c = frames.shape
    if h % factor or w % factor:
        raise ValueError(f"{h}x{w} not divisible by downscale factor {factor}")
    x = frames.reshape(*lead, h // factor, factor, w // factor, factor, c)
    return x.mean(axis=(-4, -2), dtype=np.float64).astype(np.float32)


def resize_nearest(img: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Nearest-neighbour resize of an H x W (x C) array to ``size=(H, W)``."""
    h, w = img.shape[:2]
    oh, ow = size
    rows = np.minimum((np.arange(oh) + 0.5) * h / oh, h - 1).astype(np.int64)
    cols = np.minimum((np.arange(ow) + 0.5) * w / ow, w - 1).astype(np.int64)
    return img[rows[:, None], cols[None, :]]
