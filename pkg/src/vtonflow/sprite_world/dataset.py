"""Sprite try-on benchmark generation and on-disk persistence."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ..errors import FormatError, VersionError
from ..video import (
    VideoTensor, load_mask_png, load_png, save_mask_png, save_png,
)
from .assets import (
    GARMENT_TYPES, PALETTE_NAMES, PALETTE_U8, AvatarSpec, Corpus, GarmentAsset, MotionTrack,
    gen_assets,
)
from .render import SceneRender, render_scene, render_skeleton
from .triplets import TripletSample, build_triplets, make_triplet

DATASET_VERSION = "1"
ORIENTATION_NOTE = (
    "frames are stored landscape (H < W); the 3:2 aspect mirrors a portrait target transposed"
)

SET_KINDS = (("top", "bottom"), ("top",), ("one_piece",), ("bottom",))


@dataclass
class DatasetConfig:
    seed: int = 0
    avatars: int = 8
    garments_per_type: int = 4
    motions: int = 24
    test_motions: int = 8
    sets_per_avatar: int = 5
    test_scenes_per_avatar: int = 1
    resolution: tuple[int, int] = (64, 96)
    fps: float = 8.0
    frames: int = 9
    fps_factor: int = 1
    include_reconstruction: bool = False

    def __post_init__(self):
        self.resolution = tuple(self.resolution)
        if self.test_motions >= self.motions and self.test_scenes_per_avatar < self.sets_per_avatar:
            raise ValueError("need at least one training motion")
        if self.test_scenes_per_avatar > self.sets_per_avatar:
            raise ValueError("test_scenes_per_avatar exceeds sets_per_avatar")


@dataclass
class SpriteDataset:
    corpus: Corpus
    scenes: dict[str, SceneRender]
    triplets: list[TripletSample]
    config: DatasetConfig
    scene_split: dict[str, str] = field(default_factory=dict)

    def split(self, name: str) -> list[TripletSample]:
        return [t for t in self.triplets if t.split == name]

    def reconstruction_triplets(self, split: str = "train") -> list[TripletSample]:
        """Self-pairs (set B = set A) for every scene of ``split``."""
        out = []
        for sid, scene in self.scenes.items():
            if self.scene_split.get(sid) == split:
                t = make_triplet(scene, scene, self.corpus)
                t.split = split
                out.append(t)
        return out

    def __eq__(self, other):
        return (self.corpus == other.corpus and self.config == other.config
                and self.scene_split == other.scene_split
                and self.scenes.keys() == other.scenes.keys()
                and all(self.scenes[k] == other.scenes[k] for k in self.scenes)
                and [_triplet_record(t) for t in self.triplets]
                == [_triplet_record(t) for t in other.triplets])


def _garment_sets(rng, corpus: Corpus, n_sets: int, n_test: int):
    by_type = {t: [g for g in corpus.garments if g.garment_type == t] for t in GARMENT_TYPES}
    sets, seen = [], set()
    attempts = 0
    while len(sets) < n_sets:
        attempts += 1
        if attempts > 1000:
            raise ValueError("not enough garments to build distinct garment sets")
        # test scenes always include a top+bottom set so multi-garment try-on is evaluated
        kind = SET_KINDS[0] if len(sets) < n_test and len(sets) % 2 == 0 else \
            SET_KINDS[int(rng.integers(len(SET_KINDS)))]
        chosen = [by_type[t][int(rng.integers(len(by_type[t])))] for t in kind]
        key = tuple(sorted(g.id for g in chosen))
        if key in seen:
            continue
        seen.add(key)
        sets.append(chosen)
    return sets


def generate_dataset(config: DatasetConfig) -> SpriteDataset:
    """Render the full benchmark: corpus, scenes and cross-matched triplets with splits.

    Scenes whose motion is one of the held-out motions form the test split; a
    triplet is ``test`` when its target scene is, ``train`` when both scenes are
    training scenes and ``aux`` otherwise (never used for fitting).
    """
    corpus = gen_assets(config.seed, (config.avatars, config.garments_per_type, config.motions),
                        frames=config.frames)
    motions = corpus.motions
    for m in motions:
        m.fps = float(config.fps)
    n_train_motions = config.motions - config.test_motions
    train_motions, test_motions = motions[:n_train_motions], motions[n_train_motions:]

    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 1]))
    scenes, scene_split = {}, {}
    test_counter = 0
    render_fps = config.fps * config.fps_factor
    for avatar in corpus.avatars:
        sets = _garment_sets(rng, corpus, config.sets_per_avatar, config.test_scenes_per_avatar)
        for k, gset in enumerate(sets):
            if k < config.test_scenes_per_avatar:
                motion = test_motions[test_counter % len(test_motions)]
                test_counter += 1
                split = "test"
            else:
                motion = train_motions[int(rng.integers(len(train_motions)))]
                split = "train"
            sid = f"a{avatar.id:03d}_s{k:02d}"
            scenes[sid] = render_scene(avatar, gset, motion, config.resolution, fps=render_fps,
                                       scene_id=sid)
            scene_split[sid] = split

    triplets = build_triplets(list(scenes.values()), corpus, config.include_reconstruction)
    for t in triplets:
        t.split = _triplet_split(scene_split[t.user_scene], scene_split[t.target_scene])
    return SpriteDataset(corpus, scenes, triplets, config, scene_split)


def _triplet_split(user_split: str, target_split: str) -> str:
    if target_split == "test":
        return "test"
    return "train" if user_split == "train" else "aux"


# -- persistence ------------------------------------------------------------

def _triplet_record(t: TripletSample) -> dict:
    return {
        "id": t.id, "avatar_id": t.avatar_id, "user_scene": t.user_scene,
        "user_frame": t.user_frame, "target_scene": t.target_scene,
        "garment_ids": list(t.garment_ids), "caption": " ".join(t.caption), "split": t.split,
    }


def write_dataset(dataset: SpriteDataset, path: str | Path) -> str:
    """Write the dataset tree and return its content hash."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    corpus = dataset.corpus
    h, w = dataset.config.resolution
    manifest = {
        "version": DATASET_VERSION,
        "counts": {
            "avatars": len(corpus.avatars), "garments": len(corpus.garments),
            "motions": len(corpus.motions), "scenes": len(dataset.scenes),
            "triplets": len(dataset.triplets),
        },
        "resolution": [h, w],
        "fps": dataset.config.fps * dataset.config.fps_factor,
        "palette": {name: PALETTE_U8[i].tolist() for i, name in enumerate(PALETTE_NAMES)},
        "orientation": ORIENTATION_NOTE,
        "config": asdict(dataset.config),
        "corpus": {
            "avatars": [
                {"id": a.id, "segment_lengths": a.segment_lengths.tolist(),
                 "skin_color": a.skin_color.tolist(),
                 "joint_marker_colors": a.joint_marker_colors.tolist()}
                for a in corpus.avatars
            ],
            "garments": [
                {"id": g.id, "garment_type": g.garment_type, "caption_words": g.caption_words}
                for g in corpus.garments
            ],
            "motions": [
                {"id": m.id, "name": m.name, "fps": m.fps, "joints": m.joints.tolist()}
                for m in corpus.motions
            ],
        },
        "scenes": {sid: dataset.scene_split[sid] for sid in dataset.scenes},
    }
    for g in corpus.garments:
        save_png(root / "garments" / f"{g.id}.png", g.texture)
    for sid, scene in dataset.scenes.items():
        sdir = root / "scenes" / sid
        for i, frame in enumerate(scene.video.frames):
            save_png(sdir / "frames" / f"{i:05d}.png", frame)
        for gid, masks in scene.garment_masks.items():
            for i, m in enumerate(masks):
                save_mask_png(sdir / "masks" / str(gid) / f"{i:05d}.png", m)
        skeleton = {
            "avatar_id": scene.avatar_id, "garment_ids": scene.garment_ids,
            "motion_id": scene.motion_id, "fps": scene.video.fps, "joints": scene.track.tolist(),
        }
        (sdir / "skeleton.json").write_text(json.dumps(skeleton))
    (root / "triplets.json").write_text(
        json.dumps([_triplet_record(t) for t in dataset.triplets], indent=1))
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return content_hash(root)


def load_dataset(path: str | Path) -> SpriteDataset:
    root = Path(path)
    mpath = root / "manifest.json"
    if not mpath.is_file():
        raise FormatError(f"{mpath} is missing")
    try:
        manifest = json.loads(mpath.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{mpath} is not valid JSON: {exc}") from exc
    if manifest.get("version") != DATASET_VERSION:
        raise VersionError(
            f"dataset version {manifest.get('version')!r} != supported {DATASET_VERSION!r}")

    c = manifest["corpus"]
    avatars = [AvatarSpec(a["id"], np.array(a["segment_lengths"]),
                          np.array(a["skin_color"], dtype=np.float32),
                          np.array(a["joint_marker_colors"], dtype=np.float32))
               for a in c["avatars"]]
    garments = [GarmentAsset(g["id"], g["garment_type"], load_png(root / "garments" / f"{g['id']}.png"),
                             list(g["caption_words"]))
                for g in c["garments"]]
    motions = [MotionTrack(m["id"], m["name"], m["fps"], np.array(m["joints"])) for m in c["motions"]]
    corpus = Corpus(avatars, garments, motions)
    cfg = DatasetConfig(**manifest["config"])
    res = tuple(manifest["resolution"])

    scenes = {}
    for sid in manifest["scenes"]:
        sdir = root / "scenes" / sid
        meta = json.loads((sdir / "skeleton.json").read_text())
        track = np.array(meta["joints"])
        n = track.shape[0]
        frames = np.stack([load_png(sdir / "frames" / f"{i:05d}.png") for i in range(n)])
        masks = {
            gid: np.stack([load_mask_png(sdir / "masks" / str(gid) / f"{i:05d}.png") for i in range(n)])
            for gid in meta["garment_ids"]
        }
        avatar = corpus.avatar(meta["avatar_id"])
        scenes[sid] = SceneRender(
            video=VideoTensor(frames, meta["fps"]),
            garment_masks=masks,
            skeleton_video=render_skeleton(track, avatar.joint_marker_colors, res, meta["fps"]),
            avatar_id=meta["avatar_id"], garment_ids=list(meta["garment_ids"]),
            motion_id=meta["motion_id"], track=track, scene_id=sid,
        )

    triplets = []
    for rec in json.loads((root / "triplets.json").read_text()):
        t = make_triplet(scenes[rec["user_scene"]], scenes[rec["target_scene"]], corpus)
        t.split = rec["split"]
        t.user_frame = rec["user_frame"]
        triplets.append(t)
    return SpriteDataset(corpus, scenes, triplets, cfg, dict(manifest["scenes"]))


def content_hash(path: str | Path) -> str:
    """SHA-256 over (relative path, bytes) of every file under ``path``."""
    root = Path(path)
    h = hashlib.sha256()
    for f in sorted(p for p in root.rglob("*") if p.is_file()):
        h.update(f.relative_to(root).as_posix().encode())
        h.update(b"\0")
        h.update(f.read_bytes())
    return h.hexdigest()
