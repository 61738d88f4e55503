"""Procedural sprite try-on world: assets, rendering, triplets, dataset I/O."""
from .assets import (
    GARMENT_RES, GARMENT_TYPES, MARKER_COLORS, NUM_JOINTS, PALETTE, AvatarSpec, Corpus,
    GarmentAsset, MotionTrack, bone_lengths, gen_assets,
)
from .dataset import (
    DatasetConfig, SpriteDataset, content_hash, generate_dataset, load_dataset, write_dataset,
)
from .render import SceneRender, detect_joints, render_scene, render_skeleton, to_pixels
from .triplets import TripletSample, build_triplets, caption_for, extract_garment

__all__ = [
    "GARMENT_RES", "GARMENT_TYPES", "MARKER_COLORS", "NUM_JOINTS", "PALETTE", "AvatarSpec",
    "Corpus", "GarmentAsset", "MotionTrack", "bone_lengths", "gen_assets", "DatasetConfig",
    "SpriteDataset", "content_hash", "generate_dataset", "load_dataset", "write_dataset",
    "SceneRender", "detect_joints", "render_scene", "render_skeleton", "to_pixels",
    "TripletSample", "build_triplets", "caption_for", "extract_garment",
]
