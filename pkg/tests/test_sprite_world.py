import json
from itertools import permutations

import numpy as np
import pytest
from hypothesis import given, strategies as st

from vtonflow.errors import EmptySegmentationError, FormatError, ShapeError, VersionError
from vtonflow.sprite_world import (
    GARMENT_RES, MARKER_COLORS, NUM_JOINTS, PALETTE, DatasetConfig, bone_lengths, build_triplets,
    caption_for, content_hash, detect_joints, extract_garment, gen_assets, generate_dataset,
    load_dataset, render_scene, render_skeleton, to_pixels, write_dataset,
)
from vtonflow.sprite_world.assets import BACKGROUND, MOTION_TEMPLATES, SKIN_U8
from vtonflow.sprite_world.render import resample_track


def _set(corpus, *types):
    return [next(g for g in corpus.garments if g.garment_type == t) for t in types]


# -- assets -----------------------------------------------------------------------------

def test_gen_assets_counts(corpus):
    assert len(corpus.avatars) == 2
    assert len(corpus.garments) == 6
    assert sorted(g.garment_type for g in corpus.garments) == ["bottom"] * 2 + ["one_piece"] * 2 + ["top"] * 2
    assert len(corpus.motions) == 3


def test_gen_assets_deterministic_and_seed_sensitive(corpus):
    assert gen_assets(7, (2, 2, 3)) == corpus
    other = gen_assets(8, (2, 2, 3))
    assert any(not np.array_equal(a.texture, b.texture) for a, b in zip(corpus.garments, other.garments))


@pytest.mark.parametrize("counts", [(0, 1, 1), (1, 0, 1), (1, 1, 0)])
def test_gen_assets_rejects_zero_counts(counts):
    with pytest.raises(ValueError):
        gen_assets(0, counts)


def test_motion_templates_cover_required():
    c = gen_assets(0, (1, 1, 6))
    assert {"idle", "turn", "wave", "dance"} <= {m.name for m in c.motions}
    assert {m.name for m in c.motions} <= set(MOTION_TEMPLATES)


@given(seed=st.integers(0, 2**16))
def test_asset_invariants(seed):
    c = gen_assets(seed, (2, 1, 3))
    for a in c.avatars:
        assert np.all(a.segment_lengths > 0)
        cols = a.joint_marker_colors
        assert len(cols) == NUM_JOINTS
        d = np.abs(cols[:, None] - cols[None]).max(-1) + np.eye(len(cols))
        assert d.min() > 0.1
        # markers must stay outside the detection tolerance of every palette colour and skin
        assert np.abs(cols[:, None] - PALETTE[None]).max(-1).min() > 0.1
        assert np.abs(cols - a.skin_color).max(-1).min() > 0.1
    for g in c.garments:
        assert g.texture.shape == GARMENT_RES + (3,)
        assert 0.0 <= g.texture.min() and g.texture.max() <= 1.0
        assert len(np.unique(g.texture.reshape(-1, 3), axis=0)) >= 2
    for m in c.motions:
        assert m.joints.shape[1:] == (NUM_JOINTS, 2)
        lengths = bone_lengths(m.joints)
        assert np.abs(lengths - lengths[0]).max() <= 1e-6
        assert m.joints.min() >= 0 and m.joints.max() <= 1


def test_palette_and_background_disjoint_from_markers():
    assert np.abs(MARKER_COLORS[:, None] - BACKGROUND[None, None]).max(-1).min() > 0.1
    skin = SKIN_U8 / 255.0
    assert np.abs(MARKER_COLORS[:, None] - skin[None]).max(-1).min() > 0.1


# -- rendering --------------------------------------------------------------------------

def test_render_shape_and_range(corpus):
    r = render_scene(corpus.avatars[0], _set(corpus, "top", "bottom"), corpus.motions[0], (32, 48))
    assert r.video.frames.shape == (9, 32, 48, 3)
    assert r.video.frames.min() >= 0 and r.video.frames.max() <= 1
    assert r.skeleton_video.frames.shape == (9, 32, 48, 3)


def test_render_deterministic(corpus):
    args = (corpus.avatars[1], _set(corpus, "one_piece"), corpus.motions[2], (64, 96))
    assert render_scene(*args) == render_scene(*args)


def test_mask_coverage_and_disjointness(corpus):
    for avatar in corpus.avatars:
        for motion in corpus.motions:
            r = render_scene(avatar, _set(corpus, "top", "bottom"), motion, (64, 96))
            top, bottom = (r.garment_masks[g.id] for g in _set(corpus, "top", "bottom"))
            assert not np.any(top & bottom)
            for m in (top, bottom):
                frac = m.reshape(m.shape[0], -1).mean(axis=1)
                assert np.all(frac > 0) and np.all(frac < 0.6)


def test_mask_pixels_carry_garment_palette(corpus):
    top = _set(corpus, "top")[0]
    r = render_scene(corpus.avatars[0], [top], corpus.motions[0], (64, 96))
    pixels = r.video.frames[r.garment_masks[top.id]]
    tex_colors = np.unique(top.texture.reshape(-1, 3), axis=0)
    dist = np.abs(pixels[:, None] - tex_colors[None]).max(-1).min(-1)
    assert np.all(dist < 1e-6)


@pytest.mark.parametrize("types", [("top", "top"), ("one_piece", "top"), ("one_piece", "bottom")])
def test_render_rejects_invalid_sets(corpus, types):
    garments = [g for t in types for g in corpus.garments if g.garment_type == t][: len(types)]
    if types[0] == types[1]:
        garments = [g for g in corpus.garments if g.garment_type == types[0]][:2]
    with pytest.raises(ValueError):
        render_scene(corpus.avatars[0], garments, corpus.motions[0], (32, 48))


def test_render_rejects_unaligned_resolution(corpus):
    with pytest.raises(ValueError):
        render_scene(corpus.avatars[0], _set(corpus, "top"), corpus.motions[0], (30, 48))


def test_skeleton_recoverability_100_frames():
    c = gen_assets(11, (4, 1, 6))
    errors, frames = [], 0
    rng = np.random.default_rng(0)
    while frames < 100:
        a = c.avatars[int(rng.integers(len(c.avatars)))]
        m = c.motions[int(rng.integers(len(c.motions)))]
        res = [(32, 48), (64, 96)][int(rng.integers(2))]
        r = render_scene(a, _set(c, "top", "bottom"), m, res)
        gt = to_pixels(r.track, *res)
        for f in range(r.num_frames):
            found = detect_joints(r.skeleton_video.frames[f], a.joint_marker_colors)
            assert not np.isnan(found).any()
            errors.append(np.linalg.norm(found - gt[f], axis=-1).max())
            frames += 1
    assert max(errors) <= 1.0


def test_markers_detectable_in_scene_video(corpus):
    a = corpus.avatars[0]
    r = render_scene(a, _set(corpus, "top", "bottom"), corpus.motions[3 % len(corpus.motions)], (64, 96))
    gt = to_pixels(r.track, 64, 96)
    for f in range(r.num_frames):
        found = detect_joints(r.video.frames[f], a.joint_marker_colors)
        ok = ~np.isnan(found[:, 0])
        assert ok.mean() >= 0.8
        assert np.linalg.norm(found[ok] - gt[f][ok], axis=-1).max() <= 1.0


def test_resample_track_frame_law():
    joints = np.random.default_rng(0).random((9, NUM_JOINTS, 2))
    hi = resample_track(joints, 8.0, 24.0)
    assert hi.shape[0] == 25
    np.testing.assert_array_equal(hi[::3], joints)


def test_render_skeleton_black_background(corpus):
    m = corpus.motions[0]
    v = render_skeleton(m.joints, MARKER_COLORS, (32, 48), 8.0)
    assert v.frames.shape == (9, 32, 48, 3)
    assert (v.frames.reshape(-1, 3).max(-1) == 0).mean() > 0.8


# -- triplets ---------------------------------------------------------------------------

def _renders(corpus, n_sets, avatars=1):
    sets = [_set(corpus, "top", "bottom"), _set(corpus, "one_piece"), _set(corpus, "top"), _set(corpus, "bottom")]
    out = []
    for a in corpus.avatars[:avatars]:
        for k in range(n_sets):
            out.append(render_scene(a, sets[k], corpus.motions[0], (32, 48), scene_id=f"a{a.id}_{k}"))
    return out


def test_triplet_counts(corpus):
    assert len(build_triplets(_renders(corpus, 3), corpus)) == 6
    assert len(build_triplets(_renders(corpus, 1), corpus)) == 0
    assert len(build_triplets(_renders(corpus, 1), corpus, include_reconstruction=True)) == 1


@given(st.lists(st.integers(1, 4), min_size=1, max_size=2))
def test_triplet_count_matches_enumeration(corpus_sets):
    c = gen_assets(5, (len(corpus_sets), 2, 1))
    sets = [_set(c, "top", "bottom"), _set(c, "one_piece"), _set(c, "top"), _set(c, "bottom")]
    renders = []
    for a, n in zip(c.avatars, corpus_sets):
        renders += [render_scene(a, sets[k], c.motions[0], (16, 24), scene_id=f"{a.id}_{k}") for k in range(n)]
    brute = sum(1 for a in c.avatars for x, y in permutations([r for r in renders if r.avatar_id == a.id], 2))
    assert len(build_triplets(renders, c)) == brute == sum(n * (n - 1) for n in corpus_sets)


def test_triplet_fields(corpus):
    renders = _renders(corpus, 3)
    for t in build_triplets(renders, corpus):
        src = next(r for r in renders if r.scene_id == t.user_scene)
        tgt = next(r for r in renders if r.scene_id == t.target_scene)
        assert src.avatar_id == tgt.avatar_id == t.avatar_id
        assert sorted(src.garment_ids) != sorted(tgt.garment_ids)
        np.testing.assert_array_equal(t.user_image, src.video.frames[0])
        assert t.target_video.frames.shape[0] == t.motion_ref.frames.shape[0]
        assert t.caption == caption_for([corpus.garment(g) for g in t.garment_ids],
                                        corpus.motion(tgt.motion_id).name)


def test_caption_is_order_free(corpus):
    top, bottom = _set(corpus, "top", "bottom")
    assert caption_for([top, bottom], "wave") == caption_for([bottom, top], "wave")
    words = caption_for([top, bottom], "wave")
    assert words[:2] == ["person", "wearing"] and words[-2:] == ["doing", "wave"]


def test_extract_garment_identity_on_flat_image(corpus):
    tex = corpus.garments[0].texture
    out = extract_garment(tex, np.ones(tex.shape[:2], bool))
    np.testing.assert_array_equal(out, tex)


def test_extract_garment_matches_masked_source(corpus):
    top = _set(corpus, "top")[0]
    r = render_scene(corpus.avatars[0], [top], corpus.motions[0], (64, 96))
    img, mask = r.video.frames[0], r.garment_masks[top.id][0]
    rows, cols = np.nonzero(mask)
    box = (slice(rows.min(), rows.max() + 1), slice(cols.min(), cols.max() + 1))
    out = extract_garment(img, mask, size=mask[box].shape)
    np.testing.assert_array_equal(out[mask[box]], img[box][mask[box]])
    assert np.all(out[~mask[box]] == 0.5)


def test_extract_garment_errors(corpus):
    img = corpus.garments[0].texture
    with pytest.raises(EmptySegmentationError):
        extract_garment(img, np.zeros(img.shape[:2], bool))
    with pytest.raises(ShapeError):
        extract_garment(img, np.ones((3, 3), bool))


# -- dataset ----------------------------------------------------------------------------

def test_dataset_splits(tiny_dataset):
    test = tiny_dataset.split("test")
    assert test and tiny_dataset.split("train")
    held_out = {tiny_dataset.scenes[t.target_scene].motion_id for t in test}
    train_motions = {tiny_dataset.scenes[t.target_scene].motion_id for t in tiny_dataset.split("train")}
    assert held_out.isdisjoint(train_motions)


def test_dataset_round_trip(tiny_dataset, tmp_path):
    digest = write_dataset(tiny_dataset, tmp_path / "d")
    assert digest == content_hash(tmp_path / "d")
    assert load_dataset(tmp_path / "d") == tiny_dataset
    manifest = json.loads((tmp_path / "d" / "manifest.json").read_text())
    assert manifest["resolution"] == [64, 96]
    assert "orientation" in manifest


def test_dataset_determinism(tmp_path):
    cfg = DatasetConfig(seed=9, avatars=1, garments_per_type=1, motions=2, test_motions=1,
                        sets_per_avatar=3, frames=2)
    a = write_dataset(generate_dataset(cfg), tmp_path / "a")
    b = write_dataset(generate_dataset(cfg), tmp_path / "b")
    assert a == b


def test_dataset_format_errors(tiny_dataset, tmp_path):
    root = tmp_path / "d"
    write_dataset(tiny_dataset, root)
    manifest = json.loads((root / "manifest.json").read_text())
    manifest["version"] = "999"
    (root / "manifest.json").write_text(json.dumps(manifest))
    with pytest.raises(VersionError):
        load_dataset(root)
    (root / "manifest.json").unlink()
    with pytest.raises(FormatError):
        load_dataset(root)


def test_highfps_frame_law(tiny_highfps, tiny_dataset):
    for sid, scene in tiny_highfps.scenes.items():
        low = tiny_dataset.scenes[sid]
        assert scene.num_frames == 3 * low.num_frames - 2
        np.testing.assert_allclose(scene.track[::3], low.track, atol=1e-12)
