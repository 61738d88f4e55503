import numpy as np
import pytest
import torch
from dataclasses import replace
from hypothesis import given, strategies as st

from vtonflow.backbone import ModelConfig, video_positions
from vtonflow.conditioning import CondBundle
from vtonflow.refiner import (
    RefinerConfig, chunk_example, high_frame_count, intermediate_psnr, params_hash, refine,
    refiner_bundle, refiner_chunks, train_refiner,
)
from vtonflow.trainer.engine import init_checkpoint
from vtonflow.trainer.plan import Stage, StagePlan
from vtonflow.video import VideoTensor

from conftest import perturb

RES = (16, 24)
CFG = RefinerConfig(steps=2, seed=3)


def _bundle(rng, motion=True):
    return CondBundle(
        user_image=rng.random((16, 16, 3)),
        garments=[rng.random((16, 16, 3))],
        text=["red", "top"],
        motion_ref=rng.random((4,) + RES + (3,)) if motion else None,
    )


@pytest.fixture
def model(tiny_model):
    return perturb(tiny_model, 0.1).eval()


def _low(rng, t):
    return VideoTensor(rng.random((t,) + RES + (3,)).astype(np.float32), 8.0)


@given(t=st.integers(2, 200))
def test_frame_law(t):
    assert high_frame_count(t) == 3 * t - 2


def test_frame_law_examples():
    assert high_frame_count(9) == 25
    assert high_frame_count(41) == 121
    with pytest.raises(ValueError):
        high_frame_count(1)


def test_config_fixed_layout():
    with pytest.raises(ValueError):
        RefinerConfig(factor=2)
    with pytest.raises(ValueError):
        RefinerConfig(context=3)


def test_refine_shape_and_keyframes(model, rng):
    low = _low(rng, 4)
    out = refine(low, _bundle(rng), model, CFG)
    assert out.frames.shape == (10,) + RES + (3,)
    assert out.fps == 24.0
    for i in range(4):
        assert np.array_equal(out.frames[3 * i], low.frames[i])
    with pytest.raises(ValueError):
        refine(_low(rng, 1), _bundle(rng), model, CFG)


def test_keyframes_exact_for_any_weights(tiny_model, rng):
    low = _low(rng, 3)
    for scale in (0.0, 1.0):
        out = refine(low, _bundle(rng), perturb(tiny_model, scale), CFG)
        assert np.array_equal(out.frames[::3], low.frames)


def test_prefix_property(model, rng):
    low, b = _low(rng, 5), _bundle(rng)
    full = refine(low, b, model, CFG).frames
    for k in (2, 3, 4):
        part = refine(VideoTensor(low.frames[:k], low.fps), b, model, CFG).frames
        assert np.array_equal(part, full[:3 * k - 2])


def test_deterministic_and_motion_independent(model, rng):
    low, b = _low(rng, 3), _bundle(rng)
    a = refine(low, b, model, CFG).frames
    assert np.array_equal(a, refine(low, b, model, CFG).frames)
    assert np.array_equal(a, refine(low, replace(b, motion_ref=None), model, CFG).frames)
    assert not np.array_equal(a, refine(low, b, model, replace(CFG, seed=4)).frames)


def test_refiner_bundle_layout(rng):
    b = _bundle(rng)
    keys = rng.random((2,) + RES + (3,))
    first = refiner_bundle(b, keys, None)
    assert first.motion_ref is None and first.is_dropped("motion")
    assert first.context.shape[0] == 2 and tuple(first.context_times) == (2, 5)
    later = refiner_bundle(b, keys, keys)
    assert later.context.shape[0] == 4 and tuple(later.context_times) == (0, 1, 2, 5)


def test_context_outputs_get_no_gradient(model, rng):
    cb = refiner_bundle(_bundle(rng), rng.random((2,) + RES + (3,)), rng.random((2,) + RES + (3,)))
    seq = model.cond.encode_bundle(cb)
    assert "context" in seq.modality_tags
    n_video = 2 * (RES[0] // 8) * (RES[1] // 8)
    x = torch.randn(1, n_video, 192)
    pos = video_positions(model, (2,) + RES, t_offset=3)
    v, _, out_all = model(x, pos, seq.tokens[None], torch.tensor([0.4]), all_tokens=True)
    (g,) = torch.autograd.grad(((v - 1.0) ** 2).mean(), out_all)
    ctx = [n_video + i for i, tag in enumerate(seq.modality_tags) if tag == "context"]
    assert torch.count_nonzero(g[:, ctx]) == 0
    assert torch.count_nonzero(g[:, :n_video]) > 0


# -- training data -------------------------------------------------------------------

def test_chunks_from_highfps(tiny_highfps):
    chunks = refiner_chunks(tiny_highfps)
    n_train = len(tiny_highfps.split("train"))
    assert len(chunks) == 2 * n_train  # 3 keyframes -> 7 frames -> 2 chunks each
    t, c = chunks[1]
    target, cb = chunk_example(t, c, (32, 48))
    frames = t.target_video.frames
    assert target.shape == (2, 32, 48, 3)
    assert cb.context.shape[0] == 4
    full = chunk_example(t, c, (64, 96))[0]
    assert np.array_equal(full, frames[4:6])
    with pytest.raises(ValueError):
        chunk_example(t, 2, (32, 48))


def test_chunks_reject_low_rate_layout(tiny_dataset):
    t = tiny_dataset.split("train")[0]
    # 3 frames satisfy 3k-2 only for k=5/3, so they cannot be a refiner target
    with pytest.raises(ValueError):
        chunk_example(t, 0, (32, 48))
    with pytest.raises(ValueError):
        refiner_chunks(tiny_dataset)


def _base():
    mc = ModelConfig.tiny()
    plan = StagePlan((Stage("video_base", (32, 48), 3, 1), Stage("refiner", (32, 48), 2, 2, batch_size=2)))
    return init_checkpoint(mc, plan), plan.refiner_stage


def test_train_refiner_starts_from_base(tiny_highfps):
    base, stage = _base()
    start = train_refiner(tiny_highfps, base, stage, stop_at=0)
    assert params_hash(start.params) == params_hash(base.params) == start.meta["base_params"]
    trained = train_refiner(tiny_highfps, base, stage)
    assert params_hash(trained.params) != params_hash(base.params)
    assert trained.step == 2 and "refiner" in trained.completed
    again = train_refiner(tiny_highfps, base, stage)
    assert trained.same_weights(again)


def test_train_refiner_rejects_other_stages(tiny_highfps):
    base, _ = _base()
    with pytest.raises(ValueError):
        train_refiner(tiny_highfps, base, Stage("video_base", (32, 48), 3, 1))


def test_intermediate_psnr_scores_each_chunk(tiny_highfps):
    base, stage = _base()
    ck = train_refiner(tiny_highfps, base, stage)
    chunks = refiner_chunks(tiny_highfps)[:3]
    scores = intermediate_psnr(ck, chunks, (32, 48), CFG)
    assert len(scores) == 3 and all(np.isfinite(scores))
