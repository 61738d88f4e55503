import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from vtonflow.backbone import (
    ModelConfig, SampleConfig, TryOnDiT, flow_loss_terms, guided_velocity, noise_interpolate,
    predict_velocity, sample, training_loss, video_positions,
)
from vtonflow.conditioning import CondBundle, patch_split
from vtonflow.errors import NumericError, ShapeError

from conftest import perturb


def _bundle(rng, motion_shape=(4, 8, 8), n_garments=2):
    return CondBundle(
        user_image=rng.random((16, 16, 3)),
        garments=[rng.random((16, 16, 3)) for _ in range(n_garments)],
        text=["red", "striped", "top"],
        motion_ref=rng.random(motion_shape + (3,)),
    )


def _tiny(dtype=torch.float32, seed=0):
    torch.manual_seed(seed)
    return TryOnDiT(ModelConfig.tiny()).to(dtype)


# -- corruption -------------------------------------------------------------------------

def test_noise_interpolate_endpoints_and_linearity():
    rng = np.random.default_rng(0)
    x0, eps = rng.random((2, 8, 8, 3)), rng.standard_normal((2, 8, 8, 3))
    assert np.array_equal(noise_interpolate(x0, eps, 0.0), x0)
    assert np.array_equal(noise_interpolate(x0, eps, 1.0), eps)
    assert noise_interpolate(np.zeros(3), np.full(3, 2.0), 0.5).tolist() == [1.0, 1.0, 1.0]
    t0, t1 = torch.as_tensor(x0), torch.as_tensor(eps)
    assert torch.equal(noise_interpolate(t0, t1, torch.zeros(())), t0)
    assert torch.equal(noise_interpolate(t0, t1, torch.ones(())), t1)


def test_noise_interpolate_errors():
    with pytest.raises(ShapeError):
        noise_interpolate(np.zeros(3), np.zeros(4), 0.5)
    with pytest.raises(ValueError):
        noise_interpolate(np.zeros(3), np.zeros(3), 1.5)


@given(t=st.floats(0, 1))
def test_noise_interpolate_is_convex_combination(t):
    x0, eps = np.array([0.25, -1.0]), np.array([1.0, 3.0])
    out = noise_interpolate(x0, eps, t)
    assert np.all(out >= np.minimum(x0, eps) - 1e-12) and np.all(out <= np.maximum(x0, eps) + 1e-12)


# -- network ----------------------------------------------------------------------------

def test_zero_init_velocity(rng):
    model = _tiny()
    cond = model.cond.encode_bundle(_bundle(rng))
    x = torch.randn(1, 4, 192)
    for t in (0.0, 0.3, 1.0):
        assert torch.count_nonzero(predict_velocity(model, x, cond, t, (4, 8, 8))) == 0


def test_zero_init_sample_is_clipped_noise(rng):
    model = _tiny()
    cfg = SampleConfig(steps=3, seed=5, shape=(4, 8, 8))
    out = sample(model, _bundle(rng), cfg).frames
    noise = np.random.default_rng(5).standard_normal((4, 8, 8, 3))
    np.testing.assert_allclose(out, np.clip(noise, 0, 1), atol=1e-6)


def test_forward_pure_and_width_checked(rng):
    model = perturb(_tiny())
    cond = model.cond.encode_bundle(_bundle(rng))
    x = torch.randn(1, 4, 192)
    a = predict_velocity(model, x, cond, 0.4, (4, 8, 8))
    assert torch.equal(a, predict_velocity(model, x, cond, 0.4, (4, 8, 8)))
    with pytest.raises(ShapeError):
        model(x, video_positions(model, (4, 8, 8)), torch.zeros(1, 5, 7), torch.zeros(1))


def test_sample_contract(rng):
    model = perturb(_tiny())
    b = _bundle(rng)
    out = sample(model, b, SampleConfig(steps=1, seed=2, shape=(4, 8, 8)))
    assert out.frames.shape == (4, 8, 8, 3)
    assert out.frames.min() >= 0 and out.frames.max() <= 1
    again = sample(model, b, SampleConfig(steps=1, seed=2, shape=(4, 8, 8)))
    assert np.array_equal(out.frames, again.frames)
    with pytest.raises(ShapeError):
        sample(model, b, SampleConfig(steps=1, shape=(4, 9, 8)))


def test_guidance_identity():
    vc, vu = torch.randn(5), torch.randn(5)
    assert torch.equal(guided_velocity(vc, vu, 1.0), vu + (vc - vu))
    assert torch.equal(guided_velocity(vc, vu, 0.0), vu)


def test_guidance_scale_changes_output_only_when_not_one(rng):
    model = perturb(_tiny(), 0.2)
    b = _bundle(rng)
    base = sample(model, b, SampleConfig(steps=2, guidance=1.0, seed=0, shape=(4, 8, 8))).frames
    strong = sample(model, b, SampleConfig(steps=2, guidance=3.0, seed=0, shape=(4, 8, 8))).frames
    assert not np.array_equal(base, strong)


def test_sample_config_validation():
    with pytest.raises(ValueError):
        SampleConfig(steps=0)
    with pytest.raises(ValueError):
        SampleConfig(guidance=-1.0)


def test_garment_order_invariance(rng):
    model = perturb(_tiny(), 0.2)
    b = _bundle(rng)
    swapped = CondBundle(**{**b.__dict__, "garments": b.garments[::-1]})
    cfg = SampleConfig(steps=4, guidance=2.0, seed=1, shape=(4, 8, 8))
    a, c = sample(model, b, cfg).frames, sample(model, swapped, cfg).frames
    assert np.abs(a - c).max() <= 1e-4


# -- loss -------------------------------------------------------------------------------

def test_zero_predictor_loss_is_noise_energy(rng):
    model = _tiny()
    x0 = np.zeros((4, 8, 8, 3))
    losses = [training_loss(model, [(x0, _bundle(rng))] * 4, rng, {}).item() for _ in range(20)]
    assert abs(np.mean(losses) - 1.0) <= 0.05


def test_oracle_predictor_loss_zero(rng, monkeypatch):
    model = _tiny(torch.float64)
    x0 = rng.random((4, 8, 8, 3))
    x0_tok = patch_split(torch.as_tensor(x0), model.patch)

    def oracle(x_t, pos, cond, t, all_tokens=False):
        tt = t.reshape(-1, 1, 1)
        return (x_t - (1 - tt) * x0_tok) / tt - x0_tok, torch.zeros(x_t.shape[:2], dtype=x_t.dtype)

    monkeypatch.setattr(model, "forward", oracle)
    loss = training_loss(model, [(x0, _bundle(rng))], np.random.default_rng(3), {})
    assert loss.item() <= 1e-12


@given(seed=st.integers(0, 1000))
def test_loss_nonnegative(seed):
    model = perturb(_tiny(seed=seed % 3), 0.1, seed)
    r = np.random.default_rng(seed)
    assert training_loss(model, [(r.random((4, 8, 8, 3)), _bundle(r))], r).item() >= 0


def test_loss_rejects_nan(rng):
    model = _tiny()
    x0 = np.full((4, 8, 8, 3), np.nan)
    with pytest.raises(NumericError):
        training_loss(model, [(x0, _bundle(rng))], rng)
    with pytest.raises(ValueError):
        training_loss(model, [], rng)


def test_gradient_check_double_precision():
    model = perturb(_tiny(torch.float64), 0.1)
    data = np.random.default_rng(4)
    batch = [(data.random((4, 8, 8, 3)), _bundle(data)) for _ in range(2)]

    def loss():
        return training_loss(model, batch, np.random.default_rng(11), {})

    model.zero_grad()
    loss().backward()
    params = [p for p in model.parameters() if p.grad is not None]
    pick = np.random.default_rng(0)
    checked = 0
    while checked < 10:
        p = params[int(pick.integers(len(params)))]
        idx = tuple(int(pick.integers(s)) for s in p.shape)
        analytic = p.grad[idx].item()
        h = 1e-6
        with torch.no_grad():
            p[idx] += h
            up = loss().item()
            p[idx] -= 2 * h
            down = loss().item()
            p[idx] += h
        numeric = (up - down) / (2 * h)
        if max(abs(numeric), abs(analytic)) < 1e-9:
            continue
        assert abs(numeric - analytic) / max(abs(numeric), abs(analytic)) <= 1e-2
        checked += 1


def test_condition_outputs_receive_no_gradient(rng):
    model = perturb(_tiny(), 0.1)
    b = _bundle(rng)
    cond = model.cond.encode_bundle(b).tokens[None]
    x = torch.randn(1, 4, 192)
    v, _, out_all = model(x, video_positions(model, (4, 8, 8)), cond, torch.tensor([0.5]), all_tokens=True)
    loss = ((v - torch.randn_like(v)) ** 2).mean()
    (g,) = torch.autograd.grad(loss, out_all)
    assert torch.count_nonzero(g[:, 4:]) == 0
    assert torch.count_nonzero(g[:, :4]) > 0


def test_mask_logits_shape(rng):
    model = _tiny()
    cond = model.cond.encode_bundle(_bundle(rng, motion_shape=(1, 16, 24))).tokens[None]
    x = torch.randn(1, 6, 192)
    _, logits = model(x, video_positions(model, (1, 16, 24)), cond, torch.tensor([0.5]))
    assert logits.shape == (1, (16 // 8) * (24 // 8))


def test_fixed_batch_overfit():
    torch.manual_seed(0)
    model = TryOnDiT(ModelConfig(dim=32, depth=2, heads=2, n_freq=4))
    data = np.random.default_rng(1)
    batch = [(data.random((2, 8, 8, 3)), _bundle(data, motion_shape=(2, 8, 8))) for _ in range(4)]
    opt = torch.optim.Adam(model.parameters(), 3e-3)

    def loss():
        return training_loss(model, batch, np.random.default_rng(0), {})

    first = loss().item()
    for _ in range(500):
        opt.zero_grad()
        value = loss()
        value.backward()
        opt.step()
    assert loss().item() < 0.1 * first


def test_loss_terms_mixed_shapes(rng):
    model = perturb(_tiny(), 0.1)
    batch = [(rng.random((4, 8, 8, 3)), _bundle(rng)),
             (rng.random((1, 8, 8, 3)), _bundle(rng, motion_shape=(1, 8, 8)))]
    masks = [np.ones((4, 1, 1), np.float32), np.zeros((1, 1, 1), np.float32)]
    terms = flow_loss_terms(model, batch, rng, {}, mask_targets=masks)
    assert terms.n_elements == (4 + 1) * 192
    assert terms.bce.item() > 0
