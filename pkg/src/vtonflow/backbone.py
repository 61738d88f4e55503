"""Joint-attention flow transformer over [video tokens | condition tokens].

Rectified-flow parameterisation: x_t = (1 - t) x0 + t eps, velocity target
eps - x0, sampled with uniform Euler steps from t=1 to t=0.
"""
from __future__ import annotations

from collections import defaultdict
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .conditioning import (
    CondBundle, CondNet, PatchSpec, TokenSequence, drop_all, dropout_conditions, grid_positions,
    patch_join, patch_split,
)
from .errors import NumericError, ShapeError
from .layers import ModulatedBlock, timestep_embedding
from .video import VideoTensor

DEFAULT_DROPOUT = {"text": 0.1, "garment": 0.1, "motion": 0.1}


@dataclass(frozen=True)
class ModelConfig:
    dim: int = 128
    depth: int = 6
    heads: int = 4
    adapter_depth: int = 1
    n_freq: int = 16
    patch: tuple[int, int, int] = (1, 8, 8)

    @property
    def patch_spec(self) -> PatchSpec:
        return PatchSpec(*self.patch, dim=self.dim)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def tiny(cls) -> "ModelConfig":
        return cls(dim=16, depth=1, heads=2, n_freq=4)


@dataclass(frozen=True)
class SampleConfig:
    steps: int = 20
    guidance: float = 1.0
    seed: int = 0
    shape: tuple[int, int, int] = (9, 32, 48)
    fps: float = 8.0

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.guidance < 0:
            raise ValueError("guidance scale must be >= 0")


class TryOnDiT(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        d = config.dim
        self.patch = config.patch_spec
        self.cond = CondNet(d, config.heads, config.adapter_depth, config.n_freq, self.patch)
        self.t_freq = 64
        self.t_mlp = nn.Sequential(nn.Linear(self.t_freq, d), nn.SiLU(), nn.Linear(d, d))
        self.blocks = nn.ModuleList([ModulatedBlock(d, config.heads) for _ in range(config.depth)])
        self.final_norm = nn.LayerNorm(d, elementwise_affine=False, eps=1e-6)
        self.final_ada = nn.Linear(d, 2 * d)
        self.out_proj = nn.Linear(d, self.patch.patch_dim)
        self.mask_head = nn.Linear(d, 1)
        # per-timestep linear skip from the noisy patch; without it the width-D
        # bottleneck caps the rank of the predicted velocity below the patch size
        self.skip_gate = nn.Linear(d, self.patch.patch_dim)
        for lin in (self.final_ada, self.out_proj, self.skip_gate):
            nn.init.zeros_(lin.weight)
            nn.init.zeros_(lin.bias)

    @property
    def dtype(self):
        return self.out_proj.weight.dtype

    def forward(self, x_tokens: torch.Tensor, video_pos: np.ndarray, cond: torch.Tensor,
                t: torch.Tensor, all_tokens: bool = False):
        """Velocity (B, Lv, P) and mask logits (B, Lv) for noisy video patches ``x_tokens``.

        With ``all_tokens`` the output projection is applied to every position of
        the joint sequence and the full (B, Lv + Lc, P) array is returned as well.
        """
        if cond.shape[-1] != self.config.dim:
            raise ShapeError(f"condition width {cond.shape[-1]} != model width {self.config.dim}")
        n_video = x_tokens.shape[1]
        video = self.cond.embed_tokens(x_tokens, "video", video_pos).tokens
        h = torch.cat([video, cond.to(self.dtype)], dim=1)
        c = self.t_mlp(timestep_embedding(t.to(self.dtype), self.t_freq))
        for block in self.blocks:
            h = block(h, c)
        shift, scale = self.final_ada(F.silu(c)).chunk(2, dim=-1)
        h = self.final_norm(h) * (1 + scale[:, None]) + shift[:, None]
        mask_logits = self.mask_head(h[:, :n_video]).squeeze(-1)
        skip = self.skip_gate(F.silu(c))[:, None] * x_tokens.to(self.dtype)
        if all_tokens:
            out = self.out_proj(h)
            return out[:, :n_video] + skip, mask_logits, out
        return self.out_proj(h[:, :n_video]) + skip, mask_logits


def noise_interpolate(x0, eps, t):
    """x_t = (1 - t) x0 + t eps (numpy or torch; ``t`` broadcasts over leading axes)."""
    if x0.shape != eps.shape:
        raise ShapeError(f"x0 shape {tuple(x0.shape)} != eps shape {tuple(eps.shape)}")
    if isinstance(x0, torch.Tensor):
        t = torch.as_tensor(t, dtype=x0.dtype)
        t = t.reshape(t.shape + (1,) * (x0.dim() - t.dim()))
        if t.numel() == 1 and not (0.0 <= float(t.reshape(-1)[0]) <= 1.0):
            raise ValueError("t must lie in [0, 1]")
    else:
        t = np.asarray(t, dtype=np.result_type(x0, np.float32))
        t = t.reshape(t.shape + (1,) * (x0.ndim - t.ndim))
        if t.size == 1 and not (0.0 <= float(t.reshape(-1)[0]) <= 1.0):
            raise ValueError("t must lie in [0, 1]")
    return (1 - t) * x0 + t * eps


def video_positions(model: TryOnDiT, shape, t_offset: int = 0) -> np.ndarray:
    return grid_positions(model.patch.grid(shape), t_offset)


def predict_velocity(model: TryOnDiT, x_t: torch.Tensor, cond: TokenSequence | torch.Tensor, t,
                     shape, t_offset: int = 0) -> torch.Tensor:
    """v-hat for noisy video patches ``x_t`` (B, Lv, P) of frames ``shape=(T, H, W)``."""
    cond_tokens = cond.tokens if isinstance(cond, TokenSequence) else cond
    if cond_tokens.dim() == 2:
        cond_tokens = cond_tokens[None]
    t = torch.as_tensor(t, dtype=model.dtype).reshape(-1).expand(x_t.shape[0])
    return model(x_t, video_positions(model, shape, t_offset), cond_tokens, t)[0]


@dataclass
class LossTerms:
    flow: torch.Tensor
    bce: torch.Tensor | None
    n_elements: int


def _check_finite(arr, what: str):
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in {what}")


def flow_loss_terms(model: TryOnDiT, batch, rng: np.random.Generator, dropout=None,
                    mask_targets=None, t_offset: int = 0) -> LossTerms:
    """Velocity-matching loss (and optional placement-mask BCE) over a batch.

    ``batch`` is a list of ``(x0, bundle)`` with ``x0`` a (T, H, W, 3) array.
    Randomness is drawn in a fixed order: per sample dropout, t, then eps.
    """
    if not batch:
        raise ValueError("empty batch")
    dropout = DEFAULT_DROPOUT if dropout is None else dropout
    prepared = []
    for i, (x0, bundle) in enumerate(batch):
        x0 = np.asarray(x0)
        _check_finite(x0, "target video")
        _check_finite(bundle.user_image, "user image")
        bundle = dropout_conditions(bundle, dropout, rng)
        t = rng.random()
        eps = rng.standard_normal(x0.shape)
        prepared.append((i, x0, bundle, t, eps))

    groups = defaultdict(list)
    for item in prepared:
        groups[(item[1].shape, item[2].layout())].append(item)

    sse = torch.zeros((), dtype=model.dtype)
    bce_sum = torch.zeros((), dtype=model.dtype)
    n_el = n_mask = 0
    for (shape, _), items in sorted(groups.items(), key=lambda kv: kv[1][0][0]):
        x0 = torch.as_tensor(np.stack([it[1] for it in items]), dtype=model.dtype)
        eps = torch.as_tensor(np.stack([it[4] for it in items]), dtype=model.dtype)
        t = torch.as_tensor([it[3] for it in items], dtype=model.dtype)
        x0_tok, eps_tok = patch_split(x0, model.patch), patch_split(eps, model.patch)
        x_t = noise_interpolate(x0_tok, eps_tok, t)
        cond = model.cond.encode_batch([it[2] for it in items])
        v_hat, logits = model(x_t, video_positions(model, shape[:3], t_offset), cond.tokens, t)
        sse = sse + ((v_hat - (eps_tok - x0_tok)) ** 2).sum()
        n_el += v_hat.numel()
        if mask_targets is not None:
            tgt = torch.as_tensor(np.stack([mask_targets[it[0]] for it in items]), dtype=model.dtype)
            bce_sum = bce_sum + F.binary_cross_entropy_with_logits(
                logits, tgt.reshape(logits.shape), reduction="sum")
            n_mask += logits.numel()
    flow = sse / n_el
    if not torch.isfinite(flow):
        raise NumericError("non-finite training loss")
    return LossTerms(flow, bce_sum / n_mask if mask_targets is not None else None, n_el)


def training_loss(model: TryOnDiT, batch, rng: np.random.Generator, dropout=None) -> torch.Tensor:
    return flow_loss_terms(model, batch, rng, dropout).flow


@torch.no_grad()
def sample(model: TryOnDiT, bundle: CondBundle, cfg: SampleConfig, t_offset: int = 0) -> VideoTensor:
    """Guided Euler integration of the learned flow from noise (t=1) to data (t=0)."""
    shape = tuple(cfg.shape)
    grid = model.patch.grid(shape)
    rng = np.random.default_rng(cfg.seed)
    x = torch.as_tensor(rng.standard_normal(shape + (3,)), dtype=model.dtype)[None]
    x = patch_split(x, model.patch)
    pos = video_positions(model, shape, t_offset)
    cond = model.cond.encode_batch([bundle]).tokens
    uncond = None
    if cfg.guidance != 1.0:
        uncond = model.cond.encode_batch([drop_all(bundle)]).tokens
    dt = 1.0 / cfg.steps
    for k in range(cfg.steps):
        t = torch.full((1,), 1.0 - k * dt, dtype=model.dtype)
        v = model(x, pos, cond, t)[0]
        if uncond is not None:
            v_u = model(x, pos, uncond, t)[0]
            v = v_u + cfg.guidance * (v - v_u)
        x = x - dt * v
    frames = patch_join(x[0], grid, model.patch).clamp(0.0, 1.0)
    return VideoTensor(frames.to(torch.float32).numpy(), cfg.fps)


def guided_velocity(v_cond, v_uncond, g: float):
    return v_uncond + g * (v_cond - v_uncond)
