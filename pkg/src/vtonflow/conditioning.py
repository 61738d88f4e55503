"""Condition encoder: every input modality becomes a block of homogeneous tokens.

Blocks are concatenated in a fixed order ``[text | user | garment_1 .. garment_G
| motion | context]``. Garment blocks share positions and a single modality
embedding, so exchanging two garments exchanges two token blocks and nothing
else.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from importlib import resources

import numpy as np
import torch
import torch.nn as nn

from .errors import ShapeError, VocabularyError
from .layers import Block, sincos_3d

MODALITIES = ("video", "text", "user", "garment", "motion", "context")
OPTIONAL_MODALITIES = ("text", "garment", "motion")
PIXEL_MODALITIES = ("video", "user", "garment", "motion", "context")
MAX_GARMENTS = 3
MAX_TEXT = 16
CHANNELS = 3


def load_vocabulary() -> list[str]:
    text = resources.files("vtonflow").joinpath("data/vocab.txt").read_text()
    return [w for w in text.splitlines() if w]


VOCAB = load_vocabulary()
WORD_TO_ID = {w: i for i, w in enumerate(VOCAB)}


@dataclass(frozen=True)
class PatchSpec:
    p_t: int = 1
    p_h: int = 8
    p_w: int = 8
    dim: int = 128

    @property
    def patch_dim(self) -> int:
        return self.p_t * self.p_h * self.p_w * CHANNELS

    def grid(self, shape) -> tuple[int, int, int]:
        t, h, w = shape[:3]
        if t % self.p_t or h % self.p_h or w % self.p_w:
            raise ShapeError(
                f"shape {(t, h, w)} not divisible by patch {(self.p_t, self.p_h, self.p_w)}")
        return t // self.p_t, h // self.p_h, w // self.p_w


IMAGE_PATCH = PatchSpec(1, 8, 8)


def patch_split(video, spec: PatchSpec):
    """(..., T, H, W, C) -> (..., L, p_t*p_h*p_w*C) with patches in (t, y, x) raster order.

    Works on numpy arrays and torch tensors alike.
    """
    *lead, t, h, w, c = video.shape
    gt, gh, gw = spec.grid((t, h, w))
    x = video.reshape(*lead, gt, spec.p_t, gh, spec.p_h, gw, spec.p_w, c)
    n = len(lead)
    order = list(range(n)) + [n + i for i in (0, 2, 4, 1, 3, 5, 6)]
    x = x.transpose(*order) if isinstance(x, np.ndarray) else x.permute(*order)
    return x.reshape(*lead, gt * gh * gw, spec.p_t * spec.p_h * spec.p_w * c)


def patch_join(patches, grid, spec: PatchSpec, channels: int = CHANNELS):
    """Exact inverse of :func:`patch_split` for a token grid ``(T', H', W')``."""
    *lead, length, _ = patches.shape
    gt, gh, gw = grid
    if length != gt * gh * gw:
        raise ShapeError(f"{length} patches do not fill grid {grid}")
    x = patches.reshape(*lead, gt, gh, gw, spec.p_t, spec.p_h, spec.p_w, channels)
    n = len(lead)
    order = list(range(n)) + [n + i for i in (0, 3, 1, 4, 2, 5, 6)]
    x = x.transpose(*order) if isinstance(x, np.ndarray) else x.permute(*order)
    return x.reshape(*lead, gt * spec.p_t, gh * spec.p_h, gw * spec.p_w, channels)


def grid_positions(grid, t_offset: int = 0) -> np.ndarray:
    gt, gh, gw = grid
    tt, yy, xx = np.meshgrid(np.arange(gt) + t_offset, np.arange(gh), np.arange(gw), indexing="ij")
    return np.stack([tt.ravel(), yy.ravel(), xx.ravel()], axis=-1).astype(np.int64)


@dataclass
class TokenSequence:
    tokens: torch.Tensor  # (L, D) or (B, L, D)
    modality_tags: list[str]
    positions: np.ndarray  # (L, 3) int

    def __len__(self) -> int:
        return len(self.modality_tags)


@dataclass
class CondBundle:
    user_image: np.ndarray
    garments: list[np.ndarray] = field(default_factory=list)
    text: list[str] | None = None
    motion_ref: np.ndarray | None = None  # (T, H, W, 3) skeleton frames
    context: np.ndarray | None = None  # (K, H, W, 3) refiner context frames
    context_times: tuple[int, ...] = ()
    dropped: dict[str, bool] = field(default_factory=dict)

    def __post_init__(self):
        if len(self.garments) > MAX_GARMENTS:
            raise ValueError(f"at most {MAX_GARMENTS} garments, got {len(self.garments)}")
        if not self.garments and not self.is_dropped("garment"):
            raise ValueError("garments may be empty only when the garment modality is dropped")
        for img in [self.user_image, *self.garments]:
            if img.shape[-1] != CHANNELS:
                raise ShapeError(f"expected {CHANNELS}-channel images, got {img.shape}")

    def is_dropped(self, modality: str) -> bool:
        if self.dropped.get(modality, False):
            return True
        if modality == "text":
            return self.text is None
        if modality == "motion":
            return self.motion_ref is None
        return False

    def layout(self) -> tuple:
        """Hashable token-layout signature; equal layouts can be batched."""
        return (
            None if self.is_dropped("text") else len(self.text),
            self.user_image.shape,
            None if self.is_dropped("garment") else tuple(g.shape for g in self.garments),
            None if self.is_dropped("motion") else self.motion_ref.shape,
            None if self.context is None else (self.context.shape, tuple(self.context_times)),
        )


def dropout_conditions(bundle: CondBundle, rates: dict, rng: np.random.Generator) -> CondBundle:
    """Independently mark optional modalities dropped; the user image is always kept."""
    dropped = dict(bundle.dropped)
    for m in OPTIONAL_MODALITIES:
        r = float(rates.get(m, 0.0))
        if not 0.0 <= r <= 1.0:
            raise ValueError(f"dropout rate for {m} must be in [0, 1], got {r}")
        # one draw per modality regardless of rate keeps the RNG stream aligned
        if rng.random() < r:
            dropped[m] = True
    return replace(bundle, dropped=dropped)


def drop_all(bundle: CondBundle) -> CondBundle:
    """The unconditional bundle used for guidance: only the user image survives."""
    return replace(bundle, dropped={m: True for m in OPTIONAL_MODALITIES})


class CondNet(nn.Module):
    """Learned parameters of the condition encoder (plus the shared video embedding)."""

    def __init__(self, dim: int, heads: int, adapter_depth: int = 1, n_freq: int = 16,
                 patch: PatchSpec = IMAGE_PATCH):
        super().__init__()
        self.dim = dim
        self.patch = patch
        self.n_freq = n_freq
        self.patch_embed = nn.ModuleDict(
            {m: nn.Linear(patch.patch_dim, dim) for m in PIXEL_MODALITIES})
        self.modality_embed = nn.Parameter(torch.randn(len(MODALITIES), dim) * 0.02)
        self.null_tokens = nn.ParameterDict(
            {m: nn.Parameter(torch.randn(dim) * 0.02) for m in OPTIONAL_MODALITIES})
        self.text_embed = nn.Embedding(len(VOCAB), dim)
        nn.init.normal_(self.text_embed.weight, std=0.02)
        self.pos_proj = nn.Linear(6 * n_freq, dim, bias=False)
        self.adapters = nn.ModuleDict({
            m: nn.Sequential(*[Block(dim, heads) for _ in range(adapter_depth)])
            for m in MODALITIES if m != "video"
        })

    @property
    def dtype(self):
        return self.modality_embed.dtype

    def position_embedding(self, positions) -> torch.Tensor:
        return self.pos_proj(sincos_3d(positions, self.n_freq).to(self.dtype))

    def embed_tokens(self, patches: torch.Tensor, modality: str, positions) -> TokenSequence:
        """linear(patch) + modality row + projected sinusoidal position, then the adapter.

        ``patches`` is (L, P) or (B, L, P); the adapter only sees this block.
        """
        if modality not in MODALITIES or modality == "text":
            raise ValueError(f"unknown pixel modality {modality!r}")
        x = self.patch_embed[modality](patches.to(self.dtype))
        x = x + self.modality_embed[MODALITIES.index(modality)] + self.position_embedding(positions)
        if modality != "video":
            x = self._adapt(x, modality)
        return TokenSequence(x, [modality] * len(positions), np.asarray(positions))

    def _adapt(self, x: torch.Tensor, modality: str) -> torch.Tensor:
        if x.shape[-2] == 0:
            return x
        squeeze = x.dim() == 2
        y = self.adapters[modality](x[None] if squeeze else x)
        return y[0] if squeeze else y

    def encode_text(self, words, batch: int | None = None) -> TokenSequence:
        words = list(words)
        if len(words) > MAX_TEXT:
            raise VocabularyError(f"caption has {len(words)} words, limit is {MAX_TEXT}")
        for w in words:
            if w not in WORD_TO_ID:
                raise VocabularyError(f"word {w!r} is not in the vocabulary")
        positions = np.array([(i, 0, 0) for i in range(len(words))], dtype=np.int64).reshape(-1, 3)
        ids = torch.tensor([WORD_TO_ID[w] for w in words], dtype=torch.long)
        x = self.text_embed(ids) + self.modality_embed[MODALITIES.index("text")]
        if len(words):
            x = x + self.position_embedding(positions)
        x = self._adapt(x, "text")
        if batch is not None:
            x = x.expand(batch, -1, -1)
        return TokenSequence(x, ["text"] * len(words), positions)

    def null_token(self, modality: str, batch: int | None = None) -> TokenSequence:
        x = self.null_tokens[modality][None]
        if batch is not None:
            x = x.expand(batch, -1, -1)
        return TokenSequence(x, [modality], np.zeros((1, 3), dtype=np.int64))

    def encode_batch(self, bundles: list[CondBundle]) -> TokenSequence:
        """Encode bundles sharing one layout into a (B, L, D) token sequence."""
        layout = bundles[0].layout()
        if any(b.layout() != layout for b in bundles[1:]):
            raise ShapeError("bundles in a batch must share a token layout")
        first, n = bundles[0], len(bundles)
        blocks: list[TokenSequence] = []

        if first.is_dropped("text"):
            blocks.append(self.null_token("text", n))
        else:
            # text of each bundle may differ even with equal lengths
            seqs = [self.encode_text(b.text) for b in bundles]
            blocks.append(TokenSequence(torch.stack([s.tokens for s in seqs]),
                                        seqs[0].modality_tags, seqs[0].positions))

        blocks.append(self._embed_images([b.user_image[None] for b in bundles], "user"))
        if first.is_dropped("garment"):
            blocks.append(self.null_token("garment", n))
        else:
            for g in range(len(first.garments)):
                blocks.append(self._embed_images([b.garments[g][None] for b in bundles], "garment"))
        if first.is_dropped("motion"):
            blocks.append(self.null_token("motion", n))
        else:
            blocks.append(self._embed_images([b.motion_ref for b in bundles], "motion"))
        if first.context is not None:
            blocks.append(self._embed_images([b.context for b in bundles], "context",
                                             times=first.context_times))
        return concat(blocks)

    def _embed_images(self, videos, modality: str, times=None) -> TokenSequence:
        arr = torch.as_tensor(np.stack(videos))
        grid = self.patch.grid(arr.shape[1:])
        pos = grid_positions(grid)
        if times:
            per_frame = grid[1] * grid[2]
            pos[:, 0] = np.repeat(np.asarray(times, dtype=np.int64), per_frame)
        return self.embed_tokens(patch_split(arr, self.patch), modality, pos)

    def encode_bundle(self, bundle: CondBundle) -> TokenSequence:
        seq = self.encode_batch([bundle])
        return TokenSequence(seq.tokens[0], seq.modality_tags, seq.positions)


def concat(blocks: list[TokenSequence]) -> TokenSequence:
    return TokenSequence(
        torch.cat([b.tokens for b in blocks], dim=-2),
        [tag for b in blocks for tag in b.modality_tags],
        np.concatenate([b.positions for b in blocks], axis=0),
    )


def expected_length(bundle: CondBundle, patch: PatchSpec = IMAGE_PATCH) -> int:
    """Closed-form token count of :meth:`CondNet.encode_bundle`."""
    def count(shape):
        gt, gh, gw = patch.grid(shape)
        return gt * gh * gw
    n = 1 if bundle.is_dropped("text") else len(bundle.text)
    n += count((1,) + bundle.user_image.shape[:2])
    n += 1 if bundle.is_dropped("garment") else sum(count((1,) + g.shape[:2]) for g in bundle.garments)
    n += 1 if bundle.is_dropped("motion") else count(bundle.motion_ref.shape)
    if bundle.context is not None:
        n += count(bundle.context.shape)
    return n
