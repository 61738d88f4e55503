"""Autoregressive 3x frame-rate refiner.

Keyframes of the low-rate video are copied verbatim to output positions 3i.
Each adjacent pair (i, i+1) gets two generated in-between frames, sampled by
the backbone with the pair and the previous chunk's two in-betweens passed in
as ``context`` tokens. Local time indices inside a chunk:

    prev_a=0  prev_b=1  key_i=2  new_1=3  new_2=4  key_i+1=5

The first chunk has no previous frames, so its context holds the keys only.
"""
from __future__ import annotations

import json
import time
from dataclasses import dataclass, replace

import numpy as np
import torch

from .backbone import SampleConfig, flow_loss_terms, sample
from .conditioning import CondBundle
from .errors import NumericError
from .sprite_world.dataset import SpriteDataset
from .sprite_world.triplets import TripletSample
from .trainer.checkpoint import Checkpoint
from .trainer.data import bundle_for, downscale_to
from .trainer.engine import BETAS, GRAD_CLIP, WEIGHT_DECAY, Trainer, model_from_config, slot_indices, step_rng
from .trainer.plan import STAGE_NAMES, Stage
from .video import VideoTensor

FACTOR = 3
CONTEXT = 2
PREV_TIMES = (0, 1)
KEY_TIMES = (2, 5)
NEW_OFFSET = 3
STAGE_INDEX = STAGE_NAMES.index("refiner")


@dataclass(frozen=True)
class RefinerConfig:
    steps: int = 20
    guidance: float = 1.0
    seed: int = 0
    factor: int = FACTOR
    context: int = CONTEXT

    def __post_init__(self):
        if self.factor != FACTOR:
            raise ValueError(f"upsample factor is fixed at {FACTOR}")
        if self.context != CONTEXT:
            raise ValueError(f"context length is fixed at {CONTEXT}")


def high_frame_count(t_low: int) -> int:
    if t_low < 2:
        raise ValueError(f"need at least 2 keyframes, got {t_low}")
    return FACTOR * t_low - 2


def chunk_seed(seed: int, chunk: int) -> int:
    return int(np.random.SeedSequence([seed, chunk]).generate_state(1)[0])


def refiner_bundle(bundle: CondBundle, keys: np.ndarray, prev: np.ndarray | None) -> CondBundle:
    """``bundle`` without motion, plus the chunk's context frames."""
    if prev is None:
        context, times = keys, KEY_TIMES
    else:
        context, times = np.concatenate([prev, keys]), PREV_TIMES + KEY_TIMES
    dropped = {**bundle.dropped, "motion": True}
    return replace(bundle, motion_ref=None, dropped=dropped,
                   context=np.ascontiguousarray(context, dtype=np.float32), context_times=times)


def refine(video_low: VideoTensor, bundle: CondBundle, refiner_params, cfg: RefinerConfig | None = None,
           progress=None) -> VideoTensor:
    """Upsample ``video_low`` to 3x frame rate, chunk by chunk from left to right.

    ``refiner_params`` is a refiner Checkpoint or a ready model.
    """
    cfg = cfg or RefinerConfig()
    model = refiner_params
    if isinstance(refiner_params, Checkpoint):
        model = model_from_config(refiner_params.model_config)
        model.load_state_dict(refiner_params.params)
    model.eval()
    low = np.asarray(video_low.frames)
    t_low, h, w, _ = low.shape
    out = np.zeros((high_frame_count(t_low), h, w, 3), dtype=low.dtype)
    out[0::FACTOR] = low
    for c in range(t_low - 1):
        prev = None if c == 0 else out[FACTOR * c - 2:FACTOR * c]
        cb = refiner_bundle(bundle, low[c:c + 2], prev)
        scfg = SampleConfig(cfg.steps, cfg.guidance, chunk_seed(cfg.seed, c), (2, h, w), video_low.fps)
        new = sample(model, cb, scfg, t_offset=NEW_OFFSET).frames
        out[FACTOR * c + 1:FACTOR * c + 3] = new.astype(out.dtype)
        if progress:
            progress(c)
    return VideoTensor(out, video_low.fps * FACTOR)


def chunk_example(triplet: TripletSample, chunk: int, resolution, use_text: bool = True):
    """Ground-truth ``(intermediates, refiner bundle)`` for ``chunk`` of a high-rate triplet."""
    frames = triplet.target_video.frames
    n = frames.shape[0]
    if (n + 2) % FACTOR:
        raise ValueError(f"{n} frames do not fit the factor-{FACTOR} layout (3k - 2)")
    t_low = (n + 2) // FACTOR
    if not 0 <= chunk < t_low - 1:
        raise ValueError(f"chunk {chunk} out of range for {t_low} keyframes")
    frames = downscale_to(frames, resolution)
    k = FACTOR * chunk
    keys = frames[[k, k + FACTOR]]
    prev = None if chunk == 0 else frames[k - 2:k]
    base = bundle_for(triplet, resolution, use_text=use_text, use_motion=False)
    return frames[k + 1:k + 3], refiner_bundle(base, keys, prev)


def refiner_chunks(dataset: SpriteDataset, split: str = "train") -> list[tuple[TripletSample, int]]:
    out = []
    for t in dataset.split(split):
        n = t.target_video.frames.shape[0]
        if (n + 2) % FACTOR:
            raise ValueError(f"triplet {t.id}: {n} frames do not fit the factor-{FACTOR} layout")
        out.extend((t, c) for c in range((n + 2) // FACTOR - 1))
    return out


def params_hash(params: dict) -> str:
    import hashlib
    h = hashlib.sha256()
    for k in sorted(params):
        h.update(k.encode())
        h.update(params[k].detach().to(torch.float32).numpy().tobytes())
    return h.hexdigest()


def train_refiner(dataset_highfps: SpriteDataset, base_checkpoint: Checkpoint, stage: Stage,
                  seed: int = 0, chunks: list | None = None, log_path=None,
                  stop_at: int | None = None) -> Checkpoint:
    """Fine-tune the base weights on (keyframe pair + context -> two in-betweens) chunks.

    Only the in-between frames are video tokens, so the loss never touches keyframes.
    """
    if stage.name != "refiner":
        raise ValueError(f"expected a refiner stage, got {stage.name}")
    pool = chunks if chunks is not None else refiner_chunks(dataset_highfps)
    if not pool:
        raise ValueError("no refiner training chunks")
    model = model_from_config(base_checkpoint.model_config)
    model.load_state_dict({k: v.clone() for k, v in base_checkpoint.params.items()})
    model.train()
    opt = torch.optim.AdamW(model.parameters(), lr=0.0, betas=BETAS, weight_decay=WEIGHT_DECAY)
    cache: dict = {}
    use_text = "text" in stage.conditions
    dropout = {**stage.dropout, "motion": 0.0}
    end = stage.steps if stop_at is None else min(stop_at, stage.steps)
    t0, running = time.time(), None
    log_fh = open(log_path, "a") if log_path else None
    try:
        for step in range(end):
            rng = step_rng(seed, STAGE_INDEX, step)
            batch = []
            for i in slot_indices(seed, STAGE_INDEX, 0, step * stage.batch_size, stage.batch_size, len(pool)):
                key = (pool[i][0].id, pool[i][1])
                if key not in cache:
                    cache[key] = chunk_example(pool[i][0], pool[i][1], stage.resolution, use_text)
                batch.append(cache[key])
            lr = stage.lr_at(step)
            for g in opt.param_groups:
                g["lr"] = lr
            loss = flow_loss_terms(model, batch, rng, dropout, t_offset=NEW_OFFSET).flow
            opt.zero_grad(set_to_none=True)
            loss.backward()
            norm = torch.nn.utils.clip_grad_norm_(model.parameters(), GRAD_CLIP)
            if not torch.isfinite(norm):
                raise NumericError(f"refiner step {step}: non-finite gradient", base_checkpoint.path)
            opt.step()
            value = float(loss.detach())
            running = value if running is None else 0.98 * running + 0.02 * value
            if log_fh and ((step + 1) % 10 == 0 or step + 1 == end):
                log_fh.write(json.dumps({"step": step + 1, "stage": "refiner", "loss": value,
                                         "running_loss": running, "lr": lr,
                                         "wallclock": round(time.time() - t0, 3)}) + "\n")
    finally:
        if log_fh:
            log_fh.close()
    params, optim = Trainer._export(model, opt)
    completed = list(base_checkpoint.completed)
    if end >= stage.steps and "refiner" not in completed:
        completed.append("refiner")
    meta = {**base_checkpoint.meta, "running_loss": running, "base_params": params_hash(base_checkpoint.params)}
    return Checkpoint(params=params, model_config=base_checkpoint.model_config,
                      config_hash=base_checkpoint.config_hash, stage="refiner", step=end,
                      completed=completed, optim=optim,
                      rng={"seed": seed, "stage_index": STAGE_INDEX, "step": end}, meta=meta)


def intermediate_psnr(refiner_ckpt: Checkpoint, chunks, resolution, cfg: RefinerConfig | None = None,
                      use_text: bool = True) -> list[float]:
    """PSNR of sampled in-betweens against ground truth, with ground-truth context."""
    from .evaluation.metrics import psnr
    cfg = cfg or RefinerConfig()
    model = model_from_config(refiner_ckpt.model_config)
    model.load_state_dict(refiner_ckpt.params)
    model.eval()
    scores = []
    for triplet, c in chunks:
        target, cb = chunk_example(triplet, c, resolution, use_text)
        scfg = SampleConfig(cfg.steps, cfg.guidance, chunk_seed(cfg.seed, c), (2,) + tuple(resolution))
        scores.append(psnr(sample(model, cb, scfg, t_offset=NEW_OFFSET).frames, target))
    return scores
