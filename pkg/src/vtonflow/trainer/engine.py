"""Stage execution: deterministic batches, AdamW, checkpoint threading, NaN guard."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import replace
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from ..backbone import ModelConfig, TryOnDiT, flow_loss_terms
from ..errors import CompatibilityError, NumericError
from ..sprite_world.dataset import SpriteDataset
from ..sprite_world.triplets import TripletSample
from .checkpoint import Checkpoint, save_checkpoint
from .data import bundle_for, placement_mask, target_for
from .plan import Stage, StagePlan

log = logging.getLogger(__name__)

BETAS = (0.9, 0.95)
WEIGHT_DECAY = 0.01
GRAD_CLIP = 1.0
_ORDER_STREAM = 0x5EED  # keeps epoch shuffles apart from per-step streams


def model_from_config(d: dict) -> TryOnDiT:
    d = dict(d)
    d["patch"] = tuple(d.get("patch", (1, 8, 8)))
    return TryOnDiT(ModelConfig(**d))


def init_checkpoint(model_config: ModelConfig, plan: StagePlan) -> Checkpoint:
    """Fresh weights seeded from the plan seed."""
    torch.manual_seed(plan.seed)
    model = TryOnDiT(model_config)
    return Checkpoint(
        params={k: v.detach().clone() for k, v in model.state_dict().items()},
        model_config=model_config.to_dict(),
        config_hash=plan.hash(model_config.to_dict()),
        rng={"seed": plan.seed, "stage_index": 0, "step": 0},
        meta={"plan": plan.to_dict()},
    )


def step_rng(seed: int, stage_index: int, step: int) -> np.random.Generator:
    """Counter-based stream: the RNG state of any step is a pure function of (seed, stage, step)."""
    return np.random.default_rng([seed, stage_index, step])


def slot_indices(seed: int, stage_index: int, phase: int, start_slot: int, count: int, n: int) -> list[int]:
    """Pool indices for slots ``start_slot .. start_slot+count`` of an endless seeded shuffle."""
    out = []
    for k in range(start_slot, start_slot + count):
        epoch, pos = divmod(k, n)
        perm = np.random.default_rng([seed, stage_index, phase, _ORDER_STREAM, epoch]).permutation(n)
        out.append(int(perm[pos]))
    return out


def mix_image_video(video_source: Callable[[int], tuple], image_source: Callable[[int], tuple],
                    ratio: float, rng: np.random.Generator, slots: int) -> tuple[list, list[bool]]:
    """Fill ``slots`` batch slots; each is an image sample with probability ``ratio``.

    Sources are called with the slot number and return ``(x0, bundle, mask)``.
    """
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"image mix ratio must be in [0, 1], got {ratio}")
    flags = [bool(rng.random() < ratio) for _ in range(slots)]
    return [(image_source if f else video_source)(j) for j, f in enumerate(flags)], flags


def warmup_objective(model: TryOnDiT, batch, rng: np.random.Generator, mask_targets,
                     mask_weight: float, dropout=None) -> torch.Tensor:
    """flow loss + mask_weight * BCE(placement-mask head, ground-truth token mask)."""
    if mask_targets is None or any(m is None for m in mask_targets):
        raise ValueError("warm-up batches need placement masks")
    terms = flow_loss_terms(model, batch, rng, dropout, mask_targets=list(mask_targets))
    if mask_weight == 0:
        return terms.flow
    return terms.flow + mask_weight * terms.bce


class ExampleCache:
    """Memoised (target, bundle, mask) per triplet at a given resolution/length."""

    def __init__(self):
        self._store: dict = {}

    def get(self, triplet: TripletSample, resolution, frames: int, conditions, with_mask: bool):
        key = (triplet.id, tuple(resolution), frames, tuple(conditions), with_mask)
        if key not in self._store:
            x0 = target_for(triplet, resolution, frames)
            bundle = bundle_for(triplet, resolution, frames, use_text="text" in conditions,
                                use_motion="motion" in conditions)
            mask = placement_mask(triplet, resolution, frames) if with_mask else None
            self._store[key] = (x0, bundle, mask)
        return self._store[key]


class Trainer:
    def __init__(self, model_config: ModelConfig, plan: StagePlan, dataset: SpriteDataset,
                 log_path=None, checkpoint_dir=None, log_every: int = 10, save_every: int = 0,
                 highfps_dataset: SpriteDataset | None = None):
        self.model_config = model_config
        self.plan = plan
        self.dataset = dataset
        self.highfps_dataset = highfps_dataset
        self.config_hash = plan.hash(model_config.to_dict())
        self.log_path = Path(log_path) if log_path else None
        self.checkpoint_dir = Path(checkpoint_dir) if checkpoint_dir else None
        self.log_every = log_every
        self.save_every = save_every
        self.cache = ExampleCache()
        self.last_good_path: str | None = None
        self._train = dataset.split("train")
        self._recon = None
        self._t0 = time.time()
        self.boundaries: list[dict] = []

    # -- bookkeeping -----------------------------------------------------------------
    def _log(self, record: dict):
        if self.log_path is None:
            return
        self.log_path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.log_path, "a") as fh:
            fh.write(json.dumps(record) + "\n")

    def _save(self, ckpt: Checkpoint, name: str) -> None:
        if self.checkpoint_dir is None:
            return
        save_checkpoint(ckpt, self.checkpoint_dir / name)
        self.last_good_path = ckpt.path

    def check_compatible(self, ckpt: Checkpoint) -> None:
        if ckpt.config_hash != self.config_hash:
            raise CompatibilityError(
                f"checkpoint hash {ckpt.config_hash[:12]} != trainer hash {self.config_hash[:12]}")

    def stage_index(self, stage: Stage) -> int:
        for i, s in enumerate(self.plan.stages):
            if s == stage:
                return i
        raise ValueError(f"stage {stage.name} is not part of the plan")

    # -- data ------------------------------------------------------------------------
    def reconstruction_pool(self) -> list[TripletSample]:
        if self._recon is None:
            self._recon = self.dataset.reconstruction_triplets("train")
        return self._recon

    def curriculum_flags(self, stage: Stage) -> list[bool]:
        """Per-step reconstruction (True) / cross-garment (False) flags; a pure function of the plan."""
        return [stage.is_reconstruction_step(s) for s in range(stage.steps)]

    def batch_for_step(self, stage: Stage, index: int, step: int, rng: np.random.Generator):
        """Return ``(batch, masks, image_flags)`` for ``step``; deterministic in (plan, step)."""
        b = stage.batch_size
        warm = stage.name == "warmup_image"
        if warm and stage.is_reconstruction_step(step):
            pool, phase, start = self.reconstruction_pool(), 0, 0
        else:
            pool, phase = self._train, 1
            start = int(round(stage.reconstruction_fraction * stage.steps)) if warm else 0
        if not pool:
            raise ValueError("no training triplets available")
        picks = [pool[i] for i in slot_indices(self.plan.seed, index, phase, (step - start) * b, b, len(pool))]
        res, conds = stage.resolution, stage.conditions

        def video(j):
            return self.cache.get(picks[j], res, stage.frames, conds, warm)

        def image(j):
            x0, bundle, mask = self.cache.get(picks[j], res, 1, conds, warm)
            return x0, replace(bundle, motion_ref=None), mask

        items, flags = mix_image_video(video, image, 0.0 if warm else stage.image_mix_ratio, rng, b)
        batch = [(x0, bundle) for x0, bundle, _ in items]
        masks = [m for _, _, m in items] if warm else None
        return batch, masks, flags

    # -- optimisation ----------------------------------------------------------------
    def _build(self, ckpt: Checkpoint):
        model = model_from_config(ckpt.model_config)
        model.load_state_dict({k: v.clone() for k, v in ckpt.params.items()})
        model.train()
        opt = torch.optim.AdamW(model.parameters(), lr=0.0, betas=BETAS, weight_decay=WEIGHT_DECAY)
        if ckpt.optim:
            named = dict(model.named_parameters())
            for name, st in ckpt.optim.items():
                opt.state[named[name]] = {
                    "step": torch.tensor(float(st["step"])),
                    "exp_avg": st["exp_avg"].clone(),
                    "exp_avg_sq": st["exp_avg_sq"].clone(),
                }
        return model, opt

    @staticmethod
    def _export(model, opt) -> tuple[dict, dict]:
        params = {k: v.detach().clone() for k, v in model.state_dict().items()}
        optim = {}
        for name, p in model.named_parameters():
            st = opt.state.get(p)
            if st:
                optim[name] = {"step": int(st["step"]), "exp_avg": st["exp_avg"].detach().clone(),
                               "exp_avg_sq": st["exp_avg_sq"].detach().clone()}
        return params, optim

    def loss_for_step(self, model, stage: Stage, step: int, index: int):
        rng = step_rng(self.plan.seed, index, step)
        batch, masks, _ = self.batch_for_step(stage, index, step, rng)
        if stage.name == "warmup_image":
            return warmup_objective(model, batch, rng, masks, stage.mask_weight_at(step), stage.dropout)
        return flow_loss_terms(model, batch, rng, stage.dropout).flow

    def run_stage(self, stage: Stage, ckpt: Checkpoint, stop_at: int | None = None) -> Checkpoint:
        """Run ``stage`` from ``ckpt`` (resuming its cursor if it points into this stage)."""
        self.check_compatible(ckpt)
        index = self.stage_index(stage)
        if stage.name == "refiner":
            raise ValueError("refiner stages run through refiner.train_refiner")
        if stage.name in ckpt.completed and ckpt.stage != stage.name:
            return ckpt
        start = ckpt.step if ckpt.stage == stage.name else 0
        end = stage.steps if stop_at is None else min(stop_at, stage.steps)
        if ckpt.path:
            self.last_good_path = ckpt.path
        if start >= end:
            out = replace(ckpt, stage=stage.name, step=start)
            if start >= stage.steps and stage.name not in out.completed:
                out.completed = out.completed + [stage.name]
            return out

        model, opt = self._build(ckpt)
        running = ckpt.meta.get("running_loss") if ckpt.stage == stage.name else None
        for step in range(start, end):
            lr = stage.lr_at(step)
            for g in opt.param_groups:
                g["lr"] = lr
            try:
                loss = self.loss_for_step(model, stage, step, index)
            except NumericError as exc:
                raise NumericError(f"{stage.name} step {step}: {exc}", self.last_good_path) from exc
            opt.zero_grad(set_to_none=True)
            loss.backward()
            norm = torch.nn.utils.clip_grad_norm_(model.parameters(), GRAD_CLIP)
            if not torch.isfinite(norm):
                raise NumericError(f"{stage.name} step {step}: non-finite gradient", self.last_good_path)
            opt.step()
            value = float(loss.detach())
            running = value if running is None else 0.98 * running + 0.02 * value
            done = step + 1
            if done % self.log_every == 0 or done == end:
                self._log({"step": done, "stage": stage.name, "loss": value, "running_loss": running,
                           "lr": lr, "wallclock": round(time.time() - self._t0, 3)})
            if self.save_every and done % self.save_every == 0 and done < end:
                params, optim = self._export(model, opt)
                self._save(self._checkpoint(ckpt, stage, index, done, params, optim, running), "last")

        params, optim = self._export(model, opt)
        for k, v in params.items():
            if not torch.isfinite(v).all():
                raise NumericError(f"{stage.name}: non-finite parameter {k}", self.last_good_path)
        out = self._checkpoint(ckpt, stage, index, end, params, optim, running)
        if end >= stage.steps:
            self.boundaries.append({"stage": stage.name, "steps": stage.steps})
            self._log({"step": end, "stage": stage.name, "event": "stage_end", "steps": stage.steps,
                       "loss": running, "lr": stage.lr_at(max(end - 1, 0)),
                       "wallclock": round(time.time() - self._t0, 3)})
            self._save(out, stage.name)
        return out

    def _checkpoint(self, ckpt, stage, index, step, params, optim, running) -> Checkpoint:
        completed = list(ckpt.completed)
        if step >= stage.steps and stage.name not in completed:
            completed.append(stage.name)
        meta = dict(ckpt.meta)
        meta["running_loss"] = running
        return Checkpoint(params=params, model_config=ckpt.model_config, config_hash=ckpt.config_hash,
                          stage=stage.name, step=step, completed=completed, optim=optim,
                          rng={"seed": self.plan.seed, "stage_index": index, "step": step}, meta=meta)

    def run(self, ckpt: Checkpoint | None = None) -> Checkpoint:
        """All main stages in order, threading the checkpoint (resumes where ``ckpt`` left off)."""
        ckpt = ckpt or init_checkpoint(self.model_config, self.plan)
        for stage in self.plan.main_stages:
            ckpt = self.run_stage(stage, ckpt)
        return ckpt


def run_stage(stage: Stage, dataset: SpriteDataset, checkpoint_in: Checkpoint, plan: StagePlan,
              model_config: ModelConfig | None = None, **kwargs) -> Checkpoint:
    cfg = model_config or ModelConfig(**{**checkpoint_in.model_config,
                                         "patch": tuple(checkpoint_in.model_config["patch"])})
    return Trainer(cfg, plan, dataset, **kwargs).run_stage(stage, checkpoint_in)


def run_plan(plan: StagePlan, dataset: SpriteDataset, mode: str = "staged",
             model_config: ModelConfig | None = None, highfps_dataset: SpriteDataset | None = None,
             **kwargs) -> Checkpoint:
    """Staged: every main stage in order. Direct: one final-stage run with the same budget.

    A refiner stage, when present, runs afterwards from the main checkpoint in both modes.
    """
    if mode not in ("staged", "direct"):
        raise ValueError(f"mode must be 'staged' or 'direct', got {mode!r}")
    model_config = model_config or ModelConfig()
    effective = plan if mode == "staged" else plan.direct()
    trainer = Trainer(model_config, effective, dataset, highfps_dataset=highfps_dataset, **kwargs)
    ckpt = trainer.run()
    stage = effective.refiner_stage
    if stage is not None and stage.steps > 0:
        if highfps_dataset is None:
            raise ValueError("the refiner stage needs a high-frame-rate dataset")
        from ..refiner import train_refiner
        ckpt = train_refiner(highfps_dataset, ckpt, stage, seed=effective.seed,
                             log_path=trainer.log_path)
    return ckpt
