"""Stage plans for progressive training."""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, replace

STAGE_NAMES = ("warmup_image", "video_base", "video_hires", "refiner")
ALL_CONDITIONS = ("text", "user", "garment", "motion")


@dataclass(frozen=True)
class Stage:
    name: str
    resolution: tuple[int, int]
    frames: int
    steps: int
    batch_size: int = 4
    lr: float = 1e-3
    image_mix_ratio: float = 0.0
    conditions: tuple[str, ...] = ALL_CONDITIONS
    mask_loss_weight: float = 0.0
    dropout: dict = field(default_factory=lambda: {"text": 0.1, "garment": 0.1, "motion": 0.1})
    reconstruction_fraction: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "resolution", tuple(self.resolution))
        object.__setattr__(self, "conditions", tuple(self.conditions))
        if self.name not in STAGE_NAMES:
            raise ValueError(f"unknown stage name {self.name!r}")
        if self.steps < 0 or self.batch_size < 1 or self.frames < 1:
            raise ValueError(f"invalid stage sizes in {self.name}")
        if not 0.0 <= self.image_mix_ratio <= 1.0:
            raise ValueError("image_mix_ratio must be in [0, 1]")
        if self.mask_loss_weight < 0:
            raise ValueError("mask_loss_weight must be >= 0")
        if "user" not in self.conditions or "garment" not in self.conditions:
            raise ValueError("user and garment conditions are always active")

    def warmup_steps(self) -> int:
        """Length of the linear learning-rate warm-up (5% of the stage)."""
        return max(1, math.ceil(0.05 * self.steps))

    def lr_at(self, step: int) -> float:
        return self.lr * min(1.0, (step + 1) / self.warmup_steps())

    def mask_weight_at(self, step: int) -> float:
        """Mask-loss weight, linearly annealed to 0 at the end of the warm-up stage."""
        if self.mask_loss_weight == 0:
            return 0.0
        return self.mask_loss_weight * (1.0 - step / max(self.steps, 1))

    def is_reconstruction_step(self, step: int) -> bool:
        return step < int(round(self.reconstruction_fraction * self.steps))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["resolution"] = list(self.resolution)
        d["conditions"] = list(self.conditions)
        return d


@dataclass(frozen=True)
class StagePlan:
    stages: tuple[Stage, ...]
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(self.stages))
        self.validate()

    def validate(self) -> None:
        if not self.stages:
            raise ValueError("plan has no stages")
        names = [s.name for s in self.stages]
        if "refiner" in names and names.index("refiner") != len(names) - 1:
            raise ValueError("the refiner stage must be last")
        main = self.main_stages
        for s in main:
            if s.name == "warmup_image" and (s.frames != 1 or s.mask_loss_weight <= 0):
                raise ValueError("warmup_image needs frames=1 and mask_loss_weight > 0")
        areas = [s.resolution[0] * s.resolution[1] for s in main]
        if any(b < a for a, b in zip(areas, areas[1:])):
            raise ValueError("resolutions must be nondecreasing across stages")

    @property
    def main_stages(self) -> tuple[Stage, ...]:
        return tuple(s for s in self.stages if s.name != "refiner")

    @property
    def refiner_stage(self) -> Stage | None:
        return next((s for s in self.stages if s.name == "refiner"), None)

    @property
    def total_steps(self) -> int:
        """Optimizer-step budget of the main (non-refiner) stages."""
        return sum(s.steps for s in self.main_stages)

    def direct(self) -> "StagePlan":
        """Single final-stage run with the same main-stage budget (the ablation baseline)."""
        final = self.main_stages[-1]
        stage = replace(final, name="video_hires", steps=self.total_steps, mask_loss_weight=0.0,
                        reconstruction_fraction=0.0)
        stages = (stage,) + ((self.refiner_stage,) if self.refiner_stage else ())
        return StagePlan(stages, self.seed)

    def to_dict(self) -> dict:
        return {"seed": self.seed, "stages": [s.to_dict() for s in self.stages]}

    @classmethod
    def from_dict(cls, d: dict) -> "StagePlan":
        return cls(tuple(Stage(**s) for s in d["stages"]), d.get("seed", 0))

    def hash(self, model_config: dict) -> str:
        payload = json.dumps({"plan": self.to_dict(), "model": model_config}, sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()

    @classmethod
    def default(cls, total_steps: int = 3000, base=(32, 48), hires=(64, 96), frames: int = 9,
                hires_frames: int = 9, batch_size: int = 4, lr: float = 1e-3, refiner_steps: int = 0,
                seed: int = 0, fractions=(0.25, 0.45, 0.30)) -> "StagePlan":
        w, b = (int(round(f * total_steps)) for f in fractions[:2])
        h = total_steps - w - b
        stages = [
            Stage("warmup_image", base, 1, w, batch_size, lr, mask_loss_weight=0.1,
                  reconstruction_fraction=0.3),
            Stage("video_base", base, frames, b, batch_size, lr, image_mix_ratio=0.25),
            Stage("video_hires", hires, hires_frames, h, batch_size, lr, image_mix_ratio=0.25),
        ]
        if refiner_steps:
            stages.append(Stage("refiner", base, 2, refiner_steps, batch_size, lr))
        return cls(tuple(stages), seed)
