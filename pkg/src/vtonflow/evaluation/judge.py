"""Rubric-based video grading through a text+image judge model.

Each video is graded ``n`` times (independent requests) and the five aspect
scores are aggregated. Malformed replies are retried up to three attempts per
request.
"""
from __future__ import annotations

import base64
import hashlib
import io
import json
import logging
import math
import os
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from typing import Protocol

import httpx
import numpy as np
from PIL import Image

from ..errors import GradeParseError, GradingError
from ..video import to_uint8

log = logging.getLogger(__name__)

ASPECTS = ("TryOn", "User", "Motion", "Visual", "Overall")
DEFAULT_REPEATS = 40
MAX_ATTEMPTS = 3
_LINE = re.compile(r"^\s*([A-Za-z][A-Za-z_-]*)\s*:\s*(-?\d+(?:\.\d+)?)\s*$")


@dataclass
class Rubric:
    name: str
    preamble: str
    aspects: dict[str, dict]
    grid_frames: int = 8

    def __post_init__(self):
        missing = set(ASPECTS) - set(self.aspects)
        if missing:
            raise ValueError(f"rubric lacks aspects {sorted(missing)}")
        if self.grid_frames < 4:
            raise ValueError("rubric grid needs at least 4 frames")

    @classmethod
    def default(cls) -> "Rubric":
        data = json.loads(resources.files("vtonflow").joinpath("data/rubric.json").read_text())
        return cls.from_dict(data)

    @classmethod
    def from_dict(cls, data: dict) -> "Rubric":
        return cls(data["name"], data["preamble"], data["aspects"], data.get("grid_frames", 8))

    def to_dict(self) -> dict:
        return {"name": self.name, "preamble": self.preamble, "aspects": self.aspects,
                "grid_frames": self.grid_frames}

    @property
    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    def prompt(self, caption: str | None = None) -> str:
        lines = [self.preamble, ""]
        for name in ASPECTS:
            spec = self.aspects[name]
            anchors = "; ".join(f"{k} = {v}" for k, v in spec["anchors"].items())
            lines.append(f"{name}: {spec['instruction']} Anchors: {anchors}.")
        if caption:
            lines += ["", f"Requested outfit and motion: {caption}"]
        return "\n".join(lines)


def parse_grade(text: str) -> dict[str, float]:
    """Parse five ``<Aspect>: <number>`` lines; every aspect exactly once, each in [0, 100]."""
    scores: dict[str, float] = {}
    for raw in text.strip().splitlines():
        if not raw.strip():
            continue
        m = _LINE.match(raw)
        if not m:
            raise GradeParseError(f"malformed line {raw.strip()!r}")
        name, value = m.group(1), float(m.group(2))
        if name not in ASPECTS:
            raise GradeParseError(f"unknown aspect {name!r}")
        if name in scores:
            raise GradeParseError(f"duplicate aspect {name!r}")
        if not 0.0 <= value <= 100.0:
            raise GradeParseError(f"score {value} for {name} outside [0, 100]")
        scores[name] = value
    missing = [a for a in ASPECTS if a not in scores]
    if missing:
        raise GradeParseError(f"missing aspects {missing}")
    return scores


@dataclass
class AspectStats:
    mean: float
    std: float
    n: int
    raw: list[float]


@dataclass
class GradeReport:
    aspects: dict[str, AspectStats]
    rubric_hash: str
    model: str
    meta: dict = field(default_factory=dict)

    @classmethod
    def from_grades(cls, grades: list[dict[str, float]], rubric_hash: str, model: str,
                    meta: dict | None = None) -> "GradeReport":
        aspects = {}
        for a in ASPECTS:
            raw = [float(g[a]) for g in grades]
            arr = np.asarray(raw, np.float64)
            aspects[a] = AspectStats(float(arr.mean()), float(arr.std()), len(raw), raw)
        return cls(aspects, rubric_hash, model, meta or {})

    def to_dict(self) -> dict:
        return {
            "model": self.model,
            "rubric_hash": self.rubric_hash,
            "aspects": {a: vars(s) for a, s in self.aspects.items()},
            "meta": self.meta,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


class JudgeClient(Protocol):
    model: str

    def complete(self, prompt: str, images: list[str], index: int, attempt: int) -> str: ...


class StubJudgeClient:
    """Offline judge: scores are a keyed hash of the request, or a constant."""

    def __init__(self, key: str = "stub", constant: float | None = None):
        self.key = key
        self.constant = constant
        self.model = f"stub:{key}" if constant is None else f"stub:constant:{constant:g}"

    def complete(self, prompt: str, images: list[str], index: int, attempt: int = 0) -> str:
        if self.constant is not None:
            return "\n".join(f"{a}: {self.constant:g}" for a in ASPECTS)
        h = hashlib.sha256()
        for part in (self.key, str(index), prompt, *images):
            h.update(part.encode())
            h.update(b"\0")
        digest = h.digest()
        lines = []
        for k, a in enumerate(ASPECTS):
            value = int.from_bytes(digest[2 * k:2 * k + 2], "big") % 10001 / 100.0
            lines.append(f"{a}: {value:.2f}")
        return "\n".join(lines)


class HttpJudgeClient:
    """POSTs ``{model, prompt, images}`` JSON and reads the reply text.

    The reply may carry the text as ``text``, ``output`` or an OpenAI-style
    ``choices[0].message.content``.
    """

    def __init__(self, endpoint: str, model: str, api_key_env: str = "JUDGE_API_KEY",
                 timeout: float = 60.0, transport: httpx.BaseTransport | None = None):
        self.endpoint = endpoint
        self.model = model
        self.api_key_env = api_key_env
        self._client = httpx.Client(timeout=timeout, transport=transport)

    def complete(self, prompt: str, images: list[str], index: int, attempt: int = 0) -> str:
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(self.api_key_env)
        if key:
            headers["Authorization"] = f"Bearer {key}"
        resp = self._client.post(self.endpoint, headers=headers,
                                 json={"model": self.model, "prompt": prompt, "images": images})
        resp.raise_for_status()
        body = resp.json()
        if isinstance(body.get("text"), str):
            return body["text"]
        if isinstance(body.get("output"), str):
            return body["output"]
        try:
            return body["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise GradingError(f"judge reply has no text field: {sorted(body)}") from exc


def make_client(settings: dict) -> JudgeClient:
    kind = settings.get("client", "stub")
    if kind == "stub":
        return StubJudgeClient(settings.get("stub_key", "stub"), settings.get("stub_constant"))
    if kind == "http":
        return HttpJudgeClient(settings["endpoint"], settings["model"],
                               settings.get("api_key_env", "JUDGE_API_KEY"),
                               settings.get("timeout", 60.0))
    raise ValueError(f"unknown judge client {kind!r}")


def png_b64(img: np.ndarray) -> str:
    buf = io.BytesIO()
    Image.fromarray(to_uint8(img)).save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def frame_grid(frames: np.ndarray, k: int) -> np.ndarray:
    """Tile ``k`` uniformly spaced frames row-major into a near-square grid."""
    idx = np.round(np.linspace(0, len(frames) - 1, k)).astype(int)
    cols = math.ceil(math.sqrt(k))
    rows = math.ceil(k / cols)
    h, w, c = frames.shape[1:]
    grid = np.zeros((rows * h, cols * w, c), dtype=np.float32)
    for n, i in enumerate(idx):
        r, q = divmod(n, cols)
        grid[r * h:(r + 1) * h, q * w:(q + 1) * w] = frames[i]
    return grid


def _grade_once(client: JudgeClient, prompt: str, images: list[str], index: int) -> dict:
    last: Exception | None = None
    for attempt in range(MAX_ATTEMPTS):
        try:
            return parse_grade(client.complete(prompt, images, index=index, attempt=attempt))
        except GradeParseError as exc:
            log.warning("request %d attempt %d: %s", index, attempt + 1, exc)
            last = exc
        except (httpx.HTTPError, GradingError) as exc:
            log.warning("request %d attempt %d failed: %s", index, attempt + 1, exc)
            last = GradingError(str(exc))
    if isinstance(last, GradeParseError):
        raise GradeParseError(f"request {index}: {last} (after {MAX_ATTEMPTS} attempts)") from last
    raise GradingError(f"request {index}: {last} (after {MAX_ATTEMPTS} attempts)") from last


def grade_video(video, request_context: dict, rubric: Rubric | None = None, n: int = DEFAULT_REPEATS,
                client: JudgeClient | None = None, max_workers: int = 1) -> GradeReport:
    """Grade ``video`` ``n`` times and aggregate per-aspect mean/std.

    ``request_context`` may hold ``user_image``, ``garments`` (list of images)
    and ``caption`` (str or word list).
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rubric = rubric or Rubric.default()
    client = client or StubJudgeClient()
    frames = np.asarray(getattr(video, "frames", video))
    images = [png_b64(frame_grid(frames, rubric.grid_frames))]
    if request_context.get("user_image") is not None:
        images.append(png_b64(request_context["user_image"]))
    images.extend(png_b64(g) for g in request_context.get("garments", []))
    caption = request_context.get("caption")
    if isinstance(caption, (list, tuple)):
        caption = " ".join(caption)
    prompt = rubric.prompt(caption)

    if max_workers > 1:
        with ThreadPoolExecutor(max_workers) as pool:
            grades = list(pool.map(lambda i: _grade_once(client, prompt, images, i), range(n)))
    else:
        grades = [_grade_once(client, prompt, images, i) for i in range(n)]
    meta = {"n": n, "grid_frames": rubric.grid_frames}
    return GradeReport.from_grades(grades, rubric.hash, client.model, meta)
