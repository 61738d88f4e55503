"""Batch command line: gen-data, train, sample, refine, eval, judge, report.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import logging
import platform
import sys
from pathlib import Path

import jsonschema
import numpy as np
import torch
from importlib import resources

from . import __version__
from .backbone import ModelConfig
from .evaluation.judge import Rubric, grade_video, make_client
from .evaluation.benchmark import evaluate_sample, final_stage, sample_triplet, summarize
from .evaluation.metrics import fid, featurize
from .refiner import RefinerConfig, refine, train_refiner
from .sprite_world.dataset import DatasetConfig, content_hash, generate_dataset, load_dataset, write_dataset
from .trainer.checkpoint import load_checkpoint, save_checkpoint
from .trainer.data import bundle_for, target_for
from .trainer.engine import Trainer, init_checkpoint, model_from_config
from .trainer.plan import Stage, StagePlan
from .video import read_video, write_video

log = logging.getLogger("vtonflow")

DEFAULT_CONFIG = {
    "seed": 0,
    "data": {"path": "runs/data", "highfps_path": None, "avatars": 8, "garments_per_type": 4,
             "motions": 24, "test_motions": 8, "sets_per_avatar": 5, "test_scenes_per_avatar": 1,
             "resolution": [64, 96], "fps": 8.0, "frames": 9, "include_reconstruction": False},
    "model": {"dim": 128, "depth": 6, "heads": 4, "adapter_depth": 1, "n_freq": 16, "patch": [1, 8, 8]},
    "plan": {"total_steps": 3000, "base": [32, 48], "hires": [64, 96], "frames": 9, "hires_frames": 9,
             "batch_size": 4, "lr": 1e-3, "refiner_steps": 0, "fractions": [0.25, 0.45, 0.30]},
    "sample": {"steps": 20, "guidance": 1.0, "seed": 0, "split": "test", "limit": None},
    "refiner": {"steps": 20, "guidance": 1.0, "seed": 0},
    "judge": {"client": "stub", "n": 40, "endpoint": None, "model": None, "api_key_env": "JUDGE_API_KEY",
              "timeout": 60.0, "max_workers": 1, "stub_key": "stub", "stub_constant": None},
}


class UsageError(Exception):
    """Bad arguments or configuration; maps to exit code 2."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# -- configuration --------------------------------------------------------------------

def load_schema() -> dict:
    return json.loads(resources.files("vtonflow").joinpath("data/config.schema.json").read_text())


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _apply_set(cfg: dict, assignment: str) -> None:
    if "=" not in assignment:
        raise UsageError(f"--set expects key=value, got {assignment!r}")
    key, raw = assignment.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node = cfg
    parts = key.split(".")
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise UsageError(f"--set {key}: {p} is not a section")
    node[parts[-1]] = value


def resolve_config(path: str | None, overrides=(), seed: int | None = None) -> dict:
    """Defaults <- config file <- --set overrides <- --seed, then schema validation."""
    user = {}
    if path:
        try:
            user = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(user, dict):
            raise UsageError("config root must be a JSON object")
    # validate the file alone first so unknown keys are reported against what the user wrote
    _validate(user)
    cfg = _merge(DEFAULT_CONFIG, user)
    for a in overrides or ():
        _apply_set(cfg, a)
    if seed is not None:
        cfg["seed"] = seed
    _validate(cfg)
    return cfg


def _validate(cfg: dict) -> None:
    try:
        jsonschema.validate(cfg, load_schema())
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise UsageError(f"config error at {where}: {exc.message}") from exc


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()


def dataset_config(cfg: dict, highfps: bool = False) -> DatasetConfig:
    d = {k: v for k, v in cfg["data"].items() if k not in ("path", "highfps_path")}
    return DatasetConfig(seed=cfg["seed"], fps_factor=3 if highfps else 1, **d)


def model_config(cfg: dict) -> ModelConfig:
    m = dict(cfg["model"])
    m["patch"] = tuple(m["patch"])
    return ModelConfig(**m)


def stage_plan(cfg: dict) -> StagePlan:
    p = cfg["plan"]
    if p.get("stages"):
        return StagePlan(tuple(Stage(**s) for s in p["stages"]), cfg["seed"])
    return StagePlan.default(p["total_steps"], tuple(p["base"]), tuple(p["hires"]), p["frames"],
                             p["hires_frames"], p["batch_size"], p["lr"], p["refiner_steps"],
                             cfg["seed"], tuple(p["fractions"]))


def repro_header(command: str, cfg: dict) -> dict:
    return {
        "command": command,
        "config_hash": config_hash(cfg),
        "seed": cfg["seed"],
        "versions": {"vtonflow": __version__, "python": platform.python_version(),
                     "numpy": np.__version__, "torch": torch.__version__},
    }


def _write_manifest(out: Path, header: dict, cfg: dict, **extra) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "manifest.json").write_text(
        json.dumps({**header, "config": cfg, **extra}, indent=2, sort_keys=True))


def _select(dataset, split: str, limit):
    items = dataset.split(split)
    return items[:limit] if limit else items


# -- commands ---------------------------------------------------------------------------

def cmd_gen_data(args, cfg, header) -> int:
    out = Path(args.out or cfg["data"]["path"])
    dataset = generate_dataset(dataset_config(cfg, args.highfps))
    digest = write_dataset(dataset, out)
    counts = {s: len(dataset.split(s)) for s in ("train", "test", "aux")}
    print(json.dumps({"path": str(out), "content_hash": digest, "triplets": counts}))
    return 0


def cmd_train(args, cfg, header) -> int:
    data = load_dataset(args.data or cfg["data"]["path"])
    out = Path(args.out)
    plan = stage_plan(cfg)
    effective = plan if args.mode == "staged" else plan.direct()
    mcfg = model_config(cfg)
    trainer = Trainer(mcfg, effective, data, log_path=out / "train_log.ndjson",
                      checkpoint_dir=out / "stages", log_every=args.log_every)
    if args.resume:
        ckpt = load_checkpoint(args.resume, expected_hash=trainer.config_hash)
    else:
        ckpt = init_checkpoint(mcfg, effective)
    ckpt = trainer.run(ckpt)
    save_checkpoint(ckpt, out / "checkpoint")
    result = {"checkpoint": str(out / "checkpoint"), "stages": trainer.boundaries,
              "total_steps": effective.total_steps}
    stage = effective.refiner_stage
    if stage is not None and stage.steps > 0:
        hi_path = args.highfps or cfg["data"].get("highfps_path")
        if not hi_path:
            raise UsageError("the plan has a refiner stage; pass --highfps or set data.highfps_path")
        refined = train_refiner(load_dataset(hi_path), ckpt, stage, seed=effective.seed,
                                log_path=out / "train_log.ndjson")
        save_checkpoint(refined, out / "refiner")
        result["refiner"] = str(out / "refiner")
    _write_manifest(out, header, cfg, mode=args.mode, plan=effective.to_dict(), **result)
    print(json.dumps(result))
    return 0


def cmd_sample(args, cfg, header) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    data = load_dataset(args.data or cfg["data"]["path"])
    out = Path(args.out)
    model = model_from_config(ckpt.model_config)
    model.load_state_dict(ckpt.params)
    model.eval()
    final = final_stage(ckpt)
    scfg = cfg["sample"]
    split = args.split or scfg["split"]
    triplets = _select(data, split, args.limit or scfg["limit"])
    if not triplets:
        raise RuntimeError(f"no {split} triplets to sample")
    for t in triplets:
        video = sample_triplet(model, t, final, scfg["steps"], scfg["guidance"], scfg["seed"],
                               data.config.fps)
        write_video(out / "samples" / t.id, video)
    digest = content_hash(out / "samples")
    _write_manifest(out, header, cfg, checkpoint=str(args.checkpoint), split=split,
                    samples=[t.id for t in triplets], content_hash=digest)
    print(json.dumps({"samples": len(triplets), "content_hash": digest}))
    return 0


def cmd_refine(args, cfg, header) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    data = load_dataset(args.data or cfg["data"]["path"])
    src, out = Path(args.input), Path(args.out)
    by_id = {t.id: t for t in data.triplets}
    rcfg = RefinerConfig(cfg["refiner"]["steps"], cfg["refiner"]["guidance"], cfg["refiner"]["seed"])
    ids = sorted(p.name for p in (src / "samples").iterdir() if p.is_dir())
    for tid in ids:
        video = read_video(src / "samples" / tid)
        t = by_id[tid]
        bundle = bundle_for(t, video.frames.shape[1:3], use_text=True, use_motion=False)
        write_video(out / "samples" / tid, refine(video, bundle, ckpt, rcfg))
    digest = content_hash(out / "samples")
    _write_manifest(out, header, cfg, checkpoint=str(args.checkpoint), input=str(src), samples=ids,
                    content_hash=digest)
    print(json.dumps({"refined": len(ids), "content_hash": digest}))
    return 0


def cmd_eval(args, cfg, header) -> int:
    data = load_dataset(args.data or cfg["data"]["path"])
    src, out = Path(args.samples), Path(args.out)
    by_id = {t.id: t for t in data.triplets}
    ids = sorted(p.name for p in (src / "samples").iterdir() if p.is_dir())
    if not ids:
        raise RuntimeError(f"no samples under {src}")
    rows, feats_gen, feats_gt = [], [], []
    for tid in ids:
        video = read_video(src / "samples" / tid)
        t = by_id[tid]
        rows.append(evaluate_sample(video, t, data))
        feats_gen.append(featurize(video.frames))
        feats_gt.append(featurize(target_for(t, video.frames.shape[1:3], video.frames.shape[0])))
    summary = summarize(rows)
    summary["fid"] = fid(np.concatenate(feats_gen), np.concatenate(feats_gt))
    _write_manifest(out, header, cfg, samples_dir=str(src))
    (out / "metrics.json").write_text(json.dumps({"summary": summary, "samples": rows}, indent=2,
                                                 sort_keys=True, default=float))
    print(json.dumps(summary, default=float))
    return 0


def cmd_judge(args, cfg, header) -> int:
    data = load_dataset(args.data or cfg["data"]["path"])
    src, out = Path(args.samples), Path(args.out)
    jcfg = cfg["judge"]
    if jcfg["client"] == "http" and not (jcfg.get("endpoint") and jcfg.get("model")):
        raise UsageError("judge.client=http needs judge.endpoint and judge.model")
    client = make_client(jcfg)
    rubric = Rubric.default()
    by_id = {t.id: t for t in data.triplets}
    ids = sorted(p.name for p in (src / "samples").iterdir() if p.is_dir())
    reports = {}
    for tid in ids:
        t = by_id[tid]
        ctx = {"user_image": t.user_image, "garments": t.garments, "caption": t.caption}
        report = grade_video(read_video(src / "samples" / tid), ctx, rubric, jcfg["n"], client,
                             jcfg["max_workers"])
        reports[tid] = report.to_dict()
    _write_manifest(out, header, cfg, samples_dir=str(src), rubric_hash=rubric.hash)
    (out / "grades.json").write_text(json.dumps(reports, indent=2, sort_keys=True))
    print(json.dumps({"graded": len(reports)}))
    return 0


def cmd_report(args, cfg, header) -> int:
    src = Path(args.eval)
    out = Path(args.out or args.eval)
    metrics_path = src / "metrics.json"
    if not metrics_path.exists():
        raise RuntimeError(f"{metrics_path} not found; run eval first")
    metrics = json.loads(metrics_path.read_text())
    rows = [dict(r) for r in metrics["samples"]]
    summary = {"metrics": metrics["summary"]}
    grades_path = Path(args.grades) if args.grades else src / "grades.json"
    if grades_path.exists():
        grades = json.loads(grades_path.read_text())
        per_aspect: dict[str, list[float]] = {}
        for r in rows:
            g = grades.get(r["id"])
            if not g:
                continue
            for aspect, st in g["aspects"].items():
                r[f"grade_{aspect}"] = st["mean"]
                per_aspect.setdefault(aspect, []).append(st["mean"])
        summary["grades"] = {a: float(np.mean(v)) for a, v in per_aspect.items()}
    out.mkdir(parents=True, exist_ok=True)
    (out / "summary.json").write_text(json.dumps({**header, **summary}, indent=2, sort_keys=True))
    fields = ["id"] + sorted({k for r in rows for k in r} - {"id"})
    with open(out / "per_sample.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        writer.writerows(rows)
    print(json.dumps({"summary": str(out / "summary.json"), "csv": str(out / "per_sample.csv")}))
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data, "train": cmd_train, "sample": cmd_sample, "refine": cmd_refine,
    "eval": cmd_eval, "judge": cmd_judge, "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="vtonflow", description="Sprite-world video try-on toolkit")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="JSON run configuration")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config value (dotted key, JSON value)")
        sp.add_argument("--seed", type=int, help="override the global seed")
        return sp

    g = common(sub.add_parser("gen-data", help="render the sprite benchmark"))
    g.add_argument("--out", help="dataset directory (default: data.path)")
    g.add_argument("--highfps", action="store_true", help="render at 3x frame rate for the refiner")

    t = common(sub.add_parser("train", help="run the stage plan"))
    t.add_argument("--mode", choices=("staged", "direct"), default="staged")
    t.add_argument("--data")
    t.add_argument("--highfps", help="3x frame-rate dataset for a refiner stage")
    t.add_argument("--out", required=True)
    t.add_argument("--resume", help="checkpoint directory to resume from")
    t.add_argument("--log-every", type=int, default=10)

    s = common(sub.add_parser("sample", help="generate try-on videos"))
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data")
    s.add_argument("--out", required=True)
    s.add_argument("--split", choices=("train", "test", "aux"))
    s.add_argument("--limit", type=int)

    r = common(sub.add_parser("refine", help="3x frame-rate refinement of sampled videos"))
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--input", required=True, help="run directory produced by sample")
    r.add_argument("--data")
    r.add_argument("--out", required=True)

    e = common(sub.add_parser("eval", help="metrics against ground truth"))
    e.add_argument("--samples", required=True)
    e.add_argument("--data")
    e.add_argument("--out", required=True)

    j = common(sub.add_parser("judge", help="rubric grading"))
    j.add_argument("--samples", required=True)
    j.add_argument("--data")
    j.add_argument("--out", required=True)

    rp = common(sub.add_parser("report", help="summary JSON and per-sample CSV"))
    rp.add_argument("--eval", required=True, help="directory holding metrics.json")
    rp.add_argument("--grades", help="grades.json (default: next to metrics.json)")
    rp.add_argument("--out")
    return p


def run_command(argv) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    parser = build_parser()
    try:
        args = parser.parse_args(list(argv))
        cfg = resolve_config(args.config, args.set, args.seed)
        header = repro_header(args.command, cfg)
        print("# " + json.dumps(header, sort_keys=True), file=sys.stderr)
        return COMMANDS[args.command](args, cfg, header)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 2
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    except Exception as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return 1


def main() -> None:
    sys.exit(run_command(sys.argv[1:]))


if __name__ == "__main__":
    main()
