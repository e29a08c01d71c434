"""Command-line front end.

Exit codes: 0 success, 2 invalid input (files, JSON, config, scene counts),
3 numeric failure (NaN or overflow during a fit, reported with its step).
Every JSON artifact is written with sorted keys and carries the fully
resolved configuration under ``"config"``.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import Any, Optional, Sequence

import numpy as np

from . import config as config_mod
from .assigner import compare_simota_ot, cost_matrix
from .augment import Scene, color_jitter, hflip, mixup, mosaic
from .config import ConfigError, RunConfig
from .evalmap import evaluate
from .geometry import BBox, LabeledBox
from .gridhead import DecodedBatch, DecodeOverflowError, build_anchors
from .losses import NumericFailure
from .postprocess import Detection
from .ppm import read_ppm, write_ppm
from .rng import SplitMix64
from .synthfit import ASSIGNERS, assign, fit, init_predictions, make_scene, roadmap_report

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_NUMERIC = 3
THREADS_ENV = "SIMOTA_KIT_THREADS"


class InputError(ValueError):
    pass


# -- file formats ------------------------------------------------------------

def _clean(obj: Any) -> Any:
    """numpy scalars to Python, non-finite floats to null."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.generic):
        obj = obj.item()
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    return obj


def dumps(obj: Any) -> str:
    return json.dumps(_clean(obj), sort_keys=True, indent=2, allow_nan=False) + "\n"


def write_json(path: Path, obj: Any) -> None:
    path.write_text(dumps(obj))


def read_json(path: Path) -> Any:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise InputError(f"{path}: cannot read ({exc.strerror})") from exc
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: malformed JSON at line {exc.lineno} column {exc.colno}") from exc


def write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence[Any]]) -> None:
    def cell(v):
        if v is None or (isinstance(v, float) and math.isnan(v)):
            return ""
        return repr(float(v)) if isinstance(v, (float, np.floating)) else v

    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([cell(v) for v in r])


SCENE_KEYS = {"id", "width", "height", "image", "gts"}
GT_KEYS = {"cx", "cy", "w", "h", "class_id"}


def scene_to_json(scene: Scene, image_name: str) -> dict:
    return {
        "id": scene.id,
        "width": scene.width,
        "height": scene.height,
        "image": image_name,
        "gts": [{"cx": g.box.cx, "cy": g.box.cy, "w": g.box.w, "h": g.box.h, "class_id": g.class_id}
                for g in scene.gts],
    }


def save_scene(scene: Scene, json_path: Path) -> None:
    """Write ``<stem>.ppm`` next to the scene JSON; the JSON refers to it by file name."""
    json_path = Path(json_path)
    image_path = json_path.with_suffix(".ppm")
    write_ppm(image_path, scene.image)
    write_json(json_path, scene_to_json(scene, image_path.name))


def load_scene(path: Path) -> Scene:
    path = Path(path)
    data = read_json(path)
    if not isinstance(data, dict):
        raise InputError(f"{path}: expected a JSON object")
    missing = SCENE_KEYS - data.keys()
    extra = data.keys() - SCENE_KEYS
    if missing:
        raise InputError(f"{path}: missing key {sorted(missing)[0]!r}")
    if extra:
        raise InputError(f"{path}: unknown key {sorted(extra)[0]!r}")
    image_path = path.parent / str(data["image"])
    try:
        image = read_ppm(image_path)
    except OSError as exc:
        raise InputError(f"{path}: image {image_path}: {exc.strerror}") from exc
    except ValueError as exc:
        raise InputError(f"{path}: image: {exc}") from exc
    if (image.shape[1], image.shape[0]) != (data["width"], data["height"]):
        raise InputError(f"{path}: image is {image.shape[1]}x{image.shape[0]}, "
                         f"scene says {data['width']}x{data['height']}")
    if not isinstance(data["gts"], list):
        raise InputError(f"{path}: gts must be a list")
    gts = []
    for i, g in enumerate(data["gts"]):
        if not isinstance(g, dict) or g.keys() != GT_KEYS:
            raise InputError(f"{path}: gts[{i}] must have exactly the keys {sorted(GT_KEYS)}")
        if not isinstance(g["class_id"], int) or isinstance(g["class_id"], bool) or g["class_id"] < 0:
            raise InputError(f"{path}: gts[{i}].class_id must be a non-negative integer")
        try:
            box = BBox(float(g["cx"]), float(g["cy"]), float(g["w"]), float(g["h"]))
        except (TypeError, ValueError) as exc:
            raise InputError(f"{path}: gts[{i}]: {exc}") from exc
        gts.append(LabeledBox(box, g["class_id"]))
    try:
        return Scene(image, tuple(gts), str(data["id"]))
    except ValueError as exc:
        raise InputError(f"{path}: {exc}") from exc


def load_detections(path: Path) -> tuple[str, list[Detection]]:
    data = read_json(path)
    if not isinstance(data, dict) or set(data) != {"scene", "detections"}:
        raise InputError(f"{path}: expected an object with keys 'scene' and 'detections'")
    try:
        return str(data["scene"]), [Detection.from_json(d) for d in data["detections"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise InputError(f"{path}: bad detection record ({exc})") from exc


def detections_json(scene_id: str, dets: Sequence[Detection]) -> dict:
    return {"scene": scene_id, "detections": [d.to_json() for d in dets]}


# -- helpers -----------------------------------------------------------------

def resolve_threads(flag: Optional[int]) -> int:
    if flag is not None:
        n = flag
    else:
        env = os.environ.get(THREADS_ENV)
        if env is None or env == "":
            return 1
        try:
            n = int(env)
        except ValueError as exc:
            raise InputError(f"{THREADS_ENV}: expected an integer, got {env!r}") from exc
    if n < 1:
        raise InputError(f"threads must be >= 1, got {n}")
    return n


def _resolve(args) -> RunConfig:
    overrides = {"seed": getattr(args, "seed", None), "preset": getattr(args, "preset", None),
                 "assigner": getattr(args, "assigner", None)}
    return config_mod.load(args.config, overrides)


def _check_spec(cfg: RunConfig, scene: Scene) -> None:
    if (scene.height, scene.width) != cfg.fpn.input_size:
        raise InputError(f"scene {scene.id!r} is {scene.height}x{scene.width} but fpn.input_size is "
                         f"{cfg.fpn.input_size[0]}x{cfg.fpn.input_size[1]}")
    for i, g in enumerate(scene.gts):
        if g.class_id >= cfg.num_classes:
            raise InputError(f"scene {scene.id!r}: gts[{i}].class_id {g.class_id} >= num_classes {cfg.num_classes}")


def _out_dir(path: str) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _scene_predictions(cfg: RunConfig, scene: Scene):
    anchors = build_anchors(cfg.fpn)
    preds = init_predictions(scene, anchors, cfg.num_classes, cfg.fit.init_noise, cfg.seed)
    return anchors, preds


# -- commands ----------------------------------------------------------------

def cmd_make_scenes(args) -> int:
    cfg = _resolve(args)
    out = _out_dir(args.out)
    h, w = cfg.fpn.input_size
    if h != w:
        raise InputError("make-scenes draws square scenes; set a square fpn.input_size")
    names = []
    for i in range(args.count):
        scene = make_scene(cfg.seed + i, args.objects, h, cfg.num_classes)
        name = f"scene_{i:03d}.json"
        save_scene(scene, out / name)
        names.append(name)
    write_json(out / "scenes.json", {"config": cfg.to_json(), "scenes": names, "objects": args.objects})
    return EXIT_OK


def cmd_assign(args) -> int:
    cfg = _resolve(args)
    scene = load_scene(args.scene)
    _check_spec(cfg, scene)
    anchors, preds = _scene_predictions(cfg, scene)
    result = assign(cfg.fit.assigner, preds, scene, anchors, cfg.assigner)
    report = {"config": cfg.to_json(), "scene": scene.id, "assigner": cfg.fit.assigner,
              "assignment": result.to_json()}
    write_json(Path(args.out), report)
    return EXIT_OK


def cmd_ot_compare(args) -> int:
    cfg = _resolve(args)
    scene = load_scene(args.scene)
    _check_spec(cfg, scene)
    anchors, preds = _scene_predictions(cfg, scene)
    cm = cost_matrix(DecodedBatch.from_raw(preds, anchors), scene.gts, anchors, cfg.assigner)
    result = compare_simota_ot(cm, cfg.assigner, eps=args.eps, max_iters=args.max_iters, tol=args.tol)
    write_json(Path(args.out), {"config": cfg.to_json(), "scene": scene.id, **result})
    return EXIT_OK


AUG_COUNTS = {"mosaic": 4, "mixup": 2, "flip": 1, "jitter": 1}


def cmd_augment(args) -> int:
    cfg = _resolve(args)
    need = AUG_COUNTS[args.op]
    if len(args.scenes) != need:
        raise InputError(f"--op {args.op} needs exactly {need} scene file(s), got {len(args.scenes)}")
    scenes = [load_scene(p) for p in args.scenes]
    rng = SplitMix64(cfg.seed)
    acfg = cfg.augment
    scene_id = f"{args.op}-{cfg.seed}"
    if args.op == "mosaic":
        result = mosaic(scenes, (scenes[0].height, scenes[0].width), acfg, rng, scene_id)
    elif args.op == "mixup":
        result = mixup(scenes[0], scenes[1], acfg, rng, scene_id=scene_id)
    elif args.op == "flip":
        result = hflip(scenes[0], rng, acfg)
    else:
        result = color_jitter(scenes[0], rng, acfg)
    out = _out_dir(args.out)
    save_scene(result.scene, out / f"{args.op}.json")
    write_json(out / f"{args.op}_transforms.json",
               {"config": cfg.to_json(), "op": args.op, "inputs": [s.id for s in scenes], **result.to_json()})
    return EXIT_OK


TRACE_HEADER = ("step", "cls", "obj", "reg", "total")


def cmd_fit(args) -> int:
    cfg = _resolve(args)
    scenes = [load_scene(p) for p in args.scenes]
    for s in scenes:
        _check_spec(cfg, s)
    resolve_threads(args.threads)  # validated; a single fit is sequential
    out = _out_dir(args.out)
    for scene in scenes:
        try:
            trace = fit(scene, cfg.fpn, cfg.fit, cfg.num_classes, cfg.loss, cfg.assigner)
        except (NumericFailure, DecodeOverflowError) as exc:
            step = getattr(exc, "step", None)
            raise NumericFailure(f"scene {scene.id!r}: {exc}", step=step) from exc
        rows = [(i + 1, l.cls, l.obj, l.reg, l.total) for i, l in enumerate(trace.losses)]
        write_csv(out / f"{scene.id}_trace.csv", TRACE_HEADER, rows)
        write_json(out / f"{scene.id}_detections.json", detections_json(scene.id, trace.detections))
        write_json(out / f"{scene.id}_summary.json", {"config": cfg.to_json(), "scene": scene.id, **trace.summary()})
    return EXIT_OK


def cmd_roadmap(args) -> int:
    cfg = _resolve(args)
    threads = resolve_threads(args.threads)
    if args.scenes:
        scenes = [load_scene(p) for p in args.scenes]
    else:
        h = cfg.fpn.input_size[0]
        scenes = [make_scene(cfg.seed + i, args.objects, h, cfg.num_classes) for i in range(args.count)]
    for s in scenes:
        _check_spec(cfg, s)
    configs = {name: replace(cfg.fit, assigner=name) for name in ASSIGNERS}
    rows, runs = roadmap_report(scenes, cfg.fpn, configs, cfg.num_classes, cfg.loss, cfg.assigner, threads)

    out = _out_dir(args.out)
    write_csv(out / "roadmap.csv", ("assigner", "mean_final_loss", "mean_ap50", "mean_steps_to_threshold",
                                    "reached", "runs"),
              [(r.assigner, r.mean_final_loss, r.mean_ap50, r.mean_steps_to_threshold, r.reached, r.runs)
               for r in rows])
    write_csv(out / "roadmap_runs.csv", ("scene", "assigner", "final_loss", "ap50", "map", "steps_to_threshold"),
              [(r["scene"], r["assigner"], r["final_loss"], r["ap50"], r["map"], r["steps_to_threshold"])
               for r in runs])

    by_scene: dict[str, dict] = {}
    for r in runs:
        by_scene.setdefault(r["scene"], {})[r["assigner"]] = r["steps_to_threshold"]

    def _steps(v):
        return math.inf if v is None else v

    paired = sum(_steps(d["multi3x3"]) <= _steps(d["single_center"]) for d in by_scene.values())

    anchors = build_anchors(cfg.fpn)
    ot = []
    for s in scenes:
        preds = init_predictions(s, anchors, cfg.num_classes, cfg.fit.init_noise, cfg.seed)
        cm = cost_matrix(DecodedBatch.from_raw(preds, anchors), s.gts, anchors, cfg.assigner)
        res = compare_simota_ot(cm, cfg.assigner)
        ot.append({"scene": s.id, "agreement": res["agreement"], "agreement_fg": res["agreement_fg"],
                   "sinkhorn": res["sinkhorn"], "wall_time": res["wall_time"]})
    report = {
        "config": cfg.to_json(),
        "rows": [r.as_dict() for r in rows],
        "multi3x3_not_slower_than_single_center": {"count": paired, "of": len(by_scene)},
        "ot_agreement": {
            "mean": float(np.mean([o["agreement"] for o in ot])) if ot else None,
            "mean_fg": float(np.mean([o["agreement_fg"] for o in ot])) if ot else None,
            "per_scene": ot,
        },
        "fit_wall_time": {f"{r['scene']}/{r['assigner']}": r["wall_time"] for r in runs},
    }
    write_json(out / "roadmap.json", report)
    for r in rows:
        print(f"{r.assigner:14s} loss={r.mean_final_loss:.4f} ap50={r.mean_ap50:.3f} "
              f"steps={r.mean_steps_to_threshold:.1f} reached={r.reached}/{r.runs}")
    return EXIT_OK


PR_HEADER = ("class_id", "iou_threshold", "rank", "recall", "precision")


def cmd_eval(args) -> int:
    cfg = _resolve(args)
    scenes = {}
    for p in args.scenes:
        s = load_scene(p)
        if s.id in scenes:
            raise InputError(f"{p}: duplicate scene id {s.id!r}")
        scenes[s.id] = s
    dets: dict[str, list[Detection]] = {sid: [] for sid in scenes}
    for p in args.detections:
        sid, d = load_detections(p)
        if sid not in scenes:
            raise InputError(f"{p}: detections for unknown scene {sid!r}")
        dets[sid].extend(d)
    report = evaluate([(dets[sid], scenes[sid].gts) for sid in sorted(scenes)])
    out = _out_dir(args.out)
    write_json(out / "report.json", {"config": cfg.to_json(), "scenes": sorted(scenes), **report.to_json()})
    rows = []
    for (c, t), curve in sorted(report.curves.items()):
        for rank, (rec, prec) in enumerate(curve.points(), start=1):
            rows.append((c, f"{t:.2f}", rank, rec, prec))
    write_csv(out / "pr.csv", PR_HEADER, rows)
    return EXIT_OK


# -- parser ------------------------------------------------------------------

def _u64(text: str) -> int:
    try:
        v = int(text, 0)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from exc
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return v


def _positive(text: str) -> int:
    try:
        v = int(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from exc
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def _nonnegative(text: str) -> int:
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError("must be >= 0")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="simota-kit", description="Anchor-free label assignment toolkit.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, assigner=False, preset=False, threads=False):
        sp.add_argument("--config", help="JSON run configuration")
        sp.add_argument("--seed", type=_u64, help="overrides the config seed")
        sp.add_argument("--out", required=True, help="output file or directory")
        if assigner:
            sp.add_argument("--assigner", choices=ASSIGNERS, help="overrides fit.assigner")
        if preset:
            sp.add_argument("--preset", choices=("small", "large"), help="augmentation preset")
        if threads:
            sp.add_argument("--threads", type=_positive, help=f"worker processes (env {THREADS_ENV})")
        return sp

    sp = common(sub.add_parser("make-scenes", help="write synthetic scenes as PPM + JSON"))
    sp.add_argument("--count", type=_positive, default=10)
    sp.add_argument("--objects", type=_nonnegative, default=5)
    sp.set_defaults(func=cmd_make_scenes)

    sp = common(sub.add_parser("assign", help="label assignment report for one scene"), assigner=True)
    sp.add_argument("scene")
    sp.set_defaults(func=cmd_assign)

    sp = common(sub.add_parser("ot-compare", help="SimOTA vs Sinkhorn OT on the same costs"))
    sp.add_argument("scene")
    sp.add_argument("--eps", type=float, default=0.1)
    sp.add_argument("--max-iters", type=_positive, default=10_000)
    sp.add_argument("--tol", type=float, default=1e-6)
    sp.set_defaults(func=cmd_ot_compare)

    sp = common(sub.add_parser("augment", help="mosaic, mixup, flip or color jitter"), preset=True)
    sp.add_argument("scenes", nargs="+")
    sp.add_argument("--op", choices=tuple(AUG_COUNTS), required=True)
    sp.set_defaults(func=cmd_augment)

    sp = common(sub.add_parser("fit", help="fit raw predictions to scenes by gradient descent"),
                assigner=True, threads=True)
    sp.add_argument("scenes", nargs="+")
    sp.set_defaults(func=cmd_fit)

    sp = common(sub.add_parser("roadmap", help="compare assigners over a scene set"), threads=True)
    sp.add_argument("scenes", nargs="*", help="scene files; synthetic scenes are drawn when omitted")
    sp.add_argument("--count", type=_positive, default=10)
    sp.add_argument("--objects", type=_nonnegative, default=5)
    sp.set_defaults(func=cmd_roadmap)

    sp = common(sub.add_parser("eval", help="mAP of detections against scene gts"))
    sp.add_argument("scenes", nargs="+")
    sp.add_argument("--detections", nargs="+", required=True)
    sp.set_defaults(func=cmd_eval)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage errors, which matches the input-error code
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (NumericFailure, DecodeOverflowError) as exc:
        step = getattr(exc, "step", None)
        where = f" at step {step}" if step is not None else ""
        print(f"simota-kit: numeric failure{where}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (InputError, ConfigError, ValueError) as exc:
        print(f"simota-kit: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
