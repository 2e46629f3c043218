"""Command-line workflow: generate, split, pretrain, train, eval, report.

All commands share one working directory (``--out``).  Every artifact a
command writes embeds the sha256 hash of the producing configuration, and
``report`` refuses to mix results from different hashes unless told to.
Exit codes: 0 success, 2 configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
import time
from dataclasses import replace
from statistics import median
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .pipeline import MapVectorizer, PVDetector, RunConfig
from .render import render_svg
from .scenes import Scene, generate_dataset, split_geo
from .metrics import map_metric, scene_ground_truth
from .validation import (ConfigurationError, ContractViolation,
                         DegenerateGeometryError, DomainError,
                         GenerationError, NumericalError, SplitError)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3

log = logging.getLogger("uamap")

SCENES_FILE = "scenes.jsonl"
SPLIT_FILE = "split.json"
PV_CKPT = "pv.json"
MODEL_CKPT = "model.json"

_TRUTHY = {"1", "true", "yes", "on"}
_FALSY = {"0", "false", "no", "off"}


def _bool_field_names() -> List[str]:
    return [f.name for f in dataclasses.fields(RunConfig)
            if isinstance(f.default, bool)]


def parse_flags(spec: str) -> Dict[str, bool]:
    """Comma list of toggles: ``name`` or ``!name`` or ``name=0|1``."""
    known = set(_bool_field_names())
    out: Dict[str, bool] = {}
    for raw in spec.split(","):
        item = raw.strip()
        if not item:
            continue
        if "=" in item:
            name, _, value = item.partition("=")
            name = name.strip()
            value = value.strip().lower()
            if value in _TRUTHY:
                out[name] = True
            elif value in _FALSY:
                out[name] = False
            else:
                raise ConfigurationError(f"bad flag value {item!r}")
        elif item.startswith("!"):
            name = item[1:].strip()
            out[name] = False
        else:
            name = item
            out[name] = True
        if name not in known:
            raise ConfigurationError(
                f"unknown flag {name!r}; known: {sorted(known)}")
    return out


def load_config(args) -> RunConfig:
    if getattr(args, "config", None):
        try:
            with open(args.config) as f:
                cfg = RunConfig.from_dict(json.load(f))
        except FileNotFoundError:
            raise ConfigurationError(f"config file not found: {args.config}")
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"config is not valid JSON: {exc}")
    else:
        cfg = RunConfig()
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "mode", None) is not None:
        overrides["mode"] = args.mode
    if getattr(args, "flags", None):
        overrides.update(parse_flags(args.flags))
    if overrides:
        cfg = replace(cfg, **overrides)
    return cfg.validate()


def _write_json(path: str, payload: dict) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w") as f:
        json.dump(payload, f, indent=1)
        f.write("\n")
    os.replace(tmp, path)


def _read_json(path: str, what: str) -> dict:
    try:
        with open(path) as f:
            return json.load(f)
    except FileNotFoundError:
        raise ConfigurationError(f"{what} not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{what} is not valid JSON: {exc}")


def _read_scenes(out_dir: str) -> List[Scene]:
    path = os.path.join(out_dir, SCENES_FILE)
    try:
        with open(path) as f:
            lines = [line for line in f if line.strip()]
    except FileNotFoundError:
        raise ConfigurationError(
            f"no scene file at {path}; run `uamap gen` first")
    return [Scene.from_dict(json.loads(line)) for line in lines]


def _read_split(out_dir: str) -> dict:
    return _read_json(os.path.join(out_dir, SPLIT_FILE), "split manifest")


def _scenes_for_ids(scenes: Sequence[Scene], ids: Sequence[str],
                    what: str) -> List[Scene]:
    by_id = {s.scene_id: s for s in scenes}
    missing = [i for i in ids if i not in by_id]
    if missing:
        raise ConfigurationError(
            f"{what} references unknown scene ids, e.g. {missing[0]!r}")
    return [by_id[i] for i in ids]


# -- commands -------------------------------------------------------------------


def cmd_gen(args) -> int:
    cfg = load_config(args)
    os.makedirs(args.out, exist_ok=True)
    n = cfg.n_train + cfg.n_val
    scenes = generate_dataset(n, cfg.scene, base_seed=cfg.seed)
    path = os.path.join(args.out, SCENES_FILE)
    with open(path, "w") as f:
        for scene in scenes:
            f.write(json.dumps(scene.to_dict()) + "\n")
    classes: Dict[str, int] = {}
    for scene in scenes:
        for e in scene.elements:
            classes[e.class_name] = classes.get(e.class_name, 0) + 1
    _write_json(os.path.join(args.out, "gen.json"), {
        "kind": "gen",
        "config_hash": cfg.config_hash(),
        "seed": cfg.seed,
        "n_scenes": n,
        "class_counts": classes,
    })
    log.info("wrote %d scenes to %s", n, path)
    return EXIT_OK


def cmd_split(args) -> int:
    cfg = load_config(args)
    scenes = _read_scenes(args.out)
    result = split_geo(scenes, cfg.split, cfg.split_ratio, seed=cfg.seed)
    payload = result.to_dict()
    payload.update({"kind": "split", "config_hash": cfg.config_hash()})
    _write_json(os.path.join(args.out, SPLIT_FILE), payload)
    log.info("split %d/%d (overlap %.3f)", len(result.train),
             len(result.val), result.overlap_ratio)
    return EXIT_OK


def cmd_pretrain_pv(args) -> int:
    cfg = load_config(args)
    scenes = _read_scenes(args.out)
    split = _read_split(args.out)
    train = _scenes_for_ids(scenes, split["train"], "split manifest")
    det = PVDetector.from_config(cfg)
    det.fit(train, cfg.scene,
            log_path=os.path.join(args.out, "pv_log.jsonl"),
            log_meta={"config_hash": cfg.config_hash()})
    det.save(os.path.join(args.out, PV_CKPT),
             extra_meta={"config_hash": cfg.config_hash()})
    log.info("PV branch trained for %d steps; final loss %.3f",
             cfg.pv_steps, det.history_[-1]["total"])
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args)
    scenes = _read_scenes(args.out)
    split = _read_split(args.out)
    train = _scenes_for_ids(scenes, split["train"], "split manifest")

    pv: Optional[PVDetector] = None
    if cfg.pv_prompts and cfg.pretrained_pv:
        pv_path = args.pv or os.path.join(args.out, PV_CKPT)
        if not os.path.exists(pv_path):
            raise ConfigurationError(
                f"prompt branch is enabled but there is no PV checkpoint at "
                f"{pv_path}; run `uamap pretrain-pv` or disable the flag")
        pv = PVDetector.load(pv_path)

    est = MapVectorizer(cfg)
    est.fit(train, pv_detector=pv,
            log_path=os.path.join(args.out, "train_log.jsonl"))
    est.save(os.path.join(args.out, MODEL_CKPT))
    log.info("trained %d steps in %.1fs; final loss %.3f", cfg.steps,
             est.fit_seconds_, est.history_[-1]["total"])
    return EXIT_OK


def _oracle_predictions(scenes: Sequence[Scene]):
    preds = []
    for scene in scenes:
        preds.append([(e.class_id, 1.0, e.line.points)
                      for e in scene.elements])
    return preds


def cmd_eval(args) -> int:
    scenes = _read_scenes(args.out)
    split = _read_split(args.out)
    val = _scenes_for_ids(scenes, split["val"], "split manifest")

    if args.oracle:
        cfg = load_config(args)
        t0 = time.perf_counter()
        result = map_metric(_oracle_predictions(val),
                            [scene_ground_truth(s) for s in val])
        wall = time.perf_counter() - t0
        mode = "oracle"
        config_hash = cfg.config_hash()
    else:
        ckpt = args.ckpt or os.path.join(args.out, MODEL_CKPT)
        est = MapVectorizer.load(ckpt)
        mode = args.mode or est.config.mode
        t0 = time.perf_counter()
        result = est.evaluate(val, mode=mode,
                              degrade_fraction=est.config.degrade_val)
        wall = time.perf_counter() - t0
        config_hash = est.config.config_hash()

    payload = result.to_dict()
    payload.update({
        "kind": "eval",
        "config_hash": config_hash,
        "mode": mode,
        "n_scenes": len(val),
        "wall_seconds": wall,
    })
    path = os.path.join(args.out, f"results_{mode}.json")
    _write_json(path, payload)
    log.info("mAP %.4f over %d scenes (%s, %.2fs) -> %s", result.mAP,
             len(val), mode, wall, path)
    return EXIT_OK


def cmd_infer(args) -> int:
    scenes = _read_scenes(args.out)
    matches = [s for s in scenes if s.scene_id == args.scene]
    if not matches:
        raise ConfigurationError(
            f"scene {args.scene!r} not in {SCENES_FILE} "
            f"({len(scenes)} scenes available)")
    scene = matches[0]
    ckpt = args.ckpt or os.path.join(args.out, MODEL_CKPT)
    est = MapVectorizer.load(ckpt)
    mode = args.mode or est.config.mode
    elements = est.predict(scene, mode=mode)
    config_hash = est.config.config_hash()

    _write_json(os.path.join(args.out, f"pred_{scene.scene_id}.json"), {
        "kind": "predictions",
        "config_hash": config_hash,
        "mode": mode,
        "scene_id": scene.scene_id,
        "elements": [e.to_dict() for e in elements],
    })
    svg = render_svg(elements, scene=scene,
                     x_range=est.config.scene.x_range,
                     y_range=est.config.scene.y_range,
                     score_threshold=est.config.c_thr,
                     config_hash=config_hash)
    svg_path = os.path.join(args.out, f"pred_{scene.scene_id}.svg")
    with open(svg_path, "w") as f:
        f.write(svg)
    log.info("predictions for %s (%s) -> %s", scene.scene_id, mode, svg_path)
    return EXIT_OK


ABLATION_ROWS: List[Tuple[str, Dict[str, bool]]] = [
    ("baseline", dict(ua_attention=False, ua_head=False, pv_prompts=False,
                      inject_bev=False, inject_queries=False, mimic=False)),
    ("prompts", dict(ua_attention=False, ua_head=False, mimic=False)),
    ("ua", dict(pv_prompts=False, inject_bev=False, inject_queries=False,
                mimic=False)),
    ("both", dict(mimic=False)),
]


def cmd_ablate(args) -> int:
    cfg = load_config(args)
    scenes = _read_scenes(args.out)
    split = _read_split(args.out)
    train = _scenes_for_ids(scenes, split["train"], "split manifest")
    val = _scenes_for_ids(scenes, split["val"], "split manifest")

    seeds = [cfg.seed + i for i in range(args.seeds)]
    rows: List[dict] = []
    for seed in seeds:
        pv_cache: Optional[PVDetector] = None
        for name, overrides in ABLATION_ROWS:
            sub = replace(cfg, seed=seed, **overrides).validate()
            pv = None
            if sub.pv_prompts and sub.pretrained_pv:
                if pv_cache is None:
                    pv_cache = PVDetector.from_config(sub).fit(
                        train, sub.scene)
                pv = pv_cache
            est = MapVectorizer(sub).fit(train, pv_detector=pv)
            m = est.score(val, mode="full",
                          degrade_fraction=sub.degrade_val)
            rows.append({"row": name, "seed": seed, "mAP": m,
                         "config_hash": sub.config_hash()})
            log.info("ablate %-8s seed %d: mAP %.4f", name, seed, m)

    medians = {name: median(r["mAP"] for r in rows if r["row"] == name)
               for name, _ in ABLATION_ROWS}
    _write_json(os.path.join(args.out, "ablate.json"), {
        "kind": "ablate",
        "config_hash": cfg.config_hash(),
        "degrade_val": cfg.degrade_val,
        "seeds": seeds,
        "rows": rows,
        "medians": medians,
    })
    header = "row," + ",".join(f"seed{s}" for s in seeds) + ",median"
    lines = [header]
    for name, _ in ABLATION_ROWS:
        vals = [r["mAP"] for r in rows if r["row"] == name]
        lines.append(name + "," + ",".join(f"{v:.4f}" for v in vals) +
                     f",{medians[name]:.4f}")
    with open(os.path.join(args.out, "ablate.csv"), "w") as f:
        f.write("\n".join(lines) + "\n")
    log.info("medians: %s", medians)
    return EXIT_OK


def _report_rows(path: str) -> Tuple[str, List[Tuple[str, float]]]:
    """Returns (config_hash, [(label, mAP), ...]) for one input file."""
    payload = _read_json(path, "report input")
    kind = payload.get("kind")
    if kind == "eval":
        return payload["config_hash"], [
            (f"eval:{payload['mode']}", float(payload["mAP"]))]
    if kind == "ablate":
        return payload["config_hash"], [
            (f"ablate:{name}", float(value))
            for name, value in payload["medians"].items()]
    raise ConfigurationError(
        f"{path}: cannot report on kind={kind!r} "
        "(expected an eval or ablate result)")


def _bar_chart_svg(rows: List[Tuple[str, float]]) -> str:
    bar_h, gap, label_w, chart_w = 22, 8, 150, 420
    height = len(rows) * (bar_h + gap) + gap
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" '
        f'width="{label_w + chart_w + 70}" height="{height}">',
        f'<rect width="{label_w + chart_w + 70}" height="{height}" '
        'fill="#ffffff"/>',
    ]
    for i, (label, value) in enumerate(rows):
        y = gap + i * (bar_h + gap)
        w = max(1.0, value * chart_w)
        parts.append(f'<text x="4" y="{y + bar_h - 6}" font-size="12" '
                     f'font-family="sans-serif">{label}</text>')
        parts.append(f'<rect x="{label_w}" y="{y}" width="{w:.1f}" '
                     f'height="{bar_h}" fill="#4477cc"/>')
        parts.append(f'<text x="{label_w + w + 6:.1f}" y="{y + bar_h - 6}" '
                     f'font-size="12" font-family="sans-serif">'
                     f'{value:.3f}</text>')
    parts.append("</svg>")
    return "\n".join(parts)


def cmd_report(args) -> int:
    if not args.inputs:
        raise ConfigurationError("report needs at least one result file")
    hashes: Dict[str, str] = {}
    all_rows: List[Tuple[str, float, str]] = []
    for path in args.inputs:
        config_hash, rows = _report_rows(path)
        hashes[path] = config_hash
        all_rows.extend((label, value, config_hash) for label, value in rows)
    distinct = sorted(set(hashes.values()))
    if len(distinct) > 1 and not args.allow_mixed:
        raise ConfigurationError(
            f"inputs come from {len(distinct)} different configs "
            f"{[h[:12] for h in distinct]}; pass --allow-mixed to combine")

    os.makedirs(args.out, exist_ok=True)
    csv_path = os.path.join(args.out, "report.csv")
    with open(csv_path, "w") as f:
        f.write("label,mAP,config_hash\n")
        for label, value, config_hash in all_rows:
            f.write(f"{label},{value:.4f},{config_hash}\n")
    svg_path = os.path.join(args.out, "report.svg")
    with open(svg_path, "w") as f:
        f.write(_bar_chart_svg([(label, value)
                                for label, value, _ in all_rows]))
        f.write("\n")
    log.info("report over %d rows -> %s, %s", len(all_rows), csv_path,
             svg_path)
    return EXIT_OK


# -- argument parsing -----------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="uamap",
        description="Train and evaluate the uncertainty-aware map "
                    "vectorizer on synthetic scenes.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, mode_choices=("full", "mimic")):
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--mode", choices=mode_choices,
                       help="inference mode override")
        p.add_argument("--out", required=True, help="working directory")
        p.add_argument("--flags", help="comma list of feature toggles, "
                       "e.g. 'ua_attention,!mimic,pv_prompts=0'")

    common(sub.add_parser("gen", help="generate synthetic scenes"))
    common(sub.add_parser("split", help="write the train/val manifest"))
    common(sub.add_parser("pretrain-pv", help="train the PV branch"))

    p_train = sub.add_parser("train", help="train the full model")
    common(p_train)
    p_train.add_argument("--pv", help="PV checkpoint path "
                         f"(default <out>/{PV_CKPT})")

    p_eval = sub.add_parser("eval", help="Chamfer-AP evaluation on val")
    common(p_eval)
    p_eval.add_argument("--ckpt", help=f"model path (default <out>/{MODEL_CKPT})")
    p_eval.add_argument("--oracle", action="store_true",
                        help="score ground truth against itself")

    p_infer = sub.add_parser("infer", help="predict one scene, write SVG")
    common(p_infer)
    p_infer.add_argument("--ckpt", help="model checkpoint path")
    p_infer.add_argument("--scene", required=True, help="scene id")

    p_ablate = sub.add_parser("ablate", help="flag-grid training sweep")
    common(p_ablate)
    p_ablate.add_argument("--seeds", type=int, default=3,
                          help="number of seeds per row (default 3)")

    p_report = sub.add_parser("report", help="flatten results to CSV/SVG")
    p_report.add_argument("inputs", nargs="*", help="result JSON files")
    p_report.add_argument("--out", required=True)
    p_report.add_argument("--allow-mixed", action="store_true",
                          help="combine results from different config hashes")
    return parser


COMMANDS = {
    "gen": cmd_gen,
    "split": cmd_split,
    "pretrain-pv": cmd_pretrain_pv,
    "train": cmd_train,
    "eval": cmd_eval,
    "infer": cmd_infer,
    "ablate": cmd_ablate,
    "report": cmd_report,
}

_CONFIG_ERRORS = (ConfigurationError, ContractViolation, GenerationError,
                  SplitError, DomainError, DegenerateGeometryError,
                  FileNotFoundError)


def main(argv: Optional[Sequence[str]] = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s",
                        stream=sys.stderr)
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except _CONFIG_ERRORS as exc:
        log.error("configuration error: %s", exc)
        return EXIT_CONFIG
    except NumericalError as exc:
        log.error("numerical failure: %s", exc)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
