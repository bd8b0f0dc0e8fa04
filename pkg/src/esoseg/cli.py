"""Command-line front end: generate, train, infer, evaluate, report, pr-curve.

Every subcommand writes its artifacts under ``--out`` together with a
``run.json`` recording the inputs (with content hashes), the effective
configuration, its hash and the seed.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from .errors import ConfigError, EsosegError, ParameterError
from .phantom import DEFAULT_PREVALENCE, generate_corpus, load_case, load_manifest, select

log = logging.getLogger("esoseg")

EXIT_CODES = {
    "error": 1,
    "config": 3,
    "parameter": 4,
    "format": 5,
    "shape": 6,
    "data": 7,
    "training": 8,
}


def config_hash(config: dict) -> str:
    text = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(text.encode()).hexdigest()


def _file_hash(path) -> Optional[str]:
    p = Path(path)
    if not p.is_file():
        return None
    h = hashlib.sha256()
    with open(p, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_run_record(out: Path, command: str, config: dict, inputs: dict, seed, argv) -> dict:
    record = {
        "command": command,
        "argv": list(argv),
        "inputs": {k: {"path": str(v), "sha256": _file_hash(v)} for k, v in inputs.items() if v},
        "config": config,
        "config_hash": config_hash(config),
        "seed": seed,
    }
    out.mkdir(parents=True, exist_ok=True)
    (out / "run.json").write_text(json.dumps(record, indent=2, sort_keys=True, default=str))
    return record


def _load_config(path) -> dict:
    if path is None:
        return {}
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc


def _cases(args, default_split="test") -> List[dict]:
    manifest = load_manifest(args.manifest)
    split = args.split or default_split
    cases = manifest["cases"] if split == "all" else select(manifest, split)
    if not cases:
        raise ParameterError(f"manifest has no cases in split {split!r}")
    return cases


def _pred_paths(pred_dir, scan_id):
    root = Path(pred_dir)
    return root / f"{scan_id}_prob.mha", root / f"{scan_id}_mask.mha"


# -- subcommands ---------------------------------------------------------------

def cmd_generate(args) -> dict:
    cfg = _load_config(args.config)
    cfg.setdefault("n", 80)
    cfg.setdefault("split_fractions", [0.6, 0.2, 0.2])
    cfg.setdefault("prevalence", dict(DEFAULT_PREVALENCE))
    cfg.setdefault("base", {})
    if args.seed is not None:
        cfg["seed"] = args.seed
    cfg.setdefault("seed", 0)
    if args.n is not None:
        cfg["n"] = args.n
    unknown = set(cfg) - {"n", "split_fractions", "prevalence", "base", "seed"}
    if unknown:
        raise ConfigError(f"unknown generate config keys {sorted(unknown)}")
    generate_corpus(cfg["n"], cfg["split_fractions"], cfg["seed"], args.out,
                    cfg["prevalence"], **cfg["base"])
    return {"config": cfg, "seed": cfg["seed"], "inputs": {"config": args.config}}


def cmd_train(args) -> dict:
    from .trainer import TrainConfig, train

    raw = _load_config(args.config)
    cfg = TrainConfig.from_dict(raw)
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.split is not None:
        overrides["split_id"] = int(args.split)
    if args.workers is not None:
        overrides["workers"] = args.workers
    cfg = dataclasses.replace(cfg, **overrides)
    _, history = train(cfg, load_manifest(args.manifest), args.out)
    summary = {"steps": len(history.records), "val_dsc": history.val_dsc,
               "final_loss": history.losses[-1] if history.losses else None}
    return {"config": cfg.to_dict(), "seed": cfg.seed, "summary": summary,
            "inputs": {"config": args.config, "manifest": args.manifest}}


def cmd_infer(args) -> dict:
    from .inference import binarize, infer_volume, largest_component
    from .trainer import load_checkpoint
    from .volgrid import VolumeGrid, normalize_hu, save_volume

    cfg = {"tau": 0.5, "max_voxels": 4_000_000, "workers": 1, "overlay": False}
    cfg.update(_load_config(args.config))
    if args.tau is not None:
        cfg["tau"] = args.tau
    if args.overlay:
        cfg["overlay"] = True
    net = load_checkpoint(args.checkpoint)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    slice_rows = []
    for entry in _cases(args):
        case = load_case(entry)
        image = VolumeGrid(normalize_hu(case.volume.voxels), case.volume.spacing, case.volume.origin)
        prob = infer_volume(net, image, max_voxels=cfg["max_voxels"], workers=cfg["workers"])
        mask = largest_component(binarize(prob, cfg["tau"]))
        prob_path, mask_path = _pred_paths(out, entry["scan_id"])
        save_volume(prob, prob_path)
        save_volume(mask, mask_path)
        if cfg["overlay"]:
            slice_rows += export_overlay(out / "overlays", entry["scan_id"], case, mask)
        log.info("inferred %s", entry["scan_id"])
    if cfg["overlay"]:
        with open(out / "per_slice_dsc.csv", "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=("scan_id", "z", "dsc"))
            writer.writeheader()
            writer.writerows(slice_rows)
    return {"config": cfg, "seed": None,
            "inputs": {"config": args.config, "manifest": args.manifest, "checkpoint": args.checkpoint}}


def export_overlay(out_dir: Path, scan_id: str, case, mask) -> List[dict]:
    """PNG per GTV/prediction slice (GT green, prediction red) and per-slice DSC rows."""
    from PIL import Image

    from .metrics import per_slice_dice
    from .volgrid import normalize_hu

    out_dir.mkdir(parents=True, exist_ok=True)
    dsc = per_slice_dice(mask, case.gtv)
    gray = (normalize_hu(case.volume.voxels) * 255).astype(np.uint8)
    rows = []
    for z in np.flatnonzero(~np.isnan(dsc)):
        rgb = np.repeat(gray[:, :, z].T[..., None], 3, axis=2)
        rgb[case.gtv.voxels[:, :, z].T, 1] = 255
        rgb[mask.voxels[:, :, z].T, 0] = 255
        Image.fromarray(rgb).save(out_dir / f"{scan_id}_z{z:03d}.png")
        rows.append({"scan_id": scan_id, "z": int(z), "dsc": float(dsc[z])})
    return rows


def cmd_evaluate(args) -> dict:
    from .metrics import evaluate_scan, write_metrics_csv
    from .volgrid import load_volume

    rows = []
    for entry in _cases(args):
        gt = load_case(entry).gtv
        pred = load_volume(_pred_paths(args.pred, entry["scan_id"])[1], "mask")
        m = evaluate_scan(pred, gt)
        rows.append(m.as_row(entry["scan_id"], args.label or entry["split"], entry.get("tags", ())))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_metrics_csv(out / "metrics.csv", rows)
    return {"config": {"split": args.split or "test", "label": args.label}, "seed": None,
            "inputs": {"manifest": args.manifest}}


def cmd_report(args) -> dict:
    from .report import run_report, write_report

    sources = {}
    for item in args.metrics:
        key, sep, path = item.partition("=")
        if not sep:
            key, path = str(len(sources) + 1), item
        sources[key] = path
    manifest = load_manifest(args.manifest) if args.manifest else None
    doc = run_report(sources, manifest)
    write_report(doc, args.out)
    sys.stdout.write((Path(args.out) / "report.txt").read_text())
    return {"config": {"metrics": sources}, "seed": None,
            "inputs": {f"metrics_{k}": v for k, v in sources.items()}}


def cmd_pr_curve(args) -> dict:
    from .metrics import default_thresholds, precision_recall_auc
    from .volgrid import load_volume

    cfg = {"n_thresholds": 101}
    cfg.update(_load_config(args.config))
    probs, gts = [], []
    for entry in _cases(args):
        probs.append(load_volume(_pred_paths(args.pred, entry["scan_id"])[0], "scalar").voxels)
        gts.append(load_case(entry).gtv.voxels)
    curve = precision_recall_auc(probs, gts, default_thresholds(cfg["n_thresholds"]))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "pr_curve.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("threshold", "precision", "recall"))
        writer.writerows(zip(curve.thresholds.tolist(), curve.precision.tolist(), curve.recall.tolist()))
    (out / "auc.json").write_text(json.dumps({"auc": curve.auc}))
    print(f"AUC {curve.auc:.4f}")
    return {"config": cfg, "seed": None, "inputs": {"manifest": args.manifest}}


# -- parser --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="esoseg", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, manifest=True):
        p.add_argument("--config", help="JSON configuration file")
        p.add_argument("--seed", type=int)
        p.add_argument("--split")
        p.add_argument("--out", required=True, help="run directory")
        if manifest:
            p.add_argument("--manifest", required=True)

    p = sub.add_parser("generate", help="write a phantom corpus")
    common(p, manifest=False)
    p.add_argument("--n", type=int)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train a network (--split selects the train/val repeat 1-3)")
    common(p)
    p.add_argument("--workers", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="probability maps and post-processed masks")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--tau", type=float)
    p.add_argument("--overlay", action="store_true", help="export per-slice overlays and DSC")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("evaluate", help="per-scan metrics CSV")
    common(p)
    p.add_argument("--pred", required=True, help="directory written by infer")
    p.add_argument("--label", help="value of the split column (default: manifest split)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="per-split and pooled summary")
    common(p, manifest=False)
    p.add_argument("--manifest", help="corpus manifest supplying tags")
    p.add_argument("--metrics", nargs="+", required=True, metavar="SPLIT=CSV")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("pr-curve", help="pooled voxelwise precision-recall sweep")
    common(p)
    p.add_argument("--pred", required=True)
    p.set_defaults(func=cmd_pr_curve)
    return parser


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        result = args.func(args)
        write_run_record(Path(args.out), args.command, result["config"], result.get("inputs", {}),
                         result.get("seed"), argv)
    except EsosegError as exc:
        print(f"esoseg: {exc.category} error: {exc}", file=sys.stderr)
        return EXIT_CODES.get(exc.category, 1)
    except (OSError, KeyError) as exc:
        print(f"esoseg: io error: {exc}", file=sys.stderr)
        return EXIT_CODES["format"]
    return 0


if __name__ == "__main__":
    sys.exit(main())
