"""Desk-scale experiments: overfit check, generalization comparison, three-split report.

Each function builds its own phantom corpus under ``work_dir`` and returns a
plain dict of the measured quantities, so the acceptance tests and the
command line can share them.
"""
from __future__ import annotations

import logging
import time
from pathlib import Path
from typing import Dict, Optional

import numpy as np

from .inference import segment
from .losses import LossConfig
from .metrics import evaluate_scan
from .network import NetworkConfig
from .phantom import generate_corpus, load_case, load_manifest
from .pipeline import SamplerConfig
from .report import run_report
from .trainer import TrainConfig, load_checkpoint, train, validation_dsc
from .volgrid import VolumeGrid, normalize_hu

log = logging.getLogger(__name__)

# smaller than the 72x72x24 default: keeps a 2000-step run inside a CPU budget
ACCEPTANCE_PATCH = (24, 24, 16)


def _corpus(work_dir: Path, n: int, fractions, seed: int, **base) -> dict:
    manifest_path = work_dir / "manifest.json"
    if not manifest_path.exists():
        generate_corpus(n, fractions, seed=seed, out_dir=work_dir, **base)
    return load_manifest(manifest_path)


def overfit_experiment(work_dir, n_phantoms: int = 10, max_steps: int = 2000, target: float = 0.95,
                       steps_per_epoch: int = 100, patch_size=ACCEPTANCE_PATCH, seed: int = 0,
                       loss: Optional[LossConfig] = None) -> dict:
    """Train the default DDAUnet on ``n_phantoms`` cases and track train-set DSC.

    Every case is used for training and, unchanged, as the validation set, so
    the per-epoch validation DSC is the train-set DSC.  Training stops early
    once it reaches ``target``.
    """
    work_dir = Path(work_dir)
    manifest = _corpus(work_dir / "corpus", n_phantoms, (0.6, 0.2, 0.2), seed)
    cases = [dict(c, split="train") for c in manifest["cases"]]
    manifest = dict(manifest, cases=cases + [dict(c, split="val") for c in cases])
    cfg = TrainConfig(loss=loss or LossConfig(), sampler=SamplerConfig(patch_size=tuple(patch_size)),
                      epochs=-(-max_steps // steps_per_epoch), steps_per_epoch=steps_per_epoch,
                      seed=seed, split_id=None, stop_at_val_dsc=target)
    start = time.perf_counter()
    net, history = train(cfg, manifest, out_dir=work_dir / "run")
    seconds = time.perf_counter() - start
    return {"train_dsc": history.val_dsc[-1], "best_train_dsc": max(history.val_dsc),
            "steps": len(history.records), "seconds": seconds, "val_curve": history.val_dsc,
            "parameters": net.parameter_count}


def heldout_dsc(net, entries) -> Dict[str, float]:
    """Per-scan DSC of the post-processed segmentation."""
    out = {}
    for entry in entries:
        out[entry["scan_id"]] = validation_dsc(net, [load_case(entry)])
    return out


def generalization_experiment(work_dir, n_phantoms: int = 80, fractions=(0.6, 0.15, 0.25),
                              epochs: int = 10, steps_per_epoch: int = 100,
                              patch_size=ACCEPTANCE_PATCH, seed: int = 0,
                              losses: Optional[Dict[str, LossConfig]] = None) -> dict:
    """Train one model per loss on the same split; score the held-out test split.

    The default 80-case corpus splits into 48 train, 12 validation and 20
    test phantoms.  The best-validation checkpoint of each run is scored.
    """
    work_dir = Path(work_dir)
    manifest = _corpus(work_dir / "corpus", n_phantoms, fractions, seed)
    test_entries = [c for c in manifest["cases"] if c["split"] == "test"]
    losses = losses or {"dice+bl": LossConfig(), "dice": LossConfig(w_boundary=0.0)}
    results = {"n_train": sum(c["split"] == "train" for c in manifest["cases"]),
               "n_val": sum(c["split"] == "val" for c in manifest["cases"]),
               "n_test": len(test_entries)}
    for name, loss in losses.items():
        cfg = TrainConfig(loss=loss, sampler=SamplerConfig(patch_size=tuple(patch_size)),
                          epochs=epochs, steps_per_epoch=steps_per_epoch, seed=seed, split_id=None)
        start = time.perf_counter()
        train(cfg, manifest, out_dir=work_dir / name)
        net = load_checkpoint(work_dir / name / "best.ckpt")
        scores = heldout_dsc(net, test_entries)
        results[name] = {"test_dsc": float(np.mean(list(scores.values()))), "per_scan": scores,
                         "seconds": time.perf_counter() - start}
        log.info("%s: test DSC %.4f", name, results[name]["test_dsc"])
    return results


def three_split_report(work_dir, n_phantoms: int = 10, steps: int = 2, patch_size=(16, 16, 8),
                       network: Optional[NetworkConfig] = None, seed: int = 0,
                       base: Optional[dict] = None) -> dict:
    """Train one model per train/val repeat 1-3 and report per-split and pooled test metrics."""
    work_dir = Path(work_dir)
    manifest = _corpus(work_dir / "corpus", n_phantoms, (0.6, 0.2, 0.2), seed, **(base or {}))
    test_entries = [c for c in manifest["cases"] if c["split"] == "test"]
    split_rows = {}
    for split_id in (1, 2, 3):
        cfg = TrainConfig(network=network or NetworkConfig(),
                          sampler=SamplerConfig(patch_size=tuple(patch_size)), epochs=1,
                          steps_per_epoch=steps, seed=seed, split_id=split_id)
        net, _ = train(cfg, manifest)
        rows = []
        for entry in test_entries:
            case = load_case(entry)
            image = VolumeGrid(normalize_hu(case.volume.voxels), case.volume.spacing, case.volume.origin)
            _, mask = segment(net, image)
            rows.append(evaluate_scan(mask, case.gtv).as_row(entry["scan_id"], str(split_id),
                                                             entry.get("tags", ())))
        split_rows[split_id] = rows
    return run_report(split_rows, manifest)
