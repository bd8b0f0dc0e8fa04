"""Training loop, checkpoint I/O and the experiment configuration."""
from __future__ import annotations

import csv
import io
import itertools
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, List, Optional, Tuple

import numpy as np
import torch

from .errors import CompatibilityError, ConfigError, DivergenceError, ParameterError
from .inference import segment
from .losses import LossConfig, combined_loss
from .metrics import dice_coefficient
from .network import Network, NetworkConfig, build_network
from .phantom import load_case, resplit
from .pipeline import Batch, PatchPipeline, SamplerConfig
from .volgrid import VolumeGrid, normalize_hu

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"ESOSEG-CHECKPOINT 1\n"


@dataclass(frozen=True)
class TrainConfig:
    network: NetworkConfig = field(default_factory=NetworkConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    lr: float = 1e-3
    betas: Tuple[float, float] = (0.9, 0.999)
    epochs: int = 10
    steps_per_epoch: int = 100
    batch_size: int = 7
    seed: int = 0
    split_id: Optional[int] = 1
    workers: int = 1
    stop_at_val_dsc: Optional[float] = None

    def __post_init__(self):
        if self.epochs < 1 or self.steps_per_epoch < 1:
            raise ConfigError("epochs and steps_per_epoch must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.split_id not in (None, 1, 2, 3):
            raise ConfigError("split_id must be 1, 2, 3 or null")
        object.__setattr__(self, "betas", tuple(self.betas))

    def to_dict(self) -> dict:
        return {
            "network": self.network.to_dict(),
            "loss": self.loss.to_dict(),
            "sampler": self.sampler.to_dict(),
            "optimizer": {"lr": self.lr, "betas": list(self.betas)},
            "epochs": self.epochs,
            "steps_per_epoch": self.steps_per_epoch,
            "batch_size": self.batch_size,
            "seed": self.seed,
            "split_id": self.split_id,
            "workers": self.workers,
            "stop_at_val_dsc": self.stop_at_val_dsc,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        net = d.pop("network", {})
        kwargs = {
            "network": NetworkConfig.for_variant(**net) if "dilation_ddb" not in net
            else NetworkConfig.from_dict(net),
            "loss": LossConfig.from_dict(d.pop("loss", {})),
            "sampler": SamplerConfig.from_dict(d.pop("sampler", {})),
        }
        opt = d.pop("optimizer", {})
        if "lr" in opt:
            kwargs["lr"] = opt["lr"]
        if "betas" in opt:
            kwargs["betas"] = tuple(opt["betas"])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        kwargs.update(d)
        return cls(**kwargs)

    @classmethod
    def load(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class TrainLog:
    records: List[dict] = field(default_factory=list)
    wall_clock: List[float] = field(default_factory=list)

    LOG_COLUMNS = ("step", "epoch", "loss", "val_dsc")

    def __eq__(self, other):
        return isinstance(other, TrainLog) and self.to_csv() == other.to_csv()

    def add(self, step, epoch, loss, val_dsc=math.nan, elapsed=0.0):
        self.records.append({"step": step, "epoch": epoch, "loss": loss, "val_dsc": val_dsc})
        self.wall_clock.append(elapsed)

    @property
    def losses(self) -> List[float]:
        return [r["loss"] for r in self.records]

    @property
    def val_dsc(self) -> List[float]:
        return [r["val_dsc"] for r in self.records if not math.isnan(r["val_dsc"])]

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=self.LOG_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for r in self.records:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text


# -- checkpoints ---------------------------------------------------------------

def save_checkpoint(net: Network, path) -> None:
    """Magic line, one-line JSON header, then raw little-endian tensor payload."""
    entries, blobs, offset = [], [], 0
    for name, tensor in net.state_dict().items():
        arr = tensor.detach().cpu().numpy()
        arr = arr.astype(arr.dtype.newbyteorder("<"))
        raw = arr.tobytes(order="C")
        entries.append({"name": name, "shape": list(arr.shape), "dtype": arr.dtype.str,
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = {"config": net.cfg.to_dict(), "tensors": entries, "payload_bytes": offset}
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(json.dumps(header, sort_keys=True).encode("ascii") + b"\n")
        for raw in blobs:
            fh.write(raw)


def load_checkpoint(path, expected=None) -> Network:
    """Rebuild the network stored at ``path``.

    ``expected`` (a NetworkConfig or variant name) guards against loading a
    checkpoint of a different architecture.
    """
    data = Path(path).read_bytes()
    if not data.startswith(CHECKPOINT_MAGIC):
        raise CompatibilityError(f"{path}: not an esoseg checkpoint")
    body = data[len(CHECKPOINT_MAGIC):]
    nl = body.find(b"\n")
    if nl < 0:
        raise CompatibilityError(f"{path}: truncated header")
    try:
        header = json.loads(body[:nl].decode("ascii"))
        cfg = NetworkConfig.from_dict(header["config"])
    except (ValueError, KeyError, TypeError, ConfigError) as exc:
        raise CompatibilityError(f"{path}: unreadable header ({exc})") from exc
    payload = body[nl + 1:]
    if len(payload) != header["payload_bytes"]:
        raise CompatibilityError(
            f"{path}: payload has {len(payload)} bytes, header declares {header['payload_bytes']}")
    if expected is not None:
        want = expected.variant if isinstance(expected, NetworkConfig) else str(expected)
        if cfg.variant != want or (isinstance(expected, NetworkConfig) and cfg != expected):
            raise CompatibilityError(f"{path}: checkpoint holds {cfg.variant}, expected {want}")
    net = Network(cfg)
    state = {}
    for e in header["tensors"]:
        raw = payload[e["offset"]: e["offset"] + e["nbytes"]]
        arr = np.frombuffer(raw, dtype=np.dtype(e["dtype"])).reshape(e["shape"])
        state[e["name"]] = torch.from_numpy(arr.astype(arr.dtype.newbyteorder("=")).copy())
    try:
        net.load_state_dict(state, strict=True)
    except RuntimeError as exc:
        raise CompatibilityError(f"{path}: tensors do not match {cfg.variant}: {exc}") from exc
    net.eval()
    return net


# -- training -----------------------------------------------------------------

def _batches(pipe: PatchPipeline, seed: int) -> Iterator[Batch]:
    for epoch in itertools.count():
        yield from pipe.epoch([seed, epoch])


def validation_dsc(net: Network, cases) -> float:
    """Mean DSC of the post-processed 0.5-threshold segmentation."""
    scores = []
    for case in cases:
        image = VolumeGrid(normalize_hu(case.volume.voxels), case.volume.spacing, case.volume.origin)
        _, mask = segment(net, image)
        scores.append(dice_coefficient(mask, case.gtv))
    return float(np.mean(scores))


def train_step(net, optimizer, loss_cfg: LossConfig, batch: Batch, voxel_volume: float) -> float:
    net.train()
    x = torch.from_numpy(batch.inputs)[:, None]
    probs = net(x)[:, 1]
    labels = torch.from_numpy(batch.labels)
    sdf = torch.from_numpy(batch.sdf) if batch.sdf is not None else None
    loss = combined_loss(loss_cfg, probs, labels, sdf, voxel_volume)
    value = float(loss.detach())
    if not math.isfinite(value):
        return value
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()
    return value


def train(cfg: TrainConfig, manifest: dict, out_dir=None) -> Tuple[Network, TrainLog]:
    """Optimise a fresh network on the manifest's train split.

    Validation DSC is computed after every epoch; with ``out_dir`` the best
    and final checkpoints, the log CSV and the config are written there.
    """
    if cfg.split_id is not None:
        manifest = resplit(manifest, cfg.split_id)
    train_cases = [c for c in manifest["cases"] if c["split"] == "train"]
    val_entries = [c for c in manifest["cases"] if c["split"] == "val"]
    if not train_cases or not val_entries:
        raise ParameterError("manifest needs non-empty train and val splits")

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2))

    torch.manual_seed(cfg.seed)
    net = build_network(cfg.network, cfg.seed)
    optimizer = torch.optim.Adam(net.parameters(), lr=cfg.lr, betas=cfg.betas)
    need_sdf = bool(cfg.loss.w_boundary or cfg.loss.w_distmap)
    pipe = PatchPipeline(train_cases, cfg.sampler, cfg.batch_size, cfg.workers, with_sdf=need_sdf)
    val_cases = [load_case(c) for c in val_entries]
    spacing = val_cases[0].volume.spacing
    voxel_volume = float(np.prod(spacing))

    history = TrainLog()
    stream = _batches(pipe, cfg.seed)
    best = -1.0
    start = time.perf_counter()
    step = 0
    try:
        for epoch in range(cfg.epochs):
            for _ in range(cfg.steps_per_epoch):
                batch = next(stream)
                loss = train_step(net, optimizer, cfg.loss, batch, voxel_volume)
                step += 1
                if not math.isfinite(loss):
                    record = {"step": step, "epoch": epoch, "loss": loss,
                              "scan_ids": [s.scan_id for s in batch.samples],
                              "seeds": [s.seed for s in batch.samples]}
                    if out is not None:
                        (out / "divergence.json").write_text(json.dumps(record, indent=2))
                    raise DivergenceError(f"non-finite loss at step {step}", record)
                history.add(step, epoch, loss, elapsed=time.perf_counter() - start)
            dsc = validation_dsc(net, val_cases)
            history.records[-1]["val_dsc"] = dsc
            log.info("epoch %d step %d loss %.4f val_dsc %.4f", epoch, step, loss, dsc)
            if out is not None:
                if dsc > best:
                    save_checkpoint(net, out / "best.ckpt")
                history.to_csv(out / "log.csv")
            best = max(best, dsc)
            if cfg.stop_at_val_dsc is not None and dsc >= cfg.stop_at_val_dsc:
                break
    finally:
        stream.close()
    if out is not None:
        save_checkpoint(net, out / "final.ckpt")
        history.to_csv(out / "log.csv")
    net.eval()
    return net, history
