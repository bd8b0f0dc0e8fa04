"""Patch sampling, noise augmentation and the concurrent batch stream.

The stream runs three stages: a fetch thread loads scans into RAM, extract
workers cut and augment patches, and the calling generator assembles
batches.  Every patch is a pure function of ``(scan, seed)``; the per-epoch
plan of seeds is drawn up front, so the multiset of patches in an epoch does
not depend on the worker count.
"""
from __future__ import annotations

import queue
import threading
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import ParameterError, SamplingError
from .losses import signed_distance_map
from .phantom import PhantomCase, load_case
from .volgrid import BinaryMask, HU_WINDOW, normalize_hu

BODY_THRESHOLD_HU = -900.0
NOISE_UNITS = ("normalized", "hu")


@dataclass(frozen=True)
class SamplerConfig:
    patch_size: Tuple[int, int, int] = (72, 72, 24)
    tumor_fraction: float = 0.5
    noise_sigma_max: float = 5.0
    noise_units: str = "hu"
    patches_per_case: int = 7
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "patch_size", tuple(int(p) for p in self.patch_size))
        if len(self.patch_size) != 3 or any(p <= 0 or p % 4 for p in self.patch_size):
            raise ParameterError(f"patch dims must be positive multiples of 4, got {self.patch_size}")
        if not 0.0 <= self.tumor_fraction <= 1.0:
            raise ParameterError("tumor_fraction must lie in [0, 1]")
        if self.noise_sigma_max < 0:
            raise ParameterError("noise_sigma_max must be >= 0")
        if self.noise_units not in NOISE_UNITS:
            raise ParameterError(f"noise_units must be one of {NOISE_UNITS}")
        if self.patches_per_case < 1:
            raise ParameterError("patches_per_case must be >= 1")

    @property
    def noise_scale(self) -> float:
        """Factor converting sigma' into the units of the normalised input."""
        if self.noise_units == "hu":
            return 1.0 / (HU_WINDOW[1] - HU_WINDOW[0])
        return 1.0

    @classmethod
    def from_dict(cls, d: dict) -> "SamplerConfig":
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True, eq=False)
class PatchSample:
    input: np.ndarray
    label: np.ndarray
    scan_id: str
    corner: Tuple[int, int, int]
    seed: int
    sdf: Optional[np.ndarray] = None
    noise_sigma: float = 0.0

    @property
    def key(self):
        return (self.scan_id, self.corner, self.seed)


@dataclass(frozen=True, eq=False)
class LoadedCase:
    """A scan held in RAM in network units, with index lists for sampling."""

    scan_id: str
    image: np.ndarray
    gtv: np.ndarray
    spacing: Tuple[float, float, float]
    gtv_index: np.ndarray
    body_index: np.ndarray
    sdf: Optional[np.ndarray] = None


def prepare_case(case: PhantomCase, with_sdf: bool = False, scan_id: str = None) -> LoadedCase:
    hu = case.volume.voxels
    gtv = case.gtv.voxels
    sdf = None
    if with_sdf and gtv.any() and not gtv.all():
        sdf = signed_distance_map(case.gtv).voxels.astype(np.float32)
    return LoadedCase(
        scan_id=scan_id or case.scan_id,
        image=normalize_hu(hu),
        gtv=gtv,
        spacing=case.volume.spacing,
        gtv_index=np.flatnonzero(gtv),
        body_index=np.flatnonzero(hu > BODY_THRESHOLD_HU),
        sdf=sdf,
    )


def crop_patch(arr: np.ndarray, corner, size, fill=0) -> np.ndarray:
    """Sub-array of ``size`` at ``corner``, filled with ``fill`` where it overhangs."""
    out = np.full(size, fill, dtype=arr.dtype)
    src, dst = [], []
    for c, s, n in zip(corner, size, arr.shape):
        lo, hi = max(c, 0), min(c + s, n)
        if hi <= lo:
            return out
        src.append(slice(lo, hi))
        dst.append(slice(lo - c, hi - c))
    out[tuple(dst)] = arr[tuple(src)]
    return out


def _edge_crop(arr: np.ndarray, corner, size) -> np.ndarray:
    idx = np.ix_(*[np.clip(np.arange(c, c + s), 0, n - 1) for c, s, n in zip(corner, size, arr.shape)])
    return arr[idx]


def _as_seed(rng_state) -> int:
    if isinstance(rng_state, np.random.Generator):
        return int(rng_state.integers(0, 2**62))
    return int(rng_state)


def sample_patch(case: Union[PhantomCase, LoadedCase], cfg: SamplerConfig, rng_state) -> PatchSample:
    """Cut one patch centred on a GTV voxel (prob. tumor_fraction) or a body voxel."""
    if isinstance(case, PhantomCase):
        case = prepare_case(case)
    seed = _as_seed(rng_state)
    rng = np.random.default_rng(seed)
    want_tumor = rng.random() < cfg.tumor_fraction
    if want_tumor:
        if case.gtv_index.size == 0:
            raise SamplingError(f"{case.scan_id}: empty GTV with tumor_fraction > 0")
        flat = case.gtv_index[rng.integers(case.gtv_index.size)]
    else:
        pool = case.body_index if case.body_index.size else np.arange(case.image.size)
        flat = pool[rng.integers(pool.size)]
    center = np.unravel_index(int(flat), case.image.shape)
    size = cfg.patch_size
    corner = tuple(int(c - s // 2) for c, s in zip(center, size))
    sdf = None
    if case.sdf is not None:
        sdf = _edge_crop(case.sdf, corner, size)
    return PatchSample(
        input=crop_patch(case.image, corner, size, 0.0),
        label=crop_patch(case.gtv, corner, size, False),
        scan_id=case.scan_id,
        corner=corner,
        seed=seed,
        sdf=sdf,
    )


def augment_gaussian_noise(patch: PatchSample, rng_state, sigma_max: float = 5.0,
                           sigma: Optional[float] = None, scale: float = 1.0) -> PatchSample:
    """Add N(0, sigma') to the input only; sigma' ~ U(0, sigma_max) once per patch.

    ``scale`` converts sigma' into input units (1/500 when sigma' is in HU).
    """
    rng = rng_state if isinstance(rng_state, np.random.Generator) else np.random.default_rng(rng_state)
    s = float(rng.uniform(0.0, sigma_max)) if sigma is None else float(sigma)
    if s == 0.0:
        return replace(patch, noise_sigma=0.0)
    noise = rng.normal(0.0, s * scale, patch.input.shape).astype(np.float32)
    return replace(patch, input=(patch.input + noise).astype(np.float32), noise_sigma=s)


@dataclass
class Batch:
    inputs: np.ndarray
    labels: np.ndarray
    samples: List[PatchSample]
    short: bool = False
    sdf: Optional[np.ndarray] = None

    def __len__(self):
        return len(self.samples)


_DONE = object()


class PatchPipeline:
    """Reusable fetch -> extract -> feed pipeline over a fixed list of scans."""

    def __init__(self, cases: Sequence, cfg: SamplerConfig, batch_size: int = 7, workers: int = 1,
                 with_sdf: bool = False, augment: bool = True):
        if not cases:
            raise ParameterError("batch stream needs a non-empty manifest")
        if batch_size < 1 or workers < 1:
            raise ParameterError("batch_size and workers must be >= 1")
        self.cases = list(cases)
        self.cfg = cfg
        self.batch_size = batch_size
        self.workers = workers
        self.with_sdf = with_sdf
        self.augment = augment
        self._cache: Dict[int, LoadedCase] = {}
        self._lock = threading.Lock()

    def _scan_id(self, i):
        c = self.cases[i]
        return c["scan_id"] if isinstance(c, dict) else (c.scan_id or f"case_{i}")

    def _load(self, i) -> LoadedCase:
        with self._lock:
            if i in self._cache:
                return self._cache[i]
        c = self.cases[i]
        case = load_case(c) if isinstance(c, dict) else c
        loaded = prepare_case(case, self.with_sdf, scan_id=self._scan_id(i))
        with self._lock:
            self._cache.setdefault(i, loaded)
            return self._cache[i]

    def plan(self, rng_state) -> List[Tuple[int, int]]:
        """Ordered (case index, patch seed) pairs for one epoch."""
        rng = np.random.default_rng(rng_state)
        items = np.repeat(np.arange(len(self.cases)), self.cfg.patches_per_case)
        order = rng.permutation(items.size)
        seeds = rng.integers(0, 2**62, size=items.size)
        return [(int(items[o]), int(s)) for o, s in zip(order, seeds)]

    def make_patch(self, case: LoadedCase, seed: int) -> PatchSample:
        patch = sample_patch(case, self.cfg, seed)
        if self.augment and self.cfg.noise_sigma_max > 0:
            patch = augment_gaussian_noise(patch, np.random.default_rng([seed, 1]),
                                           self.cfg.noise_sigma_max, scale=self.cfg.noise_scale)
        return patch

    def epoch(self, rng_state) -> Iterator[Batch]:
        plan = self.plan(rng_state)
        stop = threading.Event()
        ready = {i: threading.Event() for i in {ci for ci, _ in plan}}
        tasks: "queue.Queue" = queue.Queue()
        results: "queue.Queue" = queue.Queue(maxsize=4 * self.batch_size)
        errors: List[BaseException] = []

        def put(item):
            while not stop.is_set():
                try:
                    results.put(item, timeout=0.1)
                    return
                except queue.Full:
                    continue

        def fetch():
            try:
                for ci in dict.fromkeys(ci for ci, _ in plan):
                    if stop.is_set():
                        return
                    self._load(ci)
                    ready[ci].set()
            except BaseException as exc:  # surfaced to the consumer
                errors.append(exc)
                for ev in ready.values():
                    ev.set()

        def extract():
            while not stop.is_set():
                try:
                    item = tasks.get_nowait()
                except queue.Empty:
                    break
                ci, seed = item
                ready[ci].wait()
                if errors:
                    put(_DONE)
                    return
                try:
                    put(self.make_patch(self._cache[ci], seed))
                except BaseException as exc:
                    errors.append(exc)
                    put(_DONE)
                    return
            put(_DONE)

        for item in plan:
            tasks.put(item)
        threads = [threading.Thread(target=fetch, daemon=True)]
        threads += [threading.Thread(target=extract, daemon=True) for _ in range(self.workers)]
        for t in threads:
            t.start()

        try:
            pending: List[PatchSample] = []
            done = 0
            while done < self.workers:
                item = results.get()
                if item is _DONE:
                    done += 1
                    if errors:
                        raise errors[0]
                    continue
                pending.append(item)
                if len(pending) == self.batch_size:
                    yield self._collate(pending, short=False)
                    pending = []
            if errors:
                raise errors[0]
            if pending:
                yield self._collate(pending, short=True)
        finally:
            stop.set()

    def _collate(self, samples: List[PatchSample], short: bool) -> Batch:
        sdf = None
        if all(s.sdf is not None for s in samples):
            sdf = np.stack([s.sdf for s in samples])
        return Batch(
            inputs=np.stack([s.input for s in samples]).astype(np.float32),
            labels=np.stack([s.label for s in samples]).astype(np.float32),
            samples=samples,
            short=short,
            sdf=sdf,
        )


def batch_stream(manifest, cfg: SamplerConfig, batch_size: int = 7, rng_state=None,
                 workers: int = 1, split: Optional[str] = "train", **kwargs) -> Iterator[Batch]:
    """One epoch of batches over ``manifest`` (a manifest dict or a list of cases)."""
    if isinstance(manifest, dict):
        cases = [c for c in manifest["cases"] if split is None or c["split"] == split]
    else:
        cases = list(manifest)
    pipe = PatchPipeline(cases, cfg, batch_size, workers, **kwargs)
    return pipe.epoch(cfg.seed if rng_state is None else rng_state)
