"""Synthetic thoracic CT phantoms with esophageal tumour ground truth.

Coordinates: x left/right, y anterior (low) to posterior (high), z caudal
(low index) to cranial (high index).
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, FrozenSet, Optional, Sequence, Tuple

import numpy as np

from .errors import ParameterError, SpecError
from .volgrid import BinaryMask, VolumeGrid, load_volume, save_volume

TAGS = ("air_pocket", "feeding_tube", "junction_tumor", "large_gtv",
        "hiatal_hernia", "dislocated", "proximal")

# All invented geometry/intensity stand-ins live here.
CONSTANTS = {
    "air_hu": -1000.0,
    "body_hu": 0.0,
    "lung_hu": -800.0,
    "wall_hu": 40.0,
    "tumor_contrast_hu": 20.0,
    "bone_hu": 700.0,
    "stomach_hu": 20.0,
    "tube_hu": 500.0,
    "pocket_hu": -1000.0,
    "body_semi_axes": (0.46, 0.38),        # fraction of (x, y) extent
    "lung_center_dx": 0.25,                # fraction of x extent, either side
    "lung_center_dy": -0.04,
    "lung_semi_axes": (0.14, 0.24),
    "esophagus_dy": 0.08,                  # posterior offset of the esophagus
    "spine_dy": 0.28,
    "spine_radius": 0.07,
    "stomach_top": 0.12,                   # fraction of z extent
    "stomach_dx_mm": -14.0,
    "stomach_semi_axes_mm": (20.0, 15.0),
    "tube_radius_mm": 1.5,
    "pocket_radius_frac": 0.5,             # of esophagus radius
    "pocket_length_frac": 0.6,             # of tumour length
    "noise_hu": 10.0,
}

DEFAULT_PREVALENCE = {
    "air_pocket": 0.3,
    "feeding_tube": 0.2,
    "junction_tumor": 0.15,
    "large_gtv": 0.3,
    "hiatal_hernia": 0.05,
    "dislocated": 0.1,
    "proximal": 0.1,
}


@dataclass(frozen=True)
class PhantomSpec:
    dims: Tuple[int, int, int] = (96, 96, 48)
    spacing: Tuple[float, float, float] = (1.0, 1.0, 3.0)
    tumor_center_z: float = 0.5
    tumor_length_mm: float = 36.0
    tumor_radius_mm: float = 8.0
    esophagus_radius_mm: float = 5.0
    curvature_amplitude_mm: float = 3.0
    has_air_pocket: bool = False
    has_feeding_tube: bool = False
    tags: FrozenSet[str] = frozenset()
    noise_hu: float = CONSTANTS["noise_hu"]
    seed: int = 0
    tumor_contrast_hu: float = CONSTANTS["tumor_contrast_hu"]
    centerline_offset_mm: Tuple[float, float] = (0.0, 0.0)
    tumor_shift_mm: Tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        object.__setattr__(self, "tags", frozenset(self.tags))
        object.__setattr__(self, "dims", tuple(int(n) for n in self.dims))
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        object.__setattr__(self, "centerline_offset_mm", tuple(self.centerline_offset_mm))
        object.__setattr__(self, "tumor_shift_mm", tuple(self.tumor_shift_mm))
        validate_spec(self)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["tags"] = sorted(self.tags)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        d = dict(d)
        for key in ("dims", "spacing", "centerline_offset_mm", "tumor_shift_mm"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass(frozen=True, eq=False)
class PhantomCase:
    volume: VolumeGrid
    gtv: BinaryMask
    spec: Optional[PhantomSpec] = None
    scan_id: str = ""
    tags: FrozenSet[str] = frozenset()

    def __post_init__(self):
        if not self.gtv.same_geometry(self.volume):
            raise SpecError("gtv geometry differs from volume geometry")
        if self.spec is not None and not self.tags:
            object.__setattr__(self, "tags", self.spec.tags)


def _z_axis_mm(spec: PhantomSpec) -> np.ndarray:
    return np.arange(spec.dims[2]) * spec.spacing[2]


def _tumor_z_range(spec: PhantomSpec) -> Tuple[float, float]:
    top = (spec.dims[2] - 1) * spec.spacing[2]
    zc = spec.tumor_center_z * top
    return zc - spec.tumor_length_mm / 2, zc + spec.tumor_length_mm / 2


def _esophagus_center(spec: PhantomSpec) -> Tuple[float, float]:
    ex = spec.dims[0] * spec.spacing[0]
    ey = spec.dims[1] * spec.spacing[1]
    dx, dy = spec.centerline_offset_mm
    return ex / 2 + dx, ey * (0.5 + CONSTANTS["esophagus_dy"]) + dy


def validate_spec(spec: PhantomSpec) -> None:
    if len(spec.dims) != 3 or min(spec.dims) < 1:
        raise SpecError(f"dims must be three positive integers, got {spec.dims}")
    if len(spec.spacing) != 3 or min(spec.spacing) <= 0:
        raise SpecError(f"spacing must be positive, got {spec.spacing}")
    if not 0.1 <= spec.tumor_center_z <= 0.9:
        raise SpecError("tumor_center_z must lie in [0.1, 0.9]")
    if spec.tumor_length_mm <= 0:
        raise SpecError("tumor_length_mm must be positive")
    if spec.esophagus_radius_mm <= 0:
        raise SpecError("esophagus_radius_mm must be positive")
    if spec.tumor_radius_mm <= spec.esophagus_radius_mm:
        raise SpecError("tumor_radius_mm must exceed esophagus_radius_mm")
    if spec.curvature_amplitude_mm < 0 or spec.noise_hu < 0:
        raise SpecError("curvature_amplitude_mm and noise_hu must be non-negative")
    unknown = spec.tags - set(TAGS)
    if unknown:
        raise SpecError(f"unknown tags {sorted(unknown)}")
    if ("air_pocket" in spec.tags) != spec.has_air_pocket:
        raise SpecError("air_pocket tag must match has_air_pocket")
    if ("feeding_tube" in spec.tags) != spec.has_feeding_tube:
        raise SpecError("feeding_tube tag must match has_feeding_tube")
    if math.hypot(*spec.tumor_shift_mm) > spec.tumor_radius_mm - spec.esophagus_radius_mm:
        raise SpecError("tumor_shift_mm would leave the esophagus outside the tumour")

    z0, z1 = _tumor_z_range(spec)
    top = (spec.dims[2] - 1) * spec.spacing[2]
    if z0 < 0 or z1 > top:
        raise SpecError(f"tumour z-range [{z0:.1f}, {z1:.1f}] mm leaves the volume [0, {top:.1f}]")
    cx, cy = _esophagus_center(spec)
    reach = spec.curvature_amplitude_mm + spec.tumor_radius_mm + math.hypot(*spec.tumor_shift_mm)
    ex = (spec.dims[0] - 1) * spec.spacing[0]
    ey = (spec.dims[1] - 1) * spec.spacing[1]
    if cx - reach < 0 or cx + reach > ex or cy - reach < 0 or cy + reach > ey:
        raise SpecError("tumour cross-section leaves the volume in x/y")


def _centerline(spec: PhantomSpec, z_mm: np.ndarray, phase: float) -> Tuple[np.ndarray, np.ndarray]:
    cx, cy = _esophagus_center(spec)
    height = max(spec.dims[2] * spec.spacing[2], 1e-9)
    a = spec.curvature_amplitude_mm
    t = 2 * math.pi * z_mm / height + phase
    return cx + a * np.sin(t), cy + 0.5 * a * np.cos(t)


def _ellipse(x, y, cx, cy, ax, ay):
    return ((x - cx) / ax) ** 2 + ((y - cy) / ay) ** 2 <= 1.0


def render_phantom(spec: PhantomSpec) -> Tuple[np.ndarray, np.ndarray]:
    """Noise-free HU volume and tumour mask for ``spec``."""
    c = CONSTANTS
    nx, ny, nz = spec.dims
    sx, sy, sz = spec.spacing
    ex, ey = nx * sx, ny * sy
    rng = np.random.default_rng(spec.seed)
    phase = float(rng.uniform(0, 2 * math.pi))

    x = (np.arange(nx) * sx)[:, None]
    y = (np.arange(ny) * sy)[None, :]
    z_mm = _z_axis_mm(spec)

    body = _ellipse(x, y, ex / 2, ey / 2, c["body_semi_axes"][0] * ex, c["body_semi_axes"][1] * ey)
    slab = np.where(body, c["body_hu"], c["air_hu"])
    for side in (-1, 1):
        lung = _ellipse(x, y, ex * (0.5 + side * c["lung_center_dx"]), ey * (0.5 + c["lung_center_dy"]),
                        c["lung_semi_axes"][0] * ex, c["lung_semi_axes"][1] * ey)
        slab = np.where(lung & body, c["lung_hu"], slab)
    spine = _ellipse(x, y, ex / 2, ey * (0.5 + c["spine_dy"]), c["spine_radius"] * ex, c["spine_radius"] * ex)
    slab = np.where(spine, c["bone_hu"], slab)

    vol = np.repeat(slab[:, :, None], nz, axis=2).astype(np.float32)
    gtv = np.zeros(spec.dims, dtype=bool)

    px, py = _centerline(spec, z_mm, phase)
    z0, z1 = _tumor_z_range(spec)
    zc = (z0 + z1) / 2
    stomach_top = c["stomach_top"] * nz * sz
    tumor_hu = c["wall_hu"] + spec.tumor_contrast_hu
    pocket_half = c["pocket_length_frac"] * spec.tumor_length_mm / 2
    pocket_r = c["pocket_radius_frac"] * spec.esophagus_radius_mm
    tx, ty = spec.tumor_shift_mm

    for k in range(nz):
        zk = z_mm[k]
        sl = vol[:, :, k]
        if zk < stomach_top:
            sax, say = c["stomach_semi_axes_mm"]
            scale = math.sqrt(max(0.0, 1 - (zk / stomach_top) ** 2 * 0.5))
            stomach = _ellipse(x, y, px[k] + c["stomach_dx_mm"], py[k], sax * scale, say * scale)
            sl[stomach] = c["stomach_hu"]
        r2 = (x - px[k]) ** 2 + (y - py[k]) ** 2
        sl[r2 <= spec.esophagus_radius_mm ** 2] = c["wall_hu"]
        if z0 <= zk < z1:
            tumor = (x - px[k] - tx) ** 2 + (y - py[k] - ty) ** 2 <= spec.tumor_radius_mm ** 2
            sl[tumor] = tumor_hu
            gtv[:, :, k] = tumor
            if spec.has_air_pocket and abs(zk - zc) < pocket_half:
                sl[r2 <= pocket_r ** 2] = c["pocket_hu"]
        if spec.has_feeding_tube:
            sl[r2 <= c["tube_radius_mm"] ** 2] = c["tube_hu"]
    return vol, gtv


def generate_phantom(spec: PhantomSpec) -> PhantomCase:
    vol, gtv = render_phantom(spec)
    if not gtv.any():
        raise SpecError("tumour covers no voxel centre; increase radius or length")
    if spec.noise_hu > 0:
        noise_rng = np.random.default_rng([spec.seed, 1])
        vol = vol + noise_rng.normal(0.0, spec.noise_hu, vol.shape).astype(np.float32)
    volume = VolumeGrid(vol, spec.spacing)
    return PhantomCase(volume, BinaryMask.like(volume, gtv), spec)


def random_spec(rng: np.random.Generator, prevalence: Dict[str, float] = None, **base) -> PhantomSpec:
    """Draw a plausible PhantomSpec; ``base`` overrides geometry such as dims/spacing."""
    prevalence = {**DEFAULT_PREVALENCE, **(prevalence or {})}
    tags = {t for t in TAGS if rng.random() < prevalence.get(t, 0.0)}
    if "junction_tumor" in tags:
        tags.discard("proximal")
    seed = int(rng.integers(0, 2**31 - 1))
    dims = tuple(base.get("dims", PhantomSpec.dims))
    spacing = tuple(base.get("spacing", PhantomSpec.spacing))

    if "junction_tumor" in tags:
        center = rng.uniform(0.2, 0.3)
    elif "proximal" in tags:
        center = rng.uniform(0.7, 0.8)
    else:
        center = rng.uniform(0.38, 0.62)
    if "large_gtv" in tags:
        radius, length = rng.uniform(10.0, 12.5), rng.uniform(45.0, 60.0)
    else:
        radius, length = rng.uniform(6.5, 9.5), rng.uniform(24.0, 45.0)
    eso = rng.uniform(4.0, 5.5)
    top = (dims[2] - 1) * spacing[2]
    room = 2 * min(center * top, (1 - center) * top) - spacing[2]
    length = float(min(length, room))
    offset = (0.0, 0.0)
    if "dislocated" in tags:
        offset = (float(rng.choice([-1, 1]) * rng.uniform(7.0, 10.0)), 0.0)
    shift = (0.0, 0.0)
    if "hiatal_hernia" in tags:
        ang = rng.uniform(0, 2 * math.pi)
        mag = 0.8 * (radius - eso)
        shift = (float(mag * math.cos(ang)), float(mag * math.sin(ang)))
    kwargs = dict(
        tumor_center_z=float(center), tumor_length_mm=length, tumor_radius_mm=float(radius),
        esophagus_radius_mm=float(eso), curvature_amplitude_mm=float(rng.uniform(0.0, 5.0)),
        has_air_pocket="air_pocket" in tags, has_feeding_tube="feeding_tube" in tags,
        tags=frozenset(tags), seed=seed, centerline_offset_mm=offset, tumor_shift_mm=shift)
    kwargs.update(base)
    return PhantomSpec(**kwargs)


def split_sizes(n: int, fractions: Sequence[float]) -> Tuple[int, ...]:
    """Largest-remainder apportionment with every split non-empty."""
    raw = [n * f for f in fractions]
    sizes = [int(math.floor(r)) for r in raw]
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - sizes[i]), i))
    for i in order[: n - sum(sizes)]:
        sizes[i] += 1
    for i in range(len(sizes)):
        if sizes[i] == 0:
            donor = max(range(len(sizes)), key=lambda j: sizes[j])
            sizes[donor] -= 1
            sizes[i] += 1
    return tuple(sizes)


SPLIT_NAMES = ("train", "val", "test")


def generate_corpus(n: int, split_fractions=(0.6, 0.2, 0.2), seed: int = 0, out_dir=None,
                    prevalence: Dict[str, float] = None, **base) -> dict:
    """Generate ``n`` phantoms, write them under ``out_dir`` and return the manifest."""
    if n < 3:
        raise ParameterError("a corpus needs at least 3 cases (one per split)")
    fr = tuple(float(f) for f in split_fractions)
    if len(fr) != 3 or min(fr) <= 0 or not math.isclose(sum(fr), 1.0, abs_tol=1e-9):
        raise ParameterError(f"split fractions must be three positive numbers summing to 1, got {fr}")
    rng = np.random.default_rng(seed)
    specs = [random_spec(rng, prevalence, **base) for _ in range(n)]
    order = rng.permutation(n)
    sizes = split_sizes(n, fr)
    split_of = {}
    start = 0
    for name, size in zip(SPLIT_NAMES, sizes):
        for idx in order[start:start + size]:
            split_of[int(idx)] = name
        start += size

    cases = []
    out = Path(out_dir) if out_dir is not None else None
    for i, spec in enumerate(specs):
        scan_id = f"phantom_{i:03d}"
        entry = {
            "scan_id": scan_id,
            "path": f"{scan_id}/volume.mha",
            "mask": f"{scan_id}/gtv.mha",
            "split": split_of[i],
            "tags": sorted(spec.tags),
            "seed": spec.seed,
            "spec": spec.to_dict(),
        }
        cases.append(entry)
        if out is not None:
            case = generate_phantom(spec)
            (out / scan_id).mkdir(parents=True, exist_ok=True)
            save_volume(case.volume, out / entry["path"])
            save_volume(case.gtv, out / entry["mask"])
    manifest = {
        "seed": seed,
        "n": n,
        "split_fractions": list(fr),
        "prevalence": {**DEFAULT_PREVALENCE, **(prevalence or {})},
        "cases": cases,
    }
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


def load_manifest(path) -> dict:
    """Read a manifest and resolve case paths against its directory."""
    path = Path(path)
    manifest = json.loads(path.read_text())
    root = path.parent
    for case in manifest["cases"]:
        case["path"] = str((root / case["path"]).resolve())
        if "mask" in case:
            case["mask"] = str((root / case["mask"]).resolve())
    manifest["root"] = str(root.resolve())
    return manifest


def load_case(entry: dict) -> PhantomCase:
    volume = load_volume(entry["path"], "scalar")
    gtv = load_volume(entry["mask"], "mask")
    spec = PhantomSpec.from_dict(entry["spec"]) if "spec" in entry else None
    return PhantomCase(volume, gtv, spec, scan_id=entry["scan_id"], tags=frozenset(entry.get("tags", ())))


def select(manifest: dict, split: str) -> list:
    return [c for c in manifest["cases"] if c["split"] == split]


def resplit(manifest: dict, split_id: int) -> dict:
    """Reshuffle train/val membership for repeat ``split_id``; test stays fixed."""
    if split_id not in (1, 2, 3):
        raise ParameterError(f"split_id must be 1, 2 or 3, got {split_id}")
    pool = [c for c in manifest["cases"] if c["split"] in ("train", "val")]
    n_val = sum(c["split"] == "val" for c in pool)
    rng = np.random.default_rng([int(manifest.get("seed", 0)), split_id])
    order = rng.permutation(len(pool))
    val_ids = {pool[i]["scan_id"] for i in order[:n_val]}
    cases = []
    for c in manifest["cases"]:
        c = dict(c)
        if c["split"] != "test":
            c["split"] = "val" if c["scan_id"] in val_ids else "train"
        cases.append(c)
    return {**manifest, "cases": cases, "split_id": split_id}
