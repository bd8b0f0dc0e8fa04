"""Volume containers, MetaImage-style file I/O and resampling.

Voxel arrays are indexed ``[i, j, k]`` = ``(x, y, z)``.  On disk the payload
is written x-fastest (MetaImage convention), little-endian.
"""
from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Tuple, Union

import numpy as np
from scipy import ndimage

from .errors import FormatError, GeometryError, LabelError, ParameterError, TruncationError

HU_WINDOW = (-200.0, 300.0)

_ELEMENT_TYPES = {
    "MET_SHORT": np.dtype("<i2"),
    "MET_FLOAT": np.dtype("<f4"),
    "MET_UCHAR": np.dtype("u1"),
}
_HEADER_KEYS = ("ObjectType", "NDims", "DimSize", "ElementSpacing", "Offset",
                "ElementType", "ElementByteOrderMSB", "ElementDataFile")

Triple = Tuple[float, float, float]


def _triple(values, cast=float) -> tuple:
    t = tuple(cast(v) for v in values)
    if len(t) != 3:
        raise GeometryError(f"expected 3 components, got {len(t)}")
    return t


def _check_geometry(shape, spacing):
    if any(n <= 0 for n in shape):
        raise GeometryError(f"dims must be positive, got {shape}")
    if not all(np.isfinite(s) and s > 0 for s in spacing):
        raise GeometryError(f"spacing must be positive and finite, got {spacing}")


class _Grid:
    voxels: np.ndarray
    spacing: Triple
    origin: Triple

    @property
    def dims(self) -> Tuple[int, int, int]:
        return tuple(int(n) for n in self.voxels.shape)

    @property
    def voxel_volume(self) -> float:
        sx, sy, sz = self.spacing
        return sx * sy * sz

    def world(self, index) -> np.ndarray:
        """World coordinate (mm) of voxel index/indices ``(..., 3)``."""
        idx = np.asarray(index, dtype=np.float64)
        return np.asarray(self.origin) + idx * np.asarray(self.spacing)

    def same_geometry(self, other) -> bool:
        return (self.dims == other.dims and self.spacing == other.spacing
                and self.origin == other.origin)


@dataclass(frozen=True, eq=False)
class VolumeGrid(_Grid):
    """Dense float32 scalar field with physical spacing and origin in mm."""

    voxels: np.ndarray
    spacing: Triple = (1.0, 1.0, 3.0)
    origin: Triple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        arr = np.array(self.voxels, dtype=np.float32, copy=True)
        if arr.ndim != 3:
            raise GeometryError(f"voxels must be 3-D, got shape {arr.shape}")
        spacing, origin = _triple(self.spacing), _triple(self.origin)
        _check_geometry(arr.shape, spacing)
        arr.setflags(write=False)
        object.__setattr__(self, "voxels", arr)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)


@dataclass(frozen=True, eq=False)
class BinaryMask(_Grid):
    """Boolean field sharing the geometry of its paired VolumeGrid."""

    voxels: np.ndarray
    spacing: Triple = (1.0, 1.0, 3.0)
    origin: Triple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        raw = np.asarray(self.voxels)
        if raw.dtype != bool and raw.size and not np.isin(raw, (0, 1)).all():
            raise LabelError("mask voxels must be 0 or 1")
        arr = np.array(raw, dtype=bool, copy=True)
        if arr.ndim != 3:
            raise GeometryError(f"voxels must be 3-D, got shape {arr.shape}")
        spacing, origin = _triple(self.spacing), _triple(self.origin)
        _check_geometry(arr.shape, spacing)
        arr.setflags(write=False)
        object.__setattr__(self, "voxels", arr)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)

    @classmethod
    def like(cls, grid: _Grid, voxels) -> "BinaryMask":
        return cls(voxels, grid.spacing, grid.origin)

    @property
    def count(self) -> int:
        return int(self.voxels.sum())


Grid = Union[VolumeGrid, BinaryMask]


def _fmt(values) -> str:
    # repr round-trips exactly; integral values print bare ("1 1 3")
    out = []
    for v in values:
        r = repr(float(v))
        out.append(r[:-2] if r.endswith(".0") else r)
    return " ".join(out)


def save_volume(grid: Grid, path) -> None:
    """Write ``grid`` as a MetaImage header plus inline raw payload."""
    if isinstance(grid, BinaryMask):
        etype, payload = "MET_UCHAR", grid.voxels.astype(np.uint8)
    else:
        etype, payload = "MET_FLOAT", grid.voxels.astype("<f4")
    header = {
        "ObjectType": "Image",
        "NDims": "3",
        "DimSize": " ".join(str(n) for n in grid.dims),
        "ElementSpacing": _fmt(grid.spacing),
        "Offset": _fmt(grid.origin),
        "ElementType": etype,
        "ElementByteOrderMSB": "False",
        "ElementDataFile": "LOCAL",
    }
    text = "".join(f"{k} = {header[k]}\n" for k in _HEADER_KEYS)
    with open(path, "wb") as fh:
        fh.write(text.encode("ascii"))
        fh.write(np.asfortranarray(payload).tobytes(order="F"))


def _read_header(fh):
    header = {}
    while True:
        line = fh.readline()
        if not line:
            raise FormatError("header ended before ElementDataFile")
        try:
            text = line.decode("ascii").rstrip("\r\n")
        except UnicodeDecodeError as exc:
            raise FormatError("non-ASCII header line") from exc
        if " = " not in text:
            raise FormatError(f"malformed header line {text!r}")
        key, value = text.split(" = ", 1)
        header[key] = value.strip()
        if key == "ElementDataFile":
            return header


def load_volume(path, kind: str = "scalar") -> Grid:
    """Read a volume file; ``kind`` is ``"scalar"`` or ``"mask"``."""
    if kind not in ("scalar", "mask"):
        raise ParameterError(f"kind must be 'scalar' or 'mask', got {kind!r}")
    with open(path, "rb") as fh:
        header = _read_header(fh)
        payload = fh.read()
    try:
        if int(header["NDims"]) != 3:
            raise FormatError("only 3-D volumes are supported")
        dims = _triple(header["DimSize"].split(), int)
        spacing = _triple(header["ElementSpacing"].split())
        origin = _triple(header.get("Offset", "0 0 0").split())
        dtype = _ELEMENT_TYPES[header["ElementType"]]
        _check_geometry(dims, spacing)
    except KeyError as exc:
        raise FormatError(f"missing or unsupported header field: {exc}") from exc
    except (ValueError, GeometryError) as exc:
        raise FormatError(str(exc)) from exc
    if header["ElementDataFile"] != "LOCAL":
        raise FormatError("only inline (LOCAL) payloads are supported")
    if header.get("ElementByteOrderMSB", "False") == "True":
        dtype = dtype.newbyteorder(">")
    expected = int(np.prod(dims)) * dtype.itemsize
    if len(payload) != expected:
        raise TruncationError(f"payload has {len(payload)} bytes, header implies {expected}")
    arr = np.frombuffer(payload, dtype=dtype).reshape(dims, order="F")
    if kind == "mask":
        if not np.isin(arr, (0, 1)).all():
            raise LabelError(f"{path}: mask contains values outside {{0, 1}}")
        return BinaryMask(arr.astype(bool), spacing, origin)
    return VolumeGrid(arr.astype(np.float32), spacing, origin)


def resample_volume(grid: Grid, target_spacing) -> Grid:
    """Resample onto ``target_spacing`` keeping the physical extent and origin.

    Output voxel ``i`` samples the input at continuous index
    ``(i + 0.5) * t / s - 0.5`` so voxel extents stay aligned; scalars are
    trilinear, masks nearest-neighbour, both clamped at the edges.
    """
    target = _triple(target_spacing)
    if not all(np.isfinite(t) and t > 0 for t in target):
        raise ParameterError(f"target spacing must be positive, got {target}")
    out_dims = [max(1, int(round(n * s / t))) for n, s, t in zip(grid.dims, grid.spacing, target)]
    axes = [(np.arange(m) + 0.5) * t / s - 0.5 for m, s, t in zip(out_dims, grid.spacing, target)]
    coords = np.stack(np.meshgrid(*axes, indexing="ij"))
    if isinstance(grid, BinaryMask):
        out = ndimage.map_coordinates(grid.voxels.astype(np.uint8), coords, order=0, mode="nearest")
        return BinaryMask(out.astype(bool), target, grid.origin)
    out = ndimage.map_coordinates(grid.voxels.astype(np.float64), coords, order=1, mode="nearest")
    return VolumeGrid(out.astype(np.float32), target, grid.origin)


def normalize_hu(values, window=HU_WINDOW) -> np.ndarray:
    """Clip to the soft-tissue window and scale linearly to [0, 1]."""
    lo, hi = window
    arr = np.asarray(values, dtype=np.float32)
    return ((np.clip(arr, lo, hi) - lo) / (hi - lo)).astype(np.float32)
