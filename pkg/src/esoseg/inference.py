"""Whole-volume inference, thresholding and largest-component post-processing."""
from __future__ import annotations

import math
import threading
from concurrent.futures import ThreadPoolExecutor
from typing import List, Optional, Tuple

import numpy as np
import torch
from scipy import ndimage

from .errors import ParameterError
from .network import ChannelAttention, Network, receptive_field
from .volgrid import BinaryMask, VolumeGrid

DEFAULT_MAX_VOXELS = 4_000_000


def _round_up(n: int, m: int) -> int:
    return -(-n // m) * m


@torch.no_grad()
def _predict(net: Network, image: np.ndarray) -> np.ndarray:
    x = torch.from_numpy(np.array(image, dtype=np.float32, order="C"))[None, None]
    return net(x)[0, 1].numpy()


def _pad_to_multiple(image: np.ndarray, m: int) -> np.ndarray:
    pad = [(0, _round_up(n, m) - n) for n in image.shape]
    return np.pad(image, pad) if any(p for _, p in pad) else image


def tile_windows(shape, core, margin, multiple) -> List[Tuple[tuple, tuple]]:
    """(window, core) slice triples covering ``shape``; window starts are multiples of ``multiple``."""
    per_axis = []
    for n, c, mg in zip(shape, core, margin):
        axis = []
        for start in range(0, n, c):
            stop = min(start + c, n)
            w0 = max(0, (start - mg) // multiple * multiple)
            w1 = min(n, _round_up(stop + mg, multiple))
            axis.append(((w0, w1), (start, stop)))
        per_axis.append(axis)
    tiles = []
    for ax in per_axis[0]:
        for ay in per_axis[1]:
            for az in per_axis[2]:
                tiles.append((tuple(a[0] for a in (ax, ay, az)), tuple(a[1] for a in (ax, ay, az))))
    return tiles


class _Collected(Exception):
    """Stops a statistics pass once the gate of interest has been reached."""


def _gates_in_order(net: Network) -> List[ChannelAttention]:
    """Channel gates in the order a forward pass evaluates them."""
    order = []
    hooks = [g.register_forward_pre_hook(lambda mod, _args: order.append(mod))
             for g in net.modules() if isinstance(g, ChannelAttention)]
    try:
        m = net.cfg.divisor
        _predict(net, np.zeros((m, m, m), np.float32))
    finally:
        for h in hooks:
            h.remove()
    return order


def _tiled(net: Network, padded: np.ndarray, tiles, workers: int, gate=None) -> np.ndarray:
    """One pass over ``tiles``; with ``gate``, return its whole-volume channel means instead."""
    local = threading.local()
    sums = {}

    def collect(_mod, args):
        x = args[0]
        (wx, wy, wz), core = tiles[local.index]
        scale = (wx[1] - wx[0]) // x.shape[2]
        sl = tuple(slice((c0 - w[0]) // scale, (c1 - w[0]) // scale)
                   for (c0, c1), w in zip(core, (wx, wy, wz)))
        core_feats = x[(0, slice(None)) + sl]
        sums[local.index] = (core_feats.double().sum(dim=(1, 2, 3)), core_feats[0].numel())
        raise _Collected

    def run(index):
        (wx, wy, wz), core = tiles[index]
        window = padded[wx[0]:wx[1], wy[0]:wy[1], wz[0]:wz[1]]
        local.index = index
        if gate is not None:
            try:
                _predict(net, window)
            except _Collected:
                pass
            return None
        out = _predict(net, window)
        sl = tuple(slice(c0 - w[0], c1 - w[0]) for (c0, c1), w in zip(core, (wx, wy, wz)))
        return core, out[sl]

    hook = gate.register_forward_pre_hook(collect) if gate is not None else None
    try:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, range(len(tiles))))
    finally:
        if hook is not None:
            hook.remove()
    if gate is not None:
        # summed in tile order so the result does not depend on completion order
        total = sum(sums[i][0] for i in range(len(tiles)))
        count = sum(sums[i][1] for i in range(len(tiles)))
        return (total / count).float()[None]
    prob = np.zeros(padded.shape, dtype=np.float32)
    for core, block in results:
        prob[tuple(slice(c0, c1) for c0, c1 in core)] = block
    return prob


def infer_volume(net: Network, volume: VolumeGrid, max_voxels: int = DEFAULT_MAX_VOXELS,
                 tile_core: Optional[Tuple[int, int, int]] = None, workers: int = 1) -> VolumeGrid:
    """Tumour probability map with the geometry of ``volume`` (already normalised).

    Volumes above ``max_voxels`` run in tiles whose windows overlap the
    written core by at least half the analytic receptive field.  Channel
    gates pool over the whole volume, so each one first gets its exact
    global means from a dedicated tiled pass.
    """
    net.eval()
    m = net.cfg.divisor
    image = np.asarray(volume.voxels, dtype=np.float32)
    shape = image.shape
    padded = _pad_to_multiple(image, m)

    if padded.size <= max_voxels and tile_core is None:
        prob = _predict(net, padded)
    else:
        half_rf = math.ceil(receptive_field(net.cfg)[0] / 2)
        margin = (_round_up(half_rf, m),) * 3
        if tile_core is None:
            side = max(m, int(round(max_voxels ** (1 / 3))) - 2 * margin[0])
            tile_core = (_round_up(side, m),) * 3
        tiles = tile_windows(padded.shape, tile_core, margin, m)
        gates = _gates_in_order(net)
        try:
            for g in gates:
                g.fixed_squeeze = _tiled(net, padded, tiles, workers, gate=g)
            prob = _tiled(net, padded, tiles, workers)
        finally:
            for g in gates:
                g.fixed_squeeze = None

    prob = prob[: shape[0], : shape[1], : shape[2]]
    return VolumeGrid(prob, volume.spacing, volume.origin)


def binarize(prob: VolumeGrid, tau: float = 0.5) -> BinaryMask:
    """Voxels with tumour probability strictly above ``tau``."""
    if not 0.0 <= tau <= 1.0:
        raise ParameterError(f"threshold must lie in [0, 1], got {tau}")
    return BinaryMask(prob.voxels > tau, prob.spacing, prob.origin)


_FULL = np.ones((3, 3, 3), dtype=bool)


def label_components(mask: np.ndarray) -> Tuple[np.ndarray, int]:
    """26-connected labels numbered in C-order first appearance."""
    return ndimage.label(np.asarray(mask, dtype=bool), structure=_FULL)


def largest_component(mask: BinaryMask) -> BinaryMask:
    """Keep the largest 26-connected component; ties go to the lowest label."""
    labels, n = label_components(mask.voxels)
    if n <= 1:
        return BinaryMask(mask.voxels, mask.spacing, mask.origin)
    sizes = np.bincount(labels.ravel())[1:]
    keep = int(np.argmax(sizes)) + 1
    return BinaryMask(labels == keep, mask.spacing, mask.origin)


def segment(net: Network, volume: VolumeGrid, tau: float = 0.5, **kwargs):
    """Probability map and post-processed mask for a normalised volume."""
    prob = infer_volume(net, volume, **kwargs)
    return prob, largest_component(binarize(prob, tau))
