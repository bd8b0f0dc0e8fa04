import numpy as np
import pytest
import torch

from esoseg.errors import ParameterError
from esoseg.inference import binarize, infer_volume, largest_component, segment, tile_windows
from esoseg.network import NetworkConfig, build_network
from esoseg.phantom import PhantomSpec, generate_phantom
from esoseg.volgrid import BinaryMask, VolumeGrid

import oracles

TINY = dict(stem_channels=4, growth=4, R=2)


def M(arr):
    return BinaryMask(np.asarray(arr, bool), (1, 1, 1))


@pytest.mark.parametrize("variant", ["DDUnet", "DDAUnet", "DDAUnet-plusChA1-noChA2"])
def test_tiled_matches_untiled(variant):
    net = build_network(NetworkConfig.for_variant(variant, **TINY), 0).eval()
    rng = np.random.default_rng(0)
    # long enough along x that windows there are genuine sub-volumes
    vol = VolumeGrid(rng.standard_normal((216, 16, 8)).astype(np.float32), (1, 1, 3))
    whole = infer_volume(net, vol)
    tiled = infer_volume(net, vol, tile_core=(16, 16, 8))
    assert any(w[0][1] - w[0][0] < 216 for w, _ in tile_windows((216, 16, 8), (16, 16, 8), (88,) * 3, 8))
    assert tiled.dims == whole.dims == vol.dims
    assert np.max(np.abs(tiled.voxels - whole.voxels)) <= 1e-4
    assert tiled.voxels.std() > 1e-3  # not a flat map that would agree trivially
    two = infer_volume(net, vol, tile_core=(16, 16, 8), workers=2)
    assert np.array_equal(two.voxels, tiled.voxels)


def test_tile_windows_cover_once():
    tiles = tile_windows((40, 36, 20), (16, 16, 8), (8, 8, 8), 8)
    hits = np.zeros((40, 36, 20), int)
    for window, core in tiles:
        hits[tuple(slice(a, b) for a, b in core)] += 1
        for (w0, w1), (c0, c1) in zip(window, core):
            assert w0 <= c0 and c1 <= w1 and w0 % 8 == 0
    assert np.all(hits == 1)


def test_binarize_is_strict():
    prob = VolumeGrid(np.array([0.0, 0.5, 0.5000001, 1.0], np.float32).reshape(4, 1, 1), (1, 1, 1))
    assert binarize(prob).voxels.ravel().tolist() == [False, False, True, True]
    assert not binarize(prob, 1.0).voxels.any()
    assert binarize(prob, 0.0).voxels.ravel().tolist() == [False, True, True, True]
    with pytest.raises(ParameterError):
        binarize(prob, 1.5)


def test_largest_component_five_vs_three():
    m = np.zeros((10, 3, 3), bool)
    m[0:3, 1, 1] = True
    m[5:10, 1, 1] = True
    out = largest_component(M(m)).voxels
    assert out.sum() == 5 and out[5:10, 1, 1].all()


def test_largest_component_diagonal_is_connected():
    m = np.zeros((3, 3, 3), bool)
    m[0, 0, 0] = m[1, 1, 1] = m[2, 2, 2] = True
    assert largest_component(M(m)).voxels.sum() == 3


def test_largest_component_tie_keeps_first_in_raster_order():
    m = np.zeros((7, 1, 1), bool)
    m[0:2] = True
    m[4:6] = True
    out = largest_component(M(m)).voxels
    assert out[0:2].all() and not out[4:6].any()


def test_largest_component_against_bfs_oracle():
    rng = np.random.default_rng(4)
    for _ in range(30):
        dims = tuple(int(d) for d in rng.integers(2, 9, size=3))
        m = rng.random(dims) < rng.uniform(0.05, 0.3)
        assert np.array_equal(largest_component(M(m)).voxels, oracles.largest_component(m))


def test_largest_component_laws():
    rng = np.random.default_rng(10)
    for _ in range(100):
        dims = tuple(int(d) for d in rng.integers(1, 11, size=3))
        m = M(rng.random(dims) < rng.uniform(0.0, 0.4))
        once = largest_component(m)
        assert np.array_equal(largest_component(once).voxels, once.voxels)
        assert np.all(once.voxels <= m.voxels)
        assert len(oracles.flood_components(once.voxels)) == (1 if m.voxels.any() else 0)


def test_perfect_probability_map_reproduces_gtv():
    case = generate_phantom(PhantomSpec(seed=2, dims=(64, 64, 32)))
    prob = VolumeGrid(case.gtv.voxels.astype(np.float32), case.gtv.spacing, case.gtv.origin)
    out = largest_component(binarize(prob, 0.5))
    assert np.array_equal(out.voxels, case.gtv.voxels)


def test_segment_returns_prob_and_mask():
    net = build_network(NetworkConfig(**TINY), 1)
    vol = VolumeGrid(np.zeros((8, 8, 4), np.float32), (1, 1, 3))
    prob, mask = segment(net, vol)
    assert prob.dims == mask.dims == (8, 8, 4)
    assert mask.spacing == vol.spacing
