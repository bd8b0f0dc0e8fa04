import numpy as np
import pytest

from esoseg.errors import ParameterError, SamplingError
from esoseg.phantom import PhantomCase, PhantomSpec, generate_corpus, generate_phantom, load_manifest
from esoseg.pipeline import (PatchPipeline, SamplerConfig, augment_gaussian_noise, batch_stream,
                             PatchSample, crop_patch, prepare_case, sample_patch)
from esoseg.volgrid import BinaryMask, VolumeGrid, normalize_hu

SMALL = dict(dims=(64, 64, 32))


@pytest.fixture(scope="module")
def case():
    return generate_phantom(PhantomSpec(seed=3, **SMALL))


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    generate_corpus(5, seed=1, out_dir=root, **SMALL)
    return load_manifest(root / "manifest.json")


def test_config_validation():
    with pytest.raises(ParameterError):
        SamplerConfig(patch_size=(72, 70, 24))
    with pytest.raises(ParameterError):
        SamplerConfig(tumor_fraction=1.5)
    with pytest.raises(ParameterError):
        SamplerConfig(noise_units="kelvin")
    assert SamplerConfig().patch_size == (72, 72, 24)
    assert SamplerConfig.from_dict(SamplerConfig(seed=4).to_dict()) == SamplerConfig(seed=4)


def test_tumor_fraction_one_centers_on_gtv(case):
    cfg = SamplerConfig(patch_size=(16, 16, 8), tumor_fraction=1.0)
    loaded = prepare_case(case)
    for seed in range(50):
        p = sample_patch(loaded, cfg, seed)
        assert p.label[8, 8, 4]
        assert p.input.shape == p.label.shape == (16, 16, 8)


def test_sampling_is_deterministic(case):
    cfg = SamplerConfig(patch_size=(16, 16, 8))
    a, b = sample_patch(case, cfg, 11), sample_patch(case, cfg, 11)
    assert a.key == b.key and a.input.tobytes() == b.input.tobytes()
    g = sample_patch(case, cfg, np.random.default_rng(0))
    h = sample_patch(case, cfg, np.random.default_rng(0))
    assert g.key == h.key


def test_interior_patch_is_exact_crop(case):
    cfg = SamplerConfig(patch_size=(8, 8, 4))
    loaded = prepare_case(case)
    checked = 0
    for seed in range(20):
        p = sample_patch(loaded, cfg, seed)
        i, j, k = p.corner
        if min(p.corner) < 0 or any(c + s > n for c, s, n in zip(p.corner, (8, 8, 4), case.volume.dims)):
            continue
        assert np.array_equal(p.input, normalize_hu(case.volume.voxels)[i:i + 8, j:j + 8, k:k + 4])
        assert np.array_equal(p.label, case.gtv.voxels[i:i + 8, j:j + 8, k:k + 4])
        checked += 1
    assert checked >= 10


def test_overhang_zero_pads_against_manual_oracle():
    src = np.arange(1, 1 + 6 * 6 * 5, dtype=np.float32).reshape(6, 6, 5)
    out = crop_patch(src, (1, 2, 3), (4, 4, 4))
    manual = np.pad(src, ((0, 0), (0, 0), (0, 2)))[1:5, 2:6, 3:7]
    assert np.array_equal(out, manual)
    assert np.all(out[:, :, 2:] == 0) and np.all(out[:, :, :2] != 0)
    neg = crop_patch(src, (-2, 0, 0), (4, 4, 4))
    assert np.all(neg[:2] == 0) and np.array_equal(neg[2:], src[:2, :4, :4])
    assert np.all(crop_patch(src, (10, 0, 0), (2, 2, 2)) == 0)


def test_empty_gtv_sampling_error():
    vol = VolumeGrid(np.zeros((8, 8, 8)), (1, 1, 1))
    empty = PhantomCase(vol, BinaryMask.like(vol, np.zeros((8, 8, 8), bool)))
    with pytest.raises(SamplingError):
        sample_patch(empty, SamplerConfig(patch_size=(4, 4, 4), tumor_fraction=1.0), 0)
    p = sample_patch(empty, SamplerConfig(patch_size=(4, 4, 4), tumor_fraction=0.0), 0)
    assert not p.label.any()


def test_tumor_fraction_binomial_bound():
    # GTV voxels sit at air HU so the body pool excludes them: the centre label
    # reveals which branch of the policy was taken
    hu = np.zeros((12, 12, 12), np.float32)
    gtv = np.zeros((12, 12, 12), bool)
    gtv[4:7, 4:7, 4:7] = True
    hu[gtv] = -1000
    vol = VolumeGrid(hu, (1, 1, 1))
    loaded = prepare_case(PhantomCase(vol, BinaryMask.like(vol, gtv)))
    cfg = SamplerConfig(patch_size=(4, 4, 4), tumor_fraction=0.3)
    n = 2000
    hits = sum(bool(sample_patch(loaded, cfg, s).label[2, 2, 2]) for s in range(n))
    assert abs(hits - n * 0.3) < 3 * np.sqrt(n * 0.3 * 0.7)


def test_noise_zero_sigma_identity(case):
    p = sample_patch(case, SamplerConfig(patch_size=(8, 8, 4)), 1)
    q = augment_gaussian_noise(p, 0, sigma=0.0)
    assert np.array_equal(q.input, p.input) and q.label is p.label


def test_noise_leaves_label_and_draws_sigma_in_range(case):
    p = sample_patch(case, SamplerConfig(patch_size=(8, 8, 4)), 1)
    for s in range(20):
        q = augment_gaussian_noise(p, s, sigma_max=5.0)
        assert q.label.tobytes() == p.label.tobytes()
        assert 0.0 <= q.noise_sigma <= 5.0


def test_noise_statistics():
    p = PatchSample(np.zeros((100, 100, 100), np.float32), np.zeros((100, 100, 100), bool), "x",
                    (0, 0, 0), 0)
    q = augment_gaussian_noise(p, 123, sigma=5.0)
    d = q.input.astype(np.float64)
    assert d.std() == pytest.approx(5.0, rel=0.01)
    assert abs(d.mean()) < 0.05 * 5.0
    hu = augment_gaussian_noise(p, 123, sigma=5.0, scale=1 / 500)
    assert hu.input.std() == pytest.approx(5.0 / 500, rel=0.01)


def test_fourteen_patches_two_batches(corpus):
    cases = corpus["cases"][:2]
    cfg = SamplerConfig(patch_size=(8, 8, 4), patches_per_case=7)
    batches = list(batch_stream(cases, cfg, batch_size=7, rng_state=0))
    assert [len(b) for b in batches] == [7, 7]
    assert not any(b.short for b in batches)
    assert batches[0].inputs.shape == (7, 8, 8, 4)


def test_short_final_batch_flagged(corpus):
    cfg = SamplerConfig(patch_size=(8, 8, 4), patches_per_case=3)
    batches = list(batch_stream(corpus, cfg, batch_size=7, rng_state=0, split=None))
    assert [len(b) for b in batches] == [7, 7, 1]
    assert [b.short for b in batches] == [False, False, True]


def test_single_worker_byte_identical(corpus):
    cfg = SamplerConfig(patch_size=(8, 8, 4), patches_per_case=4)
    a = list(batch_stream(corpus, cfg, 5, rng_state=9, split=None, with_sdf=True))
    b = list(batch_stream(corpus, cfg, 5, rng_state=9, split=None, with_sdf=True))
    assert len(a) == len(b)
    for x, y in zip(a, b):
        assert x.inputs.tobytes() == y.inputs.tobytes()
        assert x.labels.tobytes() == y.labels.tobytes()
        assert x.sdf.tobytes() == y.sdf.tobytes()


def test_worker_count_preserves_multiset(corpus):
    cfg = SamplerConfig(patch_size=(8, 8, 4), patches_per_case=6)

    def keyed(workers):
        out = {}
        for b in batch_stream(corpus, cfg, 7, rng_state=3, workers=workers, split=None):
            for s in b.samples:
                out[s.key] = s.input.tobytes()
        return out

    one, four = keyed(1), keyed(4)
    assert sorted(one) == sorted(four)
    assert one == four


def test_worker_error_surfaces(corpus):
    bad = [dict(corpus["cases"][0], path="/nonexistent/volume.mha")]
    with pytest.raises(OSError):
        list(batch_stream(bad, SamplerConfig(patch_size=(8, 8, 4)), 2, rng_state=0))


def test_pipeline_errors(corpus):
    with pytest.raises(ParameterError):
        PatchPipeline([], SamplerConfig())
    with pytest.raises(ParameterError):
        PatchPipeline(corpus["cases"], SamplerConfig(), batch_size=0)


def test_sdf_patch_matches_labels(corpus):
    cfg = SamplerConfig(patch_size=(16, 16, 8), patches_per_case=2, noise_sigma_max=0)
    for b in batch_stream(corpus, cfg, 4, rng_state=1, split=None, with_sdf=True):
        assert np.all((b.sdf < 0) <= (b.labels > 0))
        assert np.all((b.sdf > 0) <= (b.labels == 0))
