import json
from dataclasses import asdict

import numpy as np
import pytest
from scipy import ndimage, stats

from thermofuse import fileio
from thermofuse.augmentation import (AugmentationConfig, AugmentedSample, Provenance, SpatialParams,
                                     _inverse_affine, add_gaussian_noise, augment_dataset, augment_sequences,
                                     check_spatial_params, draw_spatial_params, make_replica, replay,
                                     sample_segment_indices, segment_bounds, segment_sample, spatial_transform,
                                     take_frames, transform_arrays, warp_bilinear, warp_nearest, write_samples)
from thermofuse.compression import compress
from thermofuse.dataset import DatasetIndex, Entry
from thermofuse.sequence import GroundTruth, ThermalSequence
from thermofuse.simulate import Defect, SpecimenSpec, simulate_pulse_sequence


@pytest.fixture
def small_seq():
    spec = SpecimenSpec(defects=[Defect((6, 6), 3, 1.0), Defect((10, 12), 2, 0.5)], noise_std_au=0.01)
    return simulate_pulse_sequence(spec, 40, 16, 16, 2.0, seed=1, id="spec_a")


# -- segments ---------------------------------------------------------------------

@pytest.mark.parametrize("n_t,n", [(10, 3), (1000, 100), (7, 7), (150, 100), (5, 1)])
def test_segment_partition(n_t, n):
    b = segment_bounds(n_t, n)
    sizes = [hi - lo for lo, hi in b]
    assert b[0][0] == 0 and b[-1][1] == n_t
    assert all(b[i][1] == b[i + 1][0] for i in range(n - 1))
    assert sum(sizes) == n_t and max(sizes) - min(sizes) <= 1
    assert sizes == sorted(sizes, reverse=True)  # remainder on the leading segments


def test_segment_errors():
    with pytest.raises(ValueError):
        segment_bounds(5, 6)
    with pytest.raises(ValueError):
        segment_bounds(5, 0)


def test_segment_sampling_uniform_chi_square():
    rng = np.random.default_rng(0)
    bounds = np.array(segment_bounds(1000, 100))
    draws = np.stack([sample_segment_indices(1000, 100, rng) for _ in range(10_000)])
    assert np.all((draws >= bounds[:, 0]) & (draws < bounds[:, 1]))
    offsets = draws - bounds[:, 0]
    counts = np.stack([np.bincount(offsets[:, s], minlength=10) for s in range(100)])
    chi2 = ((counts - 1000.0) ** 2 / 1000.0).sum(axis=1)
    lo, hi = stats.chi2.ppf([0.005, 0.995], df=9)
    inside = np.mean((chi2 >= lo) & (chi2 <= hi))
    assert inside >= 0.95  # 99% band per segment; allow a few of the 100 segments outside
    pooled = ((counts.sum(axis=0) - 100_000.0) ** 2 / 100_000.0).sum()
    assert pooled <= stats.chi2.ppf(0.99, df=9)


def test_segment_sample_shapes_and_times(small_seq):
    seq, _ = small_seq
    out = segment_sample(seq, 20, np.random.default_rng(1))
    assert out.n_t == 20
    assert np.all(np.diff(out.times()) > 0)
    idx = np.searchsorted(seq.times(), out.times())
    np.testing.assert_array_equal(seq.frames[idx], out.frames)
    assert out.times()[out.pulse_frame] <= 0 < out.times()[out.pulse_frame + 1]


def test_full_segmentation_returns_input(small_seq):
    seq, _ = small_seq
    out = segment_sample(seq, seq.n_t, np.random.default_rng(2))
    assert out.frames.tobytes() == seq.frames.tobytes()
    assert out.pulse_frame == seq.pulse_frame


def test_take_frames_requires_cold_frame(small_seq):
    seq, _ = small_seq
    with pytest.raises(ValueError):
        take_frames(seq, [5, 6, 7])


# -- noise ------------------------------------------------------------------------

def test_noise_moments():
    seq = ThermalSequence(np.zeros((100, 100, 100)), 1.0)
    noisy = add_gaussian_noise(seq, 0.005, np.random.default_rng(3))
    diff = noisy.frames.astype(np.float64).ravel()
    assert abs(diff.var() / 0.005 - 1) <= 0.05
    assert abs(diff.mean()) <= 3 * np.sqrt(0.005 / diff.size)


def test_zero_noise_is_identity(small_seq):
    seq, _ = small_seq
    assert add_gaussian_noise(seq, 0.0, np.random.default_rng(0)).frames.tobytes() == seq.frames.tobytes()
    with pytest.raises(ValueError):
        add_gaussian_noise(seq, -1.0, np.random.default_rng(0))


def test_defaults():
    cfg = AugmentationConfig()
    assert (cfg.n_segments, cfg.factor, cfg.noise_variance) == (100, 500, 0.005)


# -- replicas and provenance -------------------------------------------------------

def test_replay_is_bit_exact(small_seq):
    seq, gt = small_seq
    cfg = AugmentationConfig(n_segments=25, factor=3, seed=11)
    for r in range(3):
        s = make_replica(seq, gt, cfg, r)
        again = replay(seq, gt, s.provenance, cfg)
        assert s.pca.channels.tobytes() == again.pca.channels.tobytes()
        assert s.tsr.channels.tobytes() == again.tsr.channels.tobytes()
        prov = Provenance(**json.loads(json.dumps(asdict(s.provenance))))
        assert replay(seq, gt, prov, cfg).tsr.channels.tobytes() == s.tsr.channels.tobytes()


def test_noise_applied_after_sampling(small_seq):
    seq, gt = small_seq
    cfg = AugmentationConfig(n_segments=25, seed=4)
    s = make_replica(seq, gt, cfg, 0)
    p = s.provenance
    manual = take_frames(seq, p.frame_indices)
    manual = add_gaussian_noise(manual, cfg.noise_variance, np.random.default_rng(p.noise_seed))
    pca, tsr = compress(manual, cfg.pca_components, cfg.tsr_degree)
    assert tsr.channels.tobytes() == s.tsr.channels.tobytes()
    # the other order gives a different result
    other = add_gaussian_noise(seq, cfg.noise_variance, np.random.default_rng(p.noise_seed))
    other = take_frames(other, p.frame_indices)
    assert compress(other, cfg.pca_components, cfg.tsr_degree)[1].channels.tobytes() != s.tsr.channels.tobytes()


def test_degenerate_config_equals_direct_compression(small_seq):
    seq, gt = small_seq
    cfg = AugmentationConfig(n_segments=seq.n_t, factor=1, noise_variance=0.0)
    (s,) = list(augment_sequences([(seq, gt, "train")], cfg))
    pca, tsr = compress(seq, cfg.pca_components, cfg.tsr_degree)
    assert s.pca.channels.tobytes() == pca.channels.tobytes()
    assert s.tsr.channels.tobytes() == tsr.channels.tobytes()


def test_counts_and_test_passthrough(small_seq):
    seq, gt = small_seq
    items = [(seq.replace(id=f"s{i}"), gt, split) for i, split in enumerate(["train", "train", "val", "test"])]
    cfg = AugmentationConfig(n_segments=20, factor=4)
    out = list(augment_sequences(items, cfg))
    assert len(out) == 3 * 4 + 1
    test = [s for s in out if s.split == "test"]
    assert len(test) == 1 and test[0].provenance.replica is None
    assert test[0].tsr.channels.tobytes() == compress(seq, 10, 5)[1].channels.tobytes()


def test_order_independent_and_thread_invariant(small_seq):
    seq, gt = small_seq
    cfg = AugmentationConfig(n_segments=20, factor=3, seed=9)
    items = [(seq.replace(id="a"), gt, "train"), (seq.replace(id="b"), gt, "val")]
    one = list(augment_sequences(items, cfg, workers=1))
    two = list(augment_sequences(items, cfg, workers=3))
    rev = list(augment_sequences(items[::-1], cfg, workers=1))
    assert [asdict(s.provenance) for s in one] == [asdict(s.provenance) for s in two]
    by_key = {(s.provenance.source_id, s.provenance.replica): s for s in rev}
    for s in one:
        twin = by_key[(s.provenance.source_id, s.provenance.replica)]
        assert twin.pca.channels.tobytes() == s.pca.channels.tobytes()


# -- spatial ---------------------------------------------------------------------

def _sample(rng, shape=(12, 12)):
    mask = rng.integers(0, 3, size=shape)
    depth = np.where(mask > 0, mask * 0.5, 0.0).astype(np.float32)
    gt = GroundTruth(mask, depth, [0, 0.5, 1.0])
    from thermofuse.compression import PcaTensor, TsrTensor
    return AugmentedSample(PcaTensor(rng.normal(size=(3,) + shape), np.ones(3)),
                           TsrTensor(rng.normal(size=(2,) + shape), 1), gt, Provenance("x"))


def test_identity_params_leave_sample_unchanged():
    s = _sample(np.random.default_rng(0))
    out = spatial_transform(s, SpatialParams())
    assert out.pca.channels.tobytes() == s.pca.channels.tobytes()
    np.testing.assert_array_equal(out.gt.class_mask, s.gt.class_mask)


def test_double_flip_is_identity():
    s = _sample(np.random.default_rng(1))
    p = SpatialParams(flip_h=True)
    once = spatial_transform(s, p)
    np.testing.assert_array_equal(once.gt.class_mask, s.gt.class_mask[:, ::-1])
    twice = spatial_transform(once, p)
    assert twice.pca.channels.tobytes() == s.pca.channels.tobytes()
    np.testing.assert_array_equal(twice.gt.depth_map, s.gt.depth_map)


@pytest.mark.parametrize("shape", [(9, 9), (10, 10)])
def test_quarter_turn_matches_index_permutation(shape):
    mask = np.random.default_rng(2).integers(0, 5, size=shape)
    _, (out,) = transform_arrays(SpatialParams(rotation_deg=90.0), [], [mask])
    np.testing.assert_array_equal(out, np.rot90(mask, 1))
    _, (out,) = transform_arrays(SpatialParams(rotation_deg=-90.0), [], [mask])
    np.testing.assert_array_equal(out, np.rot90(mask, -1))


def test_warps_match_scipy_oracle():
    rng = np.random.default_rng(3)
    for _ in range(10):
        p = draw_spatial_params(AugmentationConfig(), rng, (20, 24))
        p.flip_h = p.flip_v = False
        mat, off = _inverse_affine(p, (20, 24))
        img = rng.normal(size=(2, 20, 24))
        lab = rng.integers(0, 4, size=(20, 24))
        ref = np.stack([ndimage.affine_transform(c, mat, off, order=1, mode="grid-constant") for c in img])
        np.testing.assert_allclose(warp_bilinear(img, mat, off), ref, atol=1e-12)
        refl = ndimage.affine_transform(lab, mat, off, order=0, mode="grid-constant")
        np.testing.assert_array_equal(warp_nearest(lab, mat, off), refl)


def test_translation_moves_content():
    img = np.zeros((1, 10, 10))
    img[0, 4, 4] = 1.0
    (out,), _ = transform_arrays(SpatialParams(translate_px=(2.0, -1.0)), [img], [])
    assert out[0, 6, 3] == pytest.approx(1.0)


def test_labels_subset_and_alignment():
    rng = np.random.default_rng(4)
    s = _sample(rng, (16, 16))
    cfg = AugmentationConfig()
    for _ in range(20):
        p = draw_spatial_params(cfg, rng, (16, 16))
        out = spatial_transform(s, p, strict=True, config=cfg)
        assert set(np.unique(out.gt.class_mask)) <= set(np.unique(s.gt.class_mask)) | {0}
        # depth and mask come from the same nearest-neighbour lookup
        assert np.all((out.gt.class_mask == 0) == (out.gt.depth_map == 0))
        assert out.pca.channels.shape == s.pca.channels.shape
        assert out.provenance.spatial["rotation_deg"] == p.rotation_deg


def test_strict_rejects_out_of_range():
    s = _sample(np.random.default_rng(5))
    with pytest.raises(ValueError):
        spatial_transform(s, SpatialParams(rotation_deg=30.0), strict=True)
    with pytest.raises(ValueError):
        check_spatial_params(SpatialParams(translate_px=(5.0, 0.0)), (12, 12), AugmentationConfig())


def test_leading_axes_are_batched():
    rng = np.random.default_rng(6)
    batch = rng.normal(size=(3, 2, 10, 10))
    p = SpatialParams(rotation_deg=7.0, shear_deg=-4.0, translate_px=(0.5, 1.5), flip_v=True)
    (out,), _ = transform_arrays(p, [batch])
    for b in range(3):
        (single,), _ = transform_arrays(p, [batch[b]])
        np.testing.assert_allclose(out[b], single, atol=0)


# -- on-disk tree -------------------------------------------------------------------

def test_augmented_tree_and_manifest(tmp_path, small_seq):
    seq, gt = small_seq
    root = tmp_path / "raw"
    root.mkdir()
    entries = []
    for i, split in enumerate(["train", "val", "test"]):
        sid = f"s{i}"
        fileio.save_sequence(seq.replace(id=sid), root / f"{sid}.ptseq")
        fileio.save_ground_truth(gt, root / f"{sid}_gt")
        entries.append(Entry(f"{sid}.ptseq", f"{sid}_gt", split))
    index = DatasetIndex(entries)
    cfg = AugmentationConfig(n_segments=20, factor=2, seed=1)
    manifest = write_samples(augment_dataset(index, cfg, root), tmp_path / "aug", cfg)
    assert len(manifest["samples"]) == 5
    disk = json.loads((tmp_path / "aug" / "manifest.json").read_text())
    assert disk == json.loads(json.dumps(manifest))
    for rec in disk["samples"]:
        arr, header = fileio.load_modality(tmp_path / "aug" / rec["pca"])
        assert header["modality"] == "pca" and arr.shape == (10, 16, 16)
        assert (tmp_path / "aug" / (rec["ground_truth"] + "_mask.pgm")).exists()
    assert sorted(p.name for p in (tmp_path / "aug").iterdir()) == ["manifest.json", "test", "train", "val"]
    with pytest.raises(ValueError):
        list(augment_dataset(DatasetIndex([Entry("s0.ptseq", "s0_gt")]), cfg, root))
