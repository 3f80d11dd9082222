"""Scene generation invariants, augmentation behavior, and the dataset
file format."""

import numpy as np
import pytest

from jointseg.synthdata import (AffineRanges, DATASET_MAGIC, Sample, SceneSpec,
                                generate_sample, make_dataset, random_affine,
                                read_dataset, read_metadata, sample_seeds,
                                samples_equal, sidecar_path, write_dataset)


CLEAN = SceneSpec(noise_std=0.0, clutter_blobs=(0, 0))


class TestGenerateSample:
    def test_same_seed_same_sample(self):
        a = generate_sample(SceneSpec(), 123)
        b = generate_sample(SceneSpec(), 123)
        assert samples_equal(a, b)

    def test_different_seeds_differ(self):
        a = generate_sample(SceneSpec(), 1)
        b = generate_sample(SceneSpec(), 2)
        assert not np.array_equal(a.image, b.image)

    @pytest.mark.parametrize("seed", range(25))
    def test_scar_inside_myocardium_and_image_in_range(self, seed):
        s = generate_sample(SceneSpec(), seed)
        assert not (s.scar & ~s.myo).any()
        assert s.image.min() >= 0.0 and s.image.max() <= 1.0
        assert s.image.dtype == np.float32 and s.image.shape == (1, 64, 64)
        assert set(np.unique(s.myo)) <= {0, 1}
        assert set(np.unique(s.scar)) <= {0, 1}

    def test_clean_scene_hits_exact_levels(self):
        s = generate_sample(CLEAN, 7)
        plain_ring = (s.myo == 1) & (s.scar == 0)
        assert plain_ring.any()
        np.testing.assert_array_equal(s.image[0][plain_ring],
                                      np.float32(CLEAN.myocardium))
        if s.scar.any():
            np.testing.assert_array_equal(s.image[0][s.scar == 1],
                                          np.float32(CLEAN.scar))
        np.testing.assert_array_equal(s.image[0][s.myo == 0],
                                      np.float32(CLEAN.background))

    def test_clutter_never_touches_the_ring(self):
        spec = SceneSpec(noise_std=0.0, clutter_blobs=(3, 3))
        for seed in range(10):
            s = generate_sample(spec, seed)
            bright = s.image[0] == spec.clutter
            assert not (bright & (s.myo == 1)).any()

    def test_population_statistics(self):
        # per-sample myocardium area sanity plus enough scar-free cases
        specs = SceneSpec()
        scar_free = 0
        for seed in range(1000):
            s = generate_sample(specs, seed)
            frac = s.myo.mean()
            assert 0.02 < frac < 0.40, f"seed {seed}: myo fraction {frac:.3f}"
            scar_free += not s.scar.any()
        assert scar_free >= 200, f"only {scar_free}/1000 scar-free samples"

    def test_degenerate_specs_rejected(self):
        with pytest.raises(ValueError, match="radius"):
            SceneSpec(inner_radius=(0.3, 0.35), outer_radius=(0.2, 0.25))
        with pytest.raises(ValueError, match="frame"):
            SceneSpec(outer_radius=(0.4, 0.49))
        with pytest.raises(ValueError, match="intensity"):
            SceneSpec(scar=1.5)
        with pytest.raises(ValueError, match="noise"):
            SceneSpec(noise_std=-0.1)
        with pytest.raises(ValueError, match="too small"):
            SceneSpec(height=4)


class TestMakeDataset:
    def test_ids_and_determinism(self):
        a = make_dataset(SceneSpec(), 5, master_seed=42)
        b = make_dataset(SceneSpec(), 5, master_seed=42)
        assert [s.id for s in a] == ["0000", "0001", "0002", "0003", "0004"]
        assert all(samples_equal(x, y) for x, y in zip(a, b))

    def test_worker_count_does_not_change_output(self):
        a = make_dataset(SceneSpec(), 8, master_seed=1, workers=1)
        b = make_dataset(SceneSpec(), 8, master_seed=1, workers=4)
        assert all(samples_equal(x, y) for x, y in zip(a, b))

    def test_master_seed_selects_different_families(self):
        a = make_dataset(SceneSpec(), 3, master_seed=1)
        b = make_dataset(SceneSpec(), 3, master_seed=2)
        assert not np.array_equal(a[0].image, b[0].image)

    def test_derived_seeds_are_distinct(self):
        seeds = sample_seeds(0, 1000)
        assert len(set(seeds.tolist())) == 1000

    def test_empty_dataset(self):
        assert make_dataset(SceneSpec(), 0, master_seed=0) == []


class TestRandomAffine:
    def test_identity_ranges_change_nothing(self):
        s = generate_sample(SceneSpec(), 3)
        out = random_affine(s, seed=0)
        assert samples_equal(out, s)
        assert out.image is not s.image  # fresh buffers, not views

    def test_masks_stay_binary_and_nested(self):
        ranges = AffineRanges(scale=(0.85, 1.15), rotate_deg=(-30, 30),
                              translate=(-0.08, 0.08), shear_deg=(-10, 10))
        for seed in range(15):
            s = generate_sample(SceneSpec(), seed)
            out = random_affine(s, seed=seed + 100, ranges=ranges)
            assert set(np.unique(out.myo)) <= {0, 1}
            assert set(np.unique(out.scar)) <= {0, 1}
            assert not (out.scar & ~out.myo).any()
            assert 0.0 <= out.image.min() and out.image.max() <= 1.0

    def test_same_seed_same_transform(self):
        ranges = AffineRanges(rotate_deg=(-30, 30))
        s = generate_sample(SceneSpec(), 5)
        a = random_affine(s, seed=9, ranges=ranges)
        b = random_affine(s, seed=9, ranges=ranges)
        assert samples_equal(a, b)

    def test_four_quarter_turns_restore_the_masks(self):
        quarter = AffineRanges(rotate_deg=(90.0, 90.0))
        s = generate_sample(CLEAN, 11)
        out = s
        for _ in range(4):
            out = random_affine(out, seed=0, ranges=quarter)
        np.testing.assert_array_equal(out.myo, s.myo)
        np.testing.assert_array_equal(out.scar, s.scar)

    def test_pure_translation_moves_the_centroid(self):
        shift = AffineRanges(translate=(0.125, 0.125))  # exactly 8 px at 64 wide
        s = generate_sample(CLEAN, 2)
        out = random_affine(s, seed=4, ranges=shift)
        cy0, cx0 = np.argwhere(s.myo).mean(axis=0)
        cy1, cx1 = np.argwhere(out.myo).mean(axis=0)
        assert cy1 - cy0 == pytest.approx(8.0, abs=0.5)
        assert cx1 - cx0 == pytest.approx(8.0, abs=0.5)


class TestDatasetFile:
    def test_round_trip(self, tmp_path):
        samples = make_dataset(SceneSpec(), 4, master_seed=9)
        path = tmp_path / "ds.bin"
        write_dataset(samples, path)
        loaded = read_dataset(path)
        assert len(loaded) == 4
        assert all(samples_equal(a, b) for a, b in zip(samples, loaded))

    def test_round_trip_with_width_not_multiple_of_eight(self, tmp_path):
        rng = np.random.default_rng(0)
        myo = (rng.random((10, 12)) < 0.5).astype(np.uint8)
        scar = (myo & (rng.random((10, 12)) < 0.5)).astype(np.uint8)
        s = Sample(rng.random((1, 10, 12)).astype(np.float32), myo, scar, "odd")
        path = tmp_path / "ds.bin"
        write_dataset([s], path)
        (back,) = read_dataset(path)
        assert samples_equal(s, back)

    def test_empty_dataset_round_trips(self, tmp_path):
        path = tmp_path / "empty.bin"
        write_dataset([], path)
        assert read_dataset(path) == []

    def test_wrong_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.bin"
        path.write_bytes(b"GARBAGE" + b"\x00" * 32)
        with pytest.raises(ValueError, match="magic"):
            read_dataset(path)

    def test_truncation_reports_offset(self, tmp_path):
        path = tmp_path / "t.bin"
        write_dataset(make_dataset(SceneSpec(), 2, master_seed=0), path)
        blob = path.read_bytes()
        path.write_bytes(blob[: len(blob) // 2])
        with pytest.raises(ValueError, match="offset"):
            read_dataset(path)

    def test_trailing_bytes_rejected(self, tmp_path):
        path = tmp_path / "x.bin"
        write_dataset([], path)
        path.write_bytes(path.read_bytes() + b"\x00")
        with pytest.raises(ValueError, match="trailing"):
            read_dataset(path)

    def test_sidecar_records_spec_and_seed(self, tmp_path):
        spec = SceneSpec(noise_std=0.01)
        path = tmp_path / "ds.bin"
        write_dataset(make_dataset(spec, 3, master_seed=77), path,
                      spec=spec, master_seed=77)
        meta = read_metadata(sidecar_path(path))
        assert meta["master_seed"] == 77
        assert meta["count"] == 3
        assert meta["noise_std"] == 0.01
        assert meta["inner_radius"] == spec.inner_radius
        assert SceneSpec(**{k: v for k, v in meta.items()
                            if k not in ("master_seed", "count")}) == spec
