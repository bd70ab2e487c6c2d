"""Cohort generation, volume I/O, splitting, rotation and scoring tests."""

import json

import numpy as np
import pytest

from voxpoint import data as vd


def make_sample(dims=(8, 8, 8), label=0, seed=0, sid="t0"):
    spec = vd.CohortSpec(n_samples=1, dims=dims, class_ratio=0.5,
                         geometry_signal=0.5, intensity_signal=0.5, seed=seed)
    return vd.generate_sample(spec, label, np.random.default_rng(seed),
                              sample_id=sid)


def surface_area(mask):
    """Exposed-face count, axis by axis, as an independent reference."""
    total = 0
    for axis in range(3):
        padded = np.moveaxis(np.pad(mask, 1), axis, 0)
        total += int(np.sum(padded[1:] != padded[:-1]))
    return total


class TestVolumeSample:
    def test_channel_count_enforced(self):
        with pytest.raises(ValueError):
            vd.VolumeSample("x", np.zeros((3, 8, 8, 8)),
                            np.ones((8, 8, 8), bool), 0)

    def test_dim_mismatch_rejected(self):
        with pytest.raises(ValueError):
            vd.VolumeSample("x", np.zeros((4, 8, 8, 8)),
                            np.ones((8, 8, 9), bool), 0)

    def test_nonfinite_intensity_rejected(self):
        ch = np.zeros((4, 8, 8, 8))
        ch[1, 2, 3, 4] = np.inf
        with pytest.raises(ValueError):
            vd.VolumeSample("x", ch, np.ones((8, 8, 8), bool), 0)

    def test_empty_mask_rejected(self):
        with pytest.raises(ValueError):
            vd.VolumeSample("x", np.zeros((4, 8, 8, 8)),
                            np.zeros((8, 8, 8), bool), 0)

    def test_disconnected_mask_rejected(self):
        m = np.zeros((8, 8, 8), bool)
        m[1, 1, 1] = m[5, 5, 5] = True
        with pytest.raises(ValueError):
            vd.VolumeSample("x", np.zeros((4, 8, 8, 8)), m, 0)

    def test_bad_label_rejected(self):
        m = np.zeros((8, 8, 8), bool)
        m[4, 4, 4] = True
        with pytest.raises(ValueError):
            vd.VolumeSample("x", np.zeros((4, 8, 8, 8)), m, 2)


class TestCohortSpec:
    def test_valid_spec_accepted(self):
        vd.CohortSpec(10, (8, 8, 8), 0.3, 0.5, 0.5, 1)

    @pytest.mark.parametrize("kw", [
        {"n_samples": 0},
        {"dims": (8, 8)},
        {"dims": (8, 8, 7)},
        {"class_ratio": 0.0},
        {"class_ratio": 1.0},
        {"geometry_signal": 1.5},
        {"intensity_signal": -0.1},
        {"seed": -1},
    ])
    def test_invalid_specs_rejected(self, kw):
        base = dict(n_samples=10, dims=(8, 8, 8), class_ratio=0.3,
                    geometry_signal=0.5, intensity_signal=0.5, seed=1)
        base.update(kw)
        with pytest.raises(ValueError):
            vd.CohortSpec(**base)


class TestGenerateSample:
    def test_deterministic(self):
        a = make_sample(seed=3)
        b = make_sample(seed=3)
        np.testing.assert_array_equal(a.channels, b.channels)
        np.testing.assert_array_equal(a.mask, b.mask)

    def test_zero_signal_classes_identical(self):
        # with both dials at 0 the label never enters the draw, so the
        # class-conditional distributions coincide sample by sample
        spec = vd.CohortSpec(1, (12, 12, 12), 0.5, 0.0, 0.0, 0)
        a = vd.generate_sample(spec, 0, np.random.default_rng(11))
        b = vd.generate_sample(spec, 1, np.random.default_rng(11))
        np.testing.assert_array_equal(a.channels, b.channels)
        np.testing.assert_array_equal(a.mask, b.mask)
        assert (a.label, b.label) == (0, 1)

    def test_geometry_signal_separates_surface_ratio(self):
        spec = vd.CohortSpec(1, (16, 16, 16), 0.5, 1.0, 0.0, 0)
        rng = np.random.default_rng(21)
        ratios = {0: [], 1: []}
        for label in (0, 1):
            for _ in range(100):
                s = vd.generate_sample(spec, label, rng)
                ratios[label].append(surface_area(s.mask) / s.mask.sum())
        lo, hi = np.mean(ratios[0]), np.mean(ratios[1])
        assert (hi - lo) / lo >= 0.20

    def test_intensity_signal_brightens_core_channel(self):
        spec = vd.CohortSpec(1, (16, 16, 16), 0.5, 0.0, 1.0, 0)
        rng = np.random.default_rng(22)
        means = {0: [], 1: []}
        for label in (0, 1):
            for _ in range(50):
                s = vd.generate_sample(spec, label, rng)
                means[label].append(s.channels[vd.CORE_CHANNEL][s.mask].mean())
        assert np.mean(means[1]) > np.mean(means[0]) + 0.2

    def test_other_channels_label_free_without_geometry(self):
        spec = vd.CohortSpec(1, (12, 12, 12), 0.5, 0.0, 1.0, 0)
        a = vd.generate_sample(spec, 0, np.random.default_rng(31))
        b = vd.generate_sample(spec, 1, np.random.default_rng(31))
        np.testing.assert_array_equal(a.mask, b.mask)
        for c in range(4):
            if c != vd.CORE_CHANNEL:
                np.testing.assert_array_equal(a.channels[c], b.channels[c])


class TestGenerateCohort:
    def test_counts_and_ids(self):
        spec = vd.CohortSpec(20, (8, 8, 8), 0.25, 0.5, 0.5, 5)
        cohort = vd.generate_cohort(spec)
        assert len(cohort) == 20
        assert sum(s.label for s in cohort) == 5
        assert len({s.sample_id for s in cohort}) == 20

    def test_seed_reproducible(self):
        spec = vd.CohortSpec(6, (8, 8, 8), 0.5, 0.7, 0.7, 9)
        a, b = vd.generate_cohort(spec), vd.generate_cohort(spec)
        for x, y in zip(a, b):
            assert x.label == y.label
            np.testing.assert_array_equal(x.channels, y.channels)
            np.testing.assert_array_equal(x.mask, y.mask)


class TestVolumeIO:
    def test_round_trip_identity(self, tmp_path):
        s = make_sample(seed=7, sid="rt01", label=1)
        path = vd.save_volume(s, tmp_path)
        r = vd.load_volume(path)
        assert r.sample_id == s.sample_id and r.label == s.label
        np.testing.assert_array_equal(r.channels, s.channels)
        np.testing.assert_array_equal(r.mask, s.mask)

    def test_truncated_payload(self, tmp_path):
        s = make_sample(sid="tr01")
        path = vd.save_volume(s, tmp_path)
        bin_path = tmp_path / "tr01.bin"
        bin_path.write_bytes(bin_path.read_bytes()[:-10])
        with pytest.raises(vd.TruncatedPayloadError):
            vd.load_volume(path)

    def test_oversized_payload(self, tmp_path):
        s = make_sample(sid="ov01")
        path = vd.save_volume(s, tmp_path)
        bin_path = tmp_path / "ov01.bin"
        bin_path.write_bytes(bin_path.read_bytes() + b"\x00")
        with pytest.raises(vd.VolumeFormatError):
            vd.load_volume(path)

    def test_wrong_channel_count_header(self, tmp_path):
        s = make_sample(sid="ch01")
        path = vd.save_volume(s, tmp_path)
        header = json.loads(path.read_text())
        header["channels"] = 5
        path.write_text(json.dumps(header))
        with pytest.raises(vd.VolumeFormatError):
            vd.load_volume(path)

    def test_unknown_header_key(self, tmp_path):
        s = make_sample(sid="uk01")
        path = vd.save_volume(s, tmp_path)
        header = json.loads(path.read_text())
        header["extra"] = 1
        path.write_text(json.dumps(header))
        with pytest.raises(vd.VolumeFormatError):
            vd.load_volume(path)

    def test_unparseable_header(self, tmp_path):
        s = make_sample(sid="bj01")
        path = vd.save_volume(s, tmp_path)
        path.write_text("{not json")
        with pytest.raises(vd.VolumeFormatError):
            vd.load_volume(path)

    def test_bad_mask_byte(self, tmp_path):
        s = make_sample(sid="mb01")
        path = vd.save_volume(s, tmp_path)
        bin_path = tmp_path / "mb01.bin"
        raw = bytearray(bin_path.read_bytes())
        raw[-1] = 7
        bin_path.write_bytes(bytes(raw))
        with pytest.raises(vd.VolumeFormatError):
            vd.load_volume(path)

    def test_cohort_round_trip(self, tmp_path):
        spec = vd.CohortSpec(5, (8, 8, 8), 0.4, 0.5, 0.5, 3)
        cohort = vd.generate_cohort(spec)
        vd.save_cohort(cohort, tmp_path)
        back = vd.load_cohort(tmp_path)
        assert [s.sample_id for s in back] == [s.sample_id for s in cohort]
        for x, y in zip(back, cohort):
            np.testing.assert_array_equal(x.channels, y.channels)


class TestSplitDataset:
    def test_ten_samples_split_eight_two(self):
        train, test = vd.split_dataset([f"s{i}" for i in range(10)], seed=1)
        assert len(train) == 8 and len(test) == 2

    def test_partition_exact(self):
        ids = [f"s{i}" for i in range(37)]
        train, test = vd.split_dataset(ids, seed=2)
        assert sorted(train + test) == sorted(ids)
        assert not set(train) & set(test)

    def test_same_seed_same_split(self):
        ids = [f"s{i}" for i in range(30)]
        assert vd.split_dataset(ids, seed=4) == vd.split_dataset(ids, seed=4)

    def test_stratified_eighty_twenty(self):
        ids = [f"s{i}" for i in range(100)]
        labels = [0] * 80 + [1] * 20
        train, test = vd.split_dataset(ids, labels, stratify=True, seed=3)
        lab = dict(zip(ids, labels))
        test_labels = [lab[i] for i in test]
        assert test_labels.count(0) == 16 and test_labels.count(1) == 4
        assert len(train) == 80

    def test_too_few_rejected(self):
        with pytest.raises(ValueError):
            vd.split_dataset(["a", "b", "c"], seed=0)

    def test_stratified_small_class_rejected(self):
        ids = [f"s{i}" for i in range(10)]
        labels = [0] * 7 + [1] * 3
        with pytest.raises(ValueError):
            vd.split_dataset(ids, labels, stratify=True, seed=0)


class TestCvFolds:
    def test_canonical_five_folds(self):
        ids = [f"s{i}" for i in range(25)]
        folds = vd.cv_folds(ids, k=5, seed=1)
        vals = [set(v) for _, v in folds]
        assert all(len(v) == 5 for v in vals)
        assert set().union(*vals) == set(ids)
        for i in range(5):
            for j in range(i + 1, 5):
                assert not vals[i] & vals[j]

    def test_fit_val_partition_each_fold(self):
        ids = [f"s{i}" for i in range(25)]
        for fit, val in vd.cv_folds(ids, k=3, seed=2):
            assert sorted(fit + val) == sorted(ids)

    def test_two_folds_of_ten(self):
        folds = vd.cv_folds([f"s{i}" for i in range(10)], k=2, seed=3)
        vals = [set(v) for _, v in folds]
        assert all(len(v) == 2 for v in vals)
        assert not vals[0] & vals[1]

    def test_same_seed_identical(self):
        ids = [f"s{i}" for i in range(15)]
        assert vd.cv_folds(ids, 4, seed=5) == vd.cv_folds(ids, 4, seed=5)

    @pytest.mark.parametrize("k", [1, 6])
    def test_k_out_of_range_rejected(self, k):
        with pytest.raises(ValueError):
            vd.cv_folds([f"s{i}" for i in range(25)], k=k)

    def test_k_exceeding_samples_rejected(self):
        with pytest.raises(ValueError):
            vd.cv_folds(["a", "b", "c"], k=4)


class TestRotations:
    def test_twenty_four_distinct(self):
        probe = np.arange(27).reshape(3, 3, 3)
        images = [vd.rotate_grid(probe, r).tobytes()
                  for r in range(vd.rotation_count())]
        assert vd.rotation_count() == 24
        assert len(set(images)) == 24

    def test_identity_rotation(self):
        s = make_sample(seed=13)
        r = vd.augment_rotate(s, 0)
        np.testing.assert_array_equal(r.channels, s.channels)
        np.testing.assert_array_equal(r.mask, s.mask)

    def test_inverse_restores_bit_exact(self):
        s = make_sample(seed=14)
        for rot in range(24):
            back = vd.augment_rotate(vd.augment_rotate(s, rot),
                                     vd.rotation_inverse(rot))
            np.testing.assert_array_equal(back.channels, s.channels)
            np.testing.assert_array_equal(back.mask, s.mask)

    def test_voxel_count_invariant(self):
        s = make_sample(seed=15)
        n = s.mask.sum()
        assert all(vd.augment_rotate(s, r).mask.sum() == n for r in range(24))

    def test_label_preserved_and_mask_commutes(self):
        s = make_sample(seed=16, label=1)
        for rot in (0, 5, 17, 23):
            r = vd.augment_rotate(s, rot)
            assert r.label == 1
            np.testing.assert_array_equal(r.mask,
                                          vd.rotate_grid(s.mask, rot))

    def test_nonsquare_dims_rotate_and_restore(self):
        s = make_sample(dims=(8, 10, 12), seed=17)
        r = vd.augment_rotate(s, 7)
        back = vd.augment_rotate(r, vd.rotation_inverse(7))
        np.testing.assert_array_equal(back.channels, s.channels)

    def test_out_of_range_rotation_rejected(self):
        with pytest.raises(ValueError):
            vd.rotate_grid(np.zeros((3, 3, 3)), 24)


class TestDiceScore:
    def test_identical_masks(self):
        m = np.zeros((5, 5, 5), bool)
        m[2, 2, 2] = True
        assert vd.dice_score(m, m) == 1.0

    def test_disjoint_masks(self):
        a = np.zeros((5, 5, 5), bool)
        b = np.zeros((5, 5, 5), bool)
        a[0, 0, 0] = True
        b[4, 4, 4] = True
        assert vd.dice_score(a, b) == 0.0

    def test_half_overlap(self):
        a = np.zeros((4, 4, 4), bool)
        b = np.zeros((4, 4, 4), bool)
        a[0, 0, :4] = True
        b[0, 0, 2:4] = True
        b[0, 1, :2] = True
        assert vd.dice_score(a, b) == 0.5

    def test_symmetric(self):
        rng = np.random.default_rng(33)
        a = rng.random((6, 6, 6)) > 0.5
        b = rng.random((6, 6, 6)) > 0.5
        assert vd.dice_score(a, b) == vd.dice_score(b, a)

    def test_both_empty_is_one(self):
        z = np.zeros((3, 3, 3), bool)
        assert vd.dice_score(z, z) == 1.0

    def test_dim_mismatch_rejected(self):
        with pytest.raises(ValueError):
            vd.dice_score(np.zeros((3, 3, 3)), np.zeros((3, 3, 4)))


class TestBalanceMinority:
    def make_set(self, n0, n1):
        out = []
        for i in range(n0):
            out.append(make_sample(seed=100 + i, label=0, sid=f"a{i:03d}"))
        for i in range(n1):
            out.append(make_sample(seed=200 + i, label=1, sid=f"b{i:03d}"))
        return out

    def test_sixty_twenty_equalized(self):
        samples = self.make_set(15, 5)
        out = vd.balance_minority(samples)
        labels = [s.label for s in out]
        assert labels.count(0) == labels.count(1) == 15
        copies = [s for s in out if vd.is_augmented(s.sample_id)]
        assert len(copies) == 10
        assert all(s.label == 1 for s in copies)
        # each minority original contributes two distinct rotations
        assert len({s.sample_id for s in out}) == len(out)

    def test_balanced_input_unchanged(self):
        samples = self.make_set(4, 4)
        out = vd.balance_minority(samples)
        assert [s.sample_id for s in out] == [s.sample_id for s in samples]

    def test_single_class_rejected(self):
        with pytest.raises(ValueError):
            vd.balance_minority(self.make_set(5, 0))

    def test_copies_marked(self):
        out = vd.balance_minority(self.make_set(6, 2))
        originals = [s for s in out if not vd.is_augmented(s.sample_id)]
        assert len(originals) == 8
        assert all(vd.is_augmented(s.sample_id)
                   for s in out[8:])


class TestExtractCrop:
    def test_shape_and_dtype(self):
        crop = vd.extract_crop(make_sample(seed=41), size=16)
        assert crop.shape == (4, 16, 16, 16)
        assert crop.dtype == np.float32

    def test_outside_mask_zeroed_and_zscored(self):
        s = make_sample(seed=42, dims=(16, 16, 16))
        crop = vd.extract_crop(s, size=16)
        # resample the mask the same way the crop does
        lo = [int(np.flatnonzero(s.mask.any(
            axis=tuple(a for a in range(3) if a != ax)))[0])
            for ax in range(3)]
        hi = [int(np.flatnonzero(s.mask.any(
            axis=tuple(a for a in range(3) if a != ax)))[-1]) + 1
            for ax in range(3)]
        box = s.mask[tuple(slice(a, b) for a, b in zip(lo, hi))]
        idx = [np.minimum((np.arange(16) + 0.5) * (e / 16), e - 1).astype(int)
               for e in box.shape]
        mask_r = box[np.ix_(idx[0], idx[1], idx[2])]
        for c in range(4):
            assert np.all(crop[c][~mask_r] == 0.0)
            vals = crop[c][mask_r]
            assert abs(vals.mean()) < 1e-4
            assert abs(vals.std() - 1.0) < 1e-3

    def test_single_voxel_mask_gives_zero_crop(self):
        m = np.zeros((8, 8, 8), bool)
        m[3, 4, 5] = True
        ch = np.random.default_rng(43).normal(0, 1, (4, 8, 8, 8))
        s = vd.VolumeSample("one", ch, m, 0)
        crop = vd.extract_crop(s, size=4)
        np.testing.assert_array_equal(crop, np.zeros((4, 4, 4, 4), np.float32))

    def test_nearest_neighbor_doubling(self):
        m = np.zeros((8, 8, 8), bool)
        m[2:6, 2:6, 2:6] = True
        ch = np.zeros((4, 8, 8, 8), dtype=np.float32)
        ch[0, 2:6, 2:6, 2:6] = np.arange(64.0).reshape(4, 4, 4)
        s = vd.VolumeSample("nn", ch, m, 0)
        crop = vd.extract_crop(s, size=8)
        # each source voxel should appear as a 2x2x2 block, z-scored
        block = crop[0][:2, :2, :2]
        assert np.all(block == block[0, 0, 0])

    def test_deterministic(self):
        s = make_sample(seed=44)
        np.testing.assert_array_equal(vd.extract_crop(s, 12),
                                      vd.extract_crop(s, 12))
