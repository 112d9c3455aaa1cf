import struct

import numpy as np
import pytest

from gmvae_defense.data import (
    PROTOTYPES,
    UNLABELED,
    Dataset,
    IdxCountMismatchError,
    IdxError,
    IdxMagicError,
    IdxTruncatedError,
    SyntheticSpec,
    gen_synthetic,
    idx_images_bytes,
    idx_labels_bytes,
    load_idx,
    parse_idx_images,
    parse_idx_labels,
    prototype,
    split_semi_supervised,
    write_idx,
)


def _images_blob(count, rows, cols, pixels):
    return struct.pack(">IIII", 0x803, count, rows, cols) + bytes(pixels)


def _labels_blob(labels):
    return struct.pack(">II", 0x801, len(labels)) + bytes(labels)


class TestIdxFixtures:
    def test_hand_built_pair(self, tmp_path):
        (tmp_path / "i").write_bytes(_images_blob(2, 2, 2, [0, 255, 255, 0, 255, 255, 0, 0]))
        (tmp_path / "l").write_bytes(_labels_blob([1, 0]))
        ds = load_idx(tmp_path / "i", tmp_path / "l")
        np.testing.assert_array_equal(ds.images, [[0.0, 1.0, 1.0, 0.0], [1.0, 1.0, 0.0, 0.0]])
        np.testing.assert_array_equal(ds.labels, [1, 0])
        assert (ds.rows, ds.cols, ds.num_classes) == (2, 2, 2)

    def test_intermediate_pixel_scaling(self):
        images, rows, cols = parse_idx_images(_images_blob(1, 1, 3, [0, 51, 128]))
        np.testing.assert_array_equal(images, [[0.0, 0.2, 128 / 255]])

    def test_count_mismatch(self, tmp_path):
        (tmp_path / "i").write_bytes(_images_blob(2, 1, 1, [0, 1]))
        (tmp_path / "l").write_bytes(_labels_blob([0, 0, 0]))
        with pytest.raises(IdxCountMismatchError):
            load_idx(tmp_path / "i", tmp_path / "l")

    def test_wrong_magic(self):
        with pytest.raises(IdxMagicError):
            parse_idx_images(_labels_blob([0]))
        with pytest.raises(IdxMagicError):
            parse_idx_labels(_images_blob(1, 1, 1, [0]))

    def test_truncated(self):
        with pytest.raises(IdxTruncatedError):
            parse_idx_images(_images_blob(2, 2, 2, [0] * 7))
        with pytest.raises(IdxTruncatedError):
            parse_idx_labels(_labels_blob([0, 1])[:-1])
        with pytest.raises(IdxTruncatedError):
            parse_idx_images(b"\x00\x00\x08")

    def test_errors_are_distinct(self):
        kinds = {IdxMagicError, IdxTruncatedError, IdxCountMismatchError}
        assert len(kinds) == 3 and all(issubclass(k, IdxError) for k in kinds)

    def test_round_trip_bit_exact(self, tmp_path):
        ds = gen_synthetic(SyntheticSpec(samples_per_class=20))
        write_idx(ds, tmp_path / "i", tmp_path / "l")
        back = load_idx(tmp_path / "i", tmp_path / "l", ds.num_classes)
        assert back.images.tobytes() == ds.images.tobytes()
        np.testing.assert_array_equal(back.labels, ds.labels)

    def test_default_file_sizes(self):
        ds = gen_synthetic(SyntheticSpec())
        assert len(idx_images_bytes(ds.images, 16, 16)) == 16 + 2000 * 256
        assert len(idx_labels_bytes(ds.labels)) == 8 + 2000

    def test_unlabeled_cannot_be_written(self):
        with pytest.raises(ValueError):
            idx_labels_bytes(np.array([0, UNLABELED]))


class TestSynthetic:
    def test_zero_noise_classes_identical(self):
        ds = gen_synthetic(SyntheticSpec(noise=0.0, samples_per_class=5))
        for c in range(4):
            imgs = ds.images[ds.labels == c]
            assert np.all(imgs == imgs[0])

    def test_same_seed_same_data(self):
        a, b = gen_synthetic(SyntheticSpec(seed=3)), gen_synthetic(SyntheticSpec(seed=3))
        assert a.images.tobytes() == b.images.tobytes()
        assert gen_synthetic(SyntheticSpec(seed=4)).images.tobytes() != a.images.tobytes()

    def test_nearest_prototype_oracle_is_perfect(self):
        ds = gen_synthetic(SyntheticSpec())
        protos = np.stack([prototype(c, 16).ravel() for c in range(4)])
        nearest = np.argmin(((ds.images[:, None, :] - protos[None]) ** 2).sum(-1), axis=1)
        assert np.mean(nearest == ds.labels) == 1.0

    def test_pixels_quantised_and_in_range(self):
        ds = gen_synthetic(SyntheticSpec(noise=0.5))
        assert ds.images.min() >= 0 and ds.images.max() <= 1
        np.testing.assert_array_equal(np.rint(ds.images * 255) / 255, ds.images)

    def test_prototypes_distinct(self):
        assert len(PROTOTYPES) >= 10
        flat = [prototype(c, 16).tobytes() for c in range(len(PROTOTYPES))]
        assert len(set(flat)) == len(flat)

    @pytest.mark.parametrize("kw", [{"side": 3}, {"noise": 0.6}, {"num_classes": 0}, {"num_classes": 99}])
    def test_invalid_specs(self, kw):
        with pytest.raises(ValueError):
            SyntheticSpec(**kw)


class TestDataset:
    def test_pixel_range_enforced(self):
        with pytest.raises(ValueError):
            Dataset(np.full((1, 4), 1.5), np.zeros(1), 1, 2, 2)

    def test_label_range_enforced(self):
        with pytest.raises(ValueError):
            Dataset(np.zeros((1, 4)), np.array([2]), 2, 2, 2)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            Dataset(np.zeros((0, 4)), np.zeros(0), 2, 2, 2)


class TestSemiSupervised:
    def test_all_samples_keeps_labels(self):
        ds = gen_synthetic(SyntheticSpec(samples_per_class=10))
        np.testing.assert_array_equal(split_semi_supervised(ds, 10, 0).labels, ds.labels)

    def test_one_per_class(self):
        ds = gen_synthetic(SyntheticSpec(samples_per_class=10))
        out = split_semi_supervised(ds, 1, 0)
        assert out.labeled_mask.sum() == 4
        assert sorted(out.labels[out.labeled_mask]) == [0, 1, 2, 3]

    def test_seeded_and_order_preserving(self):
        ds = gen_synthetic(SyntheticSpec(samples_per_class=30))
        a, b = split_semi_supervised(ds, 5, 7), split_semi_supervised(ds, 5, 7)
        np.testing.assert_array_equal(a.labels, b.labels)
        assert a.images.tobytes() == ds.images.tobytes()
        kept = a.labeled_mask
        np.testing.assert_array_equal(a.labels[kept], ds.labels[kept])

    def test_insufficient_counts(self):
        ds = gen_synthetic(SyntheticSpec(samples_per_class=3))
        with pytest.raises(ValueError):
            split_semi_supervised(ds, 4, 0)
