import os

import numpy as np
import pytest

from dmoe_seg import data as D
from dmoe_seg.data import AttrProfile, DatasetSpec, SpecError
from dmoe_seg.metrics import FormatError


def dir_bytes(root):
    blobs = {}
    for base, _, files in os.walk(root):
        for f in files:
            p = os.path.join(base, f)
            blobs[os.path.relpath(p, root)] = open(p, "rb").read()
    return blobs


class TestSpec:
    def test_proportions_must_sum_to_one(self):
        with pytest.raises(SpecError):
            DatasetSpec(attrs={"a": AttrProfile(0.5), "b": AttrProfile(0.4)})

    def test_default_proportions(self):
        spec = DatasetSpec()
        props = [p.proportion for p in spec.attrs.values()]
        assert props == [0.09, 0.15, 0.76]

    def test_negative_radius_rejected(self):
        with pytest.raises(SpecError):
            DatasetSpec(attrs={"a": AttrProfile(1.0, radius_mean=-1)})


class TestGenerate:
    def test_largest_remainder_default_counts(self):
        counts = D.generate(DatasetSpec(n_samples=100)).counts()
        assert counts == {"grp_a": 9, "grp_b": 15, "grp_c": 76}

    def test_largest_remainder_oracle(self):
        # brute-force check against the definition
        props = [0.09, 0.15, 0.76]
        counts = D.largest_remainder_counts(props, 37)
        assert counts.sum() == 37
        floor = np.floor(np.array(props) * 37)
        assert np.all(counts >= floor)
        assert np.all(counts <= floor + 1)

    def test_deterministic_per_seed(self, tmp_path):
        d1 = D.generate(DatasetSpec(n_samples=40, seed=5))
        d2 = D.generate(DatasetSpec(n_samples=40, seed=5))
        D.save(d1, tmp_path / "a")
        D.save(d2, tmp_path / "b")
        assert dir_bytes(tmp_path / "a") == dir_bytes(tmp_path / "b")

    def test_seed_changes_content(self):
        d1 = D.generate(DatasetSpec(n_samples=10, seed=1))
        d2 = D.generate(DatasetSpec(n_samples=10, seed=2))
        assert not np.array_equal(d1[0].image, d2[0].image)

    def test_masks_nonempty(self):
        for s in D.generate(DatasetSpec(n_samples=60, seed=3)):
            assert s.mask.sum() > 0

    def test_image_range_and_shapes(self):
        ds = D.generate(DatasetSpec(n_samples=12, seed=0))
        for s in ds:
            assert s.image.shape == (32, 32, 1)
            assert s.mask.shape == (32, 32)
            assert s.image.min() >= 0.0 and s.image.max() <= 1.0
            assert set(np.unique(s.mask)) <= {0, 1}

    def test_too_small_for_all_groups(self):
        with pytest.raises(SpecError):
            D.generate(DatasetSpec(n_samples=2))


class TestFormat:
    def test_save_load_save_idempotent(self, tmp_path):
        ds = D.generate(DatasetSpec(n_samples=15, seed=7))
        D.save(ds, tmp_path / "one")
        loaded = D.load(tmp_path / "one")
        D.save(loaded, tmp_path / "two")
        assert dir_bytes(tmp_path / "one") == dir_bytes(tmp_path / "two")

    def test_load_roundtrip_values(self, tmp_path):
        ds = D.generate(DatasetSpec(n_samples=8, seed=9))
        D.save(ds, tmp_path / "d")
        loaded = D.load(tmp_path / "d")
        assert loaded.attrs == ds.attrs
        for a, b in zip(ds, loaded):
            assert a.id == b.id and a.attr == b.attr
            assert np.array_equal(a.image, b.image)
            assert np.array_equal(a.mask, b.mask)

    def test_corrupt_magic(self, tmp_path):
        ds = D.generate(DatasetSpec(n_samples=12, seed=0))
        D.save(ds, tmp_path / "d")
        img = tmp_path / "d" / "images" / "s00000.img"
        blob = bytearray(img.read_bytes())
        blob[0] = ord("X")
        img.write_bytes(bytes(blob))
        with pytest.raises(FormatError, match="s00000"):
            D.load(tmp_path / "d")

    def test_truncated_payload(self, tmp_path):
        ds = D.generate(DatasetSpec(n_samples=12, seed=0))
        D.save(ds, tmp_path / "d")
        msk = tmp_path / "d" / "masks" / "s00001.msk"
        msk.write_bytes(msk.read_bytes()[:-10])
        with pytest.raises(FormatError, match="truncated"):
            D.load(tmp_path / "d")

    def test_manifest_row_count(self, tmp_path):
        ds = D.generate(DatasetSpec(n_samples=11, seed=0))
        D.save(ds, tmp_path / "d")
        rows = (tmp_path / "d" / "manifest.csv").read_text().strip().split("\n")
        assert len(rows) - 1 == len(ds)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(FormatError):
            D.load(tmp_path)


class TestSplit:
    def test_stratified_counts(self):
        ds = D.generate(DatasetSpec(n_samples=100, seed=1))
        train, test = D.split(ds, 0.8, seed=0)
        assert train.counts() == {"grp_a": 7, "grp_b": 12, "grp_c": 61}
        assert test.counts() == {"grp_a": 2, "grp_b": 3, "grp_c": 15}

    def test_disjoint_and_exhaustive(self):
        ds = D.generate(DatasetSpec(n_samples=50, seed=2))
        train, test = D.split(ds, 0.7, seed=1)
        train_ids = {s.id for s in train}
        test_ids = {s.id for s in test}
        assert not train_ids & test_ids
        assert train_ids | test_ids == {s.id for s in ds}

    def test_same_seed_same_split(self):
        ds = D.generate(DatasetSpec(n_samples=50, seed=2))
        a = [s.id for s in D.split(ds, 0.7, seed=3)[0]]
        b = [s.id for s in D.split(ds, 0.7, seed=3)[0]]
        assert a == b

    def test_bad_fraction(self):
        ds = D.generate(DatasetSpec(n_samples=50, seed=2))
        with pytest.raises(SpecError):
            D.split(ds, 1.5, seed=0)

    def test_tiny_group_rejected(self):
        ds = D.generate(DatasetSpec(
            n_samples=5, seed=0,
            attrs={"a": AttrProfile(0.2), "b": AttrProfile(0.8)}))
        with pytest.raises(SpecError):
            D.split(ds, 0.5, seed=0)


class TestBatches:
    def test_coverage(self):
        ds = D.generate(DatasetSpec(n_samples=23, seed=4))
        seen = [s.id for batch in D.batches(ds, 5, seed=0, epoch=0) for s in batch]
        assert sorted(seen) == sorted(s.id for s in ds)

    def test_batch_count(self):
        ds = D.generate(DatasetSpec(n_samples=23, seed=4))
        assert len(list(D.batches(ds, 5, seed=0, epoch=0))) == 5

    def test_same_seed_epoch_same_order(self):
        ds = D.generate(DatasetSpec(n_samples=23, seed=4))
        a = [s.id for b in D.batches(ds, 5, seed=1, epoch=2) for s in b]
        b = [s.id for b in D.batches(ds, 5, seed=1, epoch=2) for s in b]
        assert a == b

    def test_epoch_changes_order(self):
        ds = D.generate(DatasetSpec(n_samples=23, seed=4))
        a = [s.id for b in D.batches(ds, 5, seed=1, epoch=0) for s in b]
        b = [s.id for b in D.batches(ds, 5, seed=1, epoch=1) for s in b]
        assert a != b

    def test_bad_batch_size(self):
        ds = D.generate(DatasetSpec(n_samples=23, seed=4))
        with pytest.raises(SpecError):
            list(D.batches(ds, 0, seed=0, epoch=0))
