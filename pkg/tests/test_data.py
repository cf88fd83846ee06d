import gzip
import struct

import numpy as np
import pytest

from tvt.data import (
    GLYPHS,
    DataError,
    DomainStyle,
    LabeledImageSet,
    SynthConfig,
    load_idx,
    load_idx_images,
    paired_batches,
    render,
    synth_domain_pair,
    write_idx,
)

TINY = SynthConfig(image_size=16, train_per_domain=41, test_per_domain=10, seed=3)


class TestSynthetic:
    def test_deterministic(self):
        a, b = synth_domain_pair(TINY), synth_domain_pair(TINY)
        for k in a:
            assert a[k].images.tobytes() == b[k].images.tobytes()
            assert np.array_equal(a[k].labels, b[k].labels)

    def test_seed_changes_corpus(self):
        a = synth_domain_pair(TINY)["source_train"]
        b = synth_domain_pair(SynthConfig(image_size=16, train_per_domain=41, test_per_domain=10, seed=4))["source_train"]
        assert a.images.tobytes() != b.images.tobytes()

    def test_splits_and_shapes(self):
        d = synth_domain_pair(TINY)
        assert set(d) == {"source_train", "source_test", "target_train", "target_test"}
        assert d["source_train"].images.shape == (41, 16, 16, 1)
        assert d["target_test"].images.shape == (10, 16, 16, 1)
        assert d["target_train"].domain == "target" and d["source_test"].split == "test"

    def test_class_balance(self):
        for ds in synth_domain_pair(TINY).values():
            counts = np.bincount(ds.labels, minlength=TINY.classes)
            assert counts.max() - counts.min() <= 1

    def test_pixels_are_8bit_levels(self):
        x = synth_domain_pair(TINY)["target_train"].images
        assert x.min() >= 0 and x.max() <= 1
        np.testing.assert_array_equal(np.round(x * 255) / 255, x)

    def test_geometry_independent_of_style(self):
        # noise-free, untextured styles: foreground pixels sit exactly at offset + contrast
        a = DomainStyle("flat", 0.0, 0.0, 0.0, 1.0)
        b = DomainStyle("flat", 0.0, 0.0, 0.2, 0.6)
        for kind in GLYPHS:
            ia = render(kind, a, 16, np.random.default_rng(0))
            ib = render(kind, b, 16, np.random.default_rng(0))
            np.testing.assert_array_equal(ia == 1.0, ib == np.round(0.8 * 255) / 255)

    def test_glyphs_distinct(self):
        style = DomainStyle("flat", 0.0, 0.0, 0.0, 1.0)
        masks = {k: render(k, style, 32, np.random.default_rng(1)) for k in GLYPHS}
        assert len({m.tobytes() for m in masks.values()}) == len(GLYPHS)

    def test_null_shift(self):
        # identical styles: domains differ only by sampling
        cfg = SynthConfig(image_size=16, train_per_domain=400, test_per_domain=1, target=DomainStyle())
        d = synth_domain_pair(cfg)
        s, t = d["source_train"].images, d["target_train"].images
        assert abs(s.mean() - t.mean()) < 0.01
        assert abs(s.std() - t.std()) < 0.01

    def test_default_shift_visible(self):
        d = synth_domain_pair(SynthConfig(image_size=16, train_per_domain=200, test_per_domain=1))
        assert d["source_train"].images.std(axis=(1, 2, 3)).mean() != pytest.approx(
            d["target_train"].images.std(axis=(1, 2, 3)).mean(), abs=1e-3
        )

    @pytest.mark.parametrize("kw", [dict(classes=len(GLYPHS) + 1), dict(classes=0), dict(image_size=4)])
    def test_invalid_config(self, kw):
        with pytest.raises(DataError):
            SynthConfig(**kw)

    def test_unknown_background(self):
        with pytest.raises(DataError):
            DomainStyle(background="plaid")


def _write_raw(path, magic, dims, payload):
    path.write_bytes(struct.pack(f">i{len(dims)}i", magic, *dims) + payload)


class TestIDX:
    def test_round_trip(self, tmp_path):
        ds = synth_domain_pair(TINY)["source_test"]
        write_idx(ds, tmp_path / "x.idx", tmp_path / "y.idx")
        back = load_idx(tmp_path / "x.idx", tmp_path / "y.idx")
        np.testing.assert_array_equal(back.images, ds.images)
        np.testing.assert_array_equal(back.labels, ds.labels)

    def test_gzip(self, tmp_path):
        ds = synth_domain_pair(TINY)["source_test"]
        write_idx(ds, tmp_path / "x.idx.gz", tmp_path / "y.idx.gz")
        with gzip.open(tmp_path / "x.idx.gz") as f:
            assert struct.unpack(">i", f.read(4))[0] == 2051
        np.testing.assert_array_equal(load_idx(tmp_path / "x.idx.gz", tmp_path / "y.idx.gz").images, ds.images)

    def test_header_is_big_endian(self, tmp_path):
        ds = LabeledImageSet(np.zeros((2, 3, 3)), [1, 2])
        write_idx(ds, tmp_path / "x", tmp_path / "y")
        assert (tmp_path / "x").read_bytes()[:16] == bytes.fromhex("00000803" "00000002" "00000003" "00000003")
        assert (tmp_path / "y").read_bytes() == bytes.fromhex("00000801" "00000002" "0102")

    def test_pixel_scaling(self, tmp_path):
        _write_raw(tmp_path / "x", 2051, (1, 1, 2), bytes([0, 255]))
        np.testing.assert_array_equal(load_idx_images(tmp_path / "x")[0, 0, :, 0], [0.0, 1.0])

    def test_bad_magic(self, tmp_path):
        _write_raw(tmp_path / "x", 2049, (1, 1, 1), b"\x00")
        with pytest.raises(DataError, match="magic"):
            load_idx_images(tmp_path / "x")

    def test_truncated_payload(self, tmp_path):
        _write_raw(tmp_path / "x", 2051, (2, 2, 2), b"\x00" * 7)
        with pytest.raises(DataError, match="expected 8"):
            load_idx_images(tmp_path / "x")

    def test_truncated_header(self, tmp_path):
        (tmp_path / "x").write_bytes(b"\x00\x00\x08")
        with pytest.raises(DataError):
            load_idx_images(tmp_path / "x")

    def test_count_mismatch(self, tmp_path):
        _write_raw(tmp_path / "x", 2051, (2, 1, 1), b"\x00\x01")
        _write_raw(tmp_path / "y", 2049, (3,), b"\x00\x01\x02")
        with pytest.raises(DataError, match="2 items"):
            load_idx(tmp_path / "x", tmp_path / "y")


class TestPairedBatches:
    def _sets(self):
        src = LabeledImageSet(np.arange(5, dtype=float).reshape(5, 1, 1, 1), [0, 1, 2, 0, 1])
        tgt = LabeledImageSet(100 + np.arange(3, dtype=float).reshape(3, 1, 1, 1), [9, 9, 9])
        return src, tgt

    def test_layout(self):
        src, tgt = self._sets()
        b = next(paired_batches(src, tgt, 2, 2, seed=0))
        assert b.n == 4 and b.images.shape == (4, 1, 1, 1)
        np.testing.assert_array_equal(b.domain_labels, [1, 1, 0, 0])
        assert np.all(b.images[2:] >= 100) and np.all(b.images[:2] < 100)

    def test_target_labels_not_exposed(self):
        src, tgt = self._sets()
        b = next(paired_batches(src, tgt, 2, 2, seed=0))
        assert not hasattr(b, "target_labels")
        np.testing.assert_array_equal(b.source_labels, src.labels[b.source_images[:, 0, 0, 0].astype(int)])

    def test_epoch_covers_every_example(self):
        src, tgt = self._sets()
        it = paired_batches(src, tgt, 5, 3, seed=1)
        for _ in range(3):
            b = next(it)
            assert sorted(b.source_images.ravel()) == list(range(5))
            assert sorted(b.target_images.ravel()) == [100, 101, 102]

    def test_deterministic(self):
        src, tgt = self._sets()
        a = [next(it) for it in [paired_batches(src, tgt, 2, 2, 7)] for _ in range(6)]
        b = [next(it) for it in [paired_batches(src, tgt, 2, 2, 7)] for _ in range(6)]
        assert all(np.array_equal(x.images, y.images) for x, y in zip(a, b))

    def test_empty(self):
        src, _ = self._sets()
        with pytest.raises(DataError):
            next(paired_batches(src, LabeledImageSet(np.zeros((0, 1, 1, 1)), []), 1, 1, 0))


class TestLabeledImageSet:
    def test_adds_channel_axis(self):
        assert LabeledImageSet(np.zeros((2, 4, 4)), [0, 1]).images.shape == (2, 4, 4, 1)

    def test_count_mismatch(self):
        with pytest.raises(DataError):
            LabeledImageSet(np.zeros((2, 4, 4, 1)), [0])
