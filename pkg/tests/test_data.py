import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dsem_lab.data import (
    CLASSES,
    PALETTE,
    SOURCE,
    TARGET,
    DatasetError,
    Sample,
    ShiftSpec,
    UnlabeledImage,
    few_shot_subset,
    gen_domain_pair,
    load_dataset,
    read_image,
    render_sample,
    save_dataset,
    shape_mask,
    strip_annotations,
    write_pgm,
    write_ppm,
)
from dsem_lab.detector import Box, iou


def _pixel_count_fill(cls, side_px):
    # independent oracle: count pixel centres inside the analytic shape in a
    # box anchored at the origin, using plain Python loops
    inside = 0
    for i in range(side_px):
        for j in range(side_px):
            x, y = (j + 0.5) / side_px, (i + 0.5) / side_px
            if CLASSES[cls] == "circle":
                inside += (x - 0.5) ** 2 + (y - 0.5) ** 2 <= 0.25
            elif CLASSES[cls] == "square":
                inside += 1
            else:
                inside += abs(x - 0.5) <= 0.5 * y
    return inside / side_px**2


class TestGeneration:
    def test_deterministic(self):
        a = gen_domain_pair(5, 5, ShiftSpec.preset("default"), seed=3)
        b = gen_domain_pair(5, 5, ShiftSpec.preset("default"), seed=3)
        for x, y in zip(a[0] + a[1], b[0] + b[1]):
            assert x.image.tobytes() == y.image.tobytes()
            assert x.boxes == y.boxes and x.labels == y.labels

    def test_seed_changes_output(self):
        a = gen_domain_pair(3, 0, ShiftSpec(), seed=0)[0]
        b = gen_domain_pair(3, 0, ShiftSpec(), seed=1)[0]
        assert any(x.image.tobytes() != y.image.tobytes() for x, y in zip(a, b))

    def test_domains_and_ids(self):
        src, tgt = gen_domain_pair(4, 3, ShiftSpec.preset("default"), seed=0)
        assert [s.domain for s in src] == [SOURCE] * 4 and [s.domain for s in tgt] == [TARGET] * 3
        assert len({s.image_id for s in src + tgt}) == 7

    def test_sample_independent_of_set_size(self):
        small = gen_domain_pair(2, 0, ShiftSpec(), seed=5)[0]
        large = gen_domain_pair(6, 0, ShiftSpec(), seed=5)[0]
        assert small[1].image.tobytes() == large[1].image.tobytes()

    def test_null_shift_same_process(self):
        # with nothing switched on, a target sample is rendered exactly like a source sample would be
        s = render_sample(0, "train", SOURCE, 0, ShiftSpec())
        t = render_sample(0, "train", TARGET, 0, ShiftSpec())
        assert s.image.min() >= 0 and t.image.min() >= 0
        src, tgt = gen_domain_pair(60, 60, ShiftSpec(), seed=2)
        ms, mt = np.mean([x.image.mean() for x in src]), np.mean([x.image.mean() for x in tgt])
        assert abs(ms - mt) < 0.02

    def test_palette_swap_is_channel_permutation(self):
        # every object pixel of a swapped target image carries a rotated class colour
        src_palette = {tuple(int(v) for v in np.round(c * 255)) for c in PALETTE}
        rotated = {(g, b, r) for r, g, b in src_palette}
        for i in range(5):
            t = render_sample(0, "train", TARGET, i, ShiftSpec(palette_swap=True)).image
            fg = np.any(np.abs(t - t[:, :1, :1]) > 1e-6, axis=0)
            colours = {tuple(int(v) for v in np.round(t[:, u, v] * 255)) for u, v in zip(*np.nonzero(fg))}
            assert colours and colours <= rotated

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 10_000), st.sampled_from(["null", "default", "stripes", "dim"]))
    def test_box_invariants(self, seed, preset):
        src, tgt = gen_domain_pair(2, 2, ShiftSpec.preset(preset), seed=seed)
        for s in src + tgt:
            assert 1 <= len(s.boxes) <= 3 and len(s.boxes) == len(s.labels)
            assert s.image.shape == (3, 64, 64) and s.image.dtype == np.float32
            assert 0.0 <= s.image.min() and s.image.max() <= 1.0
            for b in s.boxes:
                w, h = b.xmax - b.xmin, b.ymax - b.ymin
                assert 0.2 - 1e-12 <= w <= 0.5 + 1e-12 and abs(w - h) < 1e-12
                assert w * h >= 0.04 - 1e-12
            for a in range(len(s.boxes)):
                for c in range(a):
                    assert iou(s.boxes[a], s.boxes[c]) <= 0.3

    @pytest.mark.parametrize("cls", range(3))
    def test_shape_filling_ratio(self, cls):
        side = 32
        box = [0.0, 0.0, side / 64, side / 64]
        m = shape_mask(cls, box, 64)
        ratio = m.sum() / side**2
        assert ratio == pytest.approx(_pixel_count_fill(cls, side), abs=0.02)
        assert ratio >= 0.45
        assert not m[:, side + 1 :].any() and not m[side + 1 :].any()

    def test_circle_near_quarter_pi(self):
        m = shape_mask(0, [0.0, 0.0, 1.0, 1.0], 64)
        assert m.mean() == pytest.approx(np.pi / 4, abs=0.01)

    def test_speckle_probe_features_differ(self):
        _, t = gen_domain_pair(0, 1, ShiftSpec.preset("default"), seed=0)
        assert t[0].image.std() > 0.05

    def test_shift_validation(self):
        with pytest.raises(ValueError):
            ShiftSpec(noise_sigma=-0.1)
        with pytest.raises(ValueError):
            ShiftSpec(brightness_shift=0.7)
        with pytest.raises(ValueError):
            ShiftSpec(background_texture="plaid")
        with pytest.raises(ValueError):
            ShiftSpec.from_dict({"palette_swap": True, "hue": 3})
        with pytest.raises(ValueError):
            ShiftSpec.preset("nope")


class TestImageIo:
    def test_ppm_roundtrip(self, tmp_path, rng):
        img = (rng.integers(0, 256, (3, 5, 7)) / 255.0).astype(np.float32)
        write_ppm(tmp_path / "a.ppm", img)
        assert read_image(tmp_path / "a.ppm").tobytes() == img.tobytes()

    def test_pgm_roundtrip(self, tmp_path, rng):
        g = rng.integers(0, 256, (4, 6)).astype(np.uint8)
        write_pgm(tmp_path / "a.pgm", g)
        out = read_image(tmp_path / "a.pgm")
        assert out.shape == (3, 4, 6)
        for c in range(3):
            np.testing.assert_array_equal(np.round(out[c] * 255).astype(np.uint8), g)

    def test_non_numeric_header(self, tmp_path):
        (tmp_path / "bad.ppm").write_bytes(b"P6\nxx 1\n255\n\x00\x00\x00")
        with pytest.raises(DatasetError, match="bad.ppm"):
            read_image(tmp_path / "bad.ppm")

    def test_header_is_binary_p6(self, tmp_path):
        write_ppm(tmp_path / "a.ppm", np.zeros((3, 2, 2), np.float32))
        assert (tmp_path / "a.ppm").read_bytes().startswith(b"P6")

    def test_garbage(self, tmp_path):
        (tmp_path / "bad.ppm").write_bytes(b"P9\n1 1\n255\n\x00")
        with pytest.raises(DatasetError, match="bad.ppm"):
            read_image(tmp_path / "bad.ppm")


class TestDatasetIo:
    def test_roundtrip_bitwise(self, tmp_path):
        src, tgt = gen_domain_pair(4, 3, ShiftSpec.preset("default"), seed=1)
        save_dataset(tmp_path / "d", src + tgt, {"seed": 1})
        back = load_dataset(tmp_path / "d")
        assert len(back) == 7
        for a, b in zip(src + tgt, back):
            assert a.image.tobytes() == b.image.tobytes()
            assert a.boxes == b.boxes and a.labels == b.labels and a.domain == b.domain
            assert a.image_id == b.image_id
        assert json.loads((tmp_path / "d" / "genspec.json").read_text()) == {"seed": 1}

    def _write(self, tmp_path, records):
        src, _ = gen_domain_pair(1, 0, ShiftSpec(), seed=0)
        save_dataset(tmp_path, src)
        (tmp_path / "manifest.json").write_text(json.dumps(records))
        return src[0]

    def test_inverted_box_names_record(self, tmp_path):
        s = self._write(tmp_path, [])
        rec = {"file": f"images/{s.image_id}.ppm", "boxes": [[0.6, 0.1, 0.4, 0.3]], "labels": [0], "domain": "source"}
        (tmp_path / "manifest.json").write_text(json.dumps([rec]))
        with pytest.raises(DatasetError, match=r"record 0.*box 0"):
            load_dataset(tmp_path)

    def test_out_of_range_box(self, tmp_path):
        s = self._write(tmp_path, [])
        rec = {"file": f"images/{s.image_id}.ppm", "boxes": [[0.1, 0.1, 1.4, 0.3]], "labels": [0], "domain": "source"}
        ok = dict(rec, boxes=[[0.1, 0.1, 0.4, 0.3]])
        (tmp_path / "manifest.json").write_text(json.dumps([ok, rec]))
        with pytest.raises(DatasetError, match="record 1"):
            load_dataset(tmp_path)

    def test_missing_image(self, tmp_path):
        self._write(tmp_path, [])
        (tmp_path / "manifest.json").write_text(json.dumps([{"file": "images/nope.ppm", "domain": "target"}]))
        with pytest.raises(DatasetError, match="nope.ppm"):
            load_dataset(tmp_path)

    def test_malformed_manifest(self, tmp_path):
        (tmp_path / "manifest.json").write_text("{not json")
        with pytest.raises(DatasetError, match="manifest"):
            load_dataset(tmp_path)

    def test_unlabeled_target_is_valid(self, tmp_path):
        s = self._write(tmp_path, [])
        (tmp_path / "manifest.json").write_text(
            json.dumps([{"file": f"images/{s.image_id}.ppm", "boxes": [], "labels": [], "domain": "target"}])
        )
        (out,) = load_dataset(tmp_path)
        assert out.domain == TARGET and out.boxes == []

    def test_bad_domain(self, tmp_path):
        s = self._write(tmp_path, [])
        (tmp_path / "manifest.json").write_text(json.dumps([{"file": f"images/{s.image_id}.ppm", "domain": "both"}]))
        with pytest.raises(DatasetError, match="record 0"):
            load_dataset(tmp_path)


def _single_class_set(per_class):
    img = np.zeros((3, 64, 64), np.float32)
    out = []
    for c in range(3):
        for i in range(per_class):
            out.append(Sample(img, [Box(0.1, 0.1, 0.4, 0.4)], [c], TARGET, f"c{c}-{i}", {"classes": [c]}))
    return out


class TestFewShot:
    def test_full_set(self):
        data = _single_class_set(4)
        assert few_shot_subset(data, 4, seed=0) == data

    def test_disjoint_counting(self):
        data = _single_class_set(6)
        sub = few_shot_subset(data, 3, seed=0)
        assert len(sub) == 9
        assert sorted(s.labels[0] for s in sub) == [0, 0, 0, 1, 1, 1, 2, 2, 2]

    def test_multi_class_images_bounded(self):
        _, tgt = gen_domain_pair(0, 100, ShiftSpec.preset("default"), seed=0)
        sub = few_shot_subset(tgt, 3, seed=4)
        assert len(sub) <= 9
        for c in range(3):
            assert sum(c in s.meta["classes"] for s in sub) >= 3

    def test_deterministic(self):
        _, tgt = gen_domain_pair(0, 60, ShiftSpec(), seed=0)
        ids = [s.image_id for s in few_shot_subset(tgt, 2, seed=9)]
        assert ids == [s.image_id for s in few_shot_subset(tgt, 2, seed=9)]

    def test_too_few(self):
        with pytest.raises(ValueError, match="class"):
            few_shot_subset(_single_class_set(2), 3, seed=0)

    def test_per_class_positive(self):
        with pytest.raises(ValueError):
            few_shot_subset(_single_class_set(2), 0, seed=0)


def test_stripped_targets_have_no_annotation_fields():
    _, tgt = gen_domain_pair(0, 3, ShiftSpec.preset("default"), seed=0)
    for u in strip_annotations(tgt):
        assert isinstance(u, UnlabeledImage)
        assert not hasattr(u, "boxes") and not hasattr(u, "labels") and not hasattr(u, "meta")
