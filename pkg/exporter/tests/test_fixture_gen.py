import json

import numpy as np
import pytest
from PIL import Image

from clrp_exporter.fixture import FixtureSpec, build_composites, single_object_batch
from clrp_exporter.glyphs import CLASS_NAMES, NUM_CLASSES, glyph_mask

SMALL = FixtureSpec(seed=3, test_composites=12)


class TestGlyphs:
    def test_every_class_draws_nonempty_mask(self):
        for cid in range(NUM_CLASSES):
            mask = glyph_mask(cid, 16)
            assert mask.any(), CLASS_NAMES[cid]

    def test_masks_are_deterministic(self):
        for cid in range(NUM_CLASSES):
            np.testing.assert_array_equal(glyph_mask(cid, 20), glyph_mask(cid, 20))

    def test_classes_are_pairwise_distinct(self):
        masks = [glyph_mask(cid, 24) for cid in range(NUM_CLASSES)]
        for i in range(NUM_CLASSES):
            for j in range(i + 1, NUM_CLASSES):
                assert not np.array_equal(masks[i], masks[j])

    def test_too_small_size_rejected(self):
        with pytest.raises(ValueError):
            glyph_mask(0, 4)


class TestComposites:
    def test_same_seed_gives_identical_annotation_bytes(self, tmp_path):
        build_composites(SMALL, tmp_path / "a")
        build_composites(SMALL, tmp_path / "b")
        assert ((tmp_path / "a" / "annotations.jsonl").read_bytes()
                == (tmp_path / "b" / "annotations.jsonl").read_bytes())

    def test_same_seed_gives_identical_image_bytes(self, tmp_path):
        build_composites(SMALL, tmp_path / "a")
        build_composites(SMALL, tmp_path / "b")
        for img in sorted((tmp_path / "a" / "images").iterdir()):
            twin = tmp_path / "b" / "images" / img.name
            assert img.read_bytes() == twin.read_bytes()

    def test_two_distinct_classes_with_disjoint_boxes(self, tmp_path):
        records = build_composites(SMALL, tmp_path)
        by_image: dict[str, list[dict]] = {}
        for r in records:
            by_image.setdefault(r["image"], []).append(r)
        assert len(by_image) == SMALL.test_composites
        for entries in by_image.values():
            assert len(entries) == 2
            a, b = entries
            assert a["label"] != b["label"]
            (ax0, _, ax1, _), (bx0, _, bx1, _) = a["boxes"][0], b["boxes"][0]
            assert ax1 < bx0 or bx1 < ax0  # separated horizontally

    def test_boxes_within_image_bounds(self, tmp_path):
        records = build_composites(SMALL, tmp_path)
        s = SMALL.image_size
        for r in records:
            x0, y0, x1, y1 = r["boxes"][0]
            assert 0 <= x0 <= x1 < s
            assert 0 <= y0 <= y1 < s

    def test_images_are_rgb_with_replicated_channels(self, tmp_path):
        records = build_composites(SMALL, tmp_path)
        arr = np.asarray(Image.open(tmp_path / records[0]["image"]))
        assert arr.shape == (SMALL.image_size, SMALL.image_size, 3)
        np.testing.assert_array_equal(arr[:, :, 0], arr[:, :, 1])
        np.testing.assert_array_equal(arr[:, :, 0], arr[:, :, 2])

    def test_annotations_load_as_jsonl(self, tmp_path):
        build_composites(SMALL, tmp_path)
        lines = (tmp_path / "annotations.jsonl").read_text().splitlines()
        assert len(lines) == 2 * SMALL.test_composites
        for line in lines:
            obj = json.loads(line)
            assert set(obj) == {"image", "label", "boxes"}


class TestSingleObjects:
    def test_labels_cover_all_classes(self):
        rng = np.random.default_rng(4)
        _, labels = single_object_batch(SMALL, rng, 200)
        assert set(labels.tolist()) == set(range(SMALL.num_classes))

    def test_reproducible_from_generator_state(self):
        a = single_object_batch(SMALL, np.random.default_rng(5), 20)
        b = single_object_batch(SMALL, np.random.default_rng(5), 20)
        np.testing.assert_array_equal(a[0], b[0])
        np.testing.assert_array_equal(a[1], b[1])
