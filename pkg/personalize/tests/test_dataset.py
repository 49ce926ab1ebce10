"""Unit tests for the dataset layer: manifest I/O, validation, captions, masks and the toy generator."""
import json

import numpy as np
import pytest
from PIL import Image

from app.core.errors import MissingFileError, ParseError, PlaceholderError, ShapeError, SpecError
from app.schemas.dataset import DatasetManifest, ImageRecord, SubjectRecord, ToyDatasetSpec
from app.services.manifest import caption_leaks, dump_manifest, fill_caption, load_manifest, validate_manifest
from app.services.masks import downsample_mask, ingest_mask, load_mask_file, mask_bbox
from app.services.toy_data import render_subject_shape, synth_toy_dataset

# ─── Helpers ──────────────────────────────────────────────────────────────────

def _full_subject(index: int, captions_per_image: int = 10) -> SubjectRecord:
    sid = f"s{index:02d}"
    return SubjectRecord(
        id=sid,
        supercategory="dog",
        train=[ImageRecord(image=f"{sid}/train/{k}.png", mask=f"{sid}/train/{k}_mask.png") for k in range(5)],
        test=[
            ImageRecord(image=f"{sid}/test/{k}.png",
                        captions=[f"a photo of {{}} in scene {c}" for c in range(captions_per_image)])
            for k in range(10)
        ],
    )


def _write_png(path, arr: np.ndarray) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr).save(path)


# ─── fill_caption ─────────────────────────────────────────────────────────────

def test_fill_caption_substitutes_token():
    assert fill_caption("a photo of {} on a beach", "<v*>") == "a photo of <v*> on a beach"


def test_fill_caption_empty_replacement_collapses_whitespace():
    assert fill_caption("a {} here", "") == "a here"


def test_fill_caption_without_placeholder_raises():
    with pytest.raises(PlaceholderError, match="exactly one"):
        fill_caption("no placeholder", "x")


def test_caption_leaks_whole_words_only():
    subject = SubjectRecord(id="s00", supercategory="dog", train=[], test=[])
    assert caption_leaks("a dog sitting on grass", subject) == ["dog"]
    assert caption_leaks("a hotdog stand next to {}", subject) == []


# ─── validate_manifest ────────────────────────────────────────────────────────

class TestValidateManifest:
    def test_full_profile_counts_pass(self):
        manifest = DatasetManifest(subjects=[_full_subject(i) for i in range(20)])
        report = validate_manifest(manifest, "full")
        assert report.violations == []
        assert report.subjects == 20
        assert report.train_images + report.test_images == 20 * 15
        assert report.captions == 20 * 10 * 10

    def test_full_profile_wrong_subject_count(self):
        manifest = DatasetManifest(subjects=[_full_subject(i) for i in range(3)])
        report = validate_manifest(manifest, "full")
        assert any(v.code == "counts" and "20 subjects" in v.message for v in report.violations)

    def test_full_profile_wrong_caption_count(self):
        manifest = DatasetManifest(subjects=[_full_subject(0, captions_per_image=9)])
        report = validate_manifest(manifest, "full")
        assert any(v.code == "counts" and "exactly 10" in v.message for v in report.violations)

    def test_duplicate_captions_flagged(self):
        subject = _full_subject(0)
        subject.test[3].captions[9] = subject.test[3].captions[0]
        report = validate_manifest(DatasetManifest(subjects=[subject]), "full")
        dupes = [v for v in report.violations if v.code == "caption_duplicate"]
        assert len(dupes) == 1
        assert dupes[0].image == subject.test[3].image

    def test_leak_violation_cites_caption(self):
        subject = SubjectRecord(id="s00", supercategory="dog", train=[],
                                test=[ImageRecord(image="t.png", captions=["a dog sitting on grass {}"])])
        report = validate_manifest(DatasetManifest(subjects=[subject]))
        leaks = [v for v in report.violations if v.code == "leak"]
        assert leaks and "a dog sitting on grass" in leaks[0].message

    def test_placeholder_violation(self):
        subject = SubjectRecord(id="s00", supercategory="dog", train=[],
                                test=[ImageRecord(image="t.png", captions=["no slot at all"])])
        report = validate_manifest(DatasetManifest(subjects=[subject]))
        assert any(v.code == "placeholder" for v in report.violations)

    def test_split_overlap(self):
        subject = SubjectRecord(id="s00", supercategory="dog", train=[ImageRecord(image="a.png")],
                                test=[ImageRecord(image="a.png", captions=["{} here"])])
        report = validate_manifest(DatasetManifest(subjects=[subject]))
        assert any(v.code == "split_overlap" for v in report.violations)

    def test_multi_word_supercategory(self):
        subject = SubjectRecord(id="s00", supercategory="teddy bear", train=[], test=[])
        report = validate_manifest(DatasetManifest(subjects=[subject]))
        assert any(v.code == "supercategory" for v in report.violations)

    def test_toy_dataset_is_valid(self, toy_manifest):
        report = validate_manifest(toy_manifest, "toy")
        assert report.is_valid, report.violations
        assert report.subjects == 2


# ─── load_manifest / dump_manifest ────────────────────────────────────────────

class TestManifestIO:
    def test_load_resolves_paths(self, toy_manifest):
        assert len(toy_manifest.subjects) == 2
        record = toy_manifest.subjects[0].train[0]
        assert record.image_path is not None and record.image_path.exists()
        assert record.mask_path is not None and record.mask_path.exists()

    def test_missing_mask_names_path(self, tmp_path):
        _write_png(tmp_path / "img.png", np.zeros((8, 8, 3), dtype=np.uint8))
        manifest = DatasetManifest(subjects=[SubjectRecord(
            id="s00", supercategory="dog", train=[ImageRecord(image="img.png", mask="missing_mask.png")], test=[],
        )])
        path = dump_manifest(manifest, tmp_path / "manifest.json")
        with pytest.raises(MissingFileError, match="missing_mask.png"):
            load_manifest(path)

    def test_malformed_manifest(self, tmp_path):
        path = tmp_path / "manifest.json"
        path.write_text(json.dumps({"subjects": [{"id": "s"}]}), encoding="utf-8")
        with pytest.raises(ParseError):
            load_manifest(path)

    def test_non_utf8_manifest_is_parse_error(self, tmp_path):
        path = tmp_path / "manifest.json"
        path.write_bytes(b'{"subjects": ["\xff\xfe\x80"]}')
        with pytest.raises(ParseError, match="Malformed"):
            load_manifest(path)

    def test_directory_manifest_is_parse_error(self, tmp_path):
        with pytest.raises(ParseError):
            load_manifest(tmp_path)

    def test_dump_is_sorted_and_stable(self, toy_manifest, tmp_path):
        a = dump_manifest(toy_manifest, tmp_path / "a.json").read_bytes()
        b = dump_manifest(toy_manifest, tmp_path / "b.json").read_bytes()
        assert a == b
        assert a.endswith(b"\n")
        payload = json.loads(a)
        assert list(payload) == sorted(payload)


# ─── Masks ────────────────────────────────────────────────────────────────────

class TestMasks:
    def test_saturated_mask(self):
        pair = ingest_mask(np.ones((4, 4)), threshold=0.5)
        assert pair.subject.all() and not pair.background.any()

    def test_threshold_tie_goes_to_subject(self):
        pair = ingest_mask(np.full((2, 2), 0.5), threshold=0.5)
        assert pair.subject.all()

    def test_checkerboard_complement(self):
        board = (np.indices((6, 6)).sum(axis=0) % 2).astype(np.float64)
        pair = ingest_mask(board)
        np.testing.assert_array_equal(pair.subject, board.astype(np.uint8))
        np.testing.assert_array_equal(pair.subject + pair.background, np.ones((6, 6), dtype=np.uint8))
        assert not (pair.subject * pair.background).any()

    def test_uint8_masks_are_scaled(self):
        pair = ingest_mask(np.array([[0, 255], [127, 128]], dtype=np.uint8))
        np.testing.assert_array_equal(pair.subject, [[0, 1], [0, 1]])

    def test_rejects_3d_and_bad_threshold(self):
        with pytest.raises(ShapeError):
            ingest_mask(np.zeros((2, 2, 3)))
        with pytest.raises(SpecError):
            ingest_mask(np.zeros((2, 2)), threshold=1.0)

    def test_load_mask_file_missing(self, tmp_path):
        with pytest.raises(MissingFileError):
            load_mask_file(tmp_path / "nope.png")

    def test_downsample_majority_and_complement(self):
        subject = np.zeros((4, 4), dtype=np.uint8)
        subject[:2, :2] = 1          # full cell
        subject[2, 2:] = 1           # half cell -> subject (>= 0.5)
        subject[0, 2] = 1            # quarter cell -> background
        pair = downsample_mask(ingest_mask(subject.astype(np.float64)), 2)
        np.testing.assert_array_equal(pair.subject, [[1, 0], [0, 1]])
        np.testing.assert_array_equal(pair.subject + pair.background, np.ones((2, 2)))

    def test_downsample_indivisible(self):
        with pytest.raises(ShapeError):
            downsample_mask(ingest_mask(np.zeros((5, 5))), 2)

    def test_mask_bbox(self):
        mask = np.zeros((6, 6), dtype=np.uint8)
        mask[1:3, 2:5] = 1
        assert mask_bbox(mask) == (1, 2, 3, 5)
        assert mask_bbox(np.zeros((3, 3))) is None


# ─── Toy dataset generator ────────────────────────────────────────────────────

class TestToyDataset:
    def test_same_spec_gives_identical_bytes(self, tmp_path):
        spec = ToyDatasetSpec(n_subjects=2, images_per_subject=15, train_fraction=1 / 3, image_size=16, seed=7)
        synth_toy_dataset(spec, tmp_path / "a")
        synth_toy_dataset(spec, tmp_path / "b")
        assert (tmp_path / "a" / "manifest.json").read_bytes() == (tmp_path / "b" / "manifest.json").read_bytes()
        first = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*.png"))
        assert first == sorted(p.relative_to(tmp_path / "b") for p in (tmp_path / "b").rglob("*.png"))
        for rel in first:
            assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()

    def test_split_sizes(self, tmp_path):
        spec = ToyDatasetSpec(n_subjects=2, images_per_subject=15, train_fraction=1 / 3, image_size=16, seed=7)
        manifest = synth_toy_dataset(spec, tmp_path)
        for subject in manifest.subjects:
            assert len(subject.train) == 5
            assert len(subject.test) == 10
            assert all(len(r.captions) == 3 for r in subject.test)
        assert validate_manifest(manifest, "toy").is_valid

    def test_masks_match_rerendered_shape(self, toy_manifest):
        for subject in toy_manifest.subjects:
            for record in subject.train + subject.test:
                meta = record.meta
                expected = render_subject_shape(meta["shape"], 8, tuple(meta["center"]), meta["radius"])
                mask = load_mask_file(toy_manifest.resolve(record.mask)).subject
                np.testing.assert_array_equal(mask.astype(bool), expected)

    def test_rejects_tiny_images(self, tmp_path):
        with pytest.raises(SpecError, match="image_size"):
            synth_toy_dataset(ToyDatasetSpec(image_size=4), tmp_path)
