import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from anomgen import images, triplets
from anomgen.clients import MockCaptioningClient
from anomgen.errors import (DomainError, ManifestIntegrityError,
                            ManifestParseError, ValidationError)

from conftest import random_mask


# ---------------------------------------------------------------- bbox

def brute_force_bbox(mask):
    xs, ys = [], []
    for y in range(mask.shape[0]):
        for x in range(mask.shape[1]):
            if mask[y, x]:
                ys.append(y)
                xs.append(x)
    return (min(xs), min(ys), max(xs), max(ys))


def test_bbox_single_pixel():
    mask = np.zeros((8, 8), bool)
    mask[4, 3] = True  # (row 4, col 3) -> x=3, y=4
    assert triplets.mask_to_bbox(mask).as_tuple() == (3, 4, 3, 4)


def test_bbox_full_image():
    assert triplets.mask_to_bbox(np.ones((8, 8), bool)).as_tuple() == \
        (0, 0, 7, 7)


def test_bbox_two_pixels_matches_brute_force():
    mask = np.zeros((8, 8), bool)
    mask[2, 1] = True
    mask[3, 5] = True
    box = triplets.mask_to_bbox(mask)
    assert box.as_tuple() == brute_force_bbox(mask) == (1, 2, 5, 3)


def test_bbox_empty_mask_rejected():
    with pytest.raises(DomainError, match="empty mask"):
        triplets.mask_to_bbox(np.zeros((4, 4), bool))


def test_bbox_matches_brute_force_on_random_masks(rng):
    for _ in range(200):
        mask = random_mask(rng, 13, 17, p=0.1)
        if not mask.any():
            continue
        assert triplets.mask_to_bbox(mask).as_tuple() == \
            brute_force_bbox(mask)


def test_bbox_validation():
    with pytest.raises(ValidationError):
        triplets.BoundingBox(5, 0, 3, 0)
    with pytest.raises(ValidationError):
        triplets.BoundingBox(-1, 0, 3, 0)
    triplets.BoundingBox(0, 0, 3, 3).validate_within(4, 4)
    with pytest.raises(ValidationError):
        triplets.BoundingBox(0, 0, 3, 3).validate_within(3, 3)


# ----------------------------------------------------- caption template

def test_caption_template_exact_string():
    rendered = triplets.render_caption_template(
        "a cashew nut", "crack", "near the center", "a thin fissure",
        "jagged edges")
    assert rendered == ("The image depicts a cashew nut, with a crack "
                        "observed near the center. The defect is "
                        "characterized by a thin fissure and exhibits "
                        "jagged edges.")


@given(st.lists(st.text(alphabet="abcdef ghij", min_size=1).map(str.strip)
                .filter(bool), min_size=5, max_size=5))
def test_caption_template_contains_all_slots(slots):
    rendered = triplets.render_caption_template(*slots)
    for slot in slots:
        assert slot in rendered


def test_caption_template_empty_slot_names_it():
    with pytest.raises(ValidationError, match="slot 5"):
        triplets.render_caption_template("x", "y", "z", "w", "")
    with pytest.raises(ValidationError, match="slot 2"):
        triplets.render_caption_template("x", "", "z", "w", "f")


def test_caption_template_injective_per_slot():
    base = ["obj", "def", "loc", "det", "feat"]
    rendered = triplets.render_caption_template(*base)
    for i in range(5):
        changed = list(base)
        changed[i] = changed[i] + "X"
        assert triplets.render_caption_template(*changed) != rendered


# ----------------------------------------------------------- manifest

def write_record_files(root, rec_id, size=8, with_mask=True):
    rng = np.random.default_rng(abs(hash(rec_id)) % 2**32)
    img = rng.random((size, size, 3)).astype(np.float32)
    mask = np.zeros((size, size), bool)
    mask[2:4, 2:4] = True
    images.save_image(img, root / "images" / f"{rec_id}.png")
    if with_mask:
        images.save_mask(mask, root / "masks" / f"{rec_id}.png")
    return {"id": rec_id, "image": f"images/{rec_id}.png",
            "mask": f"masks/{rec_id}.png", "caption": f"caption {rec_id}",
            "category": "widget", "defect_type": "crack",
            "source_dataset": "test", "split": "train",
            "domain": "industrial"}


def test_empty_manifest(tmp_path):
    path = tmp_path / "empty.jsonl"
    path.write_text("")
    manifest = triplets.load_manifest(path)
    assert len(manifest) == 0
    assert manifest.domain_counts == {}
    assert manifest.defect_type_counts == {}


def test_manifest_counts_recomputed(tmp_path):
    recs = [write_record_files(tmp_path, f"r{i}") for i in range(3)]
    recs[2]["defect_type"] = "hole"
    lines = [json.dumps({"schema_version": "1"})] + \
        [json.dumps(r) for r in recs]
    path = tmp_path / "m.jsonl"
    path.write_text("\n".join(lines) + "\n")
    manifest = triplets.load_manifest(path)
    assert manifest.defect_type_counts == {"crack": 2, "hole": 1}
    assert sum(manifest.defect_type_counts.values()) == 3


def test_manifest_missing_mask_file_names_id(tmp_path):
    rec = write_record_files(tmp_path, "lonely", with_mask=False)
    path = tmp_path / "m.jsonl"
    path.write_text(json.dumps({"schema_version": "1"}) + "\n"
                    + json.dumps(rec) + "\n")
    with pytest.raises(ManifestIntegrityError, match="lonely"):
        triplets.load_manifest(path)


def test_manifest_malformed_line_names_line_number(tmp_path):
    path = tmp_path / "m.jsonl"
    path.write_text(json.dumps({"schema_version": "1"}) + "\n{oops\n")
    with pytest.raises(ManifestParseError, match=":2"):
        triplets.load_manifest(path)


def test_manifest_duplicate_id(tmp_path):
    rec = write_record_files(tmp_path, "dup")
    path = tmp_path / "m.jsonl"
    path.write_text(json.dumps({"schema_version": "1"}) + "\n"
                    + json.dumps(rec) + "\n" + json.dumps(rec) + "\n")
    with pytest.raises(ManifestIntegrityError, match="dup"):
        triplets.load_manifest(path)


def test_manifest_unknown_field_rejected(tmp_path):
    rec = write_record_files(tmp_path, "x")
    rec["surprise"] = 1
    path = tmp_path / "m.jsonl"
    path.write_text(json.dumps({"schema_version": "1"}) + "\n"
                    + json.dumps(rec) + "\n")
    with pytest.raises(ManifestParseError, match="surprise"):
        triplets.load_manifest(path)


def test_manifest_header_count_mismatch_rejected(tmp_path):
    rec = write_record_files(tmp_path, "x")
    header = {"schema_version": "1", "domain_counts": {"textiles": 9}}
    path = tmp_path / "m.jsonl"
    path.write_text(json.dumps(header) + "\n" + json.dumps(rec) + "\n")
    with pytest.raises(ManifestIntegrityError, match="domain_counts"):
        triplets.load_manifest(path)


def test_manifest_round_trip(tmp_path, toy_manifest):
    out = tmp_path / "copy.jsonl"
    triplets.write_manifest(toy_manifest, out)
    # records reference files relative to the original fixture directory
    reloaded = triplets.load_manifest(out, check_files=False)
    assert reloaded.schema_version == toy_manifest.schema_version
    assert reloaded.domain_counts == toy_manifest.domain_counts
    assert reloaded.defect_type_counts == toy_manifest.defect_type_counts
    assert reloaded.records == toy_manifest.records


def test_train_record_needs_foreground(tmp_path):
    rec = write_record_files(tmp_path, "blank")
    images.save_mask(np.zeros((8, 8), bool), tmp_path / "masks" / "blank.png")
    path = tmp_path / "m.jsonl"
    path.write_text(json.dumps({"schema_version": "1"}) + "\n"
                    + json.dumps(rec) + "\n")
    manifest = triplets.load_manifest(path)
    with pytest.raises(ValidationError, match="foreground"):
        manifest.records[0].validate_content(manifest.root)


# --------------------------------------------------------------- stats

def test_stats_paper_domain_percentages():
    records = []
    for domain, count in [("industrial", 565), ("textiles", 236),
                          ("consumer goods", 87), ("medicine", 59),
                          ("electronics", 53)]:
        for i in range(count):
            records.append(triplets.Triplet(
                id=f"{domain}_{i}", image="i.png", mask="m.png",
                caption="c", category="c", defect_type="d",
                domain=domain))
    report = triplets.dataset_stats(
        triplets.DatasetManifest(records=records))
    assert report.total == 1000
    assert report.domain_percentages == pytest.approx(
        {"industrial": 56.5, "textiles": 23.6, "consumer goods": 8.7,
         "medicine": 5.9, "electronics": 5.3})


def test_stats_single_record():
    rec = triplets.Triplet(id="a", image="i", mask="m", caption="c",
                           category="cat", defect_type="d",
                           domain="medicine")
    report = triplets.dataset_stats(triplets.DatasetManifest(records=[rec]))
    assert report.domain_percentages == {"medicine": 100.0}


def test_stats_ranking_by_hand_count():
    records = [triplets.Triplet(id=f"r{i}", image="i", mask="m", caption="c",
                                category="cat",
                                defect_type="type_a" if i < 3 else "type_b")
               for i in range(4)]
    report = triplets.dataset_stats(triplets.DatasetManifest(records=records))
    assert report.defect_type_ranking == ["type_a", "type_b"]


# ----------------------------------------------------------- captioning

def make_manifest(tmp_path, n=3, captioned=False):
    recs = []
    for i in range(n):
        rec = write_record_files(tmp_path, f"r{i}")
        if not captioned:
            rec["caption"] = ""
        recs.append(rec)
    path = tmp_path / "m.jsonl"
    path.write_text(json.dumps({"schema_version": "1"}) + "\n"
                    + "\n".join(json.dumps(r) for r in recs) + "\n")
    return triplets.load_manifest(path)


def test_caption_triplets_mock_echo(tmp_path):
    manifest = make_manifest(tmp_path)
    out, summary = triplets.caption_triplets(manifest,
                                             MockCaptioningClient())
    assert [r.caption for r in out.records] == ["CAP:r0", "CAP:r1", "CAP:r2"]
    assert summary.failed == {}


def test_caption_triplets_partial_failure(tmp_path):
    manifest = make_manifest(tmp_path)
    client = MockCaptioningClient(fail_ids={"r1"})
    out, summary = triplets.caption_triplets(manifest, client)
    assert sorted(summary.captioned) == ["r0", "r2"]
    assert list(summary.failed) == ["r1"]
    assert out.records[1].caption == ""  # untouched


def test_caption_triplets_skips_without_force(tmp_path):
    manifest = make_manifest(tmp_path, captioned=True)
    client = MockCaptioningClient()
    _, summary = triplets.caption_triplets(manifest, client)
    assert client.calls == 0
    assert len(summary.skipped) == 3
    _, summary2 = triplets.caption_triplets(manifest, client, force=True)
    assert client.calls == 3
    assert len(summary2.captioned) == 3


def test_caption_triplets_coords_mode(tmp_path):
    manifest = make_manifest(tmp_path, n=1)
    client = MockCaptioningClient()
    out, _ = triplets.caption_triplets(manifest, client, bbox_mode="coords")
    assert out.records[0].caption == "CAP:r0"


@settings(max_examples=25)
@given(st.integers(0, 2**32 - 1))
def test_bbox_overlay_preserves_shape_and_differs(seed):
    rng = np.random.default_rng(seed)
    img = rng.random((16, 16, 3)).astype(np.float32)
    box = triplets.BoundingBox(2, 3, 9, 11)
    overlay = images.draw_bbox_overlay(img, box)
    assert overlay.shape == img.shape
    assert not np.array_equal(overlay, img)
