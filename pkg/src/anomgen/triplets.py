"""Anomaly-mask-caption triplet records: schema, manifest I/O, utilities.

A manifest is a UTF-8 line-delimited JSON file. The first line is a header
object carrying ``schema_version`` and the per-domain / per-defect-type
counts; every following line is one triplet record. Images and masks live
in separate files referenced by path (relative paths resolve against the
manifest's directory).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict, replace
from pathlib import Path

import numpy as np

from .errors import (
    CaptioningError,
    DomainError,
    ManifestIntegrityError,
    ManifestParseError,
    ValidationError,
)
from . import images

SCHEMA_VERSION = "1"

CAPTION_TEMPLATE = (
    "The image depicts {object_desc}, with a {defect_type} observed "
    "{location}. The defect is characterized by {detail} and exhibits "
    "{features}."
)

# Instruction form of the caption template, sent to captioning clients
# so their answers come back with all five slots filled.
CAPTION_TEMPLATE_HINT = (
    "The image depicts [general description of the object], with a "
    "[type of defect] observed [location description]. The defect is "
    "characterized by [detailed description] and exhibits [notable features]."
)

_RECORD_FIELDS = (
    "id", "image", "mask", "caption", "category", "defect_type",
    "source_dataset", "split", "domain",
)


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box in pixel coordinates, all edges inclusive."""

    x_min: int
    y_min: int
    x_max: int
    y_max: int

    def __post_init__(self):
        if self.x_min > self.x_max or self.y_min > self.y_max:
            raise ValidationError(f"inverted bounding box {self}")
        if min(self.x_min, self.y_min) < 0:
            raise ValidationError(f"negative bounding box coordinate {self}")

    def validate_within(self, height: int, width: int) -> None:
        if self.x_max >= width or self.y_max >= height:
            raise ValidationError(
                f"bounding box {self} exceeds image bounds {height}x{width}")

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)


@dataclass
class Triplet:
    """One anomaly record: reference image, binary mask, caption, metadata."""

    id: str
    image: str
    mask: str
    caption: str
    category: str
    defect_type: str
    source_dataset: str = ""
    split: str = "train"
    domain: str = "industrial"

    def __post_init__(self):
        if self.split not in ("train", "eval"):
            raise ValidationError(
                f"record {self.id!r}: split must be 'train' or 'eval', "
                f"got {self.split!r}")

    def image_path(self, root: Path | None = None) -> Path:
        return _resolve(self.image, root)

    def mask_path(self, root: Path | None = None) -> Path:
        return _resolve(self.mask, root)

    def load_image(self, root: Path | None = None) -> np.ndarray:
        return images.load_image(self.image_path(root))

    def load_mask(self, root: Path | None = None) -> np.ndarray:
        return images.load_mask(self.mask_path(root))

    def validate_content(self, root: Path | None = None) -> None:
        """Load pixels and enforce the mask/image/caption invariants."""
        img = self.load_image(root)
        mask = self.load_mask(root)
        if img.shape[:2] != mask.shape:
            raise ValidationError(
                f"record {self.id!r}: mask shape {mask.shape} does not match "
                f"image shape {img.shape[:2]}")
        if self.split == "train" and not mask.any():
            raise ValidationError(
                f"record {self.id!r}: train mask has no foreground pixel")
        if not self.caption:
            raise ValidationError(f"record {self.id!r}: empty caption")


def _resolve(path: str, root: Path | None) -> Path:
    p = Path(path)
    if not p.is_absolute() and root is not None:
        return root / p
    return p


@dataclass
class DatasetManifest:
    """Immutable-by-convention collection of triplet records plus counts."""

    records: list[Triplet]
    schema_version: str = SCHEMA_VERSION
    root: Path | None = None
    domain_counts: dict[str, int] = field(default_factory=dict)
    defect_type_counts: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        self.domain_counts = _count_by(self.records, "domain")
        self.defect_type_counts = _count_by(self.records, "defect_type")

    def __len__(self) -> int:
        return len(self.records)

    def by_id(self, record_id: str) -> Triplet:
        for rec in self.records:
            if rec.id == record_id:
                return rec
        raise KeyError(record_id)

    def defect_types(self) -> list[str]:
        return sorted(self.defect_type_counts)

    def with_records(self, records: list[Triplet]) -> "DatasetManifest":
        return DatasetManifest(records=list(records),
                               schema_version=self.schema_version,
                               root=self.root)


def _count_by(records: list[Triplet], attr: str) -> dict[str, int]:
    counts: dict[str, int] = {}
    for rec in records:
        key = getattr(rec, attr)
        counts[key] = counts.get(key, 0) + 1
    return counts


def load_manifest(path: str | Path, check_files: bool = True) -> DatasetManifest:
    """Parse and validate a manifest file.

    Raises ManifestParseError naming the offending line for malformed JSON
    or bad fields, ManifestIntegrityError for duplicate ids, missing
    referenced files, or header counts that disagree with the records.
    """
    path = Path(path)
    root = path.parent
    if not path.exists():
        raise ManifestParseError(f"manifest not found: {path}")

    records: list[Triplet] = []
    header: dict | None = None
    seen_ids: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestParseError(
                    f"{path}:{lineno}: invalid JSON: {exc}") from exc
            if not isinstance(obj, dict):
                raise ManifestParseError(
                    f"{path}:{lineno}: expected an object, got {type(obj).__name__}")
            if header is None:
                if "schema_version" not in obj:
                    raise ManifestParseError(
                        f"{path}:1: header line must carry schema_version")
                header = obj
                continue
            unknown = set(obj) - set(_RECORD_FIELDS)
            if unknown:
                raise ManifestParseError(
                    f"{path}:{lineno}: unknown fields {sorted(unknown)}")
            missing = {"id", "image", "mask", "category", "defect_type"} - set(obj)
            if missing:
                raise ManifestParseError(
                    f"{path}:{lineno}: missing fields {sorted(missing)}")
            try:
                rec = Triplet(**obj)
            except (TypeError, ValidationError) as exc:
                raise ManifestParseError(f"{path}:{lineno}: {exc}") from exc
            if rec.id in seen_ids:
                raise ManifestIntegrityError(
                    f"{path}:{lineno}: duplicate id {rec.id!r}")
            seen_ids.add(rec.id)
            records.append(rec)

    if header is None:
        if records:
            raise ManifestParseError(f"{path}: missing header line")
        header = {"schema_version": SCHEMA_VERSION}

    if check_files:
        for rec in records:
            for kind, p in (("image", rec.image_path(root)),
                            ("mask", rec.mask_path(root))):
                if not p.exists():
                    raise ManifestIntegrityError(
                        f"record {rec.id!r}: referenced {kind} file missing: {p}")

    manifest = DatasetManifest(records=records,
                               schema_version=str(header["schema_version"]),
                               root=root)
    for key, attr in (("domain_counts", "domain_counts"),
                      ("defect_type_counts", "defect_type_counts")):
        if key in header and header[key] != getattr(manifest, attr):
            raise ManifestIntegrityError(
                f"{path}: header {key} disagree with recomputed counts")
    return manifest


def write_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "schema_version": manifest.schema_version,
        "domain_counts": manifest.domain_counts,
        "defect_type_counts": manifest.defect_type_counts,
    }
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for rec in manifest.records:
            fh.write(json.dumps(asdict(rec), sort_keys=True) + "\n")


def mask_to_bbox(mask: np.ndarray) -> BoundingBox:
    """Minimal axis-aligned box containing every foreground pixel."""
    ys, xs = np.nonzero(mask)
    if ys.size == 0:
        raise DomainError("empty mask")
    return BoundingBox(x_min=int(xs.min()), y_min=int(ys.min()),
                       x_max=int(xs.max()), y_max=int(ys.max()))


_SLOT_NAMES = ("object_desc", "defect_type", "location", "detail", "features")


def render_caption_template(object_desc: str, defect_type: str, location: str,
                            detail: str, features: str) -> str:
    """Fill the five-slot structured caption template verbatim."""
    values = (object_desc, defect_type, location, detail, features)
    for i, (name, value) in enumerate(zip(_SLOT_NAMES, values), start=1):
        if not value:
            raise ValidationError(f"caption slot {i} ({name}) is empty")
    return CAPTION_TEMPLATE.format(object_desc=object_desc,
                                   defect_type=defect_type,
                                   location=location, detail=detail,
                                   features=features)


@dataclass
class CaptioningSummary:
    captioned: list[str] = field(default_factory=list)
    skipped: list[str] = field(default_factory=list)
    failed: dict[str, str] = field(default_factory=dict)


def caption_triplets(manifest: DatasetManifest, client, force: bool = False,
                     bbox_mode: str = "overlay",
                     ) -> tuple[DatasetManifest, CaptioningSummary]:
    """Produce captions for every record through the captioning client.

    Records that already carry a caption are skipped unless ``force``.
    Client failures mark the record as failed and the pipeline continues;
    the summary lists all failures by id.

    ``bbox_mode`` selects how the defect box reaches the client: "overlay"
    draws a red rectangle onto a copy of the image, "coords" leaves the
    image untouched and passes the box numerically.
    """
    from .clients import CaptionRequest  # local import to avoid cycle

    if bbox_mode not in ("overlay", "coords"):
        raise ValidationError(f"unknown bbox_mode {bbox_mode!r}")
    summary = CaptioningSummary()
    out_records: list[Triplet] = []
    for rec in manifest.records:
        if rec.caption and not force:
            summary.skipped.append(rec.id)
            out_records.append(rec)
            continue
        try:
            img = rec.load_image(manifest.root)
            mask = rec.load_mask(manifest.root)
            bbox = mask_to_bbox(mask)
            if bbox_mode == "overlay":
                payload = images.draw_bbox_overlay(img, bbox, thickness=3)
            else:
                payload = img
            caption = client.submit(CaptionRequest(
                record_id=rec.id,
                image_png=images.image_to_png_bytes(payload),
                bbox=bbox,
                template=CAPTION_TEMPLATE_HINT,
                bbox_in_text=(bbox_mode == "coords"),
            ))
            out_records.append(replace(rec, caption=caption))
            summary.captioned.append(rec.id)
        except (CaptioningError, DomainError, OSError, ValidationError) as exc:
            summary.failed[rec.id] = str(exc)
            out_records.append(rec)
    return manifest.with_records(out_records), summary


@dataclass
class StatsReport:
    total: int
    domain_counts: dict[str, int]
    domain_percentages: dict[str, float]
    defect_type_counts: dict[str, int]
    defect_type_ranking: list[str]

    def format_text(self) -> str:
        lines = [f"records: {self.total}"]
        lines.append("domains:")
        for name in sorted(self.domain_counts, key=lambda d: -self.domain_counts[d]):
            lines.append(f"  {name}: {self.domain_counts[name]} "
                         f"({self.domain_percentages[name]:.1f}%)")
        lines.append("defect types (most frequent first):")
        for name in self.defect_type_ranking:
            lines.append(f"  {name}: {self.defect_type_counts[name]}")
        return "\n".join(lines)


def dataset_stats(manifest: DatasetManifest) -> StatsReport:
    """Per-domain percentages and defect-type frequency ranking."""
    total = len(manifest.records)
    domain_counts = dict(manifest.domain_counts)
    percentages = {name: count * 100.0 / total if total else 0.0
                   for name, count in domain_counts.items()}
    type_counts = dict(manifest.defect_type_counts)
    ranking = sorted(type_counts, key=lambda name: (-type_counts[name], name))
    return StatsReport(total=total, domain_counts=domain_counts,
                       domain_percentages=percentages,
                       defect_type_counts=type_counts,
                       defect_type_ranking=ranking)
