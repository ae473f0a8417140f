"""Dataset manifest parsing and raster loading.

Manifest format: UTF-8 CSV with header ``case_id,image,annotations,cohort``.
``annotations`` is a semicolon-separated list of mask paths; paths are
resolved relative to the manifest's directory. ``cohort`` is one of
``train``, ``validation``, ``test``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import LoadError, ManifestError

COHORTS = ("train", "validation", "test")
MANIFEST_HEADER = ["case_id", "image", "annotations", "cohort"]
MAX_ANNOTATORS = 6


@dataclass(frozen=True)
class CaseRecord:
    case_id: str
    image_path: Path
    annotation_paths: tuple[Path, ...]
    cohort: str

    def __post_init__(self):
        if not self.annotation_paths:
            raise ManifestError(f"case {self.case_id!r}: no annotation paths")
        if len(self.annotation_paths) > MAX_ANNOTATORS:
            raise ManifestError(
                f"case {self.case_id!r}: {len(self.annotation_paths)} annotations, "
                f"at most {MAX_ANNOTATORS} supported"
            )
        if self.cohort not in COHORTS:
            raise ManifestError(
                f"case {self.case_id!r}: cohort {self.cohort!r} not in {COHORTS}"
            )


@dataclass
class DatasetManifest:
    records: list[CaseRecord]
    cohort_counts: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if not self.cohort_counts:
            self.cohort_counts = {c: 0 for c in COHORTS}
            for rec in self.records:
                self.cohort_counts[rec.cohort] += 1

    def cohort(self, name: str) -> list[CaseRecord]:
        return [r for r in self.records if r.cohort == name]


def parse_manifest(path: str | Path, check_files: bool = True) -> DatasetManifest:
    """Read and validate a manifest CSV.

    Raises ManifestError for an empty file, a bad header, malformed lines
    (reported with their line number), duplicate case ids, or (when
    ``check_files``) referenced files that do not exist.
    """
    path = Path(path)
    if not path.exists():
        raise ManifestError(f"manifest not found: {path}")
    base = path.parent
    records: list[CaseRecord] = []
    seen: set[str] = set()
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ManifestError(f"empty manifest: {path}") from None
        if header != MANIFEST_HEADER:
            raise ManifestError(
                f"{path}:1: bad header {header!r}, expected {MANIFEST_HEADER!r}"
            )
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4:
                raise ManifestError(f"{path}:{lineno}: expected 4 fields, got {len(row)}")
            case_id, image, annotations, cohort = (f.strip() for f in row)
            if not case_id:
                raise ManifestError(f"{path}:{lineno}: empty case_id")
            if case_id in seen:
                raise ManifestError(f"{path}:{lineno}: duplicate case_id {case_id!r}")
            seen.add(case_id)
            ann_paths = tuple(base / p.strip() for p in annotations.split(";") if p.strip())
            try:
                rec = CaseRecord(case_id, base / image, ann_paths, cohort)
            except ManifestError as exc:
                raise ManifestError(f"{path}:{lineno}: {exc}") from None
            if check_files:
                for p in (rec.image_path, *rec.annotation_paths):
                    if not p.exists():
                        raise ManifestError(f"{path}:{lineno}: missing file {p}")
            records.append(rec)
    if not records:
        raise ManifestError(f"empty manifest: {path}")
    return DatasetManifest(records)


def write_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    """Serialize a manifest; parse(write(m)) is a fixed point."""
    path = Path(path)
    base = path.parent
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_HEADER)
        for rec in manifest.records:
            writer.writerow(
                [
                    rec.case_id,
                    _relativize(rec.image_path, base),
                    ";".join(_relativize(p, base) for p in rec.annotation_paths),
                    rec.cohort,
                ]
            )


def _relativize(p: Path, base: Path) -> str:
    try:
        return p.relative_to(base).as_posix()
    except ValueError:
        return p.as_posix()


def load_image(path: str | Path) -> np.ndarray:
    """Load an 8-bit RGB raster as float32 intensities in [0, 255]."""
    try:
        img = Image.open(path)
    except OSError as exc:
        raise LoadError(f"cannot read image {path}: {exc}") from None
    if img.mode != "RGB":
        raise LoadError(f"{path}: mode {img.mode!r}, only 8-bit RGB supported")
    return np.asarray(img, dtype=np.float32)


def load_mask(path: str | Path) -> np.ndarray:
    """Load a single-channel 8-bit raster as raw uint8 values."""
    try:
        img = Image.open(path)
    except OSError as exc:
        raise LoadError(f"cannot read mask {path}: {exc}") from None
    if img.mode != "L":
        raise LoadError(f"{path}: mode {img.mode!r}, only single-channel 8-bit supported")
    return np.asarray(img, dtype=np.uint8)


def load_case(record: CaseRecord) -> tuple[np.ndarray, list[np.ndarray]]:
    """Load a case's image and raw annotation masks, enforcing equal sizes."""
    image = load_image(record.image_path)
    masks = []
    for p in record.annotation_paths:
        mask = load_mask(p)
        if mask.shape != image.shape[:2]:
            raise LoadError(
                f"case {record.case_id!r}: mask {p} is {mask.shape}, "
                f"image is {image.shape[:2]}"
            )
        masks.append(mask)
    return image, masks


def save_image(path: str | Path, image: np.ndarray) -> None:
    """Write an H x W x 3 uint8 array as an RGB raster."""
    arr = np.asarray(image)
    if arr.dtype != np.uint8:
        raise LoadError("images are written from uint8 arrays only")
    Image.fromarray(arr, mode="RGB").save(path)


def save_mask(path: str | Path, mask: np.ndarray) -> None:
    """Write an H x W uint8 array as a single-channel raster."""
    arr = np.asarray(mask)
    if arr.dtype != np.uint8:
        raise LoadError("masks are written from uint8 arrays only")
    Image.fromarray(arr, mode="L").save(path)
