"""Slice selection, intensity normalisation, and manifest-driven loading.

A pipeline volume is 91x109x91 voxels (x, y, z) with 91 axial slices along
z. The classifier input is a single 109x91 image (rows = y, cols = x):
either the mean of axial slices 35..48 inclusive or slice 41 alone, divided
by 32767 so pixels land in [0, 1]. Slice indices are 0-based offsets into
the z axis; a configurable offset shifts them for 1-based exports.

Datasets are described by a manifest CSV with header
``path,label,subject_id,visit``; labels are case-insensitive
normal / pd / swedd. SWEDD rows are hold-out only.
"""

from __future__ import annotations

import csv
import sys
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataFormatError
from .nifti import INTENSITY_MAX, Volume, read_nifti

PIPELINE_DIMS = (91, 109, 91)  # (x, y, z)
IMAGE_SHAPE = (109, 91)  # (rows=y, cols=x)
SLICE_WINDOW = (35, 48)  # inclusive
PEAK_SLICE = 41

AVERAGE_SLICES = "average_slices"
SINGLE_SLICE = "single_slice"
PREPROC_MODES = (AVERAGE_SLICES, SINGLE_SLICE)

TRAIN_EVAL = "train_eval"
HOLDOUT = "holdout"

MANIFEST_HEADER = ["path", "label", "subject_id", "visit"]


class Label(str, Enum):
    NORMAL = "normal"
    EARLY_PD = "pd"
    SWEDD = "swedd"


@dataclass
class SliceImage:
    """One 109x91 image with pixels in [0, 1] and its preprocessing tag."""

    pixels: np.ndarray
    preproc_tag: str
    source_id: str = ""


@dataclass
class LabeledSample:
    image: SliceImage
    label: Label
    cohort_role: str  # TRAIN_EVAL or HOLDOUT


@dataclass(frozen=True)
class ManifestRow:
    path: str
    label: Label
    subject_id: str
    visit: str


def parse_label(text: str) -> Label:
    try:
        return Label(text.strip().lower())
    except ValueError:
        raise DataFormatError(
            f"unknown label {text!r}; expected normal, pd, or swedd"
        ) from None


def read_manifest(path) -> list[ManifestRow]:
    """Parse and validate a manifest CSV."""
    path = Path(path)
    rows: list[ManifestRow] = []
    seen_paths: set[str] = set()
    seen_subject_visit: set[tuple[str, str]] = set()
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None or [c.strip() for c in reader.fieldnames] != MANIFEST_HEADER:
            raise DataFormatError(
                f"{path}: manifest header must be {','.join(MANIFEST_HEADER)}, "
                f"got {reader.fieldnames}"
            )
        for lineno, rec in enumerate(reader, start=2):
            try:
                row = ManifestRow(
                    path=rec["path"].strip(),
                    label=parse_label(rec["label"]),
                    subject_id=rec["subject_id"].strip(),
                    visit=rec["visit"].strip(),
                )
            except (AttributeError, KeyError, DataFormatError) as e:
                raise DataFormatError(f"{path}:{lineno}: {e}") from None
            if row.path in seen_paths:
                raise DataFormatError(f"{path}:{lineno}: duplicate file path {row.path!r}")
            key = (row.subject_id, row.visit)
            if key in seen_subject_visit:
                raise DataFormatError(
                    f"{path}:{lineno}: duplicate subject+visit {row.subject_id}/{row.visit}"
                )
            seen_paths.add(row.path)
            seen_subject_visit.add(key)
            rows.append(row)
    return rows


def write_manifest(rows: list[ManifestRow], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(MANIFEST_HEADER)
        for row in rows:
            writer.writerow([row.path, row.label.value, row.subject_id, row.visit])


def select_slices(
    volume: Volume,
    mode: str,
    window: tuple[int, int] = SLICE_WINDOW,
    single: int = PEAK_SLICE,
    offset: int = 0,
) -> np.ndarray:
    """Reduce a volume to one raw 109x91 intensity image.

    ``average_slices`` averages the axial window (inclusive); ``single_slice``
    picks one slice. ``offset`` shifts all indices, e.g. -1 for 1-based
    exports. The result is float64 in [0, 32767]; averaging does not round.
    """
    if mode not in PREPROC_MODES:
        raise ConfigError(f"preproc mode must be one of {PREPROC_MODES}, got {mode!r}")
    if volume.dims != PIPELINE_DIMS:
        raise DataFormatError(
            f"{volume.source_id or 'volume'}: dims {volume.dims} != pipeline dims {PIPELINE_DIMS}"
        )
    nz = volume.dims[2]
    if mode == SINGLE_SLICE:
        z = single + offset
        if not 0 <= z < nz:
            raise ConfigError(f"slice index {z} outside [0, {nz})")
        return volume.voxels[:, :, z].T.astype(np.float64)
    lo, hi = window[0] + offset, window[1] + offset
    if not (0 <= lo <= hi < nz):
        raise ConfigError(f"slice window [{lo}, {hi}] outside [0, {nz})")
    stack = np.stack(
        [volume.voxels[:, :, z].T.astype(np.float64) for z in range(lo, hi + 1)]
    )
    return stack.mean(axis=0)


def normalize(raw: np.ndarray, preproc_tag: str, source_id: str = "") -> SliceImage:
    """Divide raw intensities by 32767 so the maximum representable maps to 1."""
    raw = np.asarray(raw, dtype=np.float64)
    if raw.shape != IMAGE_SHAPE:
        raise DataFormatError(f"raw image shape {raw.shape} != {IMAGE_SHAPE}")
    if raw.min() < 0 or raw.max() > INTENSITY_MAX:
        raise DataFormatError(f"raw intensities outside [0, {INTENSITY_MAX}]")
    return SliceImage(pixels=raw / INTENSITY_MAX, preproc_tag=preproc_tag, source_id=source_id)


def role_for_label(label: Label) -> str:
    return HOLDOUT if label == Label.SWEDD else TRAIN_EVAL


def load_dataset(
    rows: list[ManifestRow],
    mode: str,
    base_dir=None,
    slice_offset: int = 0,
    quiet: bool = False,
) -> list[LabeledSample]:
    """Read, slice-select, and normalise every manifest row.

    Relative paths resolve against ``base_dir``. SWEDD rows become hold-out
    samples. Prints per-class counts to stderr unless ``quiet``.
    """
    if mode not in PREPROC_MODES:
        raise ConfigError(f"preproc mode must be one of {PREPROC_MODES}, got {mode!r}")
    base = Path(base_dir) if base_dir is not None else Path(".")
    samples: list[LabeledSample] = []
    counts: dict[Label, int] = {label: 0 for label in Label}
    for i, row in enumerate(rows):
        p = Path(row.path)
        if not p.is_absolute():
            p = base / p
        if not p.exists():
            raise DataFormatError(f"manifest row {i + 1} ({row.subject_id}): missing file {p}")
        volume = read_nifti(p)
        raw = select_slices(volume, mode, offset=slice_offset)
        image = normalize(raw, preproc_tag=mode, source_id=row.subject_id + "/" + row.visit)
        samples.append(
            LabeledSample(image=image, label=row.label, cohort_role=role_for_label(row.label))
        )
        counts[row.label] += 1
    if not quiet:
        summary = ", ".join(f"{label.value}={counts[label]}" for label in Label)
        print(f"loaded {len(samples)} samples ({summary})", file=sys.stderr)
    return samples
