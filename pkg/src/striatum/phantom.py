"""Seeded synthetic striatal-uptake phantoms.

Normal-like images carry two mirrored comma shapes (an elliptical head plus
a curved tail band) at high intensity on a dim background. PD-like images
attenuate the tail by (1 - severity), shrink the head, and add a sampled
left/right asymmetry, echoing the way real early-PD scans lose the comma
tail and turn dot-like. SWEDD-like images reuse the normal geometry: a
normal-looking scan is the defining property of that cohort.

No anatomical realism is claimed. The generator exists so every pipeline
stage is exercisable with a learnable, class-separable task and known
ground truth. All randomness comes from per-sample substreams derived from
the config seed, so outputs are reproducible bit for bit, and severity 0
with zero noise makes the PD generator collapse onto the normal one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .ingest import (
    IMAGE_SHAPE,
    PIPELINE_DIMS,
    SLICE_WINDOW,
    PEAK_SLICE,
    SINGLE_SLICE,
    Label,
    LabeledSample,
    ManifestRow,
    normalize,
    role_for_label,
    write_manifest,
)
from .nifti import INTENSITY_MAX, Volume, write_nifti
from .rng import Xoshiro256pp, derive_seed

EMIT_SLICE = "slice"
EMIT_VOLUME = "volume"

BACKGROUND = 800.0
HEAD_INTENSITY = 26000.0
TAIL_INTENSITY = 22000.0

# nominal comma geometry on the 109x91 canvas (rows=y, cols=x), left side;
# the right side mirrors across column 45
_HEAD_ROW, _HEAD_COL = 40.0, 27.0
_HEAD_AX_R, _HEAD_AX_C = 10.0, 7.0
_TAIL_LEN = 26.0
_TAIL_BOW = 6.0
_TAIL_THICKNESS = 3.5
_N_CURVE_PTS = 48

_PHANTOM_CLASSES = ("normal", "pd", "swedd")


@dataclass(frozen=True)
class PhantomConfig:
    phantom_class: str  # normal | pd | swedd
    n: int
    seed: int
    noise_sigma: float = 0.02  # fraction of the 32767 full scale
    severity: float = 0.7  # PD tail attenuation in [0, 1]
    emit: str = EMIT_SLICE

    def __post_init__(self):
        if self.phantom_class not in _PHANTOM_CLASSES:
            raise ConfigError(f"phantom class must be one of {_PHANTOM_CLASSES}")
        if self.n < 1:
            raise ConfigError("phantom count must be >= 1")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")
        if not 0.0 <= self.severity <= 1.0:
            raise ConfigError("severity must be in [0, 1]")
        if self.emit not in (EMIT_SLICE, EMIT_VOLUME):
            raise ConfigError(f"emit must be {EMIT_SLICE!r} or {EMIT_VOLUME!r}")


@dataclass
class PhantomSample:
    true_class: str
    sample_id: str
    image: np.ndarray | None = None  # slice mode: raw 109x91 intensities
    volume: Volume | None = None  # volume mode
    params: dict = field(default_factory=dict)


def _comma_pattern(side_params: list[dict], head_gain: float, tail_gain: float) -> np.ndarray:
    """Render both comma shapes at the given per-side geometry; raw intensities."""
    rows, cols = IMAGE_SHAPE
    r = np.arange(rows, dtype=np.float64)[:, None]
    c = np.arange(cols, dtype=np.float64)[None, :]
    img = np.full(IMAGE_SHAPE, BACKGROUND)
    for p in side_params:
        # head: flat-topped ellipse with a soft edge
        q2 = ((r - p["head_row"]) / p["ax_r"]) ** 2 + ((c - p["head_col"]) / p["ax_c"]) ** 2
        head = (HEAD_INTENSITY * p["head_gain"] * head_gain) * np.exp(-(q2**2))
        # tail: curved band, distance evaluated only inside its bounding box
        t = np.linspace(0.0, 1.0, _N_CURVE_PTS)
        curve_r = p["head_row"] + 6.0 + p["tail_len"] * t
        curve_c = p["head_col"] + p["mirror"] * p["bow"] * np.sin(math.pi * t * 0.8)
        pad = _TAIL_THICKNESS * 3
        r0 = max(0, int(curve_r.min() - pad))
        r1 = min(rows, int(curve_r.max() + pad) + 1)
        c0 = max(0, int(curve_c.min() - pad))
        c1 = min(cols, int(curve_c.max() + pad) + 1)
        rr = r[r0:r1]
        cc = c[:, c0:c1]
        d2 = (rr[:, :, None] - curve_r) ** 2 + (cc[:, :, None] - curve_c) ** 2
        dist = np.sqrt(d2.min(axis=2))
        tail = np.zeros(IMAGE_SHAPE)
        tail[r0:r1, c0:c1] = (TAIL_INTENSITY * p["tail_gain"] * tail_gain) * np.exp(
            -((dist / _TAIL_THICKNESS) ** 4)
        )
        img = np.maximum(img, BACKGROUND + head)
        img = np.maximum(img, BACKGROUND + tail)
    return img


def _sample_params(rng: Xoshiro256pp, phantom_class: str, severity: float) -> list[dict]:
    """Draw one sample's geometry. The draw sequence is identical for every
    class; class and severity only rescale what was drawn, so severity 0
    reproduces the normal-like sample exactly."""
    sides = []
    for mirror in (-1.0, 1.0):
        col = _HEAD_COL if mirror < 0 else (IMAGE_SHAPE[1] - 1) - _HEAD_COL
        sides.append(
            {
                "mirror": mirror,
                "head_row": _HEAD_ROW + rng.uniform(-2.5, 2.5),
                "head_col": col + rng.uniform(-2.5, 2.5),
                "ax_r": _HEAD_AX_R * rng.uniform(0.9, 1.1),
                "ax_c": _HEAD_AX_C * rng.uniform(0.9, 1.1),
                "tail_len": _TAIL_LEN * rng.uniform(0.9, 1.1),
                "bow": _TAIL_BOW * rng.uniform(0.9, 1.1),
                "head_gain": 1.0,
                "tail_gain": 1.0,
            }
        )
    head_jit = rng.uniform(0.9, 1.1)
    tail_jit = rng.uniform(0.9, 1.1)
    asym = rng.uniform()
    weak_side = rng.randint(2)
    for side in sides:
        side["head_gain"] = head_jit
        side["tail_gain"] = tail_jit
    s = severity if phantom_class == "pd" else 0.0
    if s > 0.0:
        for i, side in enumerate(sides):
            extra = 1.0 - 0.4 * s * asym if i == weak_side else 1.0
            side["tail_gain"] *= (1.0 - s) * extra
            side["head_gain"] *= (1.0 - 0.25 * s) * (1.0 - 0.2 * s * asym if i == weak_side else 1.0)
            side["ax_r"] *= 1.0 - 0.3 * s
            side["ax_c"] *= 1.0 - 0.3 * s
    return sides


def _slice_weights() -> np.ndarray:
    """Per-slice pattern weight across the axial window, peaked at slice 41."""
    lo, hi = SLICE_WINDOW
    z = np.arange(lo, hi + 1)
    return 1.0 - np.abs(z - PEAK_SLICE) / 7.5


def generate(cfg: PhantomConfig) -> list[PhantomSample]:
    """Generate cfg.n phantom samples, each from its own derived substream."""
    samples = []
    sigma = cfg.noise_sigma * INTENSITY_MAX
    for i in range(cfg.n):
        rng = Xoshiro256pp(derive_seed(cfg.seed, i))
        sides = _sample_params(rng, cfg.phantom_class, cfg.severity)
        pattern = _comma_pattern(sides, 1.0, 1.0)
        sample_id = f"{cfg.phantom_class}-{i:04d}"
        if cfg.emit == EMIT_SLICE:
            img = pattern
            if sigma > 0:
                img = img + sigma * rng.normals(img.size).reshape(img.shape)
            img = np.clip(img, 0.0, INTENSITY_MAX)
            samples.append(
                PhantomSample(cfg.phantom_class, sample_id, image=img, params={"sides": sides})
            )
        else:
            vol = np.full(PIPELINE_DIMS, BACKGROUND)
            lo, hi = SLICE_WINDOW
            # pattern is (rows=y, cols=x); the volume is indexed [x, y, z]
            signal = (pattern - BACKGROUND).T
            for w, z in zip(_slice_weights(), range(lo, hi + 1)):
                vol[:, :, z] += w * signal
            if sigma > 0:
                vol = vol + sigma * rng.normals(vol.size).reshape(vol.shape)
            vox = np.clip(np.rint(vol), 0, INTENSITY_MAX).astype(np.int32)
            samples.append(
                PhantomSample(
                    cfg.phantom_class,
                    sample_id,
                    volume=Volume(voxels=vox, source_id=sample_id),
                    params={"sides": sides},
                )
            )
    return samples


def nominal_tail_mask() -> np.ndarray:
    """Boolean mask of the unjittered tail bands (both sides), for measurements."""
    sides = []
    for mirror in (-1.0, 1.0):
        col = _HEAD_COL if mirror < 0 else (IMAGE_SHAPE[1] - 1) - _HEAD_COL
        sides.append(
            {
                "mirror": mirror,
                "head_row": _HEAD_ROW,
                "head_col": col,
                "ax_r": 1e-6,  # suppress the head so only the tails render
                "ax_c": 1e-6,
                "tail_len": _TAIL_LEN,
                "bow": _TAIL_BOW,
                "head_gain": 0.0,
                "tail_gain": 1.0,
            }
        )
    img = _comma_pattern(sides, 0.0, 1.0)
    return (img - BACKGROUND) > 0.5 * TAIL_INTENSITY


def phantom_dataset(
    n_normal: int,
    n_pd: int,
    seed: int,
    n_swedd: int = 0,
    noise_sigma: float = 0.02,
    severity: float = 0.7,
    preproc_tag: str = SINGLE_SLICE,
) -> list[LabeledSample]:
    """In-memory labelled cohort of slice-mode phantoms (no files involved).

    Class seeds are derived from the cohort seed so the three classes use
    disjoint substreams.
    """
    out: list[LabeledSample] = []
    for offset, (cls, label, n) in enumerate(
        [
            ("normal", Label.NORMAL, n_normal),
            ("pd", Label.EARLY_PD, n_pd),
            ("swedd", Label.SWEDD, n_swedd),
        ]
    ):
        if n == 0:
            continue
        cfg = PhantomConfig(
            phantom_class=cls,
            n=n,
            seed=derive_seed(seed, offset),
            noise_sigma=noise_sigma,
            severity=severity,
            emit=EMIT_SLICE,
        )
        for sample in generate(cfg):
            image = normalize(sample.image, preproc_tag=preproc_tag, source_id=sample.sample_id)
            out.append(
                LabeledSample(image=image, label=label, cohort_role=role_for_label(label))
            )
    return out


def emit_manifest(samples: list[PhantomSample], out_dir) -> Path:
    """Write volume-mode samples as NIfTI files plus a manifest CSV.

    Returns the manifest path. File names are phantom_<class>_<index>.nii and
    manifest paths are relative to ``out_dir``.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for sample in samples:
        if sample.volume is None:
            raise ConfigError(
                f"sample {sample.sample_id} was generated in slice mode; "
                "only volume-mode phantoms can be written to disk"
            )
        fname = f"phantom_{sample.sample_id.replace('-', '_')}.nii"
        write_nifti(sample.volume, out_dir / fname)
        rows.append(
            ManifestRow(
                path=fname,
                label=Label(sample.true_class),
                subject_id=f"ph-{sample.sample_id}",
                visit="scr",
            )
        )
    manifest_path = out_dir / "manifest.csv"
    write_manifest(rows, manifest_path)
    return manifest_path
