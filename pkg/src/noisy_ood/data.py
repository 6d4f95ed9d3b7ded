"""
Synthetic multi-source image sets, split construction, preprocessing and
manifest ingestion.

Each synthetic source produces images of one class. An image is a smooth
background texture carrying a class-dependent oriented grating (the real
signal). A source may also stamp its own artifact on every image (the
shortcut).

The grating is a large-scale pattern that survives pixel noise. The default
artifact, ``grain``, is a faint blocky texture at the scale of a few pixels,
so training-time pixel noise of comparable strength hides it. The solid
artifacts (corner tag, border frame, brightness offset) remain available but
pixel noise barely affects them.
"""

from __future__ import annotations

import csv
import enum
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .noise import as_image, make_rng
from .pgm import PGMError, read_pgm, write_pgm

RAW_SIZE = 64
PREPROCESSED_SIZE = 32

BACKGROUND_LEVEL = 0.2
BACKGROUND_AMPLITUDE = 0.06
BACKGROUND_SMOOTHING = 6.0
BRIGHTNESS_JITTER = 0.02
SIGNAL_GAIN = 0.25
SIGNAL_PERIOD = 16.0
ORIENTATION_JITTER_DEG = 45.0
CORNER_TAG_SIZE = 8
BORDER_WIDTH = 3
GRAIN_BLOCK = 2

SPLITS = ("train", "validation", "id_test", "ood_test")


class ShortcutKind(str, enum.Enum):
    CORNER_TAG = "corner_tag"
    BORDER_FRAME = "border_frame"
    BRIGHTNESS_OFFSET = "brightness_offset"
    GRAIN = "grain"
    NONE = "none"


@dataclass(frozen=True)
class SourceSpec:
    source_id: str
    class_label: int
    n_images: int
    signal_strength: float = 0.5
    shortcut_amplitude: float = 0.0
    shortcut_kind: ShortcutKind = ShortcutKind.NONE
    base_seed: int = 0
    size: int = RAW_SIZE

    def __post_init__(self):
        object.__setattr__(self, "shortcut_kind", ShortcutKind(self.shortcut_kind))
        if self.class_label not in (0, 1):
            raise ValueError(f"{self.source_id}: class_label must be 0 or 1, got {self.class_label}")
        if self.n_images < 1:
            raise ValueError(f"{self.source_id}: n_images must be >= 1, got {self.n_images}")
        for name in ("signal_strength", "shortcut_amplitude"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{self.source_id}: {name} must be in [0, 1], got {value}")
        if not 0 <= self.base_seed < 2**64:
            raise ValueError(f"{self.source_id}: base_seed must be a 64-bit unsigned integer")
        if self.size < 8:
            raise ValueError(f"{self.source_id}: size must be >= 8, got {self.size}")

    def to_dict(self) -> dict:
        return {
            "source_id": self.source_id,
            "class_label": self.class_label,
            "n_images": self.n_images,
            "signal_strength": self.signal_strength,
            "shortcut_amplitude": self.shortcut_amplitude,
            "shortcut_kind": self.shortcut_kind.value,
            "base_seed": self.base_seed,
            "size": self.size,
        }


@dataclass(frozen=True)
class LabeledImage:
    image: np.ndarray
    label: int
    source_id: str
    index: int = -1  # generation index within the source

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label}")


@dataclass
class ExperimentData:
    train: list[LabeledImage] = field(default_factory=list)
    validation: list[LabeledImage] = field(default_factory=list)
    id_test: list[LabeledImage] = field(default_factory=list)
    ood_test: list[LabeledImage] = field(default_factory=list)

    def split(self, name: str) -> list[LabeledImage]:
        if name not in SPLITS:
            raise KeyError(name)
        return getattr(self, name)

    def map_images(self, fn) -> "ExperimentData":
        """Return a copy with ``fn`` applied to every image."""
        return ExperimentData(
            **{
                name: [LabeledImage(fn(item.image), item.label, item.source_id, item.index) for item in self.split(name)]
                for name in SPLITS
            }
        )


def stack(items: list[LabeledImage]) -> tuple[np.ndarray, np.ndarray]:
    """Stack a split into an (N, H, W) image array and an (N,) label array."""
    if not items:
        return np.zeros((0, 0, 0)), np.zeros(0, dtype=np.int64)
    return np.stack([it.image for it in items]), np.array([it.label for it in items], dtype=np.int64)


def _grating(size: int, theta: float, phase: float) -> np.ndarray:
    coords = np.arange(size) - (size - 1) / 2.0
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    proj = xx * np.cos(theta) + yy * np.sin(theta)
    return np.sin(2.0 * np.pi * proj / (SIGNAL_PERIOD * size / RAW_SIZE) + phase)


def _shortcut(kind: ShortcutKind, size: int) -> np.ndarray:
    pattern = np.zeros((size, size))
    if kind is ShortcutKind.CORNER_TAG:
        t = max(1, CORNER_TAG_SIZE * size // RAW_SIZE)
        pattern[:t, :t] = 1.0
    elif kind is ShortcutKind.BORDER_FRAME:
        b = max(1, BORDER_WIDTH * size // RAW_SIZE)
        pattern[:b, :] = pattern[-b:, :] = pattern[:, :b] = pattern[:, -b:] = 1.0
    elif kind is ShortcutKind.BRIGHTNESS_OFFSET:
        pattern[:] = 1.0
    return pattern


def generate_source(spec: SourceSpec) -> list[LabeledImage]:
    """Generate ``spec.n_images`` raw images for one source, deterministic in ``base_seed``."""
    rng = make_rng(spec.base_seed)
    size = spec.size
    artifact = spec.shortcut_amplitude * _shortcut(spec.shortcut_kind, size)
    # class 0 gratings run horizontally on average, class 1 vertically
    mean_theta = 0.0 if spec.class_label == 0 else np.pi / 2.0
    jitter = np.deg2rad(ORIENTATION_JITTER_DEG)
    out = []
    for i in range(spec.n_images):
        field_ = gaussian_filter(rng.standard_normal((size, size)), BACKGROUND_SMOOTHING * size / RAW_SIZE, mode="wrap")
        field_ /= field_.std() + 1e-12
        img = BACKGROUND_LEVEL + BACKGROUND_AMPLITUDE * field_ + BRIGHTNESS_JITTER * rng.standard_normal()
        theta = mean_theta + jitter * rng.standard_normal()
        phase = rng.uniform(0.0, 2.0 * np.pi)
        img = img + spec.signal_strength * SIGNAL_GAIN * _grating(size, theta, phase)
        img = img + artifact
        if spec.shortcut_kind is ShortcutKind.GRAIN:
            cells = -(-size // GRAIN_BLOCK)
            grain = np.kron(rng.standard_normal((cells, cells)), np.ones((GRAIN_BLOCK, GRAIN_BLOCK)))
            img = img + spec.shortcut_amplitude * grain[:size, :size]
        out.append(LabeledImage(np.clip(img, 0.0, 1.0), spec.class_label, spec.source_id, i))
    return out


def _check_classes(sources: list[SourceSpec], role: str) -> None:
    labels = {s.class_label for s in sources}
    if labels != {0, 1}:
        missing = sorted({0, 1} - labels)
        raise ValueError(f"{role} sources are missing class(es) {missing}")


def check_counts(
    id_sources: list[SourceSpec],
    ood_sources: list[SourceSpec],
    counts: dict[str, dict[str, int]],
) -> dict[str, SourceSpec]:
    """Validate a split plan without generating any image; returns sources by id."""
    _check_classes(id_sources, "ID")
    _check_classes(ood_sources, "OOD")
    by_id = {s.source_id: s for s in list(id_sources) + list(ood_sources)}
    if len(by_id) != len(id_sources) + len(ood_sources):
        raise ValueError("source ids must be unique across ID and OOD sources")
    id_ids = {s.source_id for s in id_sources}
    ood_ids = {s.source_id for s in ood_sources}
    unknown_splits = set(counts) - set(SPLITS)
    if unknown_splits:
        raise ValueError(f"unknown split name(s): {sorted(unknown_splits)}")

    used: dict[str, int] = {sid: 0 for sid in by_id}
    for split, per_source in counts.items():
        allowed = ood_ids if split == "ood_test" else id_ids
        for sid, n in per_source.items():
            if sid not in allowed:
                role = "OOD" if split == "ood_test" else "ID"
                raise ValueError(f"split {split!r} may only draw from {role} sources, got {sid!r}")
            if n < 0:
                raise ValueError(f"negative count for {split}/{sid}")
            used[sid] += n
    for sid, n in used.items():
        if n > by_id[sid].n_images:
            raise ValueError(f"infeasible counts: source {sid!r} needs {n} images but has {by_id[sid].n_images}")

    for split in SPLITS:
        labels = {by_id[sid].class_label for sid, n in counts.get(split, {}).items() if n > 0}
        if labels != {0, 1}:
            raise ValueError(f"split {split!r} must contain both classes, got {sorted(labels)}")
    return by_id


def make_splits(
    id_sources: list[SourceSpec],
    ood_sources: list[SourceSpec],
    counts: dict[str, dict[str, int]],
    seed: int,
    pools: dict[str, list[LabeledImage]] | None = None,
) -> ExperimentData:
    """Partition generated source pools into train/validation/id_test/ood_test.

    ``counts`` maps split name to ``{source_id: n}``. ID splits may only name
    ID sources and ``ood_test`` only OOD sources. Each source pool is shuffled
    with ``seed`` and cut into consecutive, disjoint chunks. ``pools`` lets a
    caller reuse already generated source images.
    """
    by_id = check_counts(id_sources, ood_sources, counts)
    rng = make_rng(seed)
    cursor: dict[str, int] = {}
    order: dict[str, np.ndarray] = {}
    pools = dict(pools or {})
    for sid in sorted(by_id):
        order[sid] = rng.permutation(by_id[sid].n_images)
        cursor[sid] = 0
    data = ExperimentData()
    for split in SPLITS:
        per_source = counts.get(split, {})
        for sid in sorted(per_source):
            n = per_source[sid]
            if n == 0:
                continue
            if sid not in pools:
                pools[sid] = generate_source(by_id[sid])
            take = order[sid][cursor[sid] : cursor[sid] + n]
            cursor[sid] += n
            data.split(split).extend(pools[sid][int(j)] for j in take)
    return data


def default_counts() -> dict[str, dict[str, int]]:
    """Default per-source split sizes.

    ID class 0 / class 1: train 245 / 264, validation 27 / 29, ID test 38 / 59.
    OOD test: two class-0 sources (75, 155) and two class-1 sources (205, 414).
    """
    return {
        "train": {"A0": 245, "A1": 264},
        "validation": {"A0": 27, "A1": 29},
        "id_test": {"A0": 38, "A1": 59},
        "ood_test": {"B0": 75, "C0": 155, "B1": 205, "C1": 414},
    }


def _center_square(img: np.ndarray) -> np.ndarray:
    h, w = img.shape
    s = min(h, w)
    top, left = (h - s) // 2, (w - s) // 2
    return img[top : top + s, left : left + s]


def _bilinear_axis(n_in: int, n_out: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    # half-pixel centres, edge-clamped
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, src - lo


def resize_bilinear(img: np.ndarray, height: int, width: int) -> np.ndarray:
    y0, y1, fy = _bilinear_axis(img.shape[0], height)
    x0, x1, fx = _bilinear_axis(img.shape[1], width)
    rows = img[y0, :] * (1.0 - fy)[:, None] + img[y1, :] * fy[:, None]
    return rows[:, x0] * (1.0 - fx)[None, :] + rows[:, x1] * fx[None, :]


def quantize8(img: np.ndarray) -> np.ndarray:
    # the 1e-6 guards values that are already on the 8-bit grid against float round-down
    return np.floor(np.asarray(img) * 255.0 + 1e-6) / 255.0


def preprocess(raw: np.ndarray, target_size: int = PREPROCESSED_SIZE) -> np.ndarray:
    """Center-crop to a square, quantize to 256 levels, resize to ``target_size``."""
    if target_size < 1:
        raise ValueError(f"target_size must be >= 1, got {target_size}")
    img = quantize8(_center_square(as_image(raw)))
    if img.shape != (target_size, target_size):
        img = resize_bilinear(img, target_size, target_size)
    return np.clip(img, 0.0, 1.0)


class ManifestError(ValueError):
    pass


MANIFEST_HEADER = ["path", "label", "source_id"]


def load_manifest(manifest_path: str | os.PathLike) -> list[LabeledImage]:
    """Load a ``path,label,source_id`` CSV of 8-bit PGM images.

    Relative image paths resolve against the manifest's directory. Errors name
    the 1-based data row that caused them.
    """
    manifest_path = Path(manifest_path)
    if not manifest_path.is_file():
        raise ManifestError(f"manifest not found: {manifest_path}")
    base = manifest_path.parent
    items = []
    with open(manifest_path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != MANIFEST_HEADER:
            raise ManifestError(f"manifest header must be {','.join(MANIFEST_HEADER)}, got {header}")
        for row_no, row in enumerate(reader, start=1):
            if not row:
                continue
            if len(row) != 3:
                raise ManifestError(f"row {row_no}: expected 3 fields, got {len(row)}")
            path, label, source_id = row
            if label.strip() not in ("0", "1"):
                raise ManifestError(f"row {row_no}: bad label {label!r}, expected 0 or 1")
            img_path = Path(path)
            if not img_path.is_absolute():
                img_path = base / img_path
            if not img_path.is_file():
                raise ManifestError(f"row {row_no}: missing file {img_path}")
            try:
                img = read_pgm(img_path)
            except PGMError as exc:
                raise ManifestError(f"row {row_no}: {exc}") from None
            items.append(LabeledImage(img, int(label), source_id, row_no - 1))
    return items


def write_manifest(items: list[LabeledImage], out_dir: str | os.PathLike, name: str) -> Path:
    """Write ``items`` as PGMs under ``out_dir/name/`` plus ``out_dir/name.csv``."""
    out_dir = Path(out_dir)
    img_dir = out_dir / name
    img_dir.mkdir(parents=True, exist_ok=True)
    manifest = out_dir / f"{name}.csv"
    with open(manifest, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_HEADER)
        for k, item in enumerate(items):
            rel = Path(name) / f"{k:05d}_{item.source_id}_{item.index}.pgm"
            write_pgm(out_dir / rel, item.image)
            writer.writerow([rel.as_posix(), item.label, item.source_id])
    return manifest


def dump_dataset(data: ExperimentData, out_dir: str | os.PathLike) -> dict[str, Path]:
    """Write every split as PGMs plus one manifest per split."""
    return {name: write_manifest(data.split(name), out_dir, name) for name in SPLITS}
