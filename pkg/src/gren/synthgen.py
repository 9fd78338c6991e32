"""Synthetic chest-like scenes, their on-disk format, and mini-batch assembly.

A scene is a bright torso with two dark elliptical lung fields, faint
mirror-symmetric rib bands and, per disease class, at most one lesion blob
placed inside a single lung. Everything is a pure function of
``(seed, SceneSpec)``; pixel values are quantised to 8 bits at generation
time so that a PGM round trip is exact.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from gren import phash

MANIFEST_VERSION = 1


class DatasetError(ValueError):
    """A manifest or sample failed to load or validate."""


@dataclass(frozen=True)
class SceneSpec:
    image_side: int = 128
    num_classes: int = 2
    lesion_radius_range: tuple[float, float] = (7.0, 11.0)
    lesion_contrast_range: tuple[float, float] = (0.1, 0.2)
    rib_amplitude: float = 0.06
    noise_sigma: float = 0.02
    annotated_fraction: float = 0.2
    lesion_probability: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "lesion_radius_range", tuple(float(v) for v in self.lesion_radius_range))
        object.__setattr__(self, "lesion_contrast_range", tuple(float(v) for v in self.lesion_contrast_range))
        if self.image_side < 16:
            raise ValueError("image_side must be at least 16")
        if self.num_classes < 1:
            raise ValueError("num_classes must be positive")
        for name in ("lesion_radius_range", "lesion_contrast_range"):
            lo, hi = getattr(self, name)
            if not (0 < lo <= hi):
                raise ValueError(f"{name} must be a nonempty positive range, got {(lo, hi)}")
        if self.rib_amplitude < 0 or self.noise_sigma < 0:
            raise ValueError("rib_amplitude and noise_sigma must be non-negative")
        if not 0.0 <= self.annotated_fraction <= 1.0:
            raise ValueError("annotated_fraction must be in [0, 1]")
        if not 0.0 <= self.lesion_probability <= 1.0:
            raise ValueError("lesion_probability must be in [0, 1]")

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lesion_radius_range"] = list(self.lesion_radius_range)
        d["lesion_contrast_range"] = list(self.lesion_contrast_range)
        return d


@dataclass(frozen=True)
class Box:
    """Inclusive pixel rectangle, origin top-left."""

    k: int
    x0: int
    y0: int
    x1: int
    y1: int

    def to_dict(self) -> dict:
        return {"class": self.k, "x0": self.x0, "y0": self.y0, "x1": self.x1, "y1": self.y1}

    @classmethod
    def from_dict(cls, d: dict) -> "Box":
        return cls(int(d["class"]), int(d["x0"]), int(d["y0"]), int(d["x1"]), int(d["y1"]))


@dataclass
class Sample:
    image: np.ndarray
    left_mask: np.ndarray
    right_mask: np.ndarray
    labels: np.ndarray
    annotated: np.ndarray
    boxes: list[Box] = field(default_factory=list)
    sample_id: str = ""

    def validate(self) -> None:
        side = self.image.shape
        if self.image.ndim != 2 or self.left_mask.shape != side or self.right_mask.shape != side:
            raise DatasetError(f"sample {self.sample_id}: image and mask shapes disagree")
        if np.any(self.left_mask & self.right_mask):
            raise DatasetError(f"sample {self.sample_id}: overlapping lung masks")
        if not self.left_mask.any() or not self.right_mask.any():
            raise DatasetError(f"sample {self.sample_id}: empty lung mask")
        if np.any(self.annotated > self.labels):
            raise DatasetError(f"sample {self.sample_id}: box annotation on a negative class")
        boxed = {b.k for b in self.boxes}
        if boxed != set(np.flatnonzero(self.annotated).tolist()):
            raise DatasetError(f"sample {self.sample_id}: boxes must exist exactly for annotated classes")
        lungs = [_bbox(self.left_mask), _bbox(self.right_mask)]
        for b in self.boxes:
            inside = [r0 <= b.y0 and b.y1 <= r1 and c0 <= b.x0 and b.x1 <= c1 for r0, r1, c0, c1 in lungs]
            if sum(inside) != 1:
                raise DatasetError(f"sample {self.sample_id}: box {b} not inside exactly one lung region")

    def equals(self, other: "Sample") -> bool:
        return (
            np.array_equal(self.image, other.image)
            and np.array_equal(self.left_mask, other.left_mask)
            and np.array_equal(self.right_mask, other.right_mask)
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.annotated, other.annotated)
            and self.boxes == other.boxes
        )


def _bbox(mask: np.ndarray) -> tuple[int, int, int, int]:
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    return int(rows[0]), int(rows[-1]), int(cols[0]), int(cols[-1])


# ------------------------------------------------------------------ rendering


def _lung_geometry(side: int, rng: np.random.Generator):
    """Mirror-symmetric lung ellipses (cy, cx_left, cx_right, ry, rx)."""
    cy = side * (0.52 + rng.uniform(-0.02, 0.02))
    offset = side * (0.21 + rng.uniform(-0.015, 0.015))
    ry = side * (0.32 + rng.uniform(-0.02, 0.02))
    rx = side * (0.15 + rng.uniform(-0.01, 0.01))
    mid = side / 2.0
    return cy, mid - offset, mid + offset, ry, rx


def _square_fits(cx, cy, r, ecx, ecy, rx, ry) -> bool:
    # an ellipse is convex, so a square fits iff its four corners do
    for dx in (-r, r):
        for dy in (-r, r):
            if ((cx + dx - ecx) / rx) ** 2 + ((cy + dy - ecy) / ry) ** 2 > 1.0:
                return False
    return True


def _lesion_profile(k: int, dist: np.ndarray, radius: float) -> np.ndarray:
    if k % 2 == 0:
        # soft nodule: Gaussian core, cut at the radius
        prof = np.exp(-0.5 * (dist / (0.5 * radius)) ** 2)
    else:
        # consolidation-like plate with a soft rim
        prof = np.clip((radius - dist) / (0.3 * radius), 0.0, 1.0)
    return np.where(dist <= radius, prof, 0.0)


def generate_sample(seed: int, spec: SceneSpec | None = None) -> Sample:
    spec = spec or SceneSpec()
    side = spec.image_side
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x6E5]))
    cy, cxl, cxr, ry, rx = _lung_geometry(side, rng)
    r_max = spec.lesion_radius_range[1]
    if not _square_fits(0.0, 0.0, r_max + 1.0, 0.0, 0.0, rx, ry):
        raise ValueError(
            f"lesion radius {r_max} exceeds lung extent ({rx:.1f} x {ry:.1f} pixel semi-axes)"
        )

    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64) + 0.5
    left = ((xx - cxl) / rx) ** 2 + ((yy - cy) / ry) ** 2 <= 1.0
    right = ((xx - cxr) / rx) ** 2 + ((yy - cy) / ry) ** 2 <= 1.0

    img = 0.72 - 0.1 * (yy / side)
    outside = ((xx - side / 2) / (0.47 * side)) ** 2 + ((yy - 0.55 * side) / (0.55 * side)) ** 2 > 1.0
    img = np.where(outside, 0.12, img)
    img = np.where(left | right, 0.28, img)
    # ribs curve downward away from the midline, identically on both sides
    period = side * rng.uniform(0.11, 0.14)
    phase = rng.uniform(0, 2 * np.pi)
    ribs = np.sin(2 * np.pi * (yy - 0.35 * np.abs(xx - side / 2)) / period + phase)
    img = img + np.where(left | right, spec.rib_amplitude * (ribs > 0.4), 0.0)

    labels = np.zeros(spec.num_classes, dtype=np.int64)
    annotated = np.zeros(spec.num_classes, dtype=np.int64)
    boxes: list[Box] = []
    for k in range(spec.num_classes):
        if rng.uniform() >= spec.lesion_probability:
            continue
        radius = rng.uniform(*spec.lesion_radius_range)
        contrast = rng.uniform(*spec.lesion_contrast_range)
        ecx, lung = (cxl, left) if rng.uniform() < 0.5 else (cxr, right)
        for _ in range(200):
            lx = rng.uniform(ecx - rx, ecx + rx)
            ly = rng.uniform(cy - ry, cy + ry)
            if _square_fits(lx, ly, radius + 1.0, ecx, cy, rx, ry):
                break
        else:
            # the radius check guarantees the lung centre always fits
            lx, ly = ecx, cy
        dist = np.hypot(xx - lx, yy - ly)
        img = img + contrast * _lesion_profile(k, dist, radius)
        labels[k] = 1
        if rng.uniform() < spec.annotated_fraction:
            annotated[k] = 1
            footprint = (dist <= radius) & lung
            r0, r1, c0, c1 = _bbox(footprint)
            boxes.append(Box(k, c0, r0, c1, r1))

    if spec.noise_sigma > 0:
        img = img + rng.normal(0.0, spec.noise_sigma, size=img.shape)
    img = np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0
    sample = Sample(img, left, right, labels, annotated, boxes, sample_id=str(seed))
    sample.validate()
    return sample


def sample_seed(dataset_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([int(dataset_seed), int(index)]).generate_state(1, np.uint32)[0])


# ------------------------------------------------------------------------ PGM


def write_pgm(path: str | os.PathLike, pixels: np.ndarray) -> None:
    """Binary P5, maxval 255. Floats are taken as [0, 1], bools as {0, 255}."""
    arr = np.asarray(pixels)
    if arr.dtype == bool:
        data = arr.astype(np.uint8) * 255
    else:
        data = np.round(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    rows, cols = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{cols} {rows}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_pgm(path: str | os.PathLike) -> np.ndarray:
    """Return the raw 8-bit array of a binary PGM file."""
    raw = Path(path).read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if pos >= len(raw):
            raise DatasetError(f"{path}: truncated PGM header")
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    pos += 1
    if tokens[0] != b"P5":
        raise DatasetError(f"{path}: not a binary PGM (magic {tokens[0]!r})")
    try:
        cols, rows, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise DatasetError(f"{path}: corrupt PGM header") from exc
    if maxval != 255:
        raise DatasetError(f"{path}: only 8-bit PGM is supported (maxval {maxval})")
    body = raw[pos:pos + rows * cols]
    if len(body) != rows * cols:
        raise DatasetError(f"{path}: corrupt PGM, expected {rows * cols} bytes, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(rows, cols)


def _read_mask(path: Path) -> np.ndarray:
    raw = read_pgm(path)
    if not np.all((raw == 0) | (raw == 255)):
        raise DatasetError(f"{path}: mask is not binary")
    return raw == 255


# -------------------------------------------------------------------- dataset


@dataclass
class DatasetManifest:
    root: Path
    seed: int
    spec: SceneSpec
    entries: list[dict]

    def to_json(self) -> dict:
        return {
            "version": MANIFEST_VERSION,
            "seed": self.seed,
            "spec": self.spec.to_dict(),
            "samples": self.entries,
        }

    @property
    def path(self) -> Path:
        return self.root / "manifest.json"


def generate_dataset(
    spec: SceneSpec, n: int, seed: int, out_dir: str | os.PathLike, first_index: int = 0
) -> DatasetManifest:
    """Write samples ``first_index .. first_index + n - 1`` of dataset ``seed``.

    Disjoint index ranges of one seed give disjoint splits.
    """
    if n <= 0:
        raise ValueError("dataset size must be positive")
    root = Path(out_dir)
    try:
        root.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directory {root}: {exc}") from exc
    entries = []
    if first_index < 0:
        raise ValueError("first_index must be non-negative")
    for i in range(first_index, first_index + n):
        sid = f"{i:05d}"
        s = generate_sample(sample_seed(seed, i), spec)
        names = {"image": f"{sid}.pgm", "left_mask": f"{sid}_left.pgm", "right_mask": f"{sid}_right.pgm"}
        try:
            write_pgm(root / names["image"], s.image)
            write_pgm(root / names["left_mask"], s.left_mask)
            write_pgm(root / names["right_mask"], s.right_mask)
        except OSError as exc:
            raise OSError(f"cannot write sample {sid} under {root}: {exc}") from exc
        entries.append({
            "id": sid,
            **names,
            "labels": s.labels.tolist(),
            "lambda": s.annotated.tolist(),
            "boxes": [b.to_dict() for b in s.boxes],
        })
    manifest = DatasetManifest(root, int(seed), spec, entries)
    try:
        manifest.path.write_text(json.dumps(manifest.to_json(), indent=1) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write manifest {manifest.path}: {exc}") from exc
    return manifest


def read_manifest(path: str | os.PathLike) -> DatasetManifest:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DatasetError(f"cannot read manifest {path}: {exc}") from exc
    if doc.get("version") != MANIFEST_VERSION:
        raise DatasetError(f"{path}: unsupported manifest version {doc.get('version')!r}")
    return DatasetManifest(path.parent, int(doc["seed"]), SceneSpec.from_dict(doc["spec"]), doc["samples"])


def iter_dataset(manifest_path: str | os.PathLike) -> Iterator[Sample]:
    manifest = read_manifest(manifest_path)
    for entry in manifest.entries:
        sid = entry.get("id", "?")
        try:
            image = read_pgm(manifest.root / entry["image"]).astype(np.float64) / 255.0
            left = _read_mask(manifest.root / entry["left_mask"])
            right = _read_mask(manifest.root / entry["right_mask"])
            sample = Sample(
                image,
                left,
                right,
                np.asarray(entry["labels"], dtype=np.int64),
                np.asarray(entry["lambda"], dtype=np.int64),
                [Box.from_dict(b) for b in entry["boxes"]],
                sample_id=sid,
            )
        except FileNotFoundError as exc:
            raise DatasetError(f"sample {sid}: missing file {exc.filename}") from exc
        except (KeyError, TypeError) as exc:
            raise DatasetError(f"sample {sid}: malformed manifest entry ({exc})") from exc
        except DatasetError as exc:
            raise DatasetError(f"sample {sid}: {exc}") from exc
        if len(sample.labels) != manifest.spec.num_classes:
            raise DatasetError(f"sample {sid}: expected {manifest.spec.num_classes} labels")
        sample.validate()
        yield sample


def load_dataset(manifest_path: str | os.PathLike) -> list[Sample]:
    return list(iter_dataset(manifest_path))


# -------------------------------------------------------------------- batches


@dataclass(frozen=True)
class RegionHashes:
    """Lung hashes of one sample; the left lung is also hashed mirrored."""

    left: int
    right: int
    left_flipped: int


def region_hashes(sample: Sample) -> RegionHashes:
    return RegionHashes(
        left=phash.region_hash(sample.image, sample.left_mask),
        right=phash.region_hash(sample.image, sample.right_mask),
        left_flipped=phash.region_hash(sample.image[:, ::-1], sample.left_mask[:, ::-1]),
    )


@dataclass
class Batch:
    samples: list[Sample]
    hashes: list[RegionHashes]

    def __len__(self) -> int:
        return len(self.samples)


def make_batches(
    samples: Sequence[Sample],
    batch_size: int,
    shuffle_seed: int,
    hashes: Sequence[RegionHashes] | None = None,
) -> list[Batch]:
    """Seeded shuffle, then full batches only (a short tail is dropped)."""
    if batch_size < 2:
        raise ValueError("batch_size must be at least 2 so every batch has an image pair")
    if hashes is None:
        hashes = [region_hashes(s) for s in samples]
    elif len(hashes) != len(samples):
        raise ValueError("hashes must align with samples")
    order = np.random.default_rng(shuffle_seed).permutation(len(samples))
    batches = []
    for start in range(0, len(order) - batch_size + 1, batch_size):
        idx = order[start:start + batch_size]
        batches.append(Batch([samples[i] for i in idx], [hashes[i] for i in idx]))
    return batches
