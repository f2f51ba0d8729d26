"""Synthetic volumetric dataset: generation, normalization, and storage.

Each sample is a small 3-D intensity volume holding a soft "organ"
ellipsoid; positive samples additionally hold a smaller, brighter
"tumor" ellipsoid strictly inside the organ, whose voxels define the
ground-truth mask.  All samples carry an image-level label; only a
configurable subset of the positives is flagged as carrying usable
voxel masks (the partially supervised split).

Storage is a fixed little-endian binary layout (see ``save_sample``)
chosen to be trivially parseable from any language, plus a JSON
manifest describing the whole dataset.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    BadMagicError,
    DataFormatError,
    DimOverflowError,
    TruncatedFileError,
    UnsupportedVersionError,
)

MAGIC = b"IAGV"
FORMAT_VERSION = 1
# magic(4) + version(1) + three u32 dims(12) + label(1) + mask flag(1) + pad(2)
_HEADER = struct.Struct("<4sBIIIBBH")
HEADER_SIZE = _HEADER.size  # 21 bytes
_MAX_VOXELS = 2**28

# Intensity model of the generator.  Organ and tumor base intensities
# are drawn per sample from these bands; the bands overlap under noise,
# so segmentation is learnable but not a trivial global threshold.
ORGAN_INTENSITY = (0.40, 0.60)
TUMOR_INTENSITY = (0.65, 0.85)
NOISE_SIGMA = 0.05
TUMOR_VOLUME_FRACTION = (0.05, 0.15)
_EDGE_RAMP = 0.15
_MIN_DIM = 10

# Default CT-style truncation window for normalize_intensity.
INTENSITY_WINDOW = (-125.0, 350.0)


@dataclass
class VolumeSample:
    """One volume: intensities, ground-truth mask, and supervision flags.

    ``voxels`` is float32 in [0, 1] (the storage precision), z-major
    [D, H, W]; ``mask`` is uint8 of the same shape.  ``image_label`` is
    1 exactly when the mask is nonempty.  ``has_voxel_labels`` marks
    membership in the voxel-annotated training subset.
    """

    id: str
    voxels: np.ndarray
    mask: np.ndarray
    image_label: int
    has_voxel_labels: bool

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.voxels.shape)

    @property
    def depth(self) -> int:
        return self.voxels.shape[0]

    def validate(self) -> None:
        if self.voxels.shape != self.mask.shape:
            raise DataFormatError(
                f"{self.id}: voxels {self.voxels.shape} vs mask {self.mask.shape}"
            )
        if int(self.mask.any()) != int(self.image_label):
            raise DataFormatError(
                f"{self.id}: image label {self.image_label} inconsistent with mask"
            )


@dataclass
class ManifestEntry:
    id: str
    path: str
    image_label: int
    has_voxel_labels: bool


@dataclass
class DatasetManifest:
    version: int
    seed: int
    generator: dict
    samples: list[ManifestEntry] = field(default_factory=list)

    def counts(self) -> dict:
        labeled = sum(
            1 for s in self.samples if s.image_label == 1 and s.has_voxel_labels
        )
        unlabeled = sum(
            1 for s in self.samples if s.image_label == 1 and not s.has_voxel_labels
        )
        negatives = sum(1 for s in self.samples if s.image_label == 0)
        return {
            "labeled_positives": labeled,
            "unlabeled_positives": unlabeled,
            "negatives": negatives,
            "total": len(self.samples),
        }


def normalize_intensity(raw, lo: float = INTENSITY_WINDOW[0],
                        hi: float = INTENSITY_WINDOW[1]) -> np.ndarray:
    """Clamp raw intensities to [lo, hi] and map the window onto [0, 1]."""
    if lo >= hi:
        raise ValueError(f"normalize_intensity: need lo < hi, got [{lo}, {hi}]")
    arr = np.asarray(raw, dtype=np.float64)
    return (np.clip(arr, lo, hi) - lo) / (hi - lo)


def _ellipsoid_radius(dims, center, axes) -> np.ndarray:
    """Normalized radius field: r <= 1 inside the ellipsoid."""
    grids = np.ogrid[: dims[0], : dims[1], : dims[2]]
    r2 = np.zeros(dims, dtype=np.float64)
    for g, c, a in zip(grids, center, axes):
        r2 = r2 + ((g - c) / a) ** 2
    return np.sqrt(r2)


def _soft_ramp(radius: np.ndarray) -> np.ndarray:
    # Full intensity deep inside, linear fade to zero across the last
    # _EDGE_RAMP of the normalized radius.
    return np.clip((1.0 - radius) / _EDGE_RAMP, 0.0, 1.0)


def _build_volume(dims, positive: bool, rng: np.random.Generator):
    dims = np.asarray(dims, dtype=np.int64)
    center = dims / 2.0 + rng.uniform(-0.05, 0.05, size=3) * dims
    axes = rng.uniform(0.32, 0.42, size=3) * dims
    organ_base = rng.uniform(*ORGAN_INTENSITY)

    vox = organ_base * _soft_ramp(_ellipsoid_radius(dims, center, axes))
    mask = np.zeros(tuple(dims), dtype=np.uint8)

    if positive:
        frac = rng.uniform(*TUMOR_VOLUME_FRACTION)
        stretch = rng.uniform(-0.12, 0.12, size=3)
        stretch = np.exp(stretch - stretch.mean())  # volume-preserving jitter
        t_axes = frac ** (1.0 / 3.0) * stretch * axes
        # Offset in organ-normalized coordinates; the triangle inequality
        # keeps the whole tumor strictly inside the organ.
        reach = float(np.max(t_axes / axes))
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        offset = rng.uniform(0.0, max(0.0, 0.95 - reach)) * direction
        t_center = center + offset * axes
        t_radius = _ellipsoid_radius(dims, t_center, t_axes)
        mask = (t_radius <= 1.0).astype(np.uint8)
        tumor_base = rng.uniform(*TUMOR_INTENSITY)
        blend = _soft_ramp(t_radius)
        vox = vox * (1.0 - blend) + tumor_base * blend

    vox = vox + rng.normal(0.0, NOISE_SIGMA, size=tuple(dims))
    vox = np.clip(vox, 0.0, 1.0).astype(np.float32)
    return vox, mask


def synthesize_samples(n_pos: int, n_neg: int, n_labeled: int,
                       dims=(12, 24, 24), seed: int = 0,
                       id_prefix: str = "case") -> list[VolumeSample]:
    """Deterministically build ``n_pos`` positive then ``n_neg`` negative samples.

    The first ``n_labeled`` positives are flagged as carrying voxel
    labels.  Pure function of the arguments: equal inputs give equal
    samples bit for bit.
    """
    if min(dims) < _MIN_DIM:
        raise ValueError(
            f"dims {tuple(dims)} too small to fit organ and tumor blobs "
            f"(each extent must be >= {_MIN_DIM})"
        )
    if not 0 <= n_labeled <= n_pos:
        raise ValueError(f"n_labeled {n_labeled} outside [0, {n_pos}]")
    rng = np.random.default_rng(seed)
    samples = []
    for i in range(n_pos + n_neg):
        positive = i < n_pos
        vox, mask = _build_volume(dims, positive, rng)
        if positive and not mask.any():
            raise RuntimeError("generator produced an empty tumor mask")
        samples.append(
            VolumeSample(
                id=f"{id_prefix}_{i:04d}",
                voxels=vox,
                mask=mask,
                image_label=int(positive),
                has_voxel_labels=positive and i < n_labeled,
            )
        )
    return samples


def generate_dataset(out_dir, n: int, pos_frac: float, labeled_frac: float,
                     dims=(12, 24, 24), seed: int = 0) -> DatasetManifest:
    """Generate a dataset on disk: one .vol file per sample plus manifest.json."""
    if n < 2:
        raise ValueError(f"need at least 2 samples, got {n}")
    if not 0.0 < pos_frac < 1.0:
        raise ValueError(f"pos_frac must be in (0, 1), got {pos_frac}")
    if not 0.0 <= labeled_frac <= 1.0:
        raise ValueError(f"labeled_frac must be in [0, 1], got {labeled_frac}")
    n_pos = int(round(n * pos_frac))
    n_pos = min(max(n_pos, 1), n - 1)
    n_labeled = int(round(n_pos * labeled_frac))

    samples = synthesize_samples(n_pos, n - n_pos, n_labeled, dims=dims, seed=seed)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = DatasetManifest(
        version=FORMAT_VERSION,
        seed=seed,
        generator={
            "num_samples": n,
            "pos_frac": pos_frac,
            "labeled_frac": labeled_frac,
            "dims": list(dims),
        },
    )
    for s in samples:
        rel = f"{s.id}.vol"
        save_sample(s, out / rel)
        manifest.samples.append(
            ManifestEntry(s.id, rel, s.image_label, s.has_voxel_labels)
        )
    write_manifest(manifest, out / "manifest.json")
    return manifest


# ---------------------------------------------------------------------------
# binary sample format


def save_sample(sample: VolumeSample, path) -> None:
    """Write one sample: 21-byte header, f32 voxels (z-major), u8 mask."""
    sample.validate()
    d, h, w = sample.voxels.shape
    header = _HEADER.pack(
        MAGIC, FORMAT_VERSION, d, h, w,
        int(sample.image_label), int(sample.has_voxel_labels), 0,
    )
    with open(path, "wb") as f:
        f.write(header)
        f.write(np.ascontiguousarray(sample.voxels, dtype="<f4").tobytes())
        f.write(np.ascontiguousarray(sample.mask, dtype=np.uint8).tobytes())


def load_sample(path) -> VolumeSample:
    """Read one sample; the inverse of ``save_sample``, bit exact."""
    raw = Path(path).read_bytes()
    if len(raw) < HEADER_SIZE:
        raise TruncatedFileError(f"{path}: {len(raw)} bytes is smaller than a header")
    magic, version, d, h, w, label, labeled, _pad = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise BadMagicError(f"{path}: magic {magic!r} != {MAGIC!r}")
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"{path}: version {version}")
    if min(d, h, w) < 1 or d * h * w > _MAX_VOXELS:
        raise DimOverflowError(f"{path}: implausible dims {(d, h, w)}")
    count = d * h * w
    expected = HEADER_SIZE + 5 * count
    if len(raw) < expected:
        raise TruncatedFileError(f"{path}: {len(raw)} bytes, expected {expected}")
    if len(raw) > expected:
        raise DataFormatError(f"{path}: {len(raw) - expected} trailing bytes")
    vox = np.frombuffer(raw, dtype="<f4", count=count, offset=HEADER_SIZE)
    mask = np.frombuffer(raw, dtype=np.uint8, count=count,
                         offset=HEADER_SIZE + 4 * count)
    sample = VolumeSample(
        id=Path(path).stem,
        voxels=vox.reshape(d, h, w).copy(),
        mask=mask.reshape(d, h, w).copy(),
        image_label=int(label),
        has_voxel_labels=bool(labeled),
    )
    sample.validate()
    return sample


# ---------------------------------------------------------------------------
# manifest


def write_manifest(manifest: DatasetManifest, path) -> None:
    doc = {
        "version": manifest.version,
        "seed": manifest.seed,
        "generator": manifest.generator,
        "samples": [
            {
                "id": s.id,
                "path": s.path,
                "image_label": s.image_label,
                "has_voxel_labels": s.has_voxel_labels,
            }
            for s in manifest.samples
        ],
    }
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def read_manifest(path) -> DatasetManifest:
    doc = json.loads(Path(path).read_text())
    if doc.get("version") != FORMAT_VERSION:
        raise UnsupportedVersionError(f"{path}: manifest version {doc.get('version')}")
    manifest = DatasetManifest(
        version=doc["version"], seed=doc["seed"], generator=doc["generator"]
    )
    seen = set()
    for rec in doc["samples"]:
        if rec["id"] in seen:
            raise DataFormatError(f"{path}: duplicate sample id {rec['id']}")
        seen.add(rec["id"])
        manifest.samples.append(
            ManifestEntry(
                rec["id"], rec["path"], int(rec["image_label"]),
                bool(rec["has_voxel_labels"]),
            )
        )
    return manifest


def load_dataset(data_dir) -> list[VolumeSample]:
    """Load every sample listed by the manifest in ``data_dir``."""
    root = Path(data_dir)
    manifest = read_manifest(root / "manifest.json")
    samples = []
    for entry in manifest.samples:
        sample = load_sample(root / entry.path)
        sample.id = entry.id
        if sample.image_label != entry.image_label:
            raise DataFormatError(f"{entry.id}: label disagrees with manifest")
        if sample.has_voxel_labels != entry.has_voxel_labels:
            raise DataFormatError(f"{entry.id}: mask flag disagrees with manifest")
        samples.append(sample)
    return samples
