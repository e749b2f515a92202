"""
Data Pipeline - volumes, slices and phantom datasets

Loads preprocessed volumetric data from the portable container format,
applies modality-specific intensity preprocessing, slices volumes into
[0,1] image grids and generates deterministic phantom datasets whose
healthy ground truth is known exactly.

Container layout (one directory per volume):
    <volume_dir>/meta.json       {id, shape, encoding, offset, scale, spacing, kind}
    <volume_dir>/slice_000.png   16-bit grayscale slices

`unit` encoding stores q/65535 values in [0,1] and round-trips bit-exactly;
`affine` encoding stores raw intensities as offset + scale * q.
"""

import json
import logging
import math
import os
from fractions import Fraction
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Literal, Optional, Sequence, Tuple

import numpy as np
from PIL import Image
from pydantic import BaseModel, Field, ValidationError, model_validator

from .errors import DatasetLoadError, GenerationError, InvalidConfigError, InvalidInputError

logger = logging.getLogger(__name__)

Q_MAX = 65535
MR_PERCENTILE = 0.995
CT_WINDOW = (-200.0, 250.0)


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ImageGrid:
    """A single-channel 2D intensity grid with every pixel in [0,1]."""
    pixels: np.ndarray

    def __post_init__(self):
        pixels = np.asarray(self.pixels, dtype=np.float32)
        if pixels.ndim != 2 or pixels.size == 0:
            raise InvalidInputError(f"ImageGrid must be a non-empty 2D array, got shape {pixels.shape}")
        if not np.all(np.isfinite(pixels)):
            raise InvalidInputError("ImageGrid contains non-finite pixels")
        if pixels.min() < 0.0 or pixels.max() > 1.0:
            raise InvalidInputError(
                f"ImageGrid pixels must lie in [0,1], got [{pixels.min():.4f}, {pixels.max():.4f}]"
            )
        object.__setattr__(self, "pixels", pixels)

    @property
    def height(self) -> int:
        return int(self.pixels.shape[0])

    @property
    def width(self) -> int:
        return int(self.pixels.shape[1])

    @property
    def shape(self) -> Tuple[int, int]:
        return self.pixels.shape


@dataclass(frozen=True)
class LesionMask:
    """Binary per-pixel lesion annotation (0 normal, 1 pathological)."""
    pixels: np.ndarray

    def __post_init__(self):
        raw = np.asarray(self.pixels)
        if raw.ndim != 2 or raw.size == 0:
            raise InvalidInputError(f"LesionMask must be a non-empty 2D array, got shape {raw.shape}")
        if not np.all((raw == 0) | (raw == 1)):
            raise InvalidInputError("LesionMask values must be exactly 0 or 1")
        object.__setattr__(self, "pixels", raw.astype(np.uint8))

    @property
    def shape(self) -> Tuple[int, int]:
        return self.pixels.shape

    @classmethod
    def zeros(cls, shape: Tuple[int, int]) -> "LesionMask":
        return cls(np.zeros(shape, dtype=np.uint8))


@dataclass(frozen=True)
class Sample:
    id: str
    image: ImageGrid
    mask: LesionMask
    healthy_truth: Optional[ImageGrid] = None

    def __post_init__(self):
        if self.image.shape != self.mask.shape:
            raise InvalidInputError(
                f"Sample {self.id}: image {self.image.shape} and mask {self.mask.shape} differ",
                sample_id=self.id,
            )
        if self.healthy_truth is not None and self.healthy_truth.shape != self.image.shape:
            raise InvalidInputError(
                f"Sample {self.id}: healthy_truth {self.healthy_truth.shape} differs from image",
                sample_id=self.id,
            )


@dataclass(frozen=True)
class Volume:
    """A raw 3D intensity volume (slices along axis 0) in arbitrary physical units."""
    voxels: np.ndarray
    id: str = "volume"
    spacing: Tuple[float, ...] = field(default=(1.0, 1.0, 1.0))

    def __post_init__(self):
        voxels = np.asarray(self.voxels, dtype=np.float64)
        if voxels.ndim == 2:
            voxels = voxels[np.newaxis]
        if voxels.ndim != 3 or voxels.size == 0:
            raise InvalidInputError(f"Volume {self.id} must be a non-empty 3D array, got shape {voxels.shape}")
        if not np.all(np.isfinite(voxels)):
            raise InvalidInputError(f"Volume {self.id} contains non-finite voxels")
        object.__setattr__(self, "voxels", voxels)

    def with_voxels(self, voxels: np.ndarray) -> "Volume":
        return Volume(voxels=voxels, id=self.id, spacing=self.spacing)

    @property
    def num_slices(self) -> int:
        return int(self.voxels.shape[0])


# ---------------------------------------------------------------------------
# Intensity preprocessing
# ---------------------------------------------------------------------------

def nearest_rank_quantile(values: np.ndarray, p: float) -> float:
    """Nearest-rank quantile: the ceil(p*n)-th smallest value."""
    flat = np.sort(np.asarray(values, dtype=np.float64).ravel())
    # exact rank: float p*n can land just above an integer (0.55 * 100)
    rank = max(1, math.ceil(Fraction(str(p)) * flat.size))
    return float(flat[rank - 1])


def clip_percentile(v: Volume, p: float = MR_PERCENTILE) -> Volume:
    """Clip a volume to [0, V_p], with V_p computed over the whole volume."""
    if v.voxels.size == 0:
        raise InvalidInputError("clip_percentile: empty volume")
    if not 0.0 < p <= 1.0:
        raise InvalidInputError(f"clip_percentile: p must be in (0, 1], got {p}")
    q = nearest_rank_quantile(v.voxels, p)
    return v.with_voxels(np.maximum(np.minimum(v.voxels, q), 0.0))


def clamp_range(v: Volume, lo: float, hi: float) -> Volume:
    if lo >= hi:
        raise InvalidConfigError(f"clamp_range: lo ({lo}) must be < hi ({hi})", lo=lo, hi=hi)
    return v.with_voxels(np.clip(v.voxels, lo, hi))


def normalize_minmax(v: Volume) -> List[ImageGrid]:
    """Per-volume min-max scaling to [0,1]; a flat volume maps to all zeros."""
    voxels = v.voxels
    vmin, vmax = float(voxels.min()), float(voxels.max())
    if vmax == vmin:
        scaled = np.zeros_like(voxels)
    else:
        scaled = np.clip((voxels - vmin) / (vmax - vmin), 0.0, 1.0)
    return [ImageGrid(scaled[k].astype(np.float32)) for k in range(scaled.shape[0])]


def preprocess_volume(v: Volume, modality: str) -> List[ImageGrid]:
    if modality == "MR":
        return normalize_minmax(clip_percentile(v, MR_PERCENTILE))
    if modality == "CT":
        return normalize_minmax(clamp_range(v, *CT_WINDOW))
    if modality == "PHANTOM":
        return [ImageGrid(v.voxels[k].astype(np.float32)) for k in range(v.num_slices)]
    raise InvalidConfigError(f"Unknown modality: {modality}", modality=modality)


def select_slices(images: Sequence[ImageGrid], masks: Sequence[LesionMask]) -> List[int]:
    """Indices of slices where the anatomy or the lesion mask is non-empty."""
    return [
        k for k, (image, mask) in enumerate(zip(images, masks))
        if image.pixels.any() or mask.pixels.any()
    ]


# ---------------------------------------------------------------------------
# Portable container I/O
# ---------------------------------------------------------------------------

def _encode_unit(pixels: np.ndarray) -> np.ndarray:
    return np.rint(np.asarray(pixels, dtype=np.float64) * Q_MAX).astype(np.uint16)


def _decode_unit(q: np.ndarray) -> np.ndarray:
    return q.astype(np.float32) / np.float32(Q_MAX)


def write_volume(
    voxels: np.ndarray,
    out_dir: str,
    volume_id: str,
    kind: Literal["image", "mask"] = "image",
    encoding: Literal["unit", "affine"] = "unit",
    spacing: Tuple[float, ...] = (1.0, 1.0, 1.0),
) -> str:
    """Write a 2D or 3D array as a container directory and return its path."""
    data = np.asarray(voxels)
    if data.ndim == 2:
        data = data[np.newaxis]
    os.makedirs(out_dir, exist_ok=True)

    offset, scale = 0.0, 1.0 / Q_MAX
    if kind == "mask":
        encoding = "unit"
        quantized = data.astype(np.uint16)
        scale = 1.0
    elif encoding == "unit":
        quantized = _encode_unit(data)
    else:
        offset = float(data.min())
        span = float(data.max()) - offset
        scale = span / Q_MAX if span > 0 else 1.0
        quantized = np.rint((data.astype(np.float64) - offset) / scale).astype(np.uint16)

    for k in range(quantized.shape[0]):
        Image.fromarray(quantized[k]).save(os.path.join(out_dir, f"slice_{k:03d}.png"))

    meta = {
        "id": volume_id,
        "shape": list(quantized.shape),
        "encoding": encoding,
        "offset": offset,
        "scale": scale,
        "spacing": list(spacing),
        "kind": kind,
    }
    with open(os.path.join(out_dir, "meta.json"), "w") as f:
        json.dump(meta, f, indent=2)
    return out_dir


def read_volume(volume_dir: str) -> Tuple[np.ndarray, Dict]:
    """Read a container directory; returns (array, meta). Masks come back as uint8."""
    with open(os.path.join(volume_dir, "meta.json"), "r") as f:
        meta = json.load(f)
    depth = int(meta["shape"][0])
    slices = []
    for k in range(depth):
        with Image.open(os.path.join(volume_dir, f"slice_{k:03d}.png")) as img:
            slices.append(np.array(img).astype(np.uint16))
    q = np.stack(slices)
    if list(q.shape) != list(meta["shape"]):
        raise InvalidInputError(f"{volume_dir}: stored shape {q.shape} differs from meta {meta['shape']}")

    if meta.get("kind") == "mask":
        return q.astype(np.uint8), meta
    if meta["encoding"] == "unit":
        return _decode_unit(q), meta
    return meta["offset"] + meta["scale"] * q.astype(np.float64), meta


def write_grid(grid: ImageGrid, out_dir: str, grid_id: str) -> str:
    return write_volume(grid.pixels, out_dir, grid_id, kind="image", encoding="unit")


def write_scaled_grid(pixels: np.ndarray, out_dir: str, grid_id: str) -> str:
    """Write a non-negative map with its own float scale factor (difference maps)."""
    return write_volume(pixels, out_dir, grid_id, kind="image", encoding="affine")


# ---------------------------------------------------------------------------
# Manifest
# ---------------------------------------------------------------------------

class ManifestEntry(BaseModel):
    id: str
    image: str
    mask: str
    healthy_truth: Optional[str] = None
    split: Literal["train", "test"] = "train"


class DatasetManifest(BaseModel):
    modality: Literal["MR", "CT", "PHANTOM"]
    entries: List[ManifestEntry] = Field(default_factory=list)
    root: str = ""

    @model_validator(mode="after")
    def _unique_ids(self) -> "DatasetManifest":
        seen = set()
        for entry in self.entries:
            if entry.id in seen:
                raise ValueError(f"duplicate entry id: {entry.id}")
            seen.add(entry.id)
        return self

    def resolve(self, path: str) -> str:
        return path if os.path.isabs(path) else os.path.join(self.root, path)

    def split(self, split: Optional[str]) -> "DatasetManifest":
        entries = [e for e in self.entries if split is None or e.split == split]
        return DatasetManifest(modality=self.modality, entries=entries, root=self.root)

    def to_json(self) -> Dict:
        return self.model_dump(exclude={"root"})


def load_manifest(path: str, check_paths: bool = True) -> DatasetManifest:
    """Read a manifest JSON; relative entry paths resolve against its directory."""
    try:
        with open(path, "r") as f:
            data = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise InvalidInputError(f"Cannot read manifest {path}: {e}", path=path) from e
    data["root"] = os.path.dirname(os.path.abspath(path))
    try:
        manifest = DatasetManifest.model_validate(data)
    except ValidationError as e:
        raise InvalidConfigError(f"Invalid manifest {path}: {e.errors()[0]['msg']}", path=path) from e

    if check_paths:
        missing = [
            (entry.id, p)
            for entry in manifest.entries
            for p in (entry.image, entry.mask, entry.healthy_truth)
            if p is not None and not os.path.isdir(manifest.resolve(p))
        ]
        if missing:
            raise InvalidInputError(
                f"Manifest {path} references {len(missing)} missing paths",
                missing=[f"{eid}: {p}" for eid, p in missing[:10]],
            )
    return manifest


def save_manifest(manifest: DatasetManifest, path: str) -> str:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w") as f:
        json.dump(manifest.to_json(), f, indent=2)
    return path


def _load_entry(manifest: DatasetManifest, entry: ManifestEntry) -> List[Sample]:
    try:
        raw, image_meta = read_volume(manifest.resolve(entry.image))
        mask_raw, _ = read_volume(manifest.resolve(entry.mask))
        if raw.shape != mask_raw.shape:
            raise InvalidInputError(f"image shape {raw.shape} != mask shape {mask_raw.shape}")

        spacing = tuple(image_meta.get("spacing", (1.0, 1.0, 1.0)))
        images = preprocess_volume(Volume(raw, id=entry.id, spacing=spacing), manifest.modality)
        masks = [LesionMask(mask_raw[k]) for k in range(mask_raw.shape[0])]

        healthy: List[Optional[ImageGrid]] = [None] * len(images)
        if entry.healthy_truth is not None:
            healthy_raw, _ = read_volume(manifest.resolve(entry.healthy_truth))
            if healthy_raw.shape != raw.shape:
                raise InvalidInputError(f"healthy_truth shape {healthy_raw.shape} != image shape {raw.shape}")
            healthy = preprocess_volume(Volume(healthy_raw, id=entry.id), manifest.modality)

        if len(images) == 1:
            return [Sample(entry.id, images[0], masks[0], healthy[0])]
        return [
            Sample(f"{entry.id}/{k:03d}", images[k], masks[k], healthy[k])
            for k in select_slices(images, masks)
        ]
    except DatasetLoadError:
        raise
    except Exception as e:
        raise DatasetLoadError(f"Failed to load entry {entry.id}: {e}", entry_id=entry.id) from e


def load_dataset(
    manifest: DatasetManifest,
    split: Optional[str] = None,
    seed: Optional[int] = None,
    workers: int = 1,
) -> Iterator[Sample]:
    """
    Stream Samples in manifest order, or in a seed-determined shuffled order.

    Entries are decoded in parallel when workers > 1; the yielded order is
    unaffected by the worker count.
    """
    entries = manifest.split(split).entries
    if seed is not None:
        order = np.random.default_rng(seed).permutation(len(entries))
        entries = [entries[i] for i in order]

    if workers > 1 and len(entries) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            for samples in pool.map(lambda e: _load_entry(manifest, e), entries):
                yield from samples
    else:
        for entry in entries:
            yield from _load_entry(manifest, entry)


def write_dataset(
    samples: Sequence[Sample],
    out_dir: str,
    modality: str = "PHANTOM",
    test_fraction: float = 0.0,
) -> str:
    """
    Write samples as a PHANTOM-style dataset and return the manifest path.

    The last round(test_fraction * N) samples are tagged `test`.
    """
    os.makedirs(out_dir, exist_ok=True)
    n_test = int(round(test_fraction * len(samples)))
    entries = []
    for i, sample in enumerate(samples):
        base = os.path.join("samples", sample.id.replace("/", "_"))
        write_grid(sample.image, os.path.join(out_dir, base, "image"), sample.id)
        write_volume(sample.mask.pixels, os.path.join(out_dir, base, "mask"), sample.id, kind="mask")
        healthy_path = None
        if sample.healthy_truth is not None:
            healthy_path = os.path.join(base, "healthy")
            write_grid(sample.healthy_truth, os.path.join(out_dir, healthy_path), sample.id)
        entries.append(ManifestEntry(
            id=sample.id,
            image=os.path.join(base, "image"),
            mask=os.path.join(base, "mask"),
            healthy_truth=healthy_path,
            split="test" if i >= len(samples) - n_test else "train",
        ))
    manifest = DatasetManifest(modality=modality, entries=entries, root=out_dir)
    path = save_manifest(manifest, os.path.join(out_dir, "manifest.json"))
    logger.info(f"💾 Wrote {len(samples)} samples ({n_test} test) to {out_dir}")
    return path


def check_grid_shapes(grids: Sequence) -> None:
    """Batch members (ImageGrid or LesionMask) must share one shape."""
    shapes = {tuple(g.pixels.shape) for g in grids}
    if len(shapes) > 1:
        raise InvalidInputError(f"Image shapes differ within a batch: {sorted(shapes)}")


def stack_images(grids: Sequence[ImageGrid]) -> np.ndarray:
    """(N, 1, H, W) float32 batch."""
    check_grid_shapes(grids)
    return np.stack([g.pixels for g in grids])[:, np.newaxis].astype(np.float32)


def stack_masks(masks: Sequence[LesionMask]) -> np.ndarray:
    """(N, H, W) int64 class-index batch."""
    check_grid_shapes(masks)
    return np.stack([m.pixels for m in masks]).astype(np.int64)


# ---------------------------------------------------------------------------
# Phantom generator
# ---------------------------------------------------------------------------

def _smoothstep(t: np.ndarray) -> np.ndarray:
    t = np.clip(t, 0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)


def _ellipse_radius(yy, xx, cy, cx, ry, rx, theta) -> np.ndarray:
    """Normalized elliptical radius; <= 1 inside the ellipse."""
    dy, dx = yy - cy, xx - cx
    u = dy * np.cos(theta) + dx * np.sin(theta)
    v = -dy * np.sin(theta) + dx * np.cos(theta)
    return np.sqrt((u / ry) ** 2 + (v / rx) ** 2)


def _phantom_anatomy(rng: np.random.Generator, h: int, w: int, noise_std: float):
    yy, xx = np.meshgrid(np.linspace(-1.0, 1.0, h), np.linspace(-1.0, 1.0, w), indexing="ij")
    edge = 0.15

    cy, cx = rng.uniform(-0.08, 0.08, size=2)
    ry, rx = rng.uniform(0.62, 0.82, size=2)
    theta = rng.uniform(0.0, np.pi)
    organ_r = _ellipse_radius(yy, xx, cy, cx, ry, rx, theta)
    organ = _smoothstep((1.0 - organ_r) / edge)
    core = organ_r <= 1.0 - 2 * edge

    healthy = rng.uniform(0.35, 0.5) * organ
    for _ in range(int(rng.integers(2, 5))):
        sy, sx = rng.uniform(0.12, 0.3, size=2)
        oy, ox = rng.uniform(-0.35, 0.35, size=2)
        r = _ellipse_radius(yy, xx, cy + oy * ry, cx + ox * rx, sy, sx, rng.uniform(0.0, np.pi))
        healthy = healthy + rng.uniform(-0.12, 0.2) * _smoothstep((1.0 - r) / 0.4) * organ

    if noise_std > 0:
        healthy = healthy + rng.normal(0.0, noise_std, size=healthy.shape) * (organ > 0)
    healthy = np.clip(healthy, 0.0, 0.75) * (organ > 0)
    return yy, xx, (cy, cx, ry, rx, theta), core, healthy


def _place_lesion(rng, yy, xx, organ_params, core, lesion_radius, max_attempts=200) -> np.ndarray:
    cy, cx, ry, rx, _ = organ_params
    for _ in range(max_attempts):
        if lesion_radius is None:
            ly, lx = rng.uniform(0.07, 0.16, size=2)
        else:
            ly = lx = float(lesion_radius)
        py = cy + rng.uniform(-1.0, 1.0) * ry
        px = cx + rng.uniform(-1.0, 1.0) * rx
        lesion = _ellipse_radius(yy, xx, py, px, ly, lx, rng.uniform(0.0, np.pi)) <= 1.0
        if lesion.sum() >= 4 and np.all(core[lesion]):
            return lesion
    raise GenerationError(
        f"Could not place a lesion inside the anatomy after {max_attempts} attempts",
        lesion_radius=lesion_radius,
    )


def make_phantom(
    seed: int,
    size: Tuple[int, int] = (64, 64),
    count: int = 1,
    lesion_amp: float = 0.3,
    lesion_sign: int = 1,
    max_lesions: int = 2,
    noise_std: float = 0.0,
    lesion_radius: Optional[float] = None,
) -> List[Sample]:
    """
    Generate `count` phantom samples with known healthy ground truth.

    Anatomy is a soft organ ellipse with inner structures on a zero
    background. One to `max_lesions` elliptical lesions sit inside the organ
    core; lesion pixels are shifted by `lesion_amp` (sign `lesion_sign`) in the
    16-bit domain and re-clamped, every other pixel equals the healthy truth.
    Each sample draws from its own child of SeedSequence(seed).
    """
    h, w = size
    if h < 32 or w < 32:
        raise InvalidInputError(f"make_phantom: size must be at least 32x32, got {h}x{w}")
    if count < 1:
        raise InvalidInputError(f"make_phantom: count must be >= 1, got {count}")
    if not 0.0 <= lesion_amp <= 1.0:
        raise InvalidInputError(f"make_phantom: lesion_amp must be in [0,1], got {lesion_amp}")
    if lesion_sign not in (1, -1):
        raise InvalidInputError(f"make_phantom: lesion_sign must be +1 or -1, got {lesion_sign}")

    q_shift = max(1, int(round(lesion_amp * Q_MAX))) if lesion_amp > 0 else 0
    samples = []
    for i, child in enumerate(np.random.SeedSequence(seed).spawn(count)):
        rng = np.random.default_rng(child)
        yy, xx, organ_params, core, healthy = _phantom_anatomy(rng, h, w, noise_std)

        lesion = np.zeros((h, w), dtype=bool)
        for _ in range(int(rng.integers(1, max_lesions + 1))):
            lesion |= _place_lesion(rng, yy, xx, organ_params, core, lesion_radius)

        q_healthy = _encode_unit(healthy).astype(np.int64)
        q_image = q_healthy.copy()
        q_image[lesion] = np.clip(q_healthy[lesion] + lesion_sign * q_shift, 0, Q_MAX)

        samples.append(Sample(
            id=f"phantom_{seed}_{i:04d}",
            image=ImageGrid(_decode_unit(q_image.astype(np.uint16))),
            mask=LesionMask(lesion.astype(np.uint8)),
            healthy_truth=ImageGrid(_decode_unit(q_healthy.astype(np.uint16))),
        ))

    logger.debug(f"🧪 Generated {count} phantoms (seed={seed}, size={h}x{w}, amp={lesion_amp})")
    return samples
