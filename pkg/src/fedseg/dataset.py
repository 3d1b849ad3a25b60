"""Image/mask ingestion, augmentation, synthetic plates and crop export."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import ConfigError, ManifestError
from .io import atomic_write_bytes, atomic_write_text

SPLITS = ("train", "test")


@dataclass
class ImageSample:
    image: np.ndarray  # H x W x 3 float32
    mask: np.ndarray  # H x W x 3 float32 in {0, 1}
    id: str = ""

    def __post_init__(self):
        if self.image.shape[:2] != self.mask.shape[:2]:
            raise ValueError(f"image {self.image.shape} and mask {self.mask.shape} differ in size")


@dataclass(frozen=True)
class ManifestRecord:
    image_path: Path
    mask_path: Path
    split: str
    id: str


@dataclass
class DatasetManifest:
    records: list[ManifestRecord] = field(default_factory=list)
    stats: "DatasetStats | None" = None

    def __len__(self) -> int:
        return len(self.records)

    def split(self, name: str) -> list[ManifestRecord]:
        return [r for r in self.records if r.split == name]

    def check_files(self) -> list[str]:
        """Try decoding every referenced file; returns one message per failure."""
        problems = []
        for r in self.records:
            for p in (r.image_path, r.mask_path):
                try:
                    with Image.open(p) as im:
                        im.verify()
                except Exception as exc:  # noqa: BLE001 - PIL raises many types
                    problems.append(f"{r.id}: cannot decode {p}: {exc}")
        return problems


def load_manifest(path: str | Path) -> DatasetManifest:
    """Read a JSON-lines manifest.  Relative paths resolve against its directory."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    root = path.parent
    records: list[ManifestRecord] = []
    seen_ids: set[str] = set()
    seen_paths: set[Path] = set()
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"invalid JSON ({exc.msg})", lineno) from None
            if not isinstance(obj, dict):
                raise ManifestError("expected a JSON object", lineno)
            missing = [k for k in ("image_path", "mask_path", "split") if k not in obj]
            if missing:
                raise ManifestError(f"missing field(s) {', '.join(missing)}", lineno)
            split = obj["split"]
            if split not in SPLITS:
                raise ManifestError(f"unknown split {split!r} (expected one of {', '.join(SPLITS)})", lineno)
            image_path = root / obj["image_path"]
            mask_path = root / obj["mask_path"]
            rid = str(obj.get("id") or Path(obj["image_path"]).stem)
            if rid in seen_ids:
                raise ManifestError(f"duplicate id {rid!r}", lineno)
            if image_path in seen_paths:
                raise ManifestError(f"duplicate image path {obj['image_path']!r}", lineno)
            seen_ids.add(rid)
            seen_paths.add(image_path)
            records.append(ManifestRecord(image_path, mask_path, split, rid))
    return DatasetManifest(records)


def write_manifest(path: str | Path, records: Iterable[dict]) -> None:
    text = "".join(json.dumps(r, sort_keys=True) + "\n" for r in records)
    atomic_write_text(Path(path), text)


def resize_nearest(arr: np.ndarray, h: int, w: int) -> np.ndarray:
    """Nearest-neighbour resize sampling source pixel floor((i + 0.5) * scale)."""
    sh, sw = arr.shape[:2]
    rows = np.minimum(((np.arange(h) + 0.5) * sh / h).astype(int), sh - 1)
    cols = np.minimum(((np.arange(w) + 0.5) * sw / w).astype(int), sw - 1)
    return arr[rows][:, cols]


def load_sample(record: ManifestRecord, target_h: int, target_w: int) -> ImageSample:
    """Decode, resize and scale one image/mask pair.

    The image is bilinearly resized and scaled to [0, 1]; the mask is
    nearest-neighbour resized and thresholded at half intensity.
    """
    if target_h <= 0 or target_w <= 0:
        raise ValueError("target size must be positive")
    try:
        with Image.open(record.image_path) as im:
            im = im.convert("RGB")
            if im.size != (target_w, target_h):
                im = im.resize((target_w, target_h), Image.BILINEAR)
            image = np.asarray(im, dtype=np.float32) / np.float32(255)
        with Image.open(record.mask_path) as mk:
            mask_raw = np.asarray(mk.convert("L"), dtype=np.float32) / np.float32(255)
    except OSError as exc:
        raise OSError(f"{record.id}: cannot decode: {exc}") from exc
    if mask_raw.size == 0 or image.size == 0:
        raise ValueError(f"{record.id}: zero-sized image")
    mask = (resize_nearest(mask_raw, target_h, target_w) >= 0.5).astype(np.float32)
    return ImageSample(image, np.repeat(mask[..., None], 3, axis=-1), record.id)


def load_split(manifest: DatasetManifest, split: str, h: int, w: int) -> list[ImageSample]:
    return [load_sample(r, h, w) for r in manifest.split(split)]


# --------------------------------------------------------------------------- stats


@dataclass(frozen=True)
class DatasetStats:
    mean: tuple[float, ...]
    std: tuple[float, ...]

    def to_json(self) -> str:
        return json.dumps({"mean": list(self.mean), "std": list(self.std)}, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "DatasetStats":
        obj = json.loads(text)
        return cls(tuple(float(v) for v in obj["mean"]), tuple(float(v) for v in obj["std"]))

    def save(self, path: str | Path) -> None:
        atomic_write_text(Path(path), self.to_json())

    @classmethod
    def load(cls, path: str | Path) -> "DatasetStats":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


def compute_stats(samples: Sequence[ImageSample]) -> DatasetStats:
    """Per-channel mean/std over every pixel of every image."""
    if not samples:
        raise ValueError("cannot compute statistics of an empty dataset")
    stack = np.stack([s.image for s in samples]).astype(np.float64)
    flat = stack.reshape(-1, stack.shape[-1])
    return DatasetStats(tuple(flat.mean(axis=0)), tuple(flat.std(axis=0)))


# --------------------------------------------------------------------------- augmentation


@dataclass(frozen=True)
class AugmentConfig:
    rescale: float = 1 / 255
    width_shift_range: float = 0.1
    height_shift_range: float = 0.1
    featurewise_center: bool = True
    featurewise_std_normalization: bool = True
    copies: int = 1
    seed: int = 0

    def validate(self) -> None:
        for name in ("width_shift_range", "height_shift_range"):
            v = getattr(self, name)
            if not 0 <= v <= 0.5:
                raise ConfigError(f"{name} must lie in [0, 0.5], got {v}")
        if self.copies < 0:
            raise ConfigError("copies must be non-negative")


STD_EPSILON = 1e-6


def shift(arr: np.ndarray, dy: int, dx: int) -> np.ndarray:
    """Translate by (dy, dx) pixels, filling vacated cells with 0."""
    out = np.zeros_like(arr)
    h, w = arr.shape[:2]
    if abs(dy) >= h or abs(dx) >= w:
        return out
    src_y = slice(max(0, -dy), h - max(0, dy))
    dst_y = slice(max(0, dy), h - max(0, -dy))
    src_x = slice(max(0, -dx), w - max(0, dx))
    dst_x = slice(max(0, dx), w - max(0, -dx))
    out[dst_y, dst_x] = arr[src_y, src_x]
    return out


def standardize(sample: ImageSample, config: AugmentConfig, stats: DatasetStats | None) -> ImageSample:
    """Apply feature-wise centering / std normalization to the image only."""
    if not (config.featurewise_center or config.featurewise_std_normalization):
        return sample
    if stats is None:
        raise ConfigError("feature-wise normalization requested but dataset statistics are missing")
    img = sample.image
    if config.featurewise_center:
        img = img - np.asarray(stats.mean, dtype=img.dtype)
    if config.featurewise_std_normalization:
        img = img / (np.asarray(stats.std, dtype=img.dtype) + img.dtype.type(STD_EPSILON))
    return replace(sample, image=img.astype(np.float32))


def augment(
    sample: ImageSample,
    config: AugmentConfig,
    rng: np.random.Generator,
    stats: DatasetStats | None = None,
    offset: tuple[int, int] | None = None,
) -> ImageSample:
    """Standardize the image, then shift image and mask by the same offset.

    The offset is drawn uniformly from ``±range * extent`` (integers) unless
    given explicitly.
    """
    out = standardize(sample, config, stats)
    h, w = sample.image.shape[:2]
    if offset is None:
        my = int(round(config.height_shift_range * h))
        mx = int(round(config.width_shift_range * w))
        dy = int(rng.integers(-my, my + 1)) if my else 0
        dx = int(rng.integers(-mx, mx + 1)) if mx else 0
    else:
        dy, dx = offset
    if dy == 0 and dx == 0:
        return out
    return ImageSample(shift(out.image, dy, dx), shift(out.mask, dy, dx), out.id)


def prepare_training_set(
    samples: Sequence[ImageSample],
    config: AugmentConfig,
    stats: DatasetStats | None,
    rng: np.random.Generator,
) -> list[ImageSample]:
    """Standardized originals followed by ``config.copies`` shifted copies each."""
    out = [standardize(s, config, stats) for s in samples]
    for k in range(config.copies):
        for s in samples:
            aug = augment(s, config, rng, stats)
            out.append(replace(aug, id=f"{s.id}~aug{k}"))
    return out


# --------------------------------------------------------------------------- synthetic


def _smooth_noise(h: int, w: int, rng: np.random.Generator, cells: int) -> np.ndarray:
    coarse = rng.random((cells + 1, cells + 1))
    ys = np.linspace(0, cells, h)
    xs = np.linspace(0, cells, w)
    return ndimage.map_coordinates(coarse, np.meshgrid(ys, xs, indexing="ij"), order=1)


def render_plate(
    h: int,
    w: int,
    plate_h: int,
    plate_w: int,
    angle: float,
    center: tuple[float, float],
    rng: np.random.Generator,
    sample_id: str = "",
) -> ImageSample:
    """Draw one textured scene with a rotated bright plate and glyph strokes.

    ``center`` is in continuous pixel coordinates (pixel ``i`` spans
    ``[i, i + 1)``); ``angle`` is in degrees.
    """
    if plate_h <= 0 or plate_w <= 0:
        raise ValueError("plate extents must be positive")
    theta = math.radians(angle)
    c, s = math.cos(theta), math.sin(theta)
    bbox_h = abs(plate_h * c) + abs(plate_w * s)
    bbox_w = abs(plate_w * c) + abs(plate_h * s)
    cy, cx = center
    if bbox_h > h or bbox_w > w or cy - bbox_h / 2 < -1e-9 or cx - bbox_w / 2 < -1e-9 \
            or cy + bbox_h / 2 > h + 1e-9 or cx + bbox_w / 2 > w + 1e-9:
        raise ValueError(f"plate {plate_h}x{plate_w} at {center} rotated {angle} does not fit {h}x{w}")

    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64) + 0.5
    # plate-local coordinates: u along the plate width, v along its height
    u = (xx - cx) * c + (yy - cy) * s
    v = -(xx - cx) * s + (yy - cy) * c
    inside = (np.abs(u) <= plate_w / 2 + 1e-9) & (np.abs(v) <= plate_h / 2 + 1e-9)

    base = rng.uniform(0.1, 0.55, size=3)
    texture = _smooth_noise(h, w, rng, cells=4)[..., None] * rng.uniform(0.1, 0.3)
    image = base + texture - 0.1 + rng.normal(0, 0.03, size=(h, w, 3))

    plate_color = rng.uniform(0.8, 1.0, size=3)
    image[inside] = plate_color + rng.normal(0, 0.02, size=(int(inside.sum()), 3))

    # dark glyph strokes: short bars inside the plate, in plate-local coordinates
    glyphs = np.zeros((h, w), dtype=bool)
    n_glyphs = int(rng.integers(3, 7))
    for k in range(n_glyphs):
        gu = (k + 0.5) / n_glyphs * plate_w * 0.8 - plate_w * 0.4
        gw = max(plate_w * 0.8 / n_glyphs * 0.3, 0.6)
        gh = plate_h * rng.uniform(0.35, 0.6)
        glyphs |= (np.abs(u - gu) <= gw / 2) & (np.abs(v) <= gh / 2)
        if rng.random() < 0.5:
            glyphs |= (np.abs(u - gu) <= gw * 1.5) & (np.abs(v - gh / 2) <= 0.5)
    glyphs &= inside
    image[glyphs] = rng.uniform(0.0, 0.2)

    mask = np.repeat(inside[..., None], 3, axis=-1).astype(np.float32)
    return ImageSample(np.clip(image, 0, 1).astype(np.float32), mask, sample_id)


def generate_synthetic(
    count: int,
    h: int,
    w: int,
    rng: np.random.Generator,
    max_angle: float = 30.0,
    prefix: str = "syn",
) -> list[ImageSample]:
    """Synthetic plate scenes; plate area is 2.7%-16.5% of the image."""
    if count <= 0:
        raise ValueError("count must be positive")
    samples = []
    for i in range(count):
        fw = rng.uniform(0.3, 0.55)
        aspect = rng.uniform(0.3, 0.55)
        plate_w = max(2, int(round(fw * w)))
        plate_h = max(2, int(round(aspect * plate_w)))
        angle = float(rng.uniform(-max_angle, max_angle))
        t = math.radians(angle)
        bh = abs(plate_h * math.cos(t)) + abs(plate_w * math.sin(t))
        bw = abs(plate_w * math.cos(t)) + abs(plate_h * math.sin(t))
        cy = rng.uniform(bh / 2, h - bh / 2)
        cx = rng.uniform(bw / 2, w - bw / 2)
        samples.append(render_plate(h, w, plate_h, plate_w, angle, (cy, cx), rng, f"{prefix}{i:05d}"))
    return samples


def to_uint8(arr: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(arr) * 255), 0, 255).astype(np.uint8)


def encode_png(arr: np.ndarray) -> bytes:
    import io as _io

    buf = _io.BytesIO()
    Image.fromarray(arr).save(buf, format="PNG")
    return buf.getvalue()


def write_synthetic(
    out_dir: str | Path,
    samples: Sequence[ImageSample],
    splits: Sequence[str],
) -> Path:
    """Write PNG pairs plus ``manifest.jsonl`` under ``out_dir``."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    records = []
    for s, split in zip(samples, splits):
        img_rel = f"images/{s.id}.png"
        mask_rel = f"masks/{s.id}.png"
        atomic_write_bytes(out / img_rel, encode_png(to_uint8(s.image)))
        atomic_write_bytes(out / mask_rel, encode_png(to_uint8(s.mask[..., 0])))
        records.append({"id": s.id, "image_path": img_rel, "mask_path": mask_rel, "split": split})
    manifest = out / "manifest.jsonl"
    write_manifest(manifest, records)
    return manifest


# --------------------------------------------------------------------------- crops


@dataclass
class CropExport:
    files: list[Path]
    report: list[str]


def largest_component_bbox(mask2d: np.ndarray) -> tuple[int, int, int, int] | None:
    """Inclusive (y0, x0, y1, x1) of the largest 4-connected component."""
    labels, n = ndimage.label(mask2d > 0.5)
    if n == 0:
        return None
    sizes = np.bincount(labels.ravel())[1:]
    biggest = int(np.argmax(sizes)) + 1  # first label wins ties
    ys, xs = np.nonzero(labels == biggest)
    return int(ys.min()), int(xs.min()), int(ys.max()), int(xs.max())


def export_crops(
    samples: Sequence[ImageSample],
    predicted_masks: Sequence[np.ndarray],
    out_dir: str | Path,
) -> CropExport:
    """Write the bounding-box crop of each prediction's largest component.

    Samples whose predicted mask is empty produce no file and one report line.
    The report is also written to ``crops_report.txt``.
    """
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create crop directory {out}: {exc}") from exc
    files: list[Path] = []
    report: list[str] = []
    for s, pm in zip(samples, predicted_masks):
        pm = np.asarray(pm)
        m2 = pm.max(axis=-1) if pm.ndim == 3 else pm
        box = largest_component_bbox(m2)
        if box is None:
            report.append(f"{s.id}: empty predicted mask, no crop written")
            continue
        y0, x0, y1, x1 = box
        crop = s.image[y0:y1 + 1, x0:x1 + 1]
        path = out / f"{s.id}_crop.png"
        atomic_write_bytes(path, encode_png(to_uint8(crop)))
        files.append(path)
        report.append(f"{s.id}: crop y={y0}..{y1} x={x0}..{x1} -> {path.name}")
    atomic_write_text(out / "crops_report.txt", "".join(line + "\n" for line in report))
    return CropExport(files, report)
