"""Image ingestion and synthetic chest-like phantoms with exact landmarks."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError

from .geometry import ConfigError, GridSpec

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff", ".gif", ".webp"}

# landmark -> structure whose rendered support contains it
LANDMARK_STRUCTURES = {
    "right_lung_apex": "right_lung",
    "left_lung_apex": "left_lung",
    "right_costophrenic": "right_lung",
    "left_costophrenic": "left_lung",
    "right_lung_lateral": "right_lung",
    "left_lung_lateral": "left_lung",
    "heart_apex": "heart",
    "heart_right_border": "heart",
    "heart_top": "heart",
    "right_clavicle_mid": "right_clavicle",
    "left_clavicle_mid": "left_clavicle",
    "right_rib4_peak": "right_ribs",
    "left_rib4_peak": "left_ribs",
}
LANDMARK_NAMES = tuple(LANDMARK_STRUCTURES)
CORRESPONDENCE_LANDMARKS = LANDMARK_NAMES  # 13 query landmarks
LOCALIZABILITY_LANDMARKS = LANDMARK_NAMES[:9]


class LandmarkError(ValueError):
    pass


@dataclass(frozen=True)
class LandmarkAnnotation:
    image_id: str
    landmark_name: str
    x: int
    y: int


@dataclass
class PhantomSpec:
    """Layout is in unit coordinates; patients (the image's right = patient's left) are
    jittered by a global shift/scale plus per-structure offsets."""

    image_pixels: int = 144
    n_ribs: int = 6
    position_sigma: float = 0.02
    scale_sigma: float = 0.04
    structure_sigma: float = 0.01
    intensity_sigma: float = 0.04
    noise: float = 0.02
    edge_width: float = 0.04

    # nominal (cx, cy, rx, ry)
    right_lung: tuple = (0.31, 0.47, 0.13, 0.27)
    left_lung: tuple = (0.69, 0.47, 0.12, 0.26)
    heart: tuple = (0.56, 0.63, 0.14, 0.11)

    def validate(self) -> None:
        if self.image_pixels < 16:
            raise ConfigError(f"phantom image_pixels too small: {self.image_pixels}")
        if min(self.position_sigma, self.scale_sigma, self.structure_sigma, self.intensity_sigma, self.noise) < 0:
            raise ConfigError("phantom jitter and noise levels must be non-negative")
        shift = 3 * (self.position_sigma + self.structure_sigma)
        scale = 1 + 3 * self.scale_sigma
        for name in ("right_lung", "left_lung", "heart"):
            cx, cy, rx, ry = getattr(self, name)
            lo_x = 0.5 + (cx - rx - 0.5) * scale - shift
            hi_x = 0.5 + (cx + rx - 0.5) * scale + shift
            lo_y = 0.5 + (cy - ry - 0.5) * scale - shift
            hi_y = 0.5 + (cy + ry - 0.5) * scale + shift
            if lo_x < 0 or lo_y < 0 or hi_x > 1 or hi_y > 1:
                raise ConfigError(f"structure {name} leaves the image at 3 sigma jitter")


def _ellipse_support(xx, yy, cx, cy, rx, ry, width):
    r = np.sqrt(((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2)
    return 1.0 / (1.0 + np.exp(-(1.0 - r) / width))


def _band_support(dist, half_width, width):
    return 1.0 / (1.0 + np.exp(-(half_width - dist) / (half_width * width * 10)))


def _segment_distance(xx, yy, p0, p1):
    p0, p1 = np.asarray(p0), np.asarray(p1)
    d = p1 - p0
    t = np.clip(((xx - p0[0]) * d[0] + (yy - p0[1]) * d[1]) / (d @ d), 0, 1)
    return np.hypot(xx - (p0[0] + t * d[0]), yy - (p0[1] + t * d[1]))


def render_phantom(spec: PhantomSpec, patient_seed: int):
    """Render one phantom.

    Returns ``(image, landmarks, supports)``: a float32 image in [0, 1], a dict
    landmark name -> (x, y) in continuous pixel units, and per-structure support
    maps in [0, 1].
    """
    spec.validate()
    rng = np.random.default_rng(patient_seed)
    p = spec.image_pixels
    coords = (np.arange(p) + 0.5) / p
    xx, yy = np.meshgrid(coords, coords)

    shift = rng.normal(0, spec.position_sigma, size=2)
    scale = 1 + rng.normal(0, spec.scale_sigma)

    def place(cx, cy):
        local = rng.normal(0, spec.structure_sigma, size=2)
        return (
            0.5 + (cx - 0.5) * scale + shift[0] + local[0],
            0.5 + (cy - 0.5) * scale + shift[1] + local[1],
        )

    def level(base):
        return base + rng.normal(0, spec.intensity_sigma)

    w = spec.edge_width
    supports = {}
    marks = {}

    body = _ellipse_support(xx, yy, 0.5 + shift[0], 0.56 + shift[1], 0.45 * scale, 0.5 * scale, w)
    image = level(0.55) * body

    lungs = {}
    for side, sign in (("right", -1), ("left", 1)):
        cx, cy, rx, ry = getattr(spec, f"{side}_lung")
        cx, cy = place(cx, cy)
        rx, ry = rx * scale, ry * scale
        lungs[side] = (cx, cy, rx, ry)
        sup = _ellipse_support(xx, yy, cx, cy, rx, ry, w)
        supports[f"{side}_lung"] = sup
        # darker towards the periphery
        shade = level(0.15) + 0.08 * np.clip((yy - cy) / ry, -1, 1)
        image = image * (1 - sup) + shade * sup
        marks[f"{side}_lung_apex"] = (cx, cy - 0.85 * ry)
        marks[f"{side}_lung_lateral"] = (cx + sign * 0.85 * rx, cy)
        a = math.radians(50)
        marks[f"{side}_costophrenic"] = (cx + sign * 0.85 * rx * math.cos(a), cy + 0.85 * ry * math.sin(a))

    for side, sign in (("right", -1), ("left", 1)):
        cx, cy, rx, ry = lungs[side]
        rib_mask = np.zeros_like(xx)
        half = 0.011 * scale
        spacing = 1.6 * ry / spec.n_ribs
        bend = 1.4 + rng.normal(0, 10 * spec.structure_sigma)
        for k in range(spec.n_ribs):
            y0 = cy - 0.75 * ry + k * spacing
            curve = y0 + bend * (xx - cx) ** 2 - sign * 0.25 * (xx - cx)
            band = _band_support(np.abs(yy - curve), half, w)
            rib_mask = np.maximum(rib_mask, band * (np.abs(xx - cx) < 1.05 * rx))
            if k == 3:
                marks[f"{side}_rib4_peak"] = (cx, y0)
        sup = rib_mask * supports[f"{side}_lung"]
        supports[f"{side}_ribs"] = sup
        image = image + level(0.22) * sup

    hx, hy, hrx, hry = spec.heart
    hx, hy = place(hx, hy)
    hrx, hry = hrx * scale * (1 + rng.normal(0, spec.scale_sigma)), hry * scale
    sup = _ellipse_support(xx, yy, hx, hy, hrx, hry, w)
    supports["heart"] = sup
    image = image * (1 - sup) + level(0.72) * sup
    a = math.radians(35)
    marks["heart_apex"] = (hx + 0.85 * hrx * math.cos(a), hy + 0.85 * hry * math.sin(a))
    marks["heart_right_border"] = (hx - 0.85 * hrx, hy)
    marks["heart_top"] = (hx, hy - 0.85 * hry)

    for side, sign in (("right", -1), ("left", 1)):
        cx, cy, rx, ry = lungs[side]
        top = cy - ry
        p0 = (0.5 + sign * 0.04 * scale + shift[0], top + 0.05)
        p1 = (cx + sign * 0.9 * rx, top - 0.01 + rng.normal(0, spec.structure_sigma))
        dist = _segment_distance(xx, yy, p0, p1)
        sup = _band_support(dist, 0.014 * scale, w)
        supports[f"{side}_clavicle"] = sup
        image = image * (1 - sup) + level(0.9) * sup
        marks[f"{side}_clavicle_mid"] = ((p0[0] + p1[0]) / 2, (p0[1] + p1[1]) / 2)

    if spec.noise > 0:
        image = image + rng.normal(0, spec.noise, size=image.shape)
    image = np.clip(image, 0.0, 1.0).astype(np.float32)
    landmarks = {name: (marks[name][0] * p, marks[name][1] * p) for name in LANDMARK_NAMES}
    return image, landmarks, supports


def generate_phantom(spec: PhantomSpec, patient_seed: int, image_id: str | None = None):
    """Phantom image in [0, 1] plus its 13 integer-pixel landmark annotations."""
    image, marks, _ = render_phantom(spec, patient_seed)
    image_id = image_id or f"phantom{patient_seed}"
    p = spec.image_pixels
    annotations = [
        LandmarkAnnotation(
            image_id, name, int(min(max(math.floor(x), 0), p - 1)), int(min(max(math.floor(y), 0), p - 1))
        )
        for name, (x, y) in marks.items()
    ]
    return image, annotations


def standardize(image: np.ndarray) -> np.ndarray:
    """Zero-mean, unit-variance per image (constant images map to zeros)."""
    image = image.astype(np.float64)
    std = image.std()
    out = image - image.mean()
    if std > 0:
        out = out / std
    return out.astype(np.float32)


@dataclass
class Dataset:
    items: list[tuple[str, np.ndarray]]
    landmarks: list[LandmarkAnnotation] = field(default_factory=list)
    source_sizes: dict[str, tuple[int, int]] = field(default_factory=dict)
    skipped: list[str] = field(default_factory=list)

    def __post_init__(self):
        shapes = {img.shape for _, img in self.items}
        if len(shapes) > 1:
            raise ValueError(f"dataset images differ in resolution: {sorted(shapes)}")

    def __len__(self) -> int:
        return len(self.items)

    @property
    def ids(self) -> list[str]:
        return [image_id for image_id, _ in self.items]

    def image(self, image_id: str) -> np.ndarray:
        for key, img in self.items:
            if key == image_id:
                return img
        raise KeyError(image_id)

    def tensor(self) -> torch.Tensor:
        """All images stacked as a (N, 1, H, W) float32 tensor."""
        return torch.from_numpy(np.stack([img for _, img in self.items]))[:, None]

    def landmarks_by_image(self) -> dict[str, dict[str, tuple[int, int]]]:
        out: dict[str, dict[str, tuple[int, int]]] = {}
        for a in self.landmarks:
            out.setdefault(a.image_id, {})[a.landmark_name] = (a.x, a.y)
        return out


def phantom_dataset(spec: PhantomSpec, n_images: int, seed: int = 0) -> Dataset:
    """``n_images`` standardized phantoms with their landmarks; patient ``i`` uses seed (seed, i)."""
    if n_images < 1:
        raise ConfigError("phantom dataset needs at least one image")
    items, annotations = [], []
    for i in range(n_images):
        patient_seed = seed * 1_000_003 + i
        image_id = f"p{i:05d}"
        image, marks = generate_phantom(spec, patient_seed, image_id)
        items.append((image_id, standardize(image)))
        annotations.extend(marks)
    sizes = {image_id: (spec.image_pixels, spec.image_pixels) for image_id, _ in items}
    return Dataset(items, annotations, sizes)


def ingest_folder(path: str | Path, grid: GridSpec, manifest: str | Path | None = None) -> Dataset:
    """Load every decodable image under ``path`` (sorted by filename).

    Images become single-channel, are resized bilinearly to the grid resolution and
    standardized. Undecodable files are skipped with a warning and listed in
    ``Dataset.skipped`` (and in ``manifest`` when given).
    """
    path = Path(path)
    files = sorted(f for f in path.iterdir() if f.is_file() and f.suffix.lower() in IMAGE_SUFFIXES)
    side = grid.image_pixels
    items, sizes, skipped = [], {}, []
    for f in files:
        try:
            with Image.open(f) as im:
                im.load()
                sizes[f.stem] = im.size
                gray = im.convert("L").resize((side, side), Image.BILINEAR)
        except (UnidentifiedImageError, OSError) as exc:
            log.warning("skipping %s: %s", f.name, exc)
            skipped.append(f.name)
            sizes.pop(f.stem, None)
            continue
        items.append((f.stem, standardize(np.asarray(gray, dtype=np.float32))))
    if manifest is not None:
        Path(manifest).write_text("".join(f"skipped\t{name}\n" for name in skipped))
    if not items:
        raise ValueError(f"no decodable images in {path}")
    return Dataset(items, source_sizes=sizes, skipped=skipped)


LANDMARK_HEADER = ["image_id", "landmark_name", "x", "y"]


def load_landmarks(
    csv_path: str | Path,
    source_sizes: dict[str, tuple[int, int]],
    target_pixels: int | None = None,
    vocabulary: tuple[str, ...] | None = LANDMARK_NAMES,
) -> list[LandmarkAnnotation]:
    """Parse a landmark CSV and rescale coordinates to the ingested resolution.

    ``source_sizes`` maps image_id -> (width, height) of the original file;
    coordinates are scaled by ``target_pixels / source`` and floored.
    """
    out: list[LandmarkAnnotation] = []
    seen = set()
    with open(csv_path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != LANDMARK_HEADER:
            raise LandmarkError(f"{csv_path}: header must be {','.join(LANDMARK_HEADER)}, got {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4:
                raise LandmarkError(f"{csv_path}:{lineno}: expected 4 fields, got {len(row)}")
            image_id, name, xs, ys = (v.strip() for v in row)
            try:
                x, y = int(xs), int(ys)
            except ValueError:
                raise LandmarkError(f"{csv_path}:{lineno}: non-integer coordinate") from None
            if vocabulary is not None and name not in vocabulary:
                raise LandmarkError(f"{csv_path}:{lineno}: unknown landmark {name!r}")
            if image_id not in source_sizes:
                raise LandmarkError(f"{csv_path}:{lineno}: unknown image {image_id!r}")
            if (image_id, name) in seen:
                raise LandmarkError(f"{csv_path}:{lineno}: duplicate landmark {name!r} for {image_id!r}")
            seen.add((image_id, name))
            w, h = source_sizes[image_id]
            if not (0 <= x < w and 0 <= y < h):
                raise LandmarkError(f"{csv_path}:{lineno}: ({x}, {y}) outside {w}x{h} image")
            if target_pixels is not None:
                x = math.floor(x * target_pixels / w)
                y = math.floor(y * target_pixels / h)
            out.append(LandmarkAnnotation(image_id, name, x, y))
    return out


def write_landmarks(path: str | Path, annotations: list[LandmarkAnnotation]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(LANDMARK_HEADER)
        for a in annotations:
            writer.writerow([a.image_id, a.landmark_name, a.x, a.y])


def export_phantoms(out_dir: str | Path, spec: PhantomSpec, n_images: int, seed: int = 0) -> Path:
    """Write phantoms as 8-bit PNGs plus ``landmarks.csv`` and consecutive ``pairs.csv``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    annotations = []
    ids = []
    for i in range(n_images):
        image_id = f"p{i:05d}"
        image, marks = generate_phantom(spec, seed * 1_000_003 + i, image_id)
        Image.fromarray(np.round(image * 255).astype(np.uint8)).save(out_dir / f"{image_id}.png")
        annotations.extend(marks)
        ids.append(image_id)
    write_landmarks(out_dir / "landmarks.csv", annotations)
    with open(out_dir / "pairs.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["query_id", "key_id"])
        for a, b in zip(ids[::2], ids[1::2]):
            writer.writerow([a, b])
    return out_dir


def load_pairs(path: str | Path) -> list[tuple[str, str]]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["query_id", "key_id"]:
            raise ValueError(f"{path}: header must be query_id,key_id")
        return [(row[0].strip(), row[1].strip()) for row in reader if row]
