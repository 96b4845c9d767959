"""Zero-shot anatomy probes against a frozen encoder: localizability export,
landmark correspondence and the part-whole (DNA) test.

An encoder here is any callable mapping a (B, 1, H, W) tensor to (B, N, D) cell
embeddings in row-major order and exposing ``cell_pixels``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from scipy.stats import binomtest

INSIDE_C1 = "inside_c1"
INSIDE_COMPLEMENT = "inside_complement"


def _as_tensor(image) -> torch.Tensor:
    t = torch.as_tensor(np.asarray(image, dtype=np.float32))
    if t.ndim != 2:
        raise ValueError(f"expected a 2-D image, got shape {tuple(t.shape)}")
    return t


def crop_padded(image: torch.Tensor, top: int, left: int, h: int, w: int) -> torch.Tensor:
    """(h, w) window at (top, left); pixels outside ``image`` are zero."""
    out = image.new_zeros(h, w)
    ih, iw = image.shape
    t0, l0 = max(top, 0), max(left, 0)
    t1, l1 = min(top + h, ih), min(left + w, iw)
    if t1 > t0 and l1 > l0:
        out[t0 - top : t1 - top, l0 - left : l1 - left] = image[t0:t1, l0:l1]
    return out


@torch.no_grad()
def _encode_batches(encoder, crops: torch.Tensor, batch: int = 64) -> torch.Tensor:
    outs = [encoder(crops[i : i + batch].unsqueeze(1)) for i in range(0, crops.shape[0], batch)]
    return torch.cat(outs)


def local_crop_origin(point, image_shape, n_cells: int, cell: int, border: str = "clamp") -> tuple[int, int]:
    """Top-left (y, x) of the ``n_cells``-wide crop centered on ``point=(x, y)``.

    ``clamp`` shifts the crop inside the image; ``pad`` keeps it centered and
    zero-pads, which matches the windows of :func:`build_key_dictionary`.
    """
    x, y = point
    side = n_cells * cell
    half = (n_cells // 2) * cell
    top, left = y - half, x - half
    if border == "clamp":
        h, w = image_shape
        top = min(max(top, 0), max(h - side, 0))
        left = min(max(left, 0), max(w - side, 0))
    elif border != "pad":
        raise ValueError(f"unknown border mode {border!r}")
    return top, left


def extract_local_embeddings(encoder, image, points, n_cells: int = 14, border: str = "clamp") -> np.ndarray:
    """Embedding of the cell containing each point, from a crop of ``n_cells`` cells around it."""
    image = _as_tensor(image)
    h, w = image.shape
    cell = encoder.cell_pixels
    side = n_cells * cell
    crops, indices = [], []
    for x, y in points:
        if not (0 <= x < w and 0 <= y < h):
            raise ValueError(f"point ({x}, {y}) outside {w}x{h} image")
        top, left = local_crop_origin((x, y), (h, w), n_cells, cell, border)
        crops.append(crop_padded(image, top, left, side, side))
        indices.append(((y - top) // cell) * n_cells + (x - left) // cell)
    if not crops:
        return np.zeros((0, 0))
    tokens = _encode_batches(encoder, torch.stack(crops))
    idx = torch.as_tensor(indices)
    return tokens[torch.arange(len(indices)), idx].double().numpy()


def extract_local_embedding(encoder, image, point, n_cells: int = 14, border: str = "clamp") -> np.ndarray:
    return extract_local_embeddings(encoder, image, [point], n_cells, border)[0]


@dataclass
class KeyDictionary:
    positions: np.ndarray  # (N_k, 2) window centers as (x, y), sorted by (y, x)
    features: np.ndarray  # (N_k, D)

    def __len__(self) -> int:
        return len(self.positions)


def _lattice(n_pixels: int, stride: int) -> np.ndarray:
    # ceil(n / stride) centers, centered so no pixel is more than stride / 2 from one
    count = math.ceil(n_pixels / stride)
    offset = (n_pixels - 1 - (count - 1) * stride) // 2
    return offset + stride * np.arange(count)


def key_centers(height: int, width: int, stride: int) -> np.ndarray:
    """Window centers on the stride lattice covering the image, row-major by (y, x)."""
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    ys, xs = np.meshgrid(_lattice(height, stride), _lattice(width, stride), indexing="ij")
    return np.stack([xs.ravel(), ys.ravel()], axis=1)


def build_key_dictionary(encoder, key_image, stride: int = 8, n_cells: int = 14) -> KeyDictionary:
    """Slide a zero-padded ``n_cells``-cell window over the image; keep each window's center-cell feature."""
    image = _as_tensor(key_image)
    h, w = image.shape
    cell = encoder.cell_pixels
    side = n_cells * cell
    half = (n_cells // 2) * cell
    centers = key_centers(h, w, stride)
    center_index = (n_cells // 2) * n_cells + n_cells // 2
    feats = []
    chunk = 256
    for i in range(0, len(centers), chunk):
        crops = torch.stack(
            [crop_padded(image, int(y) - half, int(x) - half, side, side) for x, y in centers[i : i + chunk]]
        )
        feats.append(_encode_batches(encoder, crops)[:, center_index])
    return KeyDictionary(centers, torch.cat(feats).double().numpy())


@dataclass
class CorrespondenceResult:
    landmark_names: list[str]
    predicted: np.ndarray  # (pairs, landmarks, 2) as (x, y)
    truth: np.ndarray  # (pairs, landmarks, 2)
    errors: np.ndarray = field(init=False)  # (pairs, landmarks) Euclidean pixels

    def __post_init__(self):
        self.errors = np.hypot(*(self.predicted - self.truth).transpose(2, 0, 1))

    @property
    def mean(self) -> float:
        return float(self.errors.mean())

    @property
    def std(self) -> float:
        return float(self.errors.std())

    def per_landmark(self) -> dict[str, tuple[float, float]]:
        return {
            n: (float(self.errors[:, i].mean()), float(self.errors[:, i].std()))
            for i, n in enumerate(self.landmark_names)
        }

    def summary(self) -> str:
        return f"{self.mean:.2f}±{self.std:.2f}"


def nearest_keys(query_features: np.ndarray, key_dict: KeyDictionary) -> np.ndarray:
    """Index of the l2-nearest key for each query; ties go to the smallest (y, x)."""
    if len(key_dict) == 0:
        raise ValueError("key dictionary is empty")
    q = np.asarray(query_features, dtype=np.float64)
    k = key_dict.features
    d2 = (q**2).sum(1)[:, None] - 2 * q @ k.T + (k**2).sum(1)[None, :]
    # keys are stored in (y, x) order, so argmin's first hit is the tie-break winner
    return np.argmin(d2, axis=1)


def match_landmarks(query_features: np.ndarray, key_dict: KeyDictionary) -> np.ndarray:
    """Predicted (x, y) per query feature."""
    return key_dict.positions[nearest_keys(query_features, key_dict)]


def correspondence(
    encoder,
    images: dict[str, np.ndarray],
    landmarks: dict[str, dict[str, tuple[int, int]]],
    pairs: list[tuple[str, str]],
    landmark_names=None,
    stride: int = 8,
    n_cells: int = 14,
    border: str = "pad",
) -> CorrespondenceResult:
    """Query each pair's landmarks from the query image against the key image's dictionary."""
    if not pairs:
        raise ValueError("no image pairs given")
    if landmark_names is None:
        landmark_names = sorted(set.intersection(*(set(landmarks[q]) & set(landmarks[k]) for q, k in pairs)))
    landmark_names = list(landmark_names)
    cache: dict[str, KeyDictionary] = {}
    predicted, truth = [], []
    for q_id, k_id in pairs:
        points = [landmarks[q_id][n] for n in landmark_names]
        feats = extract_local_embeddings(encoder, images[q_id], points, n_cells, border)
        if k_id not in cache:
            cache[k_id] = build_key_dictionary(encoder, images[k_id], stride, n_cells)
        predicted.append(match_landmarks(feats, cache[k_id]))
        truth.append([landmarks[k_id][n] for n in landmark_names])
    return CorrespondenceResult(landmark_names, np.asarray(predicted, float), np.asarray(truth, float))


def random_position_error(truth: np.ndarray, height: int, width: int, stride: int) -> float:
    """Expected error when predictions are uniform over the key lattice (exact average)."""
    centers = key_centers(height, width, stride).astype(float)
    truth = np.asarray(truth, float).reshape(-1, 2)
    return float(np.mean(np.hypot(*(centers[None] - truth[:, None]).transpose(2, 0, 1))))


# part-whole test


@dataclass(frozen=True)
class DnaParams:
    c1_area: tuple[float, float] = (0.3, 0.5)
    cs_area: tuple[float, float] = (0.1, 0.3)
    max_attempts: int = 200


@dataclass
class DnaTrial:
    c1_window: tuple[int, int, int]  # (top, left, side) in pixels
    cs_window: tuple[int, int, int]
    cs_source: str
    predicted_source: str
    sim_c1: float
    sim_c: float

    @property
    def correct(self) -> bool:
        return self.cs_source == self.predicted_source


def _overlaps(a, b) -> bool:
    (t0, l0, s0), (t1, l1, s1) = a, b
    return t0 < t1 + s1 and t1 < t0 + s0 and l0 < l1 + s1 and l1 < l0 + s0


def _snap(side: float, cell: int, limit: int) -> int:
    return int(min(max(cell, round(side / cell) * cell), limit))


def _complement_slots(image_side: int, c1, side: int) -> np.ndarray:
    """All (top, left) where a ``side`` box fits in the image without touching ``c1``."""
    t1, l1, s1 = c1
    span = np.arange(0, image_side - side + 1)
    tt, ll = np.meshgrid(span, span, indexing="ij")
    clear = (tt + side <= t1) | (tt >= t1 + s1) | (ll + side <= l1) | (ll >= l1 + s1)
    return np.stack([tt[clear], ll[clear]], axis=1)


def sample_dna_geometry(image_side: int, cell: int, rng: np.random.Generator, source: str, params: DnaParams = DnaParams()):
    """Draw (c1_window, cs_window) for one trial.

    C1 and the C_s size are drawn identically for both sources and kept only when a
    C_s of that size also fits in the complement, so C1's distribution does not
    reveal the source.
    """
    area = image_side * image_side
    for _ in range(params.max_attempts):
        s1 = _snap(math.sqrt(rng.uniform(*params.c1_area) * area), cell, image_side - cell)
        t1, l1 = (int(v) for v in rng.integers(0, image_side - s1 + 1, size=2))
        c1 = (t1, l1, s1)
        frac = rng.uniform(*params.cs_area)
        region_area = s1 * s1 if source == INSIDE_C1 else area - s1 * s1
        ss = _snap(math.sqrt(frac * region_area), cell, s1)
        slots = _complement_slots(image_side, c1, ss)
        if len(slots) == 0:
            continue
        if source == INSIDE_C1:
            ts, ls = (int(v) for v in rng.integers(0, s1 - ss + 1, size=2))
            cs = (t1 + ts, l1 + ls, ss)
        else:
            ts, ls = slots[rng.integers(len(slots))]
            cs = (int(ts), int(ls), ss)
        return c1, cs
    raise RuntimeError("could not place a non-degenerate DNA-test geometry")


@torch.no_grad()
def dna_trial(encoder, image, rng: np.random.Generator, source: str, params: DnaParams = DnaParams()) -> DnaTrial:
    """Encode C1, the remaining area C (image with C1 zero-filled) and C_s; pick the
    region whose pooled embedding is cosine-closest to C_s (ties -> inside C1)."""
    image = _as_tensor(image)
    side = image.shape[0]
    if image.shape[1] != side:
        raise ValueError("DNA-test expects square images")
    cell = encoder.cell_pixels
    c1, cs = sample_dna_geometry(side, cell, rng, source, params)
    t1, l1, s1 = c1
    ts, ls, ss = cs
    remaining = image.clone()
    remaining[t1 : t1 + s1, l1 : l1 + s1] = 0
    e_c1 = encoder(image[None, None, t1 : t1 + s1, l1 : l1 + s1]).mean(dim=1)
    e_c = encoder(remaining[None, None]).mean(dim=1)
    e_cs = encoder(image[None, None, ts : ts + ss, ls : ls + ss]).mean(dim=1)
    sim_c1 = float(F.cosine_similarity(e_cs, e_c1).double())
    sim_c = float(F.cosine_similarity(e_cs, e_c).double())
    predicted = INSIDE_C1 if sim_c1 >= sim_c else INSIDE_COMPLEMENT
    return DnaTrial(c1, cs, source, predicted, sim_c1, sim_c)


@dataclass
class DnaResult:
    accuracy: float
    ci_low: float
    ci_high: float
    n_trials: int
    trials: list[DnaTrial]

    @property
    def n_inside_c1(self) -> int:
        return sum(t.cs_source == INSIDE_C1 for t in self.trials)

    def summary(self) -> str:
        return (
            f"{100 * self.accuracy:.2f}% (95% CI {100 * self.ci_low:.2f}-{100 * self.ci_high:.2f}, "
            f"n={self.n_trials})"
        )


def dna_accuracy(encoder, images, n_trials_per_image: int, seed: int = 0, params: DnaParams = DnaParams()) -> DnaResult:
    """Balanced trials: the source alternates C1 / complement over the global trial index."""
    images = list(images)
    if not images:
        raise ValueError("image set is empty")
    if n_trials_per_image < 1:
        raise ValueError("need at least one trial per image")
    rng = np.random.default_rng(seed)
    trials = []
    for image in images:
        for _ in range(n_trials_per_image):
            source = INSIDE_C1 if len(trials) % 2 == 0 else INSIDE_COMPLEMENT
            trials.append(dna_trial(encoder, image, rng, source, params))
    k = sum(t.correct for t in trials)
    ci = binomtest(k, len(trials)).proportion_ci(0.95, method="wilson")
    return DnaResult(k / len(trials), float(ci.low), float(ci.high), len(trials), trials)


class ConstantEncoder(torch.nn.Module):
    """Stub: every cell maps to the same vector."""

    def __init__(self, cell_pixels: int, dim: int = 4):
        super().__init__()
        self.cell_pixels = cell_pixels
        self.dim = dim

    def forward(self, images):
        b, _, h, w = images.shape
        n = (h // self.cell_pixels) * (w // self.cell_pixels)
        return torch.ones(b, n, self.dim)


class RandomOutputEncoder(torch.nn.Module):
    """Stub: i.i.d. Gaussian features independent of the input, from its own generator."""

    def __init__(self, cell_pixels: int, dim: int = 16, seed: int = 0):
        super().__init__()
        self.cell_pixels = cell_pixels
        self.dim = dim
        self.generator = torch.Generator().manual_seed(seed)

    def forward(self, images):
        b, _, h, w = images.shape
        n = (h // self.cell_pixels) * (w // self.cell_pixels)
        return torch.randn(b, n, self.dim, generator=self.generator)


class CoordinateStubEncoder(torch.nn.Module):
    """Stub for images whose pixels encode their own position as ``y * width + x + 1``.

    Each cell's feature is the decoded (x, y) of its top-left pixel, so features are
    position-distinct. Pair with :func:`coordinate_image`.
    """

    def __init__(self, cell_pixels: int, width: int):
        super().__init__()
        self.cell_pixels = cell_pixels
        self.width = width

    def forward(self, images):
        corners = images[:, 0, :: self.cell_pixels, :: self.cell_pixels].flatten(1).double() - 1
        return torch.stack([corners % self.width, torch.div(corners, self.width, rounding_mode="floor")], dim=-1)


def coordinate_image(height: int, width: int) -> np.ndarray:
    ys, xs = np.mgrid[0:height, 0:width]
    return (ys * width + xs + 1).astype(np.float64)
