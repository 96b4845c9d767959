"""Crop, mask and permutation arithmetic on the patch grid.

Everything here is parameter-free and deterministic given a seeded
``numpy.random.Generator``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from enum import IntEnum

import numpy as np
import torch
import torch.nn.functional as F


class ConfigError(ValueError):
    """Invalid configuration value or combination of values."""


class GeometryError(ValueError):
    """A window or mask violates a containment rule."""


class Quadrant(IntEnum):
    """Row-major quadrant order shared by splitting, composition and decomposition."""

    TL = 0
    TR = 1
    BL = 2
    BR = 3


@dataclass(frozen=True)
class GridSpec:
    grid_size: int
    cell_pixels: int

    def __post_init__(self):
        if self.grid_size < 2:
            raise ConfigError(f"grid_size must be >= 2, got {self.grid_size}")
        if self.cell_pixels < 1:
            raise ConfigError(f"cell_pixels must be >= 1, got {self.cell_pixels}")

    @property
    def image_pixels(self) -> int:
        return self.grid_size * self.cell_pixels


def make_grid(image_pixels: int, grid_size: int) -> GridSpec:
    if grid_size < 2 or image_pixels % grid_size != 0:
        raise ConfigError(
            f"image_pixels={image_pixels} is not divisible by grid_size={grid_size}"
        )
    return GridSpec(grid_size=grid_size, cell_pixels=image_pixels // grid_size)


@dataclass(frozen=True)
class CropWindow:
    """Square, grid-aligned window; ``row``/``col`` index its top-left cell."""

    row: int
    col: int
    n: int

    def contains(self, other: "CropWindow") -> bool:
        return (
            self.row <= other.row
            and self.col <= other.col
            and other.row + other.n <= self.row + self.n
            and other.col + other.n <= self.col + self.n
        )

    def pixel_box(self, cell_pixels: int) -> tuple[int, int, int]:
        """(top, left, side) in pixels."""
        return self.row * cell_pixels, self.col * cell_pixels, self.n * cell_pixels


@dataclass(frozen=True)
class MaskSet:
    """Row-major flags over the outer crop's cells; True marks a cell to extrapolate."""

    flags: np.ndarray

    @property
    def n(self) -> int:
        return math.isqrt(len(self.flags))

    @property
    def count(self) -> int:
        return int(self.flags.sum())

    def as_grid(self) -> np.ndarray:
        return self.flags.reshape(self.n, self.n)


@dataclass(frozen=True)
class Permutation:
    """``order[i]`` is the original index of the token now sitting at slot ``i``."""

    order: np.ndarray

    def __post_init__(self):
        order = np.asarray(self.order, dtype=np.int64)
        if not np.array_equal(np.sort(order), np.arange(len(order))):
            raise ValueError("order is not a bijection on 0..N-1")
        object.__setattr__(self, "order", order)

    def __len__(self) -> int:
        return len(self.order)

    def inverse(self) -> "Permutation":
        inv = np.empty_like(self.order)
        inv[self.order] = np.arange(len(self.order))
        return Permutation(inv)

    def is_identity(self) -> bool:
        return bool(np.array_equal(self.order, np.arange(len(self.order))))


@dataclass(frozen=True)
class CropRatioSchedule:
    """Piecewise-constant temperature ``t``: entry ``(threshold, t)`` applies from ``threshold`` on."""

    t_values: tuple[tuple[int, float], ...] = ((0, 20.0), (50, 60.0))

    def __post_init__(self):
        entries = tuple((int(e), float(t)) for e, t in self.t_values)
        if not entries:
            raise ConfigError("crop ratio schedule is empty")
        if entries[0][0] != 0:
            raise ConfigError("first crop ratio threshold must be epoch 0")
        for (e0, t0), (e1, t1) in zip(entries, entries[1:]):
            if e1 <= e0:
                raise ConfigError("crop ratio thresholds must be strictly increasing")
            if t1 < t0:
                raise ConfigError("crop ratio temperatures must be non-decreasing")
        if any(t <= 0 for _, t in entries):
            raise ConfigError("crop ratio temperatures must be positive")
        object.__setattr__(self, "t_values", entries)

    def t_at(self, epoch: int) -> float:
        t = self.t_values[0][1]
        for threshold, value in self.t_values:
            if epoch >= threshold:
                t = value
        return t


def sample_crop_pair(
    grid: GridSpec, n1: int, n2: int, rng: np.random.Generator
) -> tuple[CropWindow, CropWindow]:
    """Uniformly place an ``n1`` window on the grid and an ``n2`` window inside it."""
    if not (1 <= n2 < n1 <= grid.grid_size):
        raise ConfigError(
            f"need 1 <= n2 < n1 <= grid_size, got n1={n1}, n2={n2}, grid_size={grid.grid_size}"
        )
    r1, c1 = rng.integers(0, grid.grid_size - n1 + 1, size=2)
    dr, dc = rng.integers(0, n1 - n2 + 1, size=2)
    outer = CropWindow(int(r1), int(c1), n1)
    inner = CropWindow(int(r1 + dr), int(c1 + dc), n2)
    return outer, inner


def mask_from_pair(c1: CropWindow, c2: CropWindow) -> MaskSet:
    if not c1.contains(c2):
        raise GeometryError(f"{c2} is not inside {c1}")
    grid = np.ones((c1.n, c1.n), dtype=bool)
    r, c = c2.row - c1.row, c2.col - c1.col
    grid[r : r + c2.n, c : c + c2.n] = False
    return MaskSet(grid.reshape(-1))


def sample_permutation(
    n_tokens: int, rng: np.random.Generator, allow_identity: bool = False
) -> Permutation:
    if n_tokens <= 0:
        raise ValueError(f"n_tokens must be positive, got {n_tokens}")
    order = rng.permutation(n_tokens)
    if not allow_identity and n_tokens >= 2 and np.array_equal(order, np.arange(n_tokens)):
        # one resample; a second identity is accepted
        order = rng.permutation(n_tokens)
    return Permutation(order)


def apply_permutation(tokens, perm: Permutation):
    """``out[i] = tokens[perm.order[i]]`` for lists, arrays and tensors (first axis)."""
    if len(tokens) != len(perm.order):
        raise ValueError(
            f"token count {len(tokens)} does not match permutation length {len(perm.order)}"
        )
    if isinstance(tokens, torch.Tensor):
        return tokens[torch.as_tensor(perm.order, device=tokens.device)]
    if isinstance(tokens, np.ndarray):
        return tokens[perm.order]
    return [tokens[i] for i in perm.order]


def crop_ratio(epoch: int, schedule: CropRatioSchedule, r_min: float = 0.4) -> float:
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    r = math.exp(-epoch / schedule.t_at(epoch))
    return min(1.0, max(r_min, r))


def split_quadrants(region):
    """Split the trailing two axes into TL, TR, BL, BR halves.

    Odd sides are first padded by one replicated row/column at the bottom/right.
    Works for numpy arrays and torch tensors.
    """
    h, w = region.shape[-2:]
    pad_h, pad_w = h % 2, w % 2
    if pad_h or pad_w:
        if isinstance(region, torch.Tensor):
            lead = region.shape[:-2]
            flat = region.reshape(-1, 1, h, w)
            flat = F.pad(flat, (0, pad_w, 0, pad_h), mode="replicate")
            region = flat.reshape(*lead, h + pad_h, w + pad_w)
        else:
            widths = [(0, 0)] * (region.ndim - 2) + [(0, pad_h), (0, pad_w)]
            region = np.pad(region, widths, mode="edge")
        h, w = h + pad_h, w + pad_w
    hh, hw = h // 2, w // 2
    return [
        region[..., :hh, :hw],
        region[..., :hh, hw:],
        region[..., hh:, :hw],
        region[..., hh:, hw:],
    ]


def sample_ratio_crop(
    image_pixels: int, ratio: float, rng: np.random.Generator, multiple: int = 1
) -> tuple[int, int, int]:
    """Square pixel crop covering ``ratio`` of the image area: (top, left, side).

    ``side`` is rounded to a multiple of ``multiple`` (at least one multiple).
    """
    side = int(round(math.sqrt(ratio) * image_pixels / multiple)) * multiple
    side = min(max(side, multiple), image_pixels)
    top, left = rng.integers(0, image_pixels - side + 1, size=2)
    return int(top), int(left), side


def shuffle_cells(images: torch.Tensor, orders: torch.Tensor, cell_pixels: int) -> torch.Tensor:
    """Rearrange the cells of a batch of square crops in image space.

    ``images`` is (B, C, H, W) with H, W multiples of ``cell_pixels``; ``orders`` is
    (B, N) with N the cell count. Slot ``i`` of sample ``b`` receives original cell
    ``orders[b, i]``.
    """
    b, c, h, w = images.shape
    rows, cols = h // cell_pixels, w // cell_pixels
    if orders.shape != (b, rows * cols):
        raise ValueError(f"orders shape {tuple(orders.shape)} != {(b, rows * cols)}")
    cells = F.unfold(images, kernel_size=cell_pixels, stride=cell_pixels)  # (B, C*p*p, N)
    idx = orders.unsqueeze(1).expand(-1, cells.shape[1], -1)
    cells = torch.gather(cells, 2, idx)
    return F.fold(cells, (h, w), kernel_size=cell_pixels, stride=cell_pixels)

