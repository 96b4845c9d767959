"""Patch encoder, student/teacher pair and the checkpoint archive."""
from __future__ import annotations

import copy
import hashlib
import io
import math
import struct
import sys
import zipfile
import zlib
from dataclasses import asdict, dataclass
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from .geometry import ConfigError

CHECKPOINT_FORMAT_VERSION = 1


@dataclass
class EncoderConfig:
    cell_pixels: int = 8
    embed_dim: int = 32
    depth: int = 2
    heads: int = 2
    mlp_ratio: float = 2.0
    in_chans: int = 1
    variant: str = "tiny"

    def __post_init__(self):
        if self.variant not in {"tiny", "small", "paper"}:
            raise ConfigError(f"unknown encoder variant {self.variant!r}")
        if self.depth < 1:
            raise ConfigError(f"depth must be >= 1, got {self.depth}")
        if self.embed_dim % self.heads != 0:
            raise ConfigError(
                f"embed_dim={self.embed_dim} is not divisible by heads={self.heads}"
            )

    @classmethod
    def preset(cls, variant: str, cell_pixels: int) -> "EncoderConfig":
        # "paper" approximates Swin-B capacity (~88M params) with a plain ViT-B stack
        sizes = {
            "tiny": dict(embed_dim=32, depth=2, heads=2, mlp_ratio=2.0),
            "small": dict(embed_dim=128, depth=6, heads=4, mlp_ratio=4.0),
            "paper": dict(embed_dim=768, depth=12, heads=12, mlp_ratio=4.0),
        }
        if variant not in sizes:
            raise ConfigError(f"unknown encoder variant {variant!r}")
        return cls(cell_pixels=cell_pixels, variant=variant, **sizes[variant])


def sincos_pos_embed(rows: int, cols: int, dim: int, device=None, dtype=None) -> torch.Tensor:
    """Fixed 2-D sine-cosine table of shape (rows*cols, dim), row-major."""
    if dim % 4 != 0:
        raise ConfigError(f"embed_dim must be divisible by 4 for 2-D sincos, got {dim}")
    quarter = dim // 4
    omega = torch.arange(quarter, dtype=torch.float64) / quarter
    omega = 1.0 / (10000**omega)
    ys, xs = torch.meshgrid(
        torch.arange(rows, dtype=torch.float64), torch.arange(cols, dtype=torch.float64), indexing="ij"
    )
    out_y = ys.reshape(-1, 1) * omega
    out_x = xs.reshape(-1, 1) * omega
    table = torch.cat([out_y.sin(), out_y.cos(), out_x.sin(), out_x.cos()], dim=1)
    return table.to(device=device, dtype=dtype or torch.get_default_dtype())


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, n, d = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.heads, d // self.heads).permute(2, 0, 3, 1, 4)
        out = F.scaled_dot_product_attention(qkv[0], qkv[1], qkv[2])
        return self.proj(out.transpose(1, 2).reshape(b, n, d))


class Block(nn.Module):
    """Pre-norm transformer block."""

    def __init__(self, dim: int, heads: int, mlp_ratio: float = 4.0):
        super().__init__()
        hidden = int(dim * mlp_ratio)
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class PatchEncoder(nn.Module):
    """Windowless patch transformer accepting any grid of ``cell_pixels`` cells.

    Returns one embedding per cell in row-major order, shape (B, rows*cols, D).
    Positions are encoded relative to the input crop with a fixed sincos table,
    so 14x14, 11x11 and 7x7 inputs all share the same weights.
    """

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        self.cell_pixels = config.cell_pixels
        self.embed_dim = config.embed_dim
        self.patch_embed = nn.Conv2d(
            config.in_chans, config.embed_dim, kernel_size=config.cell_pixels, stride=config.cell_pixels
        )
        self.blocks = nn.ModuleList(
            Block(config.embed_dim, config.heads, config.mlp_ratio) for _ in range(config.depth)
        )
        self.norm = nn.LayerNorm(config.embed_dim)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        h, w = images.shape[-2:]
        if h % self.cell_pixels or w % self.cell_pixels:
            raise ValueError(
                f"image region {h}x{w} is not a whole number of {self.cell_pixels}px cells"
            )
        rows, cols = h // self.cell_pixels, w // self.cell_pixels
        x = self.patch_embed(images).flatten(2).transpose(1, 2)
        x = x + sincos_pos_embed(rows, cols, self.embed_dim, x.device, x.dtype)
        for block in self.blocks:
            x = block(x)
        return self.norm(x)


def encode(encoder: nn.Module, images: torch.Tensor, grid_layout: tuple[int, int]) -> torch.Tensor:
    """Encode a batch of regions whose pixel size must equal ``grid_layout`` cells."""
    rows, cols = grid_layout
    cell = encoder.cell_pixels
    expected = (rows * cell, cols * cell)
    actual = tuple(images.shape[-2:])
    if actual != expected:
        raise ValueError(f"expected region of {expected[0]}x{expected[1]} px, got {actual[0]}x{actual[1]}")
    return encoder(images)


def pool_global(tokens: torch.Tensor) -> torch.Tensor:
    """Mean over the token axis (second to last)."""
    if tokens.shape[-2] == 0:
        raise ValueError("cannot pool an empty embedding map")
    return tokens.mean(dim=-2)


def momentum_schedule(step: int, total_steps: int, base_m: float = 0.996, final_m: float = 1.0) -> float:
    """Cosine ramp of the teacher momentum from ``base_m`` to ``final_m``."""
    if not 0 <= step <= total_steps or total_steps <= 0:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return final_m - (final_m - base_m) * (math.cos(math.pi * step / total_steps) + 1) / 2


@torch.no_grad()
def ema_update(student: nn.Module, teacher: nn.Module, m: float) -> None:
    """teacher <- m * teacher + (1 - m) * student, in place."""
    if not 0.0 <= m <= 1.0:
        raise ValueError(f"momentum must be in [0, 1], got {m}")
    s_params = list(student.parameters())
    t_params = list(teacher.parameters())
    if len(s_params) != len(t_params) or any(
        s.shape != t.shape for s, t in zip(s_params, t_params)
    ):
        raise ValueError("student and teacher parameter shapes differ")
    if m == 1.0:
        return
    for s, t in zip(s_params, t_params):
        t.mul_(m).add_(s.detach(), alpha=1.0 - m)


class ModelPair(nn.Module):
    """Student encoder plus its gradient-free EMA teacher."""

    def __init__(self, student: nn.Module, base_m: float = 0.996, final_m: float = 1.0, total_steps: int = 1):
        super().__init__()
        self.student = student
        self.teacher = copy.deepcopy(student)
        for p in self.teacher.parameters():
            p.requires_grad_(False)
        self.teacher.eval()
        self.base_m = base_m
        self.final_m = final_m
        self.total_steps = total_steps
        self.step = 0

    def current_momentum(self) -> float:
        return momentum_schedule(min(self.step, self.total_steps), self.total_steps, self.base_m, self.final_m)

    def update_teacher(self, m: float | None = None) -> float:
        m = self.current_momentum() if m is None else m
        ema_update(self.student, self.teacher, m)
        self.step += 1
        return m

    def momentum_state(self) -> dict:
        return {
            "base_m": self.base_m,
            "final_m": self.final_m,
            "step": self.step,
            "total_steps": self.total_steps,
        }

    def load_momentum_state(self, state: dict) -> None:
        self.base_m = state["base_m"]
        self.final_m = state["final_m"]
        self.step = state["step"]
        self.total_steps = state["total_steps"]


class CheckpointError(ValueError):
    pass


def save_checkpoint(path: str | Path, payload: dict) -> Path:
    """Write an archive; ``payload`` must carry the documented top-level fields."""
    required = {"encoder_config", "student_params", "teacher_params", "momentum_state", "trainer_state", "rng_seed"}
    missing = required - payload.keys()
    if missing:
        raise CheckpointError(f"checkpoint payload missing fields: {sorted(missing)}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.BytesIO()
    torch.save(_canonical({"format_version": CHECKPOINT_FORMAT_VERSION, **payload}), buf)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(_stable_serialization_id(buf.getvalue()))
    tmp.replace(path)
    return path


def _canonical(obj):
    # pickle memoizes strings by identity; interning makes a reloaded payload pickle the same way
    if isinstance(obj, dict):
        return {_canonical(k): _canonical(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return type(obj)(_canonical(v) for v in obj)
    if isinstance(obj, str):
        return sys.intern(obj)
    return obj


def _stable_serialization_id(raw: bytes) -> bytes:
    """Replace torch's random per-save archive id with a digest of the other records,
    so equal payloads serialize to equal bytes."""
    with zipfile.ZipFile(io.BytesIO(raw)) as zf:
        infos = zf.infolist()
        target = next((i for i in infos if i.filename.endswith(".data/serialization_id")), None)
        if target is None:
            return raw
        digest = hashlib.sha1()
        for info in infos:
            if info is not target:
                digest.update(info.filename.encode() + zf.read(info))
        start_dir = zf.start_dir
    new_id = digest.hexdigest().encode()
    if len(new_id) != target.file_size or target.compress_type != zipfile.ZIP_STORED:
        return raw
    crc = zlib.crc32(new_id)
    buf = bytearray(raw)
    off = target.header_offset
    name_len, extra_len = struct.unpack_from("<HH", buf, off + 26)
    data = off + 30 + name_len + extra_len
    buf[data : data + len(new_id)] = new_id
    if target.flag_bits & 0x8:  # CRC lives in the trailing data descriptor
        desc = data + len(new_id)
        desc += 4 if buf[desc : desc + 4] == b"PK\x07\x08" else 0
        struct.pack_into("<I", buf, desc, crc)
    else:
        struct.pack_into("<I", buf, off + 14, crc)
    pos, name = start_dir, target.filename.encode()
    while buf[pos : pos + 4] == b"PK\x01\x02":
        n, x, c = struct.unpack_from("<HHH", buf, pos + 28)
        if bytes(buf[pos + 46 : pos + 46 + n]) == name:
            struct.pack_into("<I", buf, pos + 16, crc)
        pos += 46 + n + x + c
    return bytes(buf)


def load_checkpoint(path: str | Path) -> dict:
    archive = torch.load(Path(path), map_location="cpu", weights_only=True)
    version = archive.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint format_version {version!r} (expected {CHECKPOINT_FORMAT_VERSION})"
        )
    return archive


def load_teacher(path: str | Path) -> PatchEncoder:
    """Rebuild the frozen teacher encoder from a checkpoint, in eval mode."""
    archive = load_checkpoint(path)
    encoder = PatchEncoder(EncoderConfig(**archive["encoder_config"]))
    encoder.load_state_dict(archive["teacher_params"])
    encoder.eval()
    for p in encoder.parameters():
        p.requires_grad_(False)
    return encoder


def encoder_config_dict(config: EncoderConfig) -> dict:
    return asdict(config)
