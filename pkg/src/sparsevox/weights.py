"""Learnable parameters and their binary container.

Container layout (little-endian)::

    magic b"SVXW" | u16 version | u32 tensor count
    per tensor: u16 name length | name (utf-8) | u8 ndim | u32 * ndim shape
                | u32 crc32 of data | float32 data

Tensors are stored as float32; all arithmetic upcasts to float64.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .config import PipelineConfig
from .errors import DimensionError, FormatError

WEIGHT_MAGIC = b"SVXW"
WEIGHT_VERSION = 1


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(np.float32)


def rpe_table_size(r_max) -> int:
    return int(np.prod([2 * int(r) - 1 for r in r_max]))


@dataclass(eq=False)
class BlockWeights:
    """Parameters of one attention block.

    ``w_k``, ``w_v`` and ``rpe`` hold one entry per head group.
    """

    w_q: np.ndarray  # (C, C)
    w_k: list[np.ndarray]  # M x (C, C/M)
    w_v: list[np.ndarray]  # M x (C, C/M)
    rpe: list[np.ndarray]  # M x (C/M, R)
    ffn_w1: np.ndarray  # (C, H)
    ffn_b1: np.ndarray  # (H,)
    ffn_w2: np.ndarray  # (H, C)
    ffn_b2: np.ndarray  # (C,)
    ln_scale: np.ndarray  # (C,)
    ln_shift: np.ndarray  # (C,)
    heads: tuple[int, ...]
    rpe_extent: tuple[int, int, int]
    ln_eps: float = 1e-5

    @property
    def channels(self) -> int:
        return self.w_q.shape[0]

    @property
    def num_groups(self) -> int:
        return len(self.w_k)

    @property
    def group_width(self) -> int:
        return self.channels // self.num_groups

    def tensors(self) -> dict[str, np.ndarray]:
        out = {"w_q": self.w_q}
        for m in range(self.num_groups):
            out[f"g{m}.w_k"] = self.w_k[m]
            out[f"g{m}.w_v"] = self.w_v[m]
            out[f"g{m}.rpe"] = self.rpe[m]
        for name in ("ffn_w1", "ffn_b1", "ffn_w2", "ffn_b2", "ln_scale", "ln_shift"):
            out[name] = getattr(self, name)
        return out

    def validate(self) -> None:
        c = self.channels
        m = self.num_groups
        d = c // m
        r = rpe_table_size(self.rpe_extent)
        expect = {"w_q": (c, c)}
        for g in range(m):
            expect[f"g{g}.w_k"] = (c, d)
            expect[f"g{g}.w_v"] = (c, d)
            expect[f"g{g}.rpe"] = (d, r)
        h = self.ffn_w1.shape[1]
        expect.update(ffn_w1=(c, h), ffn_b1=(h,), ffn_w2=(h, c), ffn_b2=(c,),
                      ln_scale=(c,), ln_shift=(c,))
        for name, arr in self.tensors().items():
            if arr.shape != expect[name]:
                raise DimensionError(f"{name}: expected shape {expect[name]}, got {arr.shape}")
            if not np.isfinite(arr).all():
                raise DimensionError(f"{name}: non-finite values")
        if len(self.heads) != m or any(d % h for h in self.heads):
            raise DimensionError(f"heads {self.heads} incompatible with {m} groups of width {d}")

    @classmethod
    def from_tensors(cls, t: dict, heads, rpe_extent, ln_eps=1e-5) -> "BlockWeights":
        m = len(heads)
        return cls(
            w_q=t["w_q"],
            w_k=[t[f"g{g}.w_k"] for g in range(m)],
            w_v=[t[f"g{g}.w_v"] for g in range(m)],
            rpe=[t[f"g{g}.rpe"] for g in range(m)],
            ffn_w1=t["ffn_w1"], ffn_b1=t["ffn_b1"], ffn_w2=t["ffn_w2"], ffn_b2=t["ffn_b2"],
            ln_scale=t["ln_scale"], ln_shift=t["ln_shift"],
            heads=tuple(heads), rpe_extent=tuple(rpe_extent), ln_eps=ln_eps,
        )


def init_block(cfg: PipelineConfig, rng: np.random.Generator, rpe_extent=None) -> BlockWeights:
    """Xavier-uniform projections and FFN, zero biases and position tables, unit LN scale."""
    c, d, h = cfg.channels, cfg.group_width, cfg.hidden
    rpe_extent = tuple(rpe_extent or cfg.rpe_extent)
    r = rpe_table_size(rpe_extent)
    w_q = xavier_uniform(rng, c, c)
    w_k, w_v = [], []
    for _ in range(cfg.num_groups):
        w_k.append(xavier_uniform(rng, c, d))
        w_v.append(xavier_uniform(rng, c, d))
    return BlockWeights(
        w_q=w_q, w_k=w_k, w_v=w_v,
        rpe=[np.zeros((d, r), np.float32) for _ in range(cfg.num_groups)],
        ffn_w1=xavier_uniform(rng, c, h), ffn_b1=np.zeros(h, np.float32),
        ffn_w2=xavier_uniform(rng, h, c), ffn_b2=np.zeros(c, np.float32),
        ln_scale=np.ones(c, np.float32), ln_shift=np.zeros(c, np.float32),
        heads=cfg.heads_per_group, rpe_extent=rpe_extent, ln_eps=cfg.ln_eps,
    )


@dataclass(eq=False)
class VoteModuleWeights:
    """Offset MLP (C -> H -> 3) and objectness MLP (C -> H -> 1)."""

    off_w1: np.ndarray
    off_b1: np.ndarray
    off_w2: np.ndarray
    off_b2: np.ndarray
    obj_w1: np.ndarray
    obj_b1: np.ndarray
    obj_w2: np.ndarray
    obj_b2: np.ndarray

    def tensors(self) -> dict[str, np.ndarray]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def zeros(cls, c: int, h: int = 64, dtype=np.float64) -> "VoteModuleWeights":
        z = lambda *s: np.zeros(s, dtype)  # noqa: E731
        return cls(z(c, h), z(h), z(h, 3), z(3), z(c, h), z(h), z(h, 1), z(1))


def init_vote(c: int, h: int, rng: np.random.Generator) -> VoteModuleWeights:
    return VoteModuleWeights(
        off_w1=xavier_uniform(rng, c, h), off_b1=np.zeros(h, np.float32),
        off_w2=xavier_uniform(rng, h, 3), off_b2=np.zeros(3, np.float32),
        obj_w1=xavier_uniform(rng, c, h), obj_b1=np.zeros(h, np.float32),
        obj_w2=xavier_uniform(rng, h, 1), obj_b2=np.zeros(1, np.float32),
    )


@dataclass(eq=False)
class ModelWeights:
    blocks: list[BlockWeights]
    context: BlockWeights
    pillar: BlockWeights
    vote: VoteModuleWeights

    def tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for i, b in enumerate(self.blocks):
            out.update({f"block{i}.{k}": v for k, v in b.tensors().items()})
        out.update({f"context.{k}": v for k, v in self.context.tensors().items()})
        out.update({f"pillar.{k}": v for k, v in self.pillar.tensors().items()})
        out.update({f"vote.{k}": v for k, v in self.vote.tensors().items()})
        return out


def init_weights(cfg: PipelineConfig, seed: int = 0) -> ModelWeights:
    """Deterministic weights for every block, the vote module and the pillar block."""
    rng = np.random.default_rng(seed)
    blocks = [init_block(cfg, rng) for _ in range(cfg.num_blocks)]
    context = init_block(cfg, rng)
    pillar_cfg = cfg.pillar_config()
    pillar = init_block(pillar_cfg, rng)
    vote = init_vote(cfg.channels, cfg.vote.hidden, rng)
    return ModelWeights(blocks, context, pillar, vote)


def save_tensors(tensors: dict[str, np.ndarray], path) -> None:
    parts = [WEIGHT_MAGIC, struct.pack("<HI", WEIGHT_VERSION, len(tensors))]
    for name, arr in tensors.items():
        data = np.ascontiguousarray(arr, dtype="<f4")
        raw = name.encode()
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack(f"<B{data.ndim}I", data.ndim, *data.shape))
        payload = data.tobytes()
        parts.append(struct.pack("<I", zlib.crc32(payload)))
        parts.append(payload)
    Path(path).write_bytes(b"".join(parts))


def load_tensors(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    try:
        return _parse_tensors(buf, path)
    except struct.error as exc:
        raise FormatError(f"{path}: truncated weight file ({exc})") from None


def _parse_tensors(buf: bytes, path) -> dict[str, np.ndarray]:
    if buf[:4] != WEIGHT_MAGIC:
        raise FormatError(f"{path}: not a weight file")
    version, count = struct.unpack_from("<HI", buf, 4)
    if version != WEIGHT_VERSION:
        raise FormatError(f"{path}: unsupported weight version {version}")
    off = 10
    out = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<H", buf, off)
        off += 2
        name = buf[off: off + n].decode()
        off += n
        (ndim,) = struct.unpack_from("<B", buf, off)
        shape = struct.unpack_from(f"<{ndim}I", buf, off + 1)
        off += 1 + 4 * ndim
        (crc,) = struct.unpack_from("<I", buf, off)
        off += 4
        nbytes = 4 * int(np.prod(shape, dtype=np.int64))
        payload = buf[off: off + nbytes]
        if len(payload) != nbytes:
            raise FormatError(f"{path}: tensor {name!r} truncated")
        if zlib.crc32(payload) != crc:
            raise FormatError(f"{path}: checksum mismatch in tensor {name!r}")
        out[name] = np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32)
        off += nbytes
    if off != len(buf):
        raise FormatError(f"{path}: {len(buf) - off} trailing bytes")
    return out


def save_weights(weights: ModelWeights, path) -> None:
    save_tensors(weights.tensors(), path)


def load_weights(path, cfg: PipelineConfig) -> ModelWeights:
    """Load a weight file and check every tensor against ``cfg``'s shapes."""
    t = load_tensors(path)

    def sub(prefix):
        p = prefix + "."
        return {k[len(p):]: v for k, v in t.items() if k.startswith(p)}

    try:
        blocks = [BlockWeights.from_tensors(sub(f"block{i}"), cfg.heads_per_group,
                                            cfg.rpe_extent, cfg.ln_eps)
                  for i in range(cfg.num_blocks)]
        context = BlockWeights.from_tensors(sub("context"), cfg.heads_per_group,
                                            cfg.rpe_extent, cfg.ln_eps)
        pcfg = cfg.pillar_config()
        pillar = BlockWeights.from_tensors(sub("pillar"), pcfg.heads_per_group,
                                           pcfg.rpe_extent, cfg.ln_eps)
        v = sub("vote")
        vote = VoteModuleWeights(**{f.name: v[f.name] for f in fields(VoteModuleWeights)})
    except KeyError as exc:
        raise FormatError(f"{path}: missing tensor {exc}") from None
    for b in [*blocks, context, pillar]:
        b.validate()
    c, h = cfg.channels, cfg.vote.hidden
    expect = dict(off_w1=(c, h), off_b1=(h,), off_w2=(h, 3), off_b2=(3,),
                  obj_w1=(c, h), obj_b1=(h,), obj_w2=(h, 1), obj_b2=(1,))
    for name, arr in vote.tensors().items():
        if arr.shape != expect[name]:
            raise DimensionError(f"vote.{name}: expected {expect[name]}, got {arr.shape}")
    return ModelWeights(blocks, context, pillar, vote)
