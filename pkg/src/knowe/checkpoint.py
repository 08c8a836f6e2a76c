"""Binary model checkpoints.

Layout (all integers little-endian u32 unless noted)::

    b"KNWE"
    version
    n_layers, dims[n_layers + 1]          trunk widths, input first
    proj_hidden, proj_dim
    n_blocks, block_sizes[n_blocks]       classifier column blocks
    flag bits                              see FLAG_BITS
    mode index                             position in protocol.MODES
    seed (u64), t
    lam (f32), base coarse accuracy (f32, NaN when absent)
    f32 payload: input_mean, input_scale, then (W, b) of every trunk layer,
                 W1, b1, W2, b2 of the projection head, then the classifier W
                 (d x n_columns), each array in C order
    u8 frozen mask, one byte per classifier column

Parameters are stored as 32-bit floats, so a loaded model reproduces the saved
one up to float32 rounding. Random state is not stored: every stream is derived
from the seed.
"""

from __future__ import annotations

import math
import os
import struct
import tempfile

import numpy as np

from .classifier import ClassifierHead
from .embedding import EmbeddingNet
from .errors import FormatError
from .protocol import MODES, Model, RunFlags

MAGIC = b"KNWE"
VERSION = 1
FLAG_BITS = (
    "contrastive_base",
    "freeze_embedding",
    "normalize_weights",
    "freeze_classifier",
    "head_normalize",
    "net_frozen",
)


def _u32(*xs) -> bytes:
    return struct.pack(f"<{len(xs)}I", *xs)


def to_bytes(model: Model) -> bytes:
    net, head, flags = model.net, model.head, model.flags
    dims = [net.input_dim] + [W.shape[1] for W, _ in net.trunk]
    (W1, _), (W2, _) = net.head
    bits = dict(
        contrastive_base=flags.contrastive_base,
        freeze_embedding=flags.freeze_embedding,
        normalize_weights=flags.normalize_weights,
        freeze_classifier=flags.freeze_classifier,
        head_normalize=head.normalize,
        net_frozen=net.frozen,
    )
    word = sum(1 << i for i, name in enumerate(FLAG_BITS) if bits[name])
    acc = math.nan if model.base_coarse_accuracy is None else model.base_coarse_accuracy
    parts = [
        MAGIC,
        _u32(VERSION),
        _u32(len(net.trunk), *dims),
        _u32(W1.shape[1], W2.shape[1]),
        _u32(len(head.blocks), *head.blocks),
        _u32(word, MODES.index(flags.mode)),
        struct.pack("<Q", model.seed),
        _u32(model.t),
        struct.pack("<2f", head.lam, acc),
    ]
    arrays = [net.input_mean, net.input_scale, *net.params(), head.W]
    parts += [np.ascontiguousarray(a, dtype="<f4").tobytes() for a in arrays]
    parts.append(head.frozen.astype(np.uint8).tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"checkpoint truncated at byte {len(self.buf)} (needed {self.pos + n})")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u32s(self, n: int) -> list:
        return list(struct.unpack(f"<{n}I", self.take(4 * n)))

    def f32(self, shape) -> np.ndarray:
        count = int(np.prod(shape))
        return np.frombuffer(self.take(4 * count), dtype="<f4").astype(np.float64).reshape(shape)


def from_bytes(buf: bytes) -> Model:
    r = _Reader(buf)
    magic = r.take(4)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    version = r.u32()
    if version != VERSION:
        raise FormatError(f"checkpoint version {version} is not supported (this build reads version {VERSION})")
    n_layers = r.u32()
    if n_layers < 1:
        raise FormatError("checkpoint has no trunk layers")
    dims = r.u32s(n_layers + 1)
    proj_hidden, proj_dim = r.u32s(2)
    blocks = r.u32s(r.u32())
    if not blocks:
        raise FormatError("checkpoint has no classifier blocks")
    word, mode_idx = r.u32s(2)
    if mode_idx >= len(MODES):
        raise FormatError(f"unknown mode index {mode_idx}")
    (seed,) = struct.unpack("<Q", r.take(8))
    t = r.u32()
    lam, acc = struct.unpack("<2f", r.take(8))
    bits = {name: bool(word >> i & 1) for i, name in enumerate(FLAG_BITS)}

    d_in, d_f = dims[0], dims[-1]
    mean = r.f32((d_in,))
    scale = r.f32((d_in,))
    trunk = [(r.f32((a, b)), r.f32((b,))) for a, b in zip(dims[:-1], dims[1:])]
    head_net = [(r.f32((d_f, proj_hidden)), r.f32((proj_hidden,))), (r.f32((proj_hidden, proj_dim)), r.f32((proj_dim,)))]
    n_cols = sum(blocks)
    W = r.f32((d_f, n_cols))
    frozen = np.frombuffer(r.take(n_cols), dtype=np.uint8).astype(bool)
    if r.pos != len(buf):
        raise FormatError(f"{len(buf) - r.pos} trailing bytes after checkpoint payload")

    flags = RunFlags(
        contrastive_base=bits["contrastive_base"],
        freeze_embedding=bits["freeze_embedding"],
        normalize_weights=bits["normalize_weights"],
        freeze_classifier=bits["freeze_classifier"],
        mode=MODES[mode_idx],
    )
    net = EmbeddingNet(trunk, head_net, mean, scale, frozen=bits["net_frozen"])
    head = ClassifierHead(W, frozen, list(blocks), bits["head_normalize"], float(lam))
    return Model(net, head, flags, seed, t, None if math.isnan(acc) else float(acc))


def atomic_write(path, data: bytes) -> None:
    """Write via a temporary file in the target directory, then rename."""
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(path, model: Model) -> None:
    atomic_write(path, to_bytes(model))


def load_checkpoint(path) -> Model:
    with open(path, "rb") as fh:
        return from_bytes(fh.read())
