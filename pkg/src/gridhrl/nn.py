"""Small differentiable building blocks on top of torch.

Layers draw their initial weights from an explicit ``torch.Generator`` so
identical seeds give identical networks. Dense layers use uniform fan-in
scaling ``U(-1/sqrt(fan_in), 1/sqrt(fan_in))`` for weights and zero
biases; the LSTM uses ``U(-1/sqrt(hidden), 1/sqrt(hidden))`` everywhere.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

ACTIVATIONS = {
    "tanh": torch.tanh,
    "relu": torch.relu,
    "linear": lambda x: x,
}


def generator(seed: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(int(seed) & ((1 << 63) - 1))
    return g


def _uniform(shape, bound: float, gen: torch.Generator, dtype) -> torch.Tensor:
    return (torch.rand(shape, generator=gen, dtype=torch.float64) * 2 - 1).mul_(bound).to(dtype)


@dataclass(frozen=True)
class MlpSpec:
    sizes: tuple[int, ...]  # input, hidden..., output
    activation: str = "tanh"
    out_activation: str = "linear"

    def __post_init__(self):
        if len(self.sizes) < 2:
            raise ValueError("an MLP needs at least input and output sizes")
        for name in (self.activation, self.out_activation):
            if name not in ACTIVATIONS:
                raise ValueError(f"unknown activation {name!r}")


class Mlp(nn.Module):
    def __init__(self, spec: MlpSpec, gen: torch.Generator, dtype=torch.float32):
        super().__init__()
        self.spec = spec
        self.layers = nn.ModuleList()
        for fan_in, fan_out in zip(spec.sizes[:-1], spec.sizes[1:]):
            layer = nn.Linear(fan_in, fan_out, dtype=dtype)
            with torch.no_grad():
                layer.weight.copy_(_uniform((fan_out, fan_in), 1 / math.sqrt(fan_in), gen, dtype))
                layer.bias.zero_()
            self.layers.append(layer)

    @property
    def in_dim(self) -> int:
        return self.spec.sizes[0]

    @property
    def out_dim(self) -> int:
        return self.spec.sizes[-1]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.in_dim:
            raise ValueError(f"expected input dim {self.in_dim}, got {x.shape[-1]}")
        act = ACTIVATIONS[self.spec.activation]
        last = len(self.layers) - 1
        for i, layer in enumerate(self.layers):
            x = layer(x)
            x = ACTIVATIONS[self.spec.out_activation](x) if i == last else act(x)
        return x


@dataclass(frozen=True)
class LstmSpec:
    input_dim: int
    hidden_dim: int


class Lstm(nn.Module):
    """Single-layer LSTM with gate order (input, forget, cell, output).

    ``valid`` marks real entries of a left-padded sequence; padded steps
    leave the state untouched, so padding never changes the encoding.
    """

    def __init__(self, spec: LstmSpec, gen: torch.Generator, dtype=torch.float32):
        super().__init__()
        self.spec = spec
        h, i = spec.hidden_dim, spec.input_dim
        bound = 1 / math.sqrt(h)
        self.w_ih = nn.Parameter(_uniform((4 * h, i), bound, gen, dtype))
        self.w_hh = nn.Parameter(_uniform((4 * h, h), bound, gen, dtype))
        self.bias = nn.Parameter(_uniform((4 * h,), bound, gen, dtype))

    def cell(self, x, h, c):
        gates = x @ self.w_ih.T + h @ self.w_hh.T + self.bias
        i, f, g, o = gates.chunk(4, dim=-1)
        c = torch.sigmoid(f) * c + torch.sigmoid(i) * torch.tanh(g)
        h = torch.sigmoid(o) * torch.tanh(c)
        return h, c

    def forward(self, seq: torch.Tensor, valid: torch.Tensor | None = None):
        """``seq``: (batch, time, input). Returns (all hidden states, final hidden)."""
        if seq.dim() != 3 or seq.shape[-1] != self.spec.input_dim:
            raise ValueError(f"expected (batch, time, {self.spec.input_dim}) input, got {tuple(seq.shape)}")
        if seq.shape[1] < 1:
            raise ValueError("sequence length must be >= 1")
        b = seq.shape[0]
        h = seq.new_zeros(b, self.spec.hidden_dim)
        c = seq.new_zeros(b, self.spec.hidden_dim)
        outs = []
        for t in range(seq.shape[1]):
            h_new, c_new = self.cell(seq[:, t], h, c)
            if valid is None:
                h, c = h_new, c_new
            else:
                keep = valid[:, t : t + 1]
                h = torch.where(keep, h_new, h)
                c = torch.where(keep, c_new, c)
            outs.append(h)
        return torch.stack(outs, dim=1), h


# -- checkpoint container ------------------------------------------------------

CHECKPOINT_MAGIC = b"GHRLCKPT"
CHECKPOINT_VERSION = 1
_DTYPES = {torch.float32: (0, "<f4"), torch.float64: (1, "<f8"), torch.int64: (2, "<i8")}
_DTYPE_CODES = {code: (dt, fmt) for dt, (code, fmt) in _DTYPES.items()}


class CheckpointVersionError(ValueError):
    """Checkpoint written by an incompatible format version or config."""


def save_checkpoint(path, tensors: dict[str, torch.Tensor], meta: dict | None = None) -> None:
    """Write named tensors as: magic, u32 version, u32 meta length + JSON,
    u32 count, then per tensor u16 name length + name, u8 dtype, u8 ndim,
    u32 dims, raw little-endian values."""
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(meta_bytes)))
        fh.write(meta_bytes)
        fh.write(struct.pack("<I", len(tensors)))
        for name, t in tensors.items():
            t = t.detach().cpu()
            code, fmt = _DTYPES[t.dtype]
            raw = name.encode()
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<BB", code, t.dim()))
            fh.write(struct.pack(f"<{t.dim()}I", *t.shape))
            fh.write(np.ascontiguousarray(t.numpy(), dtype=fmt).tobytes())


def load_checkpoint(path) -> tuple[dict[str, torch.Tensor], dict]:
    data = Path(path).read_bytes()
    if not data.startswith(CHECKPOINT_MAGIC):
        raise CheckpointVersionError(f"{path} is not a checkpoint file")
    pos = len(CHECKPOINT_MAGIC)
    version, meta_len = struct.unpack_from("<II", data, pos)
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(f"checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    pos += 8
    meta = json.loads(data[pos : pos + meta_len].decode())
    pos += meta_len
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    out = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos : pos + n].decode()
        pos += n
        code, ndim = struct.unpack_from("<BB", data, pos)
        pos += 2
        shape = struct.unpack_from(f"<{ndim}I", data, pos)
        pos += 4 * ndim
        dtype, fmt = _DTYPE_CODES[code]
        size = int(np.prod(shape)) if shape else 1
        nbytes = size * np.dtype(fmt).itemsize
        arr = np.frombuffer(data, dtype=fmt, count=size, offset=pos).reshape(shape)
        pos += nbytes
        out[name] = torch.from_numpy(arr.astype(arr.dtype.newbyteorder("="))).to(dtype)
    return out, meta
