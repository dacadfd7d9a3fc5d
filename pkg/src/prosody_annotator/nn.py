"""Differentiable building blocks, the parameter store, Adam and checkpoints.

Tensors and reverse-mode gradients come from torch; everything the models
touch goes through the shape-checked functions below so that contract
violations surface with both offending shapes in the message.
"""

from __future__ import annotations

import io
import math
import struct
from collections import OrderedDict
from typing import Iterable

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .core import ProsodyError

LN_EPS = 1e-5


class ShapeError(ProsodyError, ValueError):
    pass


class StateError(ProsodyError, RuntimeError):
    pass


class CheckpointError(ProsodyError):
    pass


def _shapes(*ts) -> str:
    return " vs ".join(str(tuple(t.shape)) for t in ts)


# ---------------------------------------------------------------------------
# functional ops

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.dim() < 1 or b.dim() < 1 or a.shape[-1] != b.shape[-2 if b.dim() > 1 else 0]:
        raise ShapeError(f"matmul inner dimensions differ: {_shapes(a, b)}")
    return a @ b


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        torch.broadcast_shapes(a.shape, b.shape)
    except RuntimeError:
        raise ShapeError(f"add shapes do not broadcast: {_shapes(a, b)}") from None
    return a + b


def relu(x: Tensor) -> Tensor:
    return torch.clamp_min(x, 0.0)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    return torch.softmax(x, dim=axis)


def layer_norm(x: Tensor, weight: Tensor | None = None, bias: Tensor | None = None,
               eps: float = LN_EPS) -> Tensor:
    d = x.shape[-1]
    for p in (weight, bias):
        if p is not None and tuple(p.shape) != (d,):
            raise ShapeError(f"layer_norm affine shape mismatch: {_shapes(x, p)}")
    mean = x.mean(dim=-1, keepdim=True)
    var = ((x - mean) ** 2).mean(dim=-1, keepdim=True)
    y = (x - mean) / torch.sqrt(var + eps)
    if weight is not None:
        y = y * weight
    if bias is not None:
        y = y + bias
    return y


def embedding_lookup(table: Tensor, ids: Tensor) -> Tensor:
    if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= table.shape[0]):
        raise ShapeError(f"embedding id out of range [0, {table.shape[0]})")
    return table[ids]


def masked_fill(x: Tensor, mask: Tensor, value: float) -> Tensor:
    """Set ``x`` to ``value`` where ``mask`` is True (mask broadcasts over ``x``)."""
    if mask.dtype != torch.bool:
        raise ShapeError("mask must be boolean")
    try:
        if torch.broadcast_shapes(x.shape, mask.shape) != x.shape:
            raise RuntimeError
    except RuntimeError:
        raise ShapeError(f"mask does not broadcast to input: {_shapes(x, mask)}") from None
    return x.masked_fill(mask, value)


def conv1d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: int = 0, groups: int = 1) -> Tensor:
    """x: (B, C_in, T); weight: (C_out, C_in / groups, K)."""
    if x.dim() != 3 or weight.dim() != 3 or x.shape[1] != weight.shape[1] * groups:
        raise ShapeError(f"conv1d channel mismatch: {_shapes(x, weight)} (groups={groups})")
    return F.conv1d(x, weight, bias, stride=stride, padding=padding, groups=groups)


def depthwise_conv1d(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Per-channel 'same' convolution; weight: (C, 1, K) with odd K."""
    k = weight.shape[-1]
    if k % 2 != 1:
        raise ShapeError(f"depthwise kernel must be odd, got {k}")
    return conv1d(x, weight, bias, padding=k // 2, groups=x.shape[1])


def pointwise_conv1d(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    return conv1d(x, weight, bias)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride=1, padding=0) -> Tensor:
    """x: (B, C_in, H, W); weight: (C_out, C_in, kh, kw)."""
    if x.dim() != 4 or weight.dim() != 4 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv2d channel mismatch: {_shapes(x, weight)}")
    return F.conv2d(x, weight, bias, stride=stride, padding=padding)


def attention(q: Tensor, k: Tensor, v: Tensor, mask: Tensor | None = None,
              return_weights: bool = False):
    """softmax(q k^T / sqrt(d)) v over the valid keys.

    q: (..., n, d), k and v: (..., m, d), mask: broadcastable to (..., m),
    True where the key is valid.
    """
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"attention shape mismatch: q {tuple(q.shape)}, k {tuple(k.shape)}, v {tuple(v.shape)}")
    scores = matmul(q, k.transpose(-1, -2)) / math.sqrt(q.shape[-1])
    if mask is not None:
        if mask.shape[-1] != k.shape[-2]:
            raise ShapeError(f"attention mask covers {mask.shape[-1]} keys, got {k.shape[-2]}")
        if not bool(mask.any(dim=-1).all()):
            raise ShapeError("attention row has every key masked")
        scores = masked_fill(scores, ~mask.unsqueeze(-2), float("-inf"))
    w = softmax(scores, axis=-1)
    out = matmul(w, v)
    return (out, w) if return_weights else out


# ---------------------------------------------------------------------------
# layers

def _uniform_(t: Tensor, bound: float, gen: torch.Generator) -> None:
    with torch.no_grad():
        t.copy_((torch.rand(t.shape, generator=gen, dtype=torch.float64) * 2 - 1) * bound)


class Linear(nn.Module):
    def __init__(self, d_in: int, d_out: int, gen: torch.Generator, bias: bool = True):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(d_out, d_in))
        self.bias = nn.Parameter(torch.empty(d_out)) if bias else None
        bound = 1.0 / math.sqrt(d_in)
        _uniform_(self.weight, bound, gen)
        if self.bias is not None:
            _uniform_(self.bias, bound, gen)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.weight.shape[1]:
            raise ShapeError(f"linear expects width {self.weight.shape[1]}: {_shapes(x, self.weight)}")
        y = matmul(x, self.weight.t())
        return y if self.bias is None else y + self.bias


class LayerNorm(nn.Module):
    def __init__(self, d: int):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(d))
        self.bias = nn.Parameter(torch.zeros(d))

    def forward(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.weight, self.bias)


class Embedding(nn.Module):
    def __init__(self, n: int, d: int, gen: torch.Generator):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(n, d))
        with torch.no_grad():
            self.weight.copy_(0.02 * torch.randn(n, d, generator=gen, dtype=torch.float64))

    def forward(self, ids: Tensor) -> Tensor:
        return embedding_lookup(self.weight, ids)


class Conv1d(nn.Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, gen: torch.Generator,
                 stride: int = 1, padding: int = 0, groups: int = 1):
        super().__init__()
        self.stride, self.padding, self.groups = stride, padding, groups
        self.weight = nn.Parameter(torch.empty(c_out, c_in // groups, kernel))
        self.bias = nn.Parameter(torch.empty(c_out))
        bound = 1.0 / math.sqrt(c_in // groups * kernel)
        _uniform_(self.weight, bound, gen)
        _uniform_(self.bias, bound, gen)

    def forward(self, x: Tensor) -> Tensor:
        return conv1d(x, self.weight, self.bias, self.stride, self.padding, self.groups)


class Conv2d(nn.Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, gen: torch.Generator,
                 stride=1, padding=0):
        super().__init__()
        self.stride, self.padding = stride, padding
        self.weight = nn.Parameter(torch.empty(c_out, c_in, kernel, kernel))
        self.bias = nn.Parameter(torch.empty(c_out))
        bound = 1.0 / math.sqrt(c_in * kernel * kernel)
        _uniform_(self.weight, bound, gen)
        _uniform_(self.bias, bound, gen)

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.stride, self.padding)


class MultiHeadAttention(nn.Module):
    """Multi-head attention with separate query and key/value inputs."""

    def __init__(self, d_model: int, heads: int, gen: torch.Generator, d_kv: int | None = None):
        super().__init__()
        if d_model % heads:
            raise ShapeError(f"model width {d_model} not divisible by {heads} heads")
        d_kv = d_model if d_kv is None else d_kv
        self.heads = heads
        self.q = Linear(d_model, d_model, gen)
        self.k = Linear(d_kv, d_model, gen)
        self.v = Linear(d_kv, d_model, gen)
        self.o = Linear(d_model, d_model, gen)

    def _split(self, x: Tensor) -> Tensor:
        b, n, d = x.shape
        return x.reshape(b, n, self.heads, d // self.heads).transpose(1, 2)

    def forward(self, x_q: Tensor, x_kv: Tensor, key_mask: Tensor | None = None,
                return_weights: bool = False):
        """x_q: (B, n, D), x_kv: (B, m, D_kv), key_mask: (B, m) True where valid."""
        q, k, v = self._split(self.q(x_q)), self._split(self.k(x_kv)), self._split(self.v(x_kv))
        mask = None if key_mask is None else key_mask[:, None, :]
        out, w = attention(q, k, v, mask, return_weights=True)
        b, h, n, dh = out.shape
        out = self.o(out.transpose(1, 2).reshape(b, n, h * dh))
        return (out, w) if return_weights else out


class FeedForward(nn.Module):
    def __init__(self, d: int, d_ff: int, gen: torch.Generator):
        super().__init__()
        self.fc1 = Linear(d, d_ff, gen)
        self.fc2 = Linear(d_ff, d, gen)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(relu(self.fc1(x)))


def sinusoid_positions(n: int, d: int, dtype=torch.float32) -> Tensor:
    pos = torch.arange(n, dtype=torch.float64)[:, None]
    i = torch.arange(0, d, 2, dtype=torch.float64)
    angle = pos / torch.pow(10000.0, i / d)
    pe = torch.zeros(n, d, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(angle)
    pe[:, 1::2] = torch.cos(angle[:, : d // 2])
    return pe.to(dtype)


# ---------------------------------------------------------------------------
# parameter store, gradients, Adam

class ParameterStore:
    """Trainable tensors by name, with Adam moments and a step counter."""

    def __init__(self, named: Iterable[tuple[str, nn.Parameter]]):
        self.params: "OrderedDict[str, nn.Parameter]" = OrderedDict()
        for name, p in named:
            if name in self.params:
                raise StateError(f"duplicate parameter name {name!r}")
            self.params[name] = p
        self.m = {n: torch.zeros_like(p) for n, p in self.params.items()}
        self.v = {n: torch.zeros_like(p) for n, p in self.params.items()}
        self.t = 0

    @classmethod
    def from_module(cls, module: nn.Module) -> "ParameterStore":
        return cls((n, p) for n, p in module.named_parameters() if p.requires_grad)

    def __len__(self) -> int:
        return len(self.params)

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __getitem__(self, name: str) -> nn.Parameter:
        return self.params[name]

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def gradients(self) -> dict[str, Tensor | None]:
        return {n: p.grad for n, p in self.params.items()}


def backward(loss: Tensor, store: ParameterStore) -> None:
    """Accumulate d(loss)/d(param) into every store entry (exact zeros when unreachable)."""
    if not isinstance(loss, Tensor) or loss.grad_fn is None:
        raise StateError("backward called without a recorded forward pass")
    if loss.numel() != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    loss.backward()
    for p in store.params.values():
        if p.grad is None:
            p.grad = torch.zeros_like(p)


def adam_step(store: ParameterStore, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> None:
    missing = [n for n, p in store.params.items() if p.grad is None]
    if missing:
        raise StateError(f"no gradient for {missing[:3]}{'...' if len(missing) > 3 else ''}; run backward first")
    store.t += 1
    c1 = 1.0 - beta1 ** store.t
    c2 = 1.0 - beta2 ** store.t
    with torch.no_grad():
        for n, p in store.params.items():
            g = p.grad
            m, v = store.m[n], store.v[n]
            m.mul_(beta1).add_(g, alpha=1.0 - beta1)
            v.mul_(beta2).addcmul_(g, g, value=1.0 - beta2)
            step = (m / c1) / (torch.sqrt(v / c2) + eps)
            p.sub_(lr * step)


# ---------------------------------------------------------------------------
# checkpoints
#
# layout: MAGIC, u32 version, u32 count, then per entry
#   u32 name length, utf-8 name, u32 rank, rank x u32 dims, float32 LE values

MAGIC = b"PROSCKPT"
CKPT_VERSION = 1


def state_bytes(named: Iterable[tuple[str, Tensor]]) -> bytes:
    buf = io.BytesIO()
    items = list(named)
    buf.write(MAGIC)
    buf.write(struct.pack("<II", CKPT_VERSION, len(items)))
    for name, t in items:
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(t.detach().cpu().numpy(), dtype="<f4")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    return buf.getvalue()


def module_bytes(module: nn.Module) -> bytes:
    return state_bytes(module.state_dict().items())


def save_checkpoint(module: nn.Module, path) -> None:
    with open(path, "wb") as fh:
        fh.write(module_bytes(module))


def parse_checkpoint(data: bytes) -> "OrderedDict[str, np.ndarray]":
    if not data.startswith(MAGIC):
        raise CheckpointError("not a checkpoint (bad magic)")
    off = len(MAGIC)
    try:
        version, count = struct.unpack_from("<II", data, off)
        off += 8
        if version != CKPT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        out: "OrderedDict[str, np.ndarray]" = OrderedDict()
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", data, off)
            off += 4
            name = data[off:off + nlen].decode("utf-8")
            off += nlen
            (rank,) = struct.unpack_from("<I", data, off)
            off += 4
            shape = struct.unpack_from(f"<{rank}I", data, off)
            off += 4 * rank
            size = int(np.prod(shape)) if rank else 1
            arr = np.frombuffer(data, dtype="<f4", count=size, offset=off).reshape(shape)
            off += 4 * size
            out[name] = arr.copy()
    except struct.error as exc:
        raise CheckpointError(f"truncated checkpoint: {exc}") from None
    except ValueError as exc:
        raise CheckpointError(f"corrupt checkpoint: {exc}") from None
    if off != len(data):
        raise CheckpointError("trailing bytes after last entry")
    return out


def load_checkpoint(path) -> "OrderedDict[str, np.ndarray]":
    with open(path, "rb") as fh:
        return parse_checkpoint(fh.read())


def load_into(module: nn.Module, entries, prefix: str = "") -> None:
    """Copy checkpoint entries into ``module``; names and shapes must match exactly."""
    state = module.state_dict()
    wanted = {k[len(prefix):]: v for k, v in entries.items() if k.startswith(prefix)}
    if set(wanted) != set(state):
        missing = sorted(set(state) - set(wanted))
        extra = sorted(set(wanted) - set(state))
        raise CheckpointError(f"checkpoint/model mismatch: missing {missing[:4]}, unexpected {extra[:4]}")
    for name, target in state.items():
        arr = wanted[name]
        if tuple(arr.shape) != tuple(target.shape):
            raise CheckpointError(f"shape mismatch for {name}: {tuple(arr.shape)} vs {tuple(target.shape)}")
        with torch.no_grad():
            target.copy_(torch.from_numpy(arr).to(target.dtype))
