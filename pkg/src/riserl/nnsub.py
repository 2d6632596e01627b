"""Small differentiable layer set on top of torch autograd.

Dense, conv, LSTM cell with masked/no-grad unrolling, Huber loss, a hand-written
Adam, global-norm clipping and a flat binary parameter checkpoint format.
"""

from __future__ import annotations

import math
import struct
from contextlib import contextmanager
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, NumericFault, UsageError

CKPT_MAGIC = b"RISEckpt"
CKPT_VERSION = 1


_LAYER_CHECKS = False


@contextmanager
def layer_checks(on: bool = True):
    """Check every layer output for non-finite values while active."""
    global _LAYER_CHECKS
    prev, _LAYER_CHECKS = _LAYER_CHECKS, on
    try:
        yield
    finally:
        _LAYER_CHECKS = prev


def _guard(x: torch.Tensor, where: str) -> torch.Tensor:
    if _LAYER_CHECKS and not torch.isfinite(x).all():
        raise NumericFault("non-finite activation", where)
    return x


class ParamGroup(nn.Module):
    """A named set of tensors that is either trained or frozen as a whole."""

    def __init__(self, trainable: bool = True):
        super().__init__()
        self._trainable = trainable

    @property
    def trainable(self) -> bool:
        return self._trainable

    def freeze(self) -> "ParamGroup":
        self._trainable = False
        for p in self.parameters():
            p.requires_grad_(False)
        return self

    def named_tensors(self) -> dict[str, torch.Tensor]:
        return dict(self.state_dict(keep_vars=True))


def _uniform_fan_in(t: torch.Tensor, fan_in: int, generator: torch.Generator | None) -> None:
    bound = 1.0 / math.sqrt(fan_in)
    with torch.no_grad():
        t.uniform_(-bound, bound, generator=generator)


class Dense(nn.Module):
    def __init__(self, d_in: int, d_out: int, bias: bool = True, generator: torch.Generator | None = None,
                 name: str = "dense"):
        super().__init__()
        if d_in <= 0 or d_out <= 0:
            raise ConfigError(f"dense widths must be positive, got {d_in}->{d_out}")
        self.d_in, self.d_out, self.name = d_in, d_out, name
        self.weight = nn.Parameter(torch.empty(d_out, d_in))
        _uniform_fan_in(self.weight, d_in, generator)
        if bias:
            self.bias = nn.Parameter(torch.empty(d_out))
            _uniform_fan_in(self.bias, d_in, generator)
        else:
            self.register_parameter("bias", None)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.d_in:
            raise ConfigError(f"{self.name}: expected last dim {self.d_in}, got {tuple(x.shape)}")
        return _guard(F.linear(x, self.weight, self.bias), self.name)


class Conv2d(nn.Module):
    """Valid (unpadded) strided 2-D convolution over [B, C, H, W]."""

    def __init__(self, c_in: int, c_out: int, kernel: int, stride: int = 1,
                 generator: torch.Generator | None = None, name: str = "conv"):
        super().__init__()
        self.c_in, self.c_out, self.kernel, self.stride, self.name = c_in, c_out, kernel, stride, name
        fan_in = c_in * kernel * kernel
        self.weight = nn.Parameter(torch.empty(c_out, c_in, kernel, kernel))
        self.bias = nn.Parameter(torch.empty(c_out))
        _uniform_fan_in(self.weight, fan_in, generator)
        _uniform_fan_in(self.bias, fan_in, generator)

    def output_hw(self, h: int, w: int) -> tuple[int, int]:
        oh = (h - self.kernel) // self.stride + 1
        ow = (w - self.kernel) // self.stride + 1
        if oh <= 0 or ow <= 0:
            raise ConfigError(f"{self.name}: input {h}x{w} too small for kernel {self.kernel}")
        return oh, ow

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 4 or x.shape[1] != self.c_in:
            raise ConfigError(f"{self.name}: expected [B,{self.c_in},H,W], got {tuple(x.shape)}")
        return _guard(F.conv2d(x, self.weight, self.bias, stride=self.stride), self.name)


class LSTMCell(nn.Module):
    """Gate order i, f, g, o. Forget-gate bias starts at 1."""

    def __init__(self, d_in: int, hidden: int, generator: torch.Generator | None = None, name: str = "lstm"):
        super().__init__()
        self.d_in, self.hidden, self.name = d_in, hidden, name
        self.weight_ih = nn.Parameter(torch.empty(4 * hidden, d_in))
        self.weight_hh = nn.Parameter(torch.empty(4 * hidden, hidden))
        self.bias = nn.Parameter(torch.empty(4 * hidden))
        for t in (self.weight_ih, self.weight_hh, self.bias):
            _uniform_fan_in(t, hidden, generator)
        with torch.no_grad():
            self.bias[hidden:2 * hidden].fill_(1.0)

    def forward(self, x: torch.Tensor, h: torch.Tensor, c: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        gates = F.linear(x, self.weight_ih, self.bias) + F.linear(h, self.weight_hh)
        i, f, g, o = gates.chunk(4, dim=-1)
        c_new = torch.sigmoid(f) * c + torch.sigmoid(i) * torch.tanh(g)
        h_new = torch.sigmoid(o) * torch.tanh(c_new)
        return h_new, c_new

    def zero_state(self, batch: int, dtype=None) -> tuple[torch.Tensor, torch.Tensor]:
        dtype = dtype or self.weight_ih.dtype
        z = torch.zeros(batch, self.hidden, dtype=dtype)
        return z, z.clone()


def lstm_unroll(
    cell: LSTMCell,
    inputs: torch.Tensor,
    h0: torch.Tensor | None = None,
    c0: torch.Tensor | None = None,
    mask: torch.Tensor | None = None,
    grad_enabled_from: int = 0,
) -> tuple[torch.Tensor, tuple[torch.Tensor, torch.Tensor]]:
    """Run ``cell`` over ``inputs`` of shape [B, T, d] (or [T, d]).

    A step whose mask entry is False is padding: its output and the state it
    hands on are exactly zero, so the next valid step starts from a fresh
    state. Steps before ``grad_enabled_from`` are evaluated without autograd.
    """
    squeeze = inputs.dim() == 2
    if squeeze:
        inputs = inputs.unsqueeze(0)
        if mask is not None:
            mask = mask.unsqueeze(0)
        if h0 is not None:
            h0 = h0.unsqueeze(0) if h0.dim() == 1 else h0
        if c0 is not None:
            c0 = c0.unsqueeze(0) if c0.dim() == 1 else c0
    B, T, d = inputs.shape
    if T < 1:
        raise ConfigError("lstm_unroll needs at least one step")
    if d != cell.d_in:
        raise ConfigError(f"{cell.name}: input width {d} != {cell.d_in}")
    zh, zc = cell.zero_state(B, inputs.dtype)
    h = zh if h0 is None else h0
    c = zc if c0 is None else c0
    if h.shape != (B, cell.hidden) or c.shape != (B, cell.hidden):
        raise ConfigError(f"{cell.name}: initial state shape {tuple(h.shape)}/{tuple(c.shape)} "
                          f"!= {(B, cell.hidden)}")
    if mask is not None and mask.shape != (B, T):
        raise ConfigError(f"{cell.name}: mask shape {tuple(mask.shape)} != {(B, T)}")

    outs = []
    for t in range(T):
        with torch.set_grad_enabled(torch.is_grad_enabled() and t >= grad_enabled_from):
            h_new, c_new = cell(inputs[:, t], h, c)
            if mask is not None:
                m = mask[:, t].unsqueeze(-1)
                h_new = torch.where(m, h_new, zh)
                c_new = torch.where(m, c_new, zc)
        if t < grad_enabled_from:
            h_new, c_new = h_new.detach(), c_new.detach()
        h, c = h_new, c_new
        outs.append(h)
    out = _guard(torch.stack(outs, dim=1), cell.name)
    if squeeze:
        return out[0], (h[0], c[0])
    return out, (h, c)


def huber(x: torch.Tensor, kappa: float = 1.0) -> torch.Tensor:
    ax = x.abs()
    return torch.where(ax <= kappa, 0.5 * x * x, kappa * (ax - 0.5 * kappa))


def backward(loss: torch.Tensor) -> None:
    """Back-propagate a scalar loss produced by a forward pass."""
    if not isinstance(loss, torch.Tensor) or loss.numel() != 1:
        raise UsageError("backward needs a scalar tensor")
    if loss.grad_fn is None:
        raise UsageError("backward called on a tensor with no recorded forward pass")
    if not torch.isfinite(loss).all():
        raise NumericFault("non-finite loss", "loss")
    loss.backward()


def global_norm(tensors: Iterable[torch.Tensor | None]) -> float:
    total = 0.0
    for t in tensors:
        if t is not None:
            total += float(torch.sum(t.double() * t.double()))
    return math.sqrt(total)


def clip_global_norm(grads: Sequence[torch.Tensor | None], max_norm: float) -> tuple[list, float]:
    """Scale ``grads`` jointly so their global L2 norm is at most ``max_norm``.

    Returns the clipped list and the norm before clipping.
    """
    if max_norm <= 0:
        raise ConfigError("max_norm must be positive")
    norm = global_norm(grads)
    if norm <= max_norm or norm == 0.0:
        return list(grads), norm
    scale = max_norm / norm
    return [None if g is None else g * scale for g in grads], norm


class Adam:
    """Adam with bias correction. Operates on ``p.grad`` of the given parameters."""

    def __init__(self, params: Iterable[nn.Parameter], lr: float = 1e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = [p for p in params if p.requires_grad]
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = [torch.zeros_like(p) for p in self.params]
        self.v = [torch.zeros_like(p) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, grads: Sequence[torch.Tensor | None] | None = None) -> None:
        if grads is None:
            grads = [p.grad for p in self.params]
        for p, g in zip(self.params, grads):
            if g is not None and not torch.isfinite(g).all():
                raise NumericFault("non-finite gradient, step aborted", "adam")
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        with torch.no_grad():
            for p, g, m, v in zip(self.params, grads, self.m, self.v):
                if g is None:
                    g = torch.zeros_like(p)
                m.mul_(self.beta1).add_(g, alpha=1.0 - self.beta1)
                v.mul_(self.beta2).addcmul_(g, g, value=1.0 - self.beta2)
                denom = (v / bc2).sqrt_().add_(self.eps)
                p.addcdiv_(m, denom, value=-self.lr / bc1)

    def state_tensors(self) -> dict[str, torch.Tensor]:
        out = {"step": torch.tensor([float(self.step_count)])}
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            out[f"m.{i}"] = m
            out[f"v.{i}"] = v
        return out

    def load_state_tensors(self, tensors: Mapping[str, torch.Tensor]) -> None:
        self.step_count = int(tensors["step"][0])
        for i in range(len(self.params)):
            self.m[i].copy_(tensors[f"m.{i}"])
            self.v[i].copy_(tensors[f"v.{i}"])


def save_checkpoint(path: str | Path, tensors: Mapping[str, torch.Tensor]) -> None:
    parts = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(tensors))]
    for name, t in tensors.items():
        raw = name.encode("utf-8")
        arr = t.detach().cpu().numpy().astype("<f4", copy=False)
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path: str | Path) -> dict[str, torch.Tensor]:
    data = Path(path).read_bytes()
    if data[:8] != CKPT_MAGIC:
        raise ConfigError(f"{path}: not a parameter checkpoint")
    version, count = struct.unpack_from("<II", data, 8)
    if version != CKPT_VERSION:
        raise ConfigError(f"{path}: unsupported checkpoint version {version}")
    off = 16
    out: dict[str, torch.Tensor] = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", data, off)
        off += 4
        name = data[off:off + n].decode("utf-8")
        off += n
        (rank,) = struct.unpack_from("<I", data, off)
        off += 4
        dims = struct.unpack_from(f"<{rank}I", data, off)
        off += 4 * rank
        size = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(data, dtype="<f4", count=size, offset=off).reshape(dims)
        off += 4 * size
        out[name] = torch.from_numpy(arr.astype(np.float32))
    return out
