"""Convolution layers, MSE loss and Adam for (space, time, channel) tensors.

Tensors are numpy arrays laid out ``(n_space, n_time, n_chan)`` or, for
batches, ``(batch, n_space, n_time, n_chan)``. Convolutions are stride 1
with zero "same" padding, so only the channel count ever changes.

The heavy lifting of the 2-D correlation and its two adjoints is delegated
to torch's CPU kernels; everything around them (activations, the chain rule,
parameter bookkeeping) stays in numpy. Arrays are handed over channels-last
so no transposed copies are made.
"""
from __future__ import annotations

import bisect
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
from torch.nn import functional as F
from torch.nn.grad import conv2d_input, conv2d_weight

from .errors import ChanMismatch, ShapeMismatch

ACTIVATIONS = ("relu", "linear")


@dataclass
class ConvLayer:
    """Weights are ``(kh, kw, in_chan, out_chan)``: kh taps along time, kw along space."""

    weights: np.ndarray
    bias: np.ndarray
    activation: str = "relu"

    def __post_init__(self):
        if self.weights.ndim != 4:
            raise ShapeMismatch(f"conv weights must be 4-D, got {self.weights.shape}")
        kh, kw, _, cout = self.weights.shape
        if kh % 2 == 0 or kw % 2 == 0:
            raise ShapeMismatch(f"kernel extents must be odd, got {kh}x{kw}")
        if self.bias.shape != (cout,):
            raise ShapeMismatch(f"bias shape {self.bias.shape} does not match {cout} filters")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @classmethod
    def init(
        cls,
        in_chan: int,
        out_chan: int,
        kernel: tuple[int, int] = (5, 5),
        activation: str = "relu",
        rng: np.random.Generator | None = None,
        dtype=np.float32,
    ) -> "ConvLayer":
        """Glorot-uniform weights, zero bias."""
        rng = rng if rng is not None else np.random.default_rng(0)
        kh, kw = kernel
        fan_in = kh * kw * in_chan
        fan_out = kh * kw * out_chan
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-limit, limit, size=(kh, kw, in_chan, out_chan)).astype(dtype)
        return cls(w, np.zeros(out_chan, dtype=dtype), activation)

    @property
    def kernel(self) -> tuple[int, int]:
        return self.weights.shape[0], self.weights.shape[1]

    @property
    def in_chan(self) -> int:
        return self.weights.shape[2]

    @property
    def out_chan(self) -> int:
        return self.weights.shape[3]

    def astype(self, dtype) -> "ConvLayer":
        return ConvLayer(self.weights.astype(dtype), self.bias.astype(dtype), self.activation)

    def copy(self) -> "ConvLayer":
        return ConvLayer(self.weights.copy(), self.bias.copy(), self.activation)


def _batched(x: np.ndarray) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ShapeMismatch(f"expected (space, time, chan) or a batch of them, got {x.shape}")


def _to_nchw(x: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(x)).permute(0, 3, 1, 2)


def _from_nchw(t: torch.Tensor) -> np.ndarray:
    return np.ascontiguousarray(t.permute(0, 2, 3, 1).numpy())


def _torch_weight(layer: ConvLayer, dtype) -> torch.Tensor:
    # (kh, kw, in, out) -> (out, in, kw, kh): height is space, width is time
    return torch.from_numpy(np.ascontiguousarray(layer.weights, dtype=dtype)).permute(3, 2, 1, 0)


def _padding(layer: ConvLayer) -> tuple[int, int]:
    kh, kw = layer.kernel
    return kw // 2, kh // 2


def conv2d_linear(x: np.ndarray, layer: ConvLayer) -> np.ndarray:
    """Pre-activation ``bias + sum_taps w * x`` for a batch ``(B, N, T, C)``."""
    if x.shape[-1] != layer.in_chan:
        raise ChanMismatch(f"input has {x.shape[-1]} channels, layer expects {layer.in_chan}")
    with torch.no_grad():
        out = F.conv2d(
            _to_nchw(x),
            _torch_weight(layer, x.dtype),
            torch.from_numpy(np.ascontiguousarray(layer.bias, dtype=x.dtype)),
            padding=_padding(layer),
        )
    return _from_nchw(out)


def activate(z: np.ndarray, activation: str) -> np.ndarray:
    if activation == "relu":
        return np.maximum(z, 0)
    return z


def conv2d_forward(x: np.ndarray, layer: ConvLayer) -> np.ndarray:
    xb, single = _batched(x)
    y = activate(conv2d_linear(xb, layer), layer.activation)
    return y[0] if single else y


def conv2d_backward(
    x: np.ndarray,
    layer: ConvLayer,
    grad_out: np.ndarray,
    out: np.ndarray | None = None,
    need_grad_x: bool = True,
) -> tuple[np.ndarray | None, np.ndarray, np.ndarray]:
    """Gradients of ``conv2d_forward(x, layer)`` given ``d loss / d output``.

    ``out`` is the cached forward output; it is recomputed when omitted.
    Returns ``(grad_x, grad_w, grad_b)``; ``grad_x`` is None when not requested.
    """
    xb, single = _batched(x)
    gb, _ = _batched(grad_out)
    if xb.shape[-1] != layer.in_chan:
        raise ChanMismatch(f"input has {xb.shape[-1]} channels, layer expects {layer.in_chan}")
    if gb.shape != xb.shape[:3] + (layer.out_chan,):
        raise ShapeMismatch(f"grad_out shape {gb.shape} does not match forward output {xb.shape[:3] + (layer.out_chan,)}")
    if layer.activation == "relu":
        if out is None:
            out = conv2d_forward(xb, layer)
        ob, _ = _batched(out)
        gb = np.where(ob > 0, gb, 0).astype(gb.dtype, copy=False)

    dtype = xb.dtype
    gb = gb.astype(dtype, copy=False)
    xt = _to_nchw(xb)
    gt = _to_nchw(gb)
    wt = _torch_weight(layer, dtype)
    pad = _padding(layer)
    with torch.no_grad():
        gw = conv2d_weight(xt, wt.shape, gt, padding=pad)
        gx = conv2d_input(xt.shape, wt, gt, padding=pad) if need_grad_x else None
    grad_w = np.ascontiguousarray(gw.permute(3, 2, 1, 0).numpy())
    grad_b = gb.sum(axis=(0, 1, 2))
    grad_x = None
    if gx is not None:
        grad_x = _from_nchw(gx)
        if single:
            grad_x = grad_x[0]
    return grad_x, grad_w, grad_b


def mse_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean of squared differences over every entry, and its gradient w.r.t. ``pred``."""
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ShapeMismatch(f"prediction {pred.shape} vs target {target.shape}")
    diff = pred - target
    loss = float(np.mean(np.square(diff, dtype=np.float64)))
    grad = diff * (2.0 / diff.size)
    return loss, grad.astype(pred.dtype, copy=False)


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def for_params(cls, params: Sequence[np.ndarray], **kw) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], **kw)


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState, lr: float) -> AdamState:
    """One bias-corrected Adam update. ``params`` are modified in place."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeMismatch("params, grads and optimizer state disagree in length")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape or p.shape != m.shape:
            raise ShapeMismatch(f"parameter {p.shape} vs gradient {g.shape}")
        g = g.astype(p.dtype, copy=False)
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * np.square(g)
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + state.epsilon)).astype(p.dtype, copy=False)
    return state


@dataclass(frozen=True)
class LrSchedule:
    """Piecewise-constant learning rate over optimizer iterations."""

    boundaries: tuple[int, ...] = (1500, 2500)
    rates: tuple[float, ...] = (1e-3, 1e-4, 1e-5)

    def __post_init__(self):
        object.__setattr__(self, "boundaries", tuple(int(b) for b in self.boundaries))
        object.__setattr__(self, "rates", tuple(float(r) for r in self.rates))
        if len(self.rates) != len(self.boundaries) + 1:
            raise ValueError("need exactly one more rate than boundaries")
        if any(b1 >= b2 for b1, b2 in zip(self.boundaries, self.boundaries[1:])):
            raise ValueError(f"boundaries must be strictly increasing: {self.boundaries}")
        if any(not r > 0 for r in self.rates):
            raise ValueError(f"rates must be positive: {self.rates}")


def lr_at(schedule: LrSchedule, iteration: int) -> float:
    if iteration < 0:
        raise ValueError(f"iteration must be >= 0, got {iteration}")
    return schedule.rates[bisect.bisect_right(schedule.boundaries, iteration)]
