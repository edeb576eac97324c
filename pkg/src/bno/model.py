"""Banach layers, the BNO model and its CNN-only / DMD-only baselines.

One Banach layer maps a window ``u`` of shape ``(N, T, 1)`` to

    head( relu( cnn(u) + broadcast(K u) ) )

where ``cnn`` is a stack of relu convolutions ending in ``fuse_chan``
channels, ``K u`` is the Koopman discrete operator (DMD fitted on ``u``
itself, evaluated ``dmd_horizon`` steps ahead) copied across all fused
channels, and ``head`` is a linear convolution back to one channel.

Gradients never flow through the DMD fit. For a single layer this is exact
because the Koopman branch only sees the raw input; for stacked layers the
dependence of later DMD fits on earlier weights is dropped.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import NormStats, WindowSpec
from .dmd import SnapshotMatrix, koopman_apply
from .errors import ConvergenceFailure, DegenerateData, ShapeMismatch
from .linalg import DEFAULT_REL_CUTOFF
from .neural import ConvLayer, conv2d_backward, conv2d_forward, mse_loss

log = logging.getLogger(__name__)

DEFAULT_FILTERS = (16, 32, 16)
DEFAULT_KERNEL = (5, 5)
DEFAULT_RANK = 12


# -- Koopman branch -------------------------------------------------------------

@dataclass
class KoopmanBranchResult:
    values: np.ndarray  # (B, N, T, 1) float64
    fallbacks: int = 0


def koopman_branch(
    u: np.ndarray,
    rank: int,
    horizon: int,
    dt: float = 1.0,
    rel_cutoff: float = DEFAULT_REL_CUTOFF,
) -> KoopmanBranchResult:
    """Per-sample Koopman forecast of a batch ``(B, N, T, 1)``.

    A sample whose DMD fit is degenerate (all-zero window) or whose eigen
    solve fails contributes zeros and is counted as a fallback.
    """
    if u.ndim != 4 or u.shape[-1] != 1:
        raise ShapeMismatch(f"Koopman branch expects (B, N, T, 1), got {u.shape}")
    b, n, t, _ = u.shape
    out = np.zeros((b, n, t, 1), dtype=np.float64)
    fallbacks = 0
    r = min(rank, t - 1)
    for i in range(b):
        try:
            kout = koopman_apply(SnapshotMatrix(u[i, :, :, 0], dt), r, horizon, rel_cutoff)
        except (DegenerateData, ConvergenceFailure) as exc:
            fallbacks += 1
            log.debug("Koopman branch fallback on sample %d: %s", i, exc)
            continue
        out[i, :, :, 0] = kout.values
    return KoopmanBranchResult(out, fallbacks)


# -- layer containers -------------------------------------------------------------

@dataclass
class BanachLayer:
    cnn_branch: list[ConvLayer]
    head: ConvLayer
    dmd_rank: int = DEFAULT_RANK
    dmd_horizon: int = 1

    def __post_init__(self):
        _check_stack(self.cnn_branch, self.head)
        if self.dmd_rank < 1:
            raise ValueError(f"dmd_rank must be >= 1, got {self.dmd_rank}")
        if self.dmd_horizon < 0:
            raise ValueError(f"dmd_horizon must be >= 0, got {self.dmd_horizon}")

    @classmethod
    def init(
        cls,
        filters: Sequence[int] = DEFAULT_FILTERS,
        kernel: tuple[int, int] = DEFAULT_KERNEL,
        dmd_rank: int = DEFAULT_RANK,
        dmd_horizon: int = 1,
        rng: np.random.Generator | None = None,
        dtype=np.float32,
    ) -> "BanachLayer":
        cnn, head = _init_stack(filters, kernel, rng, dtype)
        return cls(cnn, head, dmd_rank, dmd_horizon)

    @property
    def fuse_chan(self) -> int:
        return self.cnn_branch[-1].out_chan

    @property
    def convs(self) -> list[ConvLayer]:
        return [*self.cnn_branch, self.head]


def _check_stack(cnn: Sequence[ConvLayer], head: ConvLayer) -> None:
    if not cnn:
        raise ShapeMismatch("CNN branch needs at least one convolution")
    for a, b in zip(cnn, cnn[1:]):
        if a.out_chan != b.in_chan:
            raise ShapeMismatch(f"CNN branch channels do not chain: {a.out_chan} -> {b.in_chan}")
    if head.in_chan != cnn[-1].out_chan:
        raise ShapeMismatch(f"head expects {head.in_chan} channels, branch gives {cnn[-1].out_chan}")
    if cnn[0].in_chan != 1 or head.out_chan != 1:
        raise ShapeMismatch("layers map single-channel fields to single-channel fields")


def _init_stack(filters, kernel, rng, dtype) -> tuple[list[ConvLayer], ConvLayer]:
    rng = rng if rng is not None else np.random.default_rng(0)
    chans = [1, *filters]
    cnn = [
        ConvLayer.init(cin, cout, kernel, "relu", rng, dtype)
        for cin, cout in zip(chans[:-1], chans[1:])
    ]
    head = ConvLayer.init(chans[-1], 1, kernel, "linear", rng, dtype)
    return cnn, head


def _param_list(convs: Sequence[ConvLayer]) -> list[np.ndarray]:
    out = []
    for c in convs:
        out.extend([c.weights, c.bias])
    return out


def _conv_names(prefix: str, n_cnn: int) -> list[str]:
    names = []
    for i in range(n_cnn):
        names += [f"{prefix}cnn.{i}.weight", f"{prefix}cnn.{i}.bias"]
    return names + [f"{prefix}head.weight", f"{prefix}head.bias"]


# -- forward / backward on one stack ------------------------------------------------

@dataclass
class _Tape:
    x: np.ndarray
    acts: list[np.ndarray]  # outputs of each CNN-branch convolution
    fused: np.ndarray  # input to head
    out: np.ndarray


def _stack_forward(cnn: Sequence[ConvLayer], head: ConvLayer, x: np.ndarray, k: np.ndarray | None) -> _Tape:
    acts = []
    h = x
    for conv in cnn:
        h = conv2d_forward(h, conv)
        acts.append(h)
    fused = h if k is None else np.maximum(h + k.astype(h.dtype, copy=False), 0)
    # with k = None the extra relu is the identity (h is already relu'd)
    out = conv2d_forward(fused, head)
    return _Tape(x, acts, fused, out)


def _stack_backward(
    cnn: Sequence[ConvLayer],
    head: ConvLayer,
    tape: _Tape,
    grad_out: np.ndarray,
    need_grad_x: bool,
) -> tuple[np.ndarray | None, list[np.ndarray]]:
    g, gw, gb = conv2d_backward(tape.fused, head, grad_out, tape.out)
    grads = [gw, gb]
    # relu(h + k): pass where fused > 0; for k = None, fused = h and the
    # relu' is handled by the last CNN convolution itself.
    g = np.where(tape.fused > 0, g, 0).astype(g.dtype, copy=False)
    conv_grads = []
    for i in range(len(cnn) - 1, -1, -1):
        inp = tape.acts[i - 1] if i > 0 else tape.x
        want_x = i > 0 or need_grad_x
        g, gw, gb = conv2d_backward(inp, cnn[i], g, tape.acts[i], need_grad_x=want_x)
        conv_grads = [gw, gb] + conv_grads
    return g, conv_grads + grads


# -- models -------------------------------------------------------------------------

def _default_window() -> WindowSpec:
    return WindowSpec()


@dataclass
class BnoModel:
    layers: list[BanachLayer]
    norm_stats: NormStats = field(default_factory=lambda: NormStats(0.0, 1.0))
    window: WindowSpec = field(default_factory=_default_window)
    meta: dict = field(default_factory=dict)
    dt: float = 1.0

    kind = "bno"

    def __post_init__(self):
        if not self.layers:
            raise ValueError("a BNO needs at least one Banach layer")
        if len(self.layers) > 1:
            self.meta.setdefault("stop_gradient", "approximate: later DMD fits treated as constants")

    @classmethod
    def init(
        cls,
        n_layers: int = 1,
        filters: Sequence[int] = DEFAULT_FILTERS,
        kernel: tuple[int, int] = DEFAULT_KERNEL,
        dmd_rank: int = DEFAULT_RANK,
        window: WindowSpec | None = None,
        norm_stats: NormStats | None = None,
        seed: int = 0,
        dtype=np.float32,
        meta: dict | None = None,
    ) -> "BnoModel":
        window = window or WindowSpec()
        rng = np.random.default_rng(seed)
        layers = [
            BanachLayer.init(filters, kernel, dmd_rank, window.s, rng, dtype)
            for _ in range(n_layers)
        ]
        info = {"seed": seed}
        info.update(meta or {})
        return cls(layers, norm_stats or NormStats(0.0, 1.0), window, info)

    def params(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out.extend(_param_list(layer.convs))
        return out

    def param_names(self) -> list[str]:
        names = []
        for i, layer in enumerate(self.layers):
            names.extend(_conv_names(f"layers.{i}.", len(layer.cnn_branch)))
        return names

    @property
    def dtype(self):
        return self.layers[0].head.weights.dtype

    def astype(self, dtype) -> "BnoModel":
        layers = [
            BanachLayer([c.astype(dtype) for c in l.cnn_branch], l.head.astype(dtype), l.dmd_rank, l.dmd_horizon)
            for l in self.layers
        ]
        return BnoModel(layers, self.norm_stats, self.window, dict(self.meta), self.dt)

    def koopman(self, inputs: np.ndarray) -> KoopmanBranchResult:
        """Koopman branch of the first layer; depends only on the raw inputs."""
        first = self.layers[0]
        return koopman_branch(inputs, first.dmd_rank, first.dmd_horizon, self.dt)

    def forward(self, inputs: np.ndarray, koopman: np.ndarray | None = None) -> tuple[np.ndarray, list[_Tape]]:
        raw = np.asarray(inputs)
        x = raw.astype(self.dtype, copy=False)
        tapes = []
        for i, layer in enumerate(self.layers):
            if i == 0:
                # same values as self.koopman(): fitted on the raw inputs
                k = self.koopman(raw).values if koopman is None else koopman
            else:
                k = koopman_branch(x, layer.dmd_rank, layer.dmd_horizon, self.dt).values
            tape = _stack_forward(layer.cnn_branch, layer.head, x, k)
            tapes.append(tape)
            x = tape.out
        return x, tapes

    def backward(self, tapes: list[_Tape], grad_out: np.ndarray) -> list[np.ndarray]:
        grads: list[np.ndarray] = []
        g = grad_out
        for i in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[i]
            g, layer_grads = _stack_backward(layer.cnn_branch, layer.head, tapes[i], g, need_grad_x=i > 0)
            grads = layer_grads + grads
        return grads

    def predict(self, inputs: np.ndarray, koopman: np.ndarray | None = None) -> np.ndarray:
        return self.forward(inputs, koopman)[0]


@dataclass
class CnnBaseline:
    """The BNO's convolutional path trained on its own: cnn branch, relu, head."""

    cnn_branch: list[ConvLayer]
    head: ConvLayer
    norm_stats: NormStats = field(default_factory=lambda: NormStats(0.0, 1.0))
    window: WindowSpec = field(default_factory=_default_window)
    meta: dict = field(default_factory=dict)

    kind = "cnn"

    def __post_init__(self):
        _check_stack(self.cnn_branch, self.head)

    @classmethod
    def init(
        cls,
        filters: Sequence[int] = DEFAULT_FILTERS,
        kernel: tuple[int, int] = DEFAULT_KERNEL,
        window: WindowSpec | None = None,
        norm_stats: NormStats | None = None,
        seed: int = 0,
        dtype=np.float32,
        meta: dict | None = None,
    ) -> "CnnBaseline":
        cnn, head = _init_stack(filters, kernel, np.random.default_rng(seed), dtype)
        info = {"seed": seed}
        info.update(meta or {})
        return cls(cnn, head, norm_stats or NormStats(0.0, 1.0), window or WindowSpec(), info)

    @property
    def convs(self) -> list[ConvLayer]:
        return [*self.cnn_branch, self.head]

    @property
    def dtype(self):
        return self.head.weights.dtype

    def params(self) -> list[np.ndarray]:
        return _param_list(self.convs)

    def param_names(self) -> list[str]:
        return _conv_names("", len(self.cnn_branch))

    def astype(self, dtype) -> "CnnBaseline":
        return CnnBaseline(
            [c.astype(dtype) for c in self.cnn_branch], self.head.astype(dtype),
            self.norm_stats, self.window, dict(self.meta),
        )

    def koopman(self, inputs: np.ndarray) -> None:
        return None

    def forward(self, inputs: np.ndarray, koopman=None) -> tuple[np.ndarray, list[_Tape]]:
        x = np.asarray(inputs).astype(self.dtype, copy=False)
        tape = _stack_forward(self.cnn_branch, self.head, x, None)
        return tape.out, [tape]

    def backward(self, tapes: list[_Tape], grad_out: np.ndarray) -> list[np.ndarray]:
        return _stack_backward(self.cnn_branch, self.head, tapes[0], grad_out, need_grad_x=False)[1]

    def predict(self, inputs: np.ndarray, koopman=None) -> np.ndarray:
        return self.forward(inputs)[0]


@dataclass
class DmdBaseline:
    """Pure Koopman forecast: fit DMD on each window, evaluate ``horizon`` steps ahead."""

    rank: int = DEFAULT_RANK
    horizon: int = 1
    dt: float = 1.0
    norm_stats: NormStats = field(default_factory=lambda: NormStats(0.0, 1.0))
    window: WindowSpec = field(default_factory=_default_window)
    meta: dict = field(default_factory=dict)

    kind = "dmd"

    def params(self) -> list[np.ndarray]:
        return []

    def param_names(self) -> list[str]:
        return []

    def koopman(self, inputs: np.ndarray) -> KoopmanBranchResult:
        return koopman_branch(np.asarray(inputs, dtype=np.float64), self.rank, self.horizon, self.dt)

    def predict(self, inputs: np.ndarray, koopman: np.ndarray | None = None) -> np.ndarray:
        if koopman is not None:
            return koopman
        return self.koopman(inputs).values


# -- functional entry points ------------------------------------------------------------

def banach_forward(layer: BanachLayer, u: np.ndarray, dt: float = 1.0) -> np.ndarray:
    ub = u[None] if u.ndim == 3 else u
    ub = ub.astype(layer.head.weights.dtype, copy=False)
    k = koopman_branch(ub, layer.dmd_rank, layer.dmd_horizon, dt).values
    out = _stack_forward(layer.cnn_branch, layer.head, ub, k).out
    return out[0] if u.ndim == 3 else out


def bno_forward(model: BnoModel, u0: np.ndarray, dt: float | None = None) -> np.ndarray:
    """Feed ``u0`` through every Banach layer in order (no lifting)."""
    if dt is not None and dt != model.dt:
        model = BnoModel(model.layers, model.norm_stats, model.window, model.meta, dt)
    ub = u0[None] if u0.ndim == 3 else u0
    if ub.ndim != 4 or ub.shape[-1] != 1:
        raise ShapeMismatch(f"BNO input must be (N, T, 1) or a batch of them, got {u0.shape}")
    out = model.predict(ub)
    return out[0] if u0.ndim == 3 else out


def bno_backward(
    model,
    inputs: np.ndarray,
    targets: np.ndarray,
    koopman: np.ndarray | None = None,
) -> tuple[float, list[np.ndarray]]:
    """MSE loss and its gradient w.r.t. every convolution weight and bias.

    Works for BnoModel and CnnBaseline. ``koopman`` optionally supplies a
    precomputed first-layer Koopman branch for ``inputs``.
    """
    pred, tapes = model.forward(inputs, koopman)
    loss, grad = mse_loss(pred, np.asarray(targets).astype(pred.dtype, copy=False))
    return loss, model.backward(tapes, grad)


# -- cross-architecture transfer --------------------------------------------------------

def _check_same_shapes(src: Sequence[ConvLayer], dst: Sequence[ConvLayer]) -> None:
    if len(src) != len(dst):
        raise ShapeMismatch(f"stack depth differs: {len(src)} vs {len(dst)}")
    for a, b in zip(src, dst):
        if a.weights.shape != b.weights.shape or a.activation != b.activation:
            raise ShapeMismatch(f"layer mismatch: {a.weights.shape}/{a.activation} vs {b.weights.shape}/{b.activation}")


def transfer_weights(src, dst):
    """Copy convolution weights between a single-layer BNO and a CNN baseline.

    BNO -> CNN drops the Koopman branch; CNN -> BNO keeps ``dst``'s DMD
    configuration. Returns a new model of ``dst``'s type; ``dst`` is untouched.
    """
    if isinstance(src, BnoModel) and isinstance(dst, CnnBaseline):
        if len(src.layers) != 1:
            raise ShapeMismatch("only single-layer BNOs map onto the CNN baseline")
        layer = src.layers[0]
        _check_same_shapes(layer.convs, dst.convs)
        meta = dict(dst.meta)
        meta["transferred_from"] = "bno"
        return CnnBaseline(
            [c.copy() for c in layer.cnn_branch], layer.head.copy(),
            src.norm_stats, src.window, meta,
        )
    if isinstance(src, CnnBaseline) and isinstance(dst, BnoModel):
        if len(dst.layers) != 1:
            raise ShapeMismatch("only single-layer BNOs map onto the CNN baseline")
        target = dst.layers[0]
        _check_same_shapes(src.convs, target.convs)
        meta = dict(dst.meta)
        meta["transferred_from"] = "cnn"
        layer = BanachLayer([c.copy() for c in src.cnn_branch], src.head.copy(), target.dmd_rank, target.dmd_horizon)
        return BnoModel([layer], src.norm_stats, src.window, meta, dst.dt)
    raise TypeError(f"no transfer from {type(src).__name__} to {type(dst).__name__}")


def bno_to_cnn(model: BnoModel) -> CnnBaseline:
    layer = model.layers[0]
    shell = CnnBaseline(layer.cnn_branch, layer.head, model.norm_stats, model.window, dict(model.meta))
    return transfer_weights(model, shell)


def cnn_to_bno(model: CnnBaseline, dmd_rank: int = DEFAULT_RANK, dmd_horizon: int | None = None) -> BnoModel:
    horizon = model.window.s if dmd_horizon is None else dmd_horizon
    shell = BnoModel([BanachLayer(model.cnn_branch, model.head, dmd_rank, horizon)], model.norm_stats, model.window, dict(model.meta))
    return transfer_weights(model, shell)
