"""Bidirectional LSTM + fully connected regression network on plain numpy.

Everything in this module is a pure function of its inputs: forward passes,
losses and gradients never mutate weights, and all randomness comes from an
explicit ``numpy.random.Generator``.  Gradients are hand-derived reverse-mode
(backpropagation through time for the recurrent part), so the architecture is
fixed: lag windows -> forward/backward LSTM -> summed features -> fully
connected ReLU stack -> linear output head.

Shapes use the batch-first convention: series batches are ``(B, p)``, window
batches ``(B, p, window)``, features ``(B, p, cell)``.  The four LSTM gates
are stacked row-wise in one projection matrix in the fixed order forget,
input, output, cell so each time step costs a single recurrent matmul.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .errors import NumericError

GATE_ORDER = ("forget", "input", "output", "cell")

ACTIVATION_KINDS = ("hard-sigmoid", "relu", "identity")


def hard_sigmoid(x: np.ndarray) -> np.ndarray:
    """Clamp to [0, 1]: max(0, min(1, x)).  No affine offset."""
    return np.clip(x, 0.0, 1.0)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def activate(kind: str, x: np.ndarray) -> np.ndarray:
    """Apply one of the supported elementwise activations."""
    if kind == "hard-sigmoid":
        return hard_sigmoid(np.asarray(x, dtype=float))
    if kind == "relu":
        return relu(np.asarray(x, dtype=float))
    if kind == "identity":
        return np.asarray(x, dtype=float)
    raise ValueError(f"unknown activation kind: {kind!r}")


def _hard_sigmoid_grad_from_value(u: np.ndarray) -> np.ndarray:
    # Derivative recovered from the activation value: 1 strictly inside (0, 1),
    # 0 at and beyond both kinks (subgradient fixed to 0 at the kinks).
    return ((u > 0.0) & (u < 1.0)).astype(float)


def _relu_grad_from_value(g: np.ndarray) -> np.ndarray:
    return (g > 0.0).astype(float)


@dataclass(frozen=True)
class NetworkConfig:
    """Architecture and regularization settings for the inverse network.

    ``hidden_widths`` lists the fully connected hidden layers; the linear
    output head is implicit.  ``keep_prob`` is the Bernoulli keep probability
    for dropout masks, ``ridge`` the coefficient of the squared penalty on
    weight matrices, ``quantiles`` the levels for which interval heads are
    fitted.
    """

    series_length: int
    n_params: int
    lag_depth: int = 2
    cell_width: int = 16
    hidden_widths: tuple[int, ...] = (64, 32)
    keep_prob: float = 0.98
    ridge: float = 1e-4
    quantiles: tuple[float, ...] = (0.025, 0.5, 0.975)

    def __post_init__(self):
        if self.series_length < 1:
            raise ValueError("series_length must be >= 1")
        if self.n_params < 1:
            raise ValueError("n_params must be >= 1")
        if self.lag_depth < 0:
            raise ValueError("lag_depth must be >= 0")
        if self.lag_depth >= self.series_length:
            raise ValueError("lag_depth must be smaller than series_length")
        if self.cell_width < 1:
            raise ValueError("cell_width must be >= 1")
        if any(w < 1 for w in self.hidden_widths):
            raise ValueError("hidden layer widths must be >= 1")
        if not 0.0 < self.keep_prob <= 1.0:
            raise ValueError("keep_prob must lie in (0, 1]")
        if self.ridge < 0.0:
            raise ValueError("ridge must be >= 0")
        taus = tuple(self.quantiles)
        if any(not 0.0 < t < 1.0 for t in taus):
            raise ValueError("quantile levels must lie strictly inside (0, 1)")
        if list(taus) != sorted(taus):
            raise ValueError("quantile levels must be sorted ascending")
        object.__setattr__(self, "hidden_widths", tuple(int(w) for w in self.hidden_widths))
        object.__setattr__(self, "quantiles", tuple(float(t) for t in taus))

    @property
    def window_width(self) -> int:
        return self.lag_depth + 1

    @property
    def flat_width(self) -> int:
        """Width of the flattened feature vector fed to the FC stack."""
        return self.series_length * self.cell_width

    @property
    def fc_widths(self) -> tuple[int, ...]:
        """All FC layer widths, input through output head."""
        return (self.flat_width, *self.hidden_widths, self.n_params)


@dataclass
class LstmDirectionWeights:
    """Weights for one LSTM direction, gates stacked along rows.

    ``wx`` is ``(4*cell, window)``, ``wh`` ``(4*cell, cell)``, ``b``
    ``(4*cell,)`` with rows ordered forget, input, output, cell.
    """

    wx: np.ndarray
    wh: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        four_cell, window = self.wx.shape
        if four_cell % 4 != 0:
            raise ValueError("stacked gate matrix must have 4*cell rows")
        cell = four_cell // 4
        if self.wh.shape != (four_cell, cell):
            raise ValueError(f"wh must be {(four_cell, cell)}, got {self.wh.shape}")
        if self.b.shape != (four_cell,):
            raise ValueError(f"b must be {(four_cell,)}, got {self.b.shape}")

    @property
    def cell_width(self) -> int:
        return self.wx.shape[0] // 4

    def gate(self, name: str) -> slice:
        i = GATE_ORDER.index(name)
        c = self.cell_width
        return slice(i * c, (i + 1) * c)

    def as_named(self) -> dict[str, np.ndarray]:
        """Per-gate view of the stacked matrices, for serialization and tests."""
        out: dict[str, np.ndarray] = {}
        for name in GATE_ORDER:
            sl = self.gate(name)
            out[f"wx_{name}"] = self.wx[sl]
            out[f"wh_{name}"] = self.wh[sl]
            out[f"b_{name}"] = self.b[sl]
        return out

    @classmethod
    def from_named(cls, named: dict[str, np.ndarray]) -> "LstmDirectionWeights":
        wx = np.concatenate([np.asarray(named[f"wx_{g}"], dtype=float) for g in GATE_ORDER])
        wh = np.concatenate([np.asarray(named[f"wh_{g}"], dtype=float) for g in GATE_ORDER])
        b = np.concatenate([np.asarray(named[f"b_{g}"], dtype=float) for g in GATE_ORDER])
        return cls(wx=wx, wh=wh, b=b)


@dataclass
class LstmState:
    """Cell and output state of one direction at one time step."""

    c: np.ndarray
    h: np.ndarray

    @classmethod
    def zeros(cls, cell_width: int) -> "LstmState":
        return cls(c=np.zeros(cell_width), h=np.zeros(cell_width))


@dataclass
class FcLayer:
    w: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        if self.w.ndim != 2 or self.b.shape != (self.w.shape[0],):
            raise ValueError("FC layer bias must match the matrix row count")


@dataclass
class QuantileHead:
    """Linear output head fitted for one quantile level."""

    tau: float
    w: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        if not 0.0 < self.tau < 1.0:
            raise ValueError("tau must lie strictly inside (0, 1)")
        if self.w.ndim != 2 or self.b.shape != (self.w.shape[0],):
            raise ValueError("head bias must match the matrix row count")


@dataclass
class DropoutMasks:
    """0/1 keep masks, one vector per hidden FC layer (none for the input)."""

    layers: list[np.ndarray]


@dataclass
class NetworkWeights:
    """All trainable weights of the network (quantile heads live elsewhere).

    The flat-vector layout used by the optimizer and the finite difference
    checks is: forward wx, wh, b; backward wx, wh, b; then each FC layer's
    w and b in order.  The last FC layer is the linear mean head.
    """

    config: NetworkConfig
    forward: LstmDirectionWeights
    backward: LstmDirectionWeights
    fc: list[FcLayer] = field(default_factory=list)

    def _arrays(self) -> list[np.ndarray]:
        arrs = [self.forward.wx, self.forward.wh, self.forward.b,
                self.backward.wx, self.backward.wh, self.backward.b]
        for layer in self.fc:
            arrs.extend([layer.w, layer.b])
        return arrs

    @property
    def n_weights(self) -> int:
        return sum(a.size for a in self._arrays())

    def to_vector(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self._arrays()])

    def from_vector(self, vec: np.ndarray) -> "NetworkWeights":
        """Rebuild a weights object with the same shapes from a flat vector."""
        if vec.shape != (self.n_weights,):
            raise ValueError(f"expected vector of length {self.n_weights}, got {vec.shape}")
        chunks: list[np.ndarray] = []
        start = 0
        for a in self._arrays():
            chunks.append(vec[start:start + a.size].reshape(a.shape).copy())
            start += a.size
        fwd = LstmDirectionWeights(*chunks[0:3])
        bwd = LstmDirectionWeights(*chunks[3:6])
        fc = [FcLayer(chunks[6 + 2 * i], chunks[7 + 2 * i]) for i in range(len(self.fc))]
        return NetworkWeights(config=self.config, forward=fwd, backward=bwd, fc=fc)

    def ridge_penalty(self) -> float:
        """ridge * sum of squared entries over weight matrices (not biases)."""
        lam = self.config.ridge
        if lam == 0.0:
            return 0.0
        total = 0.0
        for m in (self.forward.wx, self.forward.wh, self.backward.wx, self.backward.wh):
            total += float(np.sum(m * m))
        for layer in self.fc:
            total += float(np.sum(layer.w * layer.w))
        return lam * total


GATE_BIAS_INIT = 1.0  # opens the clamp gates at the start of training


def _glorot(rng: np.random.Generator, rows: int, cols: int, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(rows, cols))


def initialize_weights(config: NetworkConfig, rng: np.random.Generator) -> NetworkWeights:
    """Glorot-uniform matrices; gate biases at +1 so the gates start open,
    every other bias at zero."""
    cell = config.cell_width
    window = config.window_width

    def direction() -> LstmDirectionWeights:
        wx = _glorot(rng, 4 * cell, window, window, cell)
        wh = _glorot(rng, 4 * cell, cell, cell, cell)
        b = np.zeros(4 * cell)
        b[: 3 * cell] = GATE_BIAS_INIT  # forget, input, output gates
        return LstmDirectionWeights(wx=wx, wh=wh, b=b)

    fwd = direction()
    bwd = direction()
    widths = config.fc_widths
    fc = []
    for din, dout in zip(widths[:-1], widths[1:]):
        fc.append(FcLayer(w=_glorot(rng, dout, din, din, dout), b=np.zeros(dout)))
    return NetworkWeights(config=config, forward=fwd, backward=bwd, fc=fc)


# ---------------------------------------------------------------------------
# Lag windows
# ---------------------------------------------------------------------------

def _window_index(series_length: int, lag_depth: int) -> np.ndarray:
    if series_length < 1:
        raise ValueError("series length must be >= 1")
    if lag_depth < 0:
        raise ValueError("lag depth must be >= 0")
    if lag_depth >= series_length:
        raise ValueError(f"lag depth {lag_depth} must be smaller than series length {series_length}")
    t = np.arange(series_length)[:, None]
    k = np.arange(lag_depth + 1)[None, :]
    # indices below the series start repeat the first value (edge padding)
    return np.clip(t - lag_depth + k, 0, None)


def build_lag_windows(series: np.ndarray, lag_depth: int) -> np.ndarray:
    """Window each time point with its ``lag_depth`` predecessors.

    Returns ``(p, lag_depth + 1)`` where row t is
    ``[z[t - lag_depth], ..., z[t]]`` with the leading edge padded by z[0].
    """
    z = np.asarray(series, dtype=float)
    if z.ndim != 1:
        raise ValueError("series must be one-dimensional")
    return z[_window_index(z.shape[0], lag_depth)]


def _batch_windows(series: np.ndarray, lag_depth: int) -> np.ndarray:
    z = np.asarray(series, dtype=float)
    return z[:, _window_index(z.shape[1], lag_depth)]


# ---------------------------------------------------------------------------
# LSTM forward
# ---------------------------------------------------------------------------

def lstm_cell_step(x_t: np.ndarray, prev: LstmState, w: LstmDirectionWeights) -> LstmState:
    """One gated cell update for a single sample.

    Gates go through the hard sigmoid, the cell candidate and the output
    transform through ReLU.
    """
    x_t = np.asarray(x_t, dtype=float)
    if x_t.shape != (w.wx.shape[1],):
        raise ValueError(f"input must be {(w.wx.shape[1],)}, got {x_t.shape}")
    cell = w.cell_width
    if prev.c.shape != (cell,) or prev.h.shape != (cell,):
        raise ValueError("state width does not match the weights")
    pre = w.wx @ x_t + w.wh @ prev.h + w.b
    u_f = hard_sigmoid(pre[w.gate("forget")])
    u_i = hard_sigmoid(pre[w.gate("input")])
    u_o = hard_sigmoid(pre[w.gate("output")])
    g = relu(pre[w.gate("cell")])
    c = u_f * prev.c + u_i * g
    h = u_o * relu(c)
    return LstmState(c=c, h=h)


class _ScanCache:
    """Per-gate activations of one directional scan, kept for backprop."""

    __slots__ = ("u_f", "u_i", "u_o", "g", "c", "h")

    def __init__(self, B: int, p: int, cell: int):
        self.u_f = np.empty((B, p, cell))
        self.u_i = np.empty((B, p, cell))
        self.u_o = np.empty((B, p, cell))
        self.g = np.empty((B, p, cell))
        self.c = np.empty((B, p, cell))
        self.h = np.empty((B, p, cell))


def _lstm_scan(x: np.ndarray, w: LstmDirectionWeights) -> _ScanCache:
    """Run one direction over a batch in scan order, starting from zero state.

    ``x`` is ``(B, p, window)``; the caller handles time reversal for the
    backward direction by flipping the input (and flipping the outputs back).
    """
    B, p, _ = x.shape
    cell = w.cell_width
    cache = _ScanCache(B, p, cell)
    # input projections for every step at once; only the recurrence loops
    xproj = x.reshape(B * p, -1) @ w.wx.T
    xproj = xproj.reshape(B, p, 4 * cell) + w.b
    sf, si, so, sc = (w.gate(g) for g in GATE_ORDER)
    h = np.zeros((B, cell))
    c = np.zeros((B, cell))
    for t in range(p):
        pre = xproj[:, t] + h @ w.wh.T
        u_f = hard_sigmoid(pre[:, sf])
        u_i = hard_sigmoid(pre[:, si])
        u_o = hard_sigmoid(pre[:, so])
        g = relu(pre[:, sc])
        c = u_f * c + u_i * g
        h = u_o * relu(c)
        cache.u_f[:, t] = u_f
        cache.u_i[:, t] = u_i
        cache.u_o[:, t] = u_o
        cache.g[:, t] = g
        cache.c[:, t] = c
        cache.h[:, t] = h
    return cache


def _bilstm_features(x: np.ndarray, fwd: LstmDirectionWeights,
                     bwd: LstmDirectionWeights) -> tuple[np.ndarray, _ScanCache, _ScanCache]:
    """Summed forward+backward outputs, ``(B, p, cell)``, plus both caches.

    The backward cache is stored in scan order (reversed time)."""
    cache_f = _lstm_scan(x, fwd)
    cache_b = _lstm_scan(x[:, ::-1], bwd)
    feats = cache_f.h + cache_b.h[:, ::-1]
    return feats, cache_f, cache_b


def bilstm_forward(windows: np.ndarray, fwd: LstmDirectionWeights,
                   bwd: LstmDirectionWeights) -> np.ndarray:
    """Feature sequence ``(p, cell)`` for one sample: both directions start
    from zero state and their outputs are summed per time step."""
    x = np.asarray(windows, dtype=float)
    if x.ndim != 2:
        raise ValueError("windows must be (p, window)")
    if x.shape[1] != fwd.wx.shape[1] or x.shape[1] != bwd.wx.shape[1]:
        raise ValueError("window width does not match the LSTM weights")
    if fwd.cell_width != bwd.cell_width:
        raise ValueError("both directions must share the cell width")
    feats, _, _ = _bilstm_features(x[None, :, :], fwd, bwd)
    return feats[0]


# ---------------------------------------------------------------------------
# Fully connected stack
# ---------------------------------------------------------------------------

def _check_batch_masks(config: NetworkConfig, masks: Sequence[np.ndarray] | None, B: int) -> None:
    if masks is None:
        return
    if len(masks) != len(config.hidden_widths):
        raise ValueError(f"expected {len(config.hidden_widths)} mask layers, got {len(masks)}")
    for m, width in zip(masks, config.hidden_widths):
        if m.shape != (B, width):
            raise ValueError(f"mask shape {m.shape} does not match (batch, {width})")


class _FcCache:
    __slots__ = ("acts", "masked")

    def __init__(self):
        self.acts: list[np.ndarray] = []    # post-activation per layer, acts[0] = input
        self.masked: list[np.ndarray] = []  # masked inputs actually fed to each matmul


def _fc_apply(flat: np.ndarray, hidden: Sequence[FcLayer], head_w: np.ndarray,
              head_b: np.ndarray, masks: Sequence[np.ndarray] | None) -> tuple[np.ndarray, _FcCache]:
    """FC stack on a batch: ReLU hidden layers, linear head.

    Masks (one per hidden layer) multiply each hidden activation before the
    next matmul; the flattened input is never masked.  ``masks=None`` behaves
    as all ones.
    """
    cache = _FcCache()
    a = flat
    cache.acts.append(a)
    for idx, layer in enumerate(hidden):
        inp = a if idx == 0 else (a * masks[idx - 1] if masks is not None else a)
        cache.masked.append(inp)
        a = relu(inp @ layer.w.T + layer.b)
        cache.acts.append(a)
    if len(hidden) == 0:
        head_in = a
    else:
        head_in = a * masks[-1] if masks is not None else a
    cache.masked.append(head_in)
    out = head_in @ head_w.T + head_b
    return out, cache


def fc_forward(flat: np.ndarray, fc: Sequence[FcLayer], head: QuantileHead | None = None,
               masks: DropoutMasks | None = None) -> np.ndarray:
    """Run the FC stack for one sample.

    ``fc`` holds the hidden layers plus the mean head as its last entry; when
    ``head`` is given it replaces the mean head.  ``masks`` supplies one keep
    vector per hidden layer.
    """
    flat = np.asarray(flat, dtype=float)
    if flat.ndim != 1:
        raise ValueError("flat feature vector must be one-dimensional")
    if flat.shape[0] != fc[0].w.shape[1]:
        raise ValueError(f"feature width {flat.shape[0]} does not match the first layer "
                         f"({fc[0].w.shape[1]})")
    hidden = list(fc[:-1])
    head_w, head_b = (head.w, head.b) if head is not None else (fc[-1].w, fc[-1].b)
    batch_masks = None
    if masks is not None:
        if len(masks.layers) != len(hidden):
            raise ValueError(f"expected {len(hidden)} mask vectors, got {len(masks.layers)}")
        batch_masks = []
        for m, layer in zip(masks.layers, hidden):
            m = np.asarray(m, dtype=float)
            if m.shape != (layer.w.shape[0],):
                raise ValueError(f"mask length {m.shape} does not match layer width "
                                 f"{layer.w.shape[0]}")
            batch_masks.append(m[None, :])
    out, _ = _fc_apply(flat[None, :], hidden, head_w, head_b, batch_masks)
    return out[0]


# ---------------------------------------------------------------------------
# Whole-network forward
# ---------------------------------------------------------------------------

def _forward_batch(series: np.ndarray, weights: NetworkWeights,
                   masks: Sequence[np.ndarray] | None = None,
                   head: QuantileHead | None = None) -> np.ndarray:
    cfg = weights.config
    z = np.asarray(series, dtype=float)
    if z.ndim != 2 or z.shape[1] != cfg.series_length:
        raise ValueError(f"series batch must be (B, {cfg.series_length}), got {z.shape}")
    _check_batch_masks(cfg, masks, z.shape[0])
    x = _batch_windows(z, cfg.lag_depth)
    feats, _, _ = _bilstm_features(x, weights.forward, weights.backward)
    flat = feats.reshape(z.shape[0], cfg.flat_width)
    head_w, head_b = (head.w, head.b) if head is not None else (weights.fc[-1].w, weights.fc[-1].b)
    out, _ = _fc_apply(flat, weights.fc[:-1], head_w, head_b, masks)
    return out


def network_forward(series: np.ndarray, weights: NetworkWeights,
                    masks: DropoutMasks | None = None) -> np.ndarray:
    """Full forward pass for one series: windows -> BiLSTM -> flatten -> FC."""
    z = np.asarray(series, dtype=float)
    if z.ndim != 1:
        raise ValueError("series must be one-dimensional")
    batch_masks = None
    if masks is not None:
        batch_masks = [np.asarray(m, dtype=float)[None, :] for m in masks.layers]
    return _forward_batch(z[None, :], weights, batch_masks)[0]


# ---------------------------------------------------------------------------
# Loss and gradients
# ---------------------------------------------------------------------------

def loss_penalized(series: np.ndarray, targets: np.ndarray, weights: NetworkWeights,
                   masks: Sequence[np.ndarray] | None = None) -> float:
    """Summed squared prediction error plus the ridge penalty on matrices."""
    preds = _forward_batch(series, weights, masks)
    targets = np.asarray(targets, dtype=float)
    if targets.shape != preds.shape:
        raise ValueError(f"targets must be {preds.shape}, got {targets.shape}")
    resid = preds - targets
    return float(np.sum(resid * resid)) + weights.ridge_penalty()


def _scan_backward(x: np.ndarray, w: LstmDirectionWeights, cache: _ScanCache,
                   d_h: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Reverse-mode pass through one directional scan.

    ``d_h`` is the loss gradient w.r.t. the per-step outputs in scan order.
    Returns gradients for (wx, wh, b).  Input gradients are not needed by any
    caller and are skipped.
    """
    B, p, _ = x.shape
    cell = w.cell_width
    sf, si, so, sc = (w.gate(g) for g in GATE_ORDER)
    d_pre = np.empty((B, p, 4 * cell))
    dh_carry = np.zeros((B, cell))
    dc_carry = np.zeros((B, cell))
    for t in range(p - 1, -1, -1):
        dh = d_h[:, t] + dh_carry
        c_t = cache.c[:, t]
        relu_c = np.maximum(c_t, 0.0)
        u_o = cache.u_o[:, t]
        dct = dc_carry + dh * u_o * (c_t > 0.0)
        c_prev = cache.c[:, t - 1] if t > 0 else np.zeros((B, cell))
        g = cache.g[:, t]
        u_f = cache.u_f[:, t]
        u_i = cache.u_i[:, t]
        d_pre_t = d_pre[:, t]
        d_pre_t[:, sf] = (dct * c_prev) * _hard_sigmoid_grad_from_value(u_f)
        d_pre_t[:, si] = (dct * g) * _hard_sigmoid_grad_from_value(u_i)
        d_pre_t[:, so] = (dh * relu_c) * _hard_sigmoid_grad_from_value(u_o)
        d_pre_t[:, sc] = (dct * u_i) * _relu_grad_from_value(g)
        dh_carry = d_pre_t @ w.wh
        dc_carry = dct * u_f
    h_prev = np.concatenate([np.zeros((B, 1, cell)), cache.h[:, :-1]], axis=1)
    flat_pre = d_pre.reshape(B * p, 4 * cell)
    d_wx = flat_pre.T @ x.reshape(B * p, -1)
    d_wh = flat_pre.T @ h_prev.reshape(B * p, cell)
    d_b = flat_pre.sum(axis=(0, 1))
    return d_wx, d_wh, d_b


def loss_and_gradients(series: np.ndarray, targets: np.ndarray, weights: NetworkWeights,
                       masks: Sequence[np.ndarray] | None = None) -> tuple[float, np.ndarray]:
    """Penalized loss and its exact reverse-mode gradient as a flat vector.

    The vector layout matches ``NetworkWeights.to_vector``.
    """
    cfg = weights.config
    z = np.asarray(series, dtype=float)
    targets = np.asarray(targets, dtype=float)
    if z.ndim != 2 or z.shape[1] != cfg.series_length:
        raise ValueError(f"series batch must be (B, {cfg.series_length}), got {z.shape}")
    B = z.shape[0]
    _check_batch_masks(cfg, masks, B)

    x = _batch_windows(z, cfg.lag_depth)
    cache_f = _lstm_scan(x, weights.forward)
    x_rev = x[:, ::-1]
    cache_b = _lstm_scan(x_rev, weights.backward)
    flat = (cache_f.h + cache_b.h[:, ::-1]).reshape(B, cfg.flat_width)

    hidden = weights.fc[:-1]
    head = weights.fc[-1]
    preds, fc_cache = _fc_apply(flat, hidden, head.w, head.b, masks)
    if targets.shape != preds.shape:
        raise ValueError(f"targets must be {preds.shape}, got {targets.shape}")
    resid = preds - targets
    loss = float(np.sum(resid * resid)) + weights.ridge_penalty()

    # FC backward
    d_out = 2.0 * resid
    lam = cfg.ridge
    d_fc_w: list[np.ndarray] = [np.empty(0)] * len(weights.fc)
    d_fc_b: list[np.ndarray] = [np.empty(0)] * len(weights.fc)
    d_fc_w[-1] = d_out.T @ fc_cache.masked[-1] + 2.0 * lam * head.w
    d_fc_b[-1] = d_out.sum(axis=0)
    d_masked = d_out @ head.w
    for idx in range(len(hidden) - 1, -1, -1):
        if masks is not None:
            d_act = d_masked * masks[idx]
        else:
            d_act = d_masked
        d_pre = d_act * _relu_grad_from_value(fc_cache.acts[idx + 1])
        d_fc_w[idx] = d_pre.T @ fc_cache.masked[idx] + 2.0 * lam * hidden[idx].w
        d_fc_b[idx] = d_pre.sum(axis=0)
        d_masked = d_pre @ hidden[idx].w

    d_flat = d_masked  # gradient w.r.t. the unmasked flattened features
    d_h = d_flat.reshape(B, cfg.series_length, cfg.cell_width)
    d_wx_f, d_wh_f, d_b_f = _scan_backward(x, weights.forward, cache_f, d_h)
    d_wx_b, d_wh_b, d_b_b = _scan_backward(x_rev, weights.backward, cache_b, d_h[:, ::-1])
    d_wx_f += 2.0 * lam * weights.forward.wx
    d_wh_f += 2.0 * lam * weights.forward.wh
    d_wx_b += 2.0 * lam * weights.backward.wx
    d_wh_b += 2.0 * lam * weights.backward.wh

    grad = np.concatenate([d_wx_f.ravel(), d_wh_f.ravel(), d_b_f.ravel(),
                           d_wx_b.ravel(), d_wh_b.ravel(), d_b_b.ravel()]
                          + [a.ravel() for pair in zip(d_fc_w, d_fc_b) for a in pair])
    if not np.isfinite(loss):
        raise NumericError("loss is not finite")
    return loss, grad


def gradients(series: np.ndarray, targets: np.ndarray, weights: NetworkWeights,
              masks: Sequence[np.ndarray] | None = None) -> np.ndarray:
    """Gradient of the penalized loss, flat vector of length ``n_weights``."""
    _, grad = loss_and_gradients(series, targets, weights, masks)
    return grad


# ---------------------------------------------------------------------------
# Dropout masks
# ---------------------------------------------------------------------------

def sample_dropout_masks(config: NetworkConfig, rng: np.random.Generator) -> DropoutMasks:
    """Independent Bernoulli(keep_prob) keep masks, one per hidden layer."""
    layers = [(rng.random(w) < config.keep_prob).astype(float) for w in config.hidden_widths]
    return DropoutMasks(layers=layers)


def sample_batch_masks(config: NetworkConfig, batch: int,
                       rng: np.random.Generator) -> list[np.ndarray]:
    """Fresh per-sample masks for a whole batch, ``(batch, width)`` per layer."""
    return [(rng.random((batch, w)) < config.keep_prob).astype(float)
            for w in config.hidden_widths]


# ---------------------------------------------------------------------------
# Finite difference self-check
# ---------------------------------------------------------------------------

@dataclass
class GradCheckCase:
    case: int
    series_length: int
    cell_width: int
    hidden_widths: tuple[int, ...]
    max_rel_error: float


def _central_difference(fn, vec: np.ndarray, step: float) -> np.ndarray:
    out = np.empty_like(vec)
    for i in range(vec.size):
        saved = vec[i]
        vec[i] = saved + step
        hi = fn(vec)
        vec[i] = saved - step
        lo = fn(vec)
        vec[i] = saved
        out[i] = (hi - lo) / (2.0 * step)
    return out


def gradient_check(seed: int = 0, cases: int = 20, step: float = 1e-5,
                   tolerance: float = 1e-4) -> list[GradCheckCase]:
    """Compare reverse-mode gradients against central finite differences on
    randomly drawn small configurations.

    Relative error uses a floor of 1e-3 in the denominator so dead paths with
    near-zero gradients do not produce spurious 0/0 blowups.  Raises
    ``NumericError`` on the first failing case.
    """
    results: list[GradCheckCase] = []
    master = np.random.SeedSequence(seed)
    for case_idx, child in enumerate(master.spawn(cases)):
        rng = np.random.default_rng(child)
        p = int(rng.integers(4, 17))
        cell = int(rng.integers(1, 5))
        n_hidden = int(rng.integers(0, 3))
        hidden = tuple(int(rng.integers(2, 9)) for _ in range(n_hidden))
        lag = int(rng.integers(0, min(3, p)))
        cfg = NetworkConfig(series_length=p, n_params=int(rng.integers(1, 4)),
                            lag_depth=lag, cell_width=cell, hidden_widths=hidden,
                            keep_prob=0.8, ridge=float(rng.choice([0.0, 1e-3])))
        weights = initialize_weights(cfg, rng)
        # randomize biases too so gate preactivations sit away from the kinks
        vec = weights.to_vector()
        vec += 0.05 * rng.standard_normal(vec.size)
        weights = weights.from_vector(vec)
        B = int(rng.integers(1, 4))
        series = rng.standard_normal((B, p))
        targets = rng.standard_normal((B, cfg.n_params))
        masks = sample_batch_masks(cfg, B, rng)

        _, analytic = loss_and_gradients(series, targets, weights, masks)
        base = weights.to_vector()

        def eval_loss(v: np.ndarray) -> float:
            return loss_penalized(series, targets, weights.from_vector(v), masks)

        numeric = _central_difference(eval_loss, base, step)
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-3)
        rel = float(np.max(np.abs(analytic - numeric) / denom))
        results.append(GradCheckCase(case=case_idx, series_length=p, cell_width=cell,
                                     hidden_widths=hidden, max_rel_error=rel))
        if rel >= tolerance:
            raise NumericError(
                f"gradient check failed on case {case_idx} (p={p}, cell={cell}, "
                f"hidden={hidden}): max relative error {rel:.3e} >= {tolerance:.1e}")
    return results
