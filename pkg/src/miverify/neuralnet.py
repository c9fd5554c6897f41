"""From-scratch neural network numerics on float64 numpy arrays.

Every embedding model in this package wires its own forward and backward
pass out of the pieces here: affine layers, a masked batched LSTM, losses,
Adam, and a central-difference gradient checker. Parameters live in a
:class:`ParameterSet`, which supports shared (aliased, optionally
transposed) matrices so that tied weights accumulate gradients from all of
their use sites.

All parameters are stored as 2-D row-major float64 matrices; biases are
(1, d) rows so that broadcasting works everywhere.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from scipy.special import expit

MAGIC = b"MIVNN1"

ACTIVATIONS = ("linear", "relu", "tanh", "sigmoid")


class TrainingDivergedError(RuntimeError):
    """Loss became non-finite during training."""


# ---------------------------------------------------------------------------
# parameter storage


class ParameterSet:
    """Named float64 matrices with matching gradient buffers.

    An *alias* maps a second name onto an existing matrix, optionally
    transposed. Reads through the alias see the (transposed) owner storage;
    gradients reported through the alias are accumulated, transposed as
    needed, into the owner's buffer. Parameter count therefore reflects
    weight tying.
    """

    def __init__(self, seed: int = 0):
        self._rng = np.random.default_rng(seed)
        self._values: dict[str, np.ndarray] = {}
        self._grads: dict[str, np.ndarray] = {}
        self._aliases: dict[str, tuple[str, bool]] = {}

    def add(self, name: str, rows: int, cols: int, init: str = "xavier") -> np.ndarray:
        if name in self._values or name in self._aliases:
            raise ValueError(f"parameter {name!r} already defined")
        if init == "xavier":
            limit = np.sqrt(6.0 / (rows + cols))
            value = self._rng.uniform(-limit, limit, size=(rows, cols))
        elif init == "zeros":
            value = np.zeros((rows, cols))
        else:
            raise ValueError(f"unknown init {init!r}")
        self._values[name] = value
        self._grads[name] = np.zeros((rows, cols))
        return value

    def add_raw(self, name: str, value: np.ndarray) -> None:
        if name in self._values or name in self._aliases:
            raise ValueError(f"parameter {name!r} already defined")
        arr = np.array(value, dtype=np.float64)
        if arr.ndim != 2:
            raise ValueError(f"parameters must be 2-D, got shape {arr.shape}")
        self._values[name] = arr
        self._grads[name] = np.zeros_like(arr)

    def alias(self, name: str, owner: str, transposed: bool = False) -> None:
        if name in self._values or name in self._aliases:
            raise ValueError(f"parameter {name!r} already defined")
        owner, flip = self._resolve(owner)
        self._aliases[name] = (owner, transposed ^ flip)

    def _resolve(self, name: str) -> tuple[str, bool]:
        if name in self._aliases:
            return self._aliases[name]
        if name not in self._values:
            raise KeyError(f"unknown parameter {name!r}")
        return name, False

    def value(self, name: str) -> np.ndarray:
        owner, transposed = self._resolve(name)
        v = self._values[owner]
        return v.T if transposed else v

    def grad(self, name: str) -> np.ndarray:
        owner, transposed = self._resolve(name)
        g = self._grads[owner]
        return g.T if transposed else g

    def add_grad(self, name: str, grad: np.ndarray) -> None:
        owner, transposed = self._resolve(name)
        self._grads[owner] += grad.T if transposed else grad

    def zero_grads(self) -> None:
        for g in self._grads.values():
            g[...] = 0.0

    def owner_names(self) -> list[str]:
        return list(self._values)

    def owner_items(self):
        for name, value in self._values.items():
            yield name, value, self._grads[name]

    def aliases(self) -> dict[str, tuple[str, bool]]:
        return dict(self._aliases)

    def n_parameters(self) -> int:
        return sum(v.size for v in self._values.values())

    def copy(self) -> "ParameterSet":
        out = ParameterSet()
        for name, value in self._values.items():
            out.add_raw(name, value)
        for name, (owner, transposed) in self._aliases.items():
            out.alias(name, owner, transposed)
        return out


# ---------------------------------------------------------------------------
# layers


def _activate(z: np.ndarray, activation: str) -> np.ndarray:
    if activation == "linear":
        return z
    if activation == "relu":
        return np.maximum(z, 0.0)
    if activation == "tanh":
        return np.tanh(z)
    if activation == "sigmoid":
        return expit(z)
    raise ValueError(f"unknown activation {activation!r}, expected one of {ACTIVATIONS}")


def _activation_backward(d_out, z, out, activation):
    if activation == "linear":
        return d_out
    if activation == "relu":
        return d_out * (z > 0.0)
    if activation == "tanh":
        return d_out * (1.0 - out * out)
    if activation == "sigmoid":
        return d_out * out * (1.0 - out)
    raise ValueError(f"unknown activation {activation!r}")


def affine_forward(x, w, b, activation: str = "linear"):
    """y = act(x @ w + b). Returns (y, cache) with cache for the backward pass.

    ``x`` is (n, d_in), ``w`` is (d_in, d_out), ``b`` is a (1, d_out) row.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ValueError(f"shape mismatch: x {x.shape} @ w {w.shape}")
    if b.shape[-1] != w.shape[1]:
        raise ValueError(f"bias shape {b.shape} incompatible with w {w.shape}")
    z = x @ w + b
    out = _activate(z, activation)
    return out, (x, w, z, out, activation)


def affine_backward(d_out, cache):
    """Gradients of an affine layer: returns (dx, dw, db)."""
    x, w, z, out, activation = cache
    dz = _activation_backward(d_out, z, out, activation)
    dx = dz @ w.T
    dw = x.T @ dz
    db = dz.sum(axis=0, keepdims=True)
    return dx, dw, db


def lstm_batch_forward(x, lengths, w_x, w_h, b):
    """Run an LSTM over a padded batch and return the last valid hidden state.

    ``x`` is (B, T, d), ``lengths`` (B,) gives each sequence's true length
    (>= 1). Gate order inside the (d, 4h) / (h, 4h) weights is i, f, g, o.
    Steps past a sequence's length carry hidden and cell state through
    unchanged. Returns (h_last (B, h), cache).
    """
    x = np.asarray(x, dtype=np.float64)
    B, T, d = x.shape
    if T < 1:
        raise ValueError("sequence length must be >= 1")
    h_dim = w_h.shape[0]
    if w_x.shape != (d, 4 * h_dim) or w_h.shape != (h_dim, 4 * h_dim):
        raise ValueError(f"LSTM weight shapes {w_x.shape}, {w_h.shape} do not match input {x.shape}")
    lengths = np.asarray(lengths, dtype=np.int64)
    if lengths.shape != (B,) or lengths.min() < 1 or lengths.max() > T:
        raise ValueError("lengths must be in [1, T] per sequence")

    h = np.zeros((B, h_dim))
    c = np.zeros((B, h_dim))
    steps = []
    for t in range(T):
        active = (lengths > t)[:, None]
        a = x[:, t, :] @ w_x + h @ w_h + b
        i = expit(a[:, :h_dim])
        f = expit(a[:, h_dim : 2 * h_dim])
        g = np.tanh(a[:, 2 * h_dim : 3 * h_dim])
        o = expit(a[:, 3 * h_dim :])
        c_new = f * c + i * g
        tanh_c = np.tanh(c_new)
        h_new = o * tanh_c
        steps.append((h.copy(), c.copy(), i, f, g, o, c_new, tanh_c, active))
        h = np.where(active, h_new, h)
        c = np.where(active, c_new, c)
    cache = (x, lengths, w_x, w_h, steps, h_dim)
    return h, cache


def lstm_batch_backward(d_h_last, cache):
    """Backward-through-time for :func:`lstm_batch_forward`.

    Returns (dx (B, T, d), dw_x, dw_h, db).
    """
    x, lengths, w_x, w_h, steps, h_dim = cache
    B, T, d = x.shape
    dx = np.zeros_like(x)
    dw_x = np.zeros_like(w_x)
    dw_h = np.zeros_like(w_h)
    db = np.zeros((1, 4 * h_dim))
    dh = np.asarray(d_h_last, dtype=np.float64).copy()
    dc = np.zeros((B, h_dim))
    for t in range(T - 1, -1, -1):
        h_prev, c_prev, i, f, g, o, c_new, tanh_c, active = steps[t]
        # inactive rows pass their gradient straight through to step t-1
        dh_act = np.where(active, dh, 0.0)
        dc_act = np.where(active, dc, 0.0)
        do = dh_act * tanh_c
        dc_total = dc_act + dh_act * o * (1.0 - tanh_c * tanh_c)
        di = dc_total * g
        df = dc_total * c_prev
        dg = dc_total * i
        da = np.concatenate(
            [
                di * i * (1.0 - i),
                df * f * (1.0 - f),
                dg * (1.0 - g * g),
                do * o * (1.0 - o),
            ],
            axis=1,
        )
        dx[:, t, :] = da @ w_x.T
        dw_x += x[:, t, :].T @ da
        dw_h += h_prev.T @ da
        db += da.sum(axis=0, keepdims=True)
        dh_prev = da @ w_h.T
        dc_prev = dc_total * f
        dh = np.where(active, dh_prev, dh)
        dc = np.where(active, dc_prev, dc)
    return dx, dw_x, dw_h, db


def lstm_sequence_forward(tokens, w_x, w_h, b):
    """Encode one (T, d) sequence; returns (final hidden state (h,), cache)."""
    tokens = np.asarray(tokens, dtype=np.float64)
    if tokens.ndim != 2 or tokens.shape[0] < 1:
        raise ValueError(f"tokens must be a non-empty (T, d) matrix, got {tokens.shape}")
    h, cache = lstm_batch_forward(tokens[None, :, :], np.array([tokens.shape[0]]), w_x, w_h, b)
    return h[0], cache


def lstm_sequence_backward(d_h, cache):
    """Backward pass matching :func:`lstm_sequence_forward`."""
    dx, dw_x, dw_h, db = lstm_batch_backward(np.asarray(d_h)[None, :], cache)
    return dx[0], dw_x, dw_h, db


# ---------------------------------------------------------------------------
# losses


def mse_loss(pred, target):
    """Mean over all elements of squared differences; returns (loss, d_pred)."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    diff = pred - target
    loss = float(np.mean(diff * diff))
    grad = 2.0 * diff / diff.size
    return loss, grad


def hinge_rank_loss(s_pos: float, s_neg: float, margin: float):
    """max(0, margin - s_pos + s_neg); returns (loss, d_s_pos, d_s_neg).

    The subgradient is 0 when the hinge is inactive.
    """
    if margin <= 0:
        raise ValueError(f"margin must be positive, got {margin}")
    value = margin - s_pos + s_neg
    if value > 0:
        return float(value), -1.0, 1.0
    return 0.0, 0.0, 0.0


# ---------------------------------------------------------------------------
# optimizer


class AdamState:
    """First/second moment buffers and step count for Adam."""

    def __init__(self, params: ParameterSet, lr=1e-3, beta1=0.9, beta2=0.999, epsilon=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.t = 0
        self.m = {name: np.zeros_like(v) for name, v, _ in params.owner_items()}
        self.v = {name: np.zeros_like(v) for name, v, _ in params.owner_items()}


def adam_step(params: ParameterSet, state: AdamState) -> None:
    """One bias-corrected Adam update over all owner parameters."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bias1 = 1.0 - b1**state.t
    bias2 = 1.0 - b2**state.t
    for name, value, grad in params.owner_items():
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * grad
        v *= b2
        v += (1.0 - b2) * grad * grad
        m_hat = m / bias1
        v_hat = v / bias2
        value -= state.lr * m_hat / (np.sqrt(v_hat) + state.epsilon)


# ---------------------------------------------------------------------------
# gradient checking


def finite_diff_grad_check(
    loss_fn,
    params: ParameterSet,
    epsilon: float = 1e-5,
    max_coords: int = 200,
    seed: int = 0,
) -> float:
    """Compare analytic gradients against central finite differences.

    ``loss_fn`` takes no arguments, returns a scalar loss, and must fill the
    parameter set's gradient buffers as a side effect (and be deterministic).
    Checks a random subsample of at most ``max_coords`` coordinates across
    all owner parameters and returns the maximum relative error
    |g_analytic - g_numeric| / max(1e-12, |g_analytic| + |g_numeric|).
    """
    params.zero_grads()
    base_loss = loss_fn()
    if not np.isfinite(base_loss):
        raise ValueError(f"loss is not finite: {base_loss}")
    analytic = {name: g.copy() for name, _, g in params.owner_items()}

    coords = [
        (name, idx)
        for name, value, _ in params.owner_items()
        for idx in range(value.size)
    ]
    rng = np.random.default_rng(seed)
    if len(coords) > max_coords:
        picked = rng.choice(len(coords), size=max_coords, replace=False)
        coords = [coords[int(i)] for i in picked]

    values = {name: v for name, v, _ in params.owner_items()}
    worst = 0.0
    for name, idx in coords:
        v = values[name]
        original = v.flat[idx]
        v.flat[idx] = original + epsilon
        loss_plus = loss_fn()
        v.flat[idx] = original - epsilon
        loss_minus = loss_fn()
        v.flat[idx] = original
        if not (np.isfinite(loss_plus) and np.isfinite(loss_minus)):
            raise ValueError("loss is not finite during finite differencing")
        numeric = (loss_plus - loss_minus) / (2.0 * epsilon)
        ga = analytic[name].flat[idx]
        rel = abs(ga - numeric) / max(1e-12, abs(ga) + abs(numeric))
        worst = max(worst, rel)
    return worst


# ---------------------------------------------------------------------------
# serialization: magic "MIVNN1", little-endian records


def _write_str(fh, s: str) -> None:
    raw = s.encode("utf-8")
    fh.write(struct.pack("<I", len(raw)))
    fh.write(raw)


def _read_str(fh) -> str:
    (n,) = struct.unpack("<I", fh.read(4))
    return fh.read(n).decode("utf-8")


def write_parameters(params: ParameterSet, fh) -> None:
    """Write owner matrices and the alias table to a binary stream."""
    fh.write(MAGIC)
    owners = list(params.owner_items())
    fh.write(struct.pack("<I", len(owners)))
    for name, value, _ in owners:
        _write_str(fh, name)
        rows, cols = value.shape
        fh.write(struct.pack("<II", rows, cols))
        fh.write(np.ascontiguousarray(value, dtype="<f8").tobytes())
    aliases = params.aliases()
    fh.write(struct.pack("<I", len(aliases)))
    for name, (owner, transposed) in aliases.items():
        _write_str(fh, name)
        _write_str(fh, owner)
        fh.write(struct.pack("<B", int(transposed)))


def read_parameters(fh) -> ParameterSet:
    """Read a parameter set written by :func:`write_parameters`."""
    magic = fh.read(len(MAGIC))
    if magic != MAGIC:
        raise ValueError(f"bad parameter file magic: {magic!r}")
    params = ParameterSet()
    (n_owners,) = struct.unpack("<I", fh.read(4))
    for _ in range(n_owners):
        name = _read_str(fh)
        rows, cols = struct.unpack("<II", fh.read(8))
        data = np.frombuffer(fh.read(rows * cols * 8), dtype="<f8").astype(np.float64)
        params.add_raw(name, data.reshape(rows, cols))
    (n_aliases,) = struct.unpack("<I", fh.read(4))
    for _ in range(n_aliases):
        name = _read_str(fh)
        owner = _read_str(fh)
        (transposed,) = struct.unpack("<B", fh.read(1))
        params.alias(name, owner, bool(transposed))
    return params


def save_parameters(params: ParameterSet, path) -> None:
    with Path(path).open("wb") as fh:
        write_parameters(params, fh)


def load_parameters(path) -> ParameterSet:
    with Path(path).open("rb") as fh:
        return read_parameters(fh)
