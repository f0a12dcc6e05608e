"""Neural system identification for the state-space model.

Three subnets are learned from normal data:

* encoder ``H``: flattened window ``(tau*M,) -> z`` (latent, ``M'``)
* decoder ``H^-1``: ``z -> x_hat`` (``M``)
* transition ``F``: ``(z_{t-1}, window) -> z_t`` -- an LSTM summarises the
  window, its final hidden state is concatenated with ``z_{t-1}`` and passed
  through a dense stack.

The encoder window for time ``s`` is the ``tau`` rows ending at ``s``
(inclusive). The transition producing ``z_t`` sees the ``tau`` rows ending at
``t-1``, which is the same matrix the encoder uses for ``z_{t-1}``.

Everything is plain numpy in float64 with hand-written backpropagation.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DataError, ModelFormatError, NumericalError, PreconditionError
from .timeseries import Dataset, window_array

ACTIVATIONS = ("tanh", "linear")
FORMAT_HEADER = "bssad-model"
FORMAT_VERSION = 1


@dataclass
class Layer:
    weights: np.ndarray  # (out, in)
    biases: np.ndarray  # (out,)
    activation: str = "linear"

    def __post_init__(self) -> None:
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        self.weights = np.asarray(self.weights, dtype=float)
        self.biases = np.asarray(self.biases, dtype=float)
        if self.weights.ndim != 2 or self.biases.shape != (self.weights.shape[0],):
            raise DataError(
                f"inconsistent layer shapes {self.weights.shape} / {self.biases.shape}"
            )

    @property
    def n_in(self) -> int:
        return self.weights.shape[1]

    @property
    def n_out(self) -> int:
        return self.weights.shape[0]


GATES = ("i", "f", "o", "g")


@dataclass
class LSTMCell:
    """Single LSTM cell; every gate matrix is ``hidden x (input + hidden)``."""

    W: dict[str, np.ndarray]
    b: dict[str, np.ndarray]

    def __post_init__(self) -> None:
        shapes = {self.W[g].shape for g in GATES}
        if len(shapes) != 1:
            raise DataError("LSTM gates must share input/hidden dimensions")
        (H, cols), = shapes
        if cols <= H or any(self.b[g].shape != (H,) for g in GATES):
            raise DataError("inconsistent LSTM gate shapes")

    @property
    def hidden(self) -> int:
        return self.W["i"].shape[0]

    @property
    def n_input(self) -> int:
        return self.W["i"].shape[1] - self.hidden


@dataclass
class NeuralModel:
    encoder: list[Layer]
    decoder: list[Layer]
    lstm: LSTMCell
    transition: list[Layer]
    tau: int
    loss_weights: tuple[float, float, float] = (0.45, 0.45, 0.45)
    metadata: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        M, Mp = self.n_features, self.latent_dim
        if self.encoder[0].n_in != self.tau * M:
            raise DataError("encoder input must be tau * M")
        if self.decoder[0].n_in != Mp or self.decoder[-1].n_out != M:
            raise DataError("decoder must map M' -> M")
        if self.lstm.n_input != M:
            raise DataError("LSTM input size must equal M")
        if self.transition[0].n_in != Mp + self.lstm.hidden or self.transition[-1].n_out != Mp:
            raise DataError("transition must map (M' + hidden) -> M'")
        for stack in (self.encoder, self.decoder, self.transition):
            for a, b in zip(stack, stack[1:]):
                if a.n_out != b.n_in:
                    raise DataError("adjacent layer sizes disagree")
        if Mp > self.tau * M:
            raise DataError("latent dimension must not exceed tau * M")

    @property
    def n_features(self) -> int:
        return self.decoder[-1].n_out

    @property
    def latent_dim(self) -> int:
        return self.encoder[-1].n_out

    def parameters(self) -> dict[str, np.ndarray]:
        """Every trainable array by name (live references, fixed order)."""
        out: dict[str, np.ndarray] = {}
        for prefix, stack in (("enc", self.encoder), ("dec", self.decoder), ("trans", self.transition)):
            for k, layer in enumerate(stack):
                out[f"{prefix}.{k}.W"] = layer.weights
                out[f"{prefix}.{k}.b"] = layer.biases
        for g in GATES:
            out[f"lstm.W{g}"] = self.lstm.W[g]
            out[f"lstm.b{g}"] = self.lstm.b[g]
        return out

    def copy(self) -> "NeuralModel":
        def cp(stack):
            return [Layer(l.weights.copy(), l.biases.copy(), l.activation) for l in stack]

        return NeuralModel(
            cp(self.encoder),
            cp(self.decoder),
            LSTMCell({g: w.copy() for g, w in self.lstm.W.items()},
                     {g: v.copy() for g, v in self.lstm.b.items()}),
            cp(self.transition),
            self.tau,
            tuple(self.loss_weights),
            json.loads(json.dumps(self.metadata)),
        )


@dataclass(frozen=True)
class NoiseEstimate:
    Q: np.ndarray
    R: np.ndarray


@dataclass(frozen=True)
class Hyperparams:
    tau: int = 12
    latent_dim: int = 3
    hidden_dim: int = 64
    epochs: int = 100
    lr: float = 1e-3
    batch_size: int = 64
    alpha1: float = 0.45
    alpha2: float = 0.45
    alpha3: float = 0.45
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


# ---------------------------------------------------------------------------
# construction
# ---------------------------------------------------------------------------

def _uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _layer(rng, n_in, n_out, activation) -> Layer:
    return Layer(_uniform(rng, n_in, (n_out, n_in)), _uniform(rng, n_in, (n_out,)), activation)


def init_model(
    n_features: int,
    latent_dim: int,
    tau: int,
    hidden_dim: int = 64,
    seed: int = 0,
    loss_weights: Sequence[float] = (0.45, 0.45, 0.45),
) -> NeuralModel:
    """Default topology, parameters drawn from ``U(-1/sqrt(fan_in), 1/sqrt(fan_in))``."""
    rng = np.random.default_rng(seed)
    M, Mp, H = n_features, latent_dim, hidden_dim
    encoder = [_layer(rng, tau * M, H, "tanh"), _layer(rng, H, Mp, "linear")]
    decoder = [_layer(rng, Mp, H, "tanh"), _layer(rng, H, M, "linear")]
    fan = M + H
    lstm = LSTMCell(
        {g: _uniform(rng, fan, (H, fan)) for g in GATES},
        {g: _uniform(rng, fan, (H,)) for g in GATES},
    )
    transition = [_layer(rng, Mp + H, H, "tanh"), _layer(rng, H, Mp, "linear")]
    return NeuralModel(encoder, decoder, lstm, transition, tau, tuple(float(a) for a in loss_weights))


# ---------------------------------------------------------------------------
# forward / backward building blocks
# ---------------------------------------------------------------------------

def _sigmoid(a: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * a))


def _dense_forward(stack: list[Layer], x: np.ndarray):
    cache = []
    for layer in stack:
        a = x @ layer.weights.T + layer.biases
        y = np.tanh(a) if layer.activation == "tanh" else a
        cache.append((x, y))
        x = y
    return x, cache


def _dense_backward(stack, cache, dy, grads, prefix):
    for k in range(len(stack) - 1, -1, -1):
        layer = stack[k]
        x, y = cache[k]
        da = dy * (1.0 - y * y) if layer.activation == "tanh" else dy
        grads[f"{prefix}.{k}.W"] += da.T @ x
        grads[f"{prefix}.{k}.b"] += da.sum(axis=0)
        dy = da @ layer.weights
    return dy


def _stacked(cell: LSTMCell):
    return np.vstack([cell.W[g] for g in GATES]), np.concatenate([cell.b[g] for g in GATES])


def _lstm_forward(cell: LSTMCell, X: np.ndarray):
    """Run over ``X`` of shape ``(B, tau, M)``; return final hidden ``(B, H)``."""
    B, tau, _ = X.shape
    H = cell.hidden
    W, b = _stacked(cell)
    h = np.zeros((B, H))
    c = np.zeros((B, H))
    cache = []
    for s in range(tau):
        inp = np.concatenate([X[:, s, :], h], axis=1)
        a = inp @ W.T + b
        i = _sigmoid(a[:, :H])
        f = _sigmoid(a[:, H:2 * H])
        o = _sigmoid(a[:, 2 * H:3 * H])
        g = np.tanh(a[:, 3 * H:])
        c_prev = c
        c = f * c_prev + i * g
        tc = np.tanh(c)
        h = o * tc
        cache.append((inp, i, f, o, g, c_prev, tc))
    return h, cache


def _lstm_backward(cell: LSTMCell, cache, dh: np.ndarray, grads) -> None:
    H = cell.hidden
    W, _ = _stacked(cell)
    M = cell.n_input
    dW = np.zeros_like(W)
    db = np.zeros(W.shape[0])
    dc = np.zeros_like(dh)
    for inp, i, f, o, g, c_prev, tc in reversed(cache):
        do = dh * tc
        dc = dc + dh * o * (1.0 - tc * tc)
        di = dc * g
        dg = dc * i
        df = dc * c_prev
        dc = dc * f
        da = np.concatenate(
            [di * i * (1 - i), df * f * (1 - f), do * o * (1 - o), dg * (1 - g * g)], axis=1
        )
        dW += da.T @ inp
        db += da.sum(axis=0)
        dh = (da @ W)[:, M:]
    for k, gate in enumerate(GATES):
        grads[f"lstm.W{gate}"] += dW[k * H:(k + 1) * H]
        grads[f"lstm.b{gate}"] += db[k * H:(k + 1) * H]


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------

def _check_window(model: NeuralModel, window: np.ndarray) -> np.ndarray:
    window = np.asarray(window, dtype=float)
    if window.shape[-2:] != (model.tau, model.n_features):
        raise DataError(
            f"window shape {window.shape[-2:]} does not match (tau, M) = "
            f"({model.tau}, {model.n_features})"
        )
    return window


def encode(model: NeuralModel, window: np.ndarray) -> np.ndarray:
    """Latent state of a ``(tau, M)`` window (or a leading batch of them)."""
    window = _check_window(model, window)
    flat = window.reshape(window.shape[:-2] + (model.tau * model.n_features,))
    z, _ = _dense_forward(model.encoder, flat)
    return z


def decode(model: NeuralModel, z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    if z.shape[-1] != model.latent_dim:
        raise DataError(f"latent vector has length {z.shape[-1]}, expected {model.latent_dim}")
    x, _ = _dense_forward(model.decoder, z)
    return x


def lstm_summary(model: NeuralModel, window: np.ndarray) -> np.ndarray:
    """Final LSTM hidden state for one window ``(tau, M)`` or a batch ``(B, tau, M)``."""
    window = _check_window(model, window)
    single = window.ndim == 2
    X = window[None] if single else window
    h, _ = _lstm_forward(model.lstm, X)
    return h[0] if single else h


def transition_from_summary(model: NeuralModel, z_prev: np.ndarray, summary: np.ndarray) -> np.ndarray:
    """Dense part of the transition given a precomputed LSTM summary.

    ``z_prev`` may carry extra leading dimensions (e.g. ensemble members)
    that broadcast against ``summary``.
    """
    z_prev = np.asarray(z_prev, dtype=float)
    if z_prev.shape[-1] != model.latent_dim:
        raise DataError(f"latent vector has length {z_prev.shape[-1]}, expected {model.latent_dim}")
    summary = np.broadcast_to(summary, z_prev.shape[:-1] + summary.shape[-1:])
    u = np.concatenate([z_prev, summary], axis=-1)
    z, _ = _dense_forward(model.transition, u)
    return z


def transition(model: NeuralModel, z_prev: np.ndarray, window: np.ndarray) -> np.ndarray:
    """Next latent state from ``z_prev`` and the window preceding the target time."""
    return transition_from_summary(model, z_prev, lstm_summary(model, window))


# ---------------------------------------------------------------------------
# loss and gradient
# ---------------------------------------------------------------------------

def _as_batch(model: NeuralModel, batch) -> tuple[np.ndarray, np.ndarray]:
    """Normalise a batch to ``(windows (B, tau, M), x_t (B, M))``.

    Accepts a sequence of :class:`~bssad.timeseries.WindowView` or a tuple of
    arrays.
    """
    if isinstance(batch, tuple) and len(batch) == 2 and isinstance(batch[0], np.ndarray):
        windows, current = batch
    else:
        batch = list(batch)
        if not batch:
            raise DataError("empty batch")
        windows = np.stack([v.past for v in batch])
        current = np.stack([v.current for v in batch])
    windows = _check_window(model, windows)
    current = np.asarray(current, dtype=float)
    if windows.shape[0] == 0:
        raise DataError("empty batch")
    if current.shape != (windows.shape[0], model.n_features):
        raise DataError("batch targets do not match windows")
    return windows, current


def _forward_loss(model: NeuralModel, windows: np.ndarray, current: np.ndarray):
    B = windows.shape[0]
    a1, a2, a3 = model.loss_weights
    x_prev = windows[:, -1, :]
    z, c_enc = _dense_forward(model.encoder, windows.reshape(B, -1))
    x_rec, c_rec = _dense_forward(model.decoder, z)
    h, c_lstm = _lstm_forward(model.lstm, windows)
    z_next, c_tr = _dense_forward(model.transition, np.concatenate([z, h], axis=1))
    x_pred, c_pred = _dense_forward(model.decoder, z_next)
    r1 = x_rec - x_prev
    r2 = x_pred - current
    r3 = z_next - z
    value = a1 * np.sum(r1 * r1) + a2 * np.sum(r2 * r2) + a3 * np.sum(r3 * r3)
    return value, (z, h, c_enc, c_rec, c_lstm, c_tr, c_pred, r1, r2, r3)


def loss(model: NeuralModel, batch) -> float:
    """Weighted sum over the batch of reconstruction, prediction and smoothness errors.

    For each item with window ending at ``t-1`` and target ``x_t``::

        a1 |x_{t-1} - dec(z_{t-1})|^2 + a2 |x_t - dec(z_t)|^2 + a3 |z_t - z_{t-1}|^2

    with ``z_{t-1} = enc(window)`` and ``z_t = F(z_{t-1}, window)``.
    """
    windows, current = _as_batch(model, batch)
    value, _ = _forward_loss(model, windows, current)
    return float(value)


def loss_and_gradient(model: NeuralModel, batch) -> tuple[float, dict[str, np.ndarray]]:
    windows, current = _as_batch(model, batch)
    value, (z, h, c_enc, c_rec, c_lstm, c_tr, c_pred, r1, r2, r3) = _forward_loss(
        model, windows, current
    )
    a1, a2, a3 = model.loss_weights
    Mp = model.latent_dim
    grads = {k: np.zeros_like(v) for k, v in model.parameters().items()}

    dz_next = 2.0 * a3 * r3 + _dense_backward(model.decoder, c_pred, 2.0 * a2 * r2, grads, "dec")
    dz = -2.0 * a3 * r3 + _dense_backward(model.decoder, c_rec, 2.0 * a1 * r1, grads, "dec")
    du = _dense_backward(model.transition, c_tr, dz_next, grads, "trans")
    dz += du[:, :Mp]
    _lstm_backward(model.lstm, c_lstm, du[:, Mp:], grads)
    _dense_backward(model.encoder, c_enc, dz, grads, "enc")
    return float(value), grads


def gradient(model: NeuralModel, batch) -> dict[str, np.ndarray]:
    """Analytic gradient of :func:`loss`, keyed like :meth:`NeuralModel.parameters`."""
    return loss_and_gradient(model, batch)[1]


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def update(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        """One in-place Adam step on ``params``."""
        self.step += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.step
        c2 = 1.0 - b2 ** self.step
        for name, p in params.items():
            g = grads[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def train(
    train_set: Dataset,
    val_set: Dataset,
    hyper: Hyperparams = Hyperparams(),
    seed: int = 0,
    progress=None,
) -> tuple[NeuralModel, NoiseEstimate, list[float]]:
    """Fit the subnets with mini-batch Adam, then estimate noise on ``val_set``.

    Returns the model, the noise estimate and the mean per-window training
    loss of every epoch. ``progress``, if given, is called as
    ``progress(epoch, loss)``.
    """
    tau = hyper.tau
    for name, ds in (("training", train_set), ("validation", val_set)):
        if ds.T == 0:
            raise DataError(f"{name} set is empty")
        if ds.T <= tau:
            raise DataError(f"{name} set has T={ds.T}, needs more than tau={tau} rows")
    if train_set.labels is not None and np.any(train_set.labels == 1):
        raise PreconditionError("training data must be normal-only")
    if train_set.M != val_set.M:
        raise DataError("training and validation feature counts differ")

    model = init_model(
        train_set.M, hyper.latent_dim, tau, hyper.hidden_dim, seed,
        (hyper.alpha1, hyper.alpha2, hyper.alpha3),
    )
    windows = np.ascontiguousarray(window_array(train_set, tau))
    current = train_set.values[tau:]
    n = windows.shape[0]
    rng = np.random.default_rng([seed, 1])
    adam = AdamState(hyper.lr, hyper.beta1, hyper.beta2, hyper.eps)
    params = model.parameters()
    history: list[float] = []
    for epoch in range(hyper.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, hyper.batch_size):
            idx = order[start:start + hyper.batch_size]
            value, grads = loss_and_gradient(model, (windows[idx], current[idx]))
            if not math.isfinite(value):
                raise NumericalError(f"non-finite training loss in epoch {epoch + 1}")
            scale = 1.0 / len(idx)
            for g in grads.values():
                g *= scale
            adam.update(params, grads)
            total += value
        history.append(total / n)
        if progress is not None:
            progress(epoch + 1, history[-1])
    return model, estimate_noise(model, val_set), history


# ---------------------------------------------------------------------------
# noise estimation
# ---------------------------------------------------------------------------

def psd_clamp(S: np.ndarray) -> np.ndarray:
    """Symmetrise and clamp negative eigenvalues to zero."""
    S = 0.5 * (S + S.T)
    w, V = np.linalg.eigh(S)
    if np.all(w >= 0):
        return S
    S = (V * np.maximum(w, 0.0)) @ V.T
    return 0.5 * (S + S.T)


def sample_covariance(residuals: np.ndarray) -> np.ndarray:
    """Mean-subtracted covariance with divisor ``N - 1``, clamped to PSD."""
    residuals = np.asarray(residuals, dtype=float)
    if residuals.shape[0] < 2:
        raise DataError(f"need at least 2 residuals, got {residuals.shape[0]}")
    d = residuals - residuals.mean(axis=0)
    return psd_clamp(d.T @ d / (residuals.shape[0] - 1))


def noise_residuals(model: NeuralModel, val_set: Dataset) -> tuple[np.ndarray, np.ndarray]:
    """Process residuals ``q_t`` and measurement residuals ``r_t`` for ``t = tau .. T-1``."""
    tau = model.tau
    if val_set.T <= tau:
        raise DataError(f"validation set has T={val_set.T}, needs more than tau={tau} rows")
    if val_set.M != model.n_features:
        raise DataError("validation feature count does not match the model")
    past = window_array(val_set, tau)  # rows t-tau .. t-1
    ending = np.swapaxes(sliding_window_view(val_set.values, tau, axis=0), 1, 2)[1:]  # rows t-tau+1 .. t
    z_prev = encode(model, past)
    z_cur = encode(model, ending)
    q = z_cur - transition_from_summary(model, z_prev, lstm_summary(model, past))
    r = val_set.values[tau:] - decode(model, z_cur)
    return q, r


def estimate_noise(model: NeuralModel, val_set: Dataset) -> NoiseEstimate:
    """Process and measurement covariances from validation residuals."""
    q, r = noise_residuals(model, val_set)
    return NoiseEstimate(sample_covariance(q), sample_covariance(r))


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def _layer_meta(stack: list[Layer]) -> list[str]:
    return [l.activation for l in stack]


def save_model(model: NeuralModel, noise: NoiseEstimate, path: str | os.PathLike) -> None:
    """Write the model as text: header line, JSON metadata lines, named tensors."""
    meta = {
        "tau": model.tau,
        "loss_weights": list(model.loss_weights),
        "activations": {
            "enc": _layer_meta(model.encoder),
            "dec": _layer_meta(model.decoder),
            "trans": _layer_meta(model.transition),
        },
        "extra": model.metadata,
    }
    tensors = dict(model.parameters())
    tensors["noise.Q"] = noise.Q
    tensors["noise.R"] = noise.R
    lines = [f"{FORMAT_HEADER} {FORMAT_VERSION}"]
    for key, value in meta.items():
        lines.append(f"meta {key} {json.dumps(value, sort_keys=True)}")
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype=float)
        lines.append(f"tensor {name} {arr.ndim} " + " ".join(str(d) for d in arr.shape))
        lines.append(" ".join(repr(float(v)) for v in arr.ravel()))
    lines.append("end")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_model(path: str | os.PathLike) -> tuple[NeuralModel, NoiseEstimate]:
    """Inverse of :func:`save_model`; parameters round-trip bit-exactly."""
    try:
        with open(path, encoding="utf-8") as fh:
            lines = fh.read().split("\n")
    except OSError as exc:
        raise ModelFormatError(f"cannot read model file {path}: {exc}") from None
    head = lines[0].split() if lines else []
    if len(head) != 2 or head[0] != FORMAT_HEADER:
        raise ModelFormatError(f"{path}: not a model file (bad header {lines[0][:40]!r})")
    if head[1] != str(FORMAT_VERSION):
        raise ModelFormatError(f"{path}: unsupported model format version {head[1]!r}")

    meta: dict[str, Any] = {}
    tensors: dict[str, np.ndarray] = {}
    pos = 1
    ended = False
    while pos < len(lines):
        line = lines[pos]
        pos += 1
        if not line.strip():
            continue
        if line == "end":
            ended = True
            break
        kind, _, rest = line.partition(" ")
        if kind == "meta":
            key, _, payload = rest.partition(" ")
            try:
                meta[key] = json.loads(payload)
            except json.JSONDecodeError:
                raise ModelFormatError(f"{path}: bad metadata for {key!r}") from None
        elif kind == "tensor":
            parts = rest.split()
            try:
                name, ndim = parts[0], int(parts[1])
                shape = tuple(int(d) for d in parts[2:2 + ndim])
            except (IndexError, ValueError):
                raise ModelFormatError(f"{path}: malformed tensor line {line!r}") from None
            if len(shape) != ndim:
                raise ModelFormatError(f"{path}: tensor {name!r} lists {len(shape)} dims, expected {ndim}")
            if pos >= len(lines):
                raise ModelFormatError(f"{path}: truncated file (no values for tensor {name!r})")
            raw = lines[pos].split()
            pos += 1
            expected = int(np.prod(shape)) if shape else 1
            if len(raw) != expected:
                raise ModelFormatError(
                    f"{path}: tensor {name!r} has shape {shape} but {len(raw)} values"
                )
            try:
                tensors[name] = np.array([float(v) for v in raw], dtype=float).reshape(shape)
            except ValueError:
                raise ModelFormatError(f"{path}: non-numeric value in tensor {name!r}") from None
        else:
            raise ModelFormatError(f"{path}: unexpected line {line[:40]!r}")
    if not ended:
        raise ModelFormatError(f"{path}: truncated file (missing end marker)")

    try:
        acts = meta["activations"]

        def stack(prefix):
            return [
                Layer(tensors[f"{prefix}.{k}.W"], tensors[f"{prefix}.{k}.b"], a)
                for k, a in enumerate(acts[prefix])
            ]

        lstm = LSTMCell({g: tensors[f"lstm.W{g}"] for g in GATES},
                        {g: tensors[f"lstm.b{g}"] for g in GATES})
        model = NeuralModel(
            stack("enc"), stack("dec"), lstm, stack("trans"), int(meta["tau"]),
            tuple(float(a) for a in meta["loss_weights"]), meta.get("extra", {}),
        )
        noise = NoiseEstimate(tensors["noise.Q"], tensors["noise.R"])
    except KeyError as exc:
        raise ModelFormatError(f"{path}: missing entry {exc.args[0]!r}") from None
    except DataError as exc:
        raise ModelFormatError(f"{path}: shape inconsistency: {exc}") from None
    if noise.Q.shape != (model.latent_dim,) * 2 or noise.R.shape != (model.n_features,) * 2:
        raise ModelFormatError(f"{path}: shape inconsistency in noise covariances")
    return model, noise
