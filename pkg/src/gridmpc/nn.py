"""Small feed-forward networks in numpy: tanh hidden layers, linear output.

Inputs and outputs are standardized per feature; training minimizes the
mean squared error in the standardized output space with mini-batch ADAM
and inverted dropout on the hidden layers.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

MODEL_VERSION = 1


class ModelFormatError(ValueError):
    """Corrupt or truncated model file."""


class ModelVersionError(ModelFormatError):
    pass


class TrainingError(RuntimeError):
    pass


@dataclass
class NormalizationSpec:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float)
        self.std = np.asarray(self.std, dtype=float)
        if np.any(self.std <= 0):
            raise ValueError("normalization std must be positive")

    @classmethod
    def fit(cls, X, min_std=1e-12):
        X = np.asarray(X, dtype=float)
        std = X.std(axis=0)
        return cls(X.mean(axis=0), np.where(std > min_std, std, 1.0))

    @classmethod
    def identity(cls, n):
        return cls(np.zeros(n), np.ones(n))

    def normalize(self, X):
        return (np.asarray(X, dtype=float) - self.mean) / self.std

    def denormalize(self, Z):
        return np.asarray(Z, dtype=float) * self.std + self.mean


@dataclass
class MlpModel:
    weights: list  # W[l] has shape (n_in, n_out)
    biases: list
    in_norm: NormalizationSpec
    out_norm: NormalizationSpec
    activation: str = "tanh"

    def __post_init__(self):
        if self.activation != "tanh":
            raise ValueError("only tanh hidden activations are supported")
        for l, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.shape[1] != b.shape[0] or (l > 0 and W.shape[0] != self.weights[l - 1].shape[1]):
                raise ValueError(f"layer {l}: inconsistent shapes")
        if len(self.in_norm.mean) != self.n_inputs or len(self.out_norm.mean) != self.n_outputs:
            raise ValueError("normalization size does not match the layer sizes")

    @property
    def sizes(self) -> list:
        return [self.weights[0].shape[0]] + [W.shape[1] for W in self.weights]

    @property
    def n_inputs(self) -> int:
        return self.weights[0].shape[0]

    @property
    def n_outputs(self) -> int:
        return self.weights[-1].shape[1]

    def params(self) -> list:
        return [p for W, b in zip(self.weights, self.biases) for p in (W, b)]

    def copy(self) -> "MlpModel":
        return MlpModel([W.copy() for W in self.weights], [b.copy() for b in self.biases],
                        NormalizationSpec(self.in_norm.mean.copy(), self.in_norm.std.copy()),
                        NormalizationSpec(self.out_norm.mean.copy(), self.out_norm.std.copy()), self.activation)


def init_mlp(sizes: Sequence[int], in_norm=None, out_norm=None, seed=0) -> MlpModel:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    Ws, bs = [], []
    for a, b in zip(sizes[:-1], sizes[1:]):
        lim = np.sqrt(6.0 / (a + b))
        Ws.append(rng.uniform(-lim, lim, size=(a, b)))
        bs.append(np.zeros(b))
    return MlpModel(Ws, bs, in_norm or NormalizationSpec.identity(sizes[0]),
                    out_norm or NormalizationSpec.identity(sizes[-1]))


def _forward_normalized(model: MlpModel, Z):
    h = Z
    last = len(model.weights) - 1
    for l, (W, b) in enumerate(zip(model.weights, model.biases)):
        h = h @ W + b
        if l < last:
            h = np.tanh(h)
    return h


def mlp_forward(model: MlpModel, x) -> np.ndarray:
    """Evaluate on one input vector or a batch of rows (dropout off)."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != model.n_inputs:
        raise ValueError(f"expected {model.n_inputs} inputs, got {x.shape[-1]}")
    return model.out_norm.denormalize(_forward_normalized(model, model.in_norm.normalize(x)))


def loss_and_grads(model: MlpModel, Zx, Zy, dropout=0.0, rng=None):
    """MSE (mean over rows and outputs) in normalized space and its gradients.

    Gradients are returned in ``model.params()`` order.
    """
    acts, masks = [Zx], []
    h = Zx
    last = len(model.weights) - 1
    for l, (W, b) in enumerate(zip(model.weights, model.biases)):
        h = h @ W + b
        if l < last:
            h = np.tanh(h)
            if dropout > 0:
                mask = (rng.random(h.shape) >= dropout) / (1.0 - dropout)
                h = h * mask
            else:
                mask = None
            masks.append(mask)
        acts.append(h)
    err = acts[-1] - Zy
    n = err.size
    loss = float(np.sum(err**2) / n)
    grads = [None] * (2 * len(model.weights))
    delta = 2.0 * err / n
    for l in range(last, -1, -1):
        grads[2 * l] = acts[l].T @ delta
        grads[2 * l + 1] = delta.sum(axis=0)
        if l > 0:
            delta = delta @ model.weights[l].T
            if masks[l - 1] is not None:
                delta = delta * masks[l - 1]
                # tanh' from the pre-dropout activation
                pre = acts[l] / np.where(masks[l - 1] == 0, 1.0, masks[l - 1])
            else:
                pre = acts[l]
            delta = delta * (1.0 - pre**2)
    return loss, grads


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 32
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    dropout: float = 0.1
    epochs: int = 200
    seed: int = 0
    lr_decay: float = 1.0  # multiplicative per-epoch factor

    def __post_init__(self):
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("ADAM betas must lie in (0, 1)")
        if self.batch_size < 1 or self.lr <= 0 or not 0 <= self.dropout < 1:
            raise ValueError("invalid training configuration")


@dataclass
class TrainHistory:
    train_loss: list = field(default_factory=list)
    test_loss: list = field(default_factory=list)


def train_adam(X, Y, hidden: Sequence[int], config: Optional[TrainConfig] = None, X_test=None, Y_test=None,
               model: Optional[MlpModel] = None):
    """Fit an MLP ``len(X[0]) -> hidden -> len(Y[0])``; returns ``(model, history)``."""
    config = config or TrainConfig()
    X, Y = np.asarray(X, dtype=float), np.asarray(Y, dtype=float)
    if len(X) == 0 or len(X) != len(Y):
        raise ValueError("need a nonempty dataset with matching rows")
    if config.batch_size > len(X):
        raise ValueError(f"batch size {config.batch_size} exceeds dataset size {len(X)}")
    if model is None:
        model = init_mlp([X.shape[1], *hidden, Y.shape[1]], NormalizationSpec.fit(X), NormalizationSpec.fit(Y),
                         seed=config.seed)
    else:
        model = model.copy()
    rng = np.random.default_rng(config.seed + 1)
    Zx, Zy = model.in_norm.normalize(X), model.out_norm.normalize(Y)
    params = model.params()
    m = [np.zeros_like(p) for p in params]
    v = [np.zeros_like(p) for p in params]
    step = 0
    lr = config.lr
    hist = TrainHistory()
    n = len(X)
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        total = 0.0
        for s in range(0, n, config.batch_size):
            idx = order[s:s + config.batch_size]
            loss, grads = loss_and_grads(model, Zx[idx], Zy[idx], config.dropout, rng)
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}, step {step}")
            total += loss * len(idx)
            step += 1
            b1t, b2t = 1 - config.beta1**step, 1 - config.beta2**step
            for p, g, mi, vi in zip(params, grads, m, v):
                mi *= config.beta1
                mi += (1 - config.beta1) * g
                vi *= config.beta2
                vi += (1 - config.beta2) * g * g
                p -= lr * (mi / b1t) / (np.sqrt(vi / b2t) + config.eps)
        hist.train_loss.append(total / n)
        if X_test is not None:
            P = _forward_normalized(model, model.in_norm.normalize(X_test))
            hist.test_loss.append(float(np.mean((P - model.out_norm.normalize(Y_test)) ** 2)))
        lr *= config.lr_decay
    return model, hist


def r2_score(pred, actual, clamp=True) -> float:
    """Coefficient of determination pooled over outputs.

    ``1 - Σ SS_res / Σ SS_tot`` with per-output means, so outputs with large
    spread weigh more. Clamped to [0, 1] unless ``clamp`` is false.
    """
    pred, actual = np.asarray(pred, dtype=float), np.asarray(actual, dtype=float)
    if pred.shape != actual.shape:
        raise ValueError("prediction and target shapes differ")
    if actual.shape[0] < 2:
        raise ValueError("need at least two samples")
    if actual.ndim == 1:
        pred, actual = pred[:, None], actual[:, None]
    ss_tot = float(np.sum((actual - actual.mean(axis=0)) ** 2))
    if ss_tot == 0.0:
        raise ValueError("targets have zero variance; R^2 undefined")
    r2 = 1.0 - float(np.sum((actual - pred) ** 2)) / ss_tot
    return min(max(r2, 0.0), 1.0) if clamp else r2


# -- serialization -------------------------------------------------------------
def _vec(v) -> str:
    return " ".join(float(x).hex() for x in np.ravel(v))


def save_model(model: MlpModel, path):
    """Versioned text file; floats in hex for a bit-exact round trip."""
    lines = [f"gridmpc-mlp {MODEL_VERSION}", f"activation {model.activation}",
             "layers " + " ".join(str(s) for s in model.sizes),
             "in_mean " + _vec(model.in_norm.mean), "in_std " + _vec(model.in_norm.std),
             "out_mean " + _vec(model.out_norm.mean), "out_std " + _vec(model.out_norm.std)]
    for l, (W, b) in enumerate(zip(model.weights, model.biases)):
        lines.append(f"W{l} {W.shape[0]} {W.shape[1]}")
        lines += [_vec(row) for row in W]
        lines.append(f"b{l} " + _vec(b))
    lines.append("end")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_model(path) -> MlpModel:
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or not lines[0].startswith("gridmpc-mlp"):
        raise ModelFormatError(f"{path}: not a model file")
    try:
        version = int(lines[0].split()[1])
    except (IndexError, ValueError) as exc:
        raise ModelFormatError(f"{path}: bad header") from exc
    if version != MODEL_VERSION:
        raise ModelVersionError(f"{path}: model version {version}, expected {MODEL_VERSION}")
    try:
        it = iter(lines[1:])

        def field_(name):
            key, _, rest = next(it).partition(" ")
            if key != name:
                raise ModelFormatError(f"{path}: expected {name!r}, found {key!r}")
            return rest

        floats = lambda s: np.array([float.fromhex(t) for t in s.split()])
        activation = field_("activation").strip()
        sizes = [int(t) for t in field_("layers").split()]
        norms = [floats(field_(k)) for k in ("in_mean", "in_std", "out_mean", "out_std")]
        Ws, bs = [], []
        for l, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            shape = [int(t) for t in field_(f"W{l}").split()]
            if shape != [a, b]:
                raise ModelFormatError(f"{path}: layer {l} shape {shape} != {[a, b]}")
            W = np.array([floats(next(it)) for _ in range(a)])
            bias = floats(field_(f"b{l}"))
            if W.shape != (a, b) or bias.shape != (b,):
                raise ModelFormatError(f"{path}: layer {l} truncated")
            Ws.append(W)
            bs.append(bias)
        if next(it).strip() != "end":
            raise ModelFormatError(f"{path}: missing end marker")
    except StopIteration:
        raise ModelFormatError(f"{path}: truncated model file") from None
    except ValueError as exc:
        if isinstance(exc, ModelFormatError):
            raise
        raise ModelFormatError(f"{path}: corrupt model file ({exc})") from exc
    return MlpModel(Ws, bs, NormalizationSpec(norms[0], norms[1]), NormalizationSpec(norms[2], norms[3]), activation)
