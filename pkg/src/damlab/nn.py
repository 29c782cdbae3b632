"""Fixed-architecture ReLU MLP with hand-derived gradients.

Flat parameter layout (shared by checkpoints, task vectors, merging and masks):
layer 0 weight (out x in, row-major), layer 0 bias, layer 1 weight, layer 1
bias, ... . A layer computes ``h @ W.T + b``; ReLU sits between layers, the last
layer emits raw logits. The ReLU subgradient at exactly 0 is taken as 0.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import log_softmax, stable_softmax

LOSS_KINDS = ("cross_entropy", "entropy")
LOG_FLOOR = np.log(1e-300)


@dataclass(frozen=True)
class ArchSpec:
    input_dim: int = 196
    hidden: tuple[int, ...] = (64, 64)
    num_classes: int = 4
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        dims = (self.input_dim, *self.hidden, self.num_classes)
        if any(int(v) <= 0 for v in dims):
            raise ValueError(f"layer widths must be positive, got {dims}")
        if self.activation != "relu":
            raise ValueError("only relu activation is supported")

    @property
    def layer_shapes(self) -> list[tuple[int, int]]:
        dims = (self.input_dim, *self.hidden, self.num_classes)
        return [(dims[i + 1], dims[i]) for i in range(len(dims) - 1)]

    @property
    def num_layers(self) -> int:
        return len(self.hidden) + 1

    @property
    def param_count(self) -> int:
        return sum(o * i + o for o, i in self.layer_shapes)

    def segments(self) -> list[tuple[str, int, int, tuple[int, ...]]]:
        """(name, start, stop, shape) for every parameter tensor in flat order."""
        out, pos = [], 0
        for l, (o, i) in enumerate(self.layer_shapes):
            out.append((f"layers.{l}.weight", pos, pos + o * i, (o, i)))
            pos += o * i
            out.append((f"layers.{l}.bias", pos, pos + o, (o,)))
            pos += o
        return out

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "hidden": list(self.hidden),
            "num_classes": self.num_classes,
            "activation": self.activation,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ArchSpec":
        return cls(int(d["input_dim"]), tuple(d["hidden"]), int(d["num_classes"]), d.get("activation", "relu"))


@dataclass
class ParamVector:
    arch: ArchSpec
    flat: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.flat = np.asarray(self.flat, dtype=np.float64).reshape(-1)
        if self.flat.size != self.arch.param_count:
            raise ValueError(f"flat vector has {self.flat.size} entries, arch expects {self.arch.param_count}")

    def layers(self) -> list[tuple[np.ndarray, np.ndarray]]:
        return unflatten(self.arch, self.flat)

    def copy(self) -> "ParamVector":
        return ParamVector(self.arch, self.flat.copy())


def unflatten(arch: ArchSpec, flat: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    """Views (W, b) per layer into ``flat``."""
    layers, pos = [], 0
    for o, i in arch.layer_shapes:
        W = flat[pos : pos + o * i].reshape(o, i)
        pos += o * i
        b = flat[pos : pos + o]
        pos += o
        layers.append((W, b))
    return layers


def flatten(layers) -> np.ndarray:
    return np.concatenate([np.concatenate([W.reshape(-1), b.reshape(-1)]) for W, b in layers])


def init_params(arch: ArchSpec, rng) -> ParamVector:
    """He-style normal init for weights, zero biases."""
    parts = []
    for o, i in arch.layer_shapes:
        parts.append(rng.normal((o, i), sigma=np.sqrt(2.0 / i)).reshape(-1))
        parts.append(np.zeros(o))
    return ParamVector(arch, np.concatenate(parts))


def _check_batch(arch: ArchSpec, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != arch.input_dim:
        raise ValueError(f"batch has shape {list(X.shape)}, expected [B, {arch.input_dim}]")
    return X


def _forward_cache(params: ParamVector, X: np.ndarray):
    acts = [X]
    pre = []
    h = X
    layers = params.layers()
    for l, (W, b) in enumerate(layers):
        z = h @ W.T + b
        pre.append(z)
        h = np.maximum(z, 0.0) if l < len(layers) - 1 else z
        acts.append(h)
    return layers, acts, pre


def forward(params: ParamVector, batch) -> np.ndarray:
    X = _check_batch(params.arch, batch)
    return _forward_cache(params, X)[1][-1]


def predict(params: ParamVector, batch) -> np.ndarray:
    return np.argmax(forward(params, batch), axis=1)


def _entropy_head(logits):
    logp = np.maximum(log_softmax(logits), LOG_FLOOR)
    p = np.exp(logp)
    per = -(p * logp).sum(axis=1)
    # dH/dz_k = -p_k (log p_k + H)
    dz = -p * (logp + per[:, None])
    return per, dz


def _xent_head(logits, labels):
    B, C = logits.shape
    logp = log_softmax(logits)
    per = -logp[np.arange(B), labels]
    dz = np.exp(logp)
    dz[np.arange(B), labels] -= 1.0
    return per, dz


def _check_labels(labels, n, C) -> np.ndarray:
    if labels is None:
        raise ValueError("cross_entropy loss needs labels")
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.size != n:
        raise ValueError(f"{labels.size} labels for {n} samples")
    if labels.size and (labels.min() < 0 or labels.max() >= C):
        raise ValueError(f"labels must lie in [0, {C})")
    return labels


def _head(kind, logits, labels):
    if kind == "entropy":
        return _entropy_head(logits)
    if kind == "cross_entropy":
        return _xent_head(logits, _check_labels(labels, logits.shape[0], logits.shape[1]))
    raise ValueError(f"loss_kind must be one of {LOSS_KINDS}, got {kind!r}")


def _backward(layers, acts, pre, dz, want_params=True, want_input=False):
    """Backprop ``dz`` (dLoss/dlogits) through the net."""
    grads = [None] * len(layers)
    delta = dz
    g_in = None
    for l in range(len(layers) - 1, -1, -1):
        W, _ = layers[l]
        if want_params:
            grads[l] = (delta.T @ acts[l], delta.sum(axis=0))
        if l > 0 or want_input:
            delta_prev = delta @ W
            if l > 0:
                delta = delta_prev * (pre[l - 1] > 0)
            else:
                g_in = delta_prev
    g_params = flatten(grads) if want_params else None
    return g_params, g_in


def loss_and_grads(params: ParamVector, batch, loss_kind: str, labels=None, want_params=True, want_input=False):
    """Mean loss plus its gradients w.r.t. the flat parameters and/or the inputs."""
    X = _check_batch(params.arch, batch)
    if X.shape[0] == 0:
        raise ValueError("empty batch")
    layers, acts, pre = _forward_cache(params, X)
    per, dz = _head(loss_kind, acts[-1], labels)
    B = X.shape[0]
    g_params, g_in = _backward(layers, acts, pre, dz / B, want_params, want_input)
    return float(per.mean()), g_params, g_in


def entropy_loss(params: ParamVector, batch) -> float:
    X = _check_batch(params.arch, batch)
    if X.shape[0] == 0:
        raise ValueError("empty batch")
    return float(_entropy_head(forward(params, X))[0].mean())


def cross_entropy_loss(params: ParamVector, batch, labels) -> float:
    X = _check_batch(params.arch, batch)
    if X.shape[0] == 0:
        raise ValueError("empty batch")
    return float(_head("cross_entropy", forward(params, X), labels)[0].mean())


def grad_params(params: ParamVector, batch, loss_kind: str, labels=None) -> np.ndarray:
    return loss_and_grads(params, batch, loss_kind, labels)[1]


def grad_input(params: ParamVector, batch, loss_kind: str, labels=None) -> np.ndarray:
    """dLoss/dX for the mean loss; row ``s`` only depends on sample ``s``."""
    return loss_and_grads(params, batch, loss_kind, labels, want_params=False, want_input=True)[2]


def fisher_diagonal(params: ParamVector, batch) -> np.ndarray:
    """Empirical diagonal Fisher using the model's own argmax predictions.

    F_j = mean over samples of (d log p(y_hat | x) / d theta_j)^2.
    """
    X = _check_batch(params.arch, batch)
    if X.shape[0] == 0:
        raise ValueError("empty probe batch")
    layers, acts, pre = _forward_cache(params, X)
    logits = acts[-1]
    B = X.shape[0]
    # d(-log p_yhat)/dz = p - onehot; sign is irrelevant once squared
    dz = stable_softmax(logits)
    dz[np.arange(B), np.argmax(logits, axis=1)] -= 1.0
    out = [None] * len(layers)
    delta = dz
    for l in range(len(layers) - 1, -1, -1):
        W, _ = layers[l]
        # sum_s (delta_s a_s^T)^2 == (delta^2)^T (a^2)
        out[l] = ((delta**2).T @ (acts[l] ** 2) / B, (delta**2).sum(axis=0) / B)
        if l > 0:
            delta = (delta @ W) * (pre[l - 1] > 0)
    return flatten(out)
