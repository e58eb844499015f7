"""A one-hidden-layer classifier with a normalization layer.

Architecture: flatten -> dense(H) -> norm -> ReLU -> dense(C).  During
test-time adaptation only the normalization affine parameters (gamma, beta)
are trainable; pretraining updates everything.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, DimensionError, FormatError, StateError
from .numerics import entropy, log_softmax, softmax, spawn

NORM_KINDS = ("batch", "layer")
ADAPT_PARAMS = ("gamma", "beta")
ALL_PARAMS = ("W1", "b1", "gamma", "beta", "W2", "b2")
CHECKPOINT_FORMAT = "deyo-lab-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class Counters:
    """Run-level operation tallies (sample counts, not call counts)."""

    forwards_main: int = 0
    forwards_aux: int = 0
    backwards: int = 0
    selected: int = 0

    def as_dict(self):
        return {
            "forwards_main": self.forwards_main,
            "forwards_aux": self.forwards_aux,
            "backwards": self.backwards,
            "selected": self.selected,
        }


@dataclass
class NormLayer:
    kind: str
    gamma: np.ndarray
    beta: np.ndarray
    eps: float = 1e-5

    def __post_init__(self):
        if self.kind not in NORM_KINDS:
            raise ConfigurationError(f"norm kind must be one of {NORM_KINDS}, got {self.kind!r}")


@dataclass
class Model:
    W1: np.ndarray
    b1: np.ndarray
    norm: NormLayer
    W2: np.ndarray
    b2: np.ndarray
    velocity: dict = field(default_factory=dict)
    _saved: "Model | None" = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if not self.velocity:
            self.velocity = {k: np.zeros_like(self.param(k)) for k in ADAPT_PARAMS}

    @property
    def input_dim(self):
        return self.W1.shape[0]

    @property
    def hidden(self):
        return self.W1.shape[1]

    @property
    def num_classes(self):
        return self.W2.shape[1]

    def param(self, name):
        if name in ("gamma", "beta"):
            return getattr(self.norm, name)
        return getattr(self, name)

    def set_param(self, name, value):
        if name in ("gamma", "beta"):
            setattr(self.norm, name, value)
        else:
            setattr(self, name, value)

    def copy(self) -> "Model":
        clone = copy.deepcopy(self)
        clone._saved = None
        return clone

    def snapshot(self) -> "Model":
        """Remember the current parameters and momentum buffers."""
        self._saved = None
        self._saved = self.copy()
        return self

    def reset(self) -> "Model":
        """Restore the state captured by the last ``snapshot``."""
        if self._saved is None:
            raise StateError("reset() called before snapshot()")
        saved = self._saved
        for name in ALL_PARAMS:
            self.set_param(name, saved.param(name).copy())
        self.norm.eps = saved.norm.eps
        self.velocity = {k: v.copy() for k, v in saved.velocity.items()}
        return self


def init_model(input_dim, num_classes, rng, hidden=128, norm="batch") -> Model:
    if hidden < 1:
        raise ConfigurationError("hidden width must be >= 1")
    if num_classes < 2:
        raise ConfigurationError("need at least 2 classes")
    W1 = rng.normal(0.0, np.sqrt(2.0 / input_dim), size=(input_dim, hidden))
    W2 = rng.normal(0.0, np.sqrt(2.0 / hidden), size=(hidden, num_classes))
    return Model(
        W1=W1,
        b1=np.zeros(hidden),
        norm=NormLayer(norm, np.ones(hidden), np.zeros(hidden)),
        W2=W2,
        b2=np.zeros(num_classes),
    )


@dataclass
class Predictions:
    """Per-sample outputs for a batch; arrays share the leading axis."""

    logits: np.ndarray
    probs: np.ndarray
    pseudo_labels: np.ndarray
    entropy: np.ndarray

    def __len__(self):
        return len(self.pseudo_labels)


def _flatten(model, x):
    x = np.asarray(x, dtype=np.float64)
    x = x.reshape(len(x), -1)
    if x.shape[1] != model.input_dim:
        raise DimensionError(f"model expects {model.input_dim} inputs, got {x.shape[1]}")
    return x


def _forward(model, x, stats=None):
    """Forward pass returning logits and the cache needed for backward."""
    x = _flatten(model, x)
    n = len(x)
    if n == 0:
        raise DimensionError("empty batch")
    h = x @ model.W1 + model.b1
    norm = model.norm
    if norm.kind == "batch":
        if stats is not None:
            mu, var = stats
        else:
            if n < 2:
                raise ConfigurationError(
                    "batch-norm needs at least 2 samples per batch; use norm=layer for batch size 1"
                )
            mu, var = h.mean(axis=0), h.var(axis=0)
    else:
        mu, var = h.mean(axis=1, keepdims=True), h.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + norm.eps)
    xhat = (h - mu) * inv
    y = norm.gamma * xhat + norm.beta
    r = np.maximum(y, 0.0)
    logits = r @ model.W2 + model.b2
    cache = {"x": x, "xhat": xhat, "inv": inv, "y": y, "r": r, "mu": mu, "var": var}
    return logits, cache


def _predictions(logits):
    probs = softmax(logits)
    return Predictions(
        logits=logits,
        probs=probs,
        pseudo_labels=np.argmax(probs, axis=1),
        entropy=entropy(probs),
    )


def forward(model: Model, x, counters: Counters | None = None, stats=None) -> Predictions:
    """Predict a batch.

    Under batch-norm the statistics of ``x`` itself are used unless ``stats``
    (mean, var) is given.  ``counters.forwards_main`` grows by the batch size.
    """
    logits, _ = _forward(model, x, stats=stats)
    if counters is not None:
        counters.forwards_main += len(logits)
    return _predictions(logits)


def batch_stats(model: Model, x):
    """Hidden pre-normalization (mean, var) of a batch, for batch-norm reuse."""
    h = _flatten(model, x) @ model.W1 + model.b1
    return h.mean(axis=0), h.var(axis=0)


def _backward(model, cache, dlogits, full=False):
    r, y, xhat, inv = cache["r"], cache["y"], cache["xhat"], cache["inv"]
    grads = {}
    dr = dlogits @ model.W2.T
    dy = dr * (y > 0)
    grads["gamma"] = (dy * xhat).sum(axis=0)
    grads["beta"] = dy.sum(axis=0)
    if not full:
        return grads
    grads["W2"] = r.T @ dlogits
    grads["b2"] = dlogits.sum(axis=0)
    dxhat = dy * model.norm.gamma
    if model.norm.kind == "batch":
        n = len(dxhat)
        dh = inv / n * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
    else:
        m = dxhat.shape[1]
        dh = inv / m * (
            m * dxhat
            - dxhat.sum(axis=1, keepdims=True)
            - xhat * (dxhat * xhat).sum(axis=1, keepdims=True)
        )
    grads["W1"] = cache["x"].T @ dh
    grads["b1"] = dh.sum(axis=0)
    return grads


def _selection_denominator(weights, denom):
    if denom is None:
        denom = max(1, int(np.count_nonzero(weights)))
    return float(denom)


def weighted_entropy_loss(model: Model, x, weights, denom=None) -> float:
    """sum_i w_i * Ent(x_i) / denom, with denom defaulting to the number of nonzero weights."""
    weights = np.asarray(weights, dtype=np.float64)
    logits, _ = _forward(model, x)
    ent = entropy(softmax(logits))
    return float((weights * ent).sum() / _selection_denominator(weights, denom))


def grad_adapt_params(model: Model, x, weights, denom=None) -> dict:
    """Gradient of the weighted entropy loss with respect to gamma and beta.

    Weights are treated as constants.  An all-zero weight vector gives a zero
    gradient.
    """
    weights = np.asarray(weights, dtype=np.float64)
    if np.any(weights < 0) or not np.all(np.isfinite(weights)):
        raise ValueError("weights must be finite and nonnegative")
    if not np.any(weights):
        return {k: np.zeros_like(model.param(k)) for k in ADAPT_PARAMS}
    logits, cache = _forward(model, x)
    logp = log_softmax(logits)
    p = np.exp(logp)
    ent = -(p * logp).sum(axis=1, keepdims=True)
    # dEnt/dz_k = -p_k (log p_k + Ent)
    dlogits = -p * (logp + ent)
    dlogits *= (weights / _selection_denominator(weights, denom))[:, None]
    return _backward(model, cache, dlogits)


def sgd_step(model: Model, grads: dict, lr: float, momentum: float = 0.9) -> Model:
    """In-place SGD with momentum on the adaptation parameters only.

    v <- momentum * v + g ;  theta <- theta - lr * v
    """
    if lr < 0:
        raise ValueError("lr must be nonnegative")
    for name in ADAPT_PARAMS:
        v = momentum * model.velocity[name] + grads[name]
        model.velocity[name] = v
        model.set_param(name, model.param(name) - lr * v)
    return model


def cross_entropy_grads(model: Model, x, labels, weights=None):
    """Loss and gradients (all parameters) of weighted mean cross-entropy."""
    labels = np.asarray(labels)
    logits, cache = _forward(model, x)
    n = len(labels)
    if weights is None:
        weights = np.ones(n)
    denom = max(1.0, float(weights.sum()))
    logp = log_softmax(logits)
    loss = -(weights * logp[np.arange(n), labels]).sum() / denom
    dlogits = np.exp(logp)
    dlogits[np.arange(n), labels] -= 1.0
    dlogits *= (weights / denom)[:, None]
    return float(loss), _backward(model, cache, dlogits, full=True)


def pretrain(
    model: Model,
    x,
    labels,
    epochs: int,
    lr: float,
    rng: np.random.Generator,
    batch_size: int = 64,
    momentum: float = 0.9,
    plpd_filter: float | None = None,
    warmup_fraction: float = 0.25,
    transform=None,
) -> Model:
    """Supervised cross-entropy training of every parameter.

    With ``plpd_filter`` set, epochs after the warm-up only learn from samples
    whose PLPD under ``transform`` (default 4x4 patch shuffle) exceeds the
    threshold; a batch where nothing passes produces no update at all.
    """
    x = np.asarray(x, dtype=np.float64)
    labels = np.asarray(labels)
    n = len(x)
    if n == 0:
        raise ValueError("empty training set")
    if len(labels) != n:
        raise DimensionError("images and labels differ in length")
    # transforms get their own stream so the filter never perturbs shuffling
    (transform_rng,) = spawn(rng, 1)
    if plpd_filter is not None:
        from .deyo import plpd
        from .transforms import TransformSpec, apply_transform

        if transform is None:
            transform = TransformSpec("patch_shuffle")
    warmup_epochs = int(round(warmup_fraction * epochs))
    velocity = {k: np.zeros_like(model.param(k)) for k in ALL_PARAMS}
    bounds = batch_bounds(n, batch_size, 2 if model.norm.kind == "batch" else 1)
    for epoch in range(epochs):
        order = rng.permutation(n)
        for start, stop in bounds:
            idx = order[start:stop]
            xb, yb = x[idx], labels[idx]
            weights = np.ones(len(idx))
            if plpd_filter is not None and epoch >= warmup_epochs:
                pred = forward(model, xb)
                pred_t = forward(model, apply_transform(xb, transform, transform_rng))
                weights = (plpd(pred, pred_t) > plpd_filter).astype(np.float64)
                if not weights.any():
                    continue
            _, grads = cross_entropy_grads(model, xb, yb, weights)
            for name in ALL_PARAMS:
                velocity[name] = momentum * velocity[name] + grads[name]
                model.set_param(name, model.param(name) - lr * velocity[name])
    return model


def batch_bounds(n, batch_size, min_last=1):
    """(start, stop) pairs covering range(n); a short tail is merged backwards."""
    starts = list(range(0, n, batch_size))
    if len(starts) > 1 and n - starts[-1] < min_last:
        starts.pop()
    return [(s, starts[i + 1] if i + 1 < len(starts) else n) for i, s in enumerate(starts)]


def accuracy(model: Model, x, labels, batch_size=256) -> float:
    labels = np.asarray(labels)
    min_last = 2 if model.norm.kind == "batch" else 1
    correct = 0
    for start, stop in batch_bounds(len(labels), batch_size, min_last):
        correct += int((forward(model, x[start:stop]).pseudo_labels == labels[start:stop]).sum())
    return correct / len(labels)


def save_checkpoint(model: Model, path) -> Path:
    """Write shapes and parameters to an ``.npz`` file (bit-exact round trip)."""
    path = Path(path)
    arrays = {name: model.param(name) for name in ALL_PARAMS}
    arrays.update({f"velocity_{k}": v for k, v in model.velocity.items()})
    with open(path, "wb") as fh:
        np.savez(
            fh,
            format=np.array(CHECKPOINT_FORMAT),
            version=np.array(CHECKPOINT_VERSION),
            norm_kind=np.array(model.norm.kind),
            norm_eps=np.array(model.norm.eps),
            **arrays,
        )
    return path


def load_checkpoint(path) -> Model:
    with np.load(Path(path), allow_pickle=False) as data:
        if "format" not in data or str(data["format"]) != CHECKPOINT_FORMAT:
            raise FormatError(f"{path} is not a model checkpoint")
        version = int(data["version"])
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        norm = NormLayer(
            str(data["norm_kind"]), data["gamma"].copy(), data["beta"].copy(), float(data["norm_eps"])
        )
        velocity = {k: data[f"velocity_{k}"].copy() for k in ADAPT_PARAMS}
        return Model(
            W1=data["W1"].copy(),
            b1=data["b1"].copy(),
            norm=norm,
            W2=data["W2"].copy(),
            b2=data["b2"].copy(),
            velocity=velocity,
        )
