"""
Small feed-forward pixel classifier (40 -> 16 -> 8 -> 2) written in numpy.

Hidden layers use ReLU, the output is a softmax over (leaf, scab) trained with
mean cross-entropy by plain mini-batch gradient descent. Inputs are shifted and
scaled by fixed per-feature statistics taken from the training set; these are
not trainable parameters.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

HIDDEN = (16, 8)
N_CLASSES = 2
SCAB_CLASS = 1


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, loss: float):
        super().__init__(f"loss became non-finite ({loss}) at epoch {epoch}")
        self.epoch = epoch
        self.loss = loss


@dataclass(frozen=True)
class PixelNetModel:
    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]
    input_shift: np.ndarray
    input_scale: np.ndarray
    activations: tuple[str, ...] = ("relu", "relu", "softmax")
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        ws = tuple(np.asarray(w, dtype=np.float64) for w in self.weights)
        bs = tuple(np.asarray(b, dtype=np.float64) for b in self.biases)
        sizes = [ws[0].shape[0]] + [w.shape[1] for w in ws]
        if len(ws) != 3 or len(bs) != 3 or tuple(sizes[1:]) != HIDDEN + (N_CLASSES,):
            raise ValueError(f"layer sizes must be (d, 16, 8, 2), got {sizes}")
        for w, b in zip(ws, bs):
            if b.shape != (w.shape[1],):
                raise ValueError("bias shape does not match layer width")
        if not all(np.isfinite(a).all() for a in ws + bs):
            raise ValueError("non-finite model parameters")
        object.__setattr__(self, "weights", ws)
        object.__setattr__(self, "biases", bs)
        object.__setattr__(self, "input_shift", np.asarray(self.input_shift, dtype=np.float64))
        object.__setattr__(self, "input_scale", np.asarray(self.input_scale, dtype=np.float64))

    @property
    def layer_sizes(self) -> tuple[int, ...]:
        return (self.input_dim,) + HIDDEN + (N_CLASSES,)

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[0]

    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def params(self) -> list[np.ndarray]:
        """Trainable arrays in the order W1, b1, W2, b2, W3, b3."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def with_params(self, params) -> "PixelNetModel":
        params = list(params)
        return replace(self, weights=tuple(params[0::2]), biases=tuple(params[1::2]))

    def to_json(self) -> dict:
        return {
            "layer_sizes": list(self.layer_sizes),
            "activations": list(self.activations),
            "weights": [w.ravel().tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
            "input_shift": self.input_shift.tolist(),
            "input_scale": self.input_scale.tolist(),
            "metadata": self.metadata,
        }

    @classmethod
    def from_json(cls, d: dict) -> "PixelNetModel":
        sizes = d["layer_sizes"]
        ws = tuple(
            np.array(w, dtype=np.float64).reshape(sizes[i], sizes[i + 1]) for i, w in enumerate(d["weights"])
        )
        return cls(
            weights=ws,
            biases=tuple(np.array(b, dtype=np.float64) for b in d["biases"]),
            input_shift=np.array(d["input_shift"]),
            input_scale=np.array(d["input_scale"]),
            activations=tuple(d["activations"]),
            metadata=d.get("metadata", {}),
        )


def init_model(seed: int, input_dim: int = 40) -> PixelNetModel:
    """He-normal weights (SD ``sqrt(2 / fan_in)``), zero biases."""
    rng = np.random.default_rng(seed)
    sizes = (input_dim,) + HIDDEN + (N_CLASSES,)
    ws = tuple(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out)) for fan_in, fan_out in zip(sizes, sizes[1:]))
    bs = tuple(np.zeros(n) for n in sizes[1:])
    return PixelNetModel(ws, bs, np.zeros(input_dim), np.ones(input_dim), metadata={"init_seed": int(seed)})


def zero_model(input_dim: int = 40) -> PixelNetModel:
    sizes = (input_dim,) + HIDDEN + (N_CLASSES,)
    ws = tuple(np.zeros((a, b)) for a, b in zip(sizes, sizes[1:]))
    bs = tuple(np.zeros(n) for n in sizes[1:])
    return PixelNetModel(ws, bs, np.zeros(input_dim), np.ones(input_dim))


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _forward_cache(model: PixelNetModel, X: np.ndarray):
    a0 = (X - model.input_shift) / model.input_scale
    z1 = a0 @ model.weights[0] + model.biases[0]
    a1 = np.maximum(z1, 0.0)
    z2 = a1 @ model.weights[1] + model.biases[1]
    a2 = np.maximum(z2, 0.0)
    z3 = a2 @ model.weights[2] + model.biases[2]
    return (a0, z1, a1, z2, a2), softmax(z3)


def forward(model: PixelNetModel, features: np.ndarray) -> np.ndarray:
    """Class probabilities for one vector ``(d,)`` or a batch ``(n, d)``."""
    X = np.asarray(features, dtype=np.float64)
    if not np.isfinite(X).all():
        raise ValueError("non-finite input features")
    single = X.ndim == 1
    _, probs = _forward_cache(model, np.atleast_2d(X))
    return probs[0] if single else probs


def loss_and_grads(model: PixelNetModel, X: np.ndarray, y: np.ndarray, scale: float = 1.0):
    """Mean cross-entropy (times ``scale``) and its gradients in ``params()`` order."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    y = np.asarray(y, dtype=np.int64)
    n = X.shape[0]
    (a0, z1, a1, z2, a2), probs = _forward_cache(model, X)
    loss = -np.log(np.clip(probs[np.arange(n), y], 1e-300, None)).mean() * scale

    d3 = probs.copy()
    d3[np.arange(n), y] -= 1.0
    d3 *= scale / n
    gW3 = a2.T @ d3
    gb3 = d3.sum(axis=0)
    d2 = (d3 @ model.weights[2].T) * (z2 > 0)
    gW2 = a1.T @ d2
    gb2 = d2.sum(axis=0)
    d1 = (d2 @ model.weights[1].T) * (z1 > 0)
    gW1 = a0.T @ d1
    gb1 = d1.sum(axis=0)
    return float(loss), [gW1, gb1, gW2, gb2, gW3, gb3]


def gradient_check(
    model: PixelNetModel,
    X: np.ndarray,
    y: np.ndarray,
    n_params: int = 100,
    step: float = 1e-5,
    seed: int = 0,
    floor: float = 1e-6,
) -> float:
    """Largest relative gap between backprop and central differences.

    Relative error is ``|a - n| / max(|a|, |n|, floor)`` over ``n_params``
    randomly chosen scalar parameters (all of them if fewer exist).
    """
    if len(y) == 0:
        raise ValueError("gradient check needs a non-empty batch")
    _, grads = loss_and_grads(model, X, y)
    params = [p.copy() for p in model.params()]
    sizes = [p.size for p in params]
    total = sum(sizes)
    rng = np.random.default_rng(seed)
    picks = rng.choice(total, size=min(n_params, total), replace=False)
    offsets = np.cumsum([0] + sizes)
    worst = 0.0
    for flat in picks:
        k = int(np.searchsorted(offsets, flat, side="right") - 1)
        idx = np.unravel_index(flat - offsets[k], params[k].shape)
        orig = params[k][idx]
        params[k][idx] = orig + step
        lp, _ = loss_and_grads(model.with_params(params), X, y)
        params[k][idx] = orig - step
        lm, _ = loss_and_grads(model.with_params(params), X, y)
        params[k][idx] = orig
        numeric = (lp - lm) / (2 * step)
        analytic = grads[k][idx]
        rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)
        worst = max(worst, rel)
    return worst


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 256
    learning_rate: float = 1e-2
    seed: int = 0
    standardize: bool = True

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.learning_rate < 0:
            raise ValueError(f"invalid hyperparameters {self}")


def train(model: PixelNetModel, X: np.ndarray, y: np.ndarray, hyper: TrainConfig = TrainConfig()):
    """Mini-batch gradient descent on mean cross-entropy.

    Returns the trained model and the per-epoch mean training loss (evaluated
    on the full set after each epoch). The batch order is drawn from
    ``hyper.seed``, so identical inputs give an identical model.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if X.shape[1] != model.input_dim:
        raise ValueError(f"model takes {model.input_dim} features, data has {X.shape[1]}")
    if not ((y == 0).any() and (y == 1).any()):
        raise ValueError("training data must contain both classes")
    if hyper.standardize:
        shift = X.mean(axis=0)
        scale = X.std(axis=0)
        scale[scale < 1e-12] = 1.0
        model = replace(model, input_shift=shift, input_scale=scale)

    rng = np.random.default_rng(hyper.seed)
    params = [p.copy() for p in model.params()]
    history = []
    n = len(y)
    for epoch in range(hyper.epochs):
        order = rng.permutation(n)
        # overflow shows up as a non-finite loss below, reported as TrainingDiverged
        with np.errstate(over="ignore", invalid="ignore"):
            for start in range(0, n, hyper.batch_size):
                idx = order[start : start + hyper.batch_size]
                _, grads = loss_and_grads(model.with_params(params), X[idx], y[idx])
                for p, g in zip(params, grads):
                    p -= hyper.learning_rate * g
            finite = all(np.isfinite(p).all() for p in params)
            epoch_loss = loss_and_grads(model.with_params(params), X, y)[0] if finite else float("nan")
        if not np.isfinite(epoch_loss):
            raise TrainingDiverged(epoch, epoch_loss)
        history.append(epoch_loss)

    meta = dict(model.metadata)
    meta.update(
        epochs=hyper.epochs,
        batch_size=hyper.batch_size,
        learning_rate=hyper.learning_rate,
        seed=hyper.seed,
        standardize=hyper.standardize,
        n_train=int(n),
    )
    return replace(model.with_params(params), metadata=meta), history


def accuracy(model: PixelNetModel, X: np.ndarray, y: np.ndarray) -> float:
    return float((forward(model, X).argmax(axis=1) == np.asarray(y)).mean())


def infer_map(model: PixelNetModel, features: np.ndarray, chunk: int = 65536) -> np.ndarray:
    """Scab probability per pixel for a ``FeatureCube`` or ``(d, H, W)`` stack."""
    features = np.asarray(getattr(features, "features", features), dtype=np.float64)
    d, h, w = features.shape
    flat = features.reshape(d, -1).T
    out = np.empty(flat.shape[0])
    for start in range(0, flat.shape[0], chunk):
        out[start : start + chunk] = forward(model, flat[start : start + chunk])[:, SCAB_CLASS]
    return out.reshape(h, w)
