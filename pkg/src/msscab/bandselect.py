"""
Two-class Fisher LDA over pixel spectra, band ranking and pixel sampling.

Labels are 0 for healthy leaf and 1 for scab.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .cube import LEAF, SCAB, WAVELENGTHS

RIDGE_FACTOR = 1e-9


class SamplingError(ValueError):
    pass


@dataclass(frozen=True)
class LabeledSpectra:
    vectors: np.ndarray
    labels: np.ndarray
    scene_ids: tuple[str, ...] = ()

    def __post_init__(self):
        X = np.asarray(self.vectors, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.int64)
        if X.ndim != 2 or y.shape != (X.shape[0],):
            raise ValueError(f"vectors {X.shape} and labels {y.shape} disagree")
        if not np.isfinite(X).all():
            raise ValueError("spectra contain non-finite values")
        if not np.isin(y, (0, 1)).all():
            raise ValueError("labels must be 0 (leaf) or 1 (scab)")
        object.__setattr__(self, "vectors", X)
        object.__setattr__(self, "labels", y)
        object.__setattr__(self, "scene_ids", tuple(self.scene_ids))

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def class_vectors(self, label: int) -> np.ndarray:
        return self.vectors[self.labels == label]


@dataclass(frozen=True)
class LdaModel:
    direction: np.ndarray
    bias: float
    weights: np.ndarray
    ranking: tuple[int, ...]
    wavelengths: tuple[int, ...] = WAVELENGTHS
    ridge: float = 0.0
    class_means: np.ndarray = field(default=None, repr=False)

    def decision(self, X: np.ndarray) -> np.ndarray:
        return np.asarray(X, dtype=np.float64) @ self.direction + self.bias

    def predict(self, X: np.ndarray) -> np.ndarray:
        return (self.decision(X) > 0).astype(np.int64)

    def to_json(self) -> dict:
        return {
            "w": self.direction.tolist(),
            "bias": float(self.bias),
            "weights": {str(nm): float(v) for nm, v in zip(self.wavelengths, self.weights)},
            "ranking": list(self.ranking),
            "regularization": {"ridge": float(self.ridge), "ridge_factor": RIDGE_FACTOR},
            "class_means": None if self.class_means is None else self.class_means.tolist(),
        }

    @classmethod
    def from_json(cls, d: dict) -> "LdaModel":
        wavelengths = tuple(int(k) for k in d["weights"])
        return cls(
            direction=np.array(d["w"], dtype=np.float64),
            bias=float(d["bias"]),
            weights=np.array(list(d["weights"].values()), dtype=np.float64),
            ranking=tuple(int(v) for v in d["ranking"]),
            wavelengths=wavelengths,
            ridge=float(d["regularization"]["ridge"]),
            class_means=None if d.get("class_means") is None else np.array(d["class_means"]),
        )


def pooled_within_covariance(data: LabeledSpectra) -> np.ndarray:
    """Pooled within-class covariance, ``(S0 + S1) / (n0 + n1 - 2)``."""
    scatter = np.zeros((data.dim, data.dim))
    for c in (0, 1):
        Xc = data.class_vectors(c)
        centred = Xc - Xc.mean(axis=0)
        scatter += centred.T @ centred
    return scatter / (len(data) - 2)


def fit_lda(
    data: LabeledSpectra,
    wavelengths: Sequence[int] = WAVELENGTHS,
    priors: tuple[float, float] = (0.5, 0.5),
    ridge_factor: float = RIDGE_FACTOR,
) -> LdaModel:
    """Fisher discriminant ``w = Sw^-1 (mu1 - mu0)`` with a small ridge on ``Sw``.

    The ridge is ``ridge_factor * trace(Sw) / d``. The bias puts the boundary
    at the midpoint of the projected class means, shifted by ``log(p1/p0)``.
    """
    n0, n1 = int((data.labels == 0).sum()), int((data.labels == 1).sum())
    if n0 == 0 or n1 == 0:
        raise ValueError(f"LDA needs both classes, got {n0} leaf and {n1} scab vectors")
    if len(data) < 3:
        raise ValueError("LDA needs at least 3 vectors")
    if len(wavelengths) != data.dim:
        raise ValueError(f"{len(wavelengths)} wavelengths for {data.dim}-dim spectra")
    mu0 = data.class_vectors(0).mean(axis=0)
    mu1 = data.class_vectors(1).mean(axis=0)
    sw = pooled_within_covariance(data)
    ridge = ridge_factor * np.trace(sw) / data.dim
    reg = sw + ridge * np.eye(data.dim)
    if np.linalg.cond(reg) > 1e12:
        raise np.linalg.LinAlgError("within-class covariance is singular beyond regularization")
    w = np.linalg.solve(reg, mu1 - mu0)
    bias = -0.5 * float(w @ (mu0 + mu1)) + float(np.log(priors[1] / priors[0]))
    weights = np.abs(w) / np.abs(w).sum()
    return LdaModel(
        direction=w,
        bias=bias,
        weights=weights,
        ranking=rank_wavelengths(weights, wavelengths),
        wavelengths=tuple(int(v) for v in wavelengths),
        ridge=float(ridge),
        class_means=np.vstack([mu0, mu1]),
    )


def rank_wavelengths(weights: Sequence[float], wavelengths: Sequence[int] = WAVELENGTHS) -> tuple[int, ...]:
    """Wavelengths by descending weight; equal weights fall back to ascending wavelength."""
    return tuple(int(nm) for _, nm in sorted(zip(weights, wavelengths), key=lambda t: (-t[0], t[1])))


def rank_channels(model: LdaModel) -> tuple[int, ...]:
    return rank_wavelengths(model.weights, model.wavelengths)


def confusion_matrix(true: np.ndarray, pred: np.ndarray) -> np.ndarray:
    """Row-normalized 2x2 confusion: entry (i, j) is the share of class i predicted as j."""
    true = np.asarray(true)
    pred = np.asarray(pred)
    counts = np.zeros((2, 2))
    np.add.at(counts, (true, pred), 1)
    totals = counts.sum(axis=1, keepdims=True)
    if (totals == 0).any():
        raise ValueError("confusion matrix needs at least one sample per true class")
    return counts / totals


def lda_confusion(model: LdaModel, heldout: LabeledSpectra) -> np.ndarray:
    return confusion_matrix(heldout.labels, model.predict(heldout.vectors))


def class_spectra_stats(data: LabeledSpectra) -> dict:
    """Per-class band means and unbiased standard deviations."""
    out = {}
    for c, name in ((0, "leaf"), (1, "scab")):
        Xc = data.class_vectors(c)
        if len(Xc) < 2:
            raise ValueError(f"class {name} has {len(Xc)} vectors; SD needs at least 2")
        out[name] = {"mean": Xc.mean(axis=0), "sd": Xc.std(axis=0, ddof=1), "n": len(Xc)}
    return out


def sample_pixels(
    sources: Sequence[tuple[str, np.ndarray, np.ndarray]],
    per_class: int,
    seed: int,
) -> LabeledSpectra:
    """Balanced, seeded sampling without replacement of leaf and scab pixels.

    ``sources`` holds ``(scene_id, planes (d, H, W), mask labels (H, W))``.
    Mask label ``LEAF`` maps to class 0 and ``SCAB`` to class 1; background is
    never sampled. Pixels are drawn uniformly from the union over all scenes.
    """
    if per_class < 1:
        raise ValueError("per_class must be >= 1")
    if not sources:
        raise SamplingError("no scenes to sample from")
    rng = np.random.default_rng(seed)
    offsets = np.cumsum([0] + [m.size for _, _, m in sources])
    flat_masks = np.concatenate([np.asarray(m).ravel() for _, _, m in sources])
    vectors, labels, scenes = [], [], []
    for cls, mask_label in ((0, LEAF), (1, SCAB)):
        pool = np.flatnonzero(flat_masks == mask_label)
        if pool.size < per_class:
            raise SamplingError(f"requested {per_class} pixels of class {cls}, only {pool.size} available")
        picked = np.sort(rng.choice(pool, size=per_class, replace=False))
        scene_idx = np.searchsorted(offsets, picked, side="right") - 1
        for s in np.unique(scene_idx):
            sid, planes, _ = sources[s]
            local = picked[scene_idx == s] - offsets[s]
            flat = np.asarray(planes).reshape(planes.shape[0], -1)
            vectors.append(flat[:, local].T)
            labels.append(np.full(local.size, cls))
            scenes.extend([sid] * local.size)
    return LabeledSpectra(np.vstack(vectors), np.concatenate(labels), tuple(scenes))


def fisher_criterion(data: LabeledSpectra, v: np.ndarray) -> float:
    """Between-class over within-class variance of the projection onto ``v``."""
    p0 = data.class_vectors(0) @ v
    p1 = data.class_vectors(1) @ v
    within = ((p0 - p0.mean()) ** 2).sum() + ((p1 - p1.mean()) ** 2).sum()
    return float((p1.mean() - p0.mean()) ** 2 / within)
