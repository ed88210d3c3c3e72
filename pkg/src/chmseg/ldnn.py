"""Logistic disjunctive normal network.

An N x M LDNN has N groups of M logistic units. Each group's units are
ANDed by a product, and the groups are ORed with a noisy-or::

    s_ij = sigmoid(w_ij . x + b_ij)
    g_i  = prod_j s_ij
    f    = 1 - prod_i (1 - g_i)

Only the sigmoid layer is trained. Weights start from k-means centroids of
the positive and negative samples: every unit begins as the perpendicular
bisector between one positive and one negative centroid.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.special import expit

from .core import ChmError, DimensionError


@dataclass(frozen=True, eq=False)
class LdnnModel:
    weights: np.ndarray  # (groups, per_group, features)
    biases: np.ndarray  # (groups, per_group)
    dropout: bool = False
    loss_history: tuple = ()

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        b = np.asarray(self.biases, dtype=np.float64)
        if w.ndim != 3 or b.shape != w.shape[:2]:
            raise DimensionError(f"weights {w.shape} and biases {b.shape} disagree")
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
            raise ChmError("LDNN parameters must be finite")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "biases", b)

    @property
    def groups(self) -> int:
        return self.weights.shape[0]

    @property
    def per_group(self) -> int:
        return self.weights.shape[1]

    @property
    def feature_count(self) -> int:
        return self.weights.shape[2]


def _exclusive_prod(a: np.ndarray, axis: int) -> np.ndarray:
    """Product of all entries along ``axis`` except the one at each position."""
    a = np.moveaxis(a, axis, -1)
    ones = np.ones(a.shape[:-1] + (1,))
    prefix = np.cumprod(np.concatenate([ones, a[..., :-1]], axis=-1), axis=-1)
    suffix = np.cumprod(np.concatenate([ones, a[..., :0:-1]], axis=-1), axis=-1)[..., ::-1]
    return np.moveaxis(prefix * suffix, -1, axis)


def _forward(weights, biases, x, dropout=False, group_mask=None, unit_mask=None):
    n, m, d = weights.shape
    z = (x @ weights.reshape(n * m, d).T).reshape(-1, n, m) + biases
    s = expit(z)
    a = np.sqrt(s) if dropout else s
    if unit_mask is not None:
        a = np.where(unit_mask, a, 1.0)
    g = np.prod(a, axis=2)
    if group_mask is not None:
        g = np.where(group_mask, g, 0.0)
    f = 1.0 - np.prod(1.0 - g, axis=1)
    return s, a, g, f


def predict(model: LdnnModel, x: np.ndarray, chunk: int = 65536) -> np.ndarray:
    """Batch evaluation, one probability per row of ``x``."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[1] != model.feature_count:
        raise DimensionError(f"expected {model.feature_count} features, got {x.shape[1]}")
    out = np.empty(x.shape[0])
    for start in range(0, x.shape[0], chunk):
        out[start : start + chunk] = _forward(
            model.weights, model.biases, x[start : start + chunk], model.dropout
        )[3]
    return np.clip(out, 0.0, 1.0)


def evaluate(model: LdnnModel, features) -> float:
    """Probability of the positive class for one feature vector.

    Dropout-trained models use ``sqrt(s_ij)`` in place of each unit output.
    """
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 1:
        raise DimensionError("evaluate takes a single feature vector; use predict for batches")
    return float(predict(model, features[None])[0])


def _batch_gradient(weights, biases, x, y, dropout=False, group_mask=None, unit_mask=None):
    """Summed squared-error loss and its gradients over the rows of ``x``."""
    s, a, g, f = _forward(weights, biases, x, dropout, group_mask, unit_mask)
    err = f - y
    loss = float(np.sum(err**2))
    df_dg = _exclusive_prod(1.0 - g, axis=1)
    if group_mask is not None:
        df_dg = np.where(group_mask, df_dg, 0.0)
    dg_da = _exclusive_prod(a, axis=2)
    if unit_mask is not None:
        dg_da = np.where(unit_mask, dg_da, 0.0)
    da_dz = 0.5 * a * (1.0 - s) if dropout else s * (1.0 - s)
    dz = (2.0 * err)[:, None, None] * df_dg[:, :, None] * dg_da * da_dz
    grad_w = np.einsum("bnm,bd->nmd", dz, x)
    grad_b = dz.sum(axis=0)
    return loss, grad_w, grad_b


def gradient(model: LdnnModel, features, label: float):
    """Squared error ``(f - y)^2`` and its analytic gradients ``(loss, dW, db)``."""
    x = np.asarray(features, dtype=np.float64).reshape(1, -1)
    if x.shape[1] != model.feature_count:
        raise DimensionError(f"expected {model.feature_count} features, got {x.shape[1]}")
    return _batch_gradient(model.weights, model.biases, x, np.array([float(label)]), model.dropout)


# -- initialisation ---------------------------------------------------------


def _canonical(x: np.ndarray) -> np.ndarray:
    # sort rows so clustering does not depend on the order samples arrive in
    return x[np.lexsort(x.T[::-1])] if len(x) else x


def _kmeanspp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centers = [x[rng.integers(len(x))]]
    d2 = np.sum((x - centers[0]) ** 2, axis=1)
    for _ in range(1, k):
        total = d2.sum()
        idx = rng.choice(len(x), p=d2 / total) if total > 0 else rng.integers(len(x))
        centers.append(x[idx])
        d2 = np.minimum(d2, np.sum((x - x[idx]) ** 2, axis=1))
    return np.array(centers)


def _sq_dists(x, centers):
    return (
        np.sum(x**2, axis=1)[:, None] - 2.0 * x @ centers.T + np.sum(centers**2, axis=1)[None, :]
    )


def kmeans(x: np.ndarray, k: int, rng: np.random.Generator, iterations: int = 50) -> np.ndarray:
    """Lloyd's algorithm with k-means++ seeding; returns ``(k, d)`` centroids."""
    x = _canonical(np.asarray(x, dtype=np.float64))
    if len(x) < k:
        raise ChmError(f"k-means needs at least {k} samples, got {len(x)}")
    centers = _kmeanspp(x, k, rng)
    for _ in range(iterations):
        assign = np.argmin(_sq_dists(x, centers), axis=1)
        new = centers.copy()
        for c in range(k):
            members = x[assign == c]
            new[c] = members.mean(axis=0) if len(members) else x[rng.integers(len(x))]
        if np.array_equal(new, centers):
            break
        centers = new
    return _separate(centers, x, rng)


def _duplicates(centers: np.ndarray) -> list[int]:
    dup = []
    for i in range(1, len(centers)):
        if any(np.array_equal(centers[i], centers[j]) for j in range(i)):
            dup.append(i)
    return dup


def _separate(centers, x, rng, retries: int = 3):
    centers = centers.copy()
    for _ in range(retries):
        dup = _duplicates(centers)
        if not dup:
            return centers
        for i in dup:
            centers[i] = x[rng.integers(len(x))]
    for i in _duplicates(centers):
        centers[i] = centers[i] + rng.normal(scale=1e-6, size=centers.shape[1])
    return centers


def init_kmeans(positives, negatives, groups: int, per_group: int, rng: np.random.Generator) -> LdnnModel:
    """One group per positive centroid, one unit per negative centroid."""
    positives = np.asarray(positives, dtype=np.float64)
    negatives = np.asarray(negatives, dtype=np.float64)
    if len(positives) < groups or len(negatives) < per_group:
        raise ChmError(
            f"need at least {groups} positive and {per_group} negative samples, "
            f"got {len(positives)} and {len(negatives)}"
        )
    pos = kmeans(positives, groups, rng)
    neg = kmeans(negatives, per_group, rng)
    w = pos[:, None, :] - neg[None, :, :]
    coincident = ~np.any(w, axis=2)
    if coincident.any():
        w[coincident] = rng.normal(scale=1e-6, size=(int(coincident.sum()), w.shape[2]))
    # unit normals: the unit's input is the signed distance to the bisector
    w /= np.linalg.norm(w, axis=2, keepdims=True)
    mid = 0.5 * (pos[:, None, :] + neg[None, :, :])
    b = -np.einsum("nmd,nmd->nm", w, mid)
    return LdnnModel(w, b)


# -- training ---------------------------------------------------------------


def dropout_masks(groups: int, per_group: int, rng: np.random.Generator):
    """Keep ``ceil(N/2)`` random groups and ``ceil(M/2)`` random units in each."""
    group_mask = np.zeros(groups, dtype=bool)
    group_mask[rng.choice(groups, math.ceil(groups / 2), replace=False)] = True
    unit_mask = np.zeros((groups, per_group), dtype=bool)
    keep = math.ceil(per_group / 2)
    for i in range(groups):
        unit_mask[i, rng.choice(per_group, keep, replace=False)] = True
    return group_mask, unit_mask


def train(
    model: LdnnModel,
    samples,
    labels,
    rng: np.random.Generator,
    *,
    epochs: int = 30,
    learning_rate: float = 0.01,
    lr_decay: float = 0.95,
    minibatch: int = 64,
    dropout: bool = False,
) -> LdnnModel:
    """Minibatch SGD on squared error. Gradients are summed over each minibatch."""
    x = np.asarray(samples, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64).ravel()
    if len(x) == 0:
        raise ChmError("cannot train on an empty sample set")
    if x.shape[1] != model.feature_count or len(y) != len(x):
        raise DimensionError("samples, labels and model disagree in shape")
    if epochs == 0:
        return model
    w = model.weights.copy()
    b = model.biases.copy()
    history = []
    for epoch in range(epochs):
        lr = learning_rate * lr_decay**epoch
        order = rng.permutation(len(x))
        total = 0.0
        for start in range(0, len(x), minibatch):
            idx = order[start : start + minibatch]
            masks = dropout_masks(*w.shape[:2], rng) if dropout else (None, None)
            loss, gw, gb = _batch_gradient(w, b, x[idx], y[idx], False, *masks)
            w -= lr * gw
            b -= lr * gb
            total += loss
        history.append(total / len(x))
    return replace(model, weights=w, biases=b, dropout=dropout, loss_history=tuple(history))
