"""Contextual hierarchical model: training and inference.

A stage holds one classifier per pyramid level plus a top-down classifier
at full resolution. The level-l classifier sees the image downsampled l-1
times and the max-pooled outputs of every lower level; the top-down
classifier sees the full image and every level's output upsampled back to
full size. Later stages use the previous stage's top-down classifier as
their level-1 classifier.

For C > 2 classes one binary hierarchy ("replica") is trained per class;
at the top ``intra_class_top_levels`` levels each replica also samples the
other classes' outputs from the connected levels below it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import ldnn
from .core import ChmConfig, ChmError, DimensionError, ImagePlane, LabelMap, ProbabilityMap, level_shape
from .features import appearance_width, extract_appearance, extract_context, stencil_layout
from .metrics import binary_scores
from .pyramid import downsample, maxpool, upsample

EPS = 1e-12
Log = Callable[[dict], None]


@dataclass(eq=False)
class Stage:
    bottom_up: list  # [level - 1][replica] -> LdnnModel
    top_down: list  # [replica] -> LdnnModel
    shared_first: bool = False  # level 1 is the previous stage's top-down classifier


@dataclass(eq=False)
class ChmModel:
    config: ChmConfig
    channels: int
    stages: list = field(default_factory=list)
    multiclass: bool = False
    log: list = field(default_factory=list)

    @property
    def replicas(self) -> int:
        return self.config.class_count if self.multiclass else 1

    def trained_classifiers(self) -> int:
        n = 0
        for stage in self.stages:
            n += (len(stage.bottom_up) - stage.shared_first + 1) * self.replicas
        return n


# -- conditioning sets ------------------------------------------------------


def _connected(config: ChmConfig, multiclass: bool, level: int) -> bool:
    return multiclass and level > config.levels - config.intra_class_top_levels


def context_sources(config: ChmConfig, multiclass: bool, level: int, replica: int) -> list[tuple[int, int]]:
    """``(lower_level, replica)`` pairs whose outputs feed the level classifier."""
    sources = [(k, replica) for k in range(1, level)]
    if _connected(config, multiclass, level):
        for k in range(1, level):
            if _connected(config, multiclass, k):
                sources += [(k, c) for c in range(config.class_count) if c != replica]
    return sources


def level_feature_width(config: ChmConfig, channels: int, multiclass: bool, level: int, replica: int = 0) -> int:
    n = len(stencil_layout())
    return appearance_width(config.features, channels) + n * len(context_sources(config, multiclass, level, replica))


def topdown_feature_width(config: ChmConfig, channels: int) -> int:
    return appearance_width(config.features, channels) + len(stencil_layout()) * config.levels


class _Image:
    """Per-image appearance cache keyed by level."""

    def __init__(self, planes: np.ndarray, config: ChmConfig):
        self.planes = planes
        self.config = config
        self._appearance: dict[int, np.ndarray] = {}

    @property
    def shape(self):
        return self.planes.shape[1:]

    def appearance(self, level: int) -> np.ndarray:
        if level not in self._appearance:
            self._appearance[level] = extract_appearance(
                downsample(self.planes, level - 1), self.config.features
            ).values
        return self._appearance[level]

    def drop(self, level: int):
        self._appearance.pop(level, None)


def level_features(img: _Image, contexts: dict, level: int, replica: int, multiclass: bool) -> np.ndarray:
    """Feature rows of the level classifier; ``contexts[(k, c)]`` is the output map of level k, replica c."""
    maps = [
        maxpool(contexts[(k, c)], level - k)
        for k, c in context_sources(img.config, multiclass, level, replica)
    ]
    app = img.appearance(level)
    if not maps:
        return app
    return np.hstack([app, extract_context(maps).values])


def topdown_features(img: _Image, contexts: dict, replica: int) -> np.ndarray:
    maps = [
        upsample(contexts[(k, replica)], k - 1, target=img.shape)
        for k in range(1, img.config.levels + 1)
    ]
    return np.hstack([img.appearance(1), extract_context(maps).values])


def _as_map(values: np.ndarray, shape) -> np.ndarray:
    return values.reshape(shape)


# -- training helpers -------------------------------------------------------


def _loglik(p: np.ndarray, t: np.ndarray) -> float:
    p = np.clip(p, EPS, 1.0 - EPS)
    return math.fsum((t * np.log(p) + (1.0 - t) * np.log1p(-p)).ravel())


def select_samples(targets: Sequence[np.ndarray], config: ChmConfig, rng: np.random.Generator) -> list[np.ndarray]:
    """Balanced pixel sample: the rarer class in full plus an equal draw from
    the other, capped at ``max_samples``. Returns flat pixel indices per image."""
    flat = np.concatenate([t.ravel() for t in targets])
    offsets = np.cumsum([0] + [t.size for t in targets])
    candidates = np.arange(flat.size)
    if config.subsample_rate < 1.0:
        candidates = candidates[rng.random(flat.size) < config.subsample_rate]
    pos = candidates[flat[candidates] > 0.5]
    neg = candidates[flat[candidates] <= 0.5]
    k = min(len(pos), len(neg), config.max_samples // 2)
    needed = max(config.ldnn_groups, config.ldnn_per_group)
    if k < needed:
        raise ChmError(
            f"training set has {len(pos)} positive and {len(neg)} negative pixels; "
            f"at least {needed} of each are needed"
        )
    chosen = np.sort(
        np.concatenate(
            [
                pos if len(pos) == k else rng.choice(pos, k, replace=False),
                neg if len(neg) == k else rng.choice(neg, k, replace=False),
            ]
        )
    )
    return [chosen[(chosen >= a) & (chosen < b)] - a for a, b in zip(offsets[:-1], offsets[1:])]


def fit_classifier(x: np.ndarray, y: np.ndarray, config: ChmConfig, rng: np.random.Generator) -> ldnn.LdnnModel:
    """k-means init and SGD on standardised features; the scaling is folded
    back into the weights so the returned model takes raw features."""
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    std[std < 1e-12] = 1.0
    xs = (x - mean) / std
    model = ldnn.init_kmeans(xs[y > 0.5], xs[y <= 0.5], config.ldnn_groups, config.ldnn_per_group, rng)
    model = ldnn.train(
        model,
        xs,
        y,
        rng,
        epochs=config.epochs,
        learning_rate=config.learning_rate,
        lr_decay=config.lr_decay,
        minibatch=config.minibatch,
        dropout=config.dropout,
    )
    w = model.weights / std
    b = model.biases - w @ mean
    return ldnn.LdnnModel(w, b, model.dropout, model.loss_history)


def _targets(labels: Sequence[LabelMap], multiclass: bool, class_count: int) -> list[list[np.ndarray]]:
    """Binary target planes per replica per image."""
    if multiclass:
        return [[lab.binary(c) for lab in labels] for c in range(class_count)]
    return [[lab.binary(1) for lab in labels]]


def _check_dataset(images, labels, multiclass, class_count):
    if not images:
        raise ChmError("training needs at least one image")
    if len(images) != len(labels):
        raise ChmError("every training image needs a label map")
    channels = images[0].channels
    for i, (im, lab) in enumerate(zip(images, labels)):
        if im.shape != lab.shape:
            raise DimensionError(f"image {i} is {im.shape} but its labels are {lab.shape}")
        if im.channels != channels:
            raise ChmError(f"image {i} has {im.channels} channels, expected {channels}")
    if multiclass:
        present = set()
        for lab in labels:
            present.update(np.unique(lab.data).tolist())
        missing = sorted(set(range(class_count)) - present)
        if missing:
            raise ChmError(f"classes {missing} never occur in the training labels")
    return channels


def _emit(model: ChmModel, log: Log | None, record: dict):
    model.log.append(record)
    if log is not None:
        log(record)


# -- training ---------------------------------------------------------------


def _train_stage(
    model: ChmModel,
    imgs: list[_Image],
    targets: list[list[np.ndarray]],
    prev_outputs: list[list[np.ndarray]] | None,
    prev_topdown: list | None,
    rng: np.random.Generator,
    log: Log | None,
) -> tuple[Stage, list[list[np.ndarray]]]:
    config = model.config
    multiclass = model.multiclass
    replicas = model.replicas
    s = len(model.stages) + 1
    contexts = [dict() for _ in imgs]
    bottom_up = []
    level_ll = {r: [] for r in range(replicas)}

    for level in range(1, config.levels + 1):
        level_targets = [[maxpool(t, level - 1) for t in per_img] for per_img in targets]
        if level == 1 and prev_topdown is not None:
            classifiers = list(prev_topdown)
            for i in range(len(imgs)):
                for r in range(replicas):
                    contexts[i][(1, r)] = prev_outputs[i][r]
        else:
            picks = [select_samples(level_targets[r], config, rng) for r in range(replicas)]
            xs = [[] for _ in range(replicas)]
            ys = [[] for _ in range(replicas)]
            for i, img in enumerate(imgs):
                for r in range(replicas):
                    if len(picks[r][i]):
                        rows = level_features(img, contexts[i], level, r, multiclass)
                        xs[r].append(rows[picks[r][i]])
                        ys[r].append(level_targets[r][i].ravel()[picks[r][i]])
            classifiers = []
            for r in range(replicas):
                classifiers.append(fit_classifier(np.vstack(xs[r]), np.concatenate(ys[r]), config, rng))
            del xs, ys
            for i, img in enumerate(imgs):
                shape = level_shape(img.shape, level)
                outputs = {
                    r: _as_map(ldnn.predict(classifiers[r], level_features(img, contexts[i], level, r, multiclass)), shape)
                    for r in range(replicas)
                }
                for r in range(replicas):
                    contexts[i][(level, r)] = outputs[r]
        for img in imgs:
            if level > 1:
                img.drop(level)
        bottom_up.append(classifiers)
        for r in range(replicas):
            preds = [contexts[i][(level, r)] for i in range(len(imgs))]
            ll = math.fsum(_loglik(p, t) for p, t in zip(preds, level_targets[r]))
            level_ll[r].append(ll)
            f = _pooled_f(preds, level_targets[r])
            _emit(model, log, {"event": "level", "stage": s, "level": level, "replica": r,
                               "loglik": ll, "train_f": f, "shared": level == 1 and prev_topdown is not None})

    top_down = []
    for r in range(replicas):
        pick = select_samples(targets[r], config, rng)
        xs, ys = [], []
        for i, img in enumerate(imgs):
            if len(pick[i]):
                xs.append(topdown_features(img, contexts[i], r)[pick[i]])
                ys.append(targets[r][i].ravel()[pick[i]])
        top_down.append(fit_classifier(np.vstack(xs), np.concatenate(ys), config, rng))

    outputs = [
        [_as_map(ldnn.predict(top_down[r], topdown_features(img, contexts[i], r)), img.shape) for r in range(replicas)]
        for i, img in enumerate(imgs)
    ]
    for r in range(replicas):
        preds = [outputs[i][r] for i in range(len(imgs))]
        j2 = math.fsum(_loglik(p, t) for p, t in zip(preds, targets[r]))
        _emit(model, log, {"event": "topdown", "stage": s, "replica": r, "loglik": j2,
                           "train_f": _pooled_f(preds, targets[r])})
        _emit(model, log, {"event": "objective", "stage": s, "replica": r,
                           "J1": math.fsum(level_ll[r]), "J2": j2})
    return Stage(bottom_up, top_down, shared_first=prev_topdown is not None), outputs


def _pooled_f(preds, targets) -> float:
    p = np.concatenate([a.ravel() for a in preds])
    t = np.concatenate([a.ravel() for a in targets])
    return binary_scores(p, t).f_value


def _train(images, labels, config, rng, multiclass, log) -> ChmModel:
    channels = _check_dataset(images, labels, multiclass, config.class_count)
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    model = ChmModel(config=config, channels=channels, multiclass=multiclass)
    imgs = [_Image(im.data, config) for im in images]
    targets = _targets(labels, multiclass, config.class_count)
    prev_outputs = prev_topdown = None
    for _ in range(config.stages):
        stage, prev_outputs = _train_stage(model, imgs, targets, prev_outputs, prev_topdown, rng, log)
        model.stages.append(stage)
        prev_topdown = stage.top_down
    return model


def chm_train(dataset, config: ChmConfig, rng: np.random.Generator | None = None, log: Log | None = None) -> ChmModel:
    """Train a hierarchy on ``dataset``, a sequence of ``(ImagePlane, LabelMap)`` pairs.

    Dispatches to one-vs-all training when ``config.class_count > 2``.
    """
    if config.class_count > 2:
        return train_multiclass(dataset, config, rng, log)
    images, labels = _split(dataset)
    return _train(images, labels, config, rng, False, log)


def train_multiclass(dataset, config: ChmConfig, rng: np.random.Generator | None = None, log: Log | None = None) -> ChmModel:
    """One binary hierarchy per class, trained level by level across classes."""
    images, labels = _split(dataset)
    return _train(images, labels, config, rng, True, log)


def _split(dataset):
    images = [im for im, _ in dataset]
    labels = [lab for _, lab in dataset]
    return images, labels


# -- inference --------------------------------------------------------------


def infer_level(classifier: ldnn.LdnnModel, features: np.ndarray, shape) -> np.ndarray:
    """Soft output map of one level classifier over its feature rows."""
    features = np.asarray(features)
    if features.shape[1] != classifier.feature_count:
        raise DimensionError(
            f"classifier expects {classifier.feature_count} features, got {features.shape[1]}"
        )
    return _as_map(ldnn.predict(classifier, features), shape)


def chm_trace(model: ChmModel, image: ImagePlane, stages: int | None = None) -> list[dict]:
    """Run inference and return, per stage, every context map and the
    top-down output (``contexts[(level, replica)]``, ``contexts[("z", replica)]``)."""
    if isinstance(image, np.ndarray):
        image = ImagePlane(image)
    if image.channels != model.channels:
        raise ChmError(f"model expects {model.channels} channels, image has {image.channels}")
    stages = len(model.stages) if stages is None else stages
    if not 1 <= stages <= len(model.stages):
        raise ChmError(f"model has {len(model.stages)} stages, asked for {stages}")
    img = _Image(image.data, model.config)
    trace = []
    prev = None
    for stage in model.stages[:stages]:
        contexts = {}
        for level, classifiers in enumerate(stage.bottom_up, start=1):
            for r in range(model.replicas):
                if level == 1 and stage.shared_first:
                    contexts[(1, r)] = prev[r]
                    continue
                rows = level_features(img, contexts, level, r, model.multiclass)
                contexts[(level, r)] = infer_level(classifiers[r], rows, level_shape(img.shape, level))
            if level > 1:
                img.drop(level)
        prev = []
        for r in range(model.replicas):
            z = infer_level(stage.top_down[r], topdown_features(img, contexts, r), img.shape)
            contexts[("z", r)] = z
            prev.append(z)
        trace.append(contexts)
    return trace


def chm_infer(model: ChmModel, image: ImagePlane, stages: int | None = None) -> ProbabilityMap:
    """Final top-down output, one plane per replica (a single plane for binary models).

    ``stages`` truncates the model to its first stages.
    """
    contexts = chm_trace(model, image, stages)[-1]
    return ProbabilityMap(np.stack([contexts[("z", r)] for r in range(model.replicas)]))


def label_map(model: ChmModel, probs: ProbabilityMap, threshold: float = 0.5) -> np.ndarray:
    """Hard labels: thresholding for binary models, argmax over classes otherwise."""
    if model.multiclass:
        return probs.argmax()
    return (probs.plane(0) >= threshold).astype(np.int64)
