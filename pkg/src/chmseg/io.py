"""Images, label maps, dataset manifests and model directories.

Model directory layout::

    manifest.json           format "chm/1", config, feature registry, classifier index
    stage1_level1.w         one blob per trained classifier
    ...
    stage1_topdown.w

A blob is little-endian float64; for each group i and unit j it holds the
bias b_ij followed by the weight row w_ij. Multiclass models append
``_class{c}`` to the blob stem.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .chm import ChmModel, Stage
from .core import ChmConfig, ChmError, ImagePlane, LabelMap
from .features import feature_labels
from .ldnn import LdnnModel

MODEL_FORMAT = "chm/1"
DATASET_FORMAT = "chm-dataset/1"
PNG_MAGIC = b"\x89PNG\r\n\x1a\n"


class FormatError(ChmError):
    pass


# -- images -----------------------------------------------------------------


def _pnm_header(data: bytes, path) -> tuple[str, int, int, int, int]:
    tokens = []
    pos = 2
    while len(tokens) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos >= len(data):
            raise FormatError(f"{path}: truncated header")
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    if pos >= len(data):
        raise FormatError(f"{path}: truncated header")
    try:
        width, height, maxval = (int(t) for t in tokens)
    except ValueError:
        raise FormatError(f"{path}: malformed header") from None
    if width < 1 or height < 1 or not 0 < maxval < 65536:
        raise FormatError(f"{path}: invalid dimensions or maxval")
    return data[:2].decode(), width, height, maxval, pos + 1


def _read_pnm(data: bytes, path) -> np.ndarray:
    magic, width, height, maxval, offset = _pnm_header(data, path)
    channels = 1 if magic == "P5" else 3
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    count = width * height * channels
    if len(data) - offset < count * dtype.itemsize:
        raise FormatError(f"{path}: truncated pixel data")
    pixels = np.frombuffer(data, dtype=dtype, count=count, offset=offset).astype(np.float64)
    return np.moveaxis(pixels.reshape(height, width, channels), -1, 0) / maxval


def _read_png(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            im.load()
            mode = im.mode
            if mode in ("I;16", "I;16B", "I;16L", "I"):
                a = np.asarray(im, dtype=np.float64) / 65535.0
                return a[None]
            if mode == "L":
                return np.asarray(im, dtype=np.float64)[None] / 255.0
            if mode in ("LA",):
                return np.asarray(im.convert("L"), dtype=np.float64)[None] / 255.0
            if mode == "RGB":
                a = np.asarray(im, dtype=np.float64)
            else:
                a = np.asarray(im.convert("RGB"), dtype=np.float64)
            return np.moveaxis(a, -1, 0) / 255.0
    except (OSError, SyntaxError) as exc:
        raise FormatError(f"{path}: cannot decode PNG ({exc})") from exc


def read_pixels(path) -> np.ndarray:
    """Raw planes ``(C, H, W)`` scaled to [0, 1]."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise FormatError(f"{path}: {exc.strerror}") from exc
    if not data:
        raise FormatError(f"{path}: truncated file (0 bytes)")
    if data.startswith(PNG_MAGIC):
        return _read_png(path)
    if data[:2] in (b"P5", b"P6"):
        return _read_pnm(data, path)
    if PNG_MAGIC.startswith(data[:8]) or b"P5".startswith(data[:2]) or b"P6".startswith(data[:2]):
        raise FormatError(f"{path}: truncated file")
    raise FormatError(f"{path}: unsupported image format (need PNG, P5 or P6)")


def load_image(path, depth_path=None) -> ImagePlane:
    """Load a PNG/PGM/PPM as planes in R, G, B order. ``depth_path`` adds a
    depth plane rescaled to [0, 1] by its own min and max."""
    planes = read_pixels(path)
    if depth_path is not None:
        planes = np.concatenate([planes, depth_plane(read_pixels(depth_path)[0])[None]])
    return ImagePlane(planes)


def depth_plane(depth: np.ndarray) -> np.ndarray:
    depth = np.asarray(depth, dtype=np.float64)
    lo, hi = depth.min(), depth.max()
    return np.zeros_like(depth) if hi == lo else (depth - lo) / (hi - lo)


def _label_values(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise FormatError(f"{path}: no such file")
    data = path.read_bytes()
    if data.startswith(PNG_MAGIC):
        with Image.open(path) as im:
            if im.mode not in ("L", "P", "1"):
                raise FormatError(f"{path}: label maps must be 8-bit single-channel, got {im.mode}")
            return np.asarray(im.convert("L") if im.mode == "1" else im, dtype=np.int64)
    if data[:2] == b"P5":
        magic, width, height, maxval, offset = _pnm_header(data, path)
        if maxval > 255:
            raise FormatError(f"{path}: label maps must be 8-bit")
        if len(data) - offset < width * height:
            raise FormatError(f"{path}: truncated pixel data")
        return np.frombuffer(data, np.uint8, width * height, offset).reshape(height, width).astype(np.int64)
    if not data:
        raise FormatError(f"{path}: truncated file (0 bytes)")
    raise FormatError(f"{path}: label maps must be 8-bit PNG or P5")


def load_labels(path, task: str = "label", class_count: int = 2):
    """``label`` task: a ``LabelMap`` (any value > 0 is class 1 when C = 2).
    ``edge`` task: a list of binary annotation maps, one per file (a directory
    holds one file per annotator)."""
    path = Path(path)
    if task == "edge":
        files = sorted(p for p in path.iterdir() if p.is_file()) if path.is_dir() else [path]
        if not files:
            raise FormatError(f"{path}: no annotation files")
        return [(_label_values(f) > 0).astype(np.int64) for f in files]
    if task != "label":
        raise ChmError(f"unknown task {task!r}")
    values = _label_values(path)
    if class_count == 2:
        values = (values > 0).astype(np.int64)
    elif values.max() >= class_count:
        raise FormatError(f"{path}: label {values.max()} is not below class count {class_count}")
    return LabelMap(values, class_count)


def save_probability_png(path, probs: np.ndarray):
    """16-bit grayscale PNG, value ``round(p * 65535)``."""
    probs = np.asarray(probs, dtype=np.float64)
    Image.fromarray(np.round(np.clip(probs, 0, 1) * 65535).astype(np.uint16)).save(path)


def save_label_png(path, labels: np.ndarray):
    Image.fromarray(np.asarray(labels, dtype=np.uint8)).save(path)


def save_gray_png(path, image: np.ndarray):
    Image.fromarray(np.round(np.clip(image, 0, 1) * 255).astype(np.uint8)).save(path)


# -- dataset manifests ------------------------------------------------------


@dataclass
class Entry:
    image: Path
    label: Path
    split: str
    depth: Path | None = None

    @property
    def stem(self) -> str:
        return self.image.stem


@dataclass
class DatasetManifest:
    entries: list
    class_count: int = 2
    task: str = "label"
    root: Path = field(default_factory=Path)

    def split(self, name: str) -> list:
        return [e for e in self.entries if e.split == name]

    def to_dict(self) -> dict:
        def rel(p):
            return os.path.relpath(p, self.root) if p is not None else None

        entries = []
        for e in self.entries:
            d = {"image": rel(e.image), "label": rel(e.label), "split": e.split}
            if e.depth is not None:
                d["depth"] = rel(e.depth)
            entries.append(d)
        return {"format": DATASET_FORMAT, "classCount": self.class_count, "task": self.task, "entries": entries}


def load_manifest(path, check_files: bool = True) -> DatasetManifest:
    """Read a dataset manifest; relative paths resolve against its directory."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise FormatError(f"{path}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}:{exc.lineno}: invalid JSON ({exc.msg})") from exc
    root = path.parent
    try:
        task = raw.get("task", "label")
        class_count = int(raw.get("classCount", 2))
        entries = []
        for k, item in enumerate(raw["entries"]):
            split = item.get("split", "train")
            if split not in ("train", "test"):
                raise FormatError(f"{path}: entry {k} has unknown split {split!r}")
            depth = root / item["depth"] if item.get("depth") else None
            entries.append(Entry(root / item["image"], root / item["label"], split, depth))
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: malformed manifest ({exc})") from exc
    if task not in ("label", "edge"):
        raise FormatError(f"{path}: unknown task {task!r}")
    if check_files:
        for e in entries:
            for p in (e.image, e.label, e.depth):
                if p is not None and not p.exists():
                    raise FormatError(f"{path}: missing file {p}")
    return DatasetManifest(entries, class_count, task, root)


def save_manifest(manifest: DatasetManifest, path):
    Path(path).write_text(json.dumps(manifest.to_dict(), indent=2) + "\n", encoding="utf-8")


def load_entry(entry: Entry, task: str, class_count: int):
    return load_image(entry.image, entry.depth), load_labels(entry.label, task, class_count)


# -- configs and models -----------------------------------------------------


def load_config(path) -> ChmConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise FormatError(f"{path}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}:{exc.lineno}: invalid JSON ({exc.msg})") from exc
    if "config" in raw and isinstance(raw["config"], dict):
        raw = raw["config"]  # a model manifest works as a config file too
    try:
        return ChmConfig.from_dict(raw)
    except TypeError as exc:
        raise FormatError(f"{path}: {exc}") from exc


def _blob_name(stage: int, level: int | None, replica: int, multiclass: bool) -> str:
    stem = f"stage{stage}_topdown" if level is None else f"stage{stage}_level{level}"
    return f"{stem}_class{replica}.w" if multiclass else f"{stem}.w"


def _pack(model: LdnnModel) -> bytes:
    rows = np.concatenate([model.biases[..., None], model.weights], axis=2)
    return rows.astype("<f8").tobytes()


def _unpack(data: bytes, groups: int, per_group: int, features: int, dropout: bool, name: str) -> LdnnModel:
    expected = groups * per_group * (features + 1) * 8
    if len(data) != expected:
        raise FormatError(f"{name}: blob holds {len(data)} bytes, manifest implies {expected}")
    rows = np.frombuffer(data, dtype="<f8").reshape(groups, per_group, features + 1).astype(np.float64)
    return LdnnModel(rows[..., 1:].copy(), rows[..., 0].copy(), dropout)


def save_model(model: ChmModel, directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    index = []
    for s, stage in enumerate(model.stages, start=1):
        slots = [(lvl, cls) for lvl, cls in enumerate(stage.bottom_up, start=1)] + [(None, stage.top_down)]
        for level, classifiers in slots:
            for r, clf in enumerate(classifiers):
                record = {"stage": s, "level": level if level is not None else "topdown", "replica": r,
                          "groups": clf.groups, "perGroup": clf.per_group,
                          "features": clf.feature_count, "dropout": clf.dropout}
                if level == 1 and stage.shared_first:
                    record["shared"] = _blob_name(s - 1, None, r, model.multiclass)
                else:
                    name = _blob_name(s, level, r, model.multiclass)
                    record["file"] = name
                    (directory / name).write_bytes(_pack(clf))
                index.append(record)
    manifest = {
        "format": MODEL_FORMAT,
        "config": model.config.to_dict(),
        "channels": model.channels,
        "multiclass": model.multiclass,
        "featureRegistry": list(feature_labels(model.config.features, model.channels)),
        "classifiers": index,
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")


def load_model(directory) -> ChmModel:
    directory = Path(directory)
    path = directory / "manifest.json"
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise FormatError(f"{path}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}:{exc.lineno}: invalid JSON ({exc.msg})") from exc
    if raw.get("format") != MODEL_FORMAT:
        raise FormatError(f"{path}: unsupported model format {raw.get('format')!r}, expected {MODEL_FORMAT!r}")
    config = ChmConfig.from_dict(raw["config"])
    model = ChmModel(config=config, channels=int(raw["channels"]), multiclass=bool(raw["multiclass"]))
    replicas = model.replicas
    loaded: dict[str, LdnnModel] = {}
    slots: dict[tuple, LdnnModel] = {}
    shared_stages = set()
    for rec in raw["classifiers"]:
        key = (rec["stage"], rec["level"], rec["replica"])
        if "shared" in rec:
            shared_stages.add(rec["stage"])
            if rec["shared"] not in loaded:
                raise FormatError(f"{path}: shared classifier {rec['shared']} is not defined earlier")
            slots[key] = loaded[rec["shared"]]
            continue
        name = rec["file"]
        try:
            data = (directory / name).read_bytes()
        except OSError as exc:
            raise FormatError(f"{directory / name}: {exc.strerror}") from exc
        clf = _unpack(data, rec["groups"], rec["perGroup"], rec["features"], rec["dropout"], str(directory / name))
        loaded[name] = clf
        slots[key] = clf
    stages = sorted({k[0] for k in slots})
    for s in stages:
        try:
            bottom_up = [[slots[(s, l, r)] for r in range(replicas)] for l in range(1, config.levels + 1)]
            top_down = [slots[(s, "topdown", r)] for r in range(replicas)]
        except KeyError as exc:
            raise FormatError(f"{path}: classifier {exc.args[0]} missing from index") from None
        model.stages.append(Stage(bottom_up, top_down, shared_first=s in shared_stages))
    return model
