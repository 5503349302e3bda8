"""Synthetic source/target grating benchmark, IDX loading, and evaluation metrics."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from urllib.parse import parse_qs

import numpy as np

from .errors import ConfigError, ContractError, DataError, DimensionError, FormatError, LengthError

MODES = ("source", "target")
SPLITS = ("train", "val", "test")

# frequency band (cycles per image) and global orientation offset per mode
MODE_SHIFT = {
    "source": ((2.0, 3.0), 0.0),
    "target": ((4.0, 6.0), math.pi / 16),
}


@dataclass
class Dataset:
    images: np.ndarray  # (N, c, H, W) float64
    labels: np.ndarray  # (N,) int64
    name: str = ""
    split: str = "train"
    num_classes: int | None = None

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise DimensionError(f"images must be (N, c, H, W), got {self.images.shape}")
        if len(self.labels) != len(self.images):
            raise LengthError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.num_classes is None:
            self.num_classes = int(self.labels.max()) + 1 if len(self.labels) else 0
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DataError(f"labels outside [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)


@dataclass
class SynthSpec:
    num_classes: int = 8
    samples_per_class: int = 64
    image_size: int = 16
    mode: str = "source"
    noise: float = 1.0
    seed: int = 0
    split: str = "train"
    freq_band: tuple[float, float] | None = None
    orientation_offset: float | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"synth mode must be one of {MODES}, got {self.mode!r}")
        if self.split not in SPLITS:
            raise ConfigError(f"split must be one of {SPLITS}, got {self.split!r}")
        band, offset = MODE_SHIFT[self.mode]
        if self.freq_band is None:
            self.freq_band = band
        if self.orientation_offset is None:
            self.orientation_offset = offset
        if self.num_classes < 1 or self.samples_per_class < 1 or self.image_size < 2:
            raise ConfigError("synth spec needs positive class/sample counts and image_size >= 2")
        if self.noise < 0:
            raise ConfigError("noise must be non-negative")

    def class_params(self, k: int) -> tuple[float, float]:
        """(orientation, frequency) of class ``k``."""
        lo, hi = self.freq_band
        frac = k / (self.num_classes - 1) if self.num_classes > 1 else 0.0
        return k * math.pi / self.num_classes + self.orientation_offset, lo + (hi - lo) * frac


def synth_generate(spec: SynthSpec) -> Dataset:
    """Oriented sinusoidal gratings, one orientation/frequency pair per class, plus Gaussian noise."""
    n = spec.image_size
    u, v = np.meshgrid(np.arange(n) / n, np.arange(n) / n, indexing="xy")
    protos = np.empty((spec.num_classes, n, n))
    for k in range(spec.num_classes):
        theta, freq = spec.class_params(k)
        protos[k] = np.sin(2.0 * math.pi * freq * (u * math.cos(theta) + v * math.sin(theta)))
    labels = np.repeat(np.arange(spec.num_classes), spec.samples_per_class)
    rng = np.random.default_rng([spec.seed, MODES.index(spec.mode), SPLITS.index(spec.split)])
    order = rng.permutation(len(labels))
    labels = labels[order]
    images = protos[labels] + spec.noise * rng.standard_normal((len(labels), n, n))
    return Dataset(images[:, None, :, :], labels, name=f"synth:{spec.mode}", split=spec.split,
                   num_classes=spec.num_classes)


# ---------------------------------------------------------------- IDX

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801


def idx_read(path: str | Path) -> np.ndarray:
    """Read an unsigned-byte IDX file (images or labels) into a uint8 array."""
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise FormatError(f"{path}: too short for an IDX header")
    magic = struct.unpack(">I", raw[:4])[0]
    if magic not in (IDX_IMAGES, IDX_LABELS):
        raise FormatError(f"{path}: bad IDX magic 0x{magic:08x}")
    ndim = magic & 0xFF
    head = 4 + 4 * ndim
    if len(raw) < head:
        raise LengthError(f"{path}: truncated IDX header")
    dims = struct.unpack(f">{ndim}I", raw[4:head])
    count = int(np.prod(dims))
    if len(raw) - head < count:
        raise LengthError(f"{path}: payload has {len(raw) - head} bytes, header promises {count}")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=head).reshape(dims)


def idx_write(path: str | Path, array: np.ndarray) -> None:
    arr = np.asarray(array)
    if arr.ndim == 3:
        magic = IDX_IMAGES
    elif arr.ndim == 1:
        magic = IDX_LABELS
    else:
        raise DimensionError(f"IDX writer handles (N, H, W) images or (N,) labels, got {arr.shape}")
    if arr.min(initial=0) < 0 or arr.max(initial=0) > 255:
        raise DataError("IDX payload must fit in unsigned bytes")
    header = struct.pack(">I", magic) + struct.pack(f">{arr.ndim}I", *arr.shape)
    Path(path).write_bytes(header + arr.astype(np.uint8).tobytes())


def _sibling_labels(path: Path) -> Path | None:
    for a, b in (("images-idx3", "labels-idx1"), ("images", "labels")):
        if a in path.name:
            cand = path.with_name(path.name.replace(a, b))
            if cand.exists():
                return cand
    return None


def idx_load(path: str | Path, labels_path: str | Path | None = None, num_classes: int | None = None) -> Dataset:
    path = Path(path)
    imgs = idx_read(path)
    if imgs.ndim != 3:
        raise FormatError(f"{path}: expected a 3-d image file, got {imgs.ndim}-d")
    labels_path = Path(labels_path) if labels_path else _sibling_labels(path)
    if labels_path is None:
        labels = np.zeros(len(imgs), dtype=np.int64)
    else:
        labels = idx_read(labels_path).astype(np.int64)
        if labels.ndim != 1:
            raise FormatError(f"{labels_path}: expected a 1-d label file")
        if len(labels) != len(imgs):
            raise LengthError(f"{len(imgs)} images but {len(labels)} labels")
    images = imgs.astype(np.float64)[:, None, :, :] / 255.0
    return Dataset(images, labels, name=f"idx:{path}", num_classes=num_classes)


# ---------------------------------------------------------------- URIs

def resolve_dataset(uri: str, split: str | None = None, **overrides) -> Dataset:
    """Load ``synth:<mode>?seed=..&noise=..&n=..&split=..`` or ``idx:<path>?labels=<path>``.

    ``split`` and keyword overrides take precedence over query parameters.
    """
    scheme, _, rest = uri.partition(":")
    target, _, query = rest.partition("?")
    params = {k: v[-1] for k, v in parse_qs(query, keep_blank_values=True).items()}
    if scheme == "synth":
        kw = {}
        conv = {"seed": int, "noise": float, "n": int, "classes": int, "size": int}
        for key, val in params.items():
            if key == "split":
                kw["split"] = val
            elif key in conv:
                name = {"n": "samples_per_class", "classes": "num_classes", "size": "image_size"}.get(key, key)
                try:
                    kw[name] = conv[key](val)
                except ValueError:
                    raise ConfigError(f"bad value for {key!r} in {uri!r}") from None
            else:
                raise ConfigError(f"unknown synth parameter {key!r} in {uri!r}")
        kw.update(overrides)
        if split is not None:
            kw["split"] = split
        return synth_generate(SynthSpec(mode=target or "source", **kw))
    if scheme == "idx":
        unknown = set(params) - {"labels", "classes"}
        if unknown:
            raise ConfigError(f"unknown idx parameter(s) {sorted(unknown)} in {uri!r}")
        if not Path(target).exists():
            raise DataError(f"no such IDX file: {target}")
        classes = int(params["classes"]) if "classes" in params else None
        return idx_load(target, params.get("labels"), num_classes=classes)
    raise ConfigError(f"unsupported dataset URI {uri!r}")


# ---------------------------------------------------------------- metrics

def _normalize(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    return x / np.where(norms > 0, norms, 1.0)


def knn_predict(train_emb, train_lab, test_emb, k: int = 20) -> np.ndarray:
    """Cosine-similarity K-NN with an unweighted vote; ties go to the lower class id."""
    train_emb = np.asarray(train_emb, dtype=np.float64)
    test_emb = np.asarray(test_emb, dtype=np.float64)
    train_lab = np.asarray(train_lab, dtype=np.int64)
    n = len(train_emb)
    if not 1 <= k <= n:
        raise ContractError(f"k={k} must lie in [1, {n}]")
    sims = _normalize(test_emb) @ _normalize(train_emb).T
    # stable sort on -sim: equal similarities fall back to the lower train index
    nearest = np.argsort(-sims, axis=1, kind="stable")[:, :k]
    votes = train_lab[nearest]
    n_cls = int(train_lab.max()) + 1
    counts = np.zeros((len(test_emb), n_cls), dtype=np.int64)
    np.add.at(counts, (np.repeat(np.arange(len(test_emb)), k), votes.reshape(-1)), 1)
    return counts.argmax(axis=1)


def knn_eval(train_emb, train_lab, test_emb, test_lab, k: int = 20) -> float:
    pred = knn_predict(train_emb, train_lab, test_emb, k)
    return float(np.mean(pred == np.asarray(test_lab)))


def top1_accuracy(logits, labels) -> float:
    logits = np.asarray(getattr(logits, "data", logits))
    labels = np.asarray(labels)
    if len(labels) == 0:
        return 0.0
    return float(np.mean(np.argmax(logits, axis=1) == labels))
