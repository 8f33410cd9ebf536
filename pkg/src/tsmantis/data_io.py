"""Datasets on disk, synthetic fixtures, and checkpoint persistence."""
from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = "TSMANTIS-CHECKPOINT"
CHECKPOINT_VERSION = 1
HEADER_KEYS = {"format", "version", "config", "head", "projector", "adapter", "probe", "meta",
               "tensors"}
DTYPES = {"f4": np.dtype("<f4"), "f8": np.dtype("<f8")}


class ParseError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


@dataclass
class TimeSeriesDataset:
    """``X`` is ``(n, d, t)``; ``y`` holds 0-based labels, ``classes`` the originals."""

    X: np.ndarray
    y: Optional[np.ndarray] = None
    name: str = ""
    classes: Optional[List[str]] = None
    meta: Dict = field(default_factory=dict)

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        if self.X.ndim == 2:
            self.X = self.X[:, None, :]
        if self.X.ndim != 3:
            raise ValueError(f"dataset values must be (n, d, t), got {self.X.shape}")
        if self.y is not None:
            self.y = np.asarray(self.y, dtype=np.int64)
            if len(self.y) != len(self.X):
                raise ValueError("labels and series differ in length")

    def __len__(self) -> int:
        return len(self.X)

    @property
    def n_channels(self) -> int:
        return self.X.shape[1]

    @property
    def length(self) -> int:
        return self.X.shape[2]

    @property
    def num_classes(self) -> int:
        if self.classes is not None:
            return len(self.classes)
        return int(self.y.max()) + 1 if self.y is not None and len(self.y) else 0

    def subset(self, index) -> "TimeSeriesDataset":
        return TimeSeriesDataset(self.X[index], None if self.y is None else self.y[index],
                                 self.name, self.classes, dict(self.meta))

    def manifest(self, path: str = "", split: str = "train") -> dict:
        return {"name": self.name, "path": path, "num_classes": self.num_classes,
                "channels": self.n_channels, "length": self.length, "split": split}


def _sort_key(label: str):
    try:
        return (0, float(label), label)
    except ValueError:
        return (1, 0.0, label)


def remap_labels(raw: List[str], classes: Optional[List[str]] = None):
    """Map label strings to 0..K-1 by sorted original value (numeric when possible)."""
    if classes is None:
        classes = sorted(set(raw), key=_sort_key)
    lookup = {c: i for i, c in enumerate(classes)}
    unknown = sorted(set(raw) - set(lookup))
    if unknown:
        raise ParseError(f"labels {unknown} are not among the known classes {classes}")
    return np.array([lookup[r] for r in raw], dtype=np.int64), list(classes)


def load_tsv(path: str, classes: Optional[List[str]] = None) -> TimeSeriesDataset:
    """Read a labelled TSV: label, then one cell per time step.

    A cell of colon-joined values (``v1:v2:...``) carries all channels of a
    time step.  Pass ``classes`` to reuse the label mapping of a training split.
    """
    labels: List[str] = []
    rows: List[np.ndarray] = []
    shape = None
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            cells = line.split("\t")
            if len(cells) < 2:
                raise ParseError(f"{path}:{lineno}: expected a label and at least one value")
            try:
                steps = [[float(v) for v in cell.split(":")] for cell in cells[1:]]
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: non-numeric cell ({exc})") from None
            if len({len(s) for s in steps}) != 1:
                raise ParseError(f"{path}:{lineno}: inconsistent channel count within row")
            values = np.array(steps)
            if shape is None:
                shape = values.shape
            elif values.shape != shape:
                raise ParseError(f"{path}:{lineno}: ragged row: {values.shape[0]} steps x "
                                 f"{values.shape[1]} channels, expected {shape[0]} x {shape[1]}")
            labels.append(cells[0].strip())
            rows.append(values.T)
    if not rows:
        raise ParseError(f"{path}: no data rows")
    y, classes = remap_labels(labels, classes)
    name = os.path.splitext(os.path.basename(path))[0]
    return TimeSeriesDataset(np.stack(rows), y, name=name, classes=classes)


def write_tsv(dataset: TimeSeriesDataset, path: str) -> None:
    """Write ``dataset`` so that :func:`load_tsv` reads it back exactly."""
    classes = dataset.classes
    with open(path, "w", encoding="utf-8") as fh:
        for i, series in enumerate(dataset.X):
            if dataset.y is None:
                label = "0"
            else:
                label = classes[dataset.y[i]] if classes is not None else str(dataset.y[i])
            if dataset.n_channels == 1:
                cells = [repr(float(v)) for v in series[0]]
            else:
                cells = [":".join(repr(float(v)) for v in step) for step in series.T]
            fh.write(label + "\t" + "\t".join(cells) + "\n")


SYNTHETIC_KINDS = ("two_cluster", "sine_vs_square", "multichannel_redundant")


def _bump(t: int, center: float, width: float) -> np.ndarray:
    grid = np.arange(t)
    return np.exp(-0.5 * ((grid - center) / width) ** 2)


def make_synthetic(kind: str, n: int, t: int = 128, d: int = 1, seed: int = 0,
                   noise: float = 0.1) -> TimeSeriesDataset:
    """Deterministic labelled toy data; classes alternate and are balanced.

    ``two_cluster``: a Gaussian bump at 30% or 70% of the series.
    ``sine_vs_square``: sine versus square wave of random phase.
    ``multichannel_redundant``: two signal channels (bumps) hidden among
    ``d - 2`` low-variance noise channels; their indices are in ``meta``.
    """
    if kind not in SYNTHETIC_KINDS:
        raise ValueError(f"unknown synthetic kind {kind!r}; choose from {SYNTHETIC_KINDS}")
    if n < 4:
        raise ValueError("need at least 4 samples")
    rng = np.random.default_rng(seed)
    y = rng.permutation(np.arange(n) % 2)
    meta: Dict = {}
    if kind == "two_cluster":
        X = np.empty((n, d, t))
        for i in range(n):
            center = (0.3 if y[i] == 0 else 0.7) * (t - 1)
            X[i] = 2.0 * _bump(t, center, t / 16.0) + noise * rng.standard_normal((d, t))
    elif kind == "sine_vs_square":
        grid = np.arange(t) / t
        X = np.empty((n, d, t))
        for i in range(n):
            phase = rng.uniform(0, 2 * np.pi)
            wave = np.sin(2 * np.pi * 4 * grid + phase)
            if y[i] == 1:
                wave = np.sign(wave)
            X[i] = wave + noise * rng.standard_normal((d, t))
    else:
        if d < 3:
            raise ValueError("multichannel_redundant needs d >= 3")
        signal = np.sort(rng.choice(d, size=2, replace=False))
        meta["signal_channels"] = [int(c) for c in signal]
        X = 0.05 * rng.standard_normal((n, d, t))
        for i in range(n):
            for j, ch in enumerate(signal):
                center = ((0.3 if y[i] == 0 else 0.7) if j == 0 else 0.5) * (t - 1)
                sign = 1.0 if (y[i] == 0 or j == 0) else -1.0
                X[i, ch] += 2.0 * sign * _bump(t, center, t / 16.0) \
                    + noise * rng.standard_normal(t)
    return TimeSeriesDataset(X, y, name=kind, classes=["0", "1"], meta=meta)


# ----------------------------------------------------------------------
# checkpoints
def _tensor_entries(prefix: str, state: Dict[str, np.ndarray]):
    return [(f"{prefix}.{name}", np.asarray(value)) for name, value in state.items()]


def _dtype_code(arr: np.ndarray) -> str:
    return "f8" if arr.dtype == np.float64 else "f4"


def save_checkpoint(path: str, encoder=None, head=None, projector=None, adapter=None,
                    probe=None, meta: Optional[dict] = None) -> None:
    """Write any subset of the model parts; see ``docs/checkpoint-format.md``."""
    from .adapters import LinearCombiner

    header: Dict = {"format": CHECKPOINT_MAGIC, "version": CHECKPOINT_VERSION}
    entries = []
    if encoder is not None:
        header["config"] = encoder.config.to_dict()
        entries += _tensor_entries("encoder", encoder.state_dict())
    if head is not None:
        header["head"] = {"input_dim": head.input_dim, "num_classes": head.num_classes}
        entries += _tensor_entries("head", head.state_dict())
    if projector is not None:
        header["projector"] = {"dim": projector.linear.weight.shape[0],
                               "proj_dim": projector.linear.weight.shape[1]}
        entries += _tensor_entries("projector", projector.state_dict())
    if adapter is not None:
        if isinstance(adapter, LinearCombiner):
            header["adapter"] = {"kind": "lcomb", "d": adapter.d, "d_new": adapter.d_new}
            entries.append(("adapter.weight", adapter.weight.data))
        else:
            header["adapter"] = {"kind": adapter.kind, "d": int(adapter.n_channels_in_),
                                 "d_new": int(adapter.d_new_)}
            entries.append(("adapter.components", adapter.components_))
            if adapter.mean_ is not None:
                entries.append(("adapter.mean", adapter.mean_))
            if adapter.indices_ is not None:
                header["adapter"]["indices"] = [int(i) for i in adapter.indices_]
    if probe is not None:
        header["probe"] = {"input_dim": int(probe.coef_.shape[0]),
                           "num_classes": int(probe.coef_.shape[1]), "l2": float(probe.l2)}
        entries += [("probe.coef", probe.coef_), ("probe.intercept", probe.intercept_),
                    ("probe.feature_mean", probe.feature_mean_),
                    ("probe.feature_scale", probe.feature_scale_)]
    header["meta"] = meta or {}
    directory = []
    offset = 0
    buffers = []
    for name, arr in entries:
        code = _dtype_code(arr)
        buf = np.ascontiguousarray(arr, dtype=DTYPES[code]).tobytes()
        directory.append({"name": name, "dtype": code, "shape": list(arr.shape),
                          "offset": offset, "nbytes": len(buf)})
        buffers.append(buf)
        offset += len(buf)
    header["tensors"] = directory
    text = json.dumps(header, indent=1)
    with open(path, "wb") as fh:
        fh.write(text.encode("utf-8"))
        fh.write(b"\n\n")
        for buf in buffers:
            fh.write(buf)


@dataclass
class Checkpoint:
    header: dict
    encoder: object = None
    head: object = None
    projector: object = None
    adapter: object = None
    probe: object = None

    @property
    def meta(self) -> dict:
        return self.header.get("meta", {})


def read_header(path: str):
    with open(path, "rb") as fh:
        blob = fh.read()
    end = blob.find(b"\n\n")
    if end < 0:
        raise CheckpointError(f"{path}: header terminator not found")
    try:
        header = json.loads(blob[:end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable header ({exc})") from None
    if header.get("format") != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a tsmantis checkpoint")
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"{path}: checkpoint version {header.get('version')!r}, "
            f"this reader handles {CHECKPOINT_VERSION}")
    unknown = set(header) - HEADER_KEYS
    if unknown:
        raise CheckpointVersionError(f"{path}: unknown header fields {sorted(unknown)}")
    return header, blob[end + 2:]


def load_checkpoint(path: str) -> Checkpoint:
    header, payload = read_header(path)
    tensors: Dict[str, np.ndarray] = {}
    for entry in header["tensors"]:
        name = entry["name"]
        start, nbytes = entry["offset"], entry["nbytes"]
        dtype = DTYPES[entry["dtype"]]
        expected = int(np.prod(entry["shape"], dtype=np.int64)) * dtype.itemsize
        if nbytes != expected:
            raise CheckpointError(f"{path}: tensor {name} declares {nbytes} bytes for shape "
                                  f"{entry['shape']}")
        if start + nbytes > len(payload):
            raise CheckpointError(f"{path}: payload truncated, tensor {name} is incomplete")
        tensors[name] = np.frombuffer(payload, dtype=dtype, count=nbytes // dtype.itemsize,
                                      offset=start).reshape(entry["shape"]).copy()

    try:
        return _rebuild(header, tensors)
    except (KeyError, ValueError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"{path}: inconsistent tensors ({exc})") from None


def _rebuild(header: dict, tensors: Dict[str, np.ndarray]) -> Checkpoint:
    from .adapters import LinearCombiner, _fitted
    from .finetune import LinearProbe
    from .model import ClassificationHead, MantisConfig, MantisEncoder, Projector

    def section(prefix: str) -> Dict[str, np.ndarray]:
        return {k[len(prefix) + 1:]: v for k, v in tensors.items() if k.startswith(prefix + ".")}

    ckpt = Checkpoint(header)
    if "config" in header:
        ckpt.encoder = MantisEncoder(MantisConfig.from_dict(header["config"]))
        ckpt.encoder.load_state_dict(section("encoder"))
    if "head" in header:
        h = header["head"]
        ckpt.head = ClassificationHead(h["input_dim"], h["num_classes"])
        ckpt.head.load_state_dict(section("head"))
    if "projector" in header:
        p = header["projector"]
        ckpt.projector = Projector(p["dim"], p["proj_dim"])
        ckpt.projector.load_state_dict(section("projector"))
    if "adapter" in header:
        a = header["adapter"]
        if a["kind"] == "lcomb":
            ckpt.adapter = LinearCombiner(a["d"], a["d_new"], weight=tensors["adapter.weight"])
            ckpt.adapter.weight.data = tensors["adapter.weight"]
        else:
            indices = np.array(a["indices"]) if "indices" in a else None
            ckpt.adapter = _fitted(a["kind"], a["d"], a["d_new"], tensors["adapter.components"],
                                   tensors.get("adapter.mean"), indices)
    if "probe" in header:
        p = header["probe"]
        probe = LinearProbe(l2=p["l2"])
        probe.coef_ = tensors["probe.coef"]
        probe.intercept_ = tensors["probe.intercept"]
        probe.feature_mean_ = tensors["probe.feature_mean"]
        probe.feature_scale_ = tensors["probe.feature_scale"]
        probe.classes_ = np.arange(p["num_classes"])
        ckpt.probe = probe
    return ckpt
