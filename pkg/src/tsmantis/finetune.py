"""Downstream classification on top of the encoder.

Regimes:

``probe``
    frozen embeddings + multinomial logistic regression (:class:`LinearProbe`).
``head``
    frozen encoder, a layer-norm + linear head trained by cross-entropy.
``scratch``
    freshly initialised encoder trained jointly with the head.
``full``
    pre-trained encoder trained jointly with the head.

Multichannel inputs are encoded channel by channel and the embeddings are
concatenated in channel order, optionally after a channel adapter.
"""
from __future__ import annotations

import copy
import logging
import warnings
from dataclasses import dataclass, field
from typing import Callable, List, Optional

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.model_selection import train_test_split
from sklearn.utils.validation import check_is_fitted

from .adapters import ChannelAdapter, LinearCombiner, apply_adapter, canonical_kind, \
    default_d_new
from .autograd import (AdamW, DimensionError, LrSchedule, Tensor, cross_entropy, lr_at,
                       no_grad)
from .calibration import softmax_np
from .data_io import TimeSeriesDataset
from .model import ClassificationHead, MantisEncoder, get_config
from .preprocessing import resize_linear
from .validation import check_series

logger = logging.getLogger(__name__)

REGIMES = ("probe", "head", "scratch", "full")


@dataclass
class FinetuneConfig:
    regime: str = "full"
    lr: float = 2e-4
    epochs: int = 100
    batch_size: int = 64
    weight_decay: float = 0.05
    warmup_epochs: int = 10
    seed: int = 0
    probe_l2: float = 1e-3

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ValueError(f"unknown regime {self.regime!r}; choose from {REGIMES}")
        if self.lr < 0:
            raise ValueError("lr must be non-negative")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")


@dataclass
class Prediction:
    probs: np.ndarray
    label: int
    confidence: float


@dataclass
class FinetuneResult:
    encoder: MantisEncoder
    head: Optional[ClassificationHead] = None
    probe: Optional["LinearProbe"] = None
    adapter: object = None
    history: List[dict] = field(default_factory=list)

    def records(self, split: str) -> List[dict]:
        return [r for r in self.history if r["split"] == split]

    def last(self, split: str) -> Optional[dict]:
        rows = self.records(split)
        return rows[-1] if rows else None

    def best(self, split: str) -> Optional[dict]:
        rows = self.records(split)
        # earliest epoch wins ties
        return max(rows, key=lambda r: (r["accuracy"], -r["epoch"])) if rows else None


# ----------------------------------------------------------------------
# inputs and embeddings
def prepare_inputs(X, seq_len: int, adapter=None) -> np.ndarray:
    """Resize every channel to ``seq_len`` and apply a fixed (non-trainable) adapter."""
    X = check_series(X)
    if X.shape[-1] != seq_len:
        X = resize_linear(X, seq_len)
    if adapter is not None and not isinstance(adapter, LinearCombiner):
        expected = adapter.n_channels_in_
        if X.shape[1] != expected:
            raise DimensionError(f"adapter expects {expected} channels, got {X.shape[1]}")
        X = apply_adapter(adapter, X)
    return X


def extract_embeddings(encoder: MantisEncoder, X, adapter=None,
                       batch_size: int = 256) -> np.ndarray:
    """``(n, d_eff * dim)`` frozen embeddings, channel-major."""
    X = prepare_inputs(X, encoder.config.seq_len, adapter)
    if isinstance(adapter, LinearCombiner):
        if X.shape[1] != adapter.d:
            raise DimensionError(f"combiner expects {adapter.d} channels, got {X.shape[1]}")
        X = apply_adapter(adapter, X)
    n, d, length = X.shape
    flat = encoder.embed(X.reshape(n * d, length), batch_size)
    return flat.reshape(n, d * encoder.config.dim)


def forward_logits(encoder: MantisEncoder, head: ClassificationHead, X: np.ndarray,
                   combiner: Optional[LinearCombiner] = None, train: bool = False,
                   rng: Optional[np.random.Generator] = None) -> Tensor:
    """Differentiable logits for a prepared ``(batch, d, seq_len)`` block."""
    x = Tensor(X, dtype=head.linear.weight.dtype)
    if combiner is not None:
        x = combiner(x)
    batch, d, length = x.shape
    z = encoder(x.reshape(batch * d, length), train, rng)
    return head(z.reshape(batch, d * encoder.config.dim))


# ----------------------------------------------------------------------
# linear probe
class LinearProbe(ClassifierMixin, BaseEstimator):
    """Multinomial logistic regression by full-batch gradient descent.

    Features are standardised; the step size is the inverse of a Lipschitz
    bound on the gradient, so iterations decrease the penalised objective.
    Stops once the gradient norm drops below ``tol`` or after ``max_iter``.
    """

    def __init__(self, l2: float = 1e-3, tol: float = 1e-4, max_iter: int = 5000):
        self.l2 = l2
        self.tol = tol
        self.max_iter = max_iter

    def fit(self, X, y):
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y)
        if not np.all(np.isfinite(X)):
            raise ValueError("probe features must be finite")
        self.classes_, y_idx = np.unique(y, return_inverse=True)
        k = len(self.classes_)
        if k < 2:
            raise ValueError("linear probe needs at least two classes in the training set")
        n, p = X.shape
        if n < k:
            raise ValueError(f"need at least as many samples ({n}) as classes ({k})")
        self.feature_mean_ = X.mean(axis=0)
        scale = X.std(axis=0)
        self.feature_scale_ = np.where(scale > 1e-12, scale, 1.0)
        Xs = (X - self.feature_mean_) / self.feature_scale_
        Y = np.eye(k)[y_idx]
        aug = np.hstack([Xs, np.ones((n, 1))])
        lipschitz = 0.5 * np.linalg.eigvalsh(aug.T @ aug / n)[-1] + self.l2
        step = 1.0 / lipschitz
        W = np.zeros((p, k))
        b = np.zeros(k)
        self.n_iter_ = self.max_iter
        for it in range(self.max_iter):
            P = softmax_np(Xs @ W + b)
            R = (P - Y) / n
            gW = Xs.T @ R + self.l2 * W
            gb = R.sum(axis=0)
            if np.sqrt((gW * gW).sum() + (gb * gb).sum()) < self.tol:
                self.n_iter_ = it
                break
            W -= step * gW
            b -= step * gb
        self.coef_ = W
        self.intercept_ = b
        return self

    def decision_function(self, X) -> np.ndarray:
        check_is_fitted(self, "coef_")
        Xs = (np.asarray(X, dtype=np.float64) - self.feature_mean_) / self.feature_scale_
        return Xs @ self.coef_ + self.intercept_

    def predict_proba(self, X) -> np.ndarray:
        return softmax_np(self.decision_function(X))

    def predict(self, X) -> np.ndarray:
        return self.classes_[np.argmax(self.decision_function(X), axis=1)]


def linear_probe_fit(embeddings, labels, l2: float = 1e-3) -> LinearProbe:
    return LinearProbe(l2=l2).fit(embeddings, labels)


# ----------------------------------------------------------------------
# splitting
def train_val_split(dataset: TimeSeriesDataset, fraction: float = 0.8, seed: int = 0):
    """Stratified ``fraction`` / ``1 - fraction`` split; falls back to unstratified."""
    n = len(dataset)
    if n < 5:
        raise ValueError(f"need at least 5 samples to split, got {n}")
    index = np.arange(n)
    stratify = dataset.y
    if stratify is not None:
        counts = np.bincount(stratify)
        if counts[counts > 0].min() < 2:
            warnings.warn("a class has a single sample; splitting without stratification")
            stratify = None
    try:
        train_idx, val_idx = train_test_split(index, train_size=fraction, random_state=seed,
                                              stratify=stratify)
    except ValueError:
        warnings.warn("stratified split impossible; splitting without stratification")
        train_idx, val_idx = train_test_split(index, train_size=fraction, random_state=seed)
    return dataset.subset(np.sort(train_idx)), dataset.subset(np.sort(val_idx))


# ----------------------------------------------------------------------
# training
def _evaluate_logits(encoder, head, X, combiner, batch_size: int) -> np.ndarray:
    out = []
    with no_grad():
        for start in range(0, len(X), batch_size):
            out.append(forward_logits(encoder, head, X[start:start + batch_size], combiner).data)
    return np.concatenate(out).astype(np.float64)


def _metrics(logits: np.ndarray, y: np.ndarray) -> dict:
    logp = np.log(np.clip(softmax_np(logits), 1e-300, None))
    loss = float(-logp[np.arange(len(y)), y].mean())
    acc = float((np.argmax(logits, axis=1) == y).mean())
    return {"loss": loss, "accuracy": acc}


def finetune(encoder: MantisEncoder, dataset: TimeSeriesDataset, config: FinetuneConfig,
             val: Optional[TimeSeriesDataset] = None, test: Optional[TimeSeriesDataset] = None,
             adapter=None, num_classes: Optional[int] = None,
             callback: Optional[Callable[[dict], None]] = None) -> FinetuneResult:
    """Train a classifier under ``config.regime``; inputs are never mutated.

    ``adapter`` may be a fitted :class:`ChannelAdapter`, a
    :class:`LinearCombiner` (trained jointly), or None.  Per-epoch records
    ``{"epoch", "split", "loss", "accuracy"}`` are appended to the history for
    ``train`` and, when given, ``val`` and ``test``.
    """
    if len(dataset) == 0:
        raise ValueError("empty training set")
    if dataset.y is None:
        raise ValueError("fine-tuning needs labels")
    k = num_classes or dataset.num_classes
    if dataset.y.min() < 0 or dataset.y.max() >= k:
        raise ValueError(f"labels must lie in [0, {k})")
    seq_len = encoder.config.seq_len
    combiner = None
    if isinstance(adapter, LinearCombiner):
        combiner = copy.deepcopy(adapter)
        fixed = None
    else:
        fixed = adapter
    X = prepare_inputs(dataset.X, seq_len, fixed)
    y = dataset.y
    splits = {name: (prepare_inputs(ds.X, seq_len, fixed), ds.y)
              for name, ds in (("val", val), ("test", test)) if ds is not None}

    if config.regime == "scratch":
        encoder = MantisEncoder(encoder.config, seed=config.seed)
    elif config.regime == "full":
        encoder = copy.deepcopy(encoder)

    result = FinetuneResult(encoder=encoder, adapter=combiner if combiner else fixed)

    def emit(record: dict) -> None:
        result.history.append(record)
        if callback is not None:
            callback(record)

    if config.regime == "probe":
        if combiner is not None:
            raise ValueError("the probe regime cannot train an lcomb adapter")
        probe = LinearProbe(l2=config.probe_l2).fit(extract_embeddings(encoder, X), y)
        result.probe = probe
        emit({"epoch": 0, "split": "train",
              **_metrics(probe.decision_function(extract_embeddings(encoder, X)), y)})
        for name, (Xs, ys) in splits.items():
            emit({"epoch": 0, "split": name,
                  **_metrics(probe.decision_function(extract_embeddings(encoder, Xs)), ys)})
        return result

    d_eff = combiner.d_new if combiner is not None else X.shape[1]
    head = ClassificationHead(d_eff * encoder.config.dim, k, seed=config.seed)
    dtype = encoder.parameters()[0].dtype
    if head.parameters()[0].dtype != dtype:
        head.astype(dtype)
    result.head = head
    trainable = list(head.parameters())
    if combiner is not None:
        trainable += combiner.parameters()
    if config.regime in ("scratch", "full"):
        trainable += encoder.parameters()
    optimizer = AdamW(trainable, lr=config.lr, weight_decay=config.weight_decay)
    schedule = LrSchedule(config.lr, config.epochs,
                          min(config.warmup_epochs, config.epochs - 1))

    # frozen encoder and no trainable adapter: embeddings are computed once
    cached = None
    if config.regime == "head" and combiner is None:
        cached = extract_embeddings(encoder, X)
        cached_splits = {name: extract_embeddings(encoder, Xs) for name, (Xs, _) in
                         splits.items()}

    def batch_logits(index: np.ndarray) -> Tensor:
        if cached is not None:
            return head(Tensor(cached[index], dtype=dtype))
        return forward_logits(encoder, head, X[index], combiner)

    n = len(X)
    for epoch in range(config.epochs):
        optimizer.lr = lr_at(schedule, epoch)
        order = np.random.default_rng([config.seed, epoch]).permutation(n)
        sample_loss = np.zeros(n)
        sample_hit = np.zeros(n)
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            optimizer.zero_grad()
            logits = batch_logits(idx)
            per_sample = cross_entropy(logits, y[idx], reduction="none")
            loss = per_sample.mean()
            loss.backward()
            optimizer.step()
            sample_loss[idx] = per_sample.data
            sample_hit[idx] = np.argmax(logits.data, axis=1) == y[idx]
        emit({"epoch": epoch, "split": "train", "loss": float(sample_loss.sum() / n),
              "accuracy": float(sample_hit.sum() / n)})
        for name, (Xs, ys) in splits.items():
            if cached is not None:
                with no_grad():
                    logits = head(Tensor(cached_splits[name], dtype=dtype)).data
            else:
                logits = _evaluate_logits(encoder, head, Xs, combiner, config.batch_size)
            emit({"epoch": epoch, "split": name, **_metrics(logits.astype(np.float64), ys)})
    return result


# ----------------------------------------------------------------------
# inference
def predict_logits(result: FinetuneResult, X, batch_size: int = 256) -> np.ndarray:
    encoder = result.encoder
    fixed = None if isinstance(result.adapter, LinearCombiner) else result.adapter
    combiner = result.adapter if isinstance(result.adapter, LinearCombiner) else None
    Xp = prepare_inputs(X, encoder.config.seq_len, fixed)
    if result.probe is not None:
        return result.probe.decision_function(extract_embeddings(encoder, Xp, combiner))
    return _evaluate_logits(encoder, result.head, Xp, combiner, batch_size)


def predict(encoder: MantisEncoder, head, series, adapter=None) -> Prediction:
    """Class probabilities, label (lowest index among ties) and confidence for one series."""
    series = np.asarray(series, dtype=np.float64)
    X = series.reshape(1, 1, -1) if series.ndim == 1 else series[None]
    result = FinetuneResult(encoder=encoder, adapter=adapter)
    if isinstance(head, LinearProbe):
        result.probe = head
    else:
        result.head = head
    probs = softmax_np(predict_logits(result, X))[0]
    label = int(np.argmax(probs))
    return Prediction(probs=probs, label=label, confidence=float(probs[label]))


# ----------------------------------------------------------------------
# estimator front ends
def _build_adapter(kind: str, d_new: Optional[int], d: int, seed: int):
    if kind in (None, "none"):
        return None
    kind = canonical_kind(kind)
    if kind == "lcomb":
        return LinearCombiner(d, d_new or default_d_new(d, kind), seed=seed)
    return ChannelAdapter(kind=kind, d_new=d_new, random_state=seed)


class MantisEmbedder(TransformerMixin, BaseEstimator):
    """Frozen-encoder features; ``fit`` only fits the (unsupervised) adapter."""

    def __init__(self, encoder: Optional[MantisEncoder] = None, adapter: str = "none",
                 d_new: Optional[int] = None, seed: int = 0, batch_size: int = 256):
        self.encoder = encoder
        self.adapter = adapter
        self.d_new = d_new
        self.seed = seed
        self.batch_size = batch_size

    def fit(self, X, y=None):
        X = check_series(X)
        self.encoder_ = self.encoder or MantisEncoder(seed=self.seed)
        self.adapter_ = _build_adapter(self.adapter, self.d_new, X.shape[1], self.seed)
        if isinstance(self.adapter_, ChannelAdapter):
            self.adapter_.fit(prepare_inputs(X, self.encoder_.config.seq_len))
        return self

    def transform(self, X):
        check_is_fitted(self, "encoder_")
        return extract_embeddings(self.encoder_, X, self.adapter_, self.batch_size)


class MantisClassifier(ClassifierMixin, BaseEstimator):
    """scikit-learn classifier wrapping :func:`finetune`.

    ``encoder`` is the (pre-trained) starting point; when None a fresh encoder
    of the ``arch`` preset is used, which makes ``full`` equivalent to ``scratch``.
    """

    def __init__(self, encoder: Optional[MantisEncoder] = None, arch: str = "mantis",
                 regime: str = "full", adapter: str = "none", d_new: Optional[int] = None,
                 lr: float = 2e-4, epochs: int = 100, batch_size: int = 64,
                 weight_decay: float = 0.05, warmup_epochs: int = 10, seed: int = 0):
        self.encoder = encoder
        self.arch = arch
        self.regime = regime
        self.adapter = adapter
        self.d_new = d_new
        self.lr = lr
        self.epochs = epochs
        self.batch_size = batch_size
        self.weight_decay = weight_decay
        self.warmup_epochs = warmup_epochs
        self.seed = seed

    def fit(self, X, y):
        X = check_series(X)
        self.classes_, y_idx = np.unique(np.asarray(y), return_inverse=True)
        encoder = self.encoder or MantisEncoder(get_config(self.arch), seed=self.seed)
        adapter = _build_adapter(self.adapter, self.d_new, X.shape[1], self.seed)
        if isinstance(adapter, ChannelAdapter):
            adapter.fit(prepare_inputs(X, encoder.config.seq_len))
        config = FinetuneConfig(regime=self.regime, lr=self.lr, epochs=self.epochs,
                                batch_size=self.batch_size, weight_decay=self.weight_decay,
                                warmup_epochs=self.warmup_epochs, seed=self.seed)
        data = TimeSeriesDataset(X, y_idx)
        self.result_ = finetune(encoder, data, config, adapter=adapter,
                                num_classes=len(self.classes_))
        self.history_ = self.result_.history
        return self

    def decision_function(self, X) -> np.ndarray:
        check_is_fitted(self, "result_")
        return predict_logits(self.result_, check_series(X))

    def predict_proba(self, X) -> np.ndarray:
        return softmax_np(self.decision_function(X))

    def predict(self, X) -> np.ndarray:
        return self.classes_[np.argmax(self.decision_function(X), axis=1)]
