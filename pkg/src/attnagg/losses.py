"""Loss machinery for imbalanced multi-label training.

Three pieces compose the training objective:

* a class/instance weighted focal loss on the primary logits, with
  per-attribute weights w_c = exp(-a_c) from the training-split priors a_c
  and a gamma exponent that down-weights easy examples;
* per-scale attention losses: per-sample binary cross-entropy scaled by
  (1 + std_s), where std_s measures how much that sample's predicted
  probabilities have fluctuated over the last few epochs;
* their plain sum.

All losses sum over attributes and average over the batch, so magnitudes are
batch-size invariant. Logits enter through softplus/sigmoid in their stable
forms, so values stay finite for |logit| up to well past 100.

The (1 + std) factor is a constant in backward: it is a curriculum signal
read from past epochs, not a differentiable path.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from attnagg.tensor import ShapeMismatch, Tensor, sigmoid, softplus


class NonBinaryLabel(ValueError):
    """Labels must be exactly 0 or 1."""


class PriorOutOfRange(ValueError):
    """Class priors must lie in [0, 1)."""


class DuplicateEpoch(ValueError):
    """Each epoch may be recorded into the history once."""


class UnknownSample(KeyError):
    """No history stored for the requested sample id."""


@dataclass
class ClassWeights:
    priors: np.ndarray  # a_c, per attribute
    weights: np.ndarray  # w_c = exp(-a_c)


@dataclass
class FocalConfig:
    gamma: float = 0.5

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError("gamma must be non-negative")


def class_weights(priors) -> ClassWeights:
    """w_c = exp(-a_c). Priors of exactly 0 (attribute never positive) are
    allowed and give weight 1."""
    p = np.asarray(priors, dtype=np.float64)
    if np.any(p < 0.0) or np.any(p >= 1.0):
        raise PriorOutOfRange(f"priors must be in [0, 1), got {p}")
    return ClassWeights(priors=p, weights=np.exp(-p))


def _check_labels(logits: Tensor, labels) -> np.ndarray:
    y = np.asarray(labels, dtype=np.float64)
    if y.shape != logits.shape:
        raise ShapeMismatch(f"labels {y.shape} vs logits {logits.shape}")
    if not np.all((y == 0.0) | (y == 1.0)):
        raise NonBinaryLabel("labels must be 0 or 1")
    return y


def bce_per_sample(logits: Tensor, labels) -> Tensor:
    """Binary cross-entropy summed over attributes, one value per sample.

    Written from logits as y*softplus(-l) + (1-y)*softplus(l), which equals
    -[y log s + (1-y) log(1-s)] without ever forming log of a saturated
    sigmoid.
    """
    y = _check_labels(logits, labels)
    yt = Tensor(y)
    per_elem = yt * softplus(-logits) + Tensor(1.0 - y) * softplus(logits)
    return per_elem.sum(axes=[1])


def bce(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of per-sample binary cross-entropy."""
    return bce_per_sample(logits, labels).mean()


def weighted_focal(logits: Tensor, labels, w: ClassWeights,
                   cfg: FocalConfig) -> Tensor:
    """Class-weighted focal loss.

    Per element: w_c * [ y (1-s)^gamma softplus(-l) + (1-y) s^gamma
    softplus(l) ], summed over attributes, averaged over the batch. With
    gamma = 0 and unit weights this reduces exactly to ``bce``.
    """
    y = _check_labels(logits, labels)
    if w.weights.shape != (logits.shape[1],):
        raise ShapeMismatch(f"weights {w.weights.shape} vs C={logits.shape[1]}")
    s = sigmoid(logits)
    one_minus_s = sigmoid(-logits)  # stable 1 - s, strictly positive
    pos = (one_minus_s ** cfg.gamma) * softplus(-logits)
    neg = (s ** cfg.gamma) * softplus(logits)
    per_elem = Tensor(w.weights) * (Tensor(y) * pos + Tensor(1.0 - y) * neg)
    return per_elem.sum(axes=[1]).mean()


class PredictionHistory:
    """Per (sample, attribute) ring buffer of sigmoid probabilities over the
    last ``window`` epochs.

    ``record_epoch`` stores one probability matrix per epoch; epochs must be
    recorded in strictly increasing order and entries older than the window
    are evicted. Dispersion queries use only epochs strictly before the
    requested one, i.e. the state the training loss could have seen.
    """

    def __init__(self, window: int = 5, burn_in: int = 2,
                 per_attribute: bool = False, bessel: bool = False):
        self.window = window
        self.burn_in = burn_in
        self.per_attribute = per_attribute
        self.bessel = bessel  # sample variance instead of population variance
        self._epochs: list[int] = []
        self._probs: list[np.ndarray] = []  # aligned with _epochs
        self._ids: list[np.ndarray] = []
        self._row_maps: list[dict] = []

    def __len__(self):
        return len(self._epochs)

    @property
    def epochs(self) -> list[int]:
        return list(self._epochs)

    def record_epoch(self, epoch: int, probs, sample_ids) -> None:
        probs = np.asarray(probs, dtype=np.float64)
        sample_ids = np.asarray(sample_ids)
        if probs.ndim != 2 or probs.shape[0] != sample_ids.shape[0]:
            raise ShapeMismatch(f"probs {probs.shape} vs ids {sample_ids.shape}")
        if np.any(probs < 0.0) or np.any(probs > 1.0):
            raise ValueError("probabilities must lie in [0, 1]")
        if self._epochs and epoch <= self._epochs[-1]:
            raise DuplicateEpoch(f"epoch {epoch} already recorded (last is "
                                 f"{self._epochs[-1]})")
        self._epochs.append(int(epoch))
        self._probs.append(probs.copy())
        self._ids.append(sample_ids.copy())
        self._row_maps.append({int(s): i for i, s in enumerate(sample_ids)})
        while len(self._epochs) > self.window:
            for buf in (self._epochs, self._probs, self._ids, self._row_maps):
                buf.pop(0)

    def _stack_for(self, sample_id: int, upto_epoch: int | None) -> np.ndarray:
        rows = []
        for ep, probs, rmap in zip(self._epochs, self._probs, self._row_maps):
            if upto_epoch is not None and ep >= upto_epoch:
                continue
            row = rmap.get(int(sample_id))
            if row is not None:
                rows.append(probs[row])
        if not rows:
            raise UnknownSample(f"no history for sample {sample_id}")
        return np.stack(rows)

    def _std_from_stack(self, stack: np.ndarray) -> np.ndarray:
        """Per-attribute sqrt(var + var^2 / (n - 1)); 0 when n < 2.

        The series is shifted by its first row before the variance; this
        keeps constant series at exactly 0 instead of picking up rounding
        from an inexact mean.
        """
        n = stack.shape[0]
        if n < 2:
            return np.zeros(stack.shape[1])
        v = (stack - stack[0]).var(axis=0, ddof=1 if self.bessel else 0)
        return np.sqrt(v + v * v / (n - 1))

    def std(self, sample_id: int, upto_epoch: int | None = None) -> float:
        """Per-sample dispersion: mean over attributes of the per-attribute
        time standard deviation."""
        return float(self._std_from_stack(
            self._stack_for(sample_id, upto_epoch)).mean())

    def std_matrix(self, sample_ids, upto_epoch: int | None = None) -> np.ndarray:
        """[n, C] per-attribute dispersions for a batch of sample ids."""
        return np.stack([
            self._std_from_stack(self._stack_for(s, upto_epoch))
            for s in np.asarray(sample_ids)])

    def stds(self, sample_ids, upto_epoch: int | None = None) -> np.ndarray:
        return self.std_matrix(sample_ids, upto_epoch).mean(axis=1)

    def has_data(self, upto_epoch: int | None = None) -> bool:
        if upto_epoch is None:
            return bool(self._epochs)
        return any(ep < upto_epoch for ep in self._epochs)

    def save_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["epoch", "sample_id", "attr", "prob"])
            for ep, probs, ids in zip(self._epochs, self._probs, self._ids):
                for row, sid in enumerate(ids):
                    for attr in range(probs.shape[1]):
                        wr.writerow([ep, int(sid), attr,
                                     format(probs[row, attr], ".17g")])

    @classmethod
    def load_csv(cls, path, window: int = 5, burn_in: int = 2,
                 per_attribute: bool = False, bessel: bool = False):
        # insertion order preserved so a save/load/save cycle is bit-exact
        by_epoch: dict[int, dict[int, dict[int, float]]] = {}
        with open(path, newline="") as fh:
            for rec in csv.DictReader(fh):
                by_epoch.setdefault(int(rec["epoch"]), {}).setdefault(
                    int(rec["sample_id"]), {})[int(rec["attr"])] = float(rec["prob"])
        hist = cls(window=window, burn_in=burn_in,
                   per_attribute=per_attribute, bessel=bessel)
        for ep in sorted(by_epoch):
            ids = np.array(list(by_epoch[ep]))
            n_attr = len(by_epoch[ep][int(ids[0])])
            probs = np.array([[by_epoch[ep][int(s)][a] for a in range(n_attr)]
                              for s in ids])
            hist.record_epoch(ep, probs, ids)
        return hist


def sample_std(history: PredictionHistory, sample_id: int) -> float:
    return history.std(sample_id)


def attention_loss(logits: Tensor, labels, history: PredictionHistory | None = None,
                   epoch: int = 0, sample_ids=None) -> Tensor:
    """Variance-weighted cross-entropy for one attention head.

    Before burn-in completes (or with no usable history) this is plain
    ``bce``. Afterwards each sample's cross-entropy is scaled by
    (1 + std_s); the factor is a constant, so gradients are those of a
    per-sample reweighted bce.
    """
    per_sample = bce_per_sample(logits, labels)
    active = (history is not None and epoch >= history.burn_in
              and history.has_data(upto_epoch=epoch))
    if not active:
        return per_sample.mean()
    if sample_ids is None:
        raise ValueError("sample_ids required once history weighting is active")
    if history.per_attribute:
        w = 1.0 + history.std_matrix(sample_ids, upto_epoch=epoch)
        y = _check_labels(logits, labels)
        per_elem = (Tensor(y) * softplus(-logits)
                    + Tensor(1.0 - y) * softplus(logits))
        return (per_elem * Tensor(w)).sum(axes=[1]).mean()
    w = 1.0 + history.stds(sample_ids, upto_epoch=epoch)
    return (per_sample * Tensor(w)).mean()


@dataclass
class LossBreakdown:
    l_w: Tensor
    l_a1: Tensor
    l_a2: Tensor
    total: Tensor
    per_sample_std: np.ndarray = field(default=None, repr=False)

    def items(self) -> dict[str, float]:
        return {"l_w": self.l_w.item(), "l_a1": self.l_a1.item(),
                "l_a2": self.l_a2.item(), "total": self.total.item()}


def total_loss(out, labels, w: ClassWeights, cfg: FocalConfig,
               history: PredictionHistory | None = None, epoch: int = 0,
               sample_ids=None, include_primary: bool = True) -> LossBreakdown:
    """Training objective: weighted focal on the primary logits plus the
    per-scale attention losses. Heads absent from ``out`` contribute 0.

    ``include_primary=False`` drops the focal term (attention-only phase
    while the primary network is frozen).
    """
    zero = Tensor(np.zeros(()))
    l_w = (weighted_focal(out.y_p, labels, w, cfg) if include_primary else zero)
    l_a1 = (attention_loss(out.y_a1, labels, history, epoch, sample_ids)
            if out.y_a1 is not None else zero)
    l_a2 = (attention_loss(out.y_a2, labels, history, epoch, sample_ids)
            if out.y_a2 is not None else zero)
    total = l_w + l_a1 + l_a2
    stds = None
    if (history is not None and sample_ids is not None
            and epoch >= history.burn_in and history.has_data(upto_epoch=epoch)):
        stds = history.stds(sample_ids, upto_epoch=epoch)
    elif sample_ids is not None:
        stds = np.zeros(len(np.asarray(sample_ids)))
    return LossBreakdown(l_w, l_a1, l_a2, total, stds)
