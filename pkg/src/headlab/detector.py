"""Per-object presence detector over mid-run captures.

Each row of a design matrix is one (sample, target object) pair.  The six
base features summarize the two capture channels at a single decision step:

* ``attn_max``, ``attn_mean`` - peak and bulk of the object's attention map.
* ``attn_topmass`` - fraction of total attention mass in the top 5% pixels,
  a peakedness measure that is scale-free.
* ``pfi_match`` - best matched-filter response of the predicted final image
  against the object's placed templates (1.0 when the object is cleanly
  rendered at some candidate position, near 0.0 when missing).
* ``pfi_match_gap`` - best minus second-best response, which separates a
  committed placement from mass smeared across candidate positions.
* ``pfi_local_energy`` - mean squared intensity of the predicted final image
  in a 5x5 patch at the best-matching position.

Variants: ``combined`` uses all six; ``attention_only`` zeroes the three
predicted-final-image slots (same dimensionality, so weights stay
comparable); ``multi_timestep`` concatenates one six-feature block per
decision step, ordered by step label.

Inputs are squeezed through float32 before any arithmetic so that features
computed live during a run match features computed from round-tripped
tensor files bit for bit.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import expit

from .dataset import DatasetManifest, load_captures
from .errors import (DegenerateLabels, DimensionMismatch, NonFiniteLoss,
                     UsageError)
from .scene import ObjectSpec

FEATURE_NAMES = ("attn_max", "attn_mean", "attn_topmass",
                 "pfi_match", "pfi_match_gap", "pfi_local_energy")
VARIANTS = ("combined", "attention_only", "multi_timestep")
TOP_MASS_FRACTION = 0.05
LOCAL_PATCH = 5
MODEL_VERSION = 1

_ATTENTION_SLOTS = (0, 1, 2)
_PFI_SLOTS = (3, 4, 5)


def extract_features(pfi: np.ndarray, attention: np.ndarray,
                     spec: ObjectSpec) -> np.ndarray:
    """Six-feature summary of one object at one capture."""
    pfi = np.asarray(pfi, dtype=np.float32).astype(np.float64)
    attention = np.asarray(attention, dtype=np.float32).astype(np.float64)
    if pfi.shape != attention.shape:
        raise DimensionMismatch(
            f"pfi shape {pfi.shape} != attention shape {attention.shape}")

    flat = attention.ravel()
    total = float(flat.sum())
    k = max(1, round(TOP_MASS_FRACTION * flat.size))
    if total > 0.0:
        top = np.sort(flat)[-k:]
        topmass = float(top.sum()) / total
    else:
        topmass = 0.0

    responses = spec.filter_responses(pfi)
    order = np.argsort(responses)
    best = int(order[-1])
    match = float(responses[best])
    gap = float(responses[best] - responses[order[-2]]) if responses.size > 1 else 0.0

    r, c = spec.candidate_positions[best]
    h = LOCAL_PATCH // 2
    patch = pfi[max(0, r - h):r + h + 1, max(0, c - h):c + h + 1]
    local_energy = float(np.mean(patch ** 2))

    return np.array([float(flat.max()), float(flat.mean()), topmass,
                     match, gap, local_energy])


def feature_names_for(variant: str, steps) -> tuple[str, ...]:
    if variant not in VARIANTS:
        raise UsageError(f"unknown detector variant {variant!r}; have {VARIANTS}")
    steps = tuple(sorted(int(u) for u in steps))
    if not steps:
        raise UsageError("at least one decision step is required")
    if variant == "multi_timestep":
        return tuple(f"{name}@{u}" for u in steps for name in FEATURE_NAMES)
    if len(steps) != 1:
        raise UsageError(f"variant {variant!r} takes exactly one decision step")
    return FEATURE_NAMES


def _variant_row(blocks: dict[int, np.ndarray], variant: str,
                 steps: tuple[int, ...]) -> np.ndarray:
    if variant == "multi_timestep":
        return np.concatenate([blocks[u] for u in steps])
    row = blocks[steps[0]].copy()
    if variant == "attention_only":
        row[list(_PFI_SLOTS)] = 0.0
    return row


@dataclass(frozen=True)
class DesignMatrix:
    """Feature matrix plus row bookkeeping for per-object evaluation."""

    x: np.ndarray
    y: np.ndarray
    sample_ids: tuple[str, ...]
    object_ids: tuple[str, ...]
    feature_names: tuple[str, ...]
    variant: str
    steps: tuple[int, ...]

    def __post_init__(self):
        if self.x.shape[0] != self.y.shape[0]:
            raise DimensionMismatch(
                f"{self.x.shape[0]} feature rows vs {self.y.shape[0]} labels")
        if self.x.shape[1] != len(self.feature_names):
            raise DimensionMismatch(
                f"{self.x.shape[1]} columns vs {len(self.feature_names)} names")


def build_design_matrix(root, manifest: DatasetManifest,
                        catalog: dict[str, ObjectSpec], steps,
                        variant: str = "combined",
                        split: str = "train") -> DesignMatrix:
    """Assemble (sample, object) rows for one split from stored captures."""
    names = feature_names_for(variant, steps)
    steps = tuple(sorted(int(u) for u in steps))
    missing = set(steps) - set(manifest.config.critical_steps)
    if missing:
        raise UsageError(f"steps {sorted(missing)} were not captured; "
                         f"captured: {list(manifest.config.critical_steps)}")
    rows, labels, sample_ids, object_ids = [], [], [], []
    for sample in manifest.samples_for_split(split):
        captures = load_captures(root, sample.sample_id, steps, sample.targets)
        for obj in sample.targets:
            blocks = {u: extract_features(captures[u]["pfi"],
                                          captures[u]["attn"][obj],
                                          catalog[obj])
                      for u in steps}
            rows.append(_variant_row(blocks, variant, steps))
            labels.append(sample.labels[obj])
            sample_ids.append(sample.sample_id)
            object_ids.append(obj)
    if not rows:
        raise DegenerateLabels(f"split {split!r} produced no rows")
    return DesignMatrix(x=np.array(rows), y=np.array(labels, dtype=np.int64),
                        sample_ids=tuple(sample_ids),
                        object_ids=tuple(object_ids),
                        feature_names=names, variant=variant, steps=steps)


def live_features(pfi_by_step: dict[int, np.ndarray],
                  attn_by_step: dict[int, np.ndarray], spec: ObjectSpec,
                  variant: str, steps) -> np.ndarray:
    """Single feature row from in-memory captures (runtime path)."""
    steps = tuple(sorted(int(u) for u in steps))
    blocks = {u: extract_features(pfi_by_step[u], attn_by_step[u], spec)
              for u in steps}
    return _variant_row(blocks, variant, steps)


@dataclass(frozen=True)
class TrainResult:
    weights: np.ndarray
    bias: float
    final_loss: float
    epochs: int


def train_logistic(x: np.ndarray, y: np.ndarray, lr: float = 0.1,
                   epochs: int = 500, l2: float = 1e-4) -> TrainResult:
    """Full-batch gradient descent on mean cross-entropy.

    The l2 penalty applies to the weights only, never the bias, and the
    gradient is averaged over rows so the learning rate is insensitive to
    the dataset size.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 2 or y.ndim != 1 or x.shape[0] != y.shape[0]:
        raise DimensionMismatch(f"bad shapes x{x.shape} y{y.shape}")
    classes = np.unique(y)
    if not np.array_equal(classes, [0.0, 1.0]):
        raise DegenerateLabels(f"need both classes present, got {classes.tolist()}")
    n = x.shape[0]
    w = np.zeros(x.shape[1])
    b = 0.0
    loss = np.inf
    for _ in range(epochs):
        logits = x @ w + b
        p = expit(logits)
        err = p - y
        w -= lr * (x.T @ err / n + l2 * w)
        b -= lr * float(err.mean())
    logits = x @ w + b
    loss = float(np.mean(np.logaddexp(0.0, logits) - y * logits)
                 + 0.5 * l2 * float(w @ w))
    if not np.isfinite(loss) or not np.all(np.isfinite(w)):
        raise NonFiniteLoss(f"training diverged (loss={loss})")
    return TrainResult(weights=w, bias=b, final_loss=loss, epochs=epochs)


@dataclass
class DetectorModel:
    """Standardizing logistic scorer with a decision threshold."""

    variant: str
    steps: tuple[int, ...]
    feature_names: tuple[str, ...]
    mean: np.ndarray
    scale: np.ndarray
    weights: np.ndarray
    bias: float
    threshold: float = 0.5

    def scores(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if x.shape[1] != self.weights.shape[0]:
            raise DimensionMismatch(
                f"{x.shape[1]} features, model expects {self.weights.shape[0]}")
        z = (x - self.mean) / self.scale
        return expit(z @ self.weights + self.bias)

    def predict(self, x: np.ndarray) -> np.ndarray:
        """Presence verdicts; scores on the threshold count as present."""
        return (self.scores(x) >= self.threshold).astype(np.int64)

    def save(self, path) -> None:
        payload = {
            "format_version": MODEL_VERSION,
            "variant": self.variant,
            "steps": list(self.steps),
            "feature_names": list(self.feature_names),
            "mean": self.mean.tolist(),
            "scale": self.scale.tolist(),
            "weights": self.weights.tolist(),
            "bias": self.bias,
            "threshold": self.threshold,
        }
        Path(path).write_text(json.dumps(payload, sort_keys=True, indent=1)
                              + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "DetectorModel":
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
        if payload.get("format_version") != MODEL_VERSION:
            raise ValueError(f"unsupported model version in {path}")
        return cls(
            variant=payload["variant"],
            steps=tuple(int(u) for u in payload["steps"]),
            feature_names=tuple(payload["feature_names"]),
            mean=np.array(payload["mean"]),
            scale=np.array(payload["scale"]),
            weights=np.array(payload["weights"]),
            bias=float(payload["bias"]),
            threshold=float(payload["threshold"]),
        )


def fit_detector(design: DesignMatrix, lr: float = 0.1, epochs: int = 500,
                 l2: float = 1e-4, threshold: float = 0.5) -> DetectorModel:
    """Standardize on the training split, then run gradient descent."""
    mean = design.x.mean(axis=0)
    std = design.x.std(axis=0)
    scale = np.where(std < 1e-12, 1.0, std)
    result = train_logistic((design.x - mean) / scale, design.y,
                            lr=lr, epochs=epochs, l2=l2)
    return DetectorModel(variant=design.variant, steps=design.steps,
                         feature_names=design.feature_names, mean=mean,
                         scale=scale, weights=result.weights,
                         bias=result.bias, threshold=threshold)


@dataclass(frozen=True)
class ObjectCounts:
    """Confusion counts where the positive class is 'object present'."""

    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    @property
    def recall(self) -> float | None:
        pos = self.tp + self.fn
        return self.tp / pos if pos else None

    @property
    def precision(self) -> float | None:
        flagged = self.tp + self.fp
        return self.tp / flagged if flagged else None

    @property
    def true_negative_rate(self) -> float | None:
        neg = self.tn + self.fp
        return self.tn / neg if neg else None

    @property
    def accuracy(self) -> float | None:
        return (self.tp + self.tn) / self.total if self.total else None


@dataclass(frozen=True)
class ConfusionReport:
    """Pooled and per-object confusion for one evaluation split."""

    pooled: ObjectCounts
    per_object: dict[str, ObjectCounts]

    def to_dict(self) -> dict:
        def counts(c: ObjectCounts) -> dict:
            return {"tp": c.tp, "fp": c.fp, "tn": c.tn, "fn": c.fn,
                    "recall": c.recall, "precision": c.precision,
                    "true_negative_rate": c.true_negative_rate,
                    "accuracy": c.accuracy}
        return {"pooled": counts(self.pooled),
                "per_object": {k: counts(v)
                               for k, v in sorted(self.per_object.items())}}


def merge_counts(counts) -> ObjectCounts:
    """Pool confusion counts over a group of objects."""
    counts = list(counts)
    return ObjectCounts(tp=sum(c.tp for c in counts),
                        fp=sum(c.fp for c in counts),
                        tn=sum(c.tn for c in counts),
                        fn=sum(c.fn for c in counts))


def _counts(y_true: np.ndarray, y_pred: np.ndarray) -> ObjectCounts:
    tp = int(np.sum((y_pred == 1) & (y_true == 1)))
    fp = int(np.sum((y_pred == 1) & (y_true == 0)))
    tn = int(np.sum((y_pred == 0) & (y_true == 0)))
    fn = int(np.sum((y_pred == 0) & (y_true == 1)))
    return ObjectCounts(tp=tp, fp=fp, tn=tn, fn=fn)


def evaluate_detector(model: DetectorModel,
                      design: DesignMatrix) -> ConfusionReport:
    pred = model.predict(design.x)
    objects = np.array(design.object_ids)
    per_object = {}
    for obj in sorted(set(design.object_ids)):
        mask = objects == obj
        per_object[obj] = _counts(design.y[mask], pred[mask])
    return ConfusionReport(pooled=_counts(design.y, pred),
                           per_object=per_object)


def calibrate_threshold(scores: np.ndarray, y: np.ndarray,
                        target_recall: float) -> float:
    """Largest threshold whose recall still reaches the target.

    With verdicts decided by ``score >= threshold``, setting the threshold
    to the k-th largest positive score yields recall exactly k/n_pos, so
    the answer is that order statistic with ``k = ceil(target * n_pos)``.
    """
    if not (0.0 < target_recall <= 1.0):
        raise UsageError("target recall must be in (0, 1]")
    scores = np.asarray(scores, dtype=np.float64)
    y = np.asarray(y)
    pos = np.sort(scores[y == 1])[::-1]
    if pos.size == 0:
        raise DegenerateLabels("cannot calibrate recall with no positive rows")
    k = int(np.ceil(target_recall * pos.size))
    return float(pos[k - 1])
