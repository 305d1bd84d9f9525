"""Shared domain types and numeric conventions.

Tables and labels are float64 throughout; the model may run in float32 but
everything handed to metrics is promoted first.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np

SPLITS = ("train", "test")


def as_rng(seed) -> np.random.Generator:
    """Return a numpy Generator for an int seed (or pass a Generator through)."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(int(seed) & 0xFFFFFFFFFFFFFFFF)


def _finite_array(values, dtype, ndim: int, name: str) -> np.ndarray:
    arr = np.array(values, dtype=dtype, copy=True)
    if arr.ndim != ndim:
        raise ValueError(f"{name} must be {ndim}-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class FeatureVector:
    values: np.ndarray

    def __post_init__(self):
        arr = _finite_array(self.values, np.float64, 1, "FeatureVector")
        if arr.size == 0:
            raise ValueError("FeatureVector must be non-empty")
        object.__setattr__(self, "values", arr)

    @property
    def dim(self) -> int:
        return int(self.values.shape[0])


@dataclass(frozen=True)
class FeatureMap:
    """Spatial feature map stored as (h, w, c)."""

    values: np.ndarray

    def __post_init__(self):
        arr = _finite_array(self.values, np.float64, 3, "FeatureMap")
        if min(arr.shape) < 1:
            raise ValueError(f"FeatureMap dims must be >= 1, got {arr.shape}")
        object.__setattr__(self, "values", arr)

    @property
    def h(self) -> int:
        return int(self.values.shape[0])

    @property
    def w(self) -> int:
        return int(self.values.shape[1])

    @property
    def c(self) -> int:
        return int(self.values.shape[2])


@dataclass(frozen=True)
class ConfusionMatrix:
    """counts[i, j] = pixels of true class i predicted as class j."""

    counts: np.ndarray

    def __post_init__(self):
        arr = np.array(self.counts, copy=True)
        if arr.ndim != 2 or arr.shape[0] != arr.shape[1] or arr.shape[0] == 0:
            raise ValueError(f"confusion matrix must be square n x n, got shape {arr.shape}")
        if not np.issubdtype(arr.dtype, np.integer):
            if not np.all(np.isfinite(arr)) or np.any(arr != np.round(arr)):
                raise ValueError("confusion matrix entries must be integers")
        arr = arr.astype(np.int64)
        if np.any(arr < 0):
            raise ValueError("confusion matrix entries must be >= 0")
        arr.setflags(write=False)
        object.__setattr__(self, "counts", arr)

    @property
    def n(self) -> int:
        return int(self.counts.shape[0])

    @property
    def total(self) -> int:
        return int(self.counts.sum())


@dataclass(frozen=True)
class QualityRecord:
    patch_id: str
    dataset_tag: str
    split: str
    labels: Mapping[str, float] = field(default_factory=dict)
    feature_refs: Mapping[str, str] = field(default_factory=dict)
    source_image: str = ""
    x0: int = 0
    y0: int = 0
    w: int = 0
    h: int = 0
    metadata: Mapping[str, object] = field(default_factory=dict)

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ValueError(f"split must be one of {SPLITS}, got {self.split!r}")
        labels = {str(k): float(v) for k, v in self.labels.items()}
        for method, oa in labels.items():
            if not (0.0 <= oa <= 1.0):
                raise ValueError(f"{self.patch_id}: OA for {method} outside [0, 1]: {oa}")
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "feature_refs", dict(self.feature_refs))
        object.__setattr__(self, "metadata", dict(self.metadata))


@dataclass(frozen=True)
class ScoreTable:
    """image x method score matrix; row/column order is canonical for tie-breaks."""

    image_ids: Sequence[str]
    method_ids: Sequence[str]
    scores: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "image_ids", tuple(str(i) for i in self.image_ids))
        object.__setattr__(self, "method_ids", tuple(str(m) for m in self.method_ids))
        arr = np.array(self.scores, dtype=np.float64, copy=True)
        if arr.ndim == 1 and len(self.method_ids) == 1:
            arr = arr.reshape(-1, 1)
        if arr.shape != (len(self.image_ids), len(self.method_ids)):
            raise ValueError(
                f"scores shape {arr.shape} does not match "
                f"{len(self.image_ids)} images x {len(self.method_ids)} methods"
            )
        arr.setflags(write=False)
        object.__setattr__(self, "scores", arr)

    @property
    def shape(self):
        return self.scores.shape

    def column(self, method_id: str) -> np.ndarray:
        return self.scores[:, self.method_ids.index(method_id)]

    def row(self, image_id: str) -> Dict[str, float]:
        i = self.image_ids.index(image_id)
        return {m: float(s) for m, s in zip(self.method_ids, self.scores[i])}

    def select(self, image_ids: Optional[Sequence[str]] = None,
               method_ids: Optional[Sequence[str]] = None) -> "ScoreTable":
        image_ids = list(self.image_ids if image_ids is None else image_ids)
        method_ids = list(self.method_ids if method_ids is None else method_ids)
        ri = [self.image_ids.index(i) for i in image_ids]
        ci = [self.method_ids.index(m) for m in method_ids]
        return ScoreTable(image_ids, method_ids, self.scores[np.ix_(ri, ci)])

    @classmethod
    def from_columns(cls, image_ids: Sequence[str], columns: Mapping[str, Sequence[float]]):
        methods = list(columns)
        scores = np.column_stack([np.asarray(columns[m], dtype=np.float64) for m in methods]) \
            if methods else np.zeros((len(image_ids), 0))
        return cls(image_ids, methods, scores)


@dataclass(frozen=True)
class Violation:
    kind: str
    message: str
    image_id: Optional[str] = None
    method_id: Optional[str] = None


def validate_score_table(t) -> List[Violation]:
    """List invariant violations of a score table; never raises.

    Accepts a ScoreTable or any object with image_ids / method_ids / scores
    attributes, so tables that failed construction-time checks can still be
    diagnosed.
    """
    out: List[Violation] = []
    try:
        image_ids = list(t.image_ids)
        method_ids = list(t.method_ids)
        scores = np.asarray(t.scores, dtype=np.float64)
    except Exception as exc:  # malformed object
        return [Violation("malformed", f"cannot read table: {exc}")]

    if scores.shape != (len(image_ids), len(method_ids)):
        out.append(Violation(
            "shape", f"scores shape {scores.shape} != ({len(image_ids)}, {len(method_ids)})"))
        return out

    seen = set()
    for img in image_ids:
        if img in seen:
            out.append(Violation("duplicate_image", f"duplicate image_id {img!r}", image_id=img))
        seen.add(img)
    seen = set()
    for m in method_ids:
        if m in seen:
            out.append(Violation("duplicate_method", f"duplicate method_id {m!r}", method_id=m))
        seen.add(m)

    bad_rows, bad_cols = np.nonzero(~np.isfinite(scores))
    for r, c in zip(bad_rows, bad_cols):
        out.append(Violation(
            "non_finite", f"non-finite score {scores[r, c]!r} at ({image_ids[r]}, {method_ids[c]})",
            image_id=image_ids[r], method_id=method_ids[c]))
    return out
