"""Per-image method recommendation and tie-aware precision@1 / precision@3.

A prediction counts as a hit when the set of predicted-best methods is a
(non-strict) subset of the true best set (P@1) or of the tie-extended true
top-3 set (P@3).
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Mapping, Set

import numpy as np

from .core import ScoreTable

PRED_TOL = 1e-12
TRUTH_TOL = 1e-9

DEFINITIONS = {
    "p_at_1": "predicted best set is a subset of the true best set (ties within tolerance)",
    "p_at_3": "predicted best set is a subset of the methods scoring at least the 3rd-highest truth value",
}


class RecommendError(ValueError):
    pass


def best_set(scores_row: Mapping[str, float], tol: float = PRED_TOL) -> Set[str]:
    """Methods whose score lies within ``tol`` of the row maximum."""
    if not scores_row:
        raise RecommendError("empty score row")
    top = max(scores_row.values())
    return {m for m, s in scores_row.items() if s >= top - tol}


def top_k_set(scores_row: Mapping[str, float], k: int = 3, tol: float = TRUTH_TOL) -> Set[str]:
    """Methods ranked within the top k, extended to include anything tied with the k-th score."""
    if len(scores_row) < k:
        raise RecommendError(f"need at least {k} methods, got {len(scores_row)}")
    kth = sorted(scores_row.values(), reverse=True)[k - 1]
    return {m for m, s in scores_row.items() if s >= kth - tol}


def recommend_method(pred_row: Mapping[str, float]) -> str:
    """Argmax; exact ties go to the earliest method in the row's order."""
    best_m, best_s = None, -np.inf
    for m, s in pred_row.items():
        if best_m is None or s > best_s:
            best_m, best_s = m, s
    if best_m is None:
        raise RecommendError("empty score row")
    return best_m


def ranked_methods(pred_row: Mapping[str, float]) -> List[str]:
    order = list(pred_row)
    return sorted(order, key=lambda m: (-pred_row[m], order.index(m)))


def _check_tables(pred: ScoreTable, truth: ScoreTable) -> ScoreTable:
    if set(pred.image_ids) != set(truth.image_ids) or set(pred.method_ids) != set(truth.method_ids) \
            or pred.shape != truth.shape:
        raise RecommendError(
            f"table shape mismatch: pred {pred.shape} vs truth {truth.shape} "
            "(images and methods must match)")
    # align truth to the prediction table's order
    return truth.select(pred.image_ids, pred.method_ids)


def _hits(pred: ScoreTable, truth: ScoreTable, k: int, pred_tol: float, truth_tol: float) -> np.ndarray:
    truth = _check_tables(pred, truth)
    hits = np.zeros(len(pred.image_ids), dtype=bool)
    for i in range(len(pred.image_ids)):
        p_row = dict(zip(pred.method_ids, pred.scores[i]))
        t_row = dict(zip(truth.method_ids, truth.scores[i]))
        target = best_set(t_row, truth_tol) if k == 1 else top_k_set(t_row, k, truth_tol)
        hits[i] = best_set(p_row, pred_tol) <= target
    return hits


def precision_at_1(pred: ScoreTable, truth: ScoreTable, pred_tol: float = PRED_TOL,
                   truth_tol: float = TRUTH_TOL) -> float:
    if not pred.image_ids:
        raise RecommendError("no images")
    return float(_hits(pred, truth, 1, pred_tol, truth_tol).mean())


def precision_at_3(pred: ScoreTable, truth: ScoreTable, pred_tol: float = PRED_TOL,
                   truth_tol: float = TRUTH_TOL) -> float:
    if len(pred.method_ids) < 3:
        raise RecommendError(f"P@3 needs at least 3 methods, got {len(pred.method_ids)}")
    if not pred.image_ids:
        raise RecommendError("no images")
    return float(_hits(pred, truth, 3, pred_tol, truth_tol).mean())


@dataclass
class ImageRecommendation:
    patch_id: str
    ranked_methods: List[str]
    predicted_best: str
    predicted_best_set: List[str]
    true_best_set: List[str]
    true_top3_set: List[str] = field(default_factory=list)


@dataclass
class RecommendationResult:
    per_image: List[ImageRecommendation]
    p_at_1: float
    p_at_3: float

    def as_dict(self) -> dict:
        return {
            "per_image": [
                {"patch_id": r.patch_id, "ranked_methods": r.ranked_methods,
                 "predicted_best": r.predicted_best, "predicted_best_set": r.predicted_best_set,
                 "true_best_set": r.true_best_set, "true_top3_set": r.true_top3_set}
                for r in self.per_image
            ],
            "p_at_1": self.p_at_1,
            "p_at_3": None if np.isnan(self.p_at_3) else self.p_at_3,
            "definitions": dict(DEFINITIONS),
        }


def recommend(pred: ScoreTable, truth: ScoreTable, pred_tol: float = PRED_TOL,
              truth_tol: float = TRUTH_TOL) -> RecommendationResult:
    truth_al = _check_tables(pred, truth)
    have3 = len(pred.method_ids) >= 3
    per_image = []
    for i, pid in enumerate(pred.image_ids):
        p_row = dict(zip(pred.method_ids, pred.scores[i]))
        t_row = dict(zip(truth_al.method_ids, truth_al.scores[i]))
        order = list(pred.method_ids)
        per_image.append(ImageRecommendation(
            patch_id=pid,
            ranked_methods=ranked_methods(p_row),
            predicted_best=recommend_method(p_row),
            predicted_best_set=sorted(best_set(p_row, pred_tol), key=order.index),
            true_best_set=sorted(best_set(t_row, truth_tol), key=order.index),
            true_top3_set=sorted(top_k_set(t_row, 3, truth_tol), key=order.index) if have3 else [],
        ))
    p1 = precision_at_1(pred, truth, pred_tol, truth_tol)
    p3 = precision_at_3(pred, truth, pred_tol, truth_tol) if have3 else float("nan")
    return RecommendationResult(per_image, p1, p3)


def write_recommendation(result: RecommendationResult, json_path, csv_path=None) -> None:
    Path(json_path).write_text(json.dumps(result.as_dict(), indent=2) + "\n", encoding="utf-8")
    if csv_path is not None:
        with open(csv_path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            n = max((len(r.ranked_methods) for r in result.per_image), default=0)
            w.writerow(["patch_id", *[f"rank{k + 1}" for k in range(n)]])
            for r in result.per_image:
                w.writerow([r.patch_id, *r.ranked_methods])
