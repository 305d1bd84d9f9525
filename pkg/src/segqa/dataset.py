"""Patch manifests, OA labels and their on-disk formats."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, replace
from fractions import Fraction
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .core import ConfusionMatrix, QualityRecord, ScoreTable, as_rng

DEFAULT_PATCH_SIZE = 1024
DEFAULT_SPLIT = (0.8, 0.2)


class DatasetError(ValueError):
    pass


class MissingLabelsError(DatasetError):
    def __init__(self, missing: Sequence[Tuple[str, str]]):
        self.missing = list(missing)
        shown = ", ".join(f"({p}, {m})" for p, m in self.missing[:20])
        more = f" ... and {len(self.missing) - 20} more" if len(self.missing) > 20 else ""
        super().__init__(f"missing confusion matrices for {len(self.missing)} pair(s): {shown}{more}")


@dataclass(frozen=True)
class CropGeometry:
    source_image: str
    x0: int
    y0: int
    w: int
    h: int


@dataclass(frozen=True)
class DatasetManifest:
    records: Tuple[QualityRecord, ...]
    patch_size: int = DEFAULT_PATCH_SIZE
    split_ratio: Tuple[float, float] = DEFAULT_SPLIT

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        ids = [r.patch_id for r in self.records]
        if len(set(ids)) != len(ids):
            dup = sorted({i for i in ids if ids.count(i) > 1})
            raise DatasetError(f"duplicate patch_id(s) in manifest: {dup[:10]}")

    def split(self, name: str) -> List[QualityRecord]:
        return [r for r in self.records if r.split == name]

    @property
    def patch_ids(self) -> List[str]:
        return [r.patch_id for r in self.records]

    def get(self, patch_id: str) -> QualityRecord:
        for r in self.records:
            if r.patch_id == patch_id:
                return r
        raise KeyError(patch_id)

    def methods(self) -> List[str]:
        seen: Dict[str, None] = {}
        for r in self.records:
            for m in r.labels:
                seen.setdefault(m)
        return list(seen)

    def with_records(self, records: Iterable[QualityRecord]) -> "DatasetManifest":
        return replace(self, records=tuple(records))


# -- cropping / splitting ---------------------------------------------------

def crop_patches(image_extent: Tuple[int, int], patch_size: int = DEFAULT_PATCH_SIZE,
                 source_image: str = "") -> List[CropGeometry]:
    """Regular non-overlapping grid anchored at (0, 0); partial edge patches are dropped."""
    width, height = (int(v) for v in image_extent)
    p = int(patch_size)
    if p <= 0:
        raise DatasetError(f"patch_size must be positive, got {p}")
    if width < p or height < p:
        raise DatasetError(f"image too small: extent {width}x{height} < patch size {p}")
    return [CropGeometry(source_image, x * p, y * p, p, p)
            for y in range(height // p) for x in range(width // p)]


def patch_id_for(crop: CropGeometry) -> str:
    return f"{crop.source_image}_x{crop.x0}_y{crop.y0}"


def train_count(n: int, train_fraction: float) -> int:
    # round half up; Python's round() is banker's rounding
    return int(math.floor(train_fraction * n + 0.5))


def split_manifest(records: Sequence[QualityRecord], ratio=DEFAULT_SPLIT, seed=0,
                   patch_size: int = DEFAULT_PATCH_SIZE) -> DatasetManifest:
    """Uniform random record-level split; |train| = round(a * n)."""
    a, b = (float(v) for v in ratio)
    if abs(a + b - 1.0) > 1e-12 or a < 0 or b < 0:
        raise DatasetError(f"split ratio must be non-negative and sum to 1, got {ratio}")
    records = list(records)
    if not records:
        raise DatasetError("cannot split an empty record list")
    # canonical order first so the assignment doesn't depend on input order
    records.sort(key=lambda r: r.patch_id)
    n_train = train_count(len(records), a)
    order = as_rng(seed).permutation(len(records))
    train_idx = set(order[:n_train].tolist())
    out = [replace(r, split="train" if i in train_idx else "test") for i, r in enumerate(records)]
    return DatasetManifest(tuple(out), patch_size=patch_size, split_ratio=(a, b))


def filter_records(records: Iterable[QualityRecord],
                   exclude: Optional[Mapping[str, Sequence]] = None) -> List[QualityRecord]:
    """Drop records whose dataset_tag or metadata value matches an exclusion list.

    ``exclude={"category": ["flooded"]}`` removes records with
    ``metadata["category"] == "flooded"``; the key ``dataset_tag`` matches the
    record's tag.
    """
    if not exclude:
        return list(records)
    rules = {k: set(v) for k, v in exclude.items()}
    out = []
    for r in records:
        drop = False
        for key, banned in rules.items():
            value = r.dataset_tag if key == "dataset_tag" else r.metadata.get(key)
            if value in banned:
                drop = True
                break
        if not drop:
            out.append(r)
    return out


# -- labels -----------------------------------------------------------------

def compute_oa(cm) -> float:
    """Overall accuracy: trace / total."""
    if not isinstance(cm, ConfusionMatrix):
        cm = ConfusionMatrix(np.asarray(cm))
    total = cm.total
    if total <= 0:
        raise DatasetError("empty confusion matrix")
    return float(np.trace(cm.counts)) / float(total)


def compute_oa_exact(cm) -> Fraction:
    if not isinstance(cm, ConfusionMatrix):
        cm = ConfusionMatrix(np.asarray(cm))
    if cm.total <= 0:
        raise DatasetError("empty confusion matrix")
    return Fraction(int(np.trace(cm.counts)), cm.total)


def confusion_from_labels(truth: np.ndarray, pred: np.ndarray, n_classes: int) -> ConfusionMatrix:
    """Count two equal-shape integer label arrays into a confusion matrix."""
    truth = np.asarray(truth)
    pred = np.asarray(pred)
    if truth.shape != pred.shape:
        raise DatasetError(f"label maps differ in shape: {truth.shape} vs {pred.shape}")
    t = truth.ravel().astype(np.int64)
    p = pred.ravel().astype(np.int64)
    if t.size and (t.min() < 0 or p.min() < 0 or t.max() >= n_classes or p.max() >= n_classes):
        raise DatasetError(f"labels outside [0, {n_classes})")
    counts = np.bincount(t * n_classes + p, minlength=n_classes * n_classes)
    return ConfusionMatrix(counts.reshape(n_classes, n_classes))


def build_label_table(manifest: DatasetManifest,
                      per_patch_confusions: Mapping[Tuple[str, str], ConfusionMatrix],
                      method_ids: Optional[Sequence[str]] = None) -> ScoreTable:
    """OA for every (patch, method) pair; rows follow manifest order."""
    if method_ids is None:
        method_ids = sorted({m for _, m in per_patch_confusions})
    method_ids = list(method_ids)
    patch_ids = manifest.patch_ids
    missing = [(p, m) for p in patch_ids for m in method_ids if (p, m) not in per_patch_confusions]
    if missing:
        raise MissingLabelsError(missing)
    scores = np.array([[compute_oa(per_patch_confusions[(p, m)]) for m in method_ids]
                       for p in patch_ids], dtype=np.float64).reshape(len(patch_ids), len(method_ids))
    return ScoreTable(patch_ids, method_ids, scores)


def attach_labels(manifest: DatasetManifest, table: ScoreTable) -> DatasetManifest:
    recs = []
    for r in manifest.records:
        labels = dict(r.labels)
        labels.update(table.row(r.patch_id))
        recs.append(replace(r, labels=labels))
    return manifest.with_records(recs)


# -- file formats -----------------------------------------------------------

def _record_to_json(r: QualityRecord) -> dict:
    d = {
        "patch_id": r.patch_id,
        "source_image": r.source_image,
        "dataset_tag": r.dataset_tag,
        "x0": r.x0, "y0": r.y0, "w": r.w, "h": r.h,
        "split": r.split,
        "feature_refs": dict(sorted(r.feature_refs.items())),
        "labels": {m: float(v) for m, v in sorted(r.labels.items())},
    }
    if r.metadata:
        d["metadata"] = dict(sorted(r.metadata.items()))
    return d


def dumps_manifest(manifest: DatasetManifest) -> str:
    return "".join(json.dumps(_record_to_json(r), ensure_ascii=False) + "\n"
                   for r in manifest.records)


def write_manifest(manifest: DatasetManifest, path) -> None:
    Path(path).write_bytes(dumps_manifest(manifest).encode("utf-8"))


def read_manifest(path, patch_size: Optional[int] = None) -> DatasetManifest:
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
                records.append(QualityRecord(
                    patch_id=d["patch_id"], dataset_tag=d.get("dataset_tag", ""),
                    split=d["split"], labels=d.get("labels", {}),
                    feature_refs=d.get("feature_refs", {}),
                    source_image=d.get("source_image", ""),
                    x0=int(d.get("x0", 0)), y0=int(d.get("y0", 0)),
                    w=int(d.get("w", 0)), h=int(d.get("h", 0)),
                    metadata=d.get("metadata", {})))
            except (KeyError, ValueError, TypeError) as exc:
                raise DatasetError(f"{path}:{lineno}: bad manifest record: {exc}") from exc
    if patch_size is None:
        patch_size = records[0].w if records and records[0].w else DEFAULT_PATCH_SIZE
    n = len(records)
    n_train = sum(r.split == "train" for r in records)
    ratio = (n_train / n, 1 - n_train / n) if n else DEFAULT_SPLIT
    return DatasetManifest(tuple(records), patch_size=patch_size, split_ratio=ratio)


def dumps_confusions(confusions: Mapping[Tuple[str, str], ConfusionMatrix]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    for (patch_id, method_id), cm in confusions.items():
        w.writerow([patch_id, method_id, cm.n])
        for row in cm.counts:
            w.writerow([int(v) for v in row])
    return buf.getvalue()


def write_confusions(confusions, path) -> None:
    Path(path).write_bytes(dumps_confusions(confusions).encode("utf-8"))


def read_confusions(path) -> Dict[Tuple[str, str], ConfusionMatrix]:
    """Parse concatenated blocks: header row "patch_id,method_id,n" then n rows."""
    with open(path, encoding="utf-8", newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]
    out: Dict[Tuple[str, str], ConfusionMatrix] = {}
    i = 0
    while i < len(rows):
        head = rows[i]
        if len(head) != 3:
            raise DatasetError(f"{path}: expected 'patch_id,method_id,n' header at row {i + 1}, got {head}")
        patch_id, method_id = head[0].strip(), head[1].strip()
        try:
            n = int(head[2])
        except ValueError:
            raise DatasetError(f"{path}: bad class count {head[2]!r} at row {i + 1}") from None
        block = rows[i + 1:i + 1 + n]
        if len(block) != n or any(len(r) != n for r in block):
            raise DatasetError(f"{path}: malformed {n}x{n} matrix for ({patch_id}, {method_id})")
        key = (patch_id, method_id)
        if key in out:
            raise DatasetError(f"{path}: duplicate matrix for {key}")
        out[key] = ConfusionMatrix(np.array([[int(v) for v in r] for r in block], dtype=np.int64))
        i += 1 + n
    return out


def dumps_label_table(table: ScoreTable) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["patch_id", *table.method_ids])
    for img, row in zip(table.image_ids, table.scores):
        w.writerow([img, *(repr(float(v)) for v in row)])
    return buf.getvalue()


def write_label_table(table: ScoreTable, path) -> None:
    Path(path).write_bytes(dumps_label_table(table).encode("utf-8"))


def read_label_table(path) -> ScoreTable:
    with open(path, encoding="utf-8", newline="") as fh:
        rows = [r for r in csv.reader(fh) if r]
    if not rows or rows[0][0] != "patch_id":
        raise DatasetError(f"{path}: expected header starting with 'patch_id'")
    methods = rows[0][1:]
    ids = [r[0] for r in rows[1:]]
    try:
        scores = np.array([[float(v) for v in r[1:]] for r in rows[1:]], dtype=np.float64)
    except ValueError as exc:
        raise DatasetError(f"{path}: {exc}") from exc
    return ScoreTable(ids, methods, scores.reshape(len(ids), len(methods)))


def read_sources(path) -> List[dict]:
    """Source-image inventory, JSON Lines: {"source_image", "width", "height", "dataset_tag", "metadata"?}."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if line.strip():
                d = json.loads(line)
                for k in ("source_image", "width", "height"):
                    if k not in d:
                        raise DatasetError(f"{path}:{lineno}: missing key {k!r}")
                out.append(d)
    return out


def records_from_sources(sources: Sequence[Mapping], patch_size: int,
                         feature_refs: Optional[Mapping[str, str]] = None) -> List[QualityRecord]:
    records = []
    for src in sources:
        for crop in crop_patches((src["width"], src["height"]), patch_size, src["source_image"]):
            records.append(QualityRecord(
                patch_id=patch_id_for(crop), dataset_tag=src.get("dataset_tag", ""),
                split="train", feature_refs=dict(feature_refs or {}),
                source_image=crop.source_image, x0=crop.x0, y0=crop.y0, w=crop.w, h=crop.h,
                metadata=src.get("metadata", {})))
    return records
