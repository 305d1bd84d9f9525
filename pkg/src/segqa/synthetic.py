"""Synthetic corpora standing in for real imagery, encoder outputs and segmenter outputs.

Each patch gets a random semantic embedding and, per method, a small random
feature map. A latent per-(patch, method) accuracy is a smooth function of
those features; confusion matrices are then sampled so that their OA scatters
around the latent accuracy. Everything is driven by one seed.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .core import ConfusionMatrix, as_rng
from .dataset import crop_patches, patch_id_for, write_confusions
from .model import segmentation_key, semantic_key, write_embeddings, write_feature_maps


def method_names(k: int) -> List[str]:
    return [f"m{i + 1}" for i in range(k)]


def sample_confusion(rng: np.random.Generator, accuracy: float, n_classes: int, n_pixels: int) -> ConfusionMatrix:
    """Random confusion matrix whose expected trace/total equals ``accuracy``."""
    class_p = rng.dirichlet(np.full(n_classes, 2.0))
    per_class = rng.multinomial(n_pixels, class_p)
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    for i, cnt in enumerate(per_class):
        correct = rng.binomial(cnt, accuracy)
        cm[i, i] = correct
        wrong = cnt - correct
        if wrong and n_classes > 1:
            others = [j for j in range(n_classes) if j != i]
            cm[i, others] = rng.multinomial(wrong, np.full(n_classes - 1, 1.0 / (n_classes - 1)))
    return ConfusionMatrix(cm)


def make_synthetic_corpus(out_dir, n_sources: int = 2, extent: Tuple[int, int] = (4096, 4096),
                          patch_size: int = 1024, methods: Sequence[str] = ("m1",), d_sem: int = 32,
                          d_seg: int = 16, map_hw: int = 4, n_classes: int = 4, n_pixels: int = 4096,
                          seed: int = 0, dataset_tags: Sequence[str] = ("synthA", "synthB")) -> Dict[str, str]:
    """Write sources.jsonl, confusions.csv, semantic.jsonl and seg_<method>.jsonl.

    Returns the paths written plus a ``feature_refs`` mapping (relative to
    ``out_dir``) suitable for the dataset config.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = as_rng(seed)
    methods = list(methods)

    sources = []
    patch_ids: List[str] = []
    for s in range(n_sources):
        name = f"src{s:03d}"
        sources.append({"source_image": name, "width": int(extent[0]), "height": int(extent[1]),
                        "dataset_tag": dataset_tags[s % len(dataset_tags)]})
        patch_ids += [patch_id_for(c) for c in crop_patches(extent, patch_size, name)]

    # hidden directions that make accuracy depend on the features
    u_sem = rng.normal(size=d_sem) / np.sqrt(d_sem)
    u_seg = {m: rng.normal(size=d_seg) / np.sqrt(d_seg) for m in methods}
    bias = {m: rng.normal(0.0, 0.3) for m in methods}

    sem = {pid: rng.normal(size=d_sem) for pid in patch_ids}
    seg_maps = {m: {} for m in methods}
    confusions = {}
    for pid in patch_ids:
        for m in methods:
            fmap = rng.normal(size=(map_hw, map_hw, d_seg)) + rng.normal(size=d_seg)
            seg_maps[m][pid] = fmap
            z = 1.2 * sem[pid] @ u_sem + 1.5 * fmap.mean(axis=(0, 1)) @ u_seg[m] + bias[m]
            acc = 0.45 + 0.5 / (1.0 + np.exp(-z))
            confusions[(pid, m)] = sample_confusion(rng, acc, n_classes, n_pixels)

    with open(out / "sources.jsonl", "w", encoding="utf-8") as fh:
        for s in sources:
            fh.write(json.dumps(s) + "\n")
    write_confusions(confusions, out / "confusions.csv")
    write_embeddings(out / "semantic.jsonl", sem)
    refs = {semantic_key(): "semantic.jsonl"}
    for m in methods:
        write_feature_maps(out / f"seg_{m}.jsonl", seg_maps[m])
        refs[segmentation_key(m)] = f"seg_{m}.jsonl"
    return {"sources": str(out / "sources.jsonl"), "confusions": str(out / "confusions.csv"),
            "feature_root": str(out), "feature_refs": refs}


def random_score_table(rng: np.random.Generator, n_images: int, n_methods: int):
    """Tie-free uniform random table (continuous draws)."""
    from .core import ScoreTable
    ids = [f"img{i:05d}" for i in range(n_images)]
    return ScoreTable(ids, method_names(n_methods), rng.random((n_images, n_methods)))
