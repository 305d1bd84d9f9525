"""Caption purification: cosine-similarity scoring, threshold split, and
refinement of low-similarity captions through an external captioning service.
"""

from __future__ import annotations

import json
import logging
import time
import urllib.error
import urllib.request
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

log = logging.getLogger(__name__)

QUALITIES = ("unscored", "high", "low", "refined")


class PurifyError(ValueError):
    pass


@dataclass(frozen=True)
class CaptionRecord:
    id: str
    caption: str
    image_embedding: Optional[np.ndarray] = None
    text_embedding: Optional[np.ndarray] = None
    similarity: Optional[float] = None
    quality: str = "unscored"
    provenance: Mapping[str, object] = field(default_factory=dict)

    def __post_init__(self):
        if self.quality not in QUALITIES:
            raise PurifyError(f"{self.id}: unknown quality {self.quality!r}")
        if self.image_embedding is not None and self.text_embedding is not None:
            if np.shape(self.image_embedding) != np.shape(self.text_embedding):
                raise PurifyError(f"{self.id}: image/text embedding dims differ")
        object.__setattr__(self, "provenance", dict(self.provenance))

    @property
    def failed(self) -> bool:
        return bool(self.provenance.get("refine_failed", False))


def similarity_score(v_i, v_t) -> float:
    """Cosine similarity of an image and a text embedding."""
    a = np.asarray(v_i, dtype=np.float64).ravel()
    b = np.asarray(v_t, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise PurifyError(f"embedding dims differ: {a.size} vs {b.size}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise PurifyError("zero-norm embedding")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def score_records(records: Iterable[CaptionRecord]) -> List[CaptionRecord]:
    out = []
    for r in records:
        if r.image_embedding is None or r.text_embedding is None:
            raise PurifyError(f"{r.id}: missing embeddings")
        out.append(replace(r, similarity=similarity_score(r.image_embedding, r.text_embedding)))
    return out


def default_threshold(records: Sequence[CaptionRecord], quantile: float = 0.3) -> float:
    ss = [r.similarity for r in records if r.similarity is not None]
    if not ss:
        raise PurifyError("no scored records to derive a threshold from")
    return float(np.quantile(np.asarray(ss), quantile))


def partition_by_threshold(records: Iterable[CaptionRecord], tau: float
                           ) -> Tuple[List[CaptionRecord], List[CaptionRecord]]:
    """high: similarity >= tau; low: similarity < tau."""
    high, low = [], []
    for r in records:
        if r.similarity is None:
            raise PurifyError(f"{r.id}: record not scored")
        if r.similarity >= tau:
            high.append(replace(r, quality="high"))
        else:
            low.append(replace(r, quality="low"))
    return high, low


# -- prompting ---------------------------------------------------------------

@dataclass(frozen=True)
class RefinementPrompt:
    instruction: str = ("Generate a brief description of the remote sensing image, highlighting key "
                        "features such as the terrain, environment, layout, or other notable elements "
                        "visible in the image.")
    metacaption: str = ("Description data of the image (insert the following data based on the "
                        "actual image): [title]")
    example: str = ("A satellite image of a coastal city with a network of roads, high-rise "
                    "buildings, and a large harbor area.")

    def __post_init__(self):
        if not self.instruction.strip():
            raise PurifyError("prompt instruction must be non-empty")


def build_prompt(record: CaptionRecord, p: RefinementPrompt = RefinementPrompt()) -> str:
    meta = p.metacaption.replace("[title]", record.caption)
    return f"Instruction: {p.instruction}\nMetacaption: {meta}\nExample: {p.example}"


# -- caption service clients ---------------------------------------------------

class CaptionClient:
    """Interface: return a refined caption or raise on failure."""

    def caption(self, record_id: str, image_ref: str, prompt: str) -> str:
        raise NotImplementedError


class HttpCaptionClient(CaptionClient):
    """POST {"id", "image_ref", "prompt"} as JSON; expects {"caption": ...} back."""

    def __init__(self, url: str, timeout: float = 30.0):
        self.url = url
        self.timeout = timeout

    def caption(self, record_id: str, image_ref: str, prompt: str) -> str:
        body = json.dumps({"id": record_id, "image_ref": image_ref, "prompt": prompt}).encode("utf-8")
        req = urllib.request.Request(self.url, data=body, method="POST",
                                     headers={"Content-Type": "application/json; charset=utf-8"})
        with urllib.request.urlopen(req, timeout=self.timeout) as resp:
            payload = json.loads(resp.read().decode("utf-8"))
        cap = payload.get("caption")
        if not isinstance(cap, str):
            raise PurifyError(f"{record_id}: response has no 'caption' string")
        return cap


class ScriptedCaptionClient(CaptionClient):
    """Mock service. ``respond(id, prompt)`` builds the caption; ``failures[id]`` = number of
    initial calls for that id that raise before it starts succeeding (-1: always fail)."""

    def __init__(self, respond: Optional[Callable[[str, str], str]] = None,
                 failures: Optional[Mapping[str, int]] = None):
        self.respond = respond or (lambda rid, prompt: f"OK:{rid}")
        self.failures = dict(failures or {})
        self.calls: Dict[str, int] = {}

    def caption(self, record_id: str, image_ref: str, prompt: str) -> str:
        n = self.calls.get(record_id, 0) + 1
        self.calls[record_id] = n
        budget = self.failures.get(record_id, 0)
        if budget < 0 or n <= budget:
            raise ConnectionError(f"scripted failure {n} for {record_id}")
        return self.respond(record_id, prompt)


def _refine_one(record: CaptionRecord, client: CaptionClient, prompt: RefinementPrompt,
                image_ref: str, max_attempts: int, backoff: float, sleep) -> CaptionRecord:
    text = build_prompt(record, prompt)
    err = None
    for attempt in range(1, max_attempts + 1):
        try:
            new_caption = client.caption(record.id, image_ref, text)
        except Exception as exc:  # any transport/service failure is retried
            err = exc
            log.warning("refine %s attempt %d failed: %s", record.id, attempt, exc)
            if attempt < max_attempts:
                sleep(backoff * 2 ** (attempt - 1))
            continue
        prov = dict(record.provenance)
        prov.update({"original_caption": record.caption, "attempts": attempt, "refine_failed": False})
        return replace(record, caption=new_caption, quality="refined", provenance=prov)
    prov = dict(record.provenance)
    prov.update({"original_caption": record.caption, "attempts": max_attempts,
                 "refine_failed": True, "error": str(err)})
    return replace(record, provenance=prov)


def refine_captions(low_records: Sequence[CaptionRecord], client: CaptionClient,
                    prompt: RefinementPrompt = RefinementPrompt(),
                    image_refs: Optional[Mapping[str, str]] = None, max_attempts: int = 3,
                    backoff: float = 0.5, max_in_flight: int = 4,
                    sleep: Callable[[float], None] = time.sleep) -> List[CaptionRecord]:
    """Refine each record through ``client``; output order and ids match the input.

    Records that exhaust their attempts keep their caption and quality and are
    flagged ``provenance["refine_failed"]``.
    """
    image_refs = image_refs or {}

    def work(r):
        return _refine_one(r, client, prompt, image_refs.get(r.id, r.id), max_attempts, backoff, sleep)

    if max_in_flight <= 1 or len(low_records) <= 1:
        return [work(r) for r in low_records]
    with ThreadPoolExecutor(max_workers=max_in_flight) as pool:
        return list(pool.map(work, low_records))


# -- files -----------------------------------------------------------------------

def _caption_json(r: CaptionRecord) -> dict:
    prov = dict(r.provenance)
    if r.similarity is not None:
        prov.setdefault("similarity", r.similarity)
    return {"id": r.id, "caption": r.caption, "quality": r.quality,
            "provenance": dict(sorted(prov.items()))}


def write_captions(records: Iterable[CaptionRecord], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(_caption_json(r), ensure_ascii=False) + "\n")


def read_captions(path) -> List[CaptionRecord]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            d = json.loads(line)
            if "id" not in d or "caption" not in d:
                raise PurifyError(f"{path}:{lineno}: caption records need 'id' and 'caption'")
            prov = dict(d.get("provenance") or {})
            sim = prov.pop("similarity", None)
            out.append(CaptionRecord(id=str(d["id"]), caption=d["caption"],
                                     quality=d.get("quality", "unscored"),
                                     similarity=None if sim is None else float(sim), provenance=prov))
    return out


def attach_embeddings(records: Sequence[CaptionRecord], image_vecs: Mapping[str, np.ndarray],
                      text_vecs: Mapping[str, np.ndarray]) -> List[CaptionRecord]:
    out = []
    for r in records:
        if r.id not in image_vecs or r.id not in text_vecs:
            raise PurifyError(f"{r.id}: missing image or text embedding")
        out.append(replace(r, image_embedding=np.asarray(image_vecs[r.id]),
                           text_embedding=np.asarray(text_vecs[r.id])))
    return out


def assemble_purified(high: Sequence[CaptionRecord], refined: Sequence[CaptionRecord],
                      path=None) -> Dict[str, int]:
    """Union of high-quality and successfully refined records; optional JSONL output."""
    ids = {}
    for r in list(high) + list(refined):
        if r.id in ids:
            raise PurifyError(f"id collision: {r.id!r}")
        ids[r.id] = r
    kept = list(high) + [r for r in refined if r.quality == "refined"]
    counts = {"high": len(high), "refined": sum(r.quality == "refined" for r in refined),
              "failed": sum(r.failed for r in refined), "total": len(kept)}
    if path is not None:
        write_captions(kept, path)
    return counts
