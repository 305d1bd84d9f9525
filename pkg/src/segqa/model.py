"""Dual-branch segmentation-quality regressor.

semantic branch:      frozen encoder -> CLS vector -> 3 transformer blocks -> linear
segmentation branch:  feature map -> global average pool -> 2-layer GELU MLP
fusion:               simple cross-gating block (SCGB)
head:                 dropout -> fc -> GELU -> dropout -> fc -> sigmoid

Training arithmetic is float32; ``model.double()`` gives the float64 path
used by the gradient checks.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import FeatureMap, FeatureVector


@dataclass
class ModelConfig:
    d_sem: int = 768
    d_seg: int = 64
    d_fused: int = 256
    d_hidden: int = 64
    heads: int = 4
    adapter_blocks: int = 3
    mlp_ratio: int = 4
    dropout: float = 0.1
    use_semantic: bool = True
    use_segmentation: bool = True
    use_adapters: bool = True
    fusion: str = "scgb"  # or "concat"
    init_std: float = 0.02

    def __post_init__(self):
        for name in ("d_sem", "d_seg", "d_fused", "d_hidden", "heads", "adapter_blocks", "mlp_ratio"):
            v = getattr(self, name)
            if not isinstance(v, int) or isinstance(v, bool) or v < 1:
                raise ValueError(f"{name} must be a positive integer, got {v!r}")
        if self.use_adapters and self.use_semantic and self.d_sem % self.heads:
            raise ValueError(f"d_sem={self.d_sem} is not divisible by heads={self.heads}")
        if self.fusion not in ("scgb", "concat"):
            raise ValueError(f"fusion must be 'scgb' or 'concat', got {self.fusion!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")
        if not (self.use_semantic or self.use_segmentation):
            raise ValueError("at least one branch must be enabled")

    def config_hash(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def gap(m: Union[FeatureMap, np.ndarray]) -> FeatureVector:
    """Per-channel spatial mean of an (h, w, c) map."""
    if not isinstance(m, FeatureMap):
        m = FeatureMap(m)
    return FeatureVector(m.values.mean(axis=(0, 1)))


def gap_tensor(x: torch.Tensor) -> torch.Tensor:
    """(B, h, w, c) -> (B, c); (B, c) inputs are treated as already pooled."""
    if x.dim() == 4:
        return x.mean(dim=(1, 2))
    if x.dim() == 2:
        return x
    raise ValueError(f"expected (B, h, w, c) or (B, c) segmentation features, got {tuple(x.shape)}")


class TransformerBlock(nn.Module):
    """Pre-norm ViT block."""

    def __init__(self, dim: int, heads: int, mlp_ratio: int = 4):
        super().__init__()
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.norm1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, dim * mlp_ratio),
            nn.GELU(),
            nn.Linear(dim * mlp_ratio, dim),
        )

    def forward(self, x):
        h = self.norm1(x)
        x = x + self.attn(h, h, h, need_weights=False)[0]
        return x + self.mlp(self.norm2(x))


class SemanticAdapter(nn.Module):
    """Transformer blocks over the CLS token (or a token sequence), then a projection.

    A (B, d) CLS batch is run as a length-1 sequence, where attention reduces
    to its value/output projections. (B, T, d) token sequences are also
    accepted; the first output token is projected.
    """

    def __init__(self, d_in: int, d_out: int, heads: int = 4, n_blocks: int = 3,
                 mlp_ratio: int = 4):
        super().__init__()
        self.blocks = nn.ModuleList(TransformerBlock(d_in, heads, mlp_ratio) for _ in range(n_blocks))
        self.proj = nn.Linear(d_in, d_out)

    def forward(self, v):
        x = v.unsqueeze(1) if v.dim() == 2 else v
        for blk in self.blocks:
            x = blk(x)
        return self.proj(x[:, 0])


class SegmentationAdapter(nn.Module):
    def __init__(self, d_in: int, d_out: int):
        super().__init__()
        self.fc1 = nn.Linear(d_in, d_out)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(d_out, d_out)

    def forward(self, v):
        return self.fc2(self.act(self.fc1(v)))


class SCGB(nn.Module):
    """Simple cross-gating block.

    gate = GELU(W_sem f_sem); f_seg' = W_seg f_seg; out = W_fusion(gate * f_seg') + f_seg'
    """

    def __init__(self, dim: int):
        super().__init__()
        self.w_sem = nn.Linear(dim, dim)
        self.w_seg = nn.Linear(dim, dim)
        self.w_fusion = nn.Linear(dim, dim)

    def forward(self, f_sem, f_seg):
        if f_sem.shape[-1] != f_seg.shape[-1]:
            raise ValueError(f"SCGB dim mismatch: {f_sem.shape[-1]} vs {f_seg.shape[-1]}")
        gate = F.gelu(self.w_sem(f_sem))
        seg = self.w_seg(f_seg)
        return self.w_fusion(gate * seg) + seg


class ConcatFusion(nn.Module):
    """Ablation stand-in for SCGB: concatenate then project."""

    def __init__(self, dim: int):
        super().__init__()
        self.proj = nn.Linear(2 * dim, dim)

    def forward(self, f_sem, f_seg):
        return self.proj(torch.cat([f_sem, f_seg], dim=-1))


class QualityHead(nn.Module):
    def __init__(self, d_in: int, d_hidden: int, dropout: float = 0.1):
        super().__init__()
        self.drop1 = nn.Dropout(dropout)
        self.fc1 = nn.Linear(d_in, d_hidden)
        self.act = nn.GELU()
        self.drop2 = nn.Dropout(dropout)
        self.fc2 = nn.Linear(d_hidden, 1)

    def logits(self, x):
        return self.fc2(self.drop2(self.act(self.fc1(self.drop1(x))))).squeeze(-1)

    def forward(self, x):
        return torch.sigmoid(self.logits(x))


def scgb_forward(f_sem, f_seg, w_sem, w_seg, w_fusion, b_sem=None, b_seg=None, b_fusion=None):
    """Functional SCGB on plain vectors/matrices (numpy or torch), float64."""
    def t(a):
        return a if isinstance(a, torch.Tensor) else torch.tensor(np.asarray(a, dtype=np.float64))

    f_sem, f_seg = t(f_sem), t(f_seg)
    w_sem, w_seg, w_fusion = t(w_sem), t(w_seg), t(w_fusion)
    d = w_seg.shape[0]
    if f_sem.shape[-1] != d or f_seg.shape[-1] != d or w_sem.shape != (d, d) \
            or w_seg.shape != (d, d) or w_fusion.shape != (d, d):
        raise ValueError("scgb_forward: inputs and weights must share dimension d")
    zero = torch.zeros(d, dtype=w_seg.dtype)
    b_sem = zero if b_sem is None else t(b_sem)
    b_seg = zero if b_seg is None else t(b_seg)
    b_fusion = zero if b_fusion is None else t(b_fusion)
    gate = F.gelu(f_sem @ w_sem.T + b_sem)
    seg = f_seg @ w_seg.T + b_seg
    return (gate * seg) @ w_fusion.T + b_fusion + seg


def init_weights(module: nn.Module, std: float = 0.02, generator: Optional[torch.Generator] = None):
    """Truncated-normal weights (std 0.02, cut at 2 std), zero biases, unit LayerNorm."""
    for m in module.modules():
        if isinstance(m, nn.Linear):
            nn.init.trunc_normal_(m.weight, std=std, a=-2 * std, b=2 * std, generator=generator)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.MultiheadAttention):
            nn.init.trunc_normal_(m.in_proj_weight, std=std, a=-2 * std, b=2 * std, generator=generator)
            nn.init.zeros_(m.in_proj_bias)
        elif isinstance(m, nn.LayerNorm):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


class QualityModel(nn.Module):
    """Predicts the OA of one segmentation method for a patch."""

    def __init__(self, cfg: ModelConfig, encoder: Optional[nn.Module] = None, seed: Optional[int] = None):
        super().__init__()
        self.cfg = cfg
        d = cfg.d_fused
        if cfg.use_semantic:
            self.sem_adapter = (SemanticAdapter(cfg.d_sem, d, cfg.heads, cfg.adapter_blocks, cfg.mlp_ratio)
                                if cfg.use_adapters else nn.Linear(cfg.d_sem, d))
        if cfg.use_segmentation:
            self.seg_adapter = SegmentationAdapter(cfg.d_seg, d) if cfg.use_adapters else nn.Linear(cfg.d_seg, d)
        if cfg.use_semantic and cfg.use_segmentation:
            if cfg.fusion == "scgb":
                self.fusion = SCGB(d)
            elif cfg.fusion == "concat":
                self.fusion = ConcatFusion(d)
            else:
                raise ValueError(f"unknown fusion {cfg.fusion!r}")
        self.head = QualityHead(d, cfg.d_hidden, cfg.dropout)
        gen = torch.Generator().manual_seed(seed) if seed is not None else None
        init_weights(self, cfg.init_std, gen)
        self.encoder = None
        if encoder is not None:
            self.attach_encoder(encoder)

    def attach_encoder(self, encoder: nn.Module):
        encoder.requires_grad_(False)
        encoder.eval()
        self.encoder = encoder

    def train(self, mode: bool = True):
        super().train(mode)
        if self.encoder is not None:
            self.encoder.eval()
        return self

    def trainable_parameters(self) -> List[nn.Parameter]:
        return [p for p in self.parameters() if p.requires_grad]

    def semantic_branch(self, v_sem):
        return self.sem_adapter(v_sem)

    def segmentation_branch(self, seg):
        v = gap_tensor(seg)
        if v.shape[-1] != self.cfg.d_seg:
            raise ValueError(f"segmentation features have {v.shape[-1]} channels, expected {self.cfg.d_seg}")
        return self.seg_adapter(v)

    def fused(self, v_sem=None, seg=None):
        cfg = self.cfg
        if cfg.use_semantic:
            if v_sem is None:
                raise ValueError("semantic features required")
            if v_sem.shape[-1] != cfg.d_sem:
                raise ValueError(f"semantic features have dim {v_sem.shape[-1]}, expected {cfg.d_sem}")
            f_sem = self.semantic_branch(v_sem)
        if cfg.use_segmentation:
            if seg is None:
                raise ValueError("segmentation features required")
            f_seg = self.segmentation_branch(seg)
        if cfg.use_semantic and cfg.use_segmentation:
            return self.fusion(f_sem, f_seg)
        return f_sem if cfg.use_semantic else f_seg

    def forward(self, v_sem=None, seg=None):
        return self.head(self.fused(v_sem, seg))

    @torch.no_grad()
    def encode(self, images: torch.Tensor) -> torch.Tensor:
        if self.encoder is None:
            raise RuntimeError("no image encoder attached")
        return self.encoder(images)

    def forward_images(self, images, seg):
        return self(self.encode(images), seg)

    def head_state(self) -> Dict[str, torch.Tensor]:
        """Trainable state only (the frozen encoder is not checkpointed)."""
        return {k: v for k, v in self.state_dict().items() if not k.startswith("encoder.")}


# -- encoders ------------------------------------------------------------------

class TinyViTEncoder(nn.Module):
    """Small frozen ViT producing a CLS embedding; a self-contained stand-in for CLIP."""

    def __init__(self, dim: int = 64, patch: int = 8, image_size: int = 32, channels: int = 3,
                 depth: int = 2, heads: int = 4, seed: int = 0):
        super().__init__()
        if image_size % patch:
            raise ValueError("image_size must be a multiple of patch")
        self.dim = dim
        self.patch_embed = nn.Conv2d(channels, dim, patch, stride=patch)
        n_tokens = (image_size // patch) ** 2
        self.cls = nn.Parameter(torch.zeros(1, 1, dim))
        self.pos = nn.Parameter(torch.zeros(1, n_tokens + 1, dim))
        self.blocks = nn.ModuleList(TransformerBlock(dim, heads) for _ in range(depth))
        self.norm = nn.LayerNorm(dim)
        gen = torch.Generator().manual_seed(seed)
        init_weights(self, 0.02, gen)
        with torch.no_grad():
            self.patch_embed.weight.copy_(torch.randn(self.patch_embed.weight.shape, generator=gen) * 0.05)
            self.patch_embed.bias.zero_()
            self.cls.copy_(torch.randn(self.cls.shape, generator=gen) * 0.02)
            self.pos.copy_(torch.randn(self.pos.shape, generator=gen) * 0.02)
        self.requires_grad_(False)
        self.eval()

    def tokens(self, images):
        x = self.patch_embed(images).flatten(2).transpose(1, 2)
        x = torch.cat([self.cls.expand(x.shape[0], -1, -1), x], dim=1) + self.pos
        for blk in self.blocks:
            x = blk(x)
        return self.norm(x)

    def forward(self, images):
        return self.tokens(images)[:, 0]


class ToySegmentationNet(nn.Module):
    """Tiny conv segmenter; ``features`` returns the map just before the classifier as (B, h, w, c)."""

    def __init__(self, in_ch: int = 3, width: int = 16, n_classes: int = 4, seed: int = 0):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(in_ch, width, 3, padding=1), nn.GELU(),
            nn.Conv2d(width, width, 3, padding=1, stride=2), nn.GELU(),
        )
        self.classifier = nn.Conv2d(width, n_classes, 1)
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for p in self.parameters():
                p.copy_(torch.randn(p.shape, generator=gen) * 0.3)
        self.requires_grad_(False)
        self.eval()

    def features(self, images):
        return self.body(images).permute(0, 2, 3, 1)

    def forward(self, images):
        f = self.body(images)
        return F.interpolate(self.classifier(f), size=images.shape[-2:], mode="nearest")


def parameter_checksum(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, p in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


# -- feature files ---------------------------------------------------------------

class FeatureFileError(ValueError):
    pass


def write_embeddings(path, vectors: Mapping[str, np.ndarray]) -> None:
    """JSON Lines: {"dim": d} then {"id", "vec"} per record."""
    items = list(vectors.items())
    dim = int(np.asarray(items[0][1]).shape[-1]) if items else 0
    lines = [json.dumps({"dim": dim})]
    for k, v in items:
        v = np.asarray(v, dtype=np.float64).ravel()
        if v.size != dim:
            raise FeatureFileError(f"{k}: vector of length {v.size}, expected {dim}")
        lines.append(json.dumps({"id": k, "vec": [float(x) for x in v]}))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_feature_maps(path, maps: Mapping[str, np.ndarray]) -> None:
    items = list(maps.items())
    c = int(np.asarray(items[0][1]).shape[-1]) if items else 0
    lines = [json.dumps({"dim": c})]
    for k, m in items:
        m = np.asarray(m, dtype=np.float64)
        if m.ndim != 3 or m.shape[-1] != c:
            raise FeatureFileError(f"{k}: map shape {m.shape}, expected (h, w, {c})")
        h, w, _ = m.shape
        lines.append(json.dumps({"id": k, "h": h, "w": w, "c": c, "vec": [float(x) for x in m.ravel()]}))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_feature_file(path) -> Dict[str, np.ndarray]:
    """Read an embedding or feature-map file. Vectors come back 1-D, maps as (h, w, c)."""
    out: Dict[str, np.ndarray] = {}
    try:
        fh = open(path, encoding="utf-8")
    except OSError as exc:
        raise FeatureFileError(f"cannot open feature file {path}: {exc}") from exc
    with fh:
        header = fh.readline()
        try:
            dim = int(json.loads(header)["dim"])
        except (ValueError, KeyError, TypeError):
            raise FeatureFileError(f"{path}: first line must be {{\"dim\": d}}") from None
        for lineno, line in enumerate(fh, 2):
            if not line.strip():
                continue
            d = json.loads(line)
            vec = np.asarray(d["vec"], dtype=np.float64)
            if "h" in d:
                shape = (int(d["h"]), int(d["w"]), int(d["c"]))
                if shape[2] != dim or vec.size != shape[0] * shape[1] * shape[2]:
                    raise FeatureFileError(f"{path}:{lineno}: map size does not match h*w*c with c={dim}")
                vec = vec.reshape(shape)
            elif vec.size != dim:
                raise FeatureFileError(f"{path}:{lineno}: vector length {vec.size} != dim {dim}")
            if not np.all(np.isfinite(vec)):
                raise FeatureFileError(f"{path}:{lineno}: non-finite values for id {d['id']!r}")
            out[str(d["id"])] = vec
    return out


class FileEmbeddingEncoder:
    """Semantic encoder backed by precomputed embeddings (e.g. real CLIP CLS vectors)."""

    trainable = False

    def __init__(self, path):
        self.path = str(path)
        self._vecs = read_feature_file(path)
        dims = {v.shape[-1] for v in self._vecs.values()}
        if len(dims) > 1:
            raise FeatureFileError(f"{path}: inconsistent dims {dims}")
        self.dim = dims.pop() if dims else 0

    def encode(self, ids: Sequence[str]) -> np.ndarray:
        try:
            return np.stack([self._vecs[i] for i in ids])
        except KeyError as exc:
            raise FeatureFileError(f"{self.path}: no embedding for id {exc.args[0]!r}") from None


class FeatureStore:
    """Resolves a record's feature_refs to arrays, caching each file once."""

    def __init__(self, root: Union[str, Path, None] = None):
        self.root = Path(root) if root is not None else None
        self._cache: Dict[str, Dict[str, np.ndarray]] = {}

    def _resolve(self, ref: str) -> str:
        p = Path(ref)
        if not p.is_absolute() and self.root is not None:
            p = self.root / p
        return str(p)

    def file(self, ref: str) -> Dict[str, np.ndarray]:
        path = self._resolve(ref)
        if path not in self._cache:
            self._cache[path] = read_feature_file(path)
        return self._cache[path]

    def lookup(self, ref: str, patch_id: str) -> np.ndarray:
        data = self.file(ref)
        if patch_id not in data:
            raise FeatureFileError(f"{self._resolve(ref)}: no features for {patch_id!r}")
        return data[patch_id]


def semantic_key() -> str:
    return "semantic"


def segmentation_key(method_id: str) -> str:
    return f"seg:{method_id}"


def record_features(store: FeatureStore, records, method_id: str, cfg: ModelConfig):
    """Stack (semantic, segmentation) arrays for records; segmentation maps are pooled."""
    sem, seg = [], []
    for r in records:
        if cfg.use_semantic:
            ref = r.feature_refs.get(semantic_key())
            if ref is None:
                raise FeatureFileError(f"{r.patch_id}: no semantic feature_ref")
            sem.append(store.lookup(ref, r.patch_id))
        if cfg.use_segmentation:
            ref = r.feature_refs.get(segmentation_key(method_id), r.feature_refs.get("segmentation"))
            if ref is None:
                raise FeatureFileError(f"{r.patch_id}: no segmentation feature_ref for {method_id}")
            arr = store.lookup(ref, r.patch_id)
            seg.append(arr.mean(axis=(0, 1)) if arr.ndim == 3 else arr)
    sem_arr = np.stack(sem) if sem else None
    seg_arr = np.stack(seg) if seg else None
    return sem_arr, seg_arr


# -- checkpoints ------------------------------------------------------------------

def save_checkpoint(model: QualityModel, path, step: int, train_loss: float,
                    metrics: Optional[dict] = None) -> None:
    path = Path(path)
    torch.save({"config": asdict(model.cfg), "state": model.head_state()}, path)
    sidecar = {"config_hash": model.cfg.config_hash(), "step": int(step),
               "train_loss": float(train_loss), "metrics": metrics or {}}
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")


def load_checkpoint(path) -> QualityModel:
    blob = torch.load(path, map_location="cpu", weights_only=False)
    model = QualityModel(ModelConfig(**blob["config"]))
    model.load_state_dict(blob["state"])
    model.eval()
    return model
