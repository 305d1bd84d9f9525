import math

import numpy as np
import pytest
import torch

from oracles import central_diff, max_rel_error
from segqa.model import (SCGB, FileEmbeddingEncoder, ModelConfig, QualityHead, QualityModel,
                         SegmentationAdapter, SemanticAdapter, TinyViTEncoder, ToySegmentationNet, gap,
                         load_checkpoint, parameter_checksum, read_feature_file, save_checkpoint,
                         scgb_forward, write_embeddings, write_feature_maps)


def gelu(v):
    return 0.5 * v * (1 + math.erf(v / math.sqrt(2)))


# -- GAP ------------------------------------------------------------------------

def test_gap_examples():
    assert np.all(gap(np.full((5, 7, 3), 3.5)).values == 3.5)
    assert gap(np.array([[[1.0], [2.0]], [[3.0], [4.0]]])).values.tolist() == [2.5]
    px = np.array([1.0, -2.0, 0.5])
    assert np.array_equal(gap(px.reshape(1, 1, 3)).values, px)


def test_gap_permutation_and_affine(rng):
    m = rng.normal(size=(6, 5, 4))
    flat = m.reshape(-1, 4)
    perm = flat[rng.permutation(flat.shape[0])].reshape(6, 5, 4)
    np.testing.assert_allclose(gap(perm).values, gap(m).values, atol=1e-15)
    np.testing.assert_allclose(gap(2.5 * m - 1.0).values, 2.5 * gap(m).values - 1.0, atol=1e-14)


# -- SCGB -----------------------------------------------------------------------

def test_scgb_zero_gate_is_residual(rng):
    f_sem, f_seg = rng.normal(size=4), rng.normal(size=4)
    out = scgb_forward(f_sem, f_seg, np.zeros((4, 4)), np.eye(4), rng.normal(size=(4, 4)))
    np.testing.assert_allclose(out.numpy(), f_seg, atol=1e-15)
    out = scgb_forward(np.zeros(4), f_seg, rng.normal(size=(4, 4)), np.eye(4), rng.normal(size=(4, 4)))
    np.testing.assert_allclose(out.numpy(), f_seg, atol=1e-15)


def test_scgb_hand_evaluation_d2():
    f_sem, f_seg = [0.5, -1.0], [2.0, 1.0]
    ws = [[1.0, 2.0], [-0.5, 0.25]]
    wg = [[0.5, 0.0], [1.0, -1.0]]
    wf = [[2.0, 1.0], [0.0, 3.0]]
    gate = [gelu(ws[i][0] * f_sem[0] + ws[i][1] * f_sem[1]) for i in range(2)]
    seg = [wg[i][0] * f_seg[0] + wg[i][1] * f_seg[1] for i in range(2)]
    prod = [gate[i] * seg[i] for i in range(2)]
    expected = [wf[i][0] * prod[0] + wf[i][1] * prod[1] + seg[i] for i in range(2)]
    out = scgb_forward(f_sem, f_seg, ws, wg, wf)
    np.testing.assert_allclose(out.numpy(), expected, rtol=1e-14)


def test_scgb_module_matches_functional(rng):
    blk = SCGB(4).double()
    a, b = torch.tensor(rng.normal(size=(3, 4))), torch.tensor(rng.normal(size=(3, 4)))
    ref = scgb_forward(a, b, blk.w_sem.weight, blk.w_seg.weight, blk.w_fusion.weight,
                       blk.w_sem.bias, blk.w_seg.bias, blk.w_fusion.bias)
    torch.testing.assert_close(blk(a, b), ref)


def test_scgb_dim_mismatch():
    with pytest.raises(ValueError):
        scgb_forward(np.ones(3), np.ones(4), np.eye(4), np.eye(4), np.eye(4))
    with pytest.raises(ValueError):
        SCGB(4)(torch.ones(1, 3), torch.ones(1, 4))


# -- gradient checks ---------------------------------------------------------------

def _randomize(module, gen):
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(torch.randn(p.shape, generator=gen, dtype=p.dtype) * 0.7)


def _gradcheck(module, inputs, gen):
    module = module.double().eval()
    _randomize(module, gen)
    inputs = [x.clone().requires_grad_(True) for x in inputs]
    w = None

    def f():
        nonlocal w
        out = module(*inputs)
        if w is None:
            w = torch.randn(out.shape, generator=gen, dtype=out.dtype)
        return (out * w).sum()

    params = list(module.parameters()) + inputs
    loss = f()
    analytic = torch.autograd.grad(loss, params)
    numeric = central_diff(f, [p.data for p in params], h=1e-5)
    return max_rel_error(analytic, numeric)


@pytest.mark.parametrize("name", ["scgb", "sem_adapter", "sem_adapter_tokens", "seg_adapter", "head"])
def test_gradients_match_finite_differences(name):
    gen = torch.Generator().manual_seed(0)
    d = 4
    x = torch.randn(3, d, generator=gen, dtype=torch.float64)
    if name == "scgb":
        mod, inputs = SCGB(d), [x, torch.randn(3, d, generator=gen, dtype=torch.float64)]
    elif name == "sem_adapter":
        mod, inputs = SemanticAdapter(d, d, heads=2), [x]
    elif name == "sem_adapter_tokens":
        mod, inputs = SemanticAdapter(d, d, heads=2), [torch.randn(2, 3, d, generator=gen, dtype=torch.float64)]
    elif name == "seg_adapter":
        mod, inputs = SegmentationAdapter(d, d), [x]
    else:
        mod, inputs = QualityHead(d, d), [x]
    assert _gradcheck(mod, inputs, gen) < 1e-4


# -- branches -------------------------------------------------------------------------

def _zero_blocks(adapter):
    with torch.no_grad():
        for blk in adapter.blocks:
            blk.attn.out_proj.weight.zero_()
            blk.attn.out_proj.bias.zero_()
            blk.mlp[2].weight.zero_()
            blk.mlp[2].bias.zero_()


def test_semantic_branch_zeroed_blocks_pass_through(tmp_path, rng):
    vecs = {"a": rng.normal(size=8), "b": rng.normal(size=8)}
    write_embeddings(tmp_path / "e.jsonl", vecs)
    enc = FileEmbeddingEncoder(tmp_path / "e.jsonl")
    cfg = ModelConfig(d_sem=8, d_seg=4, d_fused=8, d_hidden=4, heads=2)
    model = QualityModel(cfg, seed=0).double().eval()
    _zero_blocks(model.sem_adapter)
    with torch.no_grad():
        model.sem_adapter.proj.weight.copy_(torch.eye(8))
        model.sem_adapter.proj.bias.zero_()
    v = torch.tensor(enc.encode(["a", "b"]))
    torch.testing.assert_close(model.semantic_branch(v), v, rtol=0, atol=1e-15)


def test_semantic_branch_deterministic(tmp_path, rng):
    e = rng.normal(size=8)
    write_embeddings(tmp_path / "e.jsonl", {"p1": e, "p2": e.copy()})
    enc = FileEmbeddingEncoder(tmp_path / "e.jsonl")
    cfg = ModelConfig(d_sem=8, d_seg=4, d_fused=8, d_hidden=4, heads=2)
    model = QualityModel(cfg, seed=3).eval()
    with torch.no_grad():
        out = model.semantic_branch(torch.tensor(enc.encode(["p1", "p2"]), dtype=torch.float32))
        again = model.semantic_branch(torch.tensor(enc.encode(["p1", "p2"]), dtype=torch.float32))
    assert torch.equal(out[0], out[1])
    assert torch.equal(out, again)


def test_segmentation_branch_identity_path():
    cfg = ModelConfig(d_sem=8, d_seg=4, d_fused=4, d_hidden=4, heads=2)
    model = QualityModel(cfg, seed=0).double().eval()
    ad = model.seg_adapter
    with torch.no_grad():
        for lin in (ad.fc1, ad.fc2):
            lin.weight.copy_(torch.eye(4))
            lin.bias.zero_()
    v = torch.tensor([-1.0, 0.0, 0.5, 2.0], dtype=torch.float64)
    m = v.expand(1, 3, 5, 4).clone()
    out = model.segmentation_branch(m)[0]
    torch.testing.assert_close(out, torch.tensor([gelu(x) for x in v.tolist()], dtype=torch.float64))


def test_segmentation_branch_spatial_permutation_and_repeat(rng):
    cfg = ModelConfig(d_sem=8, d_seg=4, d_fused=8, d_hidden=4, heads=2)
    model = QualityModel(cfg, seed=1).double().eval()
    m = rng.normal(size=(1, 4, 4, 4))
    flat = m.reshape(16, 4)[rng.permutation(16)].reshape(1, 4, 4, 4)
    with torch.no_grad():
        a = model.segmentation_branch(torch.tensor(m))
        b = model.segmentation_branch(torch.tensor(flat))
        c = model.segmentation_branch(torch.tensor(m))
    torch.testing.assert_close(a, b, rtol=0, atol=1e-14)
    assert torch.equal(a, c)


# -- full model -------------------------------------------------------------------------

def test_forward_range_and_saturation(small_cfg, rng):
    model = QualityModel(small_cfg, seed=0).eval()
    sem = torch.tensor(rng.normal(0, 50, size=(64, 32)), dtype=torch.float32)
    seg = torch.tensor(rng.normal(0, 50, size=(64, 2, 2, 16)), dtype=torch.float32)
    with torch.no_grad():
        s = model(sem, seg).double()
        assert torch.all((s > 0) & (s < 1))
        model.head.fc2.bias.fill_(20.0)
        assert torch.all(model(sem[:4] * 0, seg[:4] * 0) > 0.999999)


def test_forward_reproducible_from_seed(small_cfg, rng):
    sem = torch.tensor(rng.normal(size=(5, 32)), dtype=torch.float32)
    seg = torch.tensor(rng.normal(size=(5, 3, 3, 16)), dtype=torch.float32)
    a = QualityModel(small_cfg, seed=11).eval()
    b = QualityModel(small_cfg, seed=11).eval()
    assert parameter_checksum(a) == parameter_checksum(b)
    with torch.no_grad():
        assert torch.equal(a(sem, seg), b(sem, seg))
    assert parameter_checksum(QualityModel(small_cfg, seed=12)) != parameter_checksum(a)


def test_dropout_only_in_training(small_cfg, rng):
    model = QualityModel(small_cfg, seed=0)
    sem = torch.tensor(rng.normal(size=(8, 32)), dtype=torch.float32)
    seg = torch.tensor(rng.normal(size=(8, 16)), dtype=torch.float32)
    model.eval()
    with torch.no_grad():
        assert torch.equal(model(sem, seg), model(sem, seg))


def test_forward_dim_mismatch(small_cfg):
    model = QualityModel(small_cfg, seed=0)
    with pytest.raises(ValueError):
        model(torch.zeros(2, 31), torch.zeros(2, 16))
    with pytest.raises(ValueError):
        model(torch.zeros(2, 32), torch.zeros(2, 15))


def test_ablation_variants_build_and_run(rng):
    sem = torch.tensor(rng.normal(size=(3, 8)), dtype=torch.float32)
    seg = torch.tensor(rng.normal(size=(3, 4)), dtype=torch.float32)
    base = dict(d_sem=8, d_seg=4, d_fused=8, d_hidden=4, heads=2)
    for kw in ({"use_adapters": False}, {"fusion": "concat"}, {"use_semantic": False},
               {"use_segmentation": False}):
        m = QualityModel(ModelConfig(**base, **kw), seed=0).eval()
        with torch.no_grad():
            out = m(sem if m.cfg.use_semantic else None, seg if m.cfg.use_segmentation else None)
        assert out.shape == (3,)


def test_tiny_vit_encoder_frozen_and_deterministic(rng):
    enc = TinyViTEncoder(dim=16, patch=8, image_size=16, heads=4, seed=0)
    assert not any(p.requires_grad for p in enc.parameters())
    img = torch.tensor(rng.normal(size=(2, 3, 16, 16)), dtype=torch.float32)
    assert enc(img).shape == (2, 16)
    assert torch.equal(enc(img), TinyViTEncoder(dim=16, patch=8, image_size=16, heads=4, seed=0)(img))


def test_toy_segmenter_features():
    net = ToySegmentationNet(width=8, n_classes=3, seed=0)
    img = torch.zeros(1, 3, 16, 16)
    assert net.features(img).shape == (1, 8, 8, 8)
    assert net(img).shape == (1, 3, 16, 16)


# -- files / checkpoints ------------------------------------------------------------------

def test_feature_files_round_trip(tmp_path, rng):
    vecs = {"a": rng.normal(size=5), "b": rng.normal(size=5)}
    write_embeddings(tmp_path / "v.jsonl", vecs)
    lines = (tmp_path / "v.jsonl").read_text().splitlines()
    assert lines[0] == '{"dim": 5}'
    back = read_feature_file(tmp_path / "v.jsonl")
    for k in vecs:
        np.testing.assert_array_equal(back[k], vecs[k])
    maps = {"a": rng.normal(size=(2, 3, 4))}
    write_feature_maps(tmp_path / "m.jsonl", maps)
    np.testing.assert_array_equal(read_feature_file(tmp_path / "m.jsonl")["a"], maps["a"])


def test_checkpoint_round_trip(tmp_path, small_cfg, rng):
    model = QualityModel(small_cfg, seed=5).eval()
    save_checkpoint(model, tmp_path / "c.pt", step=10, train_loss=0.5, metrics={"srocc": 0.9})
    back = load_checkpoint(tmp_path / "c.pt")
    assert parameter_checksum(back) == parameter_checksum(model)
    import json
    side = json.loads((tmp_path / "c.json").read_text())
    assert side["config_hash"] == small_cfg.config_hash() and side["step"] == 10
