import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from segqa.dataset import DatasetError, MissingLabelsError
from segqa.model import ModelConfig, QualityModel, TinyViTEncoder, parameter_checksum
from segqa.training import (LossConfig, TrainConfig, TrainingError, evaluate_split, kl_loss, lr_factor,
                            make_optimizer, mse_loss, total_loss, train, write_loss_curve)

unit = st.floats(0.0, 1.0, allow_nan=False)
batches = st.integers(2, 12).flatmap(lambda n: st.tuples(st.lists(unit, min_size=n, max_size=n),
                                                          st.lists(unit, min_size=n, max_size=n)))


def _kl_direct(S, Q, eps=1e-8):
    ps, qs = sum(s + eps for s in S), sum(q + eps for q in Q)
    return math.fsum((s + eps) / ps * math.log(((s + eps) / ps) / ((q + eps) / qs)) for s, q in zip(S, Q))


# -- losses -----------------------------------------------------------------------

def test_mse_example():
    assert mse_loss([1.0, 0.0], [0.5, 0.5]) == pytest.approx(0.25, abs=1e-15)


def test_kl_matches_direct_sum():
    S, Q = [0.9, 0.1], [0.5, 0.5]
    assert kl_loss(S, Q) == pytest.approx(_kl_direct(S, Q), abs=1e-14)


@settings(max_examples=200, deadline=None)
@given(batches)
def test_kl_properties(pair):
    S, Q = pair
    assert kl_loss(S, Q) >= -1e-15
    assert abs(kl_loss(S, S)) <= 1e-12
    assert kl_loss(S, Q) == pytest.approx(_kl_direct(S, Q), rel=1e-9, abs=1e-12)


@settings(max_examples=200, deadline=None)
@given(batches)
def test_total_loss_composition(pair):
    S, Q = pair
    assert total_loss(S, Q, LossConfig(alpha=0.0)) == mse_loss(S, Q)
    assert abs(total_loss(S, Q) - (mse_loss(S, Q) + 0.5 * kl_loss(S, Q))) <= 1e-15


def test_loss_errors():
    with pytest.raises(ValueError, match="batch"):
        kl_loss([0.5], [0.5])
    with pytest.raises(ValueError, match="length"):
        mse_loss([0.5, 0.1], [0.5])
    with pytest.raises(ValueError):
        kl_loss([-0.1, 0.5], [0.5, 0.5])
    with pytest.raises(ValueError):
        TrainConfig(batch_size=1)


def test_loss_tensor_gradients_finite_difference():
    g = torch.Generator().manual_seed(1)
    S = torch.rand(6, generator=g, dtype=torch.float64)
    Q = torch.rand(6, generator=g, dtype=torch.float64).requires_grad_(True)
    analytic, = torch.autograd.grad(total_loss(S, Q), Q)
    h = 1e-6
    for i in range(6):
        qp, qm = Q.detach().clone(), Q.detach().clone()
        qp[i] += h
        qm[i] -= h
        num = (total_loss(S, qp) - total_loss(S, qm)).item() / (2 * h)
        assert abs(num - analytic[i].item()) <= 1e-6 * max(1.0, abs(num))


# -- schedule -----------------------------------------------------------------------

def test_schedule_shape():
    cfg = TrainConfig(max_steps=100, warmup_steps=4, decay_step_size=10, decay_gamma=0.5)
    assert [lr_factor(s, cfg) for s in range(4)] == [0.2, 0.4, 0.6, 0.8]
    assert lr_factor(4, cfg) == 1.0 and lr_factor(13, cfg) == 1.0
    assert lr_factor(14, cfg) == 0.5 and lr_factor(34, cfg) == 0.125
    cfg = TrainConfig(max_steps=2000)
    assert cfg.warmup == 100 and cfg.decay_every == 800


def test_schedule_constant_when_disabled(small_cfg):
    cfg = TrainConfig(max_steps=50, warmup_steps=0, decay_gamma=1.0, learning_rate=3e-4)
    model = QualityModel(small_cfg, seed=0)
    opt, sched = make_optimizer(model, cfg)
    lrs = []
    for _ in range(50):
        lrs.append(opt.param_groups[0]["lr"])
        opt.step()
        sched.step()
    assert lrs == [3e-4] * 50


def test_zero_lr_leaves_parameters_unchanged(corpus):
    man, store = corpus
    cfg = ModelConfig(d_sem=32, d_seg=16, d_fused=32, d_hidden=16, heads=4)
    model = QualityModel(cfg, seed=0)
    before = {k: v.clone() for k, v in model.state_dict().items()}
    train(model, man, "m1", TrainConfig(learning_rate=0.0, max_steps=3, batch_size=4), store=store)
    for k, v in model.state_dict().items():
        assert torch.equal(v, before[k]), k


# -- training loop ---------------------------------------------------------------------

def _cfg():
    return ModelConfig(d_sem=32, d_seg=16, d_fused=32, d_hidden=16, heads=4)


def test_training_is_deterministic(corpus):
    man, store = corpus
    tc = TrainConfig(max_steps=20, batch_size=8, learning_rate=1e-3, seed=4)
    a = train(QualityModel(_cfg(), seed=1), man, "m2", tc, store=store)
    b = train(QualityModel(_cfg(), seed=1), man, "m2", tc, store=store)
    assert a.curve == b.curve
    assert parameter_checksum(a.model) == parameter_checksum(b.model)


def test_training_reduces_loss(corpus):
    man, store = corpus
    res = train(QualityModel(_cfg(), seed=0), man, "m1",
                TrainConfig(max_steps=200, batch_size=8, learning_rate=1e-3), store=store)
    first = np.mean([r["mse"] for r in res.curve[:10]])
    last = np.mean([r["mse"] for r in res.curve[-10:]])
    assert last < first


def test_missing_labels_error(corpus):
    man, store = corpus
    with pytest.raises(MissingLabelsError, match="m9"):
        train(QualityModel(_cfg(), seed=0), man, "m9", TrainConfig(max_steps=1), store=store)


def test_non_finite_loss_aborts_with_step(corpus):
    man, store = corpus
    model = QualityModel(_cfg(), seed=0)
    with torch.no_grad():
        model.head.fc2.bias.fill_(float("nan"))
    with pytest.raises(TrainingError) as info:
        train(model, man, "m1", TrainConfig(max_steps=5, batch_size=4), store=store)
    assert info.value.step == 0


def test_evaluate_split(corpus):
    man, store = corpus
    model = QualityModel(_cfg(), seed=0)
    table, bundle = evaluate_split(model, man, "m1", "test", store=store)
    assert list(table.image_ids) == [r.patch_id for r in man.split("test")]
    assert bundle.n == len(man.split("test"))
    assert np.all((table.scores > 0) & (table.scores < 1))
    t2, _ = evaluate_split(model, man, "m1", "test", store=store)
    assert np.array_equal(table.scores, t2.scores)


def test_evaluate_empty_split(corpus):
    man, store = corpus
    empty = man.with_records([r for r in man.records if r.split == "train"])
    with pytest.raises(DatasetError, match="empty"):
        evaluate_split(QualityModel(_cfg(), seed=0), empty, "m1", "test", store=store)


def test_loss_curve_csv(tmp_path):
    curve = [{"step": 0, "lr": 1e-4, "mse": 0.5, "kl": 0.1, "total": 0.55}]
    write_loss_curve(curve, tmp_path / "l.csv")
    assert (tmp_path / "l.csv").read_text().splitlines() == ["step,lr,mse,kl,total", "0,0.0001,0.5,0.1,0.55"]


def test_frozen_encoder_unchanged_by_training(corpus):
    man, store = corpus
    enc = TinyViTEncoder(dim=32, patch=8, image_size=16, heads=4, seed=0)
    before = parameter_checksum(enc)
    model = QualityModel(_cfg(), encoder=enc, seed=0)
    trainable = {id(p) for p in model.trainable_parameters()}
    assert not any(id(p) in trainable for p in enc.parameters())
    rng = np.random.default_rng(0)
    images = {r.patch_id: rng.normal(size=(3, 16, 16)).astype(np.float32) for r in man.records}
    res = train(model, man, "m1", TrainConfig(max_steps=15, batch_size=8, learning_rate=1e-2),
                store=store, images=images)
    assert parameter_checksum(enc) == before
    assert not enc.training
    assert all(p.grad is None for p in enc.parameters())
    assert res.curve[-1]["step"] == 14
