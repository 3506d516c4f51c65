import dataclasses
import math

import numpy as np
import pytest

from udet.data.dataset import Sample
from udet.data.phantom import NoduleSpec, generate_phantom
from udet.data.split import split_dataset
from udet.metrics import MetricsLog, MetricsRecord, weighted_bce
from udet.model import build
from udet.tensor import Parameter, Tape, backward
from udet.train import (OptimizerState, PlateauTracker, TrainConfig, adam_step, cross_validate, init_weights,
                        step_size, summarize, train_fold)


def _param(value, grad):
    p = Parameter(np.array(value, dtype=np.float64), name="p")
    p.grad = np.array(grad, dtype=np.float64)
    return p


# ---------------------------------------------------------------- optimizer

def test_zero_gradient_leaves_parameters():
    p = _param([1.0, -2.0], [0.0, 0.0])
    adam_step([p], OptimizerState(lr=1e-4), TrainConfig())
    assert p.data.tolist() == [1.0, -2.0]


def test_first_step_moves_by_lr0(f64):
    cfg = TrainConfig()
    p = _param([0.5], [1.0])
    state = OptimizerState(lr=cfg.lr0)
    adam_step([p], state, cfg)
    assert 0.5 - p.data[0] == pytest.approx(cfg.lr0, rel=1e-6)
    assert state.t == 1


def test_constant_gradient_keeps_unit_steps(f64):
    cfg = TrainConfig()
    p = _param([0.0], [1.0])
    state = OptimizerState(lr=cfg.lr0)
    for t in range(1, 6):
        before = p.data[0]
        adam_step([p], state, cfg)
        assert before - p.data[0] == pytest.approx(step_size(cfg.lr0, cfg.decay, t - 1), rel=1e-6)


def test_decay_halves_at_a_million_steps():
    assert step_size(1e-4, 1e-6, 10**6) == pytest.approx(5e-5, rel=1e-15)


def test_zero_learning_rate_is_bit_identical(rng):
    cfg = TrainConfig(lr0=0.0)
    p = _param(rng.standard_normal(5), rng.standard_normal(5))
    before = p.data.tobytes()
    adam_step([p], OptimizerState(lr=0.0), cfg)
    assert p.data.tobytes() == before


def test_non_finite_gradient_names_the_parameter():
    p = _param([1.0], [np.nan])
    p.name = "encoder.d1.conv1.weight"
    with pytest.raises(FloatingPointError, match="encoder.d1.conv1.weight"):
        adam_step([p], OptimizerState(), TrainConfig())


def test_config_validation_and_text_round_trip(tmp_path):
    with pytest.raises(ValueError):
        TrainConfig(beta1=1.0)
    with pytest.raises(ValueError):
        TrainConfig(early_stop_patience=0)
    with pytest.raises(ValueError):
        TrainConfig(lr0=-1)
    cfg = TrainConfig(max_epochs=7, augment=False, width_scale="1/8", pos_weight="12.5")
    path = tmp_path / "c.txt"
    path.write_text(cfg.to_text() + "# trailing comment\n")
    back = TrainConfig.from_file(path)
    assert back == cfg and back.digest() == cfg.digest()
    with pytest.raises(ValueError, match="unknown"):
        TrainConfig.from_text("learning_rate = 3\n")


# ---------------------------------------------------------------- schedule

def _run_tracker(losses, **kw):
    tr = PlateauTracker(TrainConfig(**kw))
    events = []
    for epoch, loss in enumerate(losses, start=1):
        improved, reduce, stop = tr.update(epoch, loss)
        events.append((improved, reduce, stop))
        if stop:
            return epoch, events, tr
    return None, events, tr


def test_constant_loss_stops_after_patience():
    stopped, events, tr = _run_tracker([1.0] * 50)
    assert stopped == 1 + 10
    assert tr.best_epoch == 1
    assert [e[1] for e in events].count(True) == 2  # epochs 6 and 11


def test_improving_loss_never_stops():
    stopped, events, tr = _run_tracker(list(np.linspace(1, 0.1, 40)))
    assert stopped is None and tr.best_epoch == 40
    assert not any(e[1] for e in events)


def test_best_epoch_has_lowest_loss_so_far(rng):
    losses = list(rng.random(60))
    stopped, _, tr = _run_tracker(losses)
    seen = losses[:stopped] if stopped else losses
    assert losses[tr.best_epoch - 1] == min(seen)


# ---------------------------------------------------------------- init

def test_init_variance_matches_fan_in():
    g = build("unet", 128, 1)
    init_weights(g, 0)
    w = g.params["decoder.d1.conv2.weight"].data
    assert w.shape == (64, 64, 3, 3)
    target = 2 / (9 * 64)
    assert abs(w.var() - target) < 0.2 * target


def test_init_biases_and_norms():
    g = build("udet", 32, "1/8")
    init_weights(g, 3)
    for name, p in g.params.items():
        if name.endswith(".bias") or name.endswith(".beta"):
            assert np.all(p.data == 0), name
        elif name.endswith(".gamma") or name.endswith(".fusion"):
            assert np.all(p.data == 1), name
        else:
            assert np.any(p.data != 0), name


def test_init_is_deterministic():
    a, b, c = (build("udet", 32, "1/8") for _ in range(3))
    init_weights(a, 5)
    init_weights(b, 5)
    init_weights(c, 6)
    for name in a.params:
        assert a.params[name].data.tobytes() == b.params[name].data.tobytes()
    assert a.params["encoder.d1.conv1.weight"].data.tobytes() != c.params["encoder.d1.conv1.weight"].data.tobytes()


# ---------------------------------------------------------------- loops

def _phantoms(n, size=32, seed=0):
    spec = NoduleSpec(count=1, radius_range=(2, 4))
    return [generate_phantom(np.random.default_rng([seed, i]), size, spec, f"s{i}") for i in range(n)]


def _tiny_cfg(**kw):
    base = dict(max_epochs=2, input_size=32, width_scale="1/8", augment=False)
    base.update(kw)
    return TrainConfig(**base)


def test_loss_decreases_over_first_steps():
    spec = NoduleSpec(count=2, radius_range=(6, 12))
    samples = [generate_phantom(np.random.default_rng([0, i]), 128, spec) for i in range(2)]
    x = np.stack([s.image for s in samples])[:, None].astype(np.float32)
    y = np.stack([s.mask for s in samples])[:, None]
    w = float(y.size - y.sum()) / y.sum()
    cfg = TrainConfig()
    decreasing = 0
    for seed in range(5):
        g = build("udet", 128, "1/4")
        init_weights(g, seed)
        state = OptimizerState(lr=cfg.lr0)
        losses = []
        for _ in range(6):
            g.zero_grads()
            with Tape():
                loss = weighted_bce(g.forward(x, "train", np.random.default_rng(seed)), y, w)
                backward(loss)
            adam_step(g.parameters(), state, cfg)
            losses.append(loss.item())
        decreasing += all(b < a for a, b in zip(losses, losses[1:]))
    assert decreasing >= 4


def test_train_fold_is_deterministic(tmp_path):
    samples = _phantoms(4)
    logs = []
    for run in range(2):
        g = build("udet", 32, "1/8")
        init_weights(g, 0)
        log = MetricsLog(tmp_path / f"m{run}.csv")
        res = train_fold(g, samples[:3], samples[3:], _tiny_cfg(augment=True), log=log)
        logs.append((tmp_path / f"m{run}.csv").read_bytes())
        assert [e for e, split, _ in res.history] == [1, 1, 2, 2]
    assert logs[0] == logs[1]


def test_train_fold_keeps_best_state():
    samples = _phantoms(4)
    g = build("udet", 32, "1/8")
    init_weights(g, 1)
    res = train_fold(g, samples[:3], samples[3:], _tiny_cfg(max_epochs=3))
    val = [(e, r.loss) for e, split, r in res.history if split == "val"]
    best_epoch = min(val, key=lambda t: t[1])[0]
    assert res.best_epoch == best_epoch
    assert set(res.best_state) == set(g.state_dict())


def test_train_fold_rejects_empty_and_positive_free_sets():
    g = build("udet", 32, "1/8")
    samples = _phantoms(2)
    with pytest.raises(ValueError):
        train_fold(g, [], samples, _tiny_cfg())
    empty = [Sample(s.image, np.zeros_like(s.mask)) for s in samples]
    with pytest.raises(ValueError, match="positive"):
        train_fold(g, empty, samples, _tiny_cfg())


def test_cross_validate_four_folds_of_two(tmp_path):
    samples = _phantoms(8)
    split = split_dataset(samples, test_fraction=0.0, folds=4, seed=0)
    res = cross_validate(split, _tiny_cfg(max_epochs=1), checkpoint_dir=tmp_path)
    assert len(res.folds) == 4
    for k in range(4):
        _, va = split.fold(k)
        assert len(va) == 2
        assert (tmp_path / f"fold{k}.ckpt").exists()
    w0 = [r.model.params["encoder.d1.conv1.weight"].data.tobytes() for r in res.folds]
    assert len(set(w0)) == 4
    assert set(res.summary) == {"dsc", "sen", "ppv"}


def test_summary_of_identical_folds():
    out = summarize([MetricsRecord(0.7, 0.8, 0.6)] * 4)
    assert out["dsc"][0] == pytest.approx(0.7) and out["dsc"][1] == 0
    nan = summarize([MetricsRecord(math.nan, math.nan, math.nan)])
    assert all(math.isnan(v[0]) for v in nan.values())


def test_bn_momentum_is_applied():
    g = build("udet", 32, "1/8")
    init_weights(g, 0)
    train_fold(g, _phantoms(2), _phantoms(1, seed=1), _tiny_cfg(max_epochs=1, bn_momentum=0.8))
    assert all(bn.spec.momentum == 0.8 for bn in g.reg.norms)
    assert dataclasses.replace(TrainConfig(), bn_momentum=0.5).bn_momentum == 0.5
