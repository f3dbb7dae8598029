import math

import numpy as np
import pytest

from slimnic import codec as C
from slimnic import trainer as TR
from slimnic.errors import TrainingError
from slimnic.rng import RngState
from slimnic.tensor import Tensor


def quick(**kw):
    base = dict(steps=20, batch_size=2, patch_size=32, seed=0)
    base.update(kw)
    return TR.TrainConfig(**base)


@pytest.mark.parametrize("field,value", [("lmbda", -1.0), ("gamma", float("nan")),
                                         ("lr", float("inf")), ("steps", 0)])
def test_config_rejects(field, value):
    with pytest.raises(ValueError):
        TR.TrainConfig(**{field: value})


def test_default_gamma_is_operating_point():
    assert TR.TrainConfig().gamma == 0.01


# ---------------------------------------------------------------- loss_step


@pytest.mark.parametrize("lmbda,gamma", [(0.01, 0.0), (0.0, 0.0), (0.005, 0.3)])
def test_loss_recombination(desk_model, train_images, lmbda, gamma):
    cfg = quick(lmbda=lmbda, gamma=gamma)
    batch = Tensor(train_images.data[:2, :, :32, :32])
    lb = TR.loss_step(desk_model, batch, cfg, RngState(1), backward=False)
    assert lb.total == pytest.approx(lb.recombined(), rel=1e-6)
    if gamma == 0:
        assert lb.total == pytest.approx(lb.R + lmbda * lb.D, rel=1e-6)
    if lmbda == 0 and gamma == 0:
        assert lb.total == pytest.approx(lb.R, rel=1e-6)
    assert lb.R >= 0 and lb.D >= 0 and 0 <= lb.s_mean <= 1


def test_gradient_flow(desk_model, train_images):
    batch = Tensor(train_images.data[:2, :, :32, :32])
    TR.loss_step(desk_model, batch, quick(gamma=0.1), RngState(1))
    missing = [n for n, t in desk_model.named_parameters() if t.grad is None or not np.any(t.grad)]
    assert missing == []


def test_non_finite_loss_raises_with_step(desk_model, train_images):
    desk_model.gs[-1].bias.data[:] = np.nan
    with pytest.raises(TrainingError) as err:
        TR.train(desk_model, train_images, quick(steps=3))
    assert err.value.step == 0
    assert err.value.report is not None and not err.value.report.completed


# ---------------------------------------------------------------- train


def test_smoke_loss_decreases(train_images):
    model = C.build_model(seed=0)
    rep = TR.train(model, train_images, TR.TrainConfig(gamma=0.0, steps=200, seed=0))
    first = np.mean([r[4] for r in rep.rows[:10]])
    last = np.mean([r[4] for r in rep.rows[-10:]])
    assert len(rep.rows) == 200
    assert last < first


def test_train_is_deterministic(train_images):
    runs = []
    for _ in range(2):
        model = C.build_model(seed=4)
        rep = TR.train(model, train_images, quick(seed=4, gamma=0.05))
        runs.append((rep.rows, [t.data.tobytes() for _, t in model.named_parameters()]))
    assert runs[0] == runs[1]


def test_every_logged_step_recombines(train_images):
    cfg = quick(steps=15, gamma=0.2, lmbda=0.003)
    rep = TR.train(C.build_model(seed=0), train_images, cfg)
    for _, r, d, s, total in rep.rows:
        assert total == pytest.approx(r + cfg.lmbda * d + cfg.gamma * s, rel=1e-6)


def test_gamma_zero_matches_model_without_slots(train_images):
    cfg = quick(gamma=0.0, steps=10)
    masked = TR.train(C.build_model(seed=2), train_images, cfg)
    plain = TR.train(C.build_model(seed=2, abcm=False), train_images, cfg)
    assert [r[:3] for r in masked.rows] == [r[:3] for r in plain.rows]


def test_lr_halving_changes_trajectory(train_images):
    a = TR.train(C.build_model(seed=0), train_images, quick(steps=8))
    b = TR.train(C.build_model(seed=0), train_images, quick(steps=8, lr_halve_step=4))
    assert a.rows[:5] == b.rows[:5]
    assert a.rows[5:] != b.rows[5:]


def test_empty_dataset_rejected():
    with pytest.raises(ValueError):
        TR.train(C.build_model(), np.zeros((0, 3, 32, 32), np.float32), quick())


def test_adam_single_step_matches_hand_update():
    p = Tensor(np.array([1.0, -2.0], np.float32), requires_grad=True)
    p.grad = np.array([0.5, -0.25], np.float32)
    TR.Adam([p], lr=0.1).step()
    # first step of bias-corrected moments: update = lr * g / (|g| + eps)
    np.testing.assert_allclose(p.data, [0.9, -1.9], rtol=1e-6)


# ---------------------------------------------------------------- sweep


def test_sweep_gamma_zero_keeps_everything(train_images):
    rep = TR.gamma_sweep(C.build_model(seed=0), train_images, quick(), [0.0])
    assert rep.rows[0].mean_sparsity == 1.0


def test_sweep_uses_same_init(train_images):
    template = C.build_model(seed=0)
    rep, models = TR.gamma_sweep(template, train_images, quick(steps=3), [0.0, 0.5],
                                 return_models=True)
    assert [r.gamma for r in rep.rows] == [0.0, 0.5]
    assert rep.reports[0].rows[0][1:3] == rep.reports[1].rows[0][1:3]
    assert models[0] is not template


# ---------------------------------------------------------------- match_bitrate


def test_match_bitrate_zero_iterations(short_trained, holdout_images):
    model, _ = short_trained
    current = C.evaluate(model, holdout_images).bpp
    cfg = TR.TrainConfig(gamma=0.0, seed=0)
    res = TR.match_bitrate(model, holdout_images, current, cfg, eval_set=holdout_images)
    assert res.probes == [] and res.converged
    assert res.lmbda == cfg.lmbda and res.model is model


def test_match_bitrate_rejects_bad_target(short_trained):
    with pytest.raises(ValueError):
        TR.match_bitrate(short_trained[0], np.zeros((1, 3, 16, 16), np.float32), 0.0, quick())


def test_bpp_non_decreasing_in_lambda(short_trained, train_images, holdout_images):
    model, rep = short_trained
    out = []
    for lam in (rep.config.lmbda / 4, rep.config.lmbda, rep.config.lmbda * 4):
        probe = model.copy()
        TR.train(probe, train_images, TR.TrainConfig(lmbda=lam, gamma=0.0, steps=100, seed=0))
        out.append(C.evaluate(probe, holdout_images).bpp)
    assert out[0] <= out[1] <= out[2]
