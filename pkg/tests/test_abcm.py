import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from slimnic import abcm as A
from slimnic import codec as C
from slimnic import tensor as T
from slimnic.errors import DimensionError
from slimnic.rng import RngState
from slimnic.tensor import Tensor


@pytest.fixture
def cfg():
    return A.GateConfig()


def test_gate_examples(cfg):
    out = A.gate(Tensor([0.0, -0.5, 2.3]), cfg)
    np.testing.assert_array_equal(out.data, [1.0, 0.0, 1.0])
    assert not A.gate(Tensor([-1.0, -3.0]), cfg).data.any()


def test_gate_surrogate_gradient(cfg):
    a = Tensor([0.0, 0.7, -1.2], requires_grad=True)
    T.tsum(A.gate(a, cfg, A.TRAIN)).backward()
    s = 1.0 / (1.0 + np.exp(-cfg.epsilon * a.data.astype(np.float64)))
    np.testing.assert_allclose(a.grad, cfg.epsilon * s * (1 - s), rtol=1e-6)


def test_gate_same_mask_in_both_phases(cfg, rng):
    alpha = Tensor(rng.normal(size=16).astype(np.float32))
    np.testing.assert_array_equal(A.gate(alpha, cfg, A.TRAIN).data, A.gate(alpha, cfg, A.EVAL).data)


@pytest.mark.parametrize("bad", [0.0, -1.0, float("inf"), float("nan")])
def test_gate_config_rejects(bad):
    with pytest.raises(ValueError):
        A.GateConfig(epsilon=bad)
    with pytest.raises(ValueError):
        A.GateConfig(tau=bad)


def test_gate_config_rejects_mode():
    with pytest.raises(ValueError):
        A.GateConfig(mode="soft")


@settings(max_examples=200, deadline=None)
@given(st.lists(st.one_of(st.floats(allow_nan=False, allow_infinity=True, width=32),
                          st.sampled_from([0.0, -0.0, 1e30, -1e30])), min_size=1, max_size=32))
def test_gate_is_binary(values):
    out = A.gate(Tensor(np.array(values, dtype=np.float32)), A.GateConfig()).data
    assert set(np.unique(out)).issubset({0.0, 1.0})
    np.testing.assert_array_equal(out, (np.array(values, dtype=np.float32) >= 0).astype(np.float32))


def test_sharp_surrogate_vanishes_away_from_threshold():
    sharp = A.GateConfig(epsilon=50.0)
    a = Tensor([0.5, -0.5, 1.5, -3.0], requires_grad=True)
    out = A.gate(a, sharp, A.TRAIN)
    np.testing.assert_array_equal(out.data, [1.0, 0.0, 1.0, 0.0])
    T.tsum(out).backward()
    assert np.all(np.abs(a.grad) < 1e-8)


# ---------------------------------------------------------------- stochastic


def test_stochastic_confident_logit_samples_high():
    cfg = A.GateConfig(mode=A.STOCHASTIC)
    logits = Tensor(np.array([[10.0], [0.0]], np.float32))
    hits = sum(A.gate_stochastic(logits, cfg, A.TRAIN, RngState(s)).data[0] >= 0.99
               for s in range(1000))
    assert hits >= 990


def test_stochastic_eval_tie_goes_on():
    cfg = A.GateConfig(mode=A.STOCHASTIC)
    out = A.gate_stochastic(Tensor(np.zeros((2, 3), np.float32)), cfg, A.EVAL)
    np.testing.assert_array_equal(out.data, [1.0, 1.0, 1.0])


def test_stochastic_reproducible(rng):
    cfg = A.GateConfig(mode=A.STOCHASTIC, tau=0.5)
    logits = Tensor(rng.normal(size=(2, 6)).astype(np.float32))
    a = A.gate_stochastic(logits, cfg, A.TRAIN, RngState(3)).data
    b = A.gate_stochastic(logits, cfg, A.TRAIN, RngState(3)).data
    np.testing.assert_array_equal(a, b)
    assert np.all((a > 0) & (a < 1))


def test_stochastic_gradient_reaches_logits():
    cfg = A.GateConfig(mode=A.STOCHASTIC)
    logits = Tensor(np.zeros((2, 4), np.float32), requires_grad=True)
    T.tsum(A.gate_stochastic(logits, cfg, A.TRAIN, RngState(0))).backward()
    assert np.all(logits.grad[0] > 0) and np.all(logits.grad[1] < 0)


def test_importance_vector_shapes():
    assert A.ImportanceVector(5).param.shape == (5,)
    assert A.ImportanceVector(5, A.STOCHASTIC).param.shape == (2, 5)
    with pytest.raises(ValueError):
        A.ImportanceVector(5, param=Tensor(np.zeros(4, np.float32)))


# ---------------------------------------------------------------- apply_mask


def test_apply_mask_examples(rng):
    x = Tensor(rng.normal(size=(2, 3, 4, 4)).astype(np.float32))
    np.testing.assert_array_equal(A.apply_mask(x, Tensor(np.ones(3))).data, x.data)
    assert not A.apply_mask(x, Tensor(np.zeros(3))).data.any()
    small = A.apply_mask(Tensor(np.array([3.0, 7.0]).reshape(1, 2, 1, 1)), Tensor([1.0, 0.0]))
    np.testing.assert_array_equal(small.data.ravel(), [3.0, 0.0])


def test_apply_mask_length_mismatch():
    with pytest.raises(DimensionError):
        A.apply_mask(Tensor(np.zeros((1, 3, 2, 2))), Tensor(np.ones(2)))


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), c=st.integers(1, 8))
def test_apply_mask_idempotent(seed, c):
    r = np.random.default_rng(seed)
    x = Tensor(r.normal(size=(2, c, 3, 3)).astype(np.float32))
    m = Tensor((r.random(c) < 0.5).astype(np.float32))
    once = A.apply_mask(x, m)
    np.testing.assert_array_equal(A.apply_mask(once, m).data, once.data)


def test_apply_mask_gradients_reach_both():
    x = Tensor(np.arange(8, dtype=np.float32).reshape(1, 2, 2, 2), requires_grad=True)
    m = Tensor([1.0, 0.0], requires_grad=True)
    T.tsum(A.apply_mask(x, m)).backward()
    np.testing.assert_array_equal(x.grad[0, 0], np.ones((2, 2)))
    np.testing.assert_array_equal(x.grad[0, 1], np.zeros((2, 2)))
    np.testing.assert_array_equal(m.grad, [0 + 1 + 2 + 3, 4 + 5 + 6 + 7])


# ---------------------------------------------------------------- sparsity


@pytest.mark.parametrize("mask,expected", [
    ([1, 1, 1, 0, 0, 0, 0, 0], 0.375),
    ([1] * 8, 1.0),
    ([0] * 8, 0.0),
])
def test_sparsity_examples(mask, expected):
    assert A.sparsity_term(Tensor(np.array(mask, np.float32))).item() == expected


def test_sparsity_matches_count(rng):
    cfg = A.GateConfig()
    for _ in range(100):
        alpha = rng.normal(size=int(rng.integers(1, 40))).astype(np.float32)
        s = A.sparsity_term(A.gate(Tensor(alpha), cfg)).item()
        assert s == pytest.approx(np.count_nonzero(alpha >= 0) / alpha.size, abs=1e-7)


def test_sparsity_pressure_grows_with_gamma(cfg):
    def pull(gamma):
        a = Tensor([0.3, 1.0, 0.05], requires_grad=True)
        (A.sparsity_term(A.gate(a, cfg, A.TRAIN)) * gamma).backward()
        return a.grad.copy()

    small, large = pull(0.01), pull(0.1)
    assert np.all(small > 0)
    assert np.all(large > small)


# ---------------------------------------------------------------- effective channels


def test_effective_channels_fresh(desk_model):
    eff = A.effective_channels(desk_model)
    assert [keep for _, keep, _ in eff.rows] == [8] * 6
    assert eff.mean_ratio == 1.0


def test_effective_channels_forced_off(desk_model):
    desk_model.slots["gs1"].param.data[:] = -1.0
    desk_model.slots["ga0"].param.data[:3] = -0.1
    eff = A.effective_channels(desk_model)
    counts = eff.keep_counts
    assert counts["gs1"] == 0 and counts["ga0"] == 5
    assert eff.mean_ratio == pytest.approx(np.mean([5 / 8, 1, 1, 1, 0, 1]))


def test_effective_channels_no_slots():
    eff = A.effective_channels(C.build_model(abcm=False))
    assert eff.rows == [] and eff.mean_ratio == 1.0
