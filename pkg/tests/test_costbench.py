import numpy as np
import pytest

from slimnic import codec as C
from slimnic import costbench as CB
from slimnic import pruner as P
from slimnic.errors import GeometryError
from slimnic.tensor import Tensor

from conftest import set_alphas


def desk_recount(h=64, w=64, with_abcm=True):
    """Independent row-by-row recount of the desk config (3-8-8-8-12, k5 s2)."""
    params = flops = 0
    k2 = 25
    ga = [(3, 8), (8, 8), (8, 8), (8, 12)]
    gs = [(12, 8), (8, 8), (8, 8), (8, 3)]
    res = [(h // 2, w // 2), (h // 4, w // 4), (h // 8, w // 8), (h // 16, w // 16)]
    for i, (cin, cout) in enumerate(ga):
        ho, wo = res[i]
        params += cout * cin * k2 + cout
        flops += 2 * cin * k2 * cout * ho * wo + cout * ho * wo
        if i < 3:
            params += cout * cout + cout
            flops += (2 * cout * cout + 4 * cout) * ho * wo
            if with_abcm:
                params += cout
                flops += cout * ho * wo
    lh, lw = res[-1]
    params += 2 * 12
    flops += 13 * 12 * lh * lw
    ins = [res[3], res[2], res[1], res[0]]
    outs = [res[2], res[1], res[0], (h, w)]
    for i, (cin, cout) in enumerate(gs):
        (hi, wi), (ho, wo) = ins[i], outs[i]
        params += cin * cout * k2 + cout
        flops += 2 * cin * k2 * cout * hi * wi + cout * ho * wo
        if i < 3:
            params += cout * cout + cout
            flops += (2 * cout * cout + 4 * cout) * ho * wo
            if with_abcm:
                params += cout
                flops += cout * ho * wo
    return params, flops


def test_unit_examples():
    assert CB.conv_params(3, 8, 5) == 608
    assert CB.gdn_params(8) == 72
    assert CB.conv_flops(1, 1, 1, 1, 1) == 3


def test_desk_counts_match_recount(desk_model):
    table = CB.count_flops(desk_model, 64, 64)
    assert (table.params, table.flops) == desk_recount()
    assert CB.count_params(desk_model).params == desk_recount()[0]


def test_totals_are_row_sums(desk_model):
    table = CB.count_flops(desk_model, 32, 48)
    assert table.params == sum(r.params for r in table.rows)
    assert table.flops == sum(r.flops for r in table.rows)
    assert table.abcm_params == 48


def test_doubling_geometry_quadruples_conv_flops(desk_model):
    small = CB.count_flops(desk_model, 32, 32)
    big = CB.count_flops(desk_model, 64, 64)
    for a, b in zip(small.rows, big.rows):
        assert b.flops == 4 * a.flops
        assert b.params == a.params


def test_counts_ignore_weights(desk_model):
    other = C.build_model(seed=99)
    other.ga[0].weight.data[:] = 0
    assert CB.count_flops(other, 64, 64).rows == CB.count_flops(desk_model, 64, 64).rows
    assert CB.count_flops(desk_model.config, 64, 64).flops == desk_recount(with_abcm=False)[1]


def test_identity_prune_drops_only_abcm(desk_model):
    slim = P.prune(desk_model, P.extract_plan(desk_model))
    base = CB.count_params(desk_model)
    assert CB.count_params(slim).params == base.params - base.abcm_params


@pytest.mark.parametrize("h,w", [(30, 64), (8, 16), (0, 16)])
def test_bad_geometry(desk_model, h, w):
    with pytest.raises(GeometryError):
        CB.count_flops(desk_model, h, w)


# ---------------------------------------------------------------- compare


@pytest.fixture(scope="module")
def eval_batch(holdout_images):
    return Tensor(holdout_images.data[:2])


def test_compare_identical(short_trained, eval_batch):
    model = short_trained[0]
    rep = CB.compare(model, model.copy(), eval_batch)
    assert rep.params_ratio == 1.0 and rep.flops_ratio == 1.0
    assert rep.psnr_drop_percent == 0.0


def halved(model):
    m = model.copy()
    set_alphas(m, {sid: (np.arange(w) < w // 2).astype(np.float32)
                   for sid, w in m.slot_widths().items()})
    return P.prune(m, P.extract_plan(m))


def test_halving_widths_ratio(short_trained, eval_batch):
    model = short_trained[0]
    slim = halved(model)
    rep = CB.compare(model, slim, eval_batch)
    assert 1.0 < rep.flops_ratio <= 4.0
    expected = CB.count_flops(model, 64, 64).flops / CB.count_flops(slim, 64, 64).flops
    assert rep.flops_ratio == expected
    assert rep.baseline.flops == sum(r.flops for r in rep.baseline.rows)


def test_swapping_inverts_ratios(short_trained, eval_batch):
    model = short_trained[0]
    slim = halved(model)
    ab = CB.compare(model, slim, eval_batch)
    ba = CB.compare(slim, model, eval_batch)
    assert ab.params_ratio * ba.params_ratio == pytest.approx(1.0, rel=1e-12)
    assert ab.flops_ratio * ba.flops_ratio == pytest.approx(1.0, rel=1e-12)


def test_csv_headers_state_convention(short_trained, eval_batch):
    model = short_trained[0]
    rep = CB.compare(model, halved(model), eval_batch)
    text = CB.compare_csv(rep, "desk")
    assert text.startswith("# FLOP convention: multiply-add = 2 FLOPs\n")
    assert text.splitlines()[1].startswith("quality,psnr_drop_percent,params_ratio,flops_ratio")
    table = CB.cost_table_csv(rep.baseline)
    assert table.splitlines()[-1].endswith(f"{rep.baseline.params},{rep.baseline.flops}")


# ---------------------------------------------------------------- timing


def test_bench_sample_counts(desk_model):
    rep = CB.bench(desk_model, 32, 32, warmup=3, rounds=4)
    assert len(rep.samples) == 4 and rep.warmup == 3
    assert all(t > 0 for t in rep.samples)


def test_single_round_mean(desk_model):
    rep = CB.bench(desk_model, 32, 32, warmup=0, rounds=1)
    assert rep.mean == rep.samples[0]


def test_bench_defaults_to_ten_and_ten():
    import inspect
    sig = inspect.signature(CB.bench)
    assert sig.parameters["warmup"].default == 10 and sig.parameters["rounds"].default == 10


def test_bench_rejects_bad_geometry(desk_model):
    with pytest.raises(GeometryError):
        CB.bench(desk_model, 20, 32, warmup=0, rounds=1)


def test_bench_pair_and_csv(desk_model):
    rep = CB.bench_pair(desk_model, halved(desk_model), 32, 32, warmup=1, rounds=2)
    assert rep.speedup == pytest.approx(rep.baseline.mean / rep.mean)
    lines = CB.timing_csv(rep).splitlines()
    assert lines[0] == ",".join(CB.TIMING_COLUMNS)
    assert lines[1].startswith("baseline,32,32,1,1,2,") and lines[2].startswith("pruned,32,32,1,1,2,")
    assert sum(1 for ln in lines if ln.startswith(("baseline,0", "baseline,1"))) == 2
