import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deskvar.errors import DegenerateAnomalyError, EmptyEvalError, NeverSkillfulError
from deskvar.grid import Climatology, GridSpec, LatWeights, StateField, lat_weights
from deskvar.verify import EvalSet, acc, bias, evaluate_leads, rmse, skillful_lead, write_scorecard

SPEC = GridSpec(2, 4, 8)
LW = lat_weights(SPEC)


def _f(values, t=0):
    return StateField(SPEC, t, np.asarray(values, dtype=float).reshape(SPEC.shape))


def _rand(rng, t=0):
    return _f(rng.standard_normal(SPEC.shape), t)


def _clim_zero():
    return Climatology(12, np.zeros((2,) + SPEC.shape))


def _metric_oracles(pairs, lw):
    """Independent per-point loops for all three metrics."""
    V, H, W = SPEC.shape
    rm = np.zeros(V)
    bi = np.zeros(V)
    for pred, truth in pairs:
        for v in range(V):
            se = 0.0
            be = 0.0
            for i in range(H):
                for j in range(W):
                    d = pred.data[v, i, j] - truth.data[v, i, j]
                    se += lw.values[i] * d * d
                    be += lw.values[i] * d
            rm[v] += np.sqrt(se / (H * W))
            bi[v] += be / (H * W)
    return rm / len(pairs), bi / len(pairs)


def test_rmse_bias_trivial_identities():
    rng = np.random.default_rng(0)
    x = _rand(rng)
    ev = EvalSet([(x, x)])
    np.testing.assert_array_equal(rmse(ev, LW), np.zeros(2))
    np.testing.assert_array_equal(bias(ev, LW), np.zeros(2))


def test_rmse_constant_error_is_abs_error():
    rng = np.random.default_rng(1)
    truth = _rand(rng)
    pred = _f(truth.data - 2.5)
    ev = EvalSet([(pred, truth)])
    np.testing.assert_allclose(rmse(ev, LW), np.full(2, 2.5), rtol=1e-12)
    np.testing.assert_allclose(bias(ev, LW), np.full(2, -2.5), rtol=1e-12)


def test_bias_constant_offset_and_antisymmetry():
    rng = np.random.default_rng(2)
    truth = _rand(rng)
    pred = _f(truth.data + 2.0)
    np.testing.assert_allclose(bias(EvalSet([(pred, truth)]), LW), np.full(2, 2.0),
                               rtol=1e-12)
    a, b = _rand(rng), _rand(rng)
    fw = bias(EvalSet([(a, b)]), LW)
    bw = bias(EvalSet([(b, a)]), LW)
    np.testing.assert_allclose(fw, -bw, atol=1e-14)


def test_bias_antisymmetric_latitude_error_cancels():
    truth = _f(np.zeros(SPEC.shape))
    err = np.zeros(SPEC.shape)
    err[:, 0, :], err[:, 3, :] = 1.0, -1.0  # symmetric rows, opposite sign
    err[:, 1, :], err[:, 2, :] = 0.5, -0.5
    np.testing.assert_allclose(bias(EvalSet([(_f(err), truth)]), LW), 0.0, atol=1e-14)


def test_metrics_match_loop_oracles():
    rng = np.random.default_rng(3)
    pairs = [(_rand(rng), _rand(rng)) for _ in range(5)]
    ev = EvalSet(pairs)
    rm_o, bi_o = _metric_oracles(pairs, LW)
    np.testing.assert_allclose(rmse(ev, LW), rm_o, atol=1e-12)
    np.testing.assert_allclose(bias(ev, LW), bi_o, atol=1e-12)


def test_acc_perfect_and_anticorrelated():
    rng = np.random.default_rng(4)
    clim = _clim_zero()
    truth = _rand(rng)
    assert np.allclose(acc(EvalSet([(truth, truth)]), clim, LW), 1.0)
    flipped = _f(-truth.data)
    np.testing.assert_allclose(acc(EvalSet([(flipped, truth)]), clim, LW), -1.0,
                               rtol=1e-12)


def test_acc_matches_loop_oracle():
    rng = np.random.default_rng(5)
    clim_field = rng.standard_normal(SPEC.shape)
    clim = Climatology(12, np.stack([clim_field, clim_field]))
    pairs = [(_rand(rng), _rand(rng)) for _ in range(4)]
    got = acc(EvalSet(pairs), clim, LW)
    V, H, W = SPEC.shape
    total = np.zeros(V)
    for pred, truth in pairs:
        for v in range(V):
            num = den_p = den_t = 0.0
            for i in range(H):
                for j in range(W):
                    ap = pred.data[v, i, j] - clim_field[v, i, j]
                    at = truth.data[v, i, j] - clim_field[v, i, j]
                    num += LW.values[i] * ap * at
                    den_p += LW.values[i] * ap * ap
                    den_t += LW.values[i] * at * at
            total[v] += num / np.sqrt(den_p * den_t)
    np.testing.assert_allclose(got, total / len(pairs), atol=1e-10)


@settings(max_examples=200, deadline=None)
@given(seed=st.integers(min_value=0, max_value=10_000))
def test_acc_bounded_on_fuzzed_inputs(seed):
    rng = np.random.default_rng(seed)
    scale = 10.0 ** rng.integers(-3, 4)
    pred = _f(scale * rng.standard_normal(SPEC.shape))
    truth = _f(scale * rng.standard_normal(SPEC.shape))
    vals = acc(EvalSet([(pred, truth)]), _clim_zero(), LW)
    assert np.all(vals >= -1.0 - 1e-12) and np.all(vals <= 1.0 + 1e-12)


def test_acc_degenerate_anomaly_raises():
    clim = _clim_zero()
    zero = _f(np.zeros(SPEC.shape))
    rng = np.random.default_rng(6)
    with pytest.raises(DegenerateAnomalyError):
        acc(EvalSet([(zero, _rand(rng))]), clim, LW)


def test_metrics_invariant_under_longitude_rotation():
    rng = np.random.default_rng(7)
    pred, truth = _rand(rng), _rand(rng)
    cf = rng.standard_normal(SPEC.shape)
    clim = Climatology(12, np.stack([cf, cf]))
    ev = EvalSet([(pred, truth)])
    r0, b0, a0 = rmse(ev, LW), bias(ev, LW), acc(ev, clim, LW)
    k = 3
    pred_r = _f(np.roll(pred.data, k, axis=2))
    truth_r = _f(np.roll(truth.data, k, axis=2))
    clim_r = Climatology(12, np.roll(clim.means, k, axis=3))
    ev_r = EvalSet([(pred_r, truth_r)])
    np.testing.assert_allclose(rmse(ev_r, LW), r0, atol=1e-12)
    np.testing.assert_allclose(bias(ev_r, LW), b0, atol=1e-12)
    np.testing.assert_allclose(acc(ev_r, clim_r, LW), a0, atol=1e-12)


def test_empty_eval_raises():
    with pytest.raises(EmptyEvalError):
        rmse(EvalSet([]), LW)
    with pytest.raises(EmptyEvalError):
        bias(EvalSet([]), LW)


def test_skillful_lead_examples():
    assert skillful_lead([24, 48, 72], [0.9, 0.7, 0.5]) == 48
    assert skillful_lead([24, 48, 72], [0.9, 0.8, 0.7]) == 72
    # dip-then-recover stops at the first crossing
    assert skillful_lead([24, 48, 72], [0.9, 0.55, 0.8]) == 24
    with pytest.raises(NeverSkillfulError):
        skillful_lead([24, 48], [0.5, 0.9])
    with pytest.raises(ValueError):
        skillful_lead([24, 12], [0.9, 0.8])


def test_evaluate_and_scorecard(tmp_path):
    rng = np.random.default_rng(8)
    clim = _clim_zero()
    base_pairs = [(_rand(rng), _rand(rng)) for _ in range(3)]
    cand_pairs = [(_rand(rng), _rand(rng)) for _ in range(3)]
    base = evaluate_leads("base", [EvalSet(base_pairs, 24)], clim, LW)
    cand = evaluate_leads("cand", [EvalSet(cand_pairs, 24)], clim, LW)
    mpath = tmp_path / "metrics.csv"
    base.write_csv(mpath)
    text = mpath.read_text().splitlines()
    assert text[0] == "run,variable,lead_hours,rmse,bias,acc"
    assert len(text) == 1 + 2  # header + V rows
    spath = tmp_path / "scorecard.csv"
    write_scorecard(spath, base, cand)
    rows = spath.read_text().splitlines()
    assert rows[0] == "variable,lead_hours,baseline,candidate,pct_diff"
    assert len(rows) == 1 + 2
