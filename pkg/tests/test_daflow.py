import numpy as np
import pytest

from deskvar.daflow import (
    AnalysisProduct,
    CascadeSpec,
    CyclePlan,
    DaDeps,
    DaModel,
    DaTuple,
    ObsStore,
    build_da_model,
    cascade,
    collect_conv_tuples,
    da_apply,
    fit_da_scales,
    run_cycles,
    spinup_background,
    train_da,
)
from deskvar.dynamics import DynParams, default_initial_state, generate_nature_run
from deskvar.errors import MissingModelError
from deskvar.forecast import PerfectModel, RolloutConfig, weighted_l1
from deskvar.fourdvar import DawPlan, compute_clim_stats
from deskvar.grid import GridSpec, LatWeights, StateField, VariableWeights, lat_weights
from deskvar.netcore import TrainConfig
from deskvar.obsops import RadianceTruthSpec, build_emulator, radiance_truth, sample_conventional

SPEC = GridSpec(2, 4, 8)


@pytest.fixture(scope="module")
def world():
    p = DynParams.standard(SPEC.V, c_merid=0.3, c_vert=0.3)
    x0 = default_initial_state(SPEC, p, seed=1)
    nature = generate_nature_run(x0, p, 400, 1, spinup_hours=240)
    rt = {
        "instrA": RadianceTruthSpec.instrument_a(SPEC.V, noise_sigma=0.3, lat_mask_deg=90.0),
        "instrB": RadianceTruthSpec.instrument_b(SPEC.V, noise_sigma=0.3, lat_mask_deg=90.0),
    }
    clim = compute_clim_stats(nature.states[:200], rt)
    sigma = 0.05 * clim.state_std
    store = ObsStore()
    for name, spec_rt in rt.items():
        store.rad[name] = {}
        em = build_emulator(SPEC.V, spec_rt.n_channels, np.zeros(SPEC.V),
                            np.ones(SPEC.V), SPEC.W, name, seed=3)
        em.resid_sigma = np.full(spec_rt.n_channels, 0.5)
        store.operators[name] = em
        store.lat_masks[name] = 90.0
    for k, t in enumerate(range(0, 397, 3)):
        truth = nature.at_time(t)
        store.conv[t] = sample_conventional(truth, 0.4, sigma, seed=100 + k)
        for name, spec_rt in rt.items():
            store.rad[name][t] = radiance_truth(truth, spec_rt, 0.4, seed=500 + k)
    deps = DaDeps(PerfectModel(p), None, RolloutConfig(), clim,
                  lat_weights(SPEC), VariableWeights.uniform(SPEC.V))
    models = {}
    for k, name in enumerate(("conv", "instrA", "instrB")):
        models[name] = build_da_model(
            SPEC.V, name, np.ones(SPEC.V), clim.state_std * 0 + 2.0,
            clim.state_std, 0.3 * clim.state_std, hidden=(16,), seed=10 + k
        )
    return {"p": p, "nature": nature, "clim": clim, "store": store,
            "deps": deps, "models": models}


def test_da_apply_zero_gradient_is_bit_exact(world):
    x_b = world["nature"].at_time(0)
    xa = da_apply(world["models"]["conv"], x_b, np.zeros(SPEC.shape))
    assert xa.data.tobytes() == x_b.data.tobytes()
    assert xa.time == x_b.time


def test_da_apply_untrained_model_finite(world):
    rng = np.random.default_rng(2)
    x_b = world["nature"].at_time(0)
    grad = rng.standard_normal(SPEC.shape) * 5
    xa = da_apply(world["models"]["conv"], x_b, grad)
    assert np.all(np.isfinite(xa.data))
    assert not np.array_equal(xa.data, x_b.data)


def test_bias_free_requirement_enforced():
    from deskvar.netcore import CondNet, LayerSpec

    net = CondNet([LayerSpec(30, 2, "film", bias=True)], cond_dim=2)
    with pytest.raises(ValueError):
        DaModel(net, "conv", np.ones(2), np.zeros(2), np.ones(2), np.ones(2))


def test_analysis_loss_oracle_1x2x2():
    # hand-built tiny case evaluated against a pointwise loop
    vw = VariableWeights(np.array([2.0]))
    lw = LatWeights(np.array([0.5, 1.5]))
    diff = np.array([[[0.3, -0.7], [1.1, -0.2]]])
    expected = 0.0
    for i in range(2):
        for j in range(2):
            expected += 2.0 * lw.values[i] * abs(diff[0, i, j])
    expected /= 4
    assert weighted_l1(diff, vw, lw) == pytest.approx(expected, abs=1e-12)


def test_truth_equals_background_zero_grad_zero_loss(world):
    x_b = world["nature"].at_time(0)
    xa = da_apply(world["models"]["conv"], x_b, np.zeros(SPEC.shape))
    vw, lw = world["deps"].vw, world["deps"].lw
    assert weighted_l1(xa.data - x_b.data, vw, lw) == 0.0


def test_train_da_reduces_loss(world):
    rng = np.random.default_rng(4)
    nature = world["nature"]
    tuples = []
    for t in range(0, 120, 12):
        truth = nature.at_time(t)
        bg = truth.data + 0.4 * rng.standard_normal(SPEC.shape)
        grad = (bg - truth.data) * 3.0 + 0.1 * rng.standard_normal(SPEC.shape)
        tuples.append(DaTuple(bg, grad, truth.data))
    gs, bm, bs, os_ = fit_da_scales(tuples)
    model = build_da_model(SPEC.V, "conv", gs, bm, bs, os_, hidden=(24,), seed=5)
    vw, lw = world["deps"].vw, world["deps"].lw

    def eval_loss():
        return float(np.mean([
            weighted_l1(da_apply(model, StateField(SPEC, 0, t.background),
                                 t.grad).data - t.truth, vw, lw)
            for t in tuples
        ]))

    before = eval_loss()
    losses = train_da(model, tuples, vw, lw,
                      TrainConfig(lr=0.05, batch_size=4, epochs=60, seed=6))
    after = eval_loss()
    assert losses[-1] <= losses[0]
    assert after < before


def test_cascade_spec_validation():
    CascadeSpec((("conv", True), ("instrA", False), ("instrB", True)))
    with pytest.raises(ValueError):
        CascadeSpec((("instrA", True), ("conv", True)))
    # conventional disabled: instrument-only cascades are fine
    CascadeSpec((("conv", False), ("instrB", True), ("instrA", True)))
    assert CascadeSpec.only("conv", "instrB").enabled_order() == ["conv", "instrB"]


def test_cascade_all_disabled_returns_background(world):
    x_b = world["nature"].at_time(0)
    plan = DawPlan(0, (0, 3, 6, 9), 12)
    spec = CascadeSpec((("conv", False), ("instrA", False), ("instrB", False)))
    product = cascade(x_b, plan, world["store"], spec, world["models"], world["deps"])
    assert product.streams == []
    assert product.x_a.data.tobytes() == x_b.data.tobytes()


def test_cascade_skip_equivalence_bit_exact(world):
    x_b = world["nature"].at_time(0)
    plan = DawPlan(0, (0, 3, 6, 9), 12)
    disabled = CascadeSpec((("conv", True), ("instrA", False), ("instrB", False)))
    conv_only = CascadeSpec((("conv", True),))
    a = cascade(x_b, plan, world["store"], disabled, world["models"], world["deps"])
    b = cascade(x_b, plan, world["store"], conv_only, world["models"], world["deps"])
    assert a.x_a.data.tobytes() == b.x_a.data.tobytes()
    assert a.streams == b.streams == ["conv"]


def test_cascade_missing_model_raises(world):
    x_b = world["nature"].at_time(0)
    plan = DawPlan(0, (0, 3, 6, 9), 12)
    spec = CascadeSpec.only("conv", "instrA")
    with pytest.raises(MissingModelError):
        cascade(x_b, plan, world["store"], spec, {"conv": world["models"]["conv"]},
                world["deps"])


def test_cascade_obs_gap_skips_stream(world):
    import copy

    store2 = ObsStore(dict(world["store"].conv),
                      {k: dict(v) for k, v in world["store"].rad.items()},
                      world["store"].operators, world["store"].lat_masks)
    for o in (0, 3, 6, 9):
        store2.rad["instrA"].pop(o, None)
    x_b = world["nature"].at_time(0)
    plan = DawPlan(0, (0, 3, 6, 9), 12)
    spec = CascadeSpec()
    product = cascade(x_b, plan, store2, spec, world["models"], world["deps"])
    assert product.streams == ["conv", "instrB"]
    assert "instrA" not in product.grad_norms


def test_run_cycles_zero_cycles_empty(world):
    cp = CyclePlan(n_cycles=0)
    out = run_cycles(world["nature"].at_time(0), world["nature"], world["store"],
                     cp, world["models"], CascadeSpec(), world["deps"])
    assert out == []


def test_run_cycles_records_and_provenance(world):
    cp = CyclePlan(n_cycles=3, spinup_cycles=0)
    x_b0 = spinup_background(world["nature"], 120, world["deps"])
    assert x_b0.time == 120
    recs = run_cycles(x_b0, world["nature"], world["store"], cp, world["models"],
                      CascadeSpec(), world["deps"])
    assert [r.t0 for r in recs] == [120, 132, 144]
    for r in recs:
        assert r.product.streams == ["conv", "instrA", "instrB"]
        assert r.product_short.streams == ["conv", "instrA", "instrB"]
        assert np.all(np.isfinite(r.rmse_analysis))
        for name in r.product.qc:
            assert r.product.qc[name].accepted() > 0


def test_short_window_isolated_from_future_observations(world):
    x_b = world["nature"].at_time(12)
    short_plan = DawPlan(12, (0,), 3)
    full = cascade(x_b, short_plan, world["store"], CascadeSpec(), world["models"],
                   world["deps"])
    pruned = ObsStore({12: world["store"].conv[12]},
                      {k: {12: v[12]} for k, v in world["store"].rad.items()},
                      world["store"].operators, world["store"].lat_masks)
    isolated = cascade(x_b, short_plan, pruned, CascadeSpec(), world["models"],
                       world["deps"])
    assert full.x_a.data.tobytes() == isolated.x_a.data.tobytes()


def test_collect_conv_tuples_runs(world):
    cp = CyclePlan(n_cycles=4, spinup_cycles=0)
    tuples = collect_conv_tuples(world["nature"], world["store"], cp, 132,
                                 world["deps"], seed=7, oracle_iters=4)
    assert len(tuples) == 4
    for t in tuples:
        assert t.background.shape == SPEC.shape
        assert np.all(np.isfinite(t.grad))


def test_da_model_checkpoint_roundtrip(tmp_path, world):
    model = world["models"]["instrA"]
    model.save(tmp_path / "da_instrA")
    back = DaModel.load(tmp_path / "da_instrA")
    rng = np.random.default_rng(8)
    x_b = world["nature"].at_time(0)
    grad = rng.standard_normal(SPEC.shape)
    np.testing.assert_array_equal(
        da_apply(model, x_b, grad).data, da_apply(back, x_b, grad).data
    )
    assert back.stream == "instrA"


def test_cycle_plan_validation():
    CyclePlan()
    with pytest.raises(ValueError):
        CyclePlan(short_offsets=(0, 4))
    with pytest.raises(ValueError):
        CyclePlan(interval_hours=0)
