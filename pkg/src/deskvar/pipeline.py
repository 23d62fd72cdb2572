"""Experiment orchestration: configuration, staged pipeline, run manifests.

A run executes stages in dependency order:

    nature-run -> make-obs -> train-forecast -> train-obsop -> train-da
               -> cycle -> forecast -> verify

Every stage reads its inputs from the artifacts previous stages wrote to the
output directory and records its seed, a hash of the configuration, and the
content hashes of everything it produced in manifest.json. Reruns with the
same configuration are bit-identical, and any suffix of the stage list can
be rerun in isolation from the upstream artifacts on disk.

All randomness is derived from the single experiment seed through fixed
per-stage offsets; no stage reads system entropy.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import dynamics as dyn
from .daflow import (
    CascadeSpec,
    CyclePlan,
    DaDeps,
    DaModel,
    ObsStore,
    build_da_model,
    collect_conv_tuples,
    collect_radiance_tuples,
    fit_da_scales,
    run_cycles,
    spinup_background,
    train_da,
)
from .errors import ConfigError
from .forecast import (
    ForecastModel,
    Normalization,
    RolloutConfig,
    build_forecast_model,
    forecast_to,
    pretrain,
    rollout_finetune,
)
from .fourdvar import ClimStats, compute_clim_stats
from .grid import (
    Climatology,
    GridSpec,
    StateField,
    VariableWeights,
    build_climatology,
    lat_weights,
    read_state,
    write_state,
)
from .netcore import TrainConfig
from .obsops import (
    RadianceTruthSpec,
    RadianceEmulator,
    build_emulator,
    emulator_training_pairs,
    radiance_truth,
    read_conv_csv,
    read_rad_csv,
    sample_conventional,
    train_emulator,
    write_conv_csv,
    write_rad_csv,
)
from .verify import EvalSet, evaluate_leads, write_scorecard

STAGES = ("nature-run", "make-obs", "train-forecast", "train-obsop", "train-da",
          "cycle", "forecast", "verify")

# fixed per-stage seed offsets; every stage derives its rng from seed + offset
SEED_OFFSETS = {name: 1000 * (k + 1) for k, name in enumerate(STAGES)}


def _need(cfg: dict, path: str, typ=None):
    node = cfg
    for part in path.split("."):
        if not isinstance(node, dict) or part not in node:
            raise ConfigError(f"missing config field: {path}")
        node = node[part]
    if typ is not None and not isinstance(node, typ):
        raise ConfigError(f"config field {path} must be {typ}")
    return node


@dataclass
class ExperimentConfig:
    """Validated experiment configuration; see configs/ for examples."""

    raw: dict
    path: Path | None = None

    def __post_init__(self):
        c = self.raw
        if _need(c, "version") != 1:
            raise ConfigError("version must be 1")
        _need(c, "seed", int)
        for f in ("grid.V", "grid.H", "grid.W"):
            if _need(c, f, int) < 1:
                raise ConfigError(f"config field {f} must be positive")
        _need(c, "output_dir", str)
        _need(c, "dynamics.forcing")
        _need(c, "nature.length_hours", int)
        _need(c, "nature.train_end_hour", int)
        _need(c, "observations.conventional.density")
        _need(c, "observations.instruments", dict)
        _need(c, "cycling.n_cycles", int)
        stages = c.get("stages", list(STAGES))
        bad = [s for s in stages if s not in STAGES]
        if bad:
            raise ConfigError(f"unknown stages: {bad}")
        self.stages = [s for s in STAGES if s in stages]

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        path = Path(path)
        try:
            raw = json.loads(path.read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: not valid JSON: {e}") from e
        return cls(raw, path)

    # convenience accessors -------------------------------------------------
    @property
    def seed(self) -> int:
        return self.raw["seed"]

    @property
    def out_dir(self) -> Path:
        base = self.raw["output_dir"]
        root = self.path.parent if self.path else Path(".")
        p = Path(base)
        return p if p.is_absolute() else root / p

    def grid(self) -> GridSpec:
        g = self.raw["grid"]
        return GridSpec(g["V"], g["H"], g["W"])

    def dynparams(self) -> dyn.DynParams:
        d = self.raw["dynamics"]
        return dyn.DynParams.standard(
            self.raw["grid"]["V"], d.get("forcing", 8.0), d.get("c_merid", 0.5),
            d.get("c_vert", 0.5), d.get("dt_int", 0.05), d.get("hour_scale", 0.05),
        )

    def instruments(self) -> dict[str, RadianceTruthSpec]:
        out = {}
        for k, (name, icfg) in enumerate(self.raw["observations"]["instruments"].items()):
            kind = icfg.get("kind", "temperature")
            maker = (RadianceTruthSpec.instrument_a if kind == "temperature"
                     else RadianceTruthSpec.instrument_b)
            rt = maker(self.raw["grid"]["V"],
                       noise_sigma=icfg.get("noise_sigma", 1.0),
                       lat_mask_deg=icfg.get("lat_mask_deg", 60.0),
                       swath_frac=icfg.get("swath_frac", 0.25),
                       orbit_hours=icfg.get("orbit_hours", 12.0),
                       orbit_phase=icfg.get("orbit_phase", 0.5 * k))
            out[name] = RadianceTruthSpec(name, rt.weights, rt.slope, rt.aux_gain,
                                          rt.zen_ref, rt.noise_sigma, rt.lat_mask_deg,
                                          rt.max_view_deg, rt.swath_frac,
                                          rt.orbit_hours, rt.orbit_phase)
        return out

    def cycle_plan(self) -> CyclePlan:
        cy = self.raw["cycling"]
        return CyclePlan(cy.get("interval_hours", 12),
                         tuple(cy.get("long_offsets", (0, 3, 6, 9))),
                         tuple(cy.get("short_offsets", (0,))),
                         cy.get("short_window_hours", 3),
                         cy["n_cycles"], cy.get("spinup_cycles", 10))

    def train_cfg(self, section: dict, seed_offset: int, **defaults) -> TrainConfig:
        merged = {**defaults, **{k: v for k, v in section.items()
                                 if k in ("lr", "batch_size", "epochs", "grad_clip")}}
        return TrainConfig(merged["lr"], merged["batch_size"], merged["epochs"],
                           self.seed + seed_offset, merged.get("grad_clip", 5.0))

    def config_hash(self) -> str:
        return hashlib.sha256(
            json.dumps(self.raw, sort_keys=True).encode()
        ).hexdigest()


# ---- manifest helpers ----

def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        while chunk := f.read(1 << 20):
            h.update(chunk)
    return h.hexdigest()


def _load_manifest(out: Path) -> dict:
    p = out / "manifest.json"
    if p.exists():
        return json.loads(p.read_text())
    return {"stages": {}}


def _record_stage(cfg: ExperimentConfig, stage: str, artifacts: list[Path]) -> None:
    out = cfg.out_dir
    manifest = _load_manifest(out)
    manifest["config_hash"] = cfg.config_hash()
    manifest["stages"][stage] = {
        "seed": cfg.seed + SEED_OFFSETS[stage],
        "config_hash": cfg.config_hash(),
        "artifacts": {str(p.relative_to(out)): _sha256(p) for p in sorted(artifacts)},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))


# ---- artifact io ----

def _state_path(d: Path, t: int) -> Path:
    return d / f"state_{t:06d}.xcst"


def _load_nature(cfg: ExperimentConfig) -> dyn.NatureRun:
    d = cfg.out_dir / "nature"
    cadence = cfg.raw["nature"].get("cadence_hours", 1)
    length = cfg.raw["nature"]["length_hours"]
    states = [read_state(_state_path(d, t)) for t in range(0, length + 1, cadence)]
    return dyn.NatureRun(states, cfg.dynparams(), cadence, cfg.seed)


def _load_obs(cfg: ExperimentConfig, with_operators: bool = True) -> ObsStore:
    d = cfg.out_dir / "obs"
    store = ObsStore()
    store.conv = read_conv_csv(d / "conv.csv")
    for name, icfg in cfg.raw["observations"]["instruments"].items():
        store.rad[name] = read_rad_csv(d / f"{name}.csv")
        store.lat_masks[name] = icfg.get("lat_mask_deg", 60.0)
    if with_operators:
        md = cfg.out_dir / "models"
        for name in cfg.raw["observations"]["instruments"]:
            store.operators[name] = RadianceEmulator.load(md / f"emu_{name}")
    return store


def _load_stats(cfg: ExperimentConfig):
    md = cfg.out_dir / "models"
    meta = json.loads((md / "stats.json").read_text())
    norm = Normalization(np.array(meta["norm_mean"]), np.array(meta["norm_std"]))
    clim_stats = ClimStats(np.array(meta["state_std"]),
                           {k: np.array(v) for k, v in meta["channel_std"].items()})
    conv_sigma = np.array(meta["conv_sigma"])
    return norm, clim_stats, conv_sigma


def _load_climatology(cfg: ExperimentConfig) -> Climatology:
    md = cfg.out_dir / "models"
    slots = json.loads((md / "stats.json").read_text())["clim_slot_hours"]
    means = []
    for k in range(24 // slots):
        means.append(read_state(md / f"clim_slot{k}.xcst").data)
    return Climatology(slots, np.stack(means))


def _load_deps(cfg: ExperimentConfig) -> DaDeps:
    md = cfg.out_dir / "models"
    fc_short = ForecastModel.load(md / "fc_short")
    fc_medium = ForecastModel.load(md / "fc_medium")
    _, clim_stats, _ = _load_stats(cfg)
    rc = RolloutConfig(handoff_step=cfg.raw.get("forecast_training", {})
                       .get("handoff_step", 3))
    spec = cfg.grid()
    return DaDeps(fc_short, fc_medium, rc, clim_stats, lat_weights(spec),
                  VariableWeights.uniform(spec.V))


def _load_da_models(cfg: ExperimentConfig) -> dict[str, DaModel]:
    md = cfg.out_dir / "models"
    models = {"conv": DaModel.load(md / "da_conv")}
    for name in cfg.raw["observations"]["instruments"]:
        models[name] = DaModel.load(md / f"da_{name}")
    return models


# ---- stages ----

def stage_nature_run(cfg: ExperimentConfig) -> list[Path]:
    spec = cfg.grid()
    params = cfg.dynparams()
    ncfg = cfg.raw["nature"]
    seed = cfg.seed + SEED_OFFSETS["nature-run"]
    x0 = dyn.default_initial_state(spec, params, seed=seed)
    run = dyn.generate_nature_run(x0, params, ncfg["length_hours"],
                                  ncfg.get("cadence_hours", 1),
                                  ncfg.get("spinup_hours", 240), seed)
    d = cfg.out_dir / "nature"
    d.mkdir(parents=True, exist_ok=True)
    paths = []
    for s in run.states:
        p = _state_path(d, s.time)
        write_state(p, s)
        paths.append(p)
    return paths


def stage_make_obs(cfg: ExperimentConfig) -> list[Path]:
    nature = _load_nature(cfg)
    ocfg = cfg.raw["observations"]
    slot = ocfg.get("slot_hours", 3)
    seed = cfg.seed + SEED_OFFSETS["make-obs"]
    train_end = cfg.raw["nature"]["train_end_hour"]
    train_states = [s for s in nature.states if s.time <= train_end]
    clim_stats = compute_clim_stats(train_states[::12], cfg.instruments())
    sigma = ocfg["conventional"].get("sigma_frac", 0.05) * clim_stats.state_std

    conv_batches = []
    rad_batches = {name: [] for name in ocfg["instruments"]}
    instruments = cfg.instruments()
    slots = [t for t in nature.times if t % slot == 0]
    for k, t in enumerate(slots):
        truth = nature.at_time(t)
        conv_batches.append(sample_conventional(
            truth, ocfg["conventional"]["density"], sigma, seed=seed + 7 * k))
        for m, (name, rt) in enumerate(instruments.items()):
            rad_batches[name].append(radiance_truth(
                truth, rt, ocfg["instruments"][name].get("density", 0.2),
                seed=seed + 7 * k + m + 1))
    d = cfg.out_dir / "obs"
    d.mkdir(parents=True, exist_ok=True)
    paths = [d / "conv.csv"]
    write_conv_csv(paths[0], conv_batches)
    for name, batches in rad_batches.items():
        p = d / f"{name}.csv"
        write_rad_csv(p, batches)
        paths.append(p)
    return paths


def stage_train_forecast(cfg: ExperimentConfig) -> list[Path]:
    nature = _load_nature(cfg)
    spec = cfg.grid()
    fcfg = cfg.raw.get("forecast_training", {})
    seed = cfg.seed + SEED_OFFSETS["train-forecast"]
    train_end = cfg.raw["nature"]["train_end_hour"]
    train_states = [s for s in nature.states if s.time <= train_end]
    nature_train = dyn.NatureRun(train_states, nature.params, nature.cadence_hours)
    vw = VariableWeights.uniform(spec.V)
    lw = lat_weights(spec)

    norm = Normalization.from_states(train_states[::6])
    hidden = tuple(fcfg.get("hidden", [96, 96]))
    fc_short = build_forecast_model(spec.V, norm, hidden=hidden, variant="short",
                                    seed=seed)
    pretrain(fc_short, nature_train, vw, lw,
             cfg.train_cfg(fcfg, SEED_OFFSETS["train-forecast"] + 1,
                           lr=0.05, batch_size=4, epochs=3))
    ro_s = fcfg.get("rollout_short", {})
    rollout_finetune(fc_short, nature_train, RolloutConfig.short(), vw, lw,
                     cfg.train_cfg(ro_s, SEED_OFFSETS["train-forecast"] + 2,
                                   lr=0.01, batch_size=4, epochs=1),
                     start_stride=ro_s.get("start_stride", 2))

    fc_medium = build_forecast_model(spec.V, norm, hidden=hidden, variant="medium",
                                     seed=seed)
    fc_medium.net = fc_short.net.clone()
    ro_m = fcfg.get("rollout_medium", {})
    rollout_finetune(fc_medium, nature_train, RolloutConfig.medium(), vw, lw,
                     cfg.train_cfg(ro_m, SEED_OFFSETS["train-forecast"] + 3,
                                   lr=0.005, batch_size=2, epochs=1),
                     start_stride=ro_m.get("start_stride", 4))

    md = cfg.out_dir / "models"
    md.mkdir(parents=True, exist_ok=True)
    fc_short.save(md / "fc_short")
    fc_medium.save(md / "fc_medium")

    # shared statistics: climatology, spreads, default obs sigma
    clim = build_climatology(train_states[::cfg.raw["cycling"].get("interval_hours", 12)],
                             cfg.raw["cycling"].get("interval_hours", 12))
    clim_stats = compute_clim_stats(train_states[::12], cfg.instruments())
    sigma = (cfg.raw["observations"]["conventional"].get("sigma_frac", 0.05)
             * clim_stats.state_std)
    paths = [md / "fc_short.xcnn", md / "fc_short.json",
             md / "fc_medium.xcnn", md / "fc_medium.json"]
    for k in range(clim.n_slots):
        p = md / f"clim_slot{k}.xcst"
        write_state(p, StateField(spec, k * clim.slot_hours, clim.means[k]))
        paths.append(p)
    stats = {
        "norm_mean": norm.mean.tolist(), "norm_std": norm.std.tolist(),
        "state_std": clim_stats.state_std.tolist(),
        "channel_std": {k: v.tolist() for k, v in clim_stats.channel_std.items()},
        "conv_sigma": sigma.tolist(),
        "clim_slot_hours": clim.slot_hours,
    }
    p = md / "stats.json"
    p.write_text(json.dumps(stats, indent=1))
    paths.append(p)
    return paths


def stage_train_obsop(cfg: ExperimentConfig) -> list[Path]:
    nature = _load_nature(cfg)
    spec = cfg.grid()
    ocfg = cfg.raw.get("obsop_training", {})
    seed = cfg.seed + SEED_OFFSETS["train-obsop"]
    train_end = cfg.raw["nature"]["train_end_hour"]
    train_states = [s for s in nature.states if s.time <= train_end]
    norm, _, _ = _load_stats(cfg)
    md = cfg.out_dir / "models"
    paths = []
    for m, (name, rt) in enumerate(cfg.instruments().items()):
        cols, scan, zen, targets = emulator_training_pairs(
            train_states[::ocfg.get("pair_stride", 12)], rt,
            ocfg.get("pair_density", 0.25), seed=seed + 31 * m)
        em = build_emulator(spec.V, rt.n_channels, norm.mean, norm.std, spec.W,
                            name, hidden=tuple(ocfg.get("hidden", [48, 48])),
                            seed=seed + m)
        train_emulator(em, cols, scan, zen, targets,
                       cfg.train_cfg(ocfg, SEED_OFFSETS["train-obsop"] + m + 1,
                                     lr=0.02, batch_size=64, epochs=6))
        em.save(md / f"emu_{name}")
        paths += [md / f"emu_{name}.xcnn", md / f"emu_{name}.json"]
    return paths


def stage_train_da(cfg: ExperimentConfig) -> list[Path]:
    nature = _load_nature(cfg)
    spec = cfg.grid()
    dcfg = cfg.raw.get("da_training", {})
    seed = cfg.seed + SEED_OFFSETS["train-da"]
    store = _load_obs(cfg)
    deps = _load_deps(cfg)
    cyc = cfg.raw["cycling"]
    boot_cycles = dcfg.get("bootstrap_cycles", 110)
    phase_starts = dcfg.get("phase_starts")
    if phase_starts is None:
        spin = cfg.raw["nature"].get("spinup_hours", 240)
        span = boot_cycles * cyc.get("interval_hours", 12)
        phase_starts = [240, 240 + span, 240 + 2 * span]
    cp_boot = CyclePlan(cyc.get("interval_hours", 12),
                        tuple(cyc.get("long_offsets", (0, 3, 6, 9))),
                        tuple(cyc.get("short_offsets", (0,))),
                        cyc.get("short_window_hours", 3), boot_cycles, 0)
    hidden = tuple(dcfg.get("hidden", [64, 64]))
    vw, lw = deps.vw, deps.lw
    md = cfg.out_dir / "models"

    names = list(cfg.raw["observations"]["instruments"])
    first, second = names[0], names[1] if len(names) > 1 else names[0]

    conv_tuples = collect_conv_tuples(
        nature, store, cp_boot, phase_starts[0], deps, seed=seed + 1,
        oracle_iters=dcfg.get("oracle_iters", 10))
    gs, bm, bs, osc = fit_da_scales(conv_tuples)
    da_conv = build_da_model(spec.V, "conv", gs, bm, bs, osc, hidden=hidden,
                             seed=seed + 2)
    train_da(da_conv, conv_tuples, vw, lw,
             cfg.train_cfg(dcfg, SEED_OFFSETS["train-da"] + 3,
                           lr=0.02, batch_size=4, epochs=60))
    da_conv.save(md / "da_conv")
    paths = [md / "da_conv.xcnn", md / "da_conv.json"]

    a_tuples = collect_radiance_tuples(
        nature, store, cp_boot, phase_starts[1], deps, da_conv, seed=seed + 4,
        instr_first=first, instr_second=second)
    gs, bm, bs, osc = fit_da_scales(a_tuples)
    da_a = build_da_model(spec.V, first, gs, bm, bs, osc, hidden=hidden, seed=seed + 5)
    da_a.net = da_conv.net.clone()
    train_da(da_a, a_tuples, vw, lw,
             cfg.train_cfg(dcfg, SEED_OFFSETS["train-da"] + 6,
                           lr=0.015, batch_size=4, epochs=60))
    da_a.save(md / f"da_{first}")
    paths += [md / f"da_{first}.xcnn", md / f"da_{first}.json"]

    if second != first:
        b_tuples = collect_radiance_tuples(
            nature, store, cp_boot, phase_starts[2], deps, da_conv, seed=seed + 7,
            instr_first=first, instr_second=second, first_model=da_a)
        gs, bm, bs, osc = fit_da_scales(b_tuples)
        da_b = build_da_model(spec.V, second, gs, bm, bs, osc, hidden=hidden,
                              seed=seed + 8)
        da_b.net = da_a.net.clone()
        train_da(da_b, b_tuples, vw, lw,
                 cfg.train_cfg(dcfg, SEED_OFFSETS["train-da"] + 9,
                               lr=0.015, batch_size=4, epochs=60))
        da_b.save(md / f"da_{second}")
        paths += [md / f"da_{second}.xcnn", md / f"da_{second}.json"]
    return paths


def stage_cycle(cfg: ExperimentConfig) -> list[Path]:
    nature = _load_nature(cfg)
    store = _load_obs(cfg)
    deps = _load_deps(cfg)
    models = _load_da_models(cfg)
    cp = cfg.cycle_plan()
    start = cfg.raw["cycling"].get("start_hour", cfg.raw["nature"]["train_end_hour"])
    cspec = CascadeSpec.ordered("conv", *cfg.raw["observations"]["instruments"])
    x_b0 = spinup_background(nature, start, deps)
    records = run_cycles(x_b0, nature, store, cp, models, cspec, deps)

    d = cfg.out_dir / "cycle"
    d.mkdir(parents=True, exist_ok=True)
    paths = []
    rows = []
    for r in records:
        pa = d / f"analysis_{r.index:04d}.xcst"
        ps = d / f"forecast_init_{r.index:04d}.xcst"
        write_state(pa, r.product.x_a)
        write_state(ps, r.product_short.x_a)
        paths += [pa, ps]
        rows.append({
            "index": r.index, "t0": r.t0,
            "streams": r.product.streams,
            "qc": {n: rep.streams[n] for n, rep in r.product.qc.items()},
            "grad_norms": {n: repr(v) for n, v in r.product.grad_norms.items()},
            "rmse_background": [repr(float(x)) for x in r.rmse_background],
            "rmse_analysis": [repr(float(x)) for x in r.rmse_analysis],
            "rmse_short": [repr(float(x)) for x in r.rmse_short],
        })
    p = d / "records.json"
    p.write_text(json.dumps({"cycles": rows, "spinup_cycles": cp.spinup_cycles},
                            indent=1))
    paths.append(p)
    return paths


def stage_forecast(cfg: ExperimentConfig) -> list[Path]:
    nature = _load_nature(cfg)
    deps = _load_deps(cfg)
    cp = cfg.cycle_plan()
    fcfg = cfg.raw.get("forecast_stage", {})
    leads = fcfg.get("leads", [24, 48, 72, 96, 120])
    stride = fcfg.get("init_stride_cycles", 20)
    d = cfg.out_dir / "cycle"
    fd = cfg.out_dir / "forecasts"
    fd.mkdir(parents=True, exist_ok=True)
    paths = []
    last = nature.times[-1]
    for k in range(cp.spinup_cycles, cp.n_cycles, stride):
        init = read_state(d / f"forecast_init_{k:04d}.xcst")
        for lead in leads:
            if init.time + lead > last:
                continue
            fc = forecast_to(deps.fc_short, deps.fc_medium, init, lead, deps.rc)
            p = fd / f"fcst_i{init.time:06d}_l{lead:03d}.xcst"
            write_state(p, fc)
            paths.append(p)
    return paths


def stage_verify(cfg: ExperimentConfig) -> list[Path]:
    nature = _load_nature(cfg)
    clim = _load_climatology(cfg)
    spec = cfg.grid()
    lw = lat_weights(spec)
    fcfg = cfg.raw.get("forecast_stage", {})
    leads = fcfg.get("leads", [24, 48, 72, 96, 120])
    fd = cfg.out_dir / "forecasts"
    by_lead = {lead: [] for lead in leads}
    for p in sorted(fd.glob("fcst_i*_l*.xcst")):
        fc = read_state(p)
        lead = int(p.stem.split("_l")[1])
        truth = nature.at_time(fc.time)
        by_lead[lead].append((fc, truth))
    eval_sets = [EvalSet(pairs, lead) for lead, pairs in sorted(by_lead.items())
                 if pairs]
    name = cfg.raw.get("name", "run")
    report = evaluate_leads(name, eval_sets, clim, lw)
    mp = cfg.out_dir / "metrics.csv"
    report.write_csv(mp)
    paths = [mp]
    baseline = cfg.raw.get("verify_baseline")
    if baseline:
        from .verify import MetricsReport
        import csv as _csv

        with open(Path(baseline)) as f:
            base = MetricsReport(list(_csv.DictReader(f)))
        sp = cfg.out_dir / "scorecard.csv"
        write_scorecard(sp, base, report)
        paths.append(sp)
    return paths


STAGE_FUNCS = {
    "nature-run": stage_nature_run,
    "make-obs": stage_make_obs,
    "train-forecast": stage_train_forecast,
    "train-obsop": stage_train_obsop,
    "train-da": stage_train_da,
    "cycle": stage_cycle,
    "forecast": stage_forecast,
    "verify": stage_verify,
}


def run_experiment(config_path, stages: list[str] | None = None,
                   progress=None) -> dict:
    """Execute the configured stages in dependency order; returns the manifest."""
    cfg = ExperimentConfig.from_file(config_path)
    todo = cfg.stages if stages is None else [s for s in STAGES if s in stages]
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    for stage in todo:
        if progress:
            progress(f"stage {stage} ...")
        artifacts = STAGE_FUNCS[stage](cfg)
        _record_stage(cfg, stage, artifacts)
        if progress:
            progress(f"stage {stage} done ({len(artifacts)} artifacts)")
    return _load_manifest(cfg.out_dir)
