import csv
import dataclasses
import json

import numpy as np
import pytest
import yaml
from hypothesis import given
from hypothesis import strategies as st

from oracles import on_grid_paths
from srs_extrap import cli, harness, hrpe
from srs_extrap.config import ConfigError, DriftConfig, ScenarioConfig, SystemConfig
from srs_extrap.harness import (
    ExperimentSpec,
    FatalTrialError,
    bwp_nmse,
    experiment_from_dict,
    extrapolation_distance,
    nmse,
    oscillation_amplitude,
    run_baseline1,
    run_baseline2,
    run_baseline3,
    run_experiment,
    run_proposed,
    run_trial,
    tnmse,
)
from srs_extrap.scenario import simulate
from srs_extrap.subspace import NoPathsError, SearchGrids
from srs_extrap.tracker import TrackerConfig


def _static(noise_var=0.0, **system):
    return ScenarioConfig(
        system=SystemConfig(noise_var=noise_var, **system),
        drift=DriftConfig(doppler=False, phase_noise=False, timing_offset_scale=0.0),
    )


def _cplx(rng, shape):
    return rng.normal(size=shape) + 1j * rng.normal(size=shape)


# ------------------------------------------------------------------ metrics


def test_nmse_reference_values(rng):
    H = _cplx(rng, (8, 4))
    assert nmse(H, H) == 0.0
    assert nmse(np.zeros_like(H), H) == pytest.approx(1.0)
    assert nmse(2 * H, H) == pytest.approx(1.0)
    assert nmse(1.5 * H, H) == pytest.approx(0.25)


def test_nmse_rejects_zero_reference_and_shape_mismatch(rng):
    with pytest.raises(ValueError):
        nmse(np.ones((2, 2)), np.zeros((2, 2)))
    with pytest.raises(ValueError):
        nmse(np.ones((2, 3)), np.ones((3, 2)))


@given(st.floats(0.1, 10.0), st.floats(-np.pi, np.pi), st.integers(0, 1000))
def test_nmse_invariant_to_common_scaling(scale, angle, seed):
    r = np.random.default_rng(seed)
    H, E = _cplx(r, (6, 3)), _cplx(r, (6, 3))
    c = scale * np.exp(1j * angle)
    assert nmse(c * E, c * H) == pytest.approx(nmse(E, H), rel=1e-10)


def test_tnmse():
    assert tnmse([0.3] * 7) == pytest.approx(0.3)
    assert tnmse([0.0, 1.0]) == pytest.approx(0.5)
    assert tnmse([0.0, 1.0, 5.0], T=2) == pytest.approx(0.5)
    with pytest.raises(ValueError):
        tnmse([0.1, 0.2], T=3)
    with pytest.raises(ValueError):
        tnmse([])


def test_bwp_nmse_localises_error(rng):
    H = _cplx(rng, (16, 2))
    E = H.copy()
    E[8:12] = 0.0  # third of four BWPs
    per = bwp_nmse(E, H, 4)
    np.testing.assert_allclose(per, [0, 0, 1, 0], atol=1e-15)
    assert bwp_nmse(E, H, 1)[0] == pytest.approx(nmse(E, H))


def test_extrapolation_distance():
    np.testing.assert_array_equal(extrapolation_distance(1, 4), [1, 0, 1, 2])


def test_oscillation_amplitude():
    assert oscillation_amplitude(np.full((8, 4), 0.2), 4) == 0.0
    # BWP b is bad (1.0) only when observed at slot index t % 4 == b, else 0.
    B = np.array([[1.0 if (t % 4) == b else 0.0 for b in range(4)] for t in range(8)])
    assert oscillation_amplitude(B, 4) == pytest.approx(1.0)
    assert oscillation_amplitude(B, 4, start=4) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        oscillation_amplitude(B, 4, start=6)


# ------------------------------------------------------------------ schemes


@pytest.fixture(scope="module")
def on_grid_static():
    cfg = _static()
    grids = SearchGrids.default(cfg.system.max_delay)
    paths = on_grid_paths(grids, 2, np.random.default_rng(3))
    return cfg, grids, simulate(cfg, 6, paths=paths)


def test_baseline1_noiseless_on_grid(on_grid_static):
    cfg, grids, sc = on_grid_static
    run = run_baseline1(sc.observations[:4], cfg.system, grids)
    errs = [nmse(E, H) for E, H in zip(run.estimates, sc.channels)]
    assert max(errs) < 1e-6


def test_baseline1_zero_estimate_when_nothing_detected(on_grid_static, monkeypatch):
    cfg, grids, sc = on_grid_static

    def boom(*a, **k):
        raise NoPathsError("nothing")

    monkeypatch.setattr(harness, "tst_music", boom)
    run = run_baseline1(sc.observations[:2], cfg.system, grids)
    assert all(np.all(E == 0) for E in run.estimates)
    assert len(run.flags) == 2


def test_proposed_estimation_slots_match_stage1(on_grid_static):
    cfg, grids, sc = on_grid_static
    system = cfg.system
    obs = sc.observations[: system.t_e]
    run = run_proposed(obs, system, grids=grids, stage1_iterations=2)
    est = hrpe.r_tst_music(obs, system, grids, iterations=2)
    assert len(run.estimates) == system.t_e
    for t, E in enumerate(run.estimates, start=1):
        np.testing.assert_allclose(E, hrpe.reconstruct(est, t, system), atol=1e-12)
    assert run.convergence == [e["objective"] for e in est.log]


def test_proposed_stage1_failure_gives_zero_estimates(on_grid_static, monkeypatch):
    cfg, grids, sc = on_grid_static

    def boom(*a, **k):
        raise NoPathsError("nothing")

    monkeypatch.setattr(harness, "_stage1_proposed", boom)
    run = run_proposed(sc.observations, cfg.system, grids=grids)
    assert len(run.estimates) == len(sc.observations)
    assert all(np.all(E == 0) for E in run.estimates)
    assert run.flags and run.flags[0].startswith("stage 1 failed")


def test_baseline2_time_hold_and_zero_before_first_visit():
    cfg = ScenarioConfig(system=SystemConfig(noise_var=1e-3))
    system = cfg.system
    sc = simulate(cfg, 6, trial=4)
    run = run_baseline2(sc.observations, system)
    size = system.num_subcarriers // system.hop_count
    seen: set[int] = set()
    prev = np.zeros((system.num_subcarriers, system.n_r), dtype=complex)
    for obs, E in zip(sc.observations, run.estimates):
        seen.add(obs.hop_index)
        for b in range(system.hop_count):
            block = slice(b * size, (b + 1) * size)
            if b == obs.hop_index:
                assert np.any(E[block] != 0)
            elif b in seen:
                np.testing.assert_array_equal(E[block], prev[block])
            else:
                assert np.all(E[block] == 0)
        prev = E


def test_baseline2_fits_observed_bwp():
    cfg = _static(noise_var=1e-4)
    sc = simulate(cfg, 4, trial=2)
    run = run_baseline2(sc.observations, cfg.system)
    # after one hop cycle every BWP has been seen once
    per = bwp_nmse(run.estimates[-1], sc.channels[-1], cfg.system.hop_count)
    assert np.all(per < 0.1), per


def test_baseline3_forces_no_mstep():
    cfg = ScenarioConfig(system=SystemConfig(noise_var=1e-3))
    sc = simulate(cfg, 6, trial=1)
    a = run_baseline3(sc.observations, cfg.system, tracker=TrackerConfig(em_iterations=5))
    b = run_baseline3(sc.observations, cfg.system, tracker=TrackerConfig(em_iterations=0))
    assert len(a.estimates) == 6
    for Ea, Eb in zip(a.estimates, b.estimates):
        np.testing.assert_array_equal(Ea, Eb)


def test_baseline3_estimation_slots_without_imperfections(on_grid_static):
    cfg, grids, sc = on_grid_static
    run = run_baseline3(sc.observations[: cfg.system.t_e], cfg.system, grids=grids)
    errs = [nmse(E, H) for E, H in zip(run.estimates, sc.channels)]
    assert max(errs) < 1e-6


# ------------------------------------------------------------------ experiment


def test_spec_validation():
    with pytest.raises(ConfigError):
        ExperimentSpec(trials=0)
    with pytest.raises(ConfigError):
        ExperimentSpec(schemes=("proposed", "oracle"))
    with pytest.raises(ConfigError):
        ExperimentSpec(schemes=())
    with pytest.raises(ConfigError):
        ExperimentSpec(hop_counts=(3,))
    with pytest.raises(ConfigError):
        ExperimentSpec(horizon=0)
    with pytest.raises(ConfigError):
        ExperimentSpec(workers=0)
    with pytest.raises(ConfigError):
        ExperimentSpec(snr_db=())


def test_experiment_from_dict():
    spec = experiment_from_dict({
        "scenario": {"system": {"n_x": 2}},
        "experiment": {"trials": 3, "snr_db": 5, "schemes": ["baseline1"]},
        "tracker": {"em_iterations": 2},
    })
    assert spec.trials == 3 and spec.snr_db == (5,) and spec.schemes == ("baseline1",)
    assert spec.scenario.system.n_x == 2 and spec.tracker.em_iterations == 2
    for bad in ({"extra": {}}, {"experiment": {"nope": 1}}, {"tracker": {"nope": 1}},
                {"experiment": {"trials": -1}}):
        with pytest.raises(ConfigError):
            experiment_from_dict(bad)


@pytest.fixture(scope="module")
def small_run():
    spec = ExperimentSpec(trials=1, horizon=6, snr_db=(10.0,), seed=11)
    return run_experiment(spec)


def test_run_experiment_rows(small_run):
    assert len(small_run.trials) == 4
    assert small_run.fatal_count() == 0
    for name in harness.SCHEMES:
        (row,) = small_run.select(name)
        assert row.nmse.shape == (6,) and row.bwp_nmse.shape == (6, 4)
        assert np.all(np.isfinite(row.nmse)) and np.all(row.nmse >= 0)
        np.testing.assert_array_equal(row.observed, [0, 1, 2, 3, 0, 1])
        assert small_run.nmse_matrix(name, 4, 10.0).shape == (1, 6)


def test_summary_fields(small_run):
    s = small_run.summary()
    assert s["horizon"] == 6 and s["trials"] == 1 and s["fatal"] == 0
    assert [r["scheme"] for r in s["results"]] == list(harness.SCHEMES)
    r = s["results"][0]
    assert r["tnmse"] == pytest.approx(tnmse(small_run.select("proposed")[0].nmse))
    assert len(r["nmse_per_slot"]) == 6 and len(r["bwp_nmse_by_distance"]) == 4
    assert r["oscillation_amplitude"] is None  # fewer than one cycle after the window
    json.dumps(s)


def test_run_trial_is_deterministic(small_run):
    again = run_trial(small_run.spec, 4, 10.0, 0)
    for a in again:
        (b,) = small_run.select(a.scheme)
        np.testing.assert_array_equal(a.nmse, b.nmse)


def test_write_outputs(small_run, tmp_path):
    harness.write_outputs(small_run, tmp_path)
    with open(tmp_path / "nmse.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 4 * 6
    with open(tmp_path / "bwp_nmse.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 4 * 6 * 4
    assert {int(r["distance"]) for r in rows} == {0, 1, 2, 3}
    assert json.loads((tmp_path / "summary.json").read_text())["trials"] == 1
    assert (tmp_path / "convergence.csv").exists()


def test_failing_scheme_is_fatal(monkeypatch):
    def boom(*a, **k):
        raise RuntimeError("broken")

    monkeypatch.setattr(harness, "run_baseline1", boom)
    spec = ExperimentSpec(trials=1, horizon=2, schemes=("baseline1",), fatal_fraction=1.0)
    res = run_experiment(spec)
    (row,) = res.select("baseline1", ok_only=False)
    assert row.fatal.startswith("RuntimeError") and np.all(np.isnan(row.nmse))
    assert res.select("baseline1") == []
    with pytest.raises(FatalTrialError):
        run_experiment(dataclasses.replace(spec, fatal_fraction=0.5))


# ------------------------------------------------------------------ cli


def test_cli_bench_config_overrides_flags(tmp_path, capsys):
    cfg = tmp_path / "cfg.yaml"
    cfg.write_text(yaml.safe_dump({"experiment": {"trials": 1, "horizon": 2, "schemes": ["baseline1"]}}))
    out = tmp_path / "out"
    code = cli.main(["bench", "--config", str(cfg), "--output", str(out), "--trials", "5",
                     "--horizon", "3", "--snr", "10"])
    assert code == cli.EXIT_OK
    summary = json.loads((out / "summary.json").read_text())
    assert summary["trials"] == 1 and summary["horizon"] == 2
    assert summary["results"][0]["snr_db"] == 10
    assert "baseline1" in capsys.readouterr().out
    assert cli.main(["report", "--input", str(out)]) == cli.EXIT_OK


def test_cli_invalid_config_exit_code(tmp_path):
    cfg = tmp_path / "cfg.yaml"
    cfg.write_text(yaml.safe_dump({"experiment": {"trials": 0}}))
    assert cli.main(["bench", "--config", str(cfg), "--output", str(tmp_path / "o")]) == cli.EXIT_CONFIG
    assert cli.main(["report", "--input", str(tmp_path / "missing")]) == cli.EXIT_CONFIG


def test_cli_fatal_exit_code(tmp_path, monkeypatch):
    def boom(spec, progress=False):
        raise FatalTrialError("too many")

    monkeypatch.setattr(cli, "run_experiment", boom)
    assert cli.main(["bench", "--output", str(tmp_path), "--trials", "1"]) == cli.EXIT_FATAL


def test_cli_generate_estimate_track(tmp_path):
    trial = tmp_path / "trial"
    assert cli.main(["generate", "--output", str(trial), "--horizon", "6", "--snr", "20", "--seed", "5"]) == 0
    meta = json.loads((trial / "meta.json").read_text())
    assert len(meta["slots"]) == 6 and meta["scenario"]["system"]["rng_seed"] == 5
    est = tmp_path / "est.json"
    assert cli.main(["estimate", "--input", str(trial), "--output", str(est), "--iterations", "2",
                     "--log", str(tmp_path / "log.csv")]) == 0
    assert len(json.loads(est.read_text())["objective"]) == 3  # initial entry plus one per pass
    out = tmp_path / "track"
    assert cli.main(["track", "--input", str(trial), "--estimate", str(est), "--output", str(out),
                     "--em-iterations", "1"]) == 0
    lines = (out / "nmse.csv").read_text().splitlines()
    assert lines[0] == "slot,nmse" and len(lines) == 3
    assert all(np.isfinite(float(line.split(",")[1])) for line in lines[1:])
