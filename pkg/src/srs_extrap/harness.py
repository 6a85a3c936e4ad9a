"""Experiment runner: schemes, metrics and result tables.

Every scheme maps the observations of one Monte-Carlo trial to one full-band
CFR estimate per slot. The runner sweeps hop counts, SNRs and trials, scores
each estimate against the true channel and writes long-form CSV tables plus
an aggregated JSON summary.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from . import hrpe
from .config import ConfigError, ScenarioConfig, SystemConfig, _build, max_doppler, scenario_from_dict
from .scenario import SrsObservation, simulate, synthesize_cfr
from .subspace import NoPathsError, SearchGrids, tst_music
from .tracker import (
    Beliefs,
    Grids,
    MarkovHyperparams,
    SensingOperator,
    TrackerConfig,
    cross_slot_propagate,
    delay_matrix,
    init_from_hrpe,
    track_slot,
    turbo_estep,
)

log = logging.getLogger(__name__)

SCHEMES = ("proposed", "baseline1", "baseline2", "baseline3")


class FatalTrialError(RuntimeError):
    """Too many trials failed."""


# ------------------------------------------------------------------ metrics


def nmse(H_hat: np.ndarray, H: np.ndarray) -> float:
    """||H_hat - H||_F^2 / ||H||_F^2."""
    H_hat, H = np.asarray(H_hat), np.asarray(H)
    if H_hat.shape != H.shape:
        raise ValueError("shape mismatch")
    ref = float(np.sum(np.abs(H) ** 2))
    if ref == 0.0:
        raise ValueError("reference channel is zero")
    return float(np.sum(np.abs(H_hat - H) ** 2) / ref)


def tnmse(series, T: int | None = None) -> float:
    """Mean of the first ``T`` per-slot NMSE values (all when ``T`` is None)."""
    series = np.asarray(series, dtype=float)
    if T is not None:
        if len(series) < T:
            raise ValueError("fewer slots than the requested horizon")
        series = series[:T]
    if len(series) == 0:
        raise ValueError("empty series")
    return float(np.mean(series))


def bwp_nmse(H_hat: np.ndarray, H: np.ndarray, hop_count: int) -> np.ndarray:
    """NMSE restricted to each BWP's contiguous block of tones."""
    N = H.shape[0]
    size = N // hop_count
    return np.array([nmse(H_hat[b * size:(b + 1) * size], H[b * size:(b + 1) * size]) for b in range(hop_count)])


def extrapolation_distance(observed: int, hop_count: int) -> np.ndarray:
    return np.abs(np.arange(hop_count) - observed)


def oscillation_amplitude(bwp_series, hop_count: int, start: int = 0) -> float:
    """Peak-to-trough swing of per-BWP NMSE over one hop cycle.

    ``bwp_series`` is (T, h_p), usually averaged over trials. Rows from
    ``start`` on are folded by slot index modulo ``hop_count``; the swing of
    each BWP's folded profile is averaged over BWPs (linear units).
    """
    B = np.asarray(bwp_series, dtype=float)[start:]
    if B.shape[0] < hop_count:
        raise ValueError("need at least one full hop cycle")
    phase = (np.arange(B.shape[0]) + start) % hop_count
    folded = np.array([B[phase == r].mean(axis=0) for r in range(hop_count)])  # (h_p, h_p)
    return float(np.mean(folded.max(axis=0) - folded.min(axis=0)))


# ------------------------------------------------------------------ schemes


@dataclass
class SchemeRun:
    """Per-slot estimates of one scheme on one trial."""

    estimates: list[np.ndarray]
    flags: list[str] = field(default_factory=list)
    convergence: list[float] | None = None


def _zero_run(observations, system, flag) -> SchemeRun:
    Z = np.zeros((system.num_subcarriers, system.n_r), dtype=complex)
    return SchemeRun([Z.copy() for _ in observations], [flag])


def run_baseline1(observations: list[SrsObservation], system: SystemConfig, grids: SearchGrids | None = None) -> SchemeRun:
    """Independent TST-MUSIC plus LS gains on every slot.

    A slot without detectable paths gets the zero estimate (NMSE 1).
    """
    grids = SearchGrids.default(system.max_delay) if grids is None else grids
    out, flags = [], []
    for obs in observations:
        try:
            e = tst_music(obs.Y, hrpe.slot_model(obs, system.subcarrier_spacing), grids, system.n_x, system.n_y)
            out.append(synthesize_cfr(e.gains, e.delays, e.azimuths, e.elevations, system))
        except NoPathsError:
            flags.append(f"slot {obs.slot}: no detectable paths")
            out.append(np.zeros((system.num_subcarriers, system.n_r), dtype=complex))
    return SchemeRun(out, flags)


def _stage1_proposed(observations, system, grids, iterations):
    return hrpe.r_tst_music(observations, system, grids, iterations=iterations)


def _stage1_uncompensated(observations, system, grids) -> hrpe.StageParams:
    """Plain TST-MUSIC on the spliced window without any compensation."""
    T = len(observations)
    frame = hrpe.compensate_and_splice(observations, np.zeros(T), np.zeros(T), np.zeros((T, 1)), system.subcarrier_spacing)
    model = hrpe.ToneModel(frame.tones, system.subcarrier_spacing, frame.pilot)
    e = tst_music(frame.Y, model, grids, system.n_x, system.n_y)
    K = e.order
    return e, hrpe.StageParams(
        e.delays, e.azimuths, e.elevations, e.gains, np.zeros(K), np.zeros(T), np.zeros(T)
    )


def _track(state, observations, system, cfg: TrackerConfig, flags) -> list[np.ndarray]:
    out = []
    for obs in observations:
        state, res = track_slot(state, obs, system, system.noise_var, cfg)
        out.append(res.H)
    flags.extend(sorted(set(state.flags)))
    return out


def run_proposed(
    observations: list[SrsObservation],
    system: SystemConfig,
    *,
    grids: SearchGrids | None = None,
    hyper: MarkovHyperparams | None = None,
    tracker: TrackerConfig | None = None,
    stage1_iterations: int = 10,
) -> SchemeRun:
    """Refined estimation on the first ``T_e`` slots, then tracking."""
    grids = SearchGrids.default(system.max_delay) if grids is None else grids
    hyper = MarkovHyperparams() if hyper is None else hyper
    tracker = TrackerConfig() if tracker is None else tracker
    T_e = system.t_e
    try:
        est = _stage1_proposed(observations[:T_e], system, grids, stage1_iterations)
    except (NoPathsError, hrpe.ReferencePathError) as exc:
        return _zero_run(observations, system, f"stage 1 failed: {exc}")
    flags = list(est.flags)
    out = [hrpe.reconstruct(est, t, system) for t in range(1, T_e + 1)]
    if len(observations) > T_e:
        state = init_from_hrpe(est, Grids.default(system), hyper, system)
        out += _track(state, observations[T_e:], system, tracker, flags)
    return SchemeRun(out, flags, [entry["objective"] for entry in est.log])


def run_baseline3(
    observations: list[SrsObservation],
    system: SystemConfig,
    *,
    grids: SearchGrids | None = None,
    hyper: MarkovHyperparams | None = None,
    tracker: TrackerConfig | None = None,
) -> SchemeRun:
    """Uncompensated TST-MUSIC over the window, then tracking without M-step.

    Estimation slots use per-slot LS gains on the window's path geometry;
    the tracker keeps the phase noise, timing offset, Doppler and off-grid
    offsets fixed at their initial values.
    """
    grids = SearchGrids.default(system.max_delay) if grids is None else grids
    hyper = MarkovHyperparams() if hyper is None else hyper
    tracker = dataclasses.replace(TrackerConfig() if tracker is None else tracker, em_iterations=0)
    T_e = system.t_e
    window = observations[:T_e]
    try:
        e, params = _stage1_uncompensated(window, system, grids)
    except NoPathsError as exc:
        return _zero_run(observations, system, f"stage 1 failed: {exc}")
    flags: list[str] = []
    out = []
    gains = None
    for obs in window:
        V = hrpe._slot_dictionary(obs, system.subcarrier_spacing, e.delays, e.azimuths, e.elevations, system.n_x, system.n_y)
        gains = hrpe.ls_gains(obs.Y, V, flags)
        out.append(synthesize_cfr(gains, e.delays, e.azimuths, e.elevations, system))
    if len(observations) > T_e:
        params = dataclasses.replace(params, gains=gains)
        state = init_from_hrpe(params, Grids.default(system), hyper, system)
        out += _track(state, observations[T_e:], system, tracker, flags)
    return SchemeRun(out, flags)


def run_baseline2(
    observations: list[SrsObservation],
    system: SystemConfig,
    *,
    hyper: MarkovHyperparams | None = None,
    tracker: TrackerConfig | None = None,
) -> SchemeRun:
    """Per-BWP delay-only trackers with time-hold, no frequency extrapolation.

    Each BWP keeps its own support/amplitude beliefs over (antenna, delay)
    indices. When a slot observes BWP ``b`` its tracker runs one turbo
    E-step and refreshes the estimate of ``b``'s tones; other BWPs keep
    their latest estimate (zero before their first observation).
    """
    hyper = MarkovHyperparams() if hyper is None else hyper
    cfg = TrackerConfig() if tracker is None else tracker
    grids = Grids.default(system)
    h_p = system.hop_count
    size = system.num_subcarriers // h_p
    L, Nr = grids.L, system.n_r
    lam = hyper.steady_state
    current = np.zeros((system.num_subcarriers, Nr), dtype=complex)
    priors: dict[int, Beliefs] = {}
    hyp: dict[int, MarkovHyperparams] = {}
    out, flags = [], []
    f_s = system.subcarrier_spacing
    for obs in observations:
        b = obs.hop_index
        if b not in priors:
            power = float(np.mean(np.abs(obs.Y) ** 2)) / max(lam * L, 1e-12)
            hyp[b] = hyper.resolved(grids, power) if hyper.gamma_amp is None else hyper
            priors[b] = Beliefs(np.full(L * Nr, lam), np.zeros(L * Nr, dtype=complex), np.full(L * Nr, power))
        G = delay_matrix(grids, np.zeros(L), obs.selection, obs.pilot, f_s, 0.0)
        sensing = SensingOperator(G, None, np.ones(L * Nr), 0.0, np.asarray(obs.selection), f_s)
        est = turbo_estep(obs.Y, sensing, priors[b], system.noise_var, cfg.estep_iters, cfg.tol, cfg.damping)
        flags.extend(est.flags)
        priors[b] = cross_slot_propagate(est.beliefs, hyp[b])
        tones = np.arange(b * size, (b + 1) * size)
        F = delay_matrix(grids, np.zeros(L), tones, np.ones(size), f_s, 0.0)
        current = current.copy()
        current[tones] = F @ est.mean.reshape(Nr, L).T
        out.append(current)
    return SchemeRun(out, sorted(set(flags)))


# ------------------------------------------------------------------ experiment


@dataclass(frozen=True)
class ExperimentSpec:
    """One Monte-Carlo sweep.

    ``hop_counts`` overrides the scenario's ``hop_count``; ``horizon``
    includes the estimation window. ``fatal_fraction`` is the share of
    failed trials above which the run is declared failed.
    """

    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    schemes: tuple[str, ...] = SCHEMES
    snr_db: tuple[float, ...] = (15.0,)
    hop_counts: tuple[int, ...] = (4,)
    trials: int = 100
    horizon: int = 16
    output: str | None = None
    seed: int | None = None
    stage1_iterations: int = 10
    tracker: TrackerConfig = field(default_factory=TrackerConfig)
    hyper: MarkovHyperparams = field(default_factory=MarkovHyperparams)
    workers: int = 1
    fatal_fraction: float = 0.1

    def __post_init__(self) -> None:
        if self.trials < 1:
            raise ConfigError("trials must be >= 1")
        bad = set(self.schemes) - set(SCHEMES)
        if bad or not self.schemes:
            raise ConfigError(f"unknown schemes: {sorted(bad)}")
        if not self.snr_db or not self.hop_counts:
            raise ConfigError("snr_db and hop_counts must be non-empty")
        for h in self.hop_counts:
            try:
                dataclasses.replace(self.scenario.system, hop_count=int(h))
            except ConfigError as exc:
                raise ConfigError(f"hop count {h}: {exc}") from exc
        if self.horizon < 1:
            raise ConfigError("horizon must be >= 1")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")

    @property
    def base_seed(self) -> int:
        return self.scenario.system.rng_seed if self.seed is None else int(self.seed)


def experiment_from_dict(data: Mapping[str, Any]) -> ExperimentSpec:
    """Build a spec from a mapping with ``scenario``, ``experiment``, ``tracker`` and ``hyper`` sections."""
    data = dict(data or {})
    unknown = set(data) - {"scenario", "experiment", "tracker", "hyper"}
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    exp = dict(data.get("experiment") or {})
    names = {f.name for f in dataclasses.fields(ExperimentSpec)} - {"scenario", "tracker", "hyper"}
    bad = set(exp) - names
    if bad:
        raise ConfigError(f"unknown experiment keys: {sorted(bad)}")
    for key in ("schemes", "snr_db", "hop_counts"):
        if key in exp:
            val = exp[key]
            exp[key] = tuple(val) if isinstance(val, (list, tuple)) else (val,)
    tr = dict(data.get("tracker") or {})
    if "blocks" in tr:
        tr["blocks"] = tuple(tr["blocks"])
    try:
        return ExperimentSpec(
            scenario=scenario_from_dict(data.get("scenario")),
            tracker=_build(TrackerConfig, tr),
            hyper=_build(MarkovHyperparams, data.get("hyper")),
            **exp,
        )
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc


@dataclass
class TrialResult:
    scheme: str
    hop_count: int
    snr_db: float
    trial: int
    nmse: np.ndarray  # (T,)
    bwp_nmse: np.ndarray  # (T, h_p)
    observed: np.ndarray  # (T,) observed BWP per slot
    flags: list[str]
    convergence: list[float] | None = None
    fatal: str | None = None


def _scheme_run(name, observations, system, spec: ExperimentSpec, grids) -> SchemeRun:
    hyper = spec.hyper
    if hyper.max_doppler is None:
        hyper = dataclasses.replace(hyper, max_doppler=max_doppler(spec.scenario) or None)
    if name == "proposed":
        return run_proposed(
            observations, system, grids=grids, hyper=hyper, tracker=spec.tracker,
            stage1_iterations=spec.stage1_iterations,
        )
    if name == "baseline1":
        return run_baseline1(observations, system, grids)
    if name == "baseline2":
        return run_baseline2(observations, system, hyper=hyper, tracker=spec.tracker)
    return run_baseline3(observations, system, grids=grids, hyper=hyper, tracker=spec.tracker)


def run_trial(spec: ExperimentSpec, hop_count: int, snr_db: float, trial: int) -> list[TrialResult]:
    """All schemes on one realisation (paths, drift and unit noise shared across SNRs)."""
    system = dataclasses.replace(spec.scenario.system, hop_count=int(hop_count)).with_snr(snr_db)
    cfg = dataclasses.replace(spec.scenario, system=system)
    sc = simulate(cfg, spec.horizon, seed=spec.base_seed, trial=trial)
    grids = SearchGrids.default(system.max_delay)
    observed = np.array([o.hop_index for o in sc.observations])
    results = []
    for name in spec.schemes:
        try:
            run = _scheme_run(name, sc.observations, system, spec, grids)
        except Exception as exc:  # noqa: BLE001 - recorded as a fatal trial
            log.warning("trial %d %s failed: %s", trial, name, exc)
            results.append(TrialResult(
                name, hop_count, snr_db, trial, np.full(spec.horizon, np.nan),
                np.full((spec.horizon, hop_count), np.nan), observed, [], fatal=f"{type(exc).__name__}: {exc}",
            ))
            continue
        per_slot = np.array([nmse(H_hat, H) for H_hat, H in zip(run.estimates, sc.channels)])
        per_bwp = np.array([bwp_nmse(H_hat, H, hop_count) for H_hat, H in zip(run.estimates, sc.channels)])
        results.append(TrialResult(name, hop_count, snr_db, trial, per_slot, per_bwp, observed, run.flags, run.convergence))
    return results


def _task(args):
    spec, h, snr, trial = args
    return run_trial(spec, h, snr, trial)


@dataclass
class ExperimentResult:
    spec: ExperimentSpec
    trials: list[TrialResult]

    def select(self, scheme: str, hop_count: int | None = None, snr_db: float | None = None, ok_only: bool = True):
        out = [
            r for r in self.trials
            if r.scheme == scheme
            and (hop_count is None or r.hop_count == hop_count)
            and (snr_db is None or r.snr_db == snr_db)
            and (r.fatal is None or not ok_only)
        ]
        return out

    def nmse_matrix(self, scheme, hop_count, snr_db) -> np.ndarray:
        """(trials, T) per-slot NMSE of the non-fatal trials."""
        rows = self.select(scheme, hop_count, snr_db)
        return np.array([r.nmse for r in rows]).reshape(len(rows), -1)

    def fatal_count(self) -> int:
        return sum(r.fatal is not None for r in self.trials)

    def summary(self) -> dict:
        spec = self.spec
        T_e = spec.scenario.system.t_e if spec.scenario.system.estimation_slots else None
        out: dict[str, Any] = {"horizon": spec.horizon, "trials": spec.trials, "fatal": self.fatal_count(), "results": []}
        for h in spec.hop_counts:
            t_e = T_e if T_e is not None else h
            for snr in spec.snr_db:
                for name in spec.schemes:
                    rows = self.select(name, h, snr)
                    if not rows:
                        continue
                    M = np.array([r.nmse for r in rows])
                    track = M[:, t_e:] if M.shape[1] > t_e else M
                    per_trial = track.mean(axis=1)
                    B = np.array([r.bwp_nmse for r in rows])  # (n, T, h)
                    obs = rows[0].observed
                    dist = np.abs(np.arange(h)[None, :] - obs[:, None])  # (T, h)
                    by_distance = [
                        float(np.mean(B[:, t_e:][:, dist[t_e:] == d])) if np.any(dist[t_e:] == d) else None
                        for d in range(h)
                    ]
                    out["results"].append({
                        "scheme": name,
                        "hop_count": h,
                        "snr_db": snr,
                        "trials": len(rows),
                        "tnmse": float(M.mean()),
                        "tracking_nmse": float(per_trial.mean()),
                        "tracking_nmse_se": float(per_trial.std(ddof=1) / np.sqrt(len(rows))) if len(rows) > 1 else None,
                        "nmse_per_slot": [float(v) for v in M.mean(axis=0)],
                        "bwp_nmse_per_slot": [[float(v) for v in row] for row in B.mean(axis=0)],
                        "bwp_nmse_by_distance": by_distance,
                        "oscillation_amplitude": (
                            oscillation_amplitude(B.mean(axis=0), h, t_e) if B.shape[1] - t_e >= h else None
                        ),
                        "flagged_trials": sum(bool(r.flags) for r in rows),
                    })
        return out


def run_experiment(spec: ExperimentSpec, progress: bool = False) -> ExperimentResult:
    """Monte-Carlo loop over hop counts, SNRs and trials; writes outputs when ``spec.output`` is set."""
    tasks = [(spec, h, snr, i) for h in spec.hop_counts for snr in spec.snr_db for i in range(spec.trials)]
    if spec.workers > 1:
        with ProcessPoolExecutor(max_workers=spec.workers) as pool:
            chunks = list(pool.map(_task, tasks))
    else:
        chunks = []
        for n, t in enumerate(tasks):
            chunks.append(_task(t))
            if progress:
                log.info("task %d/%d done", n + 1, len(tasks))
    trials = [r for chunk in chunks for r in chunk]
    order = {s: i for i, s in enumerate(SCHEMES)}
    trials.sort(key=lambda r: (order[r.scheme], r.hop_count, r.snr_db, r.trial))
    result = ExperimentResult(spec, trials)
    if spec.output:
        write_outputs(result, spec.output)
    n_units = len(tasks) * len(spec.schemes)
    if n_units and result.fatal_count() / n_units > spec.fatal_fraction:
        raise FatalTrialError(f"{result.fatal_count()} of {n_units} scheme runs failed")
    return result


def _fmt(v: float) -> str:
    return repr(float(v))


def write_outputs(result: ExperimentResult, directory: str | Path) -> None:
    """nmse.csv, bwp_nmse.csv, convergence.csv and summary.json."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    with open(d / "nmse.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["scheme", "hop_count", "snr_db", "trial", "slot", "observed_bwp", "nmse", "fatal"])
        for r in result.trials:
            for t, v in enumerate(r.nmse):
                w.writerow([r.scheme, r.hop_count, _fmt(r.snr_db), r.trial, t + 1, int(r.observed[t]), _fmt(v), int(r.fatal is not None)])
    with open(d / "bwp_nmse.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["scheme", "hop_count", "snr_db", "trial", "slot", "observed_bwp", "bwp", "distance", "nmse"])
        for r in result.trials:
            for t in range(len(r.nmse)):
                for b in range(r.hop_count):
                    w.writerow([
                        r.scheme, r.hop_count, _fmt(r.snr_db), r.trial, t + 1, int(r.observed[t]), b,
                        abs(b - int(r.observed[t])), _fmt(r.bwp_nmse[t, b]),
                    ])
    with open(d / "convergence.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["hop_count", "snr_db", "trial", "iteration", "objective"])
        for r in result.trials:
            if r.scheme == "proposed" and r.convergence:
                for i, v in enumerate(r.convergence):
                    w.writerow([r.hop_count, _fmt(r.snr_db), r.trial, i, _fmt(v)])
    with open(d / "summary.json", "w") as fh:
        json.dump(result.summary(), fh, indent=2, sort_keys=True)
        fh.write("\n")
