"""Command-line interface.

Verbs: ``generate`` (simulate one trial to CSV), ``estimate`` (stage-1 on a
generated trial), ``track`` (stage-2 from a stage-1 estimate), ``bench``
(Monte-Carlo sweep) and ``report`` (print a summary table). Values in the
``--config`` file take precedence over command-line flags.

Exit codes: 0 success, 2 invalid configuration, 3 too many failed trials.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import hrpe
from .config import ConfigError, _build, load_yaml, scenario_from_dict, scenario_to_dict
from .harness import FatalTrialError, experiment_from_dict, nmse, run_experiment
from .scenario import SrsObservation, read_complex_csv, simulate, write_complex_csv
from .subspace import NoPathsError
from .tracker import Grids, MarkovHyperparams, TrackerConfig, init_from_hrpe, track_slot

EXIT_OK, EXIT_CONFIG, EXIT_FATAL = 0, 2, 3


def _merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _config(args) -> dict:
    return load_yaml(args.config) if getattr(args, "config", None) else {}


def _scenario(args, data: dict):
    scen = dict(data.get("scenario") or {})
    flags: dict = {"system": {}}
    if getattr(args, "snr", None) is not None:
        flags["system"]["noise_var"] = float(10 ** (-args.snr / 10))
    if getattr(args, "seed", None) is not None:
        flags["system"]["rng_seed"] = int(args.seed)
    return scenario_from_dict(_merge(flags, scen))


# ------------------------------------------------------------------ verbs


def cmd_generate(args) -> int:
    data = _config(args)
    cfg = _scenario(args, data)
    horizon = int(data.get("experiment", {}).get("horizon", args.horizon))
    sc = simulate(cfg, horizon, trial=args.trial)
    out = Path(args.output)
    (out / "observations").mkdir(parents=True, exist_ok=True)
    (out / "channels").mkdir(parents=True, exist_ok=True)
    slots = []
    for H, obs in zip(sc.channels, sc.observations):
        write_complex_csv(out / "channels" / f"slot_{obs.slot:04d}.csv", H)
        write_complex_csv(out / "observations" / f"slot_{obs.slot:04d}.csv", obs.Y)
        slots.append({
            "slot": obs.slot, "hop_index": obs.hop_index,
            "selection": [int(v) for v in obs.selection],
            "pilot_re": [float(v) for v in obs.pilot.real], "pilot_im": [float(v) for v in obs.pilot.imag],
        })
    p, tr = sc.paths, sc.trace
    meta = {
        "scenario": scenario_to_dict(cfg),
        "trial": args.trial,
        "slots": slots,
        "truth": {
            "gains_re": p.gains.real.tolist(), "gains_im": p.gains.imag.tolist(),
            "azimuths": p.azimuths.tolist(), "elevations": p.elevations.tolist(),
            "delays": p.delays.tolist(), "dopplers": p.dopplers.tolist(),
            "phase_noise": tr.phase_noise.tolist(), "time_offset": tr.time_offset.tolist(),
        },
    }
    (out / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return EXIT_OK


def _load_trial(directory: Path):
    meta = json.loads((directory / "meta.json").read_text())
    cfg = scenario_from_dict(meta["scenario"])
    observations = []
    for s in meta["slots"]:
        Y = read_complex_csv(directory / "observations" / f"slot_{s['slot']:04d}.csv")
        pilot = np.asarray(s["pilot_re"]) + 1j * np.asarray(s["pilot_im"])
        observations.append(SrsObservation(Y, s["slot"], s["hop_index"], pilot, np.asarray(s["selection"])))
    channels = []
    for s in meta["slots"]:
        path = directory / "channels" / f"slot_{s['slot']:04d}.csv"
        channels.append(read_complex_csv(path) if path.exists() else None)
    return cfg, observations, channels


def _params_to_json(p: hrpe.StageParams) -> dict:
    return {
        "delays": p.delays.tolist(), "azimuths": p.azimuths.tolist(), "elevations": p.elevations.tolist(),
        "gains_re": np.real(p.gains).tolist(), "gains_im": np.imag(p.gains).tolist(),
        "doppler_slope": p.doppler_slope.tolist(), "phase_noise": p.phase_noise.tolist(),
        "time_offset": p.time_offset.tolist(),
    }


def _params_from_json(d: dict) -> hrpe.StageParams:
    return hrpe.StageParams(
        np.asarray(d["delays"]), np.asarray(d["azimuths"]), np.asarray(d["elevations"]),
        np.asarray(d["gains_re"]) + 1j * np.asarray(d["gains_im"]), np.asarray(d["doppler_slope"]),
        np.asarray(d["phase_noise"]), np.asarray(d["time_offset"]),
    )


def cmd_estimate(args) -> int:
    data = _config(args)
    cfg, observations, _ = _load_trial(Path(args.input))
    system = cfg.system
    iterations = int(data.get("experiment", {}).get("stage1_iterations", args.iterations))
    try:
        est = hrpe.r_tst_music(observations[: system.t_e], system, iterations=iterations)
    except NoPathsError as exc:
        print(f"stage 1 failed: {exc}", file=sys.stderr)
        return EXIT_FATAL
    out = Path(args.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    payload = {"params": _params_to_json(est), "flags": est.flags,
               "objective": [e["objective"] for e in est.log]}
    out.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    if args.log:
        hrpe.write_iteration_log(args.log, est)
    return EXIT_OK


def cmd_track(args) -> int:
    data = _config(args)
    cfg, observations, channels = _load_trial(Path(args.input))
    system = cfg.system
    tracker = _build(TrackerConfig, data.get("tracker"))
    if args.em_iterations is not None and "em_iterations" not in (data.get("tracker") or {}):
        tracker = dataclasses.replace(tracker, em_iterations=args.em_iterations)
    hyper = _build(MarkovHyperparams, data.get("hyper"))
    params = _params_from_json(json.loads(Path(args.estimate).read_text())["params"])
    state = init_from_hrpe(params, Grids.default(system), hyper, system)
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for obs, H in zip(observations[system.t_e:], channels[system.t_e:]):
        state, res = track_slot(state, obs, system, system.noise_var, tracker)
        write_complex_csv(out / f"estimate_{obs.slot:04d}.csv", res.H)
        rows.append((obs.slot, nmse(res.H, H) if H is not None else float("nan")))
    with open(out / "nmse.csv", "w") as fh:
        fh.write("slot,nmse\n")
        for slot, v in rows:
            fh.write(f"{slot},{v!r}\n")
    return EXIT_OK


def cmd_bench(args) -> int:
    flags: dict = {"experiment": {}}
    exp = flags["experiment"]
    for name in ("trials", "horizon", "workers", "seed"):
        v = getattr(args, name)
        if v is not None:
            exp[name] = v
    if args.snr is not None:
        exp["snr_db"] = list(args.snr)
    if args.hop_counts is not None:
        exp["hop_counts"] = list(args.hop_counts)
    if args.schemes is not None:
        exp["schemes"] = list(args.schemes)
    exp["output"] = args.output
    data = _merge(flags, _config(args))
    spec = experiment_from_dict(data)
    try:
        result = run_experiment(spec, progress=args.verbose)
    except FatalTrialError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_FATAL
    _print_summary(result.summary())
    return EXIT_OK


def _print_summary(summary: dict) -> None:
    print(f"{'scheme':<10} {'h_p':>3} {'snr_db':>6} {'trials':>6} {'tnmse':>10} {'track':>10}")
    for r in summary["results"]:
        print(f"{r['scheme']:<10} {r['hop_count']:>3} {r['snr_db']:>6.1f} {r['trials']:>6} "
              f"{r['tnmse']:>10.4g} {r['tracking_nmse']:>10.4g}")


def cmd_report(args) -> int:
    path = Path(args.input)
    path = path / "summary.json" if path.is_dir() else path
    try:
        summary = json.loads(path.read_text())
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read summary {path}: {exc}") from exc
    _print_summary(summary)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="srs-extrap", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", required=True)

    g = sub.add_parser("generate", help="simulate one trial and write CSV files")
    g.add_argument("--config")
    g.add_argument("--output", required=True)
    g.add_argument("--trial", type=int, default=0)
    g.add_argument("--snr", type=float)
    g.add_argument("--seed", type=int)
    g.add_argument("--horizon", type=int, default=16)
    g.set_defaults(func=cmd_generate)

    e = sub.add_parser("estimate", help="stage-1 estimation on a generated trial")
    e.add_argument("--config")
    e.add_argument("--input", required=True)
    e.add_argument("--output", required=True)
    e.add_argument("--iterations", type=int, default=10)
    e.add_argument("--log", help="optional iteration-log CSV path")
    e.set_defaults(func=cmd_estimate)

    t = sub.add_parser("track", help="stage-2 tracking from a stage-1 estimate")
    t.add_argument("--config")
    t.add_argument("--input", required=True)
    t.add_argument("--estimate", required=True)
    t.add_argument("--output", required=True)
    t.add_argument("--em-iterations", type=int)
    t.set_defaults(func=cmd_track)

    b = sub.add_parser("bench", help="Monte-Carlo comparison of the schemes")
    b.add_argument("--config")
    b.add_argument("--output", required=True)
    b.add_argument("--trials", type=int)
    b.add_argument("--horizon", type=int)
    b.add_argument("--snr", type=float, nargs="+")
    b.add_argument("--hop-counts", type=int, nargs="+")
    b.add_argument("--schemes", nargs="+")
    b.add_argument("--workers", type=int)
    b.add_argument("--seed", type=int)
    b.set_defaults(func=cmd_bench)

    r = sub.add_parser("report", help="print the summary of a bench run")
    r.add_argument("--input", required=True)
    r.set_defaults(func=cmd_report)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"invalid configuration: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
