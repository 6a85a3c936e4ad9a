"""Synthetic ground truth, imperfection traces and hopping SRS observations.

Slots are numbered from 1 in every public function, so slot 1 is the
reference slot with all imperfections anchored at zero. BWP and subcarrier
indices are zero-based.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import (
    ConfigError,
    DriftConfig,
    PathSamplerConfig,
    ScenarioConfig,
    SystemConfig,
    max_doppler,
    substream,
)

# substream keys
_PATHS, _IMPERFECTIONS, _NOISE = 0, 1, 2


@dataclass(frozen=True)
class PathSet:
    """Multipath parameters. Angles in radians, delays in seconds."""

    gains: np.ndarray
    azimuths: np.ndarray
    elevations: np.ndarray
    delays: np.ndarray
    dopplers: np.ndarray

    def __post_init__(self) -> None:
        k = len(self.gains)
        if k < 1:
            raise ValueError("a PathSet needs at least one path")
        for name in ("azimuths", "elevations", "delays", "dopplers"):
            if len(getattr(self, name)) != k:
                raise ValueError(f"{name} has wrong length")

    @property
    def num_paths(self) -> int:
        return len(self.gains)

    def sorted_by_power(self) -> "PathSet":
        """Descending |gain|^2, ties broken by smaller delay."""
        order = np.lexsort((self.delays, -np.abs(self.gains) ** 2))
        return self.subset(order)

    def subset(self, index) -> "PathSet":
        return PathSet(*(np.asarray(getattr(self, f.name))[index] for f in dataclasses.fields(self)))


@dataclass(frozen=True)
class ImperfectionTrace:
    """Per-slot imperfections; row ``t-1`` holds slot ``t``."""

    phase_noise: np.ndarray  # (T,)
    time_offset: np.ndarray  # (T,)
    doppler_phase: np.ndarray  # (T, K)
    doppler: np.ndarray  # (T, K) Doppler frequency in force at each slot
    doppler_mean: np.ndarray  # (K,) Gauss-Markov mean

    @property
    def num_slots(self) -> int:
        return len(self.phase_noise)


@dataclass(frozen=True)
class SrsObservation:
    Y: np.ndarray  # (P, N_r)
    slot: int
    hop_index: int
    pilot: np.ndarray
    selection: np.ndarray


def steering_vector_upa(theta, phi, n_x: int, n_y: int) -> np.ndarray:
    """UPA response a_x(theta, phi) kron a_y(theta).

    Vectorised over broadcastable ``theta``/``phi``; the antenna axis is last.
    """
    theta = np.asarray(theta, dtype=float)
    phi = np.asarray(phi, dtype=float)
    nx = np.arange(n_x)
    ny = np.arange(n_y)
    u = (np.sin(theta) * np.cos(phi))[..., None]
    v = np.broadcast_to(np.cos(theta), u.shape[:-1])[..., None]
    ax = np.exp(1j * np.pi * nx * u) / np.sqrt(n_x)
    ay = np.exp(1j * np.pi * ny * v) / np.sqrt(n_y)
    return (ax[..., :, None] * ay[..., None, :]).reshape(*ax.shape[:-1], n_x * n_y)


def delay_steering(tau, n: int | np.ndarray, f_s: float) -> np.ndarray:
    """Entries exp(-j 2 pi n f_s tau).

    ``n`` is either a tone count (all tones 0..n-1) or an explicit index array.
    Scalar ``tau`` gives a vector, array ``tau`` gives one column per delay.
    """
    tones = np.arange(n) if np.isscalar(n) else np.asarray(n)
    tau = np.asarray(tau, dtype=float)
    out = np.exp(-2j * np.pi * f_s * np.multiply.outer(tones, tau))
    return out


def generate_paths(cfg: ScenarioConfig, rng: np.random.Generator) -> PathSet:
    """Sample K paths with uniform delays, sector angles and Rayleigh gains.

    Delays are drawn on ``[0, T_d - tau0_max]`` so that every delayed path
    stays inside the tracker grid span. Gains are normalised so the average
    per-element channel power is one.
    """
    sys_cfg, pc = cfg.system, cfg.paths
    k = pc.num_paths
    upper = max(sys_cfg.max_delay - cfg.timing_offset_max(), 0.0)
    if k > 1 and pc.min_delay_spacing * (k - 1) > upper:
        raise ConfigError("minimum delay spacing cannot be met on the delay interval")
    for _ in range(pc.max_retries):
        delays = rng.uniform(0.0, upper, size=k)
        if k == 1 or np.min(np.diff(np.sort(delays))) >= pc.min_delay_spacing:
            break
    else:
        raise ConfigError("minimum-spacing delay sampling failed after the retry budget")
    az = np.deg2rad(rng.uniform(*pc.azimuth_range, size=k))
    el = np.deg2rad(rng.uniform(*pc.elevation_range, size=k))
    gains = (rng.standard_normal(k) + 1j * rng.standard_normal(k)) / np.sqrt(2)
    if pc.power_decay is not None and pc.power_decay > 0:
        gains = gains * np.exp(-delays / (2 * pc.power_decay))
    if pc.normalize_power:
        gains = gains * np.sqrt(sys_cfg.n_r / np.sum(np.abs(gains) ** 2))
    dopplers = max_doppler(cfg) * np.cos(rng.uniform(0.0, 2 * np.pi, size=k))
    return PathSet(gains, az, el, delays, dopplers).sorted_by_power()


def initial_trace(paths: PathSet) -> ImperfectionTrace:
    k = paths.num_paths
    return ImperfectionTrace(
        phase_noise=np.zeros(1),
        time_offset=np.zeros(1),
        doppler_phase=np.zeros((1, k)),
        doppler=np.asarray(paths.dopplers, dtype=float)[None, :].copy(),
        doppler_mean=np.asarray(paths.dopplers, dtype=float).copy(),
    )


def evolve_imperfections(
    trace: ImperfectionTrace,
    t: int,
    rng: np.random.Generator,
    drift: DriftConfig,
    srs_period: float,
    tau0_max: float,
) -> ImperfectionTrace:
    """Extend ``trace`` (valid through slot t-1) to slot ``t``."""
    if t != trace.num_slots + 1:
        raise ValueError(f"trace holds {trace.num_slots} slots, cannot evolve to slot {t}")
    prev_f = trace.doppler[-1]
    omega = rng.standard_normal(prev_f.shape) * np.sqrt(drift.doppler_gamma)
    beta = drift.doppler_beta
    f_new = (1 - beta) * prev_f + beta * (trace.doppler_mean + omega)
    if not drift.doppler:
        f_new = np.zeros_like(prev_f)
    phi_new = trace.doppler_phase[-1] + 2 * np.pi * srs_period * f_new
    eps = rng.uniform(-np.pi, np.pi) if drift.phase_noise else 0.0
    tau0 = rng.uniform(0.0, tau0_max) if tau0_max > 0 else 0.0
    return ImperfectionTrace(
        phase_noise=np.append(trace.phase_noise, eps),
        time_offset=np.append(trace.time_offset, tau0),
        doppler_phase=np.vstack([trace.doppler_phase, phi_new]),
        doppler=np.vstack([trace.doppler, f_new]),
        doppler_mean=trace.doppler_mean,
    )


def full_band_cfr(paths: PathSet, trace: ImperfectionTrace, t: int, cfg: SystemConfig) -> np.ndarray:
    """Ground-truth CFR (N x N_r) at slot ``t``."""
    eps = trace.phase_noise[t - 1]
    tau0 = trace.time_offset[t - 1]
    coeffs = paths.gains * np.exp(1j * (trace.doppler_phase[t - 1] + eps))
    return synthesize_cfr(
        coeffs, paths.delays + tau0, paths.azimuths, paths.elevations, cfg, tones=np.arange(cfg.num_subcarriers)
    )


def synthesize_cfr(coeffs, delays, azimuths, elevations, cfg: SystemConfig, tones=None) -> np.ndarray:
    """sum_k c_k a(tau_k) a_R(theta_k, phi_k)^T on the given tones."""
    tones = np.arange(cfg.num_subcarriers) if tones is None else tones
    F = delay_steering(np.asarray(delays, dtype=float), tones, cfg.subcarrier_spacing)
    A = steering_vector_upa(azimuths, elevations, cfg.n_x, cfg.n_y)
    return (F * np.asarray(coeffs)) @ A


def hopping_selection(
    t: int, h_p: int, P: int, N: int, N_c: int = 2, hop_order=None, comb_offset: int = 0
) -> np.ndarray:
    """Subcarrier indices carrying the SRS in slot ``t``."""
    if N % (h_p * N_c) or P != N // (h_p * N_c):
        raise ConfigError("N must equal h_p * N_c * P")
    if not 0 <= comb_offset < N_c:
        raise ConfigError("comb offset out of range")
    b = bwp_index(t, h_p, hop_order)
    return b * (N // h_p) + comb_offset + N_c * np.arange(P)


def bwp_index(t: int, h_p: int, hop_order=None) -> int:
    pos = (t - 1) % h_p
    return int(hop_order[pos]) if hop_order is not None else pos


def _largest_prime_at_most(n: int) -> int:
    for c in range(n, 1, -1):
        if all(c % d for d in range(2, int(c**0.5) + 1)):
            return c
    raise ConfigError("ZC length needs P >= 2")


def zc_pilot(P: int, root: int = 1) -> np.ndarray:
    """Zadoff-Chu sequence of prime length P' <= P, cyclically extended to P."""
    length = _largest_prime_at_most(P)
    if root % length == 0 or np.gcd(root, length) != 1:
        raise ConfigError(f"invalid ZC root {root} for length {length}")
    m = np.arange(length)
    base = np.exp(-1j * np.pi * root * m * (m + 1) / length)
    return base[np.arange(P) % length]


def srs_observe(
    H: np.ndarray,
    selection: np.ndarray,
    pilot: np.ndarray,
    noise_var: float,
    rng: np.random.Generator | None,
    slot: int = 1,
    hop_index: int = 0,
) -> SrsObservation:
    """Y = diag(x) W H + noise with i.i.d. CN(0, noise_var) entries."""
    Y = pilot[:, None] * H[selection, :]
    if noise_var > 0:
        noise = (rng.standard_normal(Y.shape) + 1j * rng.standard_normal(Y.shape)) / np.sqrt(2)
        Y = Y + np.sqrt(noise_var) * noise
    return SrsObservation(Y=Y, slot=slot, hop_index=hop_index, pilot=pilot, selection=np.asarray(selection))


@dataclass(frozen=True)
class Scenario:
    """One Monte-Carlo realisation: truth plus observations over a horizon."""

    config: ScenarioConfig
    paths: PathSet
    trace: ImperfectionTrace
    channels: list[np.ndarray]
    observations: list[SrsObservation]

    @property
    def horizon(self) -> int:
        return len(self.channels)


def simulate(
    cfg: ScenarioConfig,
    horizon: int,
    seed: int | None = None,
    trial: int = 0,
    paths: PathSet | None = None,
) -> Scenario:
    """Generate a scenario over slots 1..horizon.

    Path, imperfection and noise draws use separate substreams keyed by
    ``(seed, trial)``, and noise is drawn at unit variance then scaled so
    different SNRs share the same realisation.
    """
    sc = cfg.system
    seed = sc.rng_seed if seed is None else seed
    if paths is None:
        paths = generate_paths(cfg, substream(seed, trial, _PATHS))
    rng_imp = substream(seed, trial, _IMPERFECTIONS)
    trace = initial_trace(paths)
    tau0_max = cfg.timing_offset_max()
    for t in range(2, horizon + 1):
        trace = evolve_imperfections(trace, t, rng_imp, cfg.drift, sc.srs_period, tau0_max)
    pilot = zc_pilot(sc.tones_per_bwp, sc.zc_root)
    channels, observations = [], []
    for t in range(1, horizon + 1):
        H = full_band_cfr(paths, trace, t, sc)
        sel = hopping_selection(t, sc.hop_count, sc.tones_per_bwp, sc.num_subcarriers, sc.comb, sc.hop_order)
        obs = srs_observe(
            H, sel, pilot, sc.noise_var, substream(seed, trial, _NOISE, t), slot=t,
            hop_index=bwp_index(t, sc.hop_count, sc.hop_order),
        )
        channels.append(H)
        observations.append(obs)
    return Scenario(cfg, paths, trace, channels, observations)


def write_complex_csv(path: str | Path, array: np.ndarray) -> None:
    """Dump a complex array as rows of (re, im) pairs over the last axis.

    The first line is a header ``# shape=d0,d1,...``; each following line
    holds one index of the leading axes with ``re,im`` pairs for the last.
    """
    array = np.asarray(array, dtype=complex)
    flat = array.reshape(-1, array.shape[-1])
    inter = np.empty((flat.shape[0], 2 * flat.shape[1]))
    inter[:, 0::2] = flat.real
    inter[:, 1::2] = flat.imag
    with open(path, "w") as fh:
        fh.write("# shape=" + ",".join(map(str, array.shape)) + "\n")
        np.savetxt(fh, inter, delimiter=",", fmt="%.17g")


def read_complex_csv(path: str | Path) -> np.ndarray:
    with open(path) as fh:
        header = fh.readline().strip()
        if not header.startswith("# shape="):
            raise ValueError("missing shape header")
        shape = tuple(int(s) for s in header[len("# shape="):].split(","))
        data = np.loadtxt(fh, delimiter=",", ndmin=2)
    return (data[:, 0::2] + 1j * data[:, 1::2]).reshape(shape)
