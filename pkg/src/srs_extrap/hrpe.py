"""Multi-band, multi-slot parameter estimation with imperfection refinement.

The estimator runs TST-MUSIC on every estimation slot, associates the paths
across slots, derives initial phase-noise, Doppler-phase and timing-offset
estimates from the per-slot gains and delays, and then alternates between

1. compensating and splicing the observations into one wide-band frame,
2. successive-cancellation MUSIC re-estimation of delays (and angles),
3. closed-form gains and phase noise,
4. Armijo gradient steps on the Doppler slopes and timing offsets.

Doppler phases follow ``phi_k^(t) = (t - 1) * phi_k`` within the window, so
only the per-slot slope ``phi_k`` is estimated.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.optimize import linear_sum_assignment

from .config import SystemConfig
from .scenario import SrsObservation, steering_vector_upa, synthesize_cfr
from .subspace import (
    NoPathsError,
    PathEstimate,
    SearchGrids,
    SubspaceDecomposition,
    ToneModel,
    _complement_projector,
    covariance_spatial,
    covariance_temporal,
    refine_angles,
    sorted_eigh,
    tst_music,
    vec,
    windowed_delay_search,
)

ARMIJO_SIGMA = 0.3
ARMIJO_BETA = 0.5
ARMIJO_MAX_HALVINGS = 30


class ReferencePathError(RuntimeError):
    """The slot-1 gain of the reference path vanished."""


@dataclass
class InitEstimate:
    per_slot: list[PathEstimate | None]
    delays: np.ndarray  # (T_e, K)
    azimuths: np.ndarray
    elevations: np.ndarray
    gains: np.ndarray  # (T_e, K) LS gains
    phase_noise: np.ndarray  # (T_e,)
    doppler_phase: np.ndarray  # (T_e, K)
    time_offset: np.ndarray  # (T_e,)
    flags: list[str] = field(default_factory=list)

    @property
    def order(self) -> int:
        return self.delays.shape[1]


@dataclass
class StageParams:
    """Joint parameter set of the estimation window."""

    delays: np.ndarray
    azimuths: np.ndarray
    elevations: np.ndarray
    gains: np.ndarray
    doppler_slope: np.ndarray  # rad per slot
    phase_noise: np.ndarray  # (T_e,)
    time_offset: np.ndarray  # (T_e,)

    @property
    def order(self) -> int:
        return len(self.delays)

    @property
    def num_slots(self) -> int:
        return len(self.phase_noise)

    def doppler_phase(self) -> np.ndarray:
        """(T_e, K) per-slot Doppler phases."""
        return np.outer(np.arange(self.num_slots), self.doppler_slope)

    def copy(self) -> "StageParams":
        return StageParams(*(np.array(getattr(self, f)) for f in self.__dataclass_fields__))


@dataclass
class RefinedEstimate(StageParams):
    """Output of :func:`r_tst_music` plus its iteration log."""

    log: list[dict] = field(default_factory=list)
    flags: list[str] = field(default_factory=list)
    init: InitEstimate | None = None

    def params(self) -> StageParams:
        return StageParams(
            self.delays, self.azimuths, self.elevations, self.gains,
            self.doppler_slope, self.phase_noise, self.time_offset,
        )


@dataclass(frozen=True)
class CompensatedFrame:
    """Stacked compensated observations with per-path steering builders."""

    Y: np.ndarray  # (T_e * P, N_r)
    tones: np.ndarray
    pilot: np.ndarray
    block_phase: np.ndarray  # (T_e, K) exp(j phi_k^(t))
    block_size: int
    spacing: float

    def path_model(self, k: int) -> ToneModel:
        phases = self.pilot * np.repeat(self.block_phase[:, k], self.block_size)
        return ToneModel(self.tones, self.spacing, phases)


def slot_model(obs: SrsObservation, spacing: float) -> ToneModel:
    return ToneModel(obs.selection, spacing, obs.pilot)


def ls_gains(Y, V: np.ndarray, flags: list[str] | None = None) -> np.ndarray:
    """Least-squares gains (V^H V)^-1 V^H y with a ridge fallback."""
    y = vec(Y) if np.ndim(Y) == 2 else np.asarray(Y)
    gram = V.conj().T @ V
    K = gram.shape[0]
    if np.linalg.cond(gram) > 1e12:
        if flags is not None:
            flags.append("rank-deficient gain system, ridge fallback")
        gram = gram + 1e-8 * np.real(np.trace(gram)) / K * np.eye(K)
    return np.linalg.solve(gram, V.conj().T @ y)


def _slot_dictionary(obs, spacing, delays, azimuths, elevations, n_x, n_y) -> np.ndarray:
    """Columns a_k kron g^(t)(delay_k) for one slot."""
    G = slot_model(obs, spacing).steering(np.atleast_1d(np.asarray(delays, dtype=float)))
    A = np.atleast_2d(steering_vector_upa(np.atleast_1d(azimuths), np.atleast_1d(elevations), n_x, n_y))
    return np.einsum("ka,pk->apk", A, G).reshape(-1, G.shape[1])


def init_imperfections(gains: np.ndarray, delays: np.ndarray):
    """Closed-form initial imperfections from per-slot gains and delays.

    ``gains`` and ``delays`` are (T_e, K) with path 0 as the phase reference.
    Returns ``(phase_noise (T_e,), doppler_phase (T_e, K), time_offset (T_e,))``.
    """
    gains = np.asarray(gains)
    ref = gains[0]
    if np.abs(ref[0]) == 0 or np.any(np.abs(gains[:, 0]) == 0):
        raise ReferencePathError("reference path vanished")
    eps = np.angle(gains[:, 0] / ref[0])
    with np.errstate(divide="ignore", invalid="ignore"):
        phi = np.angle(gains * ref[0] / (ref[None, :] * gains[:, :1]))
    phi = np.nan_to_num(phi)
    diff = np.asarray(delays) - np.asarray(delays)[:1]
    tau0 = np.nanmean(diff, axis=1)
    return eps, phi, np.nan_to_num(tau0)


def _uv(az, el):
    return np.stack([np.sin(az) * np.cos(el), np.cos(az)], axis=-1)


def initialize(
    observations: list[SrsObservation], system: SystemConfig, grids: SearchGrids, flags: list[str]
) -> InitEstimate:
    """Per-slot TST-MUSIC, cross-slot association, LS gains and imperfections."""
    f_s = system.subcarrier_spacing
    n_x, n_y = system.n_x, system.n_y
    per_slot: list[PathEstimate | None] = []
    for obs in observations:
        try:
            per_slot.append(tst_music(obs.Y, slot_model(obs, f_s), grids, n_x, n_y))
        except NoPathsError:
            per_slot.append(None)
            flags.append(f"slot {obs.slot}: no detectable paths")
    orders = [e.order for e in per_slot if e is not None]
    if not orders:
        raise NoPathsError("no detectable paths")
    K = int(np.argmax(np.bincount(orders)))
    ref_slot = next(i for i, e in enumerate(per_slot) if e is not None and e.order >= K)
    ref = per_slot[ref_slot]
    ref_uv = _uv(ref.azimuths[:K], ref.elevations[:K])
    T = len(observations)
    delays = np.full((T, K), np.nan)
    az = np.tile(ref.azimuths[:K], (T, 1))
    el = np.tile(ref.elevations[:K], (T, 1))
    bwp_res = 1.0 / (np.ptp(observations[0].selection) * f_s)
    for t, est in enumerate(per_slot):
        if est is None:
            continue
        ang = np.linalg.norm(ref_uv[:, None, :] - _uv(est.azimuths, est.elevations)[None], axis=-1) / (2.0 / n_x)
        dly = np.abs(ref.delays[:K, None] - est.delays[None, :]) / bwp_res
        rows, cols = linear_sum_assignment(ang + dly)
        for r, c in zip(rows, cols):
            # gate: within one beamwidth and a quarter of the per-BWP resolution
            if ang[r, c] < 1.0 and dly[r, c] < 0.25:
                delays[t, r] = est.delays[c]
                az[t, r], el[t, r] = est.azimuths[c], est.elevations[c]
    if np.all(np.isnan(delays[0])):
        delays[0] = ref.delays[:K]
        flags.append("slot 1 association failed, reference delays used")
    diff = delays - delays[:1]
    counts = np.sum(~np.isnan(diff), axis=1)
    # slots with no path associated to a slot-1 path get zero offset
    tau0 = np.where(counts > 0, np.nansum(diff, axis=1) / np.maximum(counts, 1), 0.0)
    for t in range(T):
        for k in range(K):
            if np.isnan(delays[t, k]):
                base = delays[0, k] if not np.isnan(delays[0, k]) else ref.delays[k]
                delays[t, k] = base + tau0[t]
    # gains are fitted at the common slot-1 geometry shifted by each slot's
    # timing offset, so their phase ratios are consistent with one delay set
    gains = np.zeros((T, K), dtype=complex)
    for t, obs in enumerate(observations):
        V = _slot_dictionary(obs, f_s, delays[0] + tau0[t], az[0], el[0], n_x, n_y)
        gains[t] = ls_gains(obs.Y, V, flags)
    eps, phi, tau0 = init_imperfections(gains, delays)
    return InitEstimate(per_slot, delays, az, el, gains, eps, phi, tau0, flags)


def compensate_and_splice(
    observations: list[SrsObservation],
    phase_noise,
    time_offset,
    doppler_phase,
    spacing: float,
) -> CompensatedFrame:
    """Remove phase noise and timing offset per slot and stack the blocks.

    ``doppler_phase`` (T_e, K) is not removed from the data (it is path
    specific) but carried into the per-path steering builders.
    """
    blocks, tones, pilots = [], [], []
    for t, obs in enumerate(observations):
        shift = np.exp(2j * np.pi * spacing * obs.selection * time_offset[t])  # conj of W a(tau0)
        blocks.append(np.exp(-1j * phase_noise[t]) * shift[:, None] * obs.Y)
        tones.append(obs.selection)
        pilots.append(obs.pilot)
    return CompensatedFrame(
        np.vstack(blocks), np.concatenate(tones), np.concatenate(pilots),
        np.exp(1j * np.asarray(doppler_phase)), len(observations[0].selection), spacing,
    )


def _slot_columns(obs, spacing, params: StageParams, t: int, n_x, n_y, with_eps=True) -> np.ndarray:
    """Model columns for slot index ``t`` (zero-based), including phase factors."""
    V = _slot_dictionary(
        obs, spacing, params.delays + params.time_offset[t], params.azimuths, params.elevations, n_x, n_y
    )
    phase = t * params.doppler_slope + (params.phase_noise[t] if with_eps else 0.0)
    return V * np.exp(1j * phase)


def objective(observations, params: StageParams, system: SystemConfig) -> float:
    """Sum over slots of ||Y^(t) - model^(t)||_F^2."""
    total = 0.0
    for t, obs in enumerate(observations):
        V = _slot_columns(obs, system.subcarrier_spacing, params, t, system.n_x, system.n_y)
        total += float(np.sum(np.abs(vec(obs.Y) - V @ params.gains) ** 2))
    return total


def ml_gains_epsilon(
    observations, params: StageParams, system: SystemConfig, pin_first: bool = True,
    flags: list[str] | None = None,
):
    """Closed-form gains over all slots, then per-slot phase noise.

    Returns ``(gains, phase_noise)``; slot 1 phase noise stays 0 when
    ``pin_first`` is set (it is absorbed by the gains).
    """
    f_s, n_x, n_y = system.subcarrier_spacing, system.n_x, system.n_y
    Psi = np.vstack([_slot_columns(o, f_s, params, t, n_x, n_y) for t, o in enumerate(observations)])
    y = np.concatenate([vec(o.Y) for o in observations])
    gains = ls_gains(y, Psi, flags)
    eps = np.array(params.phase_noise, dtype=float)
    for t, obs in enumerate(observations):
        if pin_first and t == 0:
            eps[t] = 0.0
            continue
        psi_eps = _slot_columns(obs, f_s, params, t, n_x, n_y, with_eps=False) @ gains
        eps[t] = np.angle(np.vdot(psi_eps, vec(obs.Y)))
    return gains, eps


def objective_gradient(observations, params: StageParams, system: SystemConfig):
    """Gradient of :func:`objective` w.r.t. Doppler slopes and timing offsets (seconds)."""
    f_s, n_x, n_y = system.subcarrier_spacing, system.n_x, system.n_y
    g_phi = np.zeros(params.order)
    g_tau = np.zeros(params.num_slots)
    for t, obs in enumerate(observations):
        V = _slot_columns(obs, f_s, params, t, n_x, n_y)
        cols = V * params.gains
        r = vec(obs.Y) - cols.sum(axis=1)
        # d model / d phi_k = j t cols_k
        g_phi += -2 * np.real(1j * t * (r.conj() @ cols))
        w = np.tile(-2j * np.pi * f_s * obs.selection.astype(float), n_x * n_y)
        g_tau[t] = -2 * np.real(r.conj() @ (w * cols.sum(axis=1)))
    return g_phi, g_tau


def _armijo(f0, x0, grad, scale, evaluate, flags, name):
    norm = np.linalg.norm(grad)
    if norm <= 1e-12 * max(1.0, abs(f0)):
        return x0, f0
    step = scale / norm
    for _ in range(ARMIJO_MAX_HALVINGS + 1):
        x = x0 - step * grad
        f = evaluate(x)
        if f <= f0 - ARMIJO_SIGMA * step * norm**2:
            return x, f
        step *= ARMIJO_BETA
    flags.append(f"armijo stall on {name}")
    return x0, f0


def grad_phi_tau0(observations, params: StageParams, system: SystemConfig, flags: list[str] | None = None):
    """One Armijo gradient step on the Doppler slopes, then on the timing offsets.

    Timing offsets are handled in units of 1/(N f_s); slot 1 stays pinned.
    """
    flags = [] if flags is None else flags
    unit = 1.0 / (system.num_subcarriers * system.subcarrier_spacing)
    p = params.copy()
    f0 = objective(observations, p, system)

    g_phi, _ = objective_gradient(observations, p, system)

    def eval_phi(x):
        return objective(observations, replace(p, doppler_slope=x), system)

    p.doppler_slope, f0 = _armijo(f0, p.doppler_slope, g_phi, 1.0, eval_phi, flags, "doppler")

    _, g_tau = objective_gradient(observations, p, system)
    g_u = g_tau * unit
    g_u[0] = 0.0

    def eval_tau(u):
        return objective(observations, replace(p, time_offset=u * unit), system)

    u, f0 = _armijo(f0, p.time_offset / unit, g_u, 1.0, eval_tau, flags, "timing offset")
    p.time_offset = u * unit
    return p, f0


def per_path_pseudospectrum(frame: CompensatedFrame, k: int, K: int, grid, projector=None) -> np.ndarray:
    """Normalised per-path delay pseudospectrum of the spliced frame.

    With ``projector`` the data and the steering vectors are projected first
    (the cancellation variant); without it this is the plain per-path
    spectrum.
    """
    Y = frame.Y if projector is None else projector @ frame.Y
    lam, V = sorted_eigh(covariance_temporal(Y))
    noise = V[:, K:]
    G = frame.path_model(k).steering(np.asarray(grid))
    if projector is not None:
        G = projector @ G
    d = np.sum(np.abs(noise.conj().T @ G) ** 2, axis=0)
    norms = np.sum(np.abs(G) ** 2, axis=0)
    return norms / np.maximum(d, 1e-12 * norms)


@dataclass(frozen=True)
class _Projected:
    model: ToneModel
    proj: np.ndarray

    def __call__(self, delays):
        return self.proj @ self.model.steering(delays)

    steering = __call__


def sic_delay_estimation(
    frame: CompensatedFrame,
    K: int,
    centers,
    grids: SearchGrids,
    window_steps: int = 5,
    flags: list[str] | None = None,
) -> np.ndarray:
    """Successive-cancellation delay estimation on a spliced frame.

    Paths must be ordered by descending gain power. Each path is searched in
    a window of ``window_steps`` grid steps around ``centers[k]`` using the
    steering vector projected onto the complement of the already estimated
    paths, so the search is unbiased by their leakage.
    """
    flags = [] if flags is None else flags
    rows = frame.Y.shape[0]
    proj = np.eye(rows)
    found: list[np.ndarray] = []
    delays = np.zeros(K)
    step = grids.delay_step
    for k in range(K):
        Yk = proj @ frame.Y
        lam, V = sorted_eigh(covariance_temporal(Yk))
        noise = V[:, K - k:]
        steer = _Projected(frame.path_model(k), proj)
        half = window_steps * step
        tau, edge = windowed_delay_search(noise, steer, grids.delays, centers[k] - half, centers[k] + half)
        if edge:
            half *= 4
            tau, edge = windowed_delay_search(noise, steer, grids.delays, centers[k] - half, centers[k] + half)
            if edge:
                flags.append(f"path {k}: delay peak at widened window boundary")
        delays[k] = tau
        found.append(frame.path_model(k).steering(tau))
        proj = _complement_projector(found)
    return delays


def windowed_angle_search(noise, grids: SearchGrids, center, half_steps: int, n_x: int, n_y: int):
    """S-MUSIC minimum over a square window of angle grid points, then polished."""
    step = grids.azimuth_step
    th = center[0] + step * np.arange(-half_steps, half_steps + 1)
    ph = center[1] + grids.elevation_step * np.arange(-half_steps, half_steps + 1)
    th = th[(th >= 0) & (th <= np.pi)]
    ph = ph[(ph >= 0) & (ph <= np.pi)]
    T, Pp = np.meshgrid(th, ph, indexing="ij")
    A = steering_vector_upa(T, Pp, n_x, n_y).reshape(-1, n_x * n_y).T
    d = np.sum(np.abs(noise.conj().T @ A) ** 2, axis=0)
    i, j = np.unravel_index(int(np.argmin(d)), T.shape)
    edge = i in (0, len(th) - 1) or j in (0, len(ph) - 1)
    return refine_angles(noise, T[i, j], Pp[i, j], step, n_x, n_y), edge


def _music_angles(frame: CompensatedFrame, delays, params: StageParams, grids, n_x, n_y, window_steps, flags):
    K = len(delays)
    G = [frame.path_model(k).steering(delays[k]) for k in range(K)]
    out = []
    for k in range(K):
        others = [g for n, g in enumerate(G) if n != k]
        Yk = _complement_projector(others) @ frame.Y if others else frame.Y
        lam, V = sorted_eigh(covariance_spatial(Yk))
        noise = V[:, 1:]
        center = (params.azimuths[k], params.elevations[k])
        ang, edge = windowed_angle_search(noise, grids, center, window_steps, n_x, n_y)
        if edge:
            ang, edge = windowed_angle_search(noise, grids, center, 4 * window_steps, n_x, n_y)
            if edge:
                flags.append(f"path {k}: angle peak at widened window boundary")
        out.append(ang)
    return np.array(out).reshape(-1, 2)


def _sort_params(p: StageParams) -> StageParams:
    idx = np.lexsort((p.delays, -np.abs(p.gains) ** 2))
    return StageParams(
        p.delays[idx], p.azimuths[idx], p.elevations[idx], p.gains[idx],
        p.doppler_slope[idx], p.phase_noise, p.time_offset,
    )


def _refit(observations, p: StageParams, system) -> tuple[StageParams, float]:
    gains, _ = ml_gains_epsilon(observations, p, system)
    q = replace(p, gains=gains)
    return q, objective(observations, q, system)


def params_from_init(init: InitEstimate) -> StageParams:
    """Slot-1 geometry with a least-squares Doppler slope fit."""
    T = init.delays.shape[0]
    if T > 1:
        tt = np.arange(T)
        unwrapped = np.unwrap(init.doppler_phase, axis=0)
        slope = tt @ unwrapped / float(tt @ tt)
    else:
        slope = np.zeros(init.order)
    return StageParams(
        init.delays[0].copy(), init.azimuths[0].copy(), init.elevations[0].copy(), init.gains[0].copy(),
        slope, init.phase_noise.copy(), init.time_offset.copy(),
    )


def r_tst_music(
    observations: list[SrsObservation],
    system: SystemConfig,
    grids: SearchGrids | None = None,
    iterations: int = 10,
    window_steps: int = 5,
    update_angles: bool = True,
    initial: StageParams | None = None,
) -> RefinedEstimate:
    """Refined multi-slot estimation over the estimation window.

    Parameters
    ----------
    observations : list of SrsObservation
        The ``T_e`` estimation-slot observations, slot 1 first.
    system : SystemConfig
        Array size and subcarrier spacing.
    grids : SearchGrids, optional
        Defaults to ``SearchGrids.default(system.max_delay)``.
    iterations : int
        Number of alternating-optimisation passes.
    initial : StageParams, optional
        Skip the TST-MUSIC initialisation and start from these values.

    Returns
    -------
    RefinedEstimate
        Final parameters; ``log`` holds one entry per iteration (0 = init).
    """
    grids = SearchGrids.default(system.max_delay) if grids is None else grids
    flags: list[str] = []
    f_s, n_x, n_y = system.subcarrier_spacing, system.n_x, system.n_y
    init = None
    if initial is None:
        init = initialize(observations, system, grids, flags)
        p = params_from_init(init)
    else:
        p = initial.copy()
    p = _sort_params(p)
    f = objective(observations, p, system)
    log = [_log_entry(0, f, p)]
    for it in range(1, iterations + 1):
        # splice with the current imperfection estimates, then MUSIC re-estimation
        frame = compensate_and_splice(observations, p.phase_noise, p.time_offset, p.doppler_phase(), f_s)
        delays = sic_delay_estimation(frame, p.order, p.delays, grids, window_steps, flags)
        angles = None
        if update_angles:
            angles = _music_angles(frame, delays, p, grids, n_x, n_y, window_steps, flags)
        base, f_base = _refit(observations, p, system)
        for k in range(p.order):
            cand = base.copy()
            cand.delays[k] = delays[k]
            if angles is not None:
                cand.azimuths[k], cand.elevations[k] = angles[k]
            cand, f_cand = _refit(observations, cand, system)
            if f_cand < f_base:
                base, f_base = cand, f_cand
        p = base
        # closed-form gains and phase noise
        gains, eps = ml_gains_epsilon(observations, p, system, flags=flags)
        p = replace(p, gains=gains, phase_noise=eps)
        # gradient steps on Doppler slopes and timing offsets
        p, f = grad_phi_tau0(observations, p, system, flags)
        p = _sort_params(p)
        log.append(_log_entry(it, f, p))
    return RefinedEstimate(
        p.delays, p.azimuths, p.elevations, p.gains, p.doppler_slope, p.phase_noise, p.time_offset,
        log=log, flags=flags, init=init,
    )


def _log_entry(it: int, f: float, p: StageParams) -> dict:
    return {"iteration": it, "objective": f, "params": p.copy()}


def reconstruct(params: StageParams, t: int, system: SystemConfig) -> np.ndarray:
    """Full-band CFR at estimation slot ``t`` (1-based)."""
    i = t - 1
    coeffs = params.gains * np.exp(1j * (i * params.doppler_slope + params.phase_noise[i]))
    return synthesize_cfr(coeffs, params.delays + params.time_offset[i], params.azimuths, params.elevations, system)


def write_iteration_log(path: str | Path, estimate: RefinedEstimate) -> None:
    """CSV with one row per AO iteration: objective and parameter estimates."""
    K = estimate.order
    T = estimate.num_slots
    header = ["iteration", "objective"]
    header += [f"delay_{k}" for k in range(K)] + [f"azimuth_{k}" for k in range(K)]
    header += [f"elevation_{k}" for k in range(K)] + [f"doppler_slope_{k}" for k in range(K)]
    header += [f"phase_noise_{t + 1}" for t in range(T)] + [f"time_offset_{t + 1}" for t in range(T)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for entry in estimate.log:
            p = entry["params"]
            row = [entry["iteration"], repr(entry["objective"])]
            for arr in (p.delays, p.azimuths, p.elevations, p.doppler_slope, p.phase_noise, p.time_offset):
                row += [repr(float(v)) for v in arr]
            w.writerow(row)
