"""Covariances, MUSIC pseudospectra and the five-step TST-MUSIC estimator.

Delay steering vectors are built by :class:`ToneModel`, which knows the
subcarrier index of every observation row plus an optional per-row complex
factor (pilot symbols or per-block Doppler phases). All pseudospectrum
denominators are evaluated through the noise basis, ``||V_n^H g||^2``, which
equals ``g^H (I - V_s V_s^H) g`` without the cancellation error.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage, optimize

from .scenario import delay_steering, steering_vector_upa

DENOMINATOR_FLOOR = 1e-12


class NoPathsError(RuntimeError):
    """MDL found no signal component in the observation."""


@dataclass(frozen=True)
class ToneModel:
    """Delay steering g(tau)[i] = phases[i] * exp(-j 2 pi tones[i] f_s tau)."""

    tones: np.ndarray
    spacing: float
    phases: np.ndarray | None = None

    def steering(self, delays) -> np.ndarray:
        G = delay_steering(delays, self.tones, self.spacing)
        if self.phases is not None:
            G = G * (self.phases if G.ndim == 1 else self.phases[:, None])
        return G

    def derivative(self, delays) -> np.ndarray:
        """d g / d tau, same shape as :meth:`steering`."""
        G = self.steering(delays)
        w = -2j * np.pi * self.spacing * np.asarray(self.tones, dtype=float)
        return G * (w if G.ndim == 1 else w[:, None])

    @property
    def size(self) -> int:
        return len(self.tones)


@dataclass(frozen=True)
class SearchGrids:
    """Delay grid (seconds) and angle grids (radians) for the MUSIC sweeps."""

    delays: np.ndarray
    azimuths: np.ndarray
    elevations: np.ndarray

    @classmethod
    def default(cls, max_delay: float, angle_step_deg: float = 1.0, delay_divisions: int = 512) -> "SearchGrids":
        step = max_delay / delay_divisions
        n_neg = delay_divisions // 4
        delays = step * np.arange(-n_neg, delay_divisions + 1)
        angles = np.deg2rad(np.arange(0.0, 180.0 + angle_step_deg / 2, angle_step_deg))
        return cls(delays, angles, angles.copy())

    @property
    def delay_step(self) -> float:
        return float(self.delays[1] - self.delays[0])

    @property
    def azimuth_step(self) -> float:
        return float(self.azimuths[1] - self.azimuths[0])

    @property
    def elevation_step(self) -> float:
        return float(self.elevations[1] - self.elevations[0])


@dataclass(frozen=True)
class SubspaceDecomposition:
    signal: np.ndarray
    noise: np.ndarray
    eigenvalues: np.ndarray


@dataclass(frozen=True)
class Pseudospectrum:
    values: np.ndarray
    flagged: np.ndarray

    @property
    def any_flagged(self) -> bool:
        return bool(np.any(self.flagged))


@dataclass(frozen=True)
class PeakResult:
    positions: np.ndarray  # (n, ndim) fractional grid indices
    heights: np.ndarray
    shortfall: bool


@dataclass(frozen=True)
class GroupEstimate:
    delays: np.ndarray
    angles: list[np.ndarray]  # per group: (r_k, 2) array of (azimuth, elevation)

    @property
    def counts(self) -> list[int]:
        return [len(a) for a in self.angles]


@dataclass
class PathEstimate:
    """Paired per-path estimates, sorted by descending gain power."""

    delays: np.ndarray
    azimuths: np.ndarray
    elevations: np.ndarray
    gains: np.ndarray
    groups: GroupEstimate | None = None
    flags: list[str] = field(default_factory=list)

    @property
    def order(self) -> int:
        return len(self.delays)

    def sorted(self) -> "PathEstimate":
        idx = np.lexsort((self.delays, -np.abs(self.gains) ** 2))
        return PathEstimate(
            self.delays[idx], self.azimuths[idx], self.elevations[idx], self.gains[idx], self.groups, self.flags
        )


def covariance_temporal(Y: np.ndarray, forward_backward: bool = False) -> np.ndarray:
    """R^d = Y Y^H / N_r, optionally forward-backward averaged."""
    R = Y @ Y.conj().T / Y.shape[1]
    if forward_backward:
        R = 0.5 * (R + np.flip(R.conj(), axis=(0, 1)))
    return R


def covariance_spatial(Y: np.ndarray, forward_backward: bool = False) -> np.ndarray:
    """R^s = Y^T Y^* / P, optionally forward-backward averaged.

    The UPA response is centro-symmetric (reversing the antenna order
    conjugates it up to a common phase), so the averaging is valid there.
    """
    R = Y.T @ Y.conj() / Y.shape[0]
    if forward_backward:
        R = 0.5 * (R + np.flip(R.conj(), axis=(0, 1)))
    return R


def _hermitian(R: np.ndarray) -> np.ndarray:
    R = np.asarray(R)
    asym = np.linalg.norm(R - R.conj().T)
    if asym > 1e-8 * max(np.linalg.norm(R), 1e-300):
        warnings.warn("non-Hermitian covariance symmetrised", RuntimeWarning, stacklevel=3)
    return 0.5 * (R + R.conj().T)


def sorted_eigh(R: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Eigenpairs of a Hermitian matrix in descending eigenvalue order."""
    w, V = np.linalg.eigh(_hermitian(R))
    return w[::-1], V[:, ::-1]


def eig_subspace(R: np.ndarray, K: int) -> SubspaceDecomposition:
    dim = R.shape[0]
    if not 0 <= K < dim:
        raise ValueError(f"signal dimension {K} must be below the matrix size {dim}")
    w, V = sorted_eigh(R)
    return SubspaceDecomposition(V[:, :K], V[:, K:], w)


def mdl_order(eigenvalues, snapshots: int) -> int:
    """Wax-Kailath MDL order estimate.

    Only the first ``min(p, snapshots)`` eigenvalues are used because a
    sample covariance from fewer snapshots than dimensions is rank deficient.
    """
    lam = np.sort(np.asarray(eigenvalues, dtype=float))[::-1]
    p = min(len(lam), max(int(snapshots), 1))
    lam = lam[:p]
    top = lam[0] if len(lam) else 0.0
    if top <= 0:
        return 0
    lam = np.maximum(lam, top * 1e-15)
    n = snapshots
    scores = np.empty(p)
    for k in range(p):
        tail = lam[k:]
        ratio = np.exp(np.mean(np.log(tail))) / np.mean(tail)
        scores[k] = -n * (p - k) * np.log(min(ratio, 1.0)) + 0.5 * k * (2 * p - k) * np.log(n)
    return int(np.argmin(scores))


def _denominators(noise: np.ndarray, G: np.ndarray):
    d = np.sum(np.abs(noise.conj().T @ G) ** 2, axis=0)
    norms = np.sum(np.abs(G) ** 2, axis=0)
    floor = DENOMINATOR_FLOOR * norms
    flagged = d < floor
    return np.maximum(d, floor), flagged


def t_music_spectrum(decomp: SubspaceDecomposition, steering, grid) -> Pseudospectrum:
    """Delay pseudospectrum 1 / ||V_n^H g(tau)||^2 over ``grid``.

    ``steering`` maps an array of delays to a matrix with one column each.
    """
    d, flagged = _denominators(decomp.noise, steering(np.asarray(grid)))
    return Pseudospectrum(1.0 / d, flagged)


_UPA_CACHE: dict = {}


def _upa_grid(azimuths, elevations, n_x, n_y) -> np.ndarray:
    key = (azimuths.tobytes(), elevations.tobytes(), n_x, n_y)
    A = _UPA_CACHE.get(key)
    if A is None:
        th, ph = np.meshgrid(azimuths, elevations, indexing="ij")
        A = steering_vector_upa(th, ph, n_x, n_y).reshape(-1, n_x * n_y).T.copy()
        if len(_UPA_CACHE) > 8:
            _UPA_CACHE.clear()
        _UPA_CACHE[key] = A
    return A


def s_music_spectrum(decomp: SubspaceDecomposition, azimuths, elevations, n_x: int, n_y: int) -> Pseudospectrum:
    """Angle pseudospectrum on the (azimuth, elevation) grid, shape (G_az, G_el)."""
    azimuths = np.asarray(azimuths, dtype=float)
    elevations = np.asarray(elevations, dtype=float)
    A = _upa_grid(azimuths, elevations, n_x, n_y)
    d, flagged = _denominators(decomp.noise, A)
    shape = (len(azimuths), len(elevations))
    return Pseudospectrum((1.0 / d).reshape(shape), flagged.reshape(shape))


def peak_pick(spectrum, count: int, radius: int = 1) -> PeakResult:
    """The ``count`` highest local maxima with 3-point parabolic refinement.

    A point is a local maximum when it is the largest value inside its
    ``radius`` neighbourhood and not part of a flat region. Candidates closer
    than ``radius`` to an already accepted peak are suppressed.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    s = np.asarray(spectrum, dtype=float)
    size = 2 * radius + 1
    local_max = ndimage.maximum_filter(s, size=size, mode="nearest") == s
    not_flat = ndimage.minimum_filter(s, size=3, mode="nearest") < s
    cand = np.argwhere(local_max & not_flat)
    cand = cand[np.argsort(-s[tuple(cand.T)], kind="stable")]
    chosen: list[np.ndarray] = []
    for c in cand:
        if all(np.max(np.abs(c - p)) > radius for p in chosen):
            chosen.append(c)
        if len(chosen) == count:
            break
    positions = np.zeros((len(chosen), s.ndim))
    heights = np.zeros(len(chosen))
    for i, c in enumerate(chosen):
        heights[i] = s[tuple(c)]
        pos = c.astype(float)
        for ax in range(s.ndim):
            if 0 < c[ax] < s.shape[ax] - 1:
                lo, hi = c.copy(), c.copy()
                lo[ax] -= 1
                hi[ax] += 1
                ym, y0, yp = s[tuple(lo)], s[tuple(c)], s[tuple(hi)]
                den = ym - 2 * y0 + yp
                if den < 0:
                    pos[ax] += float(np.clip(0.5 * (ym - yp) / den, -0.5, 0.5))
        positions[i] = pos
    return PeakResult(positions, heights, len(chosen) < count)


def interp_grid(grid: np.ndarray, position: float) -> float:
    return float(np.interp(position, np.arange(len(grid)), grid))


@dataclass(frozen=True)
class _ProjectedSteering:
    model: ToneModel
    proj: np.ndarray

    def __call__(self, delays):
        return self.proj @ self.model.steering(delays)

    steering = __call__


def refine_delay(noise: np.ndarray, model, center: float, half_width: float) -> float:
    """Minimise the normalised delay denominator on [center +- half_width]."""

    def cost(tau):
        g = model.steering(tau)
        return np.sum(np.abs(noise.conj().T @ g) ** 2) / np.real(np.vdot(g, g))

    res = optimize.minimize_scalar(
        cost, bounds=(center - half_width, center + half_width), method="bounded",
        options={"xatol": half_width * 1e-9},
    )
    return float(res.x) if res.fun <= cost(center) else float(center)


def refine_angles(noise: np.ndarray, theta: float, phi: float, step: float, n_x: int, n_y: int):
    """Local Nelder-Mead polish of an S-MUSIC peak, kept within one grid step."""

    def cost(x):
        a = steering_vector_upa(x[0], x[1], n_x, n_y)
        return np.sum(np.abs(noise.conj().T @ a) ** 2)

    x0 = np.array([theta, phi])
    res = optimize.minimize(
        cost, x0, method="Nelder-Mead",
        options={"xatol": 1e-11, "fatol": 1e-30, "initial_simplex": x0 + 0.5 * step * np.array([[0, 0], [1, 0], [0, 1]]),
                 "maxiter": 400},
    )
    if res.fun <= cost(x0) and np.max(np.abs(res.x - x0)) <= 2 * step:
        return float(res.x[0]), float(res.x[1])
    return float(theta), float(phi)


def _complement_projector(vectors) -> np.ndarray:
    """Orthogonal projector onto the complement of span(vectors)."""
    B = np.column_stack(vectors)
    Q, _ = np.linalg.qr(B)
    return np.eye(B.shape[0]) - Q @ Q.conj().T


def windowed_delay_search(noise: np.ndarray, steering, grid: np.ndarray, lo: float, hi: float):
    """Minimise the norm-normalised delay denominator over grid points in [lo, hi].

    Returns ``(delay, at_boundary)`` where the delay is polished inside one
    grid step and ``at_boundary`` reports a minimum on the window edge.
    """
    step = float(grid[1] - grid[0])
    pts = grid[(grid >= lo - 1e-15) & (grid <= hi + 1e-15)]
    if len(pts) < 3:
        pts = np.linspace(lo, hi, 3)
    G = steering(pts)
    d = np.sum(np.abs(noise.conj().T @ G) ** 2, axis=0) / np.maximum(np.sum(np.abs(G) ** 2, axis=0), 1e-300)
    i = int(np.argmin(d))
    at_boundary = i == 0 or i == len(pts) - 1
    return refine_delay(noise, steering, float(pts[i]), step), at_boundary


def temporal_filter(
    Y: np.ndarray, steering_vectors, keep: int, norm: float | None = None, exact: bool = False
) -> np.ndarray:
    """Apply prod_{n != keep} (I - g_n g_n^H / P) to Y from the left.

    ``steering_vectors`` is a list of columns g(t_n); ``norm`` defaults to
    the row count P. The product of rank-one projectors only annihilates
    every other group when their steering vectors are orthogonal; with
    ``exact=True`` the orthogonal projector onto the complement of all other
    steering vectors is applied instead, which nulls them for any geometry.
    """
    others = [g for n, g in enumerate(steering_vectors) if n != keep]
    if not others:
        return np.array(Y, dtype=complex)
    if exact:
        return _complement_projector(others) @ Y
    P = Y.shape[0]
    norm = P if norm is None else norm
    out = np.array(Y, dtype=complex)
    for g in reversed(others):
        out = out - np.outer(g, g.conj() @ out) / norm
    return out


def spatial_beamform(Y: np.ndarray, angles, keep: int, n_x: int, n_y: int, exact: bool = False) -> np.ndarray:
    """Right-multiply by prod_{n != keep} (I - a_n^* a_n^T).

    Rows of a single-path observation are proportional to a^T, so this form
    nulls path ``n``; the conjugate pairing is the one that annihilates them.
    ``exact`` has the same meaning as in :func:`temporal_filter`.
    """
    others = [steering_vector_upa(th, ph, n_x, n_y) for n, (th, ph) in enumerate(angles) if n != keep]
    if not others:
        return np.array(Y, dtype=complex)
    if exact:
        return Y @ _complement_projector(others).conj()
    out = np.array(Y, dtype=complex)
    for a in reversed(others):
        out = out - np.outer(out @ a.conj(), a)
    return out


def path_dictionary(model: ToneModel, delays, azimuths, elevations, n_x: int, n_y: int) -> np.ndarray:
    """Columns a_R(theta_k, phi_k) kron g(tau_k), matching vec(Y) in column-major order."""
    G = model.steering(np.atleast_1d(np.asarray(delays, dtype=float)))
    A = np.atleast_2d(steering_vector_upa(np.atleast_1d(azimuths), np.atleast_1d(elevations), n_x, n_y))
    return np.einsum("ka,pk->apk", A, G).reshape(A.shape[1] * G.shape[0], -1)


def vec(Y: np.ndarray) -> np.ndarray:
    return np.asarray(Y).reshape(-1, order="F")


def least_squares_gains(Y: np.ndarray, V: np.ndarray) -> np.ndarray:
    return np.linalg.lstsq(V, vec(Y), rcond=None)[0]


def _peak_delay(spec: Pseudospectrum, grid: np.ndarray, count: int):
    res = peak_pick(spec.values, count, radius=3)
    return [interp_grid(grid, p[0]) for p in res.positions], res.heights


def prune_paths(Y, model, delays, azimuths, elevations, n_x, n_y, ratio: float) -> np.ndarray:
    """Indices of paths kept after removing insignificant ones.

    Cross-group leakage can make TST-MUSIC report the same physical path
    twice; the duplicate gets a tiny LS gain. The weakest path is dropped
    while its fitted energy is below ``ratio`` times the noise variance
    estimated from the LS residual, and the fit is redone.
    """
    idx = np.arange(len(delays))
    n_obs = Y.size
    while len(idx) > 1:
        V = path_dictionary(model, delays[idx], azimuths[idx], elevations[idx], n_x, n_y)
        gains = least_squares_gains(Y, V)
        resid = np.sum(np.abs(vec(Y) - V @ gains) ** 2)
        noise_var = resid / max(n_obs - len(idx), 1)
        energy = np.abs(gains) ** 2 * np.sum(np.abs(V) ** 2, axis=0)
        weakest = int(np.argmin(energy))
        if energy[weakest] >= ratio * noise_var:
            break
        idx = np.delete(idx, weakest)
    return idx


def tst_music(
    Y: np.ndarray,
    model: ToneModel,
    grids: SearchGrids,
    n_x: int,
    n_y: int,
    *,
    threshold: float = 0.1,
    forward_backward: bool = False,
    max_paths: int | None = None,
    prune_ratio: float = 10.0,
) -> PathEstimate:
    """Joint delay/angle estimation by temporal-spatial-temporal MUSIC.

    Returns paired (delay, azimuth, elevation) estimates with LS gains.
    Raises :class:`NoPathsError` when MDL detects no path.
    """
    Y = np.asarray(Y, dtype=complex)
    P, Nr = Y.shape
    flags: list[str] = []
    if forward_backward and model.phases is not None:
        # centro-symmetric steering needs the row factors removed first
        Y = model.phases.conj()[:, None] * Y
        model = ToneModel(model.tones, model.spacing, None)
    Rd = covariance_temporal(Y, forward_backward)
    lam_d, V_d = sorted_eigh(Rd)
    K_d = mdl_order(lam_d, Nr if not forward_backward else 2 * Nr)
    lam_s = sorted_eigh(covariance_spatial(Y, forward_backward))[0]
    K_s = mdl_order(lam_s, P if not forward_backward else 2 * P)
    if K_d == 0 or K_s == 0:
        raise NoPathsError("no detectable paths")
    K_d = min(K_d, P - 1)
    K_s = min(K_s, Nr - 1)
    if max_paths is not None:
        K_d, K_s = min(K_d, max_paths), min(K_s, max_paths)

    # Step 1: group delays
    dec = SubspaceDecomposition(V_d[:, :K_d], V_d[:, K_d:], lam_d)
    spec = t_music_spectrum(dec, model.steering, grids.delays)
    if spec.any_flagged:
        flags.append("delay spectrum floor hit")
    cand, heights = _peak_delay(spec, grids.delays, K_d)
    keep = heights >= threshold * heights.max()
    group_delays = [refine_delay(dec.noise, model, d, grids.delay_step) for d, k in zip(cand, keep) if k]
    q = len(group_delays)
    resolution = 1.0 / (np.ptp(model.tones) * model.spacing) if model.size > 1 else grids.delay_step
    G_groups = [model.steering(d) for d in group_delays]

    delays, azs, els, group_angles = [], [], [], []
    for k in range(q):
        # Step 2: temporal filtering toward group k
        others = [g for n, g in enumerate(G_groups) if n != k]
        proj = _complement_projector(others) if others else np.eye(P)
        Yk = proj @ Y
        # Step 3: S-MUSIC inside the group
        lam_k, V_k = sorted_eigh(covariance_spatial(Yk, forward_backward))
        r_k = int(np.clip(mdl_order(lam_k, P if not forward_backward else 2 * P), 1, K_s)) if q > 1 else K_s
        dec_s = SubspaceDecomposition(V_k[:, :r_k], V_k[:, r_k:], lam_k)
        sspec = s_music_spectrum(dec_s, grids.azimuths, grids.elevations, n_x, n_y)
        peaks = peak_pick(sspec.values, r_k, radius=3)
        if peaks.shortfall:
            flags.append(f"angle peak shortfall in group {k}")
        angles = []
        for pos in peaks.positions:
            th = interp_grid(grids.azimuths, pos[0])
            ph = interp_grid(grids.elevations, pos[1])
            angles.append(refine_angles(dec_s.noise, th, ph, grids.azimuth_step, n_x, n_y))
        group_angles.append(np.array(angles).reshape(-1, 2))
        # Steps 4-5: beamform toward each angle, then single-path T-MUSIC
        for m, (th, ph) in enumerate(angles):
            Ykm = spatial_beamform(Yk, angles, m, n_x, n_y, exact=True)
            lam_b, V_b = sorted_eigh(covariance_temporal(Ykm))
            dec_b = SubspaceDecomposition(V_b[:, :1], V_b[:, 1:], lam_b)
            # the filtered data carries proj @ g(tau): search with that steering
            # near the group delay, away from the nulls at the other groups
            steer = _ProjectedSteering(model, proj)
            half = resolution
            if others:
                half = min(half, 0.5 * min(abs(group_delays[k] - d) for n, d in enumerate(group_delays) if n != k))
            tau, _ = windowed_delay_search(
                dec_b.noise, steer, grids.delays, group_delays[k] - half, group_delays[k] + half
            )
            delays.append(tau)
            azs.append(th)
            els.append(ph)

    delays, azs, els = np.array(delays), np.array(azs), np.array(els)
    keep_idx = prune_paths(Y, model, delays, azs, els, n_x, n_y, prune_ratio)
    if len(keep_idx) < len(delays):
        flags.append(f"pruned {len(delays) - len(keep_idx)} insignificant path(s)")
    delays, azs, els = delays[keep_idx], azs[keep_idx], els[keep_idx]
    V = path_dictionary(model, delays, azs, els, n_x, n_y)
    gains = least_squares_gains(Y, V)
    est = PathEstimate(delays, azs, els, gains, GroupEstimate(np.array(group_delays), group_angles), flags)
    return est.sorted()
