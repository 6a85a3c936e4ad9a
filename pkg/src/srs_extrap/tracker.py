"""Sparse delay-angle tracking with Turbo message passing and an MM M-step.

The channel at slot ``t`` is represented on a delay grid (L points over
``[-T_d/4, T_d]``) times an angle grid (``N_x`` azimuths by ``N_y``
elevations). The DAD coefficient vector ``h`` has index
``m = a * L + l`` with ``a = i * N_y + j``, i.e. delay-major inside each
angle block, so that ``vec(Y) = Phi h`` with ``Phi = A_R kron G``.

Per slot the E-step alternates an LMMSE module (A) with a Bernoulli-Gaussian
combiner (B) exchanging Gaussian extrinsic messages; the M-step updates the
phase noise in closed form and the remaining nuisance blocks (timing offset,
Doppler, off-grid vectors) by fixed-size sign-gradient steps on an MM
surrogate.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import cho_factor, cho_solve, lapack

from .config import SystemConfig
from .scenario import SrsObservation, steering_vector_upa

VAR_FLOOR = 1e-12
VAR_CAP = 1e12


def cosine_grid(n: int) -> np.ndarray:
    return np.arccos(1.0 - (2.0 * np.arange(n) + 1.0) / n)


def _gaps(grid: np.ndarray) -> np.ndarray:
    """Distance from each grid point to its nearest neighbour."""
    if len(grid) < 2:
        return np.full(len(grid), np.pi)
    d = np.diff(grid)
    return np.minimum(np.r_[d[0], d], np.r_[d, d[-1]])


@dataclass(frozen=True)
class Grids:
    """Delay grid (seconds) and angle grids (radians) of the DAD model."""

    delays: np.ndarray
    azimuths: np.ndarray
    elevations: np.ndarray

    @classmethod
    def default(cls, system: SystemConfig, num_delays: int | None = None) -> "Grids":
        """Delay step close to 1/(N f_s); angle grids are uniform in cosine.

        Cosine-uniform cell centres ``arccos(1 - (2i + 1)/n)`` keep the square
        angle dictionary well conditioned (a grid uniform in angle over
        [0, pi] nearly loses rank for 4 x 4 arrays).
        """
        span = 1.25 * system.max_delay
        if num_delays is None:
            num_delays = max(2, int(round(span * system.num_subcarriers * system.subcarrier_spacing)) + 1)
        delays = np.linspace(-system.max_delay / 4, system.max_delay, num_delays)
        return cls(delays, cosine_grid(system.n_x), cosine_grid(system.n_y))

    @property
    def L(self) -> int:
        return len(self.delays)

    @property
    def num_angles(self) -> int:
        return len(self.azimuths) * len(self.elevations)

    @property
    def size(self) -> int:
        return self.L * self.num_angles

    @property
    def delay_step(self) -> float:
        return float(self.delays[1] - self.delays[0]) if self.L > 1 else 1.0

    @property
    def azimuth_gaps(self) -> np.ndarray:
        return _gaps(self.azimuths)

    @property
    def elevation_gaps(self) -> np.ndarray:
        return _gaps(self.elevations)

    def index(self, l: int, i: int, j: int) -> int:
        return (i * len(self.elevations) + j) * self.L + l


@dataclass(frozen=True)
class MarkovHyperparams:
    """Temporal prior parameters.

    ``gamma_amp=None`` is resolved from the stage-1 path powers at
    initialisation; ``gamma_u``/``gamma_u_angle=None`` default to a tenth of
    the delay/angle grid step, squared.
    """

    rho01: float = 0.05
    rho10: float = 0.05
    beta_amp: float = 0.1
    mu_amp: complex = 0.0
    gamma_amp: float | None = None
    beta_dop: float = 0.1
    mu_dop: float = 0.0
    gamma_dop: float = 100.0
    gamma_u: float | None = None
    gamma_u_angle: float | None = None
    doppler_step: float = 2.0
    max_doppler: float | None = None

    def __post_init__(self) -> None:
        for name in ("rho01", "rho10", "beta_amp", "beta_dop"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        for name in ("gamma_amp", "gamma_dop", "gamma_u", "gamma_u_angle", "doppler_step", "max_doppler"):
            v = getattr(self, name)
            if v is not None and v <= 0:
                raise ValueError(f"{name} must be positive")

    @property
    def steady_state(self) -> float:
        total = self.rho01 + self.rho10
        return self.rho01 / total if total > 0 else np.nan

    def resolved(self, grids: Grids, mean_power: float = 1.0) -> "MarkovHyperparams":
        out = self
        if self.gamma_amp is None:
            b = max(self.beta_amp, 1e-6)
            out = replace(out, gamma_amp=float(mean_power * (2 - b) / b))
        if self.gamma_u is None:
            out = replace(out, gamma_u=(grids.delay_step / 10) ** 2)
        if self.gamma_u_angle is None:
            out = replace(out, gamma_u_angle=(float(np.mean(grids.azimuth_gaps)) / 10) ** 2)
        return out


@dataclass
class Xi:
    """Per-slot nuisance parameters of the sensing model."""

    phase_noise: float
    time_offset: float
    doppler: np.ndarray  # (M,) Hz
    base_phase: np.ndarray  # (M,) accumulated Doppler phase of the previous slot
    d_tau: np.ndarray  # (L,)
    d_az: np.ndarray  # (N_x,)
    d_el: np.ndarray  # (N_y,)

    def copy(self) -> "Xi":
        return Xi(
            float(self.phase_noise), float(self.time_offset), self.doppler.copy(), self.base_phase.copy(),
            self.d_tau.copy(), self.d_az.copy(), self.d_el.copy(),
        )

    def doppler_phase(self, srs_period: float) -> np.ndarray:
        return self.base_phase + 2 * np.pi * srs_period * self.doppler


@dataclass
class Beliefs:
    """Per-index Bernoulli support and Gaussian amplitude beliefs."""

    support: np.ndarray
    amp_mean: np.ndarray
    amp_var: np.ndarray

    def copy(self) -> "Beliefs":
        return Beliefs(self.support.copy(), self.amp_mean.copy(), self.amp_var.copy())


@dataclass(frozen=True)
class ExtrinsicMessage:
    mean: np.ndarray
    var: np.ndarray
    direction: str  # "A->B" or "B->A"


@dataclass
class SensingOperator:
    """Dense (or block-diagonal) linear map from DAD coefficients to vec(Y).

    ``G`` is the P x L delay factor including pilot, selection and timing
    offset, ``A`` the N_r x N_a angle factor, ``phase`` the per-index
    Doppler rotation and ``eps`` the common phase noise. With ``A=None`` the
    operator is ``I_{N_r} kron G`` (delay-only dictionary per antenna).
    """

    G: np.ndarray
    A: np.ndarray | None
    phase: np.ndarray
    eps: float
    tones: np.ndarray
    spacing: float
    _matrix: np.ndarray | None = field(default=None, repr=False)
    _gram: np.ndarray | None = field(default=None, repr=False)

    @property
    def n_antennas(self) -> int:
        return self.A.shape[0] if self.A is not None else len(self.phase) // self.G.shape[1]

    @property
    def matrix(self) -> np.ndarray:
        if self._matrix is None:
            if self.A is None:
                K = np.kron(np.eye(self.n_antennas), self.G)
            else:
                K = np.kron(self.A, self.G)
            self._matrix = np.exp(1j * self.eps) * K * self.phase[None, :]
        return self._matrix

    def apply(self, h: np.ndarray) -> np.ndarray:
        """Phi h returned as a P x N_r matrix."""
        L = self.G.shape[1]
        H = (h * self.phase).reshape(-1, L).T
        Z = self.G @ H
        if self.A is not None:
            Z = Z @ self.A.T
        return np.exp(1j * self.eps) * Z

    def adjoint(self, Y: np.ndarray) -> np.ndarray:
        """Phi^H vec(Y)."""
        B = self.G.conj().T @ Y
        if self.A is not None:
            B = B @ self.A.conj()
        return np.exp(-1j * self.eps) * B.T.reshape(-1) * self.phase.conj()

    def column_norms_sq(self) -> np.ndarray:
        gn = np.sum(np.abs(self.G) ** 2, axis=0)
        an = np.sum(np.abs(self.A) ** 2, axis=0) if self.A is not None else np.ones(self.n_antennas)
        return np.kron(an, gn)


def _angle_matrix(grids: Grids, d_az, d_el, n_x: int, n_y: int) -> np.ndarray:
    th = (grids.azimuths + d_az)[:, None]
    ph = (grids.elevations + d_el)[None, :]
    th, ph = np.broadcast_arrays(th, ph)
    return steering_vector_upa(th, ph, n_x, n_y).reshape(-1, n_x * n_y).T


def _angle_derivatives(grids: Grids, d_az, d_el, n_x: int, n_y: int):
    """d a / d theta and d a / d phi for every grid column (N_r x N_a)."""
    th = (grids.azimuths + d_az)[:, None] + 0 * grids.elevations[None, :]
    ph = (grids.elevations + d_el)[None, :] + 0 * grids.azimuths[:, None]
    a = steering_vector_upa(th, ph, n_x, n_y)  # (N_x, N_y, N_r)
    nx = np.repeat(np.arange(n_x), n_y)
    ny = np.tile(np.arange(n_y), n_x)
    th3, ph3 = th[..., None], ph[..., None]
    dth = a * (1j * np.pi * (nx * np.cos(th3) * np.cos(ph3) - ny * np.sin(th3)))
    dph = a * (1j * np.pi * nx * (-np.sin(th3) * np.sin(ph3)))
    return dth.reshape(-1, n_x * n_y).T, dph.reshape(-1, n_x * n_y).T


def delay_matrix(grids: Grids, d_tau, tones, pilot, spacing: float, time_offset: float) -> np.ndarray:
    """diag(x) W S(tau0) F_d(d_tau): P x L."""
    tau = grids.delays + d_tau + time_offset
    return pilot[:, None] * np.exp(-2j * np.pi * spacing * np.multiply.outer(np.asarray(tones, float), tau))


def build_sensing(grids: Grids, xi: Xi, obs: SrsObservation, system: SystemConfig) -> SensingOperator:
    """Sensing operator of slot ``obs.slot`` under the nuisance parameters ``xi``."""
    G = delay_matrix(grids, xi.d_tau, obs.selection, obs.pilot, system.subcarrier_spacing, xi.time_offset)
    A = _angle_matrix(grids, xi.d_az, xi.d_el, system.n_x, system.n_y)
    phase = np.exp(1j * xi.doppler_phase(system.srs_period))
    return SensingOperator(G, A, phase, xi.phase_noise, np.asarray(obs.selection), system.subcarrier_spacing)


def _extrinsic(post_mean, post_var, pri_mean, pri_var, flags: list[str] | None, label: str):
    """Gaussian division post / prior with variance clamping.

    Returns ``(mean, var, invalid)``; ``invalid`` marks indices whose
    precision difference was not positive (variance set to the cap).
    """
    prec = 1.0 / post_var - 1.0 / pri_var
    bad = prec <= 1.0 / VAR_CAP
    var = np.where(bad, VAR_CAP, 1.0 / np.where(bad, 1.0, prec))
    hit = bad | (var < VAR_FLOOR) | (var > VAR_CAP)
    var = np.clip(var, VAR_FLOOR, VAR_CAP)
    mean = np.where(bad, post_mean, var * (post_mean / post_var - pri_mean / pri_var))
    if flags is not None and np.any(hit):
        flags.append(f"{label}: extrinsic variance clamped at {int(np.sum(hit))} indices")
    return mean, var, bad


@dataclass
class ModuleAResult:
    post_mean: np.ndarray
    post_var: np.ndarray
    extrinsic: ExtrinsicMessage


def lmmse_module_a(
    y,
    sensing: SensingOperator | np.ndarray,
    pri_mean: np.ndarray,
    pri_var: np.ndarray,
    noise_var: float,
    flags: list[str] | None = None,
) -> ModuleAResult:
    """LMMSE posterior under prior CN(pri_mean, diag(pri_var)) and its extrinsic.

    ``sensing`` may be a plain matrix; ``y`` is vec(Y) or the P x N_r matrix.
    """
    pri_var = np.asarray(pri_var, dtype=float)
    if np.any(pri_var <= 0):
        raise AssertionError("prior variances must be positive")
    y = np.asarray(y)
    if isinstance(sensing, np.ndarray):
        Phi = sensing
        yv = y.reshape(-1, order="F") if y.ndim == 2 else y
        gram = Phi.conj().T @ Phi
        rhs_y = Phi.conj().T @ yv
        post_mean, post_var = _dense_posterior(gram, rhs_y, pri_mean, pri_var, noise_var)
    elif sensing.A is None:
        post_mean, post_var = _block_posterior(sensing, y, pri_mean, pri_var, noise_var)
    else:
        if sensing._gram is None:
            sensing._gram = sensing.matrix.conj().T @ sensing.matrix
        Y = y if y.ndim == 2 else y.reshape(-1, sensing.n_antennas, order="F")
        post_mean, post_var = _dense_posterior(sensing._gram, sensing.adjoint(Y), pri_mean, pri_var, noise_var)
    post_var = np.clip(post_var, VAR_FLOOR, VAR_CAP)
    mean, var, _ = _extrinsic(post_mean, post_var, pri_mean, pri_var, flags, "module A")
    return ModuleAResult(post_mean, post_var, ExtrinsicMessage(mean, var, "A->B"))


def _dense_posterior(gram, rhs_y, pri_mean, pri_var, noise_var):
    J = gram / noise_var
    J[np.diag_indices_from(J)] += 1.0 / pri_var
    c, lower = cho_factor(J, lower=False, check_finite=False)
    rhs = pri_mean / pri_var + rhs_y / noise_var
    mean = cho_solve((c, lower), rhs, check_finite=False)
    # J = U^H U, so diag(J^-1) are the squared row norms of U^-1
    uinv, info = lapack.ztrtri(c, lower=0)
    if info != 0:
        raise np.linalg.LinAlgError("posterior covariance inversion failed")
    uinv = np.triu(uinv)
    return mean, np.einsum("ij,ij->i", uinv.real, uinv.real) + np.einsum("ij,ij->i", uinv.imag, uinv.imag)


def _block_posterior(sensing: SensingOperator, Y, pri_mean, pri_var, noise_var):
    """Posterior for Phi = I kron G, solved antenna by antenna."""
    G = sensing.G * np.exp(1j * sensing.eps)
    L = G.shape[1]
    Nr = sensing.n_antennas
    Y = Y if Y.ndim == 2 else Y.reshape(-1, Nr, order="F")
    ph = sensing.phase.reshape(Nr, L)
    gram = G.conj().T @ G / noise_var
    J = np.broadcast_to(gram, (Nr, L, L)) * (ph.conj()[:, :, None] * ph[:, None, :])
    J = J + np.einsum("rl,lk->rlk", 1.0 / pri_var.reshape(Nr, L), np.eye(L))
    rhs = pri_mean.reshape(Nr, L) / pri_var.reshape(Nr, L) + ph.conj() * (G.conj().T @ Y).T / noise_var
    inv = np.linalg.inv(J)
    mean = np.einsum("rlk,rk->rl", inv, rhs).reshape(-1)
    var = np.real(np.einsum("rll->rl", inv)).reshape(-1)
    return mean, var


def _log_cn(x, mean, var):
    return -np.abs(x - mean) ** 2 / var - np.log(np.pi * var)


@dataclass
class SlotPosterior:
    """Within-slot sum-product output for every DAD index."""

    mean: np.ndarray
    var: np.ndarray
    beliefs: Beliefs


def spmp_within_slot(prior: Beliefs, r: np.ndarray, v: np.ndarray) -> SlotPosterior:
    """Sum-product marginals of h = s * theta given pseudo-observations CN(h; r, v).

    The within-slot graph is a tree per index: support prior -> s, amplitude
    prior -> theta, and the delta factor tying h to (s, theta). The theta
    belief is the two-component mixture collapsed to its first two moments.
    """
    pi = np.clip(prior.support, 0.0, 1.0)
    mu, gam = prior.amp_mean, np.maximum(prior.amp_var, 0.0)
    v = np.asarray(v, dtype=float)
    with np.errstate(divide="ignore"):
        log0 = np.log1p(-pi) + _log_cn(0.0, r, v)
        log1 = np.log(pi) + _log_cn(r, mu, gam + v)
    both_inf = np.isneginf(log0) & np.isneginf(log1)
    diff = np.where(both_inf, 0.0, log0 - log1)
    pi_post = np.where(np.isneginf(log0), 1.0, np.where(np.isneginf(log1), 0.0, 1.0 / (1.0 + np.exp(np.clip(diff, -700, 700)))))
    pos_gam = gam > 0
    safe_gam = np.where(pos_gam, gam, 1.0)
    slab_var = np.where(pos_gam, 1.0 / (1.0 / safe_gam + 1.0 / v), 0.0)
    slab_mean = np.where(pos_gam, slab_var * (mu / safe_gam + r / v), mu)
    mean = pi_post * slab_mean
    second = pi_post * (np.abs(slab_mean) ** 2 + slab_var)
    var = np.maximum(second - np.abs(mean) ** 2, 0.0)
    amp_mean = (1 - pi_post) * mu + pi_post * slab_mean
    amp_second = (1 - pi_post) * (gam + np.abs(mu) ** 2) + pi_post * (slab_var + np.abs(slab_mean) ** 2)
    amp_var = np.maximum(amp_second - np.abs(amp_mean) ** 2, 0.0)
    return SlotPosterior(mean, var, Beliefs(pi_post, amp_mean, amp_var))


@dataclass
class ModuleBResult:
    post_mean: np.ndarray
    post_var: np.ndarray
    beliefs: Beliefs
    extrinsic: ExtrinsicMessage
    invalid: np.ndarray | None = None


def bg_combiner_module_b(
    message: ExtrinsicMessage, prior: Beliefs, flags: list[str] | None = None
) -> ModuleBResult:
    """Bernoulli-Gaussian posterior of every index and its extrinsic for module A."""
    sp = spmp_within_slot(prior, message.mean, message.var)
    post_var = np.clip(sp.var, VAR_FLOOR, VAR_CAP)
    mean, var, bad = _extrinsic(sp.mean, post_var, message.mean, message.var, flags, "module B")
    return ModuleBResult(sp.mean, post_var, sp.beliefs, ExtrinsicMessage(mean, var, "B->A"), bad)


def prior_moments(prior: Beliefs):
    """Mean and variance of h = s * theta under the prior."""
    mean = prior.support * prior.amp_mean
    var = prior.support * (prior.amp_var + np.abs(prior.amp_mean) ** 2) - np.abs(mean) ** 2
    return mean, np.clip(var, VAR_FLOOR, VAR_CAP)


@dataclass
class EStepResult:
    mean: np.ndarray
    var: np.ndarray
    beliefs: Beliefs
    module_a_mean: np.ndarray
    iterations: int
    converged: bool
    message: ExtrinsicMessage
    flags: list[str] = field(default_factory=list)


def turbo_estep(
    y,
    sensing: SensingOperator,
    prior: Beliefs,
    noise_var: float,
    max_iters: int = 50,
    tol: float = 1e-6,
    damping: float = 0.7,
    start: ExtrinsicMessage | None = None,
) -> EStepResult:
    """Alternate modules A and B until the B->A extrinsic mean settles.

    ``damping`` is the weight of the newly computed B->A message (1.0 means
    no damping). ``start`` warm-starts from an earlier B->A message.
    """
    flags: list[str] = []
    if start is None:
        h_pri, v_pri = prior_moments(prior)
    else:
        h_pri, v_pri = start.mean.copy(), start.var.copy()
    best = None
    converged = False
    Y = np.asarray(y)
    if Y.ndim == 1:
        Y = Y.reshape(-1, sensing.n_antennas, order="F")
    it = 0
    for it in range(1, max_iters + 1):
        a = lmmse_module_a(Y, sensing, h_pri, v_pri, noise_var)
        b = bg_combiner_module_b(a.extrinsic, prior)
        new_mean = damping * b.extrinsic.mean + (1 - damping) * h_pri
        new_var = damping * b.extrinsic.var + (1 - damping) * v_pri
        change = np.linalg.norm(new_mean - h_pri)
        scale = max(np.linalg.norm(new_mean), 1e-30)
        resid = float(np.sum(np.abs(Y - sensing.apply(b.post_mean)) ** 2))
        if best is None or resid < best[0]:
            best = (resid, a, b)
        h_pri, v_pri = new_mean, new_var
        if change <= tol * scale:
            converged = True
            break
    if converged:
        _, a, b = None, a, b
    else:
        flags.append("turbo E-step did not converge; best-residual iterate returned")
        _, a, b = best
    return EStepResult(
        b.post_mean, b.post_var, b.beliefs, a.post_mean, it, converged,
        ExtrinsicMessage(h_pri, v_pri, "B->A"), flags,
    )


def cross_slot_propagate(beliefs: Beliefs, hyper: MarkovHyperparams) -> Beliefs:
    """Priors of slot t+1 from the beliefs of slot t."""
    pi = beliefs.support * (1 - hyper.rho10) + (1 - beliefs.support) * hyper.rho01
    b = hyper.beta_amp
    gamma = hyper.gamma_amp if hyper.gamma_amp is not None else 1.0
    mean = (1 - b) * beliefs.amp_mean + b * hyper.mu_amp
    var = (1 - b) ** 2 * beliefs.amp_var + b**2 * gamma
    return Beliefs(pi, mean, var)


# ---------------------------------------------------------------- M-step

BLOCKS = ("phase_noise", "time_offset", "doppler", "d_tau", "d_az", "d_el")


@dataclass(frozen=True)
class SlotContext:
    """Everything the surrogate needs besides the free parameters."""

    Y: np.ndarray
    obs: SrsObservation
    grids: Grids
    system: SystemConfig
    hyper: MarkovHyperparams
    noise_var: float
    previous: Xi  # Xi^(t-1), prior centre of the drift terms


def _residual_term(E, sensing: SensingOperator, var, noise_var) -> float:
    return -(np.sum(np.abs(E) ** 2) + np.sum(var * sensing.column_norms_sq())) / noise_var


def _prior_term(xi: Xi, ctx: SlotContext) -> float:
    prev, hyper = ctx.previous, ctx.hyper
    bd = hyper.beta_dop
    dop_mean = (1 - bd) * prev.doppler + bd * hyper.mu_dop
    dop_var = max(bd**2 * hyper.gamma_dop, 1e-300)
    gu, ga = hyper.gamma_u, hyper.gamma_u_angle
    return float(
        -np.sum((xi.doppler - dop_mean) ** 2) / (2 * dop_var)
        - np.sum((xi.d_tau - prev.d_tau) ** 2) / (2 * gu)
        - np.sum((xi.d_az - prev.d_az) ** 2) / (2 * ga)
        - np.sum((xi.d_el - prev.d_el) ** 2) / (2 * ga)
    )


def surrogate_value(xi: Xi, mean: np.ndarray, var: np.ndarray, ctx: SlotContext) -> float:
    """Value of the MM surrogate only (see :func:`surrogate_value_and_gradient`)."""
    sensing = build_sensing(ctx.grids, xi, ctx.obs, ctx.system)
    return float(_residual_term(ctx.Y - sensing.apply(mean), sensing, var, ctx.noise_var) + _prior_term(xi, ctx))


def surrogate_value_and_gradient(xi: Xi, mean: np.ndarray, var: np.ndarray, ctx: SlotContext):
    """MM surrogate u(Xi) and its gradient for every block.

    u = -(||y - Phi(Xi) mu||^2 + sum_m var_m ||Phi_m||^2) / sigma^2 + log priors.
    Returns ``(value, {block: gradient})``.
    """
    sysc, grids, hyper = ctx.system, ctx.grids, ctx.hyper
    sensing = build_sensing(grids, xi, ctx.obs, sysc)
    Z = sensing.apply(mean)
    E = ctx.Y - Z
    s2 = ctx.noise_var
    value = _residual_term(E, sensing, var, s2)

    grads: dict[str, np.ndarray] = {}

    def coef(inner):
        # d u / d x = (2 / sigma^2) Re <E, dZ/dx>
        return 2.0 / s2 * np.real(inner)

    grads["phase_noise"] = np.atleast_1d(coef(np.sum(E.conj() * (1j * Z))))
    w = -2j * np.pi * sysc.subcarrier_spacing * np.asarray(ctx.obs.selection, float)
    grads["time_offset"] = np.atleast_1d(coef(np.sum(E.conj() * (w[:, None] * Z))))

    L = grids.L
    ee = np.exp(1j * sensing.eps)
    Hp = (mean * sensing.phase).reshape(-1, L).T  # L x N_a
    A = sensing.A
    G = sensing.G
    # Doppler: d Hp[l, a] / d f = j 2 pi T Hp[l, a]
    Wm = G.T @ E.conj() @ A  # L x N_a
    dop = coef(ee * 1j * 2 * np.pi * sysc.srs_period * Hp * Wm)
    grads["doppler"] = dop.T.reshape(-1)
    # delay offsets
    B = Hp @ A.T  # L x N_r
    C = E.conj().T @ (w[:, None] * G)  # N_r x L
    grads["d_tau"] = coef(ee * np.sum(B * C.T, axis=1))
    # angle offsets
    GH = G @ Hp  # P x N_a
    Kmat = E.conj().T @ GH  # N_r x N_a
    dth, dph = _angle_derivatives(grids, xi.d_az, xi.d_el, sysc.n_x, sysc.n_y)
    n_az, n_el = len(grids.azimuths), len(grids.elevations)
    g_th = coef(ee * np.sum(Kmat * dth, axis=0)).reshape(n_az, n_el)
    g_ph = coef(ee * np.sum(Kmat * dph, axis=0)).reshape(n_az, n_el)
    grads["d_az"] = g_th.sum(axis=1)
    grads["d_el"] = g_ph.sum(axis=0)

    # drift priors
    prev = ctx.previous
    bd = hyper.beta_dop
    dop_mean = (1 - bd) * prev.doppler + bd * hyper.mu_dop
    dop_var = max(bd**2 * hyper.gamma_dop, 1e-300)
    value += _prior_term(xi, ctx)
    grads["doppler"] = grads["doppler"] - (xi.doppler - dop_mean) / dop_var
    gu, ga = hyper.gamma_u, hyper.gamma_u_angle
    grads["d_tau"] = grads["d_tau"] - (xi.d_tau - prev.d_tau) / gu
    grads["d_az"] = grads["d_az"] - (xi.d_az - prev.d_az) / ga
    grads["d_el"] = grads["d_el"] - (xi.d_el - prev.d_el) / ga
    return float(value), grads


def closed_form_phase(xi: Xi, mean: np.ndarray, ctx: SlotContext) -> float:
    """argmax_eps Re{exp(-j eps) (Phi_0 mu)^H y}."""
    sensing = build_sensing(ctx.grids, replace(xi, phase_noise=0.0), ctx.obs, ctx.system)
    return float(np.angle(np.vdot(sensing.apply(mean), ctx.Y)))


def block_steps(grids: Grids, hyper: MarkovHyperparams) -> dict[str, np.ndarray | float]:
    """Sign-gradient step of every block: its grid interval over 50."""
    return {
        "time_offset": grids.delay_step / 50,
        "doppler": hyper.doppler_step / 50,
        "d_tau": grids.delay_step / 50,
        "d_az": grids.azimuth_gaps / 50,
        "d_el": grids.elevation_gaps / 50,
    }


def offset_limits(grids: Grids) -> dict[str, np.ndarray | float]:
    return {"d_tau": grids.delay_step / 2, "d_az": grids.azimuth_gaps / 2, "d_el": grids.elevation_gaps / 2}


def mstep_update(
    xi: Xi, mean: np.ndarray, var: np.ndarray, ctx: SlotContext, blocks=BLOCKS, ascent_check: bool = True,
    max_halvings: int = 6,
) -> Xi:
    """One block-coordinate pass: closed-form phase noise, then sign-gradient steps.

    Each block moves by at most its step (grid interval over 50) along the
    gradient sign. With ``ascent_check`` a step that lowers the surrogate is
    halved up to ``max_halvings`` times and dropped if it still does, so the
    pass never decreases the surrogate.
    """
    xi = xi.copy()
    steps = block_steps(ctx.grids, ctx.hyper)
    half = offset_limits(ctx.grids)
    for name in blocks:
        if name == "phase_noise":
            xi.phase_noise = closed_form_phase(xi, mean, ctx)
            continue
        u0, grads = surrogate_value_and_gradient(xi, mean, var, ctx)
        g = grads[name]
        tiny = 1e-12 * max(np.max(np.abs(g)), 1e-300)
        direction = np.where(np.abs(g) > tiny, np.sign(g), 0.0)
        base = getattr(xi, name)
        scale = 1.0
        for _ in range(max_halvings + 1 if ascent_check else 1):
            value = base + scale * steps[name] * direction
            if name in half:
                value = np.clip(value, -half[name], half[name])
            if name == "time_offset":
                value = float(np.ravel(value)[0])
            cand = replace(xi, **{name: value})
            if not ascent_check or surrogate_value(cand, mean, var, ctx) >= u0:
                xi = cand
                break
            scale *= 0.5
    return xi


# ------------------------------------------------------------ slot driver


@dataclass
class TrackerState:
    """State carried from one slot to the next."""

    grids: Grids
    hyper: MarkovHyperparams
    slot: int  # last processed slot
    xi: Xi  # nuisance estimates of that slot
    prior: Beliefs  # priors for the next slot
    mean: np.ndarray  # posterior DAD mean of the last slot
    var: np.ndarray
    flags: list[str] = field(default_factory=list)


def _nearest(grid: np.ndarray, value: float, step) -> tuple[int, float]:
    i = int(np.argmin(np.abs(grid - value)))
    half = np.broadcast_to(np.asarray(step, dtype=float), grid.shape)[i] / 2
    off = float(np.clip(value - grid[i], -half, half))
    return i, off


def init_from_hrpe(
    refined, grids: Grids, hyper: MarkovHyperparams, system: SystemConfig, support_threshold: float = 0.01
) -> TrackerState:
    """Map stage-1 paths onto the DAD grid and build the first tracking priors.

    ``refined`` is any parameter set with ``delays``, ``azimuths``,
    ``elevations``, ``gains``, ``doppler_slope``, ``phase_noise`` and
    ``time_offset`` (the last two per estimation slot).

    Off-grid offsets of each delay/angle row come from the strongest path
    falling in that row. Every path is then projected (least squares over
    the full band) onto the resulting dictionary, so paths sharing a row
    with a stronger one are still represented. Each index inherits the
    Doppler of the path that dominates it; indices holding at least
    ``support_threshold`` of the largest coefficient energy get support
    prior ``1 - rho10``.
    """
    if len(refined.delays) == 0:
        raise ValueError("stage-1 estimate is empty")
    flags: list[str] = []
    M = grids.size
    n_slots = len(refined.phase_noise)
    gains = np.asarray(refined.gains)
    power = np.abs(gains) ** 2
    hyper = hyper.resolved(grids, float(np.mean(power)))
    xi = Xi(
        phase_noise=float(refined.phase_noise[-1]),
        time_offset=float(refined.time_offset[-1]),
        doppler=np.zeros(M),
        base_phase=np.zeros(M),
        d_tau=np.zeros(grids.L),
        d_az=np.zeros(len(grids.azimuths)),
        d_el=np.zeros(len(grids.elevations)),
    )
    set_tau, set_az, set_el = set(), set(), set()
    for k in np.lexsort((refined.delays, -power)):
        l, dt = _nearest(grids.delays, refined.delays[k], grids.delay_step)
        i, da = _nearest(grids.azimuths, refined.azimuths[k], grids.azimuth_gaps)
        j, de = _nearest(grids.elevations, refined.elevations[k], grids.elevation_gaps)
        if l in set_tau or i in set_az or j in set_el:
            flags.append(f"path {k} shares a grid row with a stronger path")
        if l not in set_tau:
            xi.d_tau[l], _ = dt, set_tau.add(l)
        if i not in set_az:
            xi.d_az[i], _ = da, set_az.add(i)
        if j not in set_el:
            xi.d_el[j], _ = de, set_el.add(j)

    tones = np.arange(system.num_subcarriers)
    F = delay_matrix(grids, xi.d_tau, tones, np.ones(len(tones)), system.subcarrier_spacing, 0.0)
    A = _angle_matrix(grids, xi.d_az, xi.d_el, system.n_x, system.n_y)
    D = np.kron(A, F)
    g = np.exp(-2j * np.pi * system.subcarrier_spacing * np.multiply.outer(tones, refined.delays))
    a = steering_vector_upa(refined.azimuths, refined.elevations, system.n_x, system.n_y)
    # column-major vec of g_k a_k^T is a_k kron g_k
    paths = np.einsum("ka,pk->apk", a, g).reshape(-1, len(gains))
    rot = gains * np.exp(1j * (n_slots - 1) * np.asarray(refined.doppler_slope))
    coef, *_ = np.linalg.lstsq(D, paths * rot[None, :], rcond=None)  # (M, K)
    owner = np.argmax(np.abs(coef), axis=1)
    slopes = np.asarray(refined.doppler_slope, dtype=float)
    if hyper.max_doppler is not None:
        cap = 2 * np.pi * system.srs_period * hyper.max_doppler
        if np.any(np.abs(slopes) > cap):
            flags.append("stage-1 Doppler beyond the configured maximum; clamped")
        slopes = np.clip(slopes, -cap, cap)
    slope = slopes[owner]
    xi.doppler = slope / (2 * np.pi * system.srs_period)
    xi.base_phase = (n_slots - 1) * slope
    h0 = coef.sum(axis=1) * np.exp(-1j * xi.base_phase)
    energy = np.abs(h0) ** 2
    active = energy >= support_threshold * energy.max()
    support = np.where(active, 1 - hyper.rho10, hyper.rho01)
    amp_mean = (1 - hyper.beta_amp) * h0 + hyper.beta_amp * hyper.mu_amp
    amp_var = np.full(M, hyper.beta_amp**2 * hyper.gamma_amp)
    return TrackerState(
        grids, hyper, n_slots, xi, Beliefs(support, amp_mean, amp_var),
        np.zeros(M, dtype=complex), np.zeros(M), flags,
    )


def prealign(xi: Xi, prior: Beliefs, ctx: SlotContext, search_half_width: float, points: int = 257) -> Xi:
    """Align phase noise and timing offset to the propagated prior mean.

    The timing offset is searched on a uniform grid around its previous value
    (a phase ramp over the observed tones); the phase noise then follows in
    closed form.
    """
    xi = xi.copy()
    mean = prior.support * prior.amp_mean
    base = build_sensing(ctx.grids, replace(xi, phase_noise=0.0), ctx.obs, ctx.system).apply(mean)
    corr = np.sum(base.conj() * ctx.Y, axis=1)  # per tone
    deltas = np.linspace(-search_half_width, search_half_width, points)
    # conj of the model ramp exp(-j 2 pi n f_s delta)
    ramp = np.exp(2j * np.pi * ctx.system.subcarrier_spacing * np.multiply.outer(deltas, ctx.obs.selection.astype(float)))
    scores = ramp @ corr
    best = int(np.argmax(np.abs(scores)))
    xi.time_offset = float(xi.time_offset + deltas[best])
    xi.phase_noise = float(np.angle(scores[best]))
    return xi


@dataclass
class TrackerConfig:
    em_iterations: int = 5
    estep_iters: int = 50
    tol: float = 1e-6
    damping: float = 0.7
    prealign_half_width: float | None = None  # seconds; None -> half a delay step
    blocks: tuple[str, ...] = BLOCKS
    prealign: bool = True
    ascent_check: bool = True  # reject M-step moves that lower the surrogate
    estimate_noise: bool = False  # EM update of the noise variance after each E-step


def reconstruct(state_grids: Grids, xi: Xi, mean: np.ndarray, system: SystemConfig, tones=None) -> np.ndarray:
    """Full-band CFR from DAD coefficients and nuisance parameters."""
    tones = np.arange(system.num_subcarriers) if tones is None else np.asarray(tones)
    G = delay_matrix(state_grids, xi.d_tau, tones, np.ones(len(tones)), system.subcarrier_spacing, xi.time_offset)
    A = _angle_matrix(state_grids, xi.d_az, xi.d_el, system.n_x, system.n_y)
    Hd = (mean * np.exp(1j * xi.doppler_phase(system.srs_period))).reshape(-1, state_grids.L).T
    return np.exp(1j * xi.phase_noise) * (G @ Hd @ A.T)


def noise_update(Y: np.ndarray, sensing: SensingOperator, mean: np.ndarray, var: np.ndarray) -> float:
    """Expected residual energy per observed entry under the diagonal posterior."""
    resid = np.sum(np.abs(Y - sensing.apply(mean)) ** 2) + np.sum(var * sensing.column_norms_sq())
    return float(max(resid / Y.size, VAR_FLOOR))


@dataclass
class SlotResult:
    H: np.ndarray
    estep: EStepResult
    xi: Xi


def track_slot(
    state: TrackerState,
    obs: SrsObservation,
    system: SystemConfig,
    noise_var: float,
    config: TrackerConfig | None = None,
) -> tuple[TrackerState, SlotResult]:
    """Process one slot: E/M iterations, reconstruction and prior propagation.

    With ``em_iterations = 0`` the nuisance parameters stay at their previous
    values (no pre-alignment, no M-step) and a single E-step is run.
    """
    cfg = TrackerConfig() if config is None else config
    grids, hyper = state.grids, state.hyper
    prev = state.xi
    # Xi^(t) starts from Xi^(t-1) with the Doppler phase rolled one slot on
    xi = prev.copy()
    xi.base_phase = prev.doppler_phase(system.srs_period)
    prev_rolled = prev.copy()
    prev_rolled.base_phase = xi.base_phase
    Y = obs.Y
    ctx = SlotContext(Y, obs, grids, system, hyper, noise_var, prev_rolled)
    flags: list[str] = []
    if cfg.em_iterations > 0 and cfg.prealign:
        half = cfg.prealign_half_width if cfg.prealign_half_width is not None else grids.delay_step / 2
        xi = prealign(xi, state.prior, ctx, half)
    start = None
    n_e = max(cfg.em_iterations, 1)
    est = None
    for j in range(n_e):
        sensing = build_sensing(grids, xi, obs, system)
        est = turbo_estep(Y, sensing, state.prior, noise_var, cfg.estep_iters, cfg.tol, cfg.damping, start)
        flags.extend(est.flags)
        start = est.message
        if cfg.em_iterations > 0:
            if cfg.estimate_noise:
                noise_var = noise_update(Y, sensing, est.mean, est.var)
                ctx = replace(ctx, noise_var=noise_var)
            xi = mstep_update(xi, est.mean, est.var, ctx, cfg.blocks, cfg.ascent_check)
    H = reconstruct(grids, xi, est.mean, system)
    new_state = TrackerState(
        grids, hyper, obs.slot, xi, cross_slot_propagate(est.beliefs, hyper), est.mean, est.var,
        state.flags + flags,
    )
    return new_state, SlotResult(H, est, xi)
