"""Model abstraction and forward simulation for jump diffusions.

A model is a set of coefficient functions for

    dX_t = b(X_t-) dt + sigma(X_t-) dW_t + dJ_t,

where J is a compound Poisson process, plus an observation density linking
the latent path to discrete data. Simulation is Euler-Maruyama on a uniform
grid with coefficients evaluated at left endpoints; a jump occurring at time
tau lands on the first grid point at or after tau.

Everything downstream (bridging, smoothing, parameter estimation) consumes
models through this interface, so the coefficient functions must accept
arrays of states with an arbitrary number of leading batch axes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ConfigError, DiffusionDegeneracyError, JumpOverflowError

DEFAULT_JUMP_CAP = 100


@dataclass(frozen=True)
class JumpSet:
    """Record of jump events on one interval: times and sizes."""

    times: np.ndarray  # (kappa,)
    sizes: np.ndarray  # (kappa, d_x)

    def __post_init__(self):
        times = np.atleast_1d(np.asarray(self.times, dtype=float))
        sizes = np.asarray(self.sizes, dtype=float)
        if sizes.ndim == 1:
            sizes = sizes.reshape(times.size, -1) if times.size else sizes.reshape(0, 1)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "sizes", sizes)
        if times.size:
            if np.any(np.diff(times) <= 0.0):
                raise ValueError("jump times must be strictly increasing")
            if times[0] <= 0.0:
                raise ValueError("jump times must be positive")
        if sizes.shape[0] != times.size:
            raise ValueError("one size vector per jump time required")

    @property
    def kappa(self) -> int:
        return int(self.times.size)


@dataclass(frozen=True)
class NoisePath:
    """Driving Wiener increments on a uniform grid over [0, T]."""

    increments: np.ndarray  # (M, d_w)
    horizon: float

    def __post_init__(self):
        inc = np.asarray(self.increments, dtype=float)
        if inc.ndim == 1:
            inc = inc[:, None]
        object.__setattr__(self, "increments", inc)
        if not np.all(np.isfinite(inc)):
            raise ValueError("noise increments must be finite")
        if self.horizon <= 0.0:
            raise ValueError("horizon must be positive")

    @property
    def M(self) -> int:
        return int(self.increments.shape[0])

    @property
    def delta(self) -> float:
        return self.horizon / self.M


@dataclass(frozen=True)
class PathSegment:
    """A discretised path: uniform grid times, states, and any jumps applied."""

    times: np.ndarray  # (M+1,)
    states: np.ndarray  # (M+1, d_x)
    jumps: JumpSet | None = None

    def __post_init__(self):
        object.__setattr__(self, "times", np.asarray(self.times, dtype=float))
        states = np.asarray(self.states, dtype=float)
        if states.ndim == 1:
            states = states[:, None]
        object.__setattr__(self, "states", states)
        if not np.all(np.isfinite(states)):
            raise ValueError("path states must be finite")

    @property
    def horizon(self) -> float:
        return float(self.times[-1] - self.times[0])

    @property
    def delta(self) -> float:
        return float(self.times[1] - self.times[0])


@dataclass(frozen=True)
class SdeModel:
    """Coefficient bundle defining a jump-diffusion state-space model.

    The required surface is `drift`, `diffusion`, `obs_logdensity`, and
    `param_domain`; jump models add the three jump fields together. The
    remaining fields are performance and convenience hooks used by the
    bridge and smoother: a diagonal-diffusion evaluator, vectorized
    observation likelihoods, and a default (Dirac) initial state.

    Coefficient functions take (theta, x) with x of shape (..., dim_x) and
    return arrays with matching leading axes. `param_domain` holds one
    entry per coordinate: "unconstrained", "positive", or ("wrap", lo, hi).
    """

    name: str
    dim_x: int
    dim_w: int
    dim_theta: int
    drift: Callable[[np.ndarray, np.ndarray], np.ndarray]
    diffusion: Callable[[np.ndarray, np.ndarray], np.ndarray]
    obs_logdensity: Callable
    param_domain: tuple
    jump_intensity: Callable | None = None
    jump_size_logdensity: Callable | None = None
    jump_size_sampler: Callable | None = None
    # optional structure flags and fast paths
    diffusion_diag: Callable | None = None
    constant_diffusion: bool = False
    init_state: Callable | None = None  # (theta, y0) -> (dim_x,)
    init_theta_dependent: bool = False
    obs_loglik_vec: Callable | None = None  # (theta, y, y_prev, x_end, stats, delta) -> (B,)
    obs0_loglik_vec: Callable | None = None  # (theta, y0, x0) -> (B,)
    obs_stat_coord: int | None = None  # accumulate a left Riemann integral of this coord
    obs_sampler: Callable | None = None  # (theta, y_prev, segment, rng) -> y
    obs_theta_free: bool = True
    analytic_pathspace_score: Callable | None = None
    vol_floor: float = 0.0
    # optimisation hooks: feller_check asks the parameter updater to project
    # iterates back into the CIR non-attainment region; jump_theta_free=False
    # declares that jump_intensity / jump_size_logdensity read theta, so score
    # computations must differentiate the jump-record factor too.
    feller_check: bool = False
    jump_theta_free: bool = True

    def __post_init__(self):
        jump_fields = (self.jump_intensity, self.jump_size_logdensity, self.jump_size_sampler)
        present = [f is not None for f in jump_fields]
        if any(present) and not all(present):
            raise ValueError("jump fields must be all present or all absent")
        if len(self.param_domain) != self.dim_theta:
            raise ValueError("param_domain must have one entry per parameter")

    @property
    def has_jumps(self) -> bool:
        return self.jump_intensity is not None


def sigma_diag(model: SdeModel, theta: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Diagonal of sigma(x), raising if the model is not diagonal."""
    if model.diffusion_diag is None:
        raise DiffusionDegeneracyError(
            f"model {model.name!r} does not expose a diagonal diffusion"
        )
    diag = model.diffusion_diag(theta, x)
    return np.asarray(diag, dtype=float)


def simulate_jumps(
    model: SdeModel,
    theta: np.ndarray,
    T: float,
    rng: np.random.Generator,
    cap: int = DEFAULT_JUMP_CAP,
) -> JumpSet:
    """Draw the compound-Poisson jump record on [0, T].

    Constant intensities are sampled directly (Poisson count, uniform order
    statistics); time-varying ones go through thinning with an envelope of
    1.5x the largest probed value, which covers any intensity whose maximum
    is attained within 50% of a 33-point probe of [0, T].
    """
    if not model.has_jumps:
        raise ConfigError(f"model {model.name!r} has no jump component")
    probe_t = np.linspace(0.0, T, 33)
    probe = np.array([float(model.jump_intensity(theta, t)) for t in probe_t])
    if np.any(probe < 0.0):
        raise ConfigError("jump intensity must be nonnegative")
    lam_max = probe.max()
    if lam_max == 0.0:
        return JumpSet(np.empty(0), np.empty((0, model.dim_x)))
    constant = np.ptp(probe) <= 1e-12 * lam_max
    if constant:
        kappa = int(rng.poisson(lam_max * T))
        if kappa > cap:
            raise JumpOverflowError(f"{kappa} jumps exceed the cap of {cap}")
        times = np.sort(rng.uniform(0.0, T, size=kappa))
    else:
        envelope = 1.5 * lam_max
        count = int(rng.poisson(envelope * T))
        if count > 4 * cap:
            raise JumpOverflowError(f"{count} candidate jumps exceed the cap of {cap}")
        cand = np.sort(rng.uniform(0.0, T, size=count))
        keep = rng.uniform(size=count) * envelope < np.array(
            [float(model.jump_intensity(theta, t)) for t in cand]
        )
        times = cand[keep]
        if times.size > cap:
            raise JumpOverflowError(f"{times.size} jumps exceed the cap of {cap}")
    # ties have probability zero; nudge deterministically if they do occur
    while times.size > 1 and np.any(np.diff(times) <= 0.0):
        times = np.sort(times + 1e-12 * rng.uniform(size=times.size))
    sizes = np.array([model.jump_size_sampler(theta, rng) for _ in times]).reshape(
        times.size, model.dim_x
    )
    return JumpSet(times=times, sizes=sizes)


def jump_increments(jumps: JumpSet | None, T: float, M: int, dim_x: int) -> np.ndarray:
    """Dense per-step jump increments on the uniform M-grid.

    Entry j collects every jump with time in (j*delta, (j+1)*delta], so the
    jump is applied at the first grid point at or after its occurrence.
    """
    out = np.zeros((M, dim_x))
    if jumps is None or jumps.kappa == 0:
        return out
    delta = T / M
    idx = np.ceil(jumps.times / delta - 1e-12).astype(int) - 1
    idx = np.clip(idx, 0, M - 1)
    np.add.at(out, idx, jumps.sizes)
    return out


def euler_paths(
    model: SdeModel,
    theta: np.ndarray,
    x0: np.ndarray,
    T: float,
    M: int,
    rng: np.random.Generator,
    jump_incr: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Batched Euler-Maruyama: states (N, M+1, d) and the Wiener increments used."""
    x0 = np.atleast_2d(np.asarray(x0, dtype=float))
    n_paths, d = x0.shape
    delta = T / M
    dw = rng.normal(scale=math.sqrt(delta), size=(n_paths, M, model.dim_w))
    states = np.empty((n_paths, M + 1, d))
    states[:, 0] = x0
    x = x0
    for j in range(M):
        b = model.drift(theta, x)
        if model.diffusion_diag is not None:
            s = model.diffusion_diag(theta, x)
            if np.any(s <= 0.0):
                raise DiffusionDegeneracyError(
                    f"nonpositive diffusion diagonal in {model.name!r}"
                )
            noise = s * dw[:, j]
        else:
            sig = model.diffusion(theta, x)
            noise = np.einsum("nij,nj->ni", sig, dw[:, j])
        x = x + b * delta + noise
        if jump_incr is not None:
            x = x + jump_incr[:, j]
        states[:, j + 1] = x
    return states, dw


def simulate_path(
    model: SdeModel,
    theta: np.ndarray,
    x0: np.ndarray,
    T: float,
    M: int,
    rng: np.random.Generator,
    jumps: JumpSet | None | str = "sample",
    cap: int = DEFAULT_JUMP_CAP,
) -> PathSegment:
    """Simulate the (jump) SDE on a uniform grid of M steps over [0, T].

    `jumps` may be a JumpSet to impose, None to suppress jumps, or "sample"
    to draw them from the model when it has a jump component.
    """
    if M < 1:
        raise ConfigError("at least one grid step is required")
    theta = np.asarray(theta, dtype=float)
    if isinstance(jumps, str):
        jumps = simulate_jumps(model, theta, T, rng, cap=cap) if model.has_jumps else None
    incr = (
        jump_increments(jumps, T, M, model.dim_x)[None]
        if jumps is not None and jumps.kappa
        else None
    )
    start = np.asarray(x0, dtype=float).reshape(1, -1)
    states, _ = euler_paths(model, theta, start, T, M, rng, incr)
    times = np.linspace(0.0, T, M + 1)
    return PathSegment(times=times, states=states[0], jumps=jumps)


def _gauss_loglik(y, mean, var):
    return -0.5 * (np.log(2.0 * np.pi * var) + (np.asarray(y) - mean) ** 2 / var)


def _endpoint_obs(obs_sd: float):
    r = obs_sd * obs_sd

    def obs_logdensity(theta, y, y_prev, segment: PathSegment) -> float:
        return float(_gauss_loglik(y, segment.states[-1, 0], r))

    def obs_loglik_vec(theta, y, y_prev, x_end, stats, delta):
        return _gauss_loglik(y, x_end[..., 0], r)

    def obs0_loglik_vec(theta, y0, x0):
        return _gauss_loglik(y0, x0[..., 0], r)

    def obs_sampler(theta, y_prev, segment: PathSegment, rng):
        return float(segment.states[-1, 0] + obs_sd * rng.normal())

    return obs_logdensity, obs_loglik_vec, obs0_loglik_vec, obs_sampler


def make_ou_model(
    lam: float = 0.0, zeta: float = 0.5, obs_sd: float = 0.1
) -> SdeModel:
    """Mean-reverting linear SDE, optionally with uniform jumps.

    dX = th1 (th2 - X) dt + th3 dW + dJ, observed as y = X + N(0, obs_sd^2).
    The jump intensity `lam` and size bound `zeta` are fixed at construction
    and are not part of theta. With lam = 0 the model is a plain diffusion.
    """

    def drift(theta, x):
        return theta[0] * (theta[1] - x)

    def diffusion_diag(theta, x):
        return np.broadcast_to(theta[2], np.shape(x)).copy()

    def diffusion(theta, x):
        return diffusion_diag(theta, x)[..., None] * np.eye(1)

    obs, obs_vec, obs0_vec, obs_samp = _endpoint_obs(obs_sd)

    jump_kw: dict = {}
    if lam > 0.0:
        if zeta <= 0.0:
            raise ConfigError("jump size bound must be positive")

        def jump_intensity(theta, t):
            return lam

        def jump_size_logdensity(theta, xi):
            xi = np.asarray(xi, dtype=float)
            inside = np.abs(xi[..., 0]) <= zeta
            return np.where(inside, -np.log(2.0 * zeta), -np.inf)

        def jump_size_sampler(theta, rng):
            return np.array([rng.uniform(-zeta, zeta)])

        jump_kw = dict(
            jump_intensity=jump_intensity,
            jump_size_logdensity=jump_size_logdensity,
            jump_size_sampler=jump_size_sampler,
        )

    return SdeModel(
        name="ou_jump" if lam > 0.0 else "ou",
        dim_x=1,
        dim_w=1,
        dim_theta=3,
        drift=drift,
        diffusion=diffusion,
        diffusion_diag=diffusion_diag,
        constant_diffusion=True,
        obs_logdensity=obs,
        obs_loglik_vec=obs_vec,
        obs0_loglik_vec=obs0_vec,
        obs_sampler=obs_samp,
        param_domain=("positive", "unconstrained", "positive"),
        init_state=lambda theta, y0: np.zeros(1),
        analytic_pathspace_score=_ou_pathspace_score,
        **jump_kw,
    )


def make_periodic_model(obs_sd: float = 0.1) -> SdeModel:
    """dX = sin(X - th1) dt + th2 dW with th1 on the circle [0, 2pi)."""

    def drift(theta, x):
        return np.sin(x - theta[0])

    def diffusion_diag(theta, x):
        return np.broadcast_to(theta[1], np.shape(x)).copy()

    def diffusion(theta, x):
        return diffusion_diag(theta, x)[..., None] * np.eye(1)

    obs, obs_vec, obs0_vec, obs_samp = _endpoint_obs(obs_sd)
    return SdeModel(
        name="periodic",
        dim_x=1,
        dim_w=1,
        dim_theta=2,
        drift=drift,
        diffusion=diffusion,
        diffusion_diag=diffusion_diag,
        constant_diffusion=True,
        obs_logdensity=obs,
        obs_loglik_vec=obs_vec,
        obs0_loglik_vec=obs0_vec,
        obs_sampler=obs_samp,
        param_domain=(("wrap", 0.0, 2.0 * np.pi), "positive"),
        init_state=lambda theta, y0: np.zeros(1),
    )


def make_heston_model(vol_floor: float = 1e-10) -> SdeModel:
    """Log-price U with CIR volatility X, the price observed without noise.

    dU = (th4 - X/2) dt + sqrt(X) dB,  dX = th1 (th2 - X) dt + th3 sqrt(X) dW,
    with independent Brownian motions. y_i is U at time t_i exactly, so the
    observation density is the Gaussian law of the price increment given the
    volatility path: mean y_prev + th4*Delta - I/2 and variance I, where I is
    the left-Riemann integral of X over the interval. The CIR coordinate is
    floored inside every square root (full truncation).
    """

    def drift(theta, x):
        u_drift = theta[3] - 0.5 * x[..., 1]
        x_drift = theta[0] * (theta[1] - x[..., 1])
        return np.stack([u_drift, x_drift], axis=-1)

    def diffusion_diag(theta, x):
        root = np.sqrt(np.maximum(x[..., 1], vol_floor))
        return np.stack([root, theta[2] * root], axis=-1)

    def diffusion(theta, x):
        diag = diffusion_diag(theta, x)
        return diag[..., :, None] * np.eye(2)

    def obs_logdensity(theta, y, y_prev, segment: PathSegment) -> float:
        integral = float(np.sum(segment.states[:-1, 1]) * segment.delta)
        integral = max(integral, vol_floor)
        mean = y_prev + theta[3] * segment.horizon - 0.5 * integral
        return float(_gauss_loglik(y, mean, integral))

    def obs_loglik_vec(theta, y, y_prev, x_end, stats, delta):
        integral = np.maximum(stats, vol_floor)
        mean = y_prev + theta[3] * delta - 0.5 * integral
        return _gauss_loglik(y, mean, integral)

    def obs0_loglik_vec(theta, y0, x0):
        return np.zeros(x0.shape[:-1])

    def obs_sampler(theta, y_prev, segment: PathSegment, rng) -> float:
        integral = float(np.sum(segment.states[:-1, 1]) * segment.delta)
        integral = max(integral, vol_floor)
        mean = y_prev + theta[3] * segment.horizon - 0.5 * integral
        return float(mean + np.sqrt(integral) * rng.normal())

    def init_state(theta, y0):
        return np.array([y0, theta[1]])

    return SdeModel(
        name="heston",
        dim_x=2,
        dim_w=2,
        dim_theta=4,
        drift=drift,
        diffusion=diffusion,
        diffusion_diag=diffusion_diag,
        constant_diffusion=False,
        obs_logdensity=obs_logdensity,
        obs_loglik_vec=obs_loglik_vec,
        obs0_loglik_vec=obs0_loglik_vec,
        obs_sampler=obs_sampler,
        obs_stat_coord=1,
        obs_theta_free=False,
        param_domain=("positive",) * 4,
        init_state=init_state,
        init_theta_dependent=True,
        vol_floor=vol_floor,
        feller_check=True,
    )


def feller_ok(theta: np.ndarray) -> bool:
    """CIR boundary non-attainment condition 2 th1 th2 > th3^2."""
    return bool(2.0 * theta[0] * theta[1] > theta[2] * theta[2])


def make_rates_model(
    family: int, obs_sd: float = 0.1, vol_floor: float = 1e-10
) -> SdeModel:
    """Nested short-rate drift families with square-root diffusion.

    Family 1: b = th0 + th1 x            (theta = (th0, th1, sigma))
    Family 2: adds th2^2 x^2             (theta = (th0, th1, th2, sigma))
    Family 3: adds th3 / x               (theta = (th0, th1, th2, th3, sigma))

    The diffusion is sigma * sqrt(x) in each case; x is floored inside the
    square root and the reciprocal. Observations are y = x + N(0, obs_sd^2).
    """
    if family not in (1, 2, 3):
        raise ConfigError("rates family must be 1, 2 or 3")
    dim_theta = {1: 3, 2: 4, 3: 5}[family]

    def drift(theta, x):
        v = x[..., 0]
        out = theta[0] + theta[1] * v
        if family >= 2:
            out = out + theta[2] ** 2 * v * v
        if family == 3:
            out = out + theta[3] / np.maximum(v, 1e-4)
        return out[..., None]

    def diffusion_diag(theta, x):
        return theta[dim_theta - 1] * np.sqrt(
            np.maximum(x, vol_floor)
        )

    def diffusion(theta, x):
        return diffusion_diag(theta, x)[..., None] * np.eye(1)

    obs, obs_vec, obs0_vec, obs_samp = _endpoint_obs(obs_sd)
    return SdeModel(
        name=f"rates_m{family}",
        dim_x=1,
        dim_w=1,
        dim_theta=dim_theta,
        drift=drift,
        diffusion=diffusion,
        diffusion_diag=diffusion_diag,
        constant_diffusion=False,
        obs_logdensity=obs,
        obs_loglik_vec=obs_vec,
        obs0_loglik_vec=obs0_vec,
        obs_sampler=obs_samp,
        param_domain=("unconstrained",) * (dim_theta - 1) + ("positive",),
        init_state=lambda theta, y0: np.atleast_1d(np.asarray(y0, dtype=float))[:1],
        vol_floor=vol_floor,
    )


def _ou_pathspace_score(theta, x0, xprime, z, T):
    """Closed-form gradient of the mean-reverting model's pathspace density.

    The bridge transform carries no model drift, so at frozen noise the
    reconstructed path moves with th3 only; its sensitivity obeys
    D_{j+1} = D_j (1 - delta/(T - t_j)) + z_j with D_M = 0 at the pinned
    endpoint. Differentiating the two drift integrals (with their 1/th3^2
    prefactor) plus the Gaussian endpoint factor gives the gradient; the
    constant diffusion kills the remaining terms. Batched over leading axes
    of x0/xprime/z; z has shape (..., M).
    """
    th1, th2, th3 = float(theta[0]), float(theta[1]), float(theta[2])
    x0 = np.asarray(x0, dtype=float)
    xprime = np.asarray(xprime, dtype=float)
    z = np.asarray(z, dtype=float)
    m_steps = z.shape[-1]
    delta = T / m_steps
    inv_var = 1.0 / (th3 * th3)
    x = np.broadcast_to(x0, xprime.shape).astype(float)
    d_vol = np.zeros_like(x)  # dX_j/dth3 at frozen noise
    g1 = np.zeros_like(x)
    g2 = np.zeros_like(x)
    g3 = np.zeros_like(x)
    sum_b_dx = np.zeros_like(x)
    sum_b = np.zeros_like(x)
    sum_b_sq = np.zeros_like(x)
    for j in range(m_steps):
        b = th1 * (th2 - x)
        if j < m_steps - 1:
            shrink = 1.0 - delta / (T - j * delta)
            x_next = x * shrink + (xprime * (1.0 - shrink)) + th3 * z[..., j]
            d_next = d_vol * shrink + z[..., j]
        else:
            x_next = np.broadcast_to(xprime, x.shape)
            d_next = np.zeros_like(x)
        dx = x_next - x
        sum_b_dx += b * dx
        sum_b += b
        sum_b_sq += b * b
        g1 += (th2 - x) * (dx - delta * b)
        g3 += -th1 * d_vol * dx + b * (d_next - d_vol) + delta * th1 * b * d_vol
        x = x_next
        d_vol = d_next
    g2 = th1 * ((xprime - x0) - delta * sum_b)
    grad = np.stack([g1, g2, g3], axis=-1) * inv_var
    # d/dth3 of the two integrals through the 1/th3^2 factor
    total = sum_b_dx - 0.5 * delta * sum_b_sq
    grad[..., 2] += -2.0 / th3 * inv_var * total
    # Gaussian endpoint factor log N(x'; x0, T th3^2)
    grad[..., 2] += (xprime - x0) ** 2 / (T * th3 ** 3) - 1.0 / th3
    return grad


def builtin_models() -> dict[str, Callable[..., SdeModel]]:
    """Catalog of built-in model factories keyed by CLI name."""
    return {
        "ou": make_ou_model,
        "ou_jump": lambda lam=0.5, zeta=0.5, obs_sd=0.1: make_ou_model(
            lam=lam, zeta=zeta, obs_sd=obs_sd
        ),
        "periodic": make_periodic_model,
        "heston": make_heston_model,
        "rates_m1": lambda obs_sd=0.1: make_rates_model(1, obs_sd=obs_sd),
        "rates_m2": lambda obs_sd=0.1: make_rates_model(2, obs_sd=obs_sd),
        "rates_m3": lambda obs_sd=0.1: make_rates_model(3, obs_sd=obs_sd),
    }


def make_model(name: str, **kwargs) -> SdeModel:
    catalog = builtin_models()
    if name not in catalog:
        raise ConfigError(
            f"unknown model {name!r}; available: {', '.join(sorted(catalog))}"
        )
    return catalog[name](**kwargs)
