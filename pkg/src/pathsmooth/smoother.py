"""Forward-only online particle smoothing for additive path functionals.

One filter step does four things: resample ancestors, propagate each chosen
ancestor blindly through the model, reweight by the observation density,
and refresh the running per-particle statistics T with an O(N^2) exchange.
The exchange is what makes the smoother forward-only: every new augmented
transition is re-rooted at every previous particle, and the statistic of
particle i becomes a mixture over previous particles j with weights
proportional to W_j times the transition density of the re-rooted
augmentation. Because an augmentation stores noise rather than states, the
re-rooting is well defined and the densities stay comparable across grids.

The estimate after n observations is S_hat = sum_i W_i T_i, which tracks
the smoothed expectation of an additive functional without ever revisiting
old observations. A discrete-time variant with user-supplied transition
density and sampler serves as the classical baseline.

All weights are handled in log space. Propagation and the exchange kernel
are vectorized over particles and pairs; with the multinomial default the
resampling happens every step, while systematic and stratified schemes and
an effective-sample-size gate are available for ablations.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .bridge import AugmentedTransition, pathspace_sweep
from .errors import (
    ConfigError,
    DegenerateInitializationError,
    DiffusionDegeneracyError,
    NumericalDivergenceError,
    ParticleCollapseError,
)
from .jump_augment import construct_one_sample
from .sde_core import (
    DEFAULT_JUMP_CAP,
    JumpSet,
    NoisePath,
    SdeModel,
    euler_paths,
    jump_increments,
    simulate_jumps,
)

CONSTRUCTS = ("continuous", "construct_one", "construct_two")


def _logsumexp(a, axis=-1):
    amax = np.max(a, axis=axis, keepdims=True)
    safe = np.where(np.isfinite(amax), amax, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(a - safe), axis=axis, keepdims=True)) + safe
    return np.squeeze(out, axis=axis)


@dataclass(frozen=True)
class AdditiveFunctional:
    """An additive functional of the augmented path, S = sum_k s_k.

    `s0(theta, x0)` maps initial states (N, d) to (N, dim). `s_k(theta, k,
    x_prev, aug)` evaluates the k-th increment of one augmented transition
    re-rooted at each row of x_prev (J, d), returning (J, dim); in the
    discrete baseline `aug` is the new state vector instead. `s_k_pairs` is
    an optional fast path: given the whole batch of new transitions it
    returns all increments at once as (I, J, dim).
    """

    dim: int
    s0: Callable[[np.ndarray, np.ndarray], np.ndarray]
    s_k: Callable
    s_k_pairs: Callable | None = None


@dataclass(frozen=True)
class PairBatch:
    """One filter step's new transitions, stacked for pairwise kernels.

    `x_prime` stacks the new endpoints (I, d) for every variant. The
    uniform-grid variants also stack the noise as `z` (I, M, d), with
    `jump_incr` present for the jump-adapted construct; the segment-encoded
    construct is ragged, so noise-hungry consumers fall back to `augs`.
    """

    variant: str
    horizon: float
    x_prime: np.ndarray | None
    z: np.ndarray | None
    jump_incr: np.ndarray | None
    augs: tuple


@dataclass(frozen=True)
class Particle:
    """One particle: augmentation (or raw state at n = 0), endpoint, weight, T."""

    aug: object
    x: np.ndarray
    log_weight: float
    t_value: np.ndarray


@dataclass(frozen=True)
class FilterState:
    """Particle filter state after n observations.

    Stored as arrays (endpoints, log weights, T values) for vector work;
    `particles` materializes the per-particle view. `theta` records the
    parameter the state was last updated with, and `y_prev` the most recent
    observation, both of which the next step needs.
    """

    n: int
    xs: np.ndarray
    log_weights: np.ndarray
    t_values: np.ndarray
    s_hat: np.ndarray
    loglik: float
    theta: np.ndarray
    functional: AdditiveFunctional
    y_prev: object
    augs: tuple | None = None

    @property
    def n_particles(self) -> int:
        return int(self.xs.shape[0])

    @property
    def particles(self) -> list[Particle]:
        augs = self.augs if self.augs is not None else tuple(self.xs)
        return [
            Particle(
                aug=augs[i],
                x=self.xs[i],
                log_weight=float(self.log_weights[i]),
                t_value=self.t_values[i],
            )
            for i in range(self.n_particles)
        ]


def init(
    model: SdeModel,
    theta: np.ndarray,
    prior: Callable[[np.random.Generator, int], np.ndarray],
    y0,
    functional: AdditiveFunctional,
    n_particles: int,
    rng: np.random.Generator,
) -> FilterState:
    """Draw the initial particle cloud and weight it by the first observation.

    `prior(rng, n)` must return an (n, dim_x) sample. Passing y0 = None
    skips the initial reweighting (uniform weights), for models whose first
    observation is consumed by the state initialization instead.
    """
    if n_particles < 2:
        raise ConfigError("at least two particles are required")
    theta = np.asarray(theta, dtype=float)
    x0 = np.asarray(prior(rng, n_particles), dtype=float)
    if x0.ndim == 1:
        x0 = x0[:, None]
    if x0.shape != (n_particles, model.dim_x):
        raise ConfigError(
            f"prior returned shape {x0.shape}, expected {(n_particles, model.dim_x)}"
        )
    if y0 is None:
        log_g = np.zeros(n_particles)
    else:
        if model.obs0_loglik_vec is None:
            raise ConfigError(
                f"model {model.name!r} has no initial observation density"
            )
        log_g = np.asarray(model.obs0_loglik_vec(theta, y0, x0), dtype=float)
    norm = _logsumexp(log_g)
    if not np.isfinite(norm):
        raise DegenerateInitializationError(
            "every initial particle has zero observation likelihood"
        )
    log_w = log_g - norm
    t0 = np.asarray(functional.s0(theta, x0), dtype=float)
    if t0.shape != (n_particles, functional.dim):
        raise ConfigError("s0 must return one vector of length dim per particle")
    weights = np.exp(log_w)
    return FilterState(
        n=0,
        xs=x0,
        log_weights=log_w,
        t_values=t0,
        s_hat=weights @ t0,
        loglik=float(norm - np.log(n_particles)),
        theta=theta,
        functional=functional,
        y_prev=y0,
        augs=None,
    )


def resample(
    weights: np.ndarray,
    scheme: str = "multinomial",
    ess_threshold: float | None = None,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Draw ancestor indices with E[#offspring of i] = N * W_i.

    With an ESS threshold the identity permutation is returned whenever the
    effective sample size is at least threshold * N.
    """
    w = np.asarray(weights, dtype=float)
    n = w.size
    if abs(w.sum() - 1.0) > 1e-9:
        raise ConfigError("resampling expects normalized weights")
    if ess_threshold is not None:
        ess = 1.0 / np.sum(w * w)
        if ess >= ess_threshold * n:
            return np.arange(n)
    if scheme == "multinomial":
        return rng.choice(n, size=n, p=w)
    if scheme == "systematic":
        points = (rng.uniform() + np.arange(n)) / n
    elif scheme == "stratified":
        points = (rng.uniform(size=n) + np.arange(n)) / n
    else:
        raise ConfigError(f"unknown resampling scheme {scheme!r}")
    return np.minimum(np.searchsorted(np.cumsum(w), points), n - 1)


def _encode_guided_noise(model, theta, states, T):
    """Batched inverse of the drift-free guided recursion: states -> Z."""
    n_rows, m_plus_1, dim = states.shape
    m_steps = m_plus_1 - 1
    delta = T / m_steps
    x_prime = states[:, -1]
    z = np.empty((n_rows, m_steps, dim))
    for j in range(m_steps):
        cur = states[:, j]
        if j < m_steps - 1:
            residual = states[:, j + 1] - cur - (x_prime - cur) / (T - j * delta) * delta
        else:
            residual = x_prime - cur - model.drift(theta, cur) * delta
        if model.diffusion_diag is not None:
            s = model.diffusion_diag(theta, cur)
            if np.any(s <= 0.0):
                raise DiffusionDegeneracyError("nonpositive diffusion diagonal")
            z[:, j] = residual / s
        else:
            z[:, j] = np.linalg.solve(model.diffusion(theta, cur), residual)
    return z


def _encode_jump_guided_noise(model, theta, states, incr, T):
    """Batched inverse of the jump-adapted guided recursion: states -> Z."""
    n_rows, m_plus_1, dim = states.shape
    m_steps = m_plus_1 - 1
    delta = T / m_steps
    x_prime = states[:, -1]
    remaining = incr.sum(axis=1)
    z = np.empty((n_rows, m_steps, dim))
    for j in range(m_steps):
        cur = states[:, j]
        b = model.drift(theta, cur)
        if j < m_steps - 1:
            guide = (x_prime - cur - remaining) / (T - j * delta)
            residual = states[:, j + 1] - cur - (b + guide) * delta - incr[:, j]
        else:
            residual = x_prime - cur - b * delta - incr[:, j]
        if model.diffusion_diag is not None:
            s = model.diffusion_diag(theta, cur)
            if np.any(s <= 0.0):
                raise DiffusionDegeneracyError("nonpositive diffusion diagonal")
            z[:, j] = residual / s
        else:
            z[:, j] = np.linalg.solve(model.diffusion(theta, cur), residual)
        remaining = remaining - incr[:, j]
    return z


def _propagate(model, theta, roots, horizon, m_steps, rng, selector, cap):
    """Blind propagation of every root, returning endpoints, augs and batch."""
    n = roots.shape[0]
    if selector == "construct_one":
        augs = []
        for i in range(n):
            augs.append(
                construct_one_sample(model, theta, roots[i], horizon, m_steps, rng, cap=cap)
            )
        x_new = np.stack([a.x_prime for a in augs])
        stats = None
        if model.obs_stat_coord is not None:
            # left-Riemann integral of the observed coordinate, rebuilt
            # segment by segment from the stored noise
            raise ConfigError(
                "segment-encoded propagation does not support integral observations"
            )
        batch = PairBatch(
            variant="construct_one",
            horizon=horizon,
            x_prime=x_new,
            z=None,
            jump_incr=None,
            augs=tuple(augs),
        )
        return x_new, stats, batch

    if selector == "construct_two":
        jumps = [simulate_jumps(model, theta, horizon, rng, cap=cap) for _ in range(n)]
        incr = np.stack(
            [jump_increments(j, horizon, m_steps, model.dim_x) for j in jumps]
        )
    else:
        jumps = None
        incr = None
    states, _ = euler_paths(model, theta, roots, horizon, m_steps, rng, incr)
    x_new = states[:, -1].copy()
    if selector == "construct_two":
        z = _encode_jump_guided_noise(model, theta, states, incr, horizon)
        augs = tuple(
            AugmentedTransition(
                variant="construct_two",
                x_prime=x_new[i],
                z=NoisePath(z[i], horizon),
                jumps=jumps[i],
            )
            for i in range(n)
        )
    else:
        z = _encode_guided_noise(model, theta, states, horizon)
        augs = tuple(
            AugmentedTransition(
                variant="continuous", x_prime=x_new[i], z=NoisePath(z[i], horizon)
            )
            for i in range(n)
        )
    stats = None
    if model.obs_stat_coord is not None:
        delta = horizon / m_steps
        stats = delta * states[:, :-1, model.obs_stat_coord].sum(axis=1)
    batch = PairBatch(
        variant=selector,
        horizon=horizon,
        x_prime=x_new,
        z=z,
        jump_incr=incr,
        augs=augs,
    )
    return x_new, stats, batch


def _pairwise_logdensity(model, theta, x_prev, batch):
    """Log transition density of every new augmentation at every old root.

    Returns (I, J). Terms constant across roots (jump records, the segment
    tails of the ragged construct) are dropped: the exchange weights are
    normalized per row, so only the root-dependent factors matter.
    """
    n_prev = x_prev.shape[0]
    if batch.variant == "construct_one":
        rows = []
        for aug in batch.augs:
            first = aug.segment_noises[0]
            end = np.broadcast_to(aug.pre_jump_states[0], (n_prev, x_prev.shape[1]))
            z = np.broadcast_to(
                first.increments, (n_prev,) + first.increments.shape
            )
            acc, _ = pathspace_sweep(
                model, theta[None], x_prev, end, z, first.horizon
            )
            rows.append(acc[0])
        return np.stack(rows)
    n_new = batch.x_prime.shape[0]
    x0 = np.tile(x_prev, (n_new, 1))
    xp = np.repeat(batch.x_prime, n_prev, axis=0)
    z = np.repeat(batch.z, n_prev, axis=0)
    incr = (
        np.repeat(batch.jump_incr, n_prev, axis=0)
        if batch.jump_incr is not None
        else None
    )
    acc, _ = pathspace_sweep(
        model, theta[None], x0, xp, z, batch.horizon, jump_incr=incr
    )
    return acc[0].reshape(n_new, n_prev)


def _exchange_weights(log_dens, log_w_prev, step_index):
    """Row-normalized exchange weights from log densities and old weights."""
    bad = np.isnan(log_dens) | np.isposinf(log_dens)
    if np.any(bad):
        i, j = np.argwhere(bad)[0]
        raise NumericalDivergenceError(
            f"non-finite transition density for pair (new={i}, old={j}) "
            f"at step {step_index}"
        )
    logits = log_w_prev[None, :] + log_dens
    norms = _logsumexp(logits, axis=1)
    if np.any(~np.isfinite(norms)):
        i = int(np.argmin(np.isfinite(norms)))
        raise NumericalDivergenceError(
            f"exchange weights of particle {i} vanished at step {step_index}"
        )
    return np.exp(logits - norms[:, None])


def _refresh_t_values(functional, theta, step_index, x_prev, t_prev, batch, omega):
    """T_i = sum_j omega_ij (T_j + s_k(x_j, aug_i)), vectorized when possible."""
    if functional.s_k_pairs is not None:
        incs = np.asarray(
            functional.s_k_pairs(theta, step_index, x_prev, batch), dtype=float
        )
        return omega @ t_prev + np.einsum("ij,ijk->ik", omega, incs)
    t_new = np.empty((omega.shape[0], functional.dim))
    for i, aug in enumerate(batch.augs):
        incs = np.asarray(
            functional.s_k(theta, step_index, x_prev, aug), dtype=float
        )
        t_new[i] = omega[i] @ (t_prev + incs)
    return t_new


def step(
    state: FilterState,
    model: SdeModel,
    theta: np.ndarray,
    y_n,
    selector: str = "continuous",
    m_steps: int = 20,
    rng: np.random.Generator | None = None,
    *,
    horizon: float = 1.0,
    scheme: str = "multinomial",
    ess_threshold: float | None = None,
    cap: int = DEFAULT_JUMP_CAP,
) -> FilterState:
    """Advance the smoother by one observation.

    Ancestors are drawn by `scheme` (every step unless an ESS threshold is
    given), propagated blindly over `horizon` with `m_steps` Euler steps,
    weighted by the observation density of y_n, and the running statistics
    are refreshed with the pairwise exchange against the full previous
    cloud. theta is frozen for the whole step.
    """
    if selector not in CONSTRUCTS:
        raise ConfigError(f"unknown construct selector {selector!r}")
    if selector == "continuous" and model.has_jumps:
        raise ConfigError(
            "the continuous construct cannot represent a model with jumps"
        )
    theta = np.asarray(theta, dtype=float)
    n_particles = state.n_particles
    step_index = state.n + 1
    weights = np.exp(state.log_weights)

    if ess_threshold is not None and 1.0 / np.sum(weights * weights) >= (
        ess_threshold * n_particles
    ):
        ancestors = np.arange(n_particles)
        log_carried = state.log_weights
    else:
        ancestors = resample(weights, scheme, None, rng)
        log_carried = np.full(n_particles, -np.log(n_particles))

    roots = state.xs[ancestors]
    x_new, stats, batch = _propagate(
        model, theta, roots, horizon, m_steps, rng, selector, cap
    )

    if model.obs_loglik_vec is None:
        raise ConfigError(f"model {model.name!r} has no vectorized observation density")
    log_g = np.asarray(
        model.obs_loglik_vec(theta, y_n, state.y_prev, x_new, stats, horizon),
        dtype=float,
    )
    unnorm = log_carried + log_g
    increment = _logsumexp(unnorm)
    if not np.isfinite(increment):
        raise ParticleCollapseError(step_index)
    log_w_new = unnorm - increment

    log_dens = _pairwise_logdensity(model, theta, state.xs, batch)
    omega = _exchange_weights(log_dens, state.log_weights, step_index)
    t_new = _refresh_t_values(
        state.functional, theta, step_index, state.xs, state.t_values, batch, omega
    )

    w_new = np.exp(log_w_new)
    return FilterState(
        n=step_index,
        xs=x_new,
        log_weights=log_w_new,
        t_values=t_new,
        s_hat=w_new @ t_new,
        loglik=state.loglik + float(increment),
        theta=theta,
        functional=state.functional,
        y_prev=y_n,
        augs=batch.augs,
    )


def discrete_step(
    state: FilterState,
    f_logdensity: Callable,
    g_logdensity: Callable,
    sampler: Callable,
    y_n,
    rng: np.random.Generator,
    *,
    scheme: str = "multinomial",
    ess_threshold: float | None = None,
) -> FilterState:
    """One step of the discrete-time baseline smoother.

    Identical structure to `step`, with the pathspace density replaced by a
    user transition density: `f_logdensity(theta, x_prev (J, d), x_new
    (I, d)) -> (I, J)`, `g_logdensity(theta, y, y_prev, x_new) -> (I,)`,
    `sampler(theta, roots, rng) -> (N, d)`. The functional's s_k receives
    the new state vector in place of an augmentation. theta is taken from
    the state, so callables that close over their own parameter can ignore
    it.
    """
    theta = state.theta
    n_particles = state.n_particles
    step_index = state.n + 1
    weights = np.exp(state.log_weights)

    if ess_threshold is not None and 1.0 / np.sum(weights * weights) >= (
        ess_threshold * n_particles
    ):
        ancestors = np.arange(n_particles)
        log_carried = state.log_weights
    else:
        ancestors = resample(weights, scheme, None, rng)
        log_carried = np.full(n_particles, -np.log(n_particles))

    x_new = np.asarray(sampler(theta, state.xs[ancestors], rng), dtype=float)
    if x_new.ndim == 1:
        x_new = x_new[:, None]
    log_g = np.asarray(g_logdensity(theta, y_n, state.y_prev, x_new), dtype=float)
    unnorm = log_carried + log_g
    increment = _logsumexp(unnorm)
    if not np.isfinite(increment):
        raise ParticleCollapseError(step_index)
    log_w_new = unnorm - increment

    log_dens = np.asarray(f_logdensity(theta, state.xs, x_new), dtype=float)
    omega = _exchange_weights(log_dens, state.log_weights, step_index)

    functional = state.functional
    if functional.s_k_pairs is not None:
        incs = np.asarray(
            functional.s_k_pairs(theta, step_index, state.xs, x_new), dtype=float
        )
        t_new = omega @ state.t_values + np.einsum("ij,ijk->ik", omega, incs)
    else:
        t_new = np.empty((n_particles, functional.dim))
        for i in range(n_particles):
            incs = np.asarray(
                functional.s_k(theta, step_index, state.xs, x_new[i]), dtype=float
            )
            t_new[i] = omega[i] @ (state.t_values + incs)

    w_new = np.exp(log_w_new)
    return FilterState(
        n=step_index,
        xs=x_new,
        log_weights=log_w_new,
        t_values=t_new,
        s_hat=w_new @ t_new,
        loglik=state.loglik + float(increment),
        theta=theta,
        functional=functional,
        y_prev=y_n,
        augs=None,
    )
