"""Noise augmentations for transitions of diffusions with compound-Poisson jumps.

Two interchangeable schemes represent one transition over [0, T] as an
endpoint plus auxiliary randomness with a tractable joint density.

Construct one cuts the interval at the exact jump times and encodes each
inter-jump stretch as its own guided bridge: the augmentation stores the
jump record, the pre-jump endpoint of every segment, and one noise path per
segment. Its density is the jump-record factor times the product of the
per-segment pathspace densities, so it inherits the continuous machinery
wholesale but the grid layout depends on the realized jump times.

Construct two stays on a single uniform grid. The path is rebuilt by a
guided Euler recursion that keeps the model drift, adds the jump increments
where they land, and aims the guiding term at the endpoint minus the jumps
still to come; its density is the jump-record factor times the ratio of the
unconditioned to the guided Euler joint densities (the final step
contributes its unconditioned Gaussian factor since the endpoint is pinned
rather than proposed). Fixed layout, one extra per-step term.

Both densities are taken with respect to the same reference: a unit-rate
Poisson jump record with Lebesgue sizes, tensored with Lebesgue measure for
the endpoint and Wiener measure for the noise. Models without a jump
component are treated as having no jump factor at all, which makes both
constructs collapse to the plain continuous augmentation.
"""

from __future__ import annotations

import numpy as np

from .bridge import (
    AugmentedTransition,
    bridge_inverse_map,
    log_pathspace_density,
    pathspace_sweep,
)
from .errors import ConfigError, DiffusionDegeneracyError
from .sde_core import (
    DEFAULT_JUMP_CAP,
    JumpSet,
    NoisePath,
    PathSegment,
    SdeModel,
    jump_increments,
    simulate_jumps,
    simulate_path,
)


def _empty_jumps(dim_x: int) -> JumpSet:
    return JumpSet(times=np.empty(0), sizes=np.empty((0, dim_x)))


def _intensity_integral(model: SdeModel, theta: np.ndarray, T: float) -> float:
    """Integral of the jump intensity over [0, T].

    Constant intensities integrate exactly; anything else goes through a
    fixed 129-point trapezoid, so the bookkeeping never depends on theta.
    """
    probe_t = np.linspace(0.0, T, 33)
    probe = np.array([float(model.jump_intensity(theta, t)) for t in probe_t])
    if np.any(probe < 0.0):
        raise ConfigError("jump intensity must be nonnegative")
    if np.ptp(probe) <= 1e-12 * max(probe.max(), 1.0):
        return float(probe[0] * T)
    fine_t = np.linspace(0.0, T, 129)
    fine = [float(model.jump_intensity(theta, t)) for t in fine_t]
    return float(np.trapezoid(fine, fine_t))


def jump_record_logdensity(
    model: SdeModel, theta: np.ndarray, jumps: JumpSet | None, T: float
) -> float:
    """Log density of a jump record against the unit-rate Poisson reference.

    Reads (T - integral of lambda) + sum over jumps of log lambda(tau_i)
    + log h(b_i). A model without a jump component contributes nothing, and
    presenting it with a nonempty record is a configuration error.
    """
    theta = np.asarray(theta, dtype=float)
    kappa = 0 if jumps is None else jumps.kappa
    if not model.has_jumps:
        if kappa:
            raise ConfigError(
                f"jump record offered to model {model.name!r} without a jump component"
            )
        return 0.0
    total = T - _intensity_integral(model, theta, T)
    if kappa == 0:
        return float(total)
    lam = np.array([float(model.jump_intensity(theta, t)) for t in jumps.times])
    with np.errstate(divide="ignore"):
        total += float(np.sum(np.log(lam)))
    total += float(np.sum(model.jump_size_logdensity(theta, jumps.sizes)))
    return float(total)


def segment_grid_sizes(m_total: int, jump_times: np.ndarray, T: float) -> list[int]:
    """Allocate a budget of m_total Euler steps across the inter-jump segments.

    Each segment gets a share proportional to its length, rounded, floored
    at two steps so every segment can still be bridged.
    """
    if m_total < 2:
        raise ConfigError("bridging requires at least two grid steps")
    bounds = np.concatenate(([0.0], np.asarray(jump_times, dtype=float), [T]))
    lengths = np.diff(bounds)
    return [max(2, int(round(m_total * length / T))) for length in lengths]


def construct_one_sample(
    model: SdeModel,
    theta: np.ndarray,
    x: np.ndarray,
    T: float,
    m_total: int,
    rng: np.random.Generator,
    cap: int = DEFAULT_JUMP_CAP,
) -> AugmentedTransition:
    """Draw a transition from x and encode it segment-by-segment.

    Jumps are drawn first; each inter-jump stretch is then simulated on its
    own uniform grid and inverted back to the noise that drove it, so the
    stored noise paths rebuild the very states that were simulated. The
    recorded pre-jump endpoints chain the segments: segment i + 1 starts at
    its predecessor's endpoint plus the i-th jump size.
    """
    theta = np.asarray(theta, dtype=float)
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if model.has_jumps:
        jumps = simulate_jumps(model, theta, T, rng, cap=cap)
    else:
        jumps = _empty_jumps(model.dim_x)
    bounds = np.concatenate(([0.0], jumps.times, [T]))
    grids = segment_grid_sizes(m_total, jumps.times, T)
    pre_jump = np.empty((jumps.kappa + 1, model.dim_x))
    noises = []
    start = x
    for i, m_i in enumerate(grids):
        length = float(bounds[i + 1] - bounds[i])
        segment = simulate_path(model, theta, start, length, m_i, rng, jumps=None)
        end = segment.states[-1]
        noises.append(bridge_inverse_map(model, theta, segment, start, end))
        pre_jump[i] = end
        if i < jumps.kappa:
            start = end + jumps.sizes[i]
    return AugmentedTransition(
        variant="construct_one",
        x_prime=pre_jump[-1],
        jumps=jumps,
        pre_jump_states=pre_jump,
        segment_noises=tuple(noises),
    )


def construct_one_logdensity(
    model: SdeModel,
    theta: np.ndarray,
    x: np.ndarray,
    aug: AugmentedTransition,
    T: float,
) -> float:
    """Joint log density of a segment-encoded transition.

    Sums the jump-record factor and one continuous pathspace density per
    segment, chaining the start points through the stored pre-jump
    endpoints and jump sizes. Only the first segment sees the conditioning
    state x.
    """
    if aug.variant != "construct_one":
        raise ConfigError("this density handles the construct_one variant only")
    theta = np.asarray(theta, dtype=float)
    x = np.atleast_1d(np.asarray(x, dtype=float))
    jumps = aug.jumps
    bounds = np.concatenate(([0.0], jumps.times, [T]))
    total = jump_record_logdensity(model, theta, jumps, T)
    start = x
    for i in range(jumps.kappa + 1):
        length = float(bounds[i + 1] - bounds[i])
        noise = aug.segment_noises[i]
        if abs(noise.horizon - length) > 1e-9 * max(1.0, T):
            raise ConfigError(
                "segment noise horizon disagrees with the recorded jump times"
            )
        end = aug.pre_jump_states[i]
        piece = AugmentedTransition(variant="continuous", x_prime=end, z=noise)
        total += log_pathspace_density(model, theta, start, piece, length)
        if i < jumps.kappa:
            start = end + jumps.sizes[i]
    return float(total)


def _jump_adapted_inverse(
    model: SdeModel,
    theta: np.ndarray,
    states: np.ndarray,
    x_prime: np.ndarray,
    incr: np.ndarray,
    T: float,
) -> np.ndarray:
    """Noise increments that make the guided jump recursion retrace `states`.

    The final increment is the residual of a plain (unguided) Euler step,
    which is exactly the Wiener increment when the path was simulated
    blindly; the guided residual would be identically zero there.
    """
    m_steps = states.shape[0] - 1
    delta = T / m_steps
    z = np.empty((m_steps, model.dim_x))
    remaining = incr.sum(axis=0)
    diag = model.diffusion_diag
    for j in range(m_steps):
        cur = states[j]
        b = model.drift(theta, cur)
        if j < m_steps - 1:
            guide = (x_prime - cur - remaining) / (T - j * delta)
            residual = states[j + 1] - cur - (b + guide) * delta - incr[j]
        else:
            residual = x_prime - cur - b * delta - incr[j]
        if diag is not None:
            s = diag(theta, cur)
            if np.any(s <= 0.0):
                raise DiffusionDegeneracyError("nonpositive diffusion diagonal")
            z[j] = residual / s
        else:
            sig = model.diffusion(theta, cur)
            try:
                z[j] = np.linalg.solve(sig, residual)
            except np.linalg.LinAlgError as exc:
                raise DiffusionDegeneracyError("singular diffusion matrix") from exc
        remaining = remaining - incr[j]
    return z


def construct_two_sample(
    model: SdeModel,
    theta: np.ndarray,
    x: np.ndarray,
    T: float,
    m_steps: int,
    rng: np.random.Generator,
    cap: int = DEFAULT_JUMP_CAP,
) -> AugmentedTransition:
    """Draw a transition from x and encode it on a single uniform grid.

    Simulates the jump diffusion outright, keeps the jump record, and
    inverts the guided jump recursion around the realized path, so the
    recovered noise reproduces every simulated state including the
    endpoint.
    """
    if m_steps < 2:
        raise ConfigError("bridging requires at least two grid steps")
    if model.dim_w != model.dim_x:
        raise ConfigError("bridging requires as many Brownian axes as state axes")
    theta = np.asarray(theta, dtype=float)
    x = np.atleast_1d(np.asarray(x, dtype=float))
    path = simulate_path(model, theta, x, T, m_steps, rng, jumps="sample", cap=cap)
    jumps = path.jumps if path.jumps is not None else _empty_jumps(model.dim_x)
    x_prime = path.states[-1].copy()
    incr = jump_increments(jumps, T, m_steps, model.dim_x)
    z = _jump_adapted_inverse(model, theta, path.states, x_prime, incr, T)
    return AugmentedTransition(
        variant="construct_two",
        x_prime=x_prime,
        z=NoisePath(increments=z, horizon=T),
        jumps=jumps,
    )


def construct_two_path(
    model: SdeModel,
    theta: np.ndarray,
    x: np.ndarray,
    aug: AugmentedTransition,
    T: float,
) -> PathSegment:
    """Rebuild the uniform-grid path a construct_two augmentation encodes."""
    if aug.variant != "construct_two":
        raise ConfigError("path reconstruction handles the construct_two variant only")
    theta = np.asarray(theta, dtype=float)
    x = np.atleast_1d(np.asarray(x, dtype=float))
    m_steps = aug.z.M
    delta = T / m_steps
    incr = jump_increments(aug.jumps, T, m_steps, model.dim_x)
    remaining = incr.sum(axis=0)
    states = np.empty((m_steps + 1, model.dim_x))
    states[0] = x
    cur = x
    diag = model.diffusion_diag
    for j in range(m_steps - 1):
        b = model.drift(theta, cur)
        guide = (aug.x_prime - cur - remaining) / (T - j * delta)
        if diag is not None:
            s = diag(theta, cur)
            if np.any(s <= 0.0):
                raise DiffusionDegeneracyError("nonpositive diffusion diagonal")
            noise = s * aug.z.increments[j]
        else:
            noise = model.diffusion(theta, cur) @ aug.z.increments[j]
        cur = cur + (b + guide) * delta + noise + incr[j]
        states[j + 1] = cur
        remaining = remaining - incr[j]
    states[m_steps] = aug.x_prime
    return PathSegment(
        times=np.linspace(0.0, T, m_steps + 1), states=states, jumps=aug.jumps
    )


def construct_two_logdensity(
    model: SdeModel,
    theta: np.ndarray,
    x: np.ndarray,
    aug: AugmentedTransition,
    T: float,
) -> float:
    """Joint log density of a uniform-grid jump augmentation.

    The jump-record factor plus the log ratio of the unconditioned to the
    guided Euler joint densities along the reconstructed path; the pinned
    final step enters through its unconditioned Gaussian factor alone.
    """
    if aug.variant != "construct_two":
        raise ConfigError("this density handles the construct_two variant only")
    theta = np.asarray(theta, dtype=float)
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if abs(aug.z.horizon - T) > 1e-9 * max(1.0, T):
        raise ConfigError("noise horizon disagrees with the transition horizon")
    incr = jump_increments(aug.jumps, T, aug.z.M, model.dim_x)
    acc, _ = pathspace_sweep(
        model,
        theta[None, :],
        x[None, :],
        aug.x_prime[None, :],
        aug.z.increments[None, :, :],
        T,
        jump_incr=incr[None, :, :],
    )
    return float(acc[0, 0]) + jump_record_logdensity(model, theta, aug.jumps, T)
