"""Guided bridge transform and the tractable pathspace transition density.

The conditioned diffusion between x and x' is replaced by the auxiliary SDE

    dX = (x' - X)/(T - t) dt + sigma(X) dW,

whose paths hit x' at T. The model drift b is deliberately absent from the
transform: it re-enters through the change of measure below, whose first two
terms are exactly the Girsanov correction for adding b back. Keeping b out
of the map is what makes the density identities hold; with b inside, the
same correction double-counts the drift and the Monte Carlo mean of
exp(log density) converges to the wrong constant (easily seen for a
mean-reverting model against its closed-form transition density).

Driving noise Z and path X are in bijection: the forward map runs guided
Euler steps for j = 0 .. M-2 and then pins the final state to x' exactly, so
the (T - t)^-1 singularity is never evaluated; the inverse map recovers Z by
solving each step for its increment. With the last guided step replaced by
pinning, the final noise increment is never consumed, and the guided
residual at that step is identically zero; the inverse instead assigns the
canonical unconditioned residual sigma(X_{M-1})^-1 (x' - X_{M-1} - b delta),
so inverting a blindly simulated path recovers the very noise that drove its
last Euler step. Both conventions must agree with the density code below or
round-trip and unbiasedness identities break.

The transition density of the augmented variable (x', Z), taken with respect
to Lebesgue x Wiener measure, is

    log p = log phi(X; x, x') + log N(x'; x, T Sigma(x))
            + 1/2 log|Sigma(x')| - 1/2 log|Sigma(x)|,

where X is the path rebuilt from Z and log phi collects four integrals: the
two drift terms (left-endpoint Ito sums over every step including the last)
and two (T - t)^-1 weighted terms involving d Sigma^-1 (summed only up to
j = M-2, matching the pinning convention; they vanish identically when the
diffusion is constant).

`pathspace_sweep` is the batched workhorse used by the particle smoother: it
evaluates the density for many (start, endpoint, noise) rows and several
parameter vectors in one pass, optionally reconstructing jump-adapted paths
and accumulating the observation statistic some models need. Models exposing
a diagonal diffusion take a vectorized scalar route; anything else falls back
to batched Cholesky factorizations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DiffusionDegeneracyError
from .sde_core import JumpSet, NoisePath, PathSegment, SdeModel

_LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class AugmentedTransition:
    """Endpoint plus auxiliary noise (and jumps) standing in for a transition.

    variant "continuous": fields (x_prime, z). variant "construct_two" adds
    the jump record. variant "construct_one" instead carries per-segment
    data: pre-jump endpoints x_{tau_i -} for every segment boundary and one
    NoisePath per inter-jump segment (kappa + 1 of them).
    """

    variant: str
    x_prime: np.ndarray
    z: NoisePath | None = None
    jumps: JumpSet | None = None
    pre_jump_states: np.ndarray | None = None
    segment_noises: tuple[NoisePath, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "x_prime", np.atleast_1d(np.asarray(self.x_prime, float)))
        if self.variant == "continuous":
            if self.z is None or self.jumps is not None or self.segment_noises is not None:
                raise ValueError("continuous variant carries exactly (x_prime, z)")
        elif self.variant == "construct_two":
            if self.z is None or self.jumps is None:
                raise ValueError("construct_two carries (x_prime, jumps, z)")
        elif self.variant == "construct_one":
            if self.segment_noises is None or self.pre_jump_states is None or self.jumps is None:
                raise ValueError(
                    "construct_one carries jumps, pre-jump states and per-segment noise"
                )
            if len(self.segment_noises) != self.jumps.kappa + 1:
                raise ValueError("need one noise path per inter-jump segment")
            if self.pre_jump_states.shape[0] != self.jumps.kappa + 1:
                raise ValueError("need one pre-jump state per segment boundary")
        else:
            raise ValueError(f"unknown variant {self.variant!r}")


def _diag_or_none(model: SdeModel):
    return model.diffusion_diag


def bridge_forward_map(
    model: SdeModel,
    theta: np.ndarray,
    z: NoisePath,
    x: np.ndarray,
    x_prime: np.ndarray,
    T: float,
) -> PathSegment:
    """Run the guided Euler recursion driven by z and pin the endpoint."""
    if z.M < 2:
        raise ConfigError("bridging requires at least two grid steps")
    if model.dim_w != model.dim_x:
        raise ConfigError("bridging requires as many Brownian axes as state axes")
    theta = np.asarray(theta, dtype=float)
    x = np.atleast_1d(np.asarray(x, dtype=float))
    x_prime = np.atleast_1d(np.asarray(x_prime, dtype=float))
    m_steps = z.M
    delta = T / m_steps
    states = np.empty((m_steps + 1, model.dim_x))
    states[0] = x
    cur = x
    diag = _diag_or_none(model)
    for j in range(m_steps - 1):
        guide = (x_prime - cur) / (T - j * delta)
        if diag is not None:
            s = diag(theta, cur)
            if np.any(s <= 0.0):
                raise DiffusionDegeneracyError("nonpositive diffusion diagonal")
            noise = s * z.increments[j]
        else:
            noise = model.diffusion(theta, cur) @ z.increments[j]
        cur = cur + guide * delta + noise
        states[j + 1] = cur
    states[m_steps] = x_prime
    return PathSegment(times=np.linspace(0.0, T, m_steps + 1), states=states)


def bridge_inverse_map(
    model: SdeModel,
    theta: np.ndarray,
    path: PathSegment,
    x: np.ndarray,
    x_prime: np.ndarray,
) -> NoisePath:
    """Recover the driving noise of a (guided) path; inverse of the forward map."""
    if model.dim_w != model.dim_x:
        raise ConfigError("bridging requires as many Brownian axes as state axes")
    theta = np.asarray(theta, dtype=float)
    x_prime = np.atleast_1d(np.asarray(x_prime, dtype=float))
    states = path.states
    m_steps = states.shape[0] - 1
    T = path.horizon
    delta = T / m_steps
    increments = np.empty((m_steps, model.dim_x))
    diag = _diag_or_none(model)
    for j in range(m_steps):
        cur = states[j]
        if j < m_steps - 1:
            residual = states[j + 1] - cur - (x_prime - cur) / (T - j * delta) * delta
        else:
            residual = x_prime - cur - model.drift(theta, cur) * delta
        if diag is not None:
            s = diag(theta, cur)
            if np.any(s <= 0.0):
                raise DiffusionDegeneracyError("nonpositive diffusion diagonal")
            increments[j] = residual / s
        else:
            sig = model.diffusion(theta, cur)
            try:
                increments[j] = np.linalg.solve(sig, residual)
            except np.linalg.LinAlgError as exc:
                raise DiffusionDegeneracyError("singular diffusion matrix") from exc
    return NoisePath(increments=increments, horizon=T)


def _sigma_matrices(model, theta, states):
    """Sigma = sigma sigma^T at each row of `states`, shape (K, d, d)."""
    sig = model.diffusion(theta, states)
    return np.einsum("...ij,...kj->...ik", sig, sig)


def log_phi(
    model: SdeModel,
    theta: np.ndarray,
    path: PathSegment,
    x: np.ndarray,
    x_prime: np.ndarray,
    T: float,
) -> float:
    """Four-term Girsanov correction of the guided bridge, discretised.

    This is the plain reference evaluation over a stored path; the smoother
    uses the streaming sweep instead. Keeping both lets the test suite pit
    one against the other.
    """
    theta = np.asarray(theta, dtype=float)
    x_prime = np.atleast_1d(np.asarray(x_prime, dtype=float))
    states = path.states
    m_steps = states.shape[0] - 1
    delta = T / m_steps
    b = model.drift(theta, states[:-1])  # (M, d)
    dx = np.diff(states, axis=0)
    if model.diffusion_diag is not None:
        sig2 = model.diffusion_diag(theta, states) ** 2  # (M+1, d)
        inv = 1.0 / sig2
        term1 = float(np.sum(b * inv[:-1] * dx))
        term2 = float(np.sum(b * inv[:-1] * b) * delta)
        if model.constant_diffusion:
            term3 = term4 = 0.0
        else:
            dinv = np.diff(inv, axis=0)  # (M, d)
            r = x_prime - states  # (M+1, d)
            weights = 1.0 / (T - delta * np.arange(m_steps - 1))
            quad = np.sum(r[:-2] ** 2 * dinv[:-1], axis=1)
            term3 = float(np.sum(quad * weights))
            dsq = np.sum((r[1:-1] ** 2 - r[:-2] ** 2) * dinv[:-1], axis=1)
            term4 = float(np.sum(dsq * weights))
    else:
        sigmas = _sigma_matrices(model, theta, states)
        inv = np.linalg.inv(sigmas)
        term1 = float(np.einsum("ji,jik,jk->", b, inv[:-1], dx))
        term2 = float(np.einsum("ji,jik,jk->", b, inv[:-1], b) * delta)
        if model.constant_diffusion:
            term3 = term4 = 0.0
        else:
            dinv = np.diff(inv, axis=0)
            r = x_prime - states
            weights = 1.0 / (T - delta * np.arange(m_steps - 1))
            quad = np.einsum("ji,jik,jk->j", r[:-2], dinv[:-1], r[:-2])
            outer_next = np.einsum("ji,jk->jik", r[1:-1], r[1:-1])
            outer_cur = np.einsum("ji,jk->jik", r[:-2], r[:-2])
            dsq = np.einsum("jik,jik->j", dinv[:-1], outer_next - outer_cur)
            term3 = float(np.sum(quad * weights))
            term4 = float(np.sum(dsq * weights))
    return term1 - 0.5 * term2 - 0.5 * term3 - 0.5 * term4


def _gauss_diag_logpdf(v, mean, var):
    return np.sum(-0.5 * (_LOG_2PI + np.log(var) + (v - mean) ** 2 / var), axis=-1)


def log_pathspace_density(
    model: SdeModel,
    theta: np.ndarray,
    x: np.ndarray,
    aug: AugmentedTransition,
    T: float,
) -> float:
    """Transition density of (x', Z) relative to Lebesgue x Wiener measure.

    The path is rebuilt from Z internally, so the value is a deterministic
    function of (theta, x, x', Z) and stays differentiable in theta at
    frozen noise.
    """
    if aug.variant != "continuous":
        raise ConfigError("this density handles the continuous variant only")
    theta = np.asarray(theta, dtype=float)
    x = np.atleast_1d(np.asarray(x, dtype=float))
    path = bridge_forward_map(model, theta, aug.z, x, aug.x_prime, T)
    phi = log_phi(model, theta, path, x, aug.x_prime, T)
    if model.diffusion_diag is not None:
        sig2_start = model.diffusion_diag(theta, x) ** 2
        gauss = float(_gauss_diag_logpdf(aug.x_prime, x, T * sig2_start))
        if model.constant_diffusion:
            dets = 0.0
        else:
            sig2_end = model.diffusion_diag(theta, aug.x_prime) ** 2
            dets = 0.5 * float(np.sum(np.log(sig2_end)) - np.sum(np.log(sig2_start)))
    else:
        cov = T * _sigma_matrices(model, theta, x[None])[0]
        diff = aug.x_prime - x
        chol = np.linalg.cholesky(cov)
        alpha = np.linalg.solve(chol, diff)
        gauss = float(
            -0.5 * (model.dim_x * _LOG_2PI + alpha @ alpha) - np.sum(np.log(np.diag(chol)))
        )
        det_start = np.linalg.slogdet(_sigma_matrices(model, theta, x[None])[0])[1]
        det_end = np.linalg.slogdet(
            _sigma_matrices(model, theta, aug.x_prime[None])[0]
        )[1]
        dets = 0.5 * float(det_end - det_start)
    return phi + gauss + dets


def pathspace_sweep(
    model: SdeModel,
    theta_stack: np.ndarray,
    x0: np.ndarray,
    xprime: np.ndarray,
    z: np.ndarray,
    T: float,
    jump_incr: np.ndarray | None = None,
    want_stats: bool = False,
) -> tuple[np.ndarray, np.ndarray | None]:
    """Batched pathspace log densities for R rows under V parameter vectors.

    x0 has shape (R, d) or (V, R, d) for parameter-dependent starts, xprime
    (R, d), z (R, M, d_w). Without `jump_incr` this evaluates the continuous
    density along drift-free guided paths, exactly as `log_pathspace_density`
    does one row at a time. With it (shape (R, M, d)) the jump-adapted
    variant instead: propagation keeps the model drift, the guide aims at the
    endpoint minus the jumps still to come, and the returned value is the log
    ratio of the unconditioned to the guided Euler joint densities plus the
    final unconditioned Gaussian factor (the jump-measure factor is the
    caller's business). Returns (logdens (V, R), stats) where
    stats accumulates the left-Riemann integral of the model's observation
    coordinate along each reconstructed path when requested.
    """
    theta_stack = np.atleast_2d(np.asarray(theta_stack, dtype=float))
    n_var = theta_stack.shape[0]
    xprime = np.asarray(xprime, dtype=float)
    n_rows, dim = xprime.shape
    z = np.asarray(z, dtype=float)
    m_steps = z.shape[1]
    if m_steps < 2:
        raise ConfigError("bridging requires at least two grid steps")
    delta = T / m_steps
    x0 = np.asarray(x0, dtype=float)
    if x0.ndim == 2:
        x0 = x0[None]
    x0 = np.broadcast_to(x0, (n_var, n_rows, dim))

    if model.diffusion_diag is None:
        return _sweep_dense(model, theta_stack, x0, xprime, z, T, jump_incr, want_stats)

    jumps_total = jump_incr.sum(axis=1) if jump_incr is not None else None

    cur = x0.copy()  # (V, R, d)
    acc = np.zeros((n_var, n_rows))
    stats = np.zeros((n_var, n_rows)) if want_stats else None
    stat_coord = model.obs_stat_coord
    track_dinv = not model.constant_diffusion and jump_incr is None
    jumps_seen = np.zeros((n_rows, dim)) if jump_incr is not None else None

    b = np.empty_like(cur)
    sig = np.empty_like(cur)
    for v in range(n_var):
        b[v] = model.drift(theta_stack[v], cur[v])
        sig[v] = model.diffusion_diag(theta_stack[v], cur[v])
    if np.any(sig <= 0.0):
        raise DiffusionDegeneracyError("nonpositive diffusion diagonal")
    if track_dinv or jump_incr is None:
        start_sig2 = sig * sig  # Sigma at the conditioning point, per variant

    for j in range(m_steps):
        inv = 1.0 / (sig * sig)
        if want_stats:
            stats += cur[..., stat_coord] * delta
        if j < m_steps - 1:
            gap = xprime - cur
            if jump_incr is not None:
                gap = gap - (jumps_total - jumps_seen)
            guide = gap / (T - j * delta)
            if jump_incr is not None:
                # construct-two proposal keeps the model drift in the step
                nxt = cur + (b + guide) * delta + sig * z[:, j] + jump_incr[:, j]
            else:
                nxt = cur + guide * delta + sig * z[:, j]
        else:
            nxt = np.broadcast_to(xprime, cur.shape)

        if jump_incr is None:
            dx = nxt - cur
            acc += np.sum(b * inv * dx, axis=-1) - 0.5 * delta * np.sum(b * b * inv, axis=-1)
        else:
            if j < m_steps - 1:
                # shared Gaussian factors: only the quadratic forms survive
                r_g = sig * z[:, j]
                r_u = r_g + guide * delta
                acc -= 0.5 * np.sum((r_u * r_u - r_g * r_g) * inv, axis=-1) / delta
            else:
                resid = nxt - cur - b * delta - jump_incr[:, j]
                var = delta * sig * sig
                acc += np.sum(
                    -0.5 * (_LOG_2PI + np.log(var) + resid * resid / var), axis=-1
                )

        if j < m_steps - 1 or track_dinv:
            sig_next = np.empty_like(cur)
            b_next = np.empty_like(cur)
            for v in range(n_var):
                b_next[v] = model.drift(theta_stack[v], nxt[v])
                sig_next[v] = model.diffusion_diag(theta_stack[v], nxt[v])
            if np.any(sig_next <= 0.0):
                raise DiffusionDegeneracyError("nonpositive diffusion diagonal")
        else:
            sig_next = b_next = None

        if track_dinv and j < m_steps - 1:
            dinv = 1.0 / (sig_next * sig_next) - inv
            r = xprime - cur
            r_next = xprime - nxt
            w = 1.0 / (T - j * delta)
            acc -= 0.5 * w * np.sum(r * dinv * r, axis=-1)
            acc -= 0.5 * w * np.sum(dinv * (r_next * r_next - r * r), axis=-1)

        if jump_incr is not None:
            jumps_seen = jumps_seen + jump_incr[:, j]
        cur = nxt
        if sig_next is not None:
            b, sig = b_next, sig_next

    if jump_incr is None:
        var0 = T * start_sig2
        acc += np.sum(
            -0.5 * (_LOG_2PI + np.log(var0) + (xprime - x0) ** 2 / var0), axis=-1
        )
        if not model.constant_diffusion:
            acc += 0.5 * (np.sum(np.log(sig * sig), axis=-1) - np.sum(np.log(start_sig2), axis=-1))
    return acc, stats


def _sweep_dense(model, theta_stack, x0, xprime, z, T, jump_incr, want_stats):
    """General-matrix fallback of `pathspace_sweep` via batched Cholesky."""
    n_var = theta_stack.shape[0]
    n_rows, dim = xprime.shape
    m_steps = z.shape[1]
    delta = T / m_steps
    jumps_total = jump_incr.sum(axis=1) if jump_incr is not None else None
    jumps_seen = np.zeros((n_rows, dim)) if jump_incr is not None else None
    acc = np.zeros((n_var, n_rows))
    stats = np.zeros((n_var, n_rows)) if want_stats else None
    cur = x0.copy()

    def coeffs(states):
        b = np.empty_like(states)
        sigma = np.empty(states.shape + (model.dim_w,))
        for v in range(n_var):
            b[v] = model.drift(theta_stack[v], states[v])
            sigma[v] = model.diffusion(theta_stack[v], states[v])
        cov = np.einsum("...ij,...kj->...ik", sigma, sigma)
        try:
            chol = np.linalg.cholesky(cov)
        except np.linalg.LinAlgError as exc:
            raise DiffusionDegeneracyError("diffusion covariance not SPD") from exc
        return b, sigma, cov, chol

    def inv_from_chol(chol):
        eye = np.broadcast_to(np.eye(dim), chol.shape)
        lower = np.linalg.solve(chol, eye)
        return np.einsum("...ji,...jk->...ik", lower, lower)

    b, sigma, cov, chol = coeffs(cur)
    start_chol = chol
    start_cov = cov
    for j in range(m_steps):
        inv = inv_from_chol(chol)
        if want_stats:
            stats += cur[..., model.obs_stat_coord] * delta
        if j < m_steps - 1:
            gap = xprime - cur
            if jump_incr is not None:
                gap = gap - (jumps_total - jumps_seen)
            guide = gap / (T - j * delta)
            zb = np.broadcast_to(z[:, j], (n_var,) + z[:, j].shape)
            noise = np.einsum("...ij,...j->...i", sigma, zb)
            if jump_incr is not None:
                nxt = cur + (b + guide) * delta + noise + jump_incr[:, j]
            else:
                nxt = cur + guide * delta + noise
        else:
            nxt = np.broadcast_to(xprime, cur.shape)
        if jump_incr is None:
            dx = nxt - cur
            acc += np.einsum("...i,...ik,...k->...", b, inv, dx)
            acc -= 0.5 * delta * np.einsum("...i,...ik,...k->...", b, inv, b)
        else:
            if j < m_steps - 1:
                zb = np.broadcast_to(z[:, j], (n_var,) + z[:, j].shape)
                r_g = np.einsum("...ij,...j->...i", sigma, zb)
                r_u = r_g + guide * delta
                quad_u = np.einsum("...i,...ik,...k->...", r_u, inv, r_u)
                quad_g = np.einsum("...i,...ik,...k->...", r_g, inv, r_g)
                acc -= 0.5 * (quad_u - quad_g) / delta
            else:
                resid = nxt - cur - b * delta - jump_incr[:, j]
                alpha = np.linalg.solve(chol, resid[..., None])[..., 0]
                logdet = 2.0 * np.sum(
                    np.log(np.diagonal(chol, axis1=-2, axis2=-1)), axis=-1
                )
                acc += -0.5 * (
                    dim * _LOG_2PI
                    + dim * np.log(delta)
                    + logdet
                    + np.einsum("...i,...i->...", alpha, alpha) / delta
                )
        b_next, sigma_next, cov_next, chol_next = coeffs(np.ascontiguousarray(nxt))
        if not model.constant_diffusion and jump_incr is None and j < m_steps - 1:
            dinv = inv_from_chol(chol_next) - inv
            r = xprime - cur
            r_next = xprime - nxt
            w = 1.0 / (T - j * delta)
            acc -= 0.5 * w * np.einsum("...i,...ik,...k->...", r, dinv, r)
            outer_diff = np.einsum("...i,...k->...ik", r_next, r_next) - np.einsum(
                "...i,...k->...ik", r, r
            )
            acc -= 0.5 * w * np.einsum("...ik,...ik->...", dinv, outer_diff)
        if jump_incr is not None:
            jumps_seen = jumps_seen + jump_incr[:, j]
        cur = nxt
        b, sigma, cov, chol = b_next, sigma_next, cov_next, chol_next

    if jump_incr is None:
        diff = xprime - x0
        alpha = np.linalg.solve(start_chol, diff[..., None])[..., 0]
        logdet0 = 2.0 * np.sum(
            np.log(np.diagonal(start_chol, axis1=-2, axis2=-1)), axis=-1
        )
        acc += -0.5 * (
            dim * _LOG_2PI
            + dim * np.log(T)
            + logdet0
            + np.einsum("...i,...i->...", alpha, alpha) / T
        )
        if not model.constant_diffusion:
            logdet_end = 2.0 * np.sum(
                np.log(np.diagonal(chol, axis1=-2, axis2=-1)), axis=-1
            )
            acc += 0.5 * (logdet_end - logdet0)
    return acc, stats
