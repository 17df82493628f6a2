"""Online parameter estimation driven by smoothed score estimates.

The smoother tracks a running expectation of any additive path functional;
feeding it the gradient of the augmented transition density (plus the
observation density) turns each assimilation step into a noisy score
evaluation. This module supplies the three layers that turn those
evaluations into a fitting loop:

* gradient plumbing: :func:`score_increment` differentiates one augmented
  transition in ``theta``, either through a closed-form callback or by
  central finite differences at frozen noise, and
  :func:`score_functional` packages the same computation as an
  :class:`~pathsmooth.smoother.AdditiveFunctional` with a vectorised
  pairwise fast path;
* the optimiser: :func:`adam_update` is a pure fold over moment estimates
  (replayable bit for bit), with a decaying Robbins-Monro step available
  as an alternative, never stacked on top;
* the driver: :func:`online_gradient_ascent` interleaves smoother steps
  with parameter updates, working in a transformed space where positive
  coordinates live on the log scale and periodic ones are wrapped.

Constrained coordinates never leave their domain because updates happen in
the transformed space; a guard aborts the run with diagnostics if any
transformed coordinate exceeds a configurable magnitude.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np

from .bridge import pathspace_sweep
from .errors import ConfigError, NumericalDivergenceError
from .jump_augment import jump_record_logdensity
from .sde_core import SdeModel, feller_ok, jump_increments
from .smoother import AdditiveFunctional, FilterState, PairBatch
from .smoother import init as smoother_init
from .smoother import step as smoother_step

logger = logging.getLogger(__name__)

__all__ = [
    "GradSpec",
    "AdamState",
    "adam_init",
    "adam_update",
    "gamma_schedule",
    "default_grad",
    "score_increment",
    "score_functional",
    "online_gradient_ascent",
    "OnlineFitResult",
    "transform_to_opt",
    "transform_from_opt",
    "transform_chain",
]


# ---------------------------------------------------------------------------
# gradient specification


@dataclass(frozen=True)
class GradSpec:
    """How to differentiate log-densities in theta.

    mode "analytic" routes through `analytic` (or, when that is None, the
    model's own `analytic_pathspace_score` hook), which must accept
    (theta, x0, xprime, z, T) batched over rows and return (..., dim_theta);
    one-dimensional models receive coordinate-squeezed arrays. mode
    "finite_difference" uses central differences with step
    h_i = fd_scale * max(1, |theta_i|) per coordinate, evaluating both legs
    on the same frozen noise and jump record. Near a domain boundary a leg
    can leave the feasible set (for example a positive coordinate smaller
    than its own step); the resulting evaluation error propagates rather
    than being clipped, since silently shrinking the step would change the
    documented rule.
    """

    mode: str = "finite_difference"
    fd_scale: float = 1e-4
    analytic: Callable | None = None

    def __post_init__(self):
        if self.mode not in ("analytic", "finite_difference"):
            raise ConfigError(
                f"gradient mode must be 'analytic' or 'finite_difference', got {self.mode!r}"
            )
        if self.fd_scale <= 0.0:
            raise ConfigError("finite-difference scale must be positive")

    def steps(self, theta: np.ndarray) -> np.ndarray:
        return self.fd_scale * np.maximum(1.0, np.abs(theta))


def default_grad(model: SdeModel, selector: str = "continuous") -> GradSpec:
    """Pick the cheapest correct gradient route for a model.

    Analytic scores need a closed-form callback, a theta-free observation
    density with no path-statistic input, and (for jump models) a
    theta-free jump record; the jump-adapted augmentation is excluded
    because its density is a likelihood ratio the continuous-form callback
    does not cover. Everything else falls back to finite differences.
    """
    if (
        model.analytic_pathspace_score is not None
        and not _obs_grad_needed(model)
        and selector != "construct_two"
        and (not model.has_jumps or model.jump_theta_free)
    ):
        return GradSpec(mode="analytic")
    return GradSpec()


def _obs_grad_needed(model: SdeModel) -> bool:
    # The observation factor contributes to the score if it reads theta
    # directly, or reads a path statistic that moves when the path is
    # re-derived at a perturbed theta.
    return (not model.obs_theta_free) or (model.obs_stat_coord is not None)


def _fd_stack(theta: np.ndarray, h: np.ndarray) -> np.ndarray:
    """Interleaved (+h_i, -h_i) parameter stack, shape (2p, p)."""
    p = theta.shape[0]
    stack = np.tile(theta, (2 * p, 1))
    idx = np.arange(p)
    stack[2 * idx, idx] += h
    stack[2 * idx + 1, idx] -= h
    return stack


def _central_diff(values: np.ndarray, h: np.ndarray) -> np.ndarray:
    """(2p, ...) leg values -> (..., p) central differences."""
    diff = values[0::2] - values[1::2]  # (p, ...)
    return np.moveaxis(diff, 0, -1) / (2.0 * h)


def _check_finite(grads: np.ndarray, context: str) -> np.ndarray:
    if not np.all(np.isfinite(grads)):
        flat = np.isfinite(grads).all(axis=tuple(range(grads.ndim - 1)))
        coord = int(np.argmin(flat))
        raise NumericalDivergenceError(
            f"gradient coordinate {coord} is not finite {context}"
        )
    return grads


# ---------------------------------------------------------------------------
# finite-difference and analytic evaluation cores


def _fd_rows(
    model: SdeModel,
    theta: np.ndarray,
    spec: GradSpec,
    x0_rows: np.ndarray,
    xprime_rows: np.ndarray,
    z_rows: np.ndarray,
    T: float,
    jump_incr_rows: np.ndarray | None,
    y,
    y_prev,
    start_override: Callable | None,
) -> np.ndarray:
    """Central-difference transition (+ observation) scores for R rows."""
    h = spec.steps(theta)
    stack = _fd_stack(theta, h)
    g_needed = _obs_grad_needed(model)
    want_stats = g_needed and model.obs_stat_coord is not None
    if start_override is not None:
        shape = (x0_rows.shape[0], model.dim_x)
        x0 = np.stack(
            [np.broadcast_to(start_override(tv), shape) for tv in stack]
        )
    else:
        x0 = x0_rows
    acc, stats = pathspace_sweep(
        model, stack, x0, xprime_rows, z_rows, T,
        jump_incr=jump_incr_rows, want_stats=want_stats,
    )
    if g_needed and y is not None:
        if model.obs_loglik_vec is None:
            raise ConfigError(
                f"model {model.name!r} lacks a vectorised observation density"
            )
        acc = acc.copy()
        for v in range(stack.shape[0]):
            sv = stats[v] if want_stats else None
            acc[v] += model.obs_loglik_vec(stack[v], y, y_prev, xprime_rows, sv, T)
    return _central_diff(acc, h)


def _fd_obs_grad(
    model: SdeModel,
    theta: np.ndarray,
    spec: GradSpec,
    x_end_rows: np.ndarray,
    y,
    y_prev,
    T: float,
) -> np.ndarray:
    """Observation-factor score for endpoint-observing models, (R, p)."""
    if model.obs_loglik_vec is None:
        raise ConfigError(
            f"model {model.name!r} lacks a vectorised observation density"
        )
    h = spec.steps(theta)
    stack = _fd_stack(theta, h)
    vals = np.stack(
        [model.obs_loglik_vec(tv, y, y_prev, x_end_rows, None, T) for tv in stack]
    )
    return _central_diff(vals, h)


def _fd_record_grad(
    model: SdeModel, theta: np.ndarray, spec: GradSpec, jumps, T: float
) -> np.ndarray:
    """Gradient of the jump-record factor; zero when it cannot read theta."""
    p = theta.shape[0]
    if jumps is None or not model.has_jumps or model.jump_theta_free:
        return np.zeros(p)
    h = spec.steps(theta)
    stack = _fd_stack(theta, h)
    vals = np.array(
        [jump_record_logdensity(model, tv, jumps, T) for tv in stack]
    )
    return _central_diff(vals, h)


def _resolve_analytic(model: SdeModel, spec: GradSpec) -> Callable:
    fn = spec.analytic if spec.analytic is not None else model.analytic_pathspace_score
    if fn is None:
        raise ConfigError(
            f"model {model.name!r} provides no analytic score callback; "
            "use finite differences"
        )
    return fn


def _call_analytic(
    model: SdeModel,
    fn: Callable,
    theta: np.ndarray,
    x0_rows: np.ndarray,
    xprime_rows: np.ndarray,
    z_rows: np.ndarray,
    T: float,
) -> np.ndarray:
    if model.dim_x == 1 and model.dim_w == 1:
        out = fn(theta, x0_rows[..., 0], xprime_rows[..., 0], z_rows[..., 0], T)
    else:
        out = fn(theta, x0_rows, xprime_rows, z_rows, T)
    return np.asarray(out, dtype=float)


def _guard_analytic(model: SdeModel, aug_variant: str, start_override) -> None:
    if _obs_grad_needed(model):
        raise ConfigError(
            "analytic scores require a theta-free observation density; "
            "use finite differences"
        )
    if start_override is not None:
        raise ConfigError(
            "analytic scores cannot re-derive a theta-dependent initial "
            "state; use finite differences"
        )
    if aug_variant == "construct_two":
        raise ConfigError(
            "analytic scores do not cover the jump-adapted augmentation; "
            "use finite differences"
        )
    if aug_variant == "construct_one" and model.has_jumps and not model.jump_theta_free:
        raise ConfigError(
            "analytic scores require a theta-free jump record; "
            "use finite differences"
        )


def _segment_pieces(model: SdeModel, aug):
    """(start, end, noise) per inter-jump segment of a jumps-first record."""
    pieces = []
    for i, noise in enumerate(aug.segment_noises):
        if i == 0:
            start = None  # the conditioning root, supplied by the caller
        else:
            start = aug.pre_jump_states[i - 1] + aug.jumps.sizes[i - 1]
        pieces.append((start, aug.pre_jump_states[i], noise))
    return pieces


def _aug_scores(
    model: SdeModel,
    theta: np.ndarray,
    spec: GradSpec,
    x_rows: np.ndarray,
    aug,
    T: float,
    y=None,
    y_prev=None,
    start_override: Callable | None = None,
) -> np.ndarray:
    """Score of one augmented transition against J conditioning roots.

    Returns (J, dim_theta). `start_override(theta_v) -> (dim_x,)` replaces
    every root with a theta-derived initial state inside each
    finite-difference leg (used at the first step of models whose state is
    initialised from the first observation).
    """
    x_rows = np.atleast_2d(np.asarray(x_rows, dtype=float))
    n_rows = x_rows.shape[0]
    variant = aug.variant

    if spec.mode == "analytic":
        _guard_analytic(model, variant, start_override)
        fn = _resolve_analytic(model, spec)
        if variant == "continuous":
            _require_horizon(aug.z.horizon, T)
            xp = np.broadcast_to(aug.x_prime, x_rows.shape)
            z = np.broadcast_to(
                aug.z.increments[None], (n_rows,) + aug.z.increments.shape
            )
            grads = _call_analytic(model, fn, theta, x_rows, xp, z, T)
        else:  # construct_one, guarded above
            _require_horizon(sum(n.horizon for n in aug.segment_noises), T)
            grads = np.zeros((n_rows, theta.shape[0]))
            for start, end, noise in _segment_pieces(model, aug):
                roots = x_rows if start is None else np.atleast_2d(start)
                xp = np.broadcast_to(end, roots.shape)
                z = np.broadcast_to(
                    noise.increments[None], (roots.shape[0],) + noise.increments.shape
                )
                grads = grads + _call_analytic(
                    model, fn, theta, roots, xp, z, noise.horizon
                )
        return _check_finite(grads, f"for the {variant} transition score")

    if _obs_grad_needed(model) and y is None:
        raise ConfigError(
            "the observation density depends on theta here; the score "
            "computation needs the current observation"
        )

    if variant == "continuous":
        _require_horizon(aug.z.horizon, T)
        xp = np.broadcast_to(aug.x_prime, x_rows.shape)
        z = np.broadcast_to(
            aug.z.increments[None], (n_rows,) + aug.z.increments.shape
        )
        grads = _fd_rows(
            model, theta, spec, x_rows, xp, z, T, None, y, y_prev, start_override
        )
    elif variant == "construct_two":
        _require_horizon(aug.z.horizon, T)
        incr = jump_increments(aug.jumps, T, aug.z.M, model.dim_x)
        xp = np.broadcast_to(aug.x_prime, x_rows.shape)
        z = np.broadcast_to(
            aug.z.increments[None], (n_rows,) + aug.z.increments.shape
        )
        ji = np.broadcast_to(incr[None], (n_rows,) + incr.shape)
        grads = _fd_rows(
            model, theta, spec, x_rows, xp, z, T, ji, y, y_prev, start_override
        )
        grads = grads + _fd_record_grad(model, theta, spec, aug.jumps, T)
    elif variant == "construct_one":
        _require_horizon(sum(n.horizon for n in aug.segment_noises), T)
        grads = np.zeros((n_rows, theta.shape[0]))
        for i, (start, end, noise) in enumerate(_segment_pieces(model, aug)):
            roots = x_rows if start is None else np.atleast_2d(start)
            xp = np.broadcast_to(end, roots.shape)
            z = np.broadcast_to(
                noise.increments[None], (roots.shape[0],) + noise.increments.shape
            )
            seg = _fd_rows(
                model, theta, spec, roots, xp, z, noise.horizon, None,
                None, None, start_override if i == 0 else None,
            )
            grads = grads + seg
        if _obs_grad_needed(model):
            # segments carry no path statistic here (the smoother refuses
            # that combination), so the observation factor only reads the
            # final endpoint and differentiates on its own
            xp = np.broadcast_to(aug.x_prime, x_rows.shape)
            grads = grads + _fd_obs_grad(model, theta, spec, xp, y, y_prev, T)
        grads = grads + _fd_record_grad(model, theta, spec, aug.jumps, T)
    else:
        raise ConfigError(f"unknown transition variant {variant!r}")
    return _check_finite(grads, f"for the {variant} transition score")


def _require_horizon(have: float, want: float) -> None:
    if abs(float(have) - float(want)) > 1e-9 * max(1.0, abs(float(want))):
        raise ConfigError(
            f"augmentation horizon {float(have)!r} does not match the "
            f"requested interval {float(want)!r}"
        )


# ---------------------------------------------------------------------------
# public per-transition score


def score_increment(
    model: SdeModel,
    theta: np.ndarray,
    k: int,
    x_prev: np.ndarray,
    aug,
    y_k,
    grad: GradSpec | None = None,
    *,
    y_prev=None,
    horizon: float = 1.0,
    y0=None,
) -> np.ndarray:
    """Gradient in theta of one transition-plus-observation log density.

    Differentiates log p_theta(aug | x_prev) + log g_theta(y_k | y_prev, .)
    at frozen auxiliary noise and jump record, so the value is an exact
    derivative of the same quantity the smoother's exchange weights use.
    The observation term is dropped automatically when it cannot depend on
    theta. Passing `y0` lets step k = 1 of a model with a theta-dependent
    initialiser re-derive its starting state inside each finite-difference
    leg. Raises if any gradient coordinate comes out non-finite.
    """
    theta = np.asarray(theta, dtype=float)
    spec = grad if grad is not None else default_grad(model, _selector_of(aug))
    g_needed = _obs_grad_needed(model)
    override = _make_start_override(model, k, y0)
    rows = _aug_scores(
        model,
        theta,
        spec,
        np.atleast_2d(np.asarray(x_prev, dtype=float)),
        aug,
        horizon,
        y_k if g_needed else None,
        y_prev if g_needed else None,
        override,
    )
    return rows[0]


def _selector_of(aug) -> str:
    return "construct_two" if aug.variant == "construct_two" else "continuous"


def _make_start_override(model: SdeModel, k: int, y0) -> Callable | None:
    if k == 1 and model.init_theta_dependent and y0 is not None:
        if model.init_state is None:
            raise ConfigError(
                f"model {model.name!r} is flagged theta-dependent at "
                "initialisation but has no init_state"
            )
        return lambda tv: np.atleast_1d(
            np.asarray(model.init_state(tv, y0), dtype=float)
        )
    return None


# ---------------------------------------------------------------------------
# score functional for the smoother


def score_functional(
    model: SdeModel,
    observations: Sequence | None = None,
    grad: GradSpec | None = None,
    *,
    horizon: float = 1.0,
    selector: str = "continuous",
) -> AdditiveFunctional:
    """Package the running score as an additive functional.

    `observations` is indexed by step: entry k is y_k and entry 0 is y_0
    (or None when the initial reweighting is skipped). A growing list works;
    the driver appends each observation before stepping. Models whose
    observation density cannot read theta may pass None.

    The pairwise fast path evaluates all new-by-old particle pairs in one
    sweep per finite-difference leg, so a smoother step costs 2 * dim_theta
    density sweeps (one callback call in analytic mode).
    """
    spec = grad if grad is not None else default_grad(model, selector)
    p = model.dim_theta
    g_needed = _obs_grad_needed(model)
    if g_needed and observations is None:
        raise ConfigError(
            "this model's observation density depends on theta (directly or "
            "through path statistics); the score functional needs the "
            "observation sequence"
        )

    def _obs_pair(k: int):
        if not g_needed:
            return None, None
        if len(observations) <= k:
            raise ConfigError(
                f"observation sequence has no entry for step {k}; append it "
                "before stepping"
            )
        return observations[k], observations[k - 1]

    def s0(theta, x0):
        theta = np.asarray(theta, dtype=float)
        n = x0.shape[0]
        if (
            observations is None
            or len(observations) == 0
            or observations[0] is None
            or model.obs0_loglik_vec is None
        ):
            return np.zeros((n, p))
        h = spec.steps(theta)
        stack = _fd_stack(theta, h)
        vals = np.stack(
            [model.obs0_loglik_vec(tv, observations[0], x0) for tv in stack]
        )
        return _check_finite(
            _central_diff(vals, h), "for the initial observation score"
        )

    def s_k(theta, k, x_prev, aug):
        theta = np.asarray(theta, dtype=float)
        y, y_prev = _obs_pair(k)
        override = _make_start_override(
            model, k, observations[0] if observations else None
        )
        return _aug_scores(
            model, theta, spec, x_prev, aug, horizon, y, y_prev, override
        )

    def s_k_pairs(theta, k, x_prev, batch):
        if not isinstance(batch, PairBatch):
            raise ConfigError(
                "the score functional differentiates pathspace transitions; "
                "a discrete-time step cannot use it"
            )
        theta = np.asarray(theta, dtype=float)
        y, y_prev = _obs_pair(k)
        override = _make_start_override(
            model, k, observations[0] if observations else None
        )
        x_prev = np.atleast_2d(np.asarray(x_prev, dtype=float))
        n_prev = x_prev.shape[0]
        n_new = batch.x_prime.shape[0]

        if batch.variant == "construct_one":
            out = np.empty((n_new, n_prev, p))
            for i, aug in enumerate(batch.augs):
                out[i] = _aug_scores(
                    model, theta, spec, x_prev, aug, horizon, y, y_prev, override
                )
            return out

        _require_horizon(batch.horizon, horizon)
        if g_needed and y is None:
            raise ConfigError(
                "the observation density depends on theta here; the score "
                "computation needs the current observation"
            )
        x0 = np.tile(x_prev, (n_new, 1))
        xp = np.repeat(batch.x_prime, n_prev, axis=0)
        z = np.repeat(batch.z, n_prev, axis=0)
        if spec.mode == "analytic":
            _guard_analytic(model, batch.variant, override)
            fn = _resolve_analytic(model, spec)
            grads = _call_analytic(model, fn, theta, x0, xp, z, horizon)
        else:
            ji = (
                np.repeat(batch.jump_incr, n_prev, axis=0)
                if batch.jump_incr is not None
                else None
            )
            grads = _fd_rows(
                model, theta, spec, x0, xp, z, horizon, ji, y, y_prev, override
            )
            if batch.variant == "construct_two":
                rec = np.stack(
                    [
                        _fd_record_grad(model, theta, spec, aug.jumps, horizon)
                        for aug in batch.augs
                    ]
                )
                grads = grads.reshape(n_new, n_prev, p) + rec[:, None, :]
                return _check_finite(grads, "for the pairwise transition score")
        grads = grads.reshape(n_new, n_prev, p)
        return _check_finite(grads, "for the pairwise transition score")

    return AdditiveFunctional(dim=p, s0=s0, s_k=s_k, s_k_pairs=s_k_pairs)


# ---------------------------------------------------------------------------
# optimisers


@dataclass(frozen=True)
class AdamState:
    """Moment estimates for the adaptive update; a pure value, never mutated."""

    m: np.ndarray
    v: np.ndarray
    count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    alpha: float = 0.001
    eps: float = 1e-8


def adam_init(
    dim: int,
    *,
    beta1: float = 0.9,
    beta2: float = 0.999,
    alpha: float = 0.001,
    eps: float = 1e-8,
) -> AdamState:
    """Fresh optimiser state for a `dim`-dimensional parameter."""
    if not (0.0 <= beta1 < 1.0 and 0.0 <= beta2 < 1.0):
        raise ConfigError("adam decay rates must lie in [0, 1)")
    if alpha <= 0.0 or eps <= 0.0:
        raise ConfigError("adam step size and epsilon must be positive")
    return AdamState(
        m=np.zeros(dim), v=np.zeros(dim), count=0,
        beta1=beta1, beta2=beta2, alpha=alpha, eps=eps,
    )


def adam_update(state: AdamState, c: np.ndarray) -> tuple[AdamState, np.ndarray]:
    """One adaptive-moment update on gradient proxy c; returns the step.

    The four moment lines are applied exactly as usually displayed: decayed
    first and second moments, bias corrections by 1 - beta^n, and the step
    -alpha * mhat / (sqrt(vhat) + eps). The caller adds the step to its
    (transformed) parameter; a zero c leaves zero moments and a zero step,
    and replaying the same sequence of c values from the same initial state
    reproduces every step bit for bit.
    """
    c = np.asarray(c, dtype=float)
    if c.shape != state.m.shape:
        raise ConfigError(
            f"gradient shape {c.shape} does not match optimiser state "
            f"{state.m.shape}"
        )
    n = state.count + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * c
    v = state.beta2 * state.v + (1.0 - state.beta2) * c * c
    mhat = m / (1.0 - state.beta1 ** n)
    vhat = v / (1.0 - state.beta2 ** n)
    step = -state.alpha * mhat / (np.sqrt(vhat) + state.eps)
    return replace(state, m=m, v=v, count=n), step


def gamma_schedule(gamma0: float, n: int) -> float:
    """Decaying Robbins-Monro step gamma0 * n^(-0.6)."""
    if n < 1:
        raise ConfigError("schedule index starts at 1")
    return gamma0 * float(n) ** -0.6


# ---------------------------------------------------------------------------
# constrained coordinates


def _domains(model_or_domains) -> tuple:
    if isinstance(model_or_domains, SdeModel):
        return model_or_domains.param_domain
    return tuple(model_or_domains)


def transform_to_opt(theta: np.ndarray, domains) -> np.ndarray:
    """Map parameters to the unconstrained optimisation space."""
    theta = np.asarray(theta, dtype=float)
    out = theta.copy()
    for i, dom in enumerate(_domains(domains)):
        if dom == "positive":
            if theta[i] <= 0.0:
                raise ConfigError(
                    f"coordinate {i} must be positive, got {theta[i]!r}"
                )
            out[i] = math.log(theta[i])
    return out


def transform_from_opt(phi: np.ndarray, domains) -> np.ndarray:
    """Invert :func:`transform_to_opt`, wrapping periodic coordinates."""
    phi = np.asarray(phi, dtype=float)
    out = phi.copy()
    for i, dom in enumerate(_domains(domains)):
        if dom == "positive":
            out[i] = math.exp(phi[i])
        elif isinstance(dom, tuple) and dom[0] == "wrap":
            lo, hi = float(dom[1]), float(dom[2])
            out[i] = lo + (phi[i] - lo) % (hi - lo)
    return out


def transform_chain(theta: np.ndarray, domains) -> np.ndarray:
    """d(theta)/d(phi) per coordinate; multiplies a theta-space gradient."""
    theta = np.asarray(theta, dtype=float)
    fac = np.ones_like(theta)
    for i, dom in enumerate(_domains(domains)):
        if dom == "positive":
            fac[i] = theta[i]
    return fac


# ---------------------------------------------------------------------------
# online driver


@dataclass(frozen=True)
class OnlineFitResult:
    """Trajectory and terminal smoother state of one online fitting run.

    `thetas` has one row per processed observation plus the starting value
    in row 0; `logliks` holds the cumulative log-likelihood estimate after
    each observation (length = rows of `thetas` minus one).
    `feller_projections` counts how often the square-root-process boundary
    condition had to be restored by projection.
    """

    thetas: np.ndarray
    state: FilterState
    loglik: float
    logliks: np.ndarray | None = None
    feller_projections: int = 0


def online_gradient_ascent(
    model: SdeModel,
    ys: Sequence,
    theta0: np.ndarray,
    *,
    n_particles: int,
    m_steps: int,
    rng: np.random.Generator,
    selector: str = "continuous",
    grad: GradSpec | None = None,
    prior: Callable | None = None,
    y0=None,
    horizon: float = 1.0,
    optimizer: str = "adam",
    adam_kwargs: dict | None = None,
    gamma0: float | None = None,
    free_mask: Sequence[bool] | None = None,
    scheme: str = "multinomial",
    ess_threshold: float | None = None,
    guard: float = 1e6,
) -> OnlineFitResult:
    """Fit theta online: one smoother step, then one parameter update.

    The parameter is frozen while observation n is assimilated; the score
    proxy is the increase of the smoothed score estimate, c_n = -(S_n -
    S_{n-1}), handed to the optimiser in transformed space (gradients get
    the log-scale chain factor). The adaptive update is the default; pass
    optimizer="sgd" with gamma0 for the decaying schedule instead. The two
    are never combined. Coordinates where `free_mask` is False receive a
    zero gradient and therefore never move. Any transformed coordinate
    whose magnitude passes `guard` aborts the run; models flagged with
    `feller_check` are projected back onto the boundary-respecting region
    after each update, with a logged warning.
    """
    theta = np.asarray(theta0, dtype=float).copy()
    p = model.dim_theta
    if theta.shape != (p,):
        raise ConfigError(f"theta0 must have shape ({p},), got {theta.shape}")
    domains = model.param_domain
    if optimizer not in ("adam", "sgd"):
        raise ConfigError(f"unknown optimizer {optimizer!r}")
    if optimizer == "adam" and gamma0 is not None:
        raise ConfigError(
            "the decaying step schedule is an alternative to the adaptive "
            "update, not a modifier; drop gamma0 or choose optimizer='sgd'"
        )
    if optimizer == "sgd" and gamma0 is None:
        raise ConfigError("optimizer='sgd' needs gamma0")
    free = (
        np.ones(p, dtype=bool)
        if free_mask is None
        else np.asarray(free_mask, dtype=bool)
    )
    if free.shape != (p,):
        raise ConfigError(f"free_mask must have shape ({p},)")

    spec = grad if grad is not None else default_grad(model, selector)
    obs_buffer: list = [y0]
    functional = score_functional(
        model,
        observations=obs_buffer if (_obs_grad_needed(model) or y0 is not None) else None,
        grad=spec,
        horizon=horizon,
        selector=selector,
    )
    prior_fn = prior
    if prior_fn is None:
        if model.init_state is None:
            raise ConfigError(
                f"model {model.name!r} has no default initial state; pass a prior"
            )
        x_init = np.atleast_1d(np.asarray(model.init_state(theta, y0), dtype=float))

        def prior_fn(r, n):
            return np.broadcast_to(x_init, (n, model.dim_x)).copy()

    state = smoother_init(model, theta, prior_fn, y0, functional, n_particles, rng)
    s_prev = state.s_hat.copy()
    phi = transform_to_opt(theta, domains)
    adam = adam_init(p, **(adam_kwargs or {})) if optimizer == "adam" else None

    thetas = [theta.copy()]
    logliks = []
    n_projections = 0
    for n, y in enumerate(ys, start=1):
        obs_buffer.append(y)
        state = smoother_step(
            state, model, theta, y,
            selector=selector, m_steps=m_steps, rng=rng,
            horizon=horizon, scheme=scheme, ess_threshold=ess_threshold,
        )
        logliks.append(state.loglik)
        c = -(state.s_hat - s_prev)
        s_prev = state.s_hat.copy()
        if not np.all(np.isfinite(c)):
            bad = int(np.argmax(~np.isfinite(c)))
            raise NumericalDivergenceError(
                f"score proxy coordinate {bad} is not finite at observation "
                f"{n} (theta={theta.tolist()})"
            )
        c_phi = c * transform_chain(theta, domains)
        c_phi[~free] = 0.0
        if optimizer == "adam":
            adam, step_vec = adam_update(adam, c_phi)
        else:
            step_vec = -gamma_schedule(gamma0, n) * c_phi
        phi = phi + step_vec
        if np.any(np.abs(phi[free]) > guard):
            bad = int(np.argmax(np.abs(np.where(free, phi, 0.0))))
            raise NumericalDivergenceError(
                f"transformed coordinate {bad} reached {phi[bad]!r} at "
                f"observation {n} (|.| > {guard!r}); last theta "
                f"{theta.tolist()}, score proxy {c.tolist()}"
            )
        theta = transform_from_opt(phi, domains)
        if model.feller_check and not feller_ok(theta):
            theta[2] = math.sqrt(2.0 * theta[0] * theta[1]) * (1.0 - 1e-6)
            phi = transform_to_opt(theta, domains)
            n_projections += 1
            logger.warning(
                "observation %d: projected the volatility-of-volatility onto "
                "the boundary-respecting region (theta now %s)",
                n,
                np.array2string(theta, precision=6),
            )
        thetas.append(theta.copy())

    return OnlineFitResult(
        thetas=np.asarray(thetas),
        state=state,
        loglik=state.loglik,
        logliks=np.asarray(logliks),
        feller_projections=n_projections,
    )
