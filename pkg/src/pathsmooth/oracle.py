"""Exact reference computations used for validation.

Everything in this module has a closed form or a textbook recursion: the
Ornstein-Uhlenbeck transition law, Gaussian bridge moments derived from it,
and Kalman filtering/smoothing for scalar linear-Gaussian chains. These are
the yardsticks the Monte Carlo machinery is measured against, both in the
test suite and in the CLI's validate command.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import PathsmoothError

_LOG_2PI = float(np.log(2.0 * np.pi))


def _phi1(u: np.ndarray | float) -> np.ndarray | float:
    """(1 - exp(-u)) / u, continuous at u = 0."""
    u = np.asarray(u, dtype=float)
    small = np.abs(u) < 1e-8
    safe = np.where(small, 1.0, u)
    out = np.where(small, 1.0 - u / 2.0, -np.expm1(-safe) / safe)
    return out if out.ndim else float(out)


def ou_transition_moments(
    theta: np.ndarray, x: np.ndarray | float, delta: float
) -> tuple[np.ndarray, np.ndarray]:
    """Mean and variance of X_{t+delta} | X_t = x for dX = th1 (th2 - X) dt + th3 dW.

    The variance is written as th3^2 * delta * phi1(2 th1 delta) so the
    th1 -> 0 Brownian limit comes out of the same expression.
    """
    th1, th2, th3 = float(theta[0]), float(theta[1]), float(theta[2])
    x = np.asarray(x, dtype=float)
    decay = np.exp(-th1 * delta)
    mean = th2 + (x - th2) * decay
    var = th3 * th3 * delta * _phi1(2.0 * th1 * delta)
    return mean, np.broadcast_to(np.asarray(var), mean.shape).copy()


def ou_exact_transition(
    theta: np.ndarray,
    x: np.ndarray | float,
    x_prime: np.ndarray | float,
    delta: float,
) -> np.ndarray | float:
    """Log transition density of the O-U process over a step of length delta."""
    mean, var = ou_transition_moments(theta, x, delta)
    x_prime = np.asarray(x_prime, dtype=float)
    out = -0.5 * (_LOG_2PI + np.log(var) + (x_prime - mean) ** 2 / var)
    return out if out.ndim else float(out)


def ou_bridge_moments(
    theta: np.ndarray, x: float, x_prime: float, big_t: float, t: float
) -> tuple[float, float]:
    """Mean and variance of X_t | X_0 = x, X_T = x' for the O-U process.

    Gaussian conditioning on the joint law of (X_t, X_T) given X_0:
    Cov(X_t, X_T | X_0) = exp(-th1 (T - t)) Var(X_t | X_0).
    """
    if not 0.0 < t < big_t:
        raise ValueError("interior time required")
    th1 = float(theta[0])
    m_t, v_t = ou_transition_moments(theta, x, t)
    m_T, v_T = ou_transition_moments(theta, x, big_t)
    cov = np.exp(-th1 * (big_t - t)) * v_t
    mean = float(m_t + cov / v_T * (x_prime - m_T))
    var = float(v_t - cov * cov / v_T)
    return mean, var


@dataclass(frozen=True)
class LinearGaussianSpec:
    """Scalar linear-Gaussian chain x_k = a x_{k-1} + c + N(0, Q), y_k = x_k + N(0, R).

    The coefficient functions map a parameter vector to the five scalars
    (a, c, Q, R) and the initial law (m0, P0); P0 = 0 encodes a known x_0.
    """

    coeffs: Callable[[np.ndarray], tuple[float, float, float, float]]
    init: Callable[[np.ndarray], tuple[float, float]]
    dim_theta: int


def ou_linear_spec(delta: float = 1.0, obs_sd: float = 0.1) -> LinearGaussianSpec:
    """Exact linear-Gaussian representation of the noisily observed O-U chain."""

    def coeffs(theta: np.ndarray) -> tuple[float, float, float, float]:
        th1, th2, th3 = float(theta[0]), float(theta[1]), float(theta[2])
        a = float(np.exp(-th1 * delta))
        c = th2 * (1.0 - a)
        q = float(th3 * th3 * delta * _phi1(2.0 * th1 * delta))
        return a, c, q, obs_sd * obs_sd

    def init(theta: np.ndarray) -> tuple[float, float]:
        return 0.0, 0.0

    return LinearGaussianSpec(coeffs=coeffs, init=init, dim_theta=3)


def _kalman_pass(
    spec: LinearGaussianSpec, theta: np.ndarray, ys: np.ndarray
) -> tuple[float, np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    theta = np.asarray(theta, dtype=float)
    ys = np.asarray(ys, dtype=float)
    n1 = ys.size
    a, c, q, r = spec.coeffs(theta)
    m, p = spec.init(theta)
    if q <= 0.0 or r <= 0.0:
        raise PathsmoothError("innovation covariance is not positive definite")
    mf = np.empty(n1)
    pf = np.empty(n1)
    mp = np.empty(n1)
    pp = np.empty(n1)
    loglik = 0.0
    for k in range(n1):
        if k > 0:
            m = a * m + c
            p = a * a * p + q
        mp[k] = m
        pp[k] = p
        s = p + r
        loglik += -0.5 * (_LOG_2PI + np.log(s) + (ys[k] - m) ** 2 / s)
        gain = p / s
        m = m + gain * (ys[k] - m)
        p = p - gain * p
        mf[k] = m
        pf[k] = p
    return float(loglik), mf, pf, mp, pp


def kalman_loglik(spec: LinearGaussianSpec, theta: np.ndarray, ys: np.ndarray) -> float:
    """Exact log-likelihood of y_{0:n} under the linear-Gaussian chain."""
    return _kalman_pass(spec, theta, ys)[0]


def kalman_loglik_and_score(
    spec: LinearGaussianSpec,
    theta: np.ndarray,
    ys: np.ndarray,
    h_rel: float = 1e-6,
    free: np.ndarray | None = None,
) -> tuple[float, np.ndarray]:
    """Exact log-likelihood plus its score by central finite differences.

    `free` optionally masks coordinates: entries set to False are held fixed
    and get a zero score (used when a model pins a coordinate, as Experiment
    regimes do with the O-U mean).
    """
    theta = np.asarray(theta, dtype=float)
    ell = kalman_loglik(spec, theta, ys)
    grad = np.zeros(theta.size)
    mask = np.ones(theta.size, bool) if free is None else np.asarray(free, bool)
    for i in range(theta.size):
        if not mask[i]:
            continue
        h = h_rel * max(1.0, abs(theta[i]))
        up = theta.copy()
        dn = theta.copy()
        up[i] += h
        dn[i] -= h
        grad[i] = (kalman_loglik(spec, up, ys) - kalman_loglik(spec, dn, ys)) / (2.0 * h)
    return ell, grad


def kalman_smoothed_means(
    spec: LinearGaussianSpec, theta: np.ndarray, ys: np.ndarray
) -> np.ndarray:
    """Smoothed state means E[x_k | y_{0:n}] via the Rauch-Tung-Striebel pass."""
    _, mf, pf, mp, pp = _kalman_pass(spec, theta, ys)
    a, _, _, _ = spec.coeffs(np.asarray(theta, dtype=float))
    n1 = mf.size
    ms = mf.copy()
    for k in range(n1 - 2, -1, -1):
        if pp[k + 1] <= 0.0:
            continue
        gain = pf[k] * a / pp[k + 1]
        ms[k] = mf[k] + gain * (ms[k + 1] - mp[k + 1])
    return ms


def dense_gaussian_loglik(
    spec: LinearGaussianSpec, theta: np.ndarray, ys: np.ndarray
) -> float:
    """Joint Gaussian evaluation of the observation vector, for short series.

    Builds the full covariance of y_{0:n} directly; O(n^3), intended as an
    independent cross-check of the Kalman recursion on a handful of points.
    """
    theta = np.asarray(theta, dtype=float)
    ys = np.asarray(ys, dtype=float)
    n1 = ys.size
    a, c, q, r = spec.coeffs(theta)
    m0, p0 = spec.init(theta)
    means = np.empty(n1)
    m = m0
    for k in range(n1):
        if k > 0:
            m = a * m + c
        means[k] = m
    var = np.empty(n1)
    v = p0
    for k in range(n1):
        if k > 0:
            v = a * a * v + q
        var[k] = v
    cov = np.empty((n1, n1))
    for i in range(n1):
        for j in range(i, n1):
            cov[i, j] = cov[j, i] = var[i] * a ** (j - i)
    cov += r * np.eye(n1)
    diff = ys - means
    chol = np.linalg.cholesky(cov)
    alpha = np.linalg.solve(chol, diff)
    return float(
        -0.5 * (n1 * _LOG_2PI + alpha @ alpha) - np.sum(np.log(np.diag(chol)))
    )
