"""Online BIC tracking and pairwise comparison of fitted model families.

A :class:`BicTrack` records, per observation, the running log-likelihood
estimate produced by a model's own online fitting run together with the
running parameter estimate; nothing is refiltered after the fact, so the
whole comparison stays single-pass. The penalised criterion is then a
deterministic function of the track: -2 * loglik + dim * log n. Pairwise
comparisons subtract one model's criterion from the other's after every
observation, which is the usable form of the printed statistic (see
`bic_difference`).

When several models are raced on the same stream, each gets its own
particle system seeded from one shared master seed, so two runs of
literally identical models produce identical log-likelihood tracks and
their comparison collapses to the penalty term alone.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigError, StreamMismatchError
from .rml import GradSpec, OnlineFitResult, online_gradient_ascent
from .sde_core import SdeModel

__all__ = [
    "BicTrack",
    "ModelEntry",
    "advance",
    "bic",
    "bic_series",
    "bic_value",
    "bic_difference",
    "new_track",
    "track_from_fit",
    "compare_models",
    "selection_rows",
    "write_selection_csv",
]

# Stream tag for the per-model generators inside compare_models. Every
# model derives its generator from (master_seed, _TRACK_STREAM), i.e. the
# same stream, so models consuming equally many draws see common random
# numbers and their BIC difference is not inflated by independent noise.
_TRACK_STREAM = 0x51C


@dataclass(frozen=True)
class BicTrack:
    """Running log-likelihood and parameter history of one fitted model.

    `logliks[k]` is the cumulative log-likelihood estimate after
    observation k+1; `thetas[k]` is the parameter estimate at the same
    point. The observation count only ever grows through :func:`advance`.
    """

    model_id: str
    dim_theta: int
    logliks: np.ndarray = field(default_factory=lambda: np.zeros(0))
    thetas: tuple = ()

    def __post_init__(self):
        object.__setattr__(
            self, "logliks", np.asarray(self.logliks, dtype=float)
        )
        if self.dim_theta < 1:
            raise ConfigError("dim_theta must be at least 1")
        if self.logliks.ndim != 1:
            raise ConfigError("logliks must be a flat sequence")
        if not np.all(np.isfinite(self.logliks)):
            raise ConfigError("log-likelihood proxy must stay finite")
        if len(self.thetas) not in (0, self.logliks.size):
            raise ConfigError("need one theta per recorded observation, or none")

    @property
    def n(self) -> int:
        return int(self.logliks.size)

    @property
    def loglik(self) -> float:
        if self.n == 0:
            raise ConfigError("track has not seen any observation yet")
        return float(self.logliks[-1])

    @property
    def theta(self) -> np.ndarray:
        if not self.thetas:
            raise ConfigError("track carries no parameter history")
        return self.thetas[-1]


def new_track(model_id: str, dim_theta: int) -> BicTrack:
    """Empty track for a model with `dim_theta` free parameters."""
    return BicTrack(model_id=model_id, dim_theta=dim_theta)


def advance(track: BicTrack, loglik: float, theta=None) -> BicTrack:
    """Append one observation's cumulative log-likelihood (and parameter)."""
    if not np.isfinite(loglik):
        raise ConfigError(
            f"non-finite log-likelihood at observation {track.n + 1} "
            f"of {track.model_id!r}"
        )
    thetas = track.thetas
    if theta is not None:
        thetas = thetas + (np.asarray(theta, dtype=float).copy(),)
    elif thetas:
        raise ConfigError("a track with parameter history needs theta each step")
    return BicTrack(
        model_id=track.model_id,
        dim_theta=track.dim_theta,
        logliks=np.append(track.logliks, float(loglik)),
        thetas=thetas,
    )


def track_from_fit(
    model_id: str, dim_theta: int, result: OnlineFitResult
) -> BicTrack:
    """Wrap an online fitting run's history as a track."""
    if result.logliks is None:
        raise ConfigError("the fitting result carries no log-likelihood history")
    return BicTrack(
        model_id=model_id,
        dim_theta=dim_theta,
        logliks=result.logliks,
        thetas=tuple(np.asarray(t, dtype=float) for t in result.thetas[1:]),
    )


def bic_value(loglik: float, dim_theta: int, n) -> float:
    """Penalised criterion -2 * loglik + dim * log n."""
    if n < 1:
        raise ConfigError("the criterion needs at least one observation")
    return -2.0 * float(loglik) + dim_theta * float(np.log(n))


def bic(track: BicTrack) -> float:
    """Criterion at the track's current observation count."""
    return bic_value(track.loglik, track.dim_theta, track.n)


def bic_series(track: BicTrack) -> np.ndarray:
    """Criterion after every observation, shape (n,)."""
    if track.n == 0:
        raise ConfigError("the criterion needs at least one observation")
    counts = np.arange(1, track.n + 1, dtype=float)
    return -2.0 * track.logliks + track.dim_theta * np.log(counts)


def bic_difference(track_a: BicTrack, track_b: BicTrack) -> np.ndarray:
    """Running criterion difference a minus b after every observation.

    The printed comparison statistic for a nested pair adds the two
    log-likelihoods, but everything done with it afterwards treats it as a
    comparison, so this emits BIC(a) - BIC(b): negative values favour a.
    """
    if track_a.n != track_b.n:
        raise StreamMismatchError(
            f"tracks saw different stream lengths: {track_a.model_id!r} has "
            f"{track_a.n}, {track_b.model_id!r} has {track_b.n}"
        )
    return bic_series(track_a) - bic_series(track_b)


# ---------------------------------------------------------------------------
# racing several models on one stream


@dataclass(frozen=True)
class ModelEntry:
    """One contender in a model comparison: the model and its fit settings."""

    model_id: str
    model: SdeModel
    theta0: np.ndarray
    selector: str = "continuous"
    grad: GradSpec | None = None
    free_mask: Sequence | None = None
    y0: object = None


def compare_models(
    entries: Sequence[ModelEntry],
    ys: Sequence,
    *,
    n_particles: int,
    m_steps: int,
    master_seed: int,
    horizon: float = 1.0,
    ess_threshold: float | None = None,
    **fit_kwargs,
) -> list[BicTrack]:
    """Fit every entry on the same stream and return one track each.

    Each model runs its own filter, but all generators are spawned from
    (master_seed, shared stream), giving common random numbers across
    models whose draw sequences line up.
    """
    if not entries:
        raise ConfigError("model comparison needs at least one entry")
    ids = [e.model_id for e in entries]
    if len(set(ids)) != len(ids):
        raise ConfigError(f"duplicate model ids in comparison: {ids}")
    tracks = []
    for entry in entries:
        rng = np.random.default_rng(
            np.random.SeedSequence((int(master_seed), _TRACK_STREAM))
        )
        result = online_gradient_ascent(
            entry.model,
            ys,
            np.asarray(entry.theta0, dtype=float),
            n_particles=n_particles,
            m_steps=m_steps,
            rng=rng,
            selector=entry.selector,
            grad=entry.grad,
            free_mask=entry.free_mask,
            y0=entry.y0,
            horizon=horizon,
            ess_threshold=ess_threshold,
            **fit_kwargs,
        )
        tracks.append(
            track_from_fit(entry.model_id, entry.model.dim_theta, result)
        )
    return tracks


# ---------------------------------------------------------------------------
# tabular emission


def selection_rows(
    tracks: Sequence[BicTrack], dates: Sequence | None = None
) -> tuple[list[str], list[list]]:
    """Header and one row per observation: n, date?, loglik/BIC per model,
    and every pairwise difference (first id minus second)."""
    if not tracks:
        raise ConfigError("nothing to tabulate")
    n = tracks[0].n
    for t in tracks[1:]:
        if t.n != n:
            raise StreamMismatchError(
                f"tracks saw different stream lengths: {tracks[0].model_id!r} "
                f"has {n}, {t.model_id!r} has {t.n}"
            )
    if n == 0:
        raise ConfigError("tracks are empty")
    if dates is not None and len(dates) != n:
        raise StreamMismatchError(
            f"got {len(dates)} dates for {n} observations"
        )
    header = ["n"]
    if dates is not None:
        header.append("date")
    for t in tracks:
        header += [f"loglik_{t.model_id}", f"bic_{t.model_id}"]
    pairs = [
        (i, j) for i in range(len(tracks)) for j in range(i + 1, len(tracks))
    ]
    for i, j in pairs:
        header.append(f"bic_{tracks[i].model_id}_minus_{tracks[j].model_id}")
    series = [bic_series(t) for t in tracks]
    rows = []
    for k in range(n):
        row: list = [k + 1]
        if dates is not None:
            row.append(dates[k])
        for t, s in zip(tracks, series):
            row += [t.logliks[k], s[k]]
        for i, j in pairs:
            row.append(series[i][k] - series[j][k])
        rows.append(row)
    return header, rows


def write_selection_csv(
    path, tracks: Sequence[BicTrack], dates: Sequence | None = None
) -> None:
    """Write :func:`selection_rows` to `path` as comma-separated values."""
    header, rows = selection_rows(tracks, dates)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)
