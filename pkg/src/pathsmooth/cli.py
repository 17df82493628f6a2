"""Command-line front end for simulation, scoring, fitting, and selection.

Five subcommands cover the workflow end to end: `simulate` writes synthetic
datasets, `score` estimates score functions by replicated smoothing runs,
`fit` runs the online gradient ascent, `select` races models by penalised
likelihood on a shared stream, and `validate` exercises a fixed-seed check
suite. Every command is deterministic given its settings and seed, and every
file-writing command drops a JSON manifest next to its output recording the
effective configuration, so any artifact can be regenerated bit for bit.

Settings resolve in three layers: command-line flags win, then the section
of the INI-style config file named after the subcommand, then built-in
defaults. The seed additionally falls back to the PATHSMOOTH_SEED
environment variable when neither a flag nor a config key supplies one.

Datasets are plain CSV with a header row. Ingestion looks for an
observation column named `y` or `value`, an optional `time` column (used to
infer the observation spacing when it is uniform), and an optional `date`
column carried through to selection output. The first data row is always
consumed as the conditioning observation y_0; filtering starts at the
second row.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import __version__, model_select, rml, smoother
from .bridge import bridge_forward_map, bridge_inverse_map, pathspace_sweep
from .errors import ConfigError, PathsmoothError
from .oracle import (
    kalman_loglik_and_score,
    ou_exact_transition,
    ou_linear_spec,
    ou_transition_moments,
)
from .sde_core import PathSegment, SdeModel, make_model, simulate_path

# Fixed-seed tolerances for the validate checks that involve Monte Carlo
# estimates. Calibrated against measured values with generous headroom; the
# --tolerance-scale flag multiplies them (so a tiny scale forces failures).
_KALMAN_SCORE_TOL = 15.0
_MESH_ROBUSTNESS_TOL = 10.0


# ---------------------------------------------------------------------------
# settings resolution


def _parse_floats(text: str) -> np.ndarray:
    parts = [p.strip() for p in text.split(",") if p.strip()]
    if not parts:
        raise ValueError("empty vector")
    return np.array([float(p) for p in parts])


_TRUE_WORDS = {"1", "true", "t", "yes", "on"}
_FALSE_WORDS = {"0", "false", "f", "no", "off"}


def _parse_bool(text: str) -> bool:
    word = text.strip().lower()
    if word in _TRUE_WORDS:
        return True
    if word in _FALSE_WORDS:
        return False
    raise ValueError(f"expected a boolean word, got {text!r}")


def _parse_mask(text: str) -> list[bool]:
    return [_parse_bool(p) for p in text.split(",") if p.strip()]


def _config_section(config_path: str | None, command: str) -> dict[str, str]:
    """Read one command's section of the key=value config file."""
    if config_path is None:
        return {}
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str  # keep n/N/M/R distinct
    try:
        with open(config_path) as fh:
            parser.read_file(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config file: {exc}") from None
    except configparser.Error as exc:
        raise ConfigError(f"bad config file {config_path!r}: {exc}") from None
    if not parser.has_section(command):
        return {}
    return {key.replace("-", "_"): value for key, value in parser.items(command)}


class _Settings:
    """Flag-over-config resolution with typed casts and an effective-value log.

    Every value handed out by `get` is recorded in `resolved`, which the
    manifests serialize; reproducing a run needs nothing beyond that dict.
    """

    def __init__(self, args: argparse.Namespace, section: dict[str, str]):
        self._args = vars(args)
        self._section = section
        self.resolved: dict = {}

    def get(self, key, cast=str, default=None, required=False):
        value = self._args.get(key)
        if value is None:
            value = self._section.get(key)
        if value is None:
            value = default
            if value is None and required:
                flag = "--" + key.replace("_", "-")
                raise ConfigError(
                    f"missing required setting {key!r} (flag {flag} or config key)"
                )
        elif isinstance(value, str) and cast is not str:
            try:
                value = cast(value)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"bad value for {key!r}: {exc}") from None
        if value is not None:
            self.resolved[key] = value
        return value


def _resolve_seed(sets: _Settings) -> int:
    seed = sets.get("seed", int)
    if seed is None:
        env = os.environ.get("PATHSMOOTH_SEED")
        if env is not None:
            try:
                seed = int(env)
            except ValueError:
                raise ConfigError(
                    f"PATHSMOOTH_SEED must be an integer, got {env!r}"
                ) from None
        else:
            seed = 0
    sets.resolved["seed"] = seed
    return seed


def _resolve_model(sets: _Settings) -> SdeModel:
    name = sets.get("model", str, required=True)
    obs_noise = sets.get("obs_noise", float)
    kwargs = {}
    if obs_noise is not None:
        if obs_noise <= 0.0:
            raise ConfigError(
                "obs-noise must be positive: the filter has no exactly-observed "
                "variant of this observation model"
            )
        if name == "heston":
            raise ConfigError(
                "the stochastic volatility model reads the price exactly; "
                "obs-noise does not apply"
            )
        kwargs["obs_sd"] = obs_noise
    return make_model(name, **kwargs)


def _resolve_theta(sets: _Settings, model: SdeModel, key: str) -> np.ndarray:
    theta = np.asarray(sets.get(key, _parse_floats, required=True), dtype=float)
    if theta.shape != (model.dim_theta,):
        raise ConfigError(
            f"{key} needs {model.dim_theta} coordinates for model "
            f"{model.name!r}, got {theta.size}"
        )
    # domain check only; the transformed value is discarded
    rml.transform_to_opt(theta, model.param_domain)
    return theta


def _resolve_selector(sets: _Settings, model: SdeModel) -> str:
    choice = sets.get("construct", str)
    if choice is None:
        return "construct_two" if model.has_jumps else "continuous"
    if choice not in ("one", "two"):
        raise ConfigError(f"construct must be 'one' or 'two', got {choice!r}")
    return "construct_one" if choice == "one" else "construct_two"


def _resolve_grad(sets: _Settings, model: SdeModel, selector: str) -> rml.GradSpec:
    choice = sets.get("grad", str)
    if choice is None:
        return rml.default_grad(model, selector)
    if choice == "fd":
        return rml.GradSpec()
    if choice == "analytic":
        spec = rml.default_grad(model, selector)
        if spec.mode != "analytic":
            raise ConfigError(
                f"no analytic gradient route for model {model.name!r} with "
                "this construct; use --grad fd"
            )
        return spec
    raise ConfigError(f"grad must be 'fd' or 'analytic', got {choice!r}")


def _resolve_scheme(sets: _Settings) -> tuple[str, float | None]:
    scheme = sets.get("resample", str, default="multinomial")
    if scheme not in ("multinomial", "systematic", "stratified"):
        raise ConfigError(f"unknown resampling scheme {scheme!r}")
    ess = sets.get("ess", float)
    if ess is not None and not 0.0 < ess <= 1.0:
        raise ConfigError("ess threshold must lie in (0, 1]")
    return scheme, ess


def _positive_int(sets: _Settings, key: str, default: int, minimum: int = 1) -> int:
    value = sets.get(key, int, default=default)
    if value < minimum:
        raise ConfigError(f"{key} must be at least {minimum}, got {value}")
    return value


# ---------------------------------------------------------------------------
# dataset ingestion and emission


@dataclass(frozen=True)
class Dataset:
    """Observation stream read from one CSV file."""

    ys: np.ndarray
    dates: list[str] | None
    times: np.ndarray | None


def _read_dataset(path: str) -> Dataset:
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise ConfigError(f"cannot read dataset: {exc}") from None
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ConfigError(f"{path}: empty file, expected a header row") from None
        cols = [h.strip().lower() for h in header]
        if "y" in cols:
            y_col = cols.index("y")
        elif "value" in cols:
            y_col = cols.index("value")
        else:
            raise ConfigError(
                f"{path}: no 'y' or 'value' column in header {header!r}; "
                "rename the observation column"
            )
        date_col = cols.index("date") if "date" in cols else None
        time_col = cols.index("time") if "time" in cols else None
        ys: list[float] = []
        dates: list[str] = []
        times: list[float] = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ConfigError(
                    f"{path}: line {lineno}: expected {len(header)} fields, "
                    f"got {len(row)}"
                )
            try:
                ys.append(float(row[y_col]))
            except ValueError:
                raise ConfigError(
                    f"{path}: line {lineno}: cannot parse observation "
                    f"{row[y_col]!r}"
                ) from None
            if date_col is not None:
                dates.append(row[date_col].strip())
            if time_col is not None:
                try:
                    times.append(float(row[time_col]))
                except ValueError:
                    raise ConfigError(
                        f"{path}: line {lineno}: cannot parse time "
                        f"{row[time_col]!r}"
                    ) from None
    return Dataset(
        ys=np.asarray(ys, dtype=float),
        dates=dates if dates else None,
        times=np.asarray(times, dtype=float) if times else None,
    )


def _resolve_horizon(sets: _Settings, data: Dataset | None) -> float:
    """Observation spacing: explicit flag, else inferred from a uniform
    time column, else 1.0."""
    delta = sets.get("delta", float)
    if delta is not None:
        if delta <= 0.0:
            raise ConfigError("delta must be positive")
        return delta
    if data is not None and data.times is not None and data.times.size >= 2:
        gaps = np.diff(data.times)
        tol = 1e-9 * max(1.0, abs(float(gaps[0])))
        if gaps[0] > 0.0 and np.all(np.abs(gaps - gaps[0]) <= tol):
            inferred = float(gaps[0])
            sets.resolved["delta"] = inferred
            return inferred
    sets.resolved["delta"] = 1.0
    return 1.0


def _split_stream(data: Dataset) -> tuple[float, np.ndarray]:
    """First row conditions the initial state; the rest are filtered."""
    if data.ys.size == 0:
        raise ConfigError("dataset has no observation rows")
    return float(data.ys[0]), data.ys[1:]


def _write_csv(path: str, header: list[str], rows) -> None:
    try:
        fh = open(path, "w", newline="")
    except OSError as exc:
        raise ConfigError(f"cannot write output: {exc}") from None
    with fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def _jsonable(value):
    if isinstance(value, np.ndarray):
        return [float(v) for v in value]
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    if isinstance(value, (list, tuple)):
        return list(value)
    raise TypeError(f"cannot serialize {type(value).__name__}")


def _write_manifest(out_path: str, command: str, sets: _Settings, extra: dict | None = None):
    doc = {
        "command": command,
        "package": f"pathsmooth {__version__}",
        "settings": sets.resolved,
    }
    if extra:
        doc.update(extra)
    path = out_path + ".manifest.json"
    try:
        fh = open(path, "w")
    except OSError as exc:
        raise ConfigError(f"cannot write manifest: {exc}") from None
    with fh:
        json.dump(doc, fh, indent=2, sort_keys=True, default=_jsonable)
        fh.write("\n")


# ---------------------------------------------------------------------------
# shared run helpers


def _dirac_prior(model: SdeModel, theta: np.ndarray, y0):
    x0 = np.asarray(model.init_state(theta, y0), dtype=float)

    def prior(rng, n):
        return np.tile(x0, (n, 1))

    return prior


def _initial_observation(model: SdeModel, theta, x0, rng) -> float:
    if model.obs_stat_coord is not None:
        # the observed coordinate is read off exactly at time zero
        return float(x0[0])
    frozen = PathSegment(times=np.array([0.0, 0.0]), states=np.stack([x0, x0]))
    return float(model.obs_sampler(theta, None, frozen, rng))


def _run_score_once(
    model: SdeModel,
    theta: np.ndarray,
    observations: list,
    grad: rml.GradSpec,
    selector: str,
    n_particles: int,
    m_steps: int,
    rng: np.random.Generator,
    horizon: float,
    scheme: str = "multinomial",
    ess: float | None = None,
):
    """One full smoothing pass; returns the terminal filter state."""
    y0 = float(observations[0])
    functional = rml.score_functional(
        model, observations=observations, grad=grad, horizon=horizon,
        selector=selector,
    )
    state = smoother.init(
        model, theta, _dirac_prior(model, theta, y0), y0, functional,
        n_particles, rng,
    )
    for y in observations[1:]:
        state = smoother.step(
            state, model, theta, float(y), selector, m_steps, rng,
            horizon=horizon, scheme=scheme, ess_threshold=ess,
        )
    return state


# ---------------------------------------------------------------------------
# subcommands


def cmd_simulate(args: argparse.Namespace) -> int:
    sets = _Settings(args, _config_section(args.config, "simulate"))
    model = _resolve_model(sets)
    theta = _resolve_theta(sets, model, "theta")
    n = sets.get("n", int, required=True)
    if n < 0:
        raise ConfigError("n must be nonnegative")
    delta = sets.get("delta", float, default=1.0)
    if delta <= 0.0:
        raise ConfigError("delta must be positive")
    m_sub = _positive_int(sets, "M", default=20)
    seed = _resolve_seed(sets)
    out = sets.get("out", str, required=True)
    latent = bool(sets.get("latent", _parse_bool, default=False))

    x0_setting = sets.get("x0", _parse_floats)
    if x0_setting is not None:
        x0 = np.asarray(x0_setting, dtype=float)
    else:
        x0 = np.asarray(model.init_state(theta, 0.0), dtype=float)
        sets.resolved["x0"] = x0
    if x0.shape != (model.dim_x,):
        raise ConfigError(
            f"x0 needs {model.dim_x} coordinates for model {model.name!r}"
        )

    rng = np.random.default_rng(np.random.SeedSequence(seed))
    header = ["index", "time", "y"]
    if latent:
        header += [f"x{i + 1}" for i in range(model.dim_x)]
    rows = []
    if n > 0:
        y = _initial_observation(model, theta, x0, rng)
        rows.append([0, 0.0, y] + ([float(v) for v in x0] if latent else []))
        current, y_prev = x0, y
        for i in range(1, n):
            segment = simulate_path(model, theta, current, delta, m_sub, rng)
            current = segment.states[-1]
            y = float(model.obs_sampler(theta, y_prev, segment, rng))
            rows.append(
                [i, i * delta, y]
                + ([float(v) for v in current] if latent else [])
            )
            y_prev = y
    _write_csv(out, header, rows)
    _write_manifest(out, "simulate", sets)
    return 0


def cmd_score(args: argparse.Namespace) -> int:
    sets = _Settings(args, _config_section(args.config, "score"))
    model = _resolve_model(sets)
    theta = _resolve_theta(sets, model, "theta")
    data = _read_dataset(sets.get("data", str, required=True))
    horizon = _resolve_horizon(sets, data)
    selector = _resolve_selector(sets, model)
    grad = _resolve_grad(sets, model, selector)
    scheme, ess = _resolve_scheme(sets)
    n_particles = _positive_int(sets, "N", default=100, minimum=2)
    m_steps = _positive_int(sets, "M", default=20)
    replicates = _positive_int(sets, "R", default=1)
    seed = _resolve_seed(sets)
    out = sets.get("out", str, required=True)
    _split_stream(data)  # fails early on an empty file
    observations = [float(v) for v in data.ys]

    def one(r: int):
        rng = np.random.default_rng(np.random.SeedSequence((seed, r)))
        state = _run_score_once(
            model, theta, observations, grad, selector, n_particles,
            m_steps, rng, horizon, scheme, ess,
        )
        return r, np.asarray(state.s_hat, dtype=float), float(state.loglik)

    if replicates == 1:
        results = [one(0)]
    else:
        with ThreadPoolExecutor(
            max_workers=min(replicates, os.cpu_count() or 1)
        ) as pool:
            results = list(pool.map(one, range(replicates)))
        results.sort(key=lambda item: item[0])

    p = model.dim_theta
    header = ["replicate"] + [f"score{i + 1}" for i in range(p)] + ["loglik"]
    rows = [
        [r] + [float(v) for v in s_hat] + [loglik]
        for r, s_hat, loglik in results
    ]
    _write_csv(out, header, rows)

    scores = np.array([s for _, s, _ in results])
    quantiles = {
        f"score{i + 1}": {
            "mean": float(scores[:, i].mean()),
            "q05": float(np.quantile(scores[:, i], 0.05)),
            "q25": float(np.quantile(scores[:, i], 0.25)),
            "q50": float(np.quantile(scores[:, i], 0.50)),
            "q75": float(np.quantile(scores[:, i], 0.75)),
            "q95": float(np.quantile(scores[:, i], 0.95)),
        }
        for i in range(p)
    }
    extra: dict = {"summary": quantiles}
    if sets.get("oracle", _parse_bool, default=False):
        if model.name != "ou" or model.has_jumps:
            raise ConfigError(
                "oracle comparison is available for the plain mean-reverting "
                "model only"
            )
        obs_sd = sets.resolved.get("obs_noise", 0.1)
        ell, score = kalman_loglik_and_score(
            ou_linear_spec(horizon, obs_sd), theta, data.ys
        )
        extra["oracle"] = {"loglik": ell, "score": [float(v) for v in score]}
    _write_manifest(out, "score", sets, extra)
    return 0


def cmd_fit(args: argparse.Namespace) -> int:
    sets = _Settings(args, _config_section(args.config, "fit"))
    model = _resolve_model(sets)
    theta0 = _resolve_theta(sets, model, "theta0")
    data = _read_dataset(sets.get("data", str, required=True))
    horizon = _resolve_horizon(sets, data)
    selector = _resolve_selector(sets, model)
    grad = _resolve_grad(sets, model, selector)
    scheme, ess = _resolve_scheme(sets)
    n_particles = _positive_int(sets, "N", default=100, minimum=2)
    m_steps = _positive_int(sets, "M", default=20)
    seed = _resolve_seed(sets)
    out = sets.get("out", str, required=True)

    optimizer = sets.get("optimizer", str, default="adam")
    gamma0 = sets.get("gamma0", float)
    free_mask = sets.get("free_mask", _parse_mask)
    adam_kwargs = None
    if optimizer == "adam":
        adam_kwargs = {
            key: sets.get(key, float)
            for key in ("alpha", "beta1", "beta2", "eps")
            if sets.get(key, float) is not None
        } or None

    y0, stream = _split_stream(data)
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    result = rml.online_gradient_ascent(
        model,
        [float(v) for v in stream],
        theta0,
        n_particles=n_particles,
        m_steps=m_steps,
        rng=rng,
        selector=selector,
        grad=grad,
        y0=y0,
        horizon=horizon,
        optimizer=optimizer,
        adam_kwargs=adam_kwargs,
        gamma0=gamma0,
        free_mask=free_mask,
        scheme=scheme,
        ess_threshold=ess,
    )

    # the y_0 factor: with a point-mass prior every particle carries the
    # same initial observation density, so the constant is exact
    x0 = np.asarray(model.init_state(theta0, y0), dtype=float)
    base = float(np.asarray(model.obs0_loglik_vec(theta0, y0, x0[None]))[0])

    p = model.dim_theta
    header = ["n"] + [f"theta{i + 1}" for i in range(p)] + ["loglik_increment"]
    rows = [[0] + [float(v) for v in result.thetas[0]] + [base]]
    logliks = np.asarray(result.logliks, dtype=float)
    for k in range(1, result.thetas.shape[0]):
        previous = logliks[k - 2] if k >= 2 else base
        rows.append(
            [k]
            + [float(v) for v in result.thetas[k]]
            + [float(logliks[k - 1] - previous)]
        )
    _write_csv(out, header, rows)
    _write_manifest(
        out,
        "fit",
        sets,
        {
            "final": {
                "theta": [float(v) for v in result.thetas[-1]],
                "loglik": float(result.loglik),
                "feller_projections": result.feller_projections,
            }
        },
    )
    return 0


def cmd_select(args: argparse.Namespace) -> int:
    sets = _Settings(args, _config_section(args.config, "select"))
    names = [
        part.strip()
        for part in sets.get("models", str, required=True).split(",")
        if part.strip()
    ]
    if not names:
        raise ConfigError("models must name at least one built-in model")
    theta0_text = sets.get("theta0", str, required=True)
    theta0_parts = [part for part in theta0_text.split(";") if part.strip()]
    if len(theta0_parts) != len(names):
        raise ConfigError(
            f"theta0 must give {len(names)} semicolon-separated vectors, "
            f"got {len(theta0_parts)}"
        )
    mask_text = sets.get("free_mask", str)
    mask_parts = None
    if mask_text is not None:
        mask_parts = [part for part in mask_text.split(";") if part.strip()]
        if len(mask_parts) != len(names):
            raise ConfigError(
                f"free-mask must give {len(names)} semicolon-separated masks"
            )

    data = _read_dataset(sets.get("data", str, required=True))
    horizon = _resolve_horizon(sets, data)
    scheme, ess = _resolve_scheme(sets)
    n_particles = _positive_int(sets, "N", default=100, minimum=2)
    m_steps = _positive_int(sets, "M", default=20)
    seed = _resolve_seed(sets)
    out = sets.get("out", str, required=True)
    y0, stream = _split_stream(data)
    if stream.size == 0:
        raise ConfigError("model selection needs at least two dataset rows")

    obs_noise = sets.resolved.get("obs_noise")
    entries = []
    for i, name in enumerate(names):
        kwargs = {"obs_sd": obs_noise} if obs_noise is not None else {}
        model = make_model(name, **kwargs)
        try:
            theta0 = np.asarray(_parse_floats(theta0_parts[i]), dtype=float)
        except ValueError as exc:
            raise ConfigError(f"bad theta0 for model {name!r}: {exc}") from None
        if theta0.shape != (model.dim_theta,):
            raise ConfigError(
                f"theta0 for model {name!r} needs {model.dim_theta} "
                f"coordinates, got {theta0.size}"
            )
        selector = _resolve_selector(sets, model)
        entries.append(
            model_select.ModelEntry(
                model_id=name,
                model=model,
                theta0=theta0,
                selector=selector,
                grad=_resolve_grad(sets, model, selector),
                free_mask=_parse_mask(mask_parts[i]) if mask_parts else None,
                y0=y0,
            )
        )

    tracks = model_select.compare_models(
        entries,
        [float(v) for v in stream],
        n_particles=n_particles,
        m_steps=m_steps,
        master_seed=seed,
        horizon=horizon,
        ess_threshold=ess,
        scheme=scheme,
    )
    dates = data.dates[1:] if data.dates else None
    try:
        model_select.write_selection_csv(out, tracks, dates)
    except OSError as exc:
        raise ConfigError(f"cannot write output: {exc}") from None
    _write_manifest(
        out,
        "select",
        sets,
        {
            "final": {
                track.model_id: {
                    "loglik": float(track.loglik),
                    "bic": float(model_select.bic(track)),
                    "theta": [float(v) for v in track.theta],
                }
                for track in tracks
            }
        },
    )
    return 0


# ---------------------------------------------------------------------------
# validation suite


def _check_round_trip(seed: int) -> tuple[float, float]:
    """Invert-then-rebuild identity of the guided path map, four models."""
    cases = [
        ("ou", np.array([0.5, 0.0, 0.4]), np.array([0.2])),
        ("periodic", np.array([0.9, 0.35]), np.array([0.1])),
        ("heston", np.array([1.2, 0.16, 0.3, 0.05]), np.array([0.0, 0.2])),
        ("rates_m3", np.array([0.05, -0.06, 0.1, 0.3, 0.15]), np.array([0.8])),
    ]
    rng = np.random.default_rng(np.random.SeedSequence((seed, 11)))
    worst = 0.0
    for name, theta, base in cases:
        model = make_model(name)
        for _ in range(8):
            start = base + rng.uniform(-0.05, 0.05, size=base.size)
            path = simulate_path(model, theta, start, 1.0, 16, rng, jumps=None)
            x_prime = path.states[-1]
            z = bridge_inverse_map(model, theta, path, start, x_prime)
            rebuilt = bridge_forward_map(model, theta, z, start, x_prime, 1.0)
            worst = max(worst, float(np.abs(rebuilt.states - path.states).max()))
            z_again = bridge_inverse_map(model, theta, rebuilt, start, x_prime)
            worst = max(
                worst, float(np.abs(z_again.increments - z.increments).max())
            )
    return worst, 1e-10


def _check_bridge_unbiasedness(seed: int) -> tuple[float, float]:
    """Averaged density estimates converge to the exact transition at first
    order in the grid: quadrupling the step count must cut the offset to
    roughly a quarter. A defect in any density factor leaves an offset that
    does not shrink, so the offset ratio is the operative signal."""
    theta = np.array([0.4, 0.0, 0.5])
    model = make_model("ou")
    target_x, draws = 0.7, 20000
    exact = float(np.exp(ou_exact_transition(theta, 0.0, target_x, 1.0)))
    offsets = []
    for m_steps in (12, 48):
        delta = 1.0 / m_steps
        rng = np.random.default_rng(np.random.SeedSequence((seed, 13, m_steps)))
        z = rng.normal(size=(draws, m_steps, 1)) * np.sqrt(delta)
        logdens, _ = pathspace_sweep(
            model,
            theta[None],
            np.zeros((draws, 1)),
            np.full((draws, 1), target_x),
            z,
            1.0,
        )
        offsets.append(abs(float(np.exp(logdens[0]).mean()) - exact))
    return offsets[1] / offsets[0], 0.55


def _validation_stream(seed: int, n: int = 40) -> list[float]:
    truth = np.array([0.5, 0.0, 0.4])
    obs_sd = 0.1
    rng = np.random.default_rng(np.random.SeedSequence((seed, 17)))
    x = 0.0
    ys = [x + obs_sd * float(rng.normal())]
    for _ in range(n):
        mean, var = ou_transition_moments(truth, x, 1.0)
        x = float(mean + np.sqrt(var) * rng.normal())
        ys.append(x + obs_sd * float(rng.normal()))
    return ys


def _check_kalman_score(seed: int) -> tuple[float, float]:
    """Particle score versus the exact linear-Gaussian score on one run."""
    theta = np.array([0.4, 0.0, 0.5])
    model = make_model("ou")
    ys = _validation_stream(seed)
    rng = np.random.default_rng(np.random.SeedSequence((seed, 19)))
    state = _run_score_once(
        model, theta, ys, rml.default_grad(model), "continuous", 300, 10,
        rng, 1.0,
    )
    _, oracle = kalman_loglik_and_score(
        ou_linear_spec(1.0, 0.1), theta, np.asarray(ys)
    )
    return float(np.abs(state.s_hat - oracle).max()), _KALMAN_SCORE_TOL


def _check_mesh_robustness(seed: int) -> tuple[float, float]:
    """Score estimates on a coarse and a fine grid must stay close."""
    theta = np.array([0.4, 0.0, 0.5])
    model = make_model("ou")
    ys = _validation_stream(seed)
    estimates = []
    for stream_id, m_steps in ((23, 10), (29, 80)):
        rng = np.random.default_rng(np.random.SeedSequence((seed, stream_id)))
        state = _run_score_once(
            model, theta, ys, rml.default_grad(model), "continuous", 300,
            m_steps, rng, 1.0,
        )
        estimates.append(np.asarray(state.s_hat, dtype=float))
    return float(np.abs(estimates[1] - estimates[0]).max()), _MESH_ROBUSTNESS_TOL


def cmd_validate(args: argparse.Namespace) -> int:
    sets = _Settings(args, _config_section(args.config, "validate"))
    seed = _resolve_seed(sets)
    scale = sets.get("tolerance_scale", float, default=1.0)
    if scale <= 0.0:
        raise ConfigError("tolerance-scale must be positive")
    checks = [
        ("round_trip", _check_round_trip),
        ("bridge_unbiasedness", _check_bridge_unbiasedness),
        ("kalman_score", _check_kalman_score),
        ("mesh_robustness", _check_mesh_robustness),
    ]
    failures = 0
    for name, check in checks:
        measured, base = check(seed)
        tolerance = base * scale
        ok = measured <= tolerance
        if not ok:
            failures += 1
        print(
            f"{'PASS' if ok else 'FAIL'} {name}: measured {measured:.3e}, "
            f"tolerance {tolerance:.3e}"
        )
    print(f"{len(checks) - failures} of {len(checks)} checks passed (seed {seed})")
    return 0 if failures == 0 else 4


# ---------------------------------------------------------------------------
# argument surface


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pathsmooth",
        description="Particle smoothing, score estimation, online fitting, "
        "and model selection for jump diffusions.",
    )
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    def common(p: argparse.ArgumentParser, *, data=False, model=False):
        p.add_argument("--config", help="INI config file; flags override its keys")
        p.add_argument("--seed", help="integer seed (falls back to PATHSMOOTH_SEED)")
        if data:
            p.add_argument("--data", help="dataset CSV (header row; y or value column)")
        if model:
            p.add_argument("--model", help="built-in model name")
            p.add_argument(
                "--obs-noise", dest="obs_noise",
                help="observation noise standard deviation (must be positive)",
            )

    sim = sub.add_parser("simulate", help="write a synthetic dataset")
    common(sim, model=True)
    sim.add_argument("--theta", help="comma-separated data-generating parameter")
    sim.add_argument("--n", help="number of rows to emit (row 0 is y_0)")
    sim.add_argument("--delta", help="observation spacing (default 1.0)")
    sim.add_argument("--M", help="Euler substeps per interval (default 20)")
    sim.add_argument("--x0", help="initial state, comma-separated")
    sim.add_argument(
        "--latent", action="store_true", default=None,
        help="include the latent state columns",
    )
    sim.add_argument("--out", help="output CSV path")

    score = sub.add_parser("score", help="replicated score estimates")
    common(score, data=True, model=True)
    score.add_argument("--theta", help="evaluation point, comma-separated")
    score.add_argument("--N", help="particles (default 100)")
    score.add_argument("--M", help="Euler steps per interval (default 20)")
    score.add_argument("--R", help="independent replicates (default 1)")
    score.add_argument("--construct", help="jump construct: one or two")
    score.add_argument("--grad", help="gradient route: fd or analytic")
    score.add_argument(
        "--resample", help="multinomial, systematic, or stratified"
    )
    score.add_argument("--ess", help="ESS fraction triggering resampling")
    score.add_argument("--delta", help="observation spacing (default: inferred)")
    score.add_argument(
        "--oracle", action="store_true", default=None,
        help="attach the exact linear-Gaussian score to the manifest",
    )
    score.add_argument("--out", help="output CSV path")

    fit = sub.add_parser("fit", help="online maximum likelihood")
    common(fit, data=True, model=True)
    fit.add_argument("--theta0", help="starting parameter, comma-separated")
    fit.add_argument("--N", help="particles (default 100)")
    fit.add_argument("--M", help="Euler steps per interval (default 20)")
    fit.add_argument("--construct", help="jump construct: one or two")
    fit.add_argument("--grad", help="gradient route: fd or analytic")
    fit.add_argument("--resample", help="multinomial, systematic, or stratified")
    fit.add_argument("--ess", help="ESS fraction triggering resampling")
    fit.add_argument("--delta", help="observation spacing (default: inferred)")
    fit.add_argument("--optimizer", help="adam (default) or sgd")
    fit.add_argument("--alpha", help="adam step size")
    fit.add_argument("--gamma0", help="sgd schedule scale (sgd only)")
    fit.add_argument(
        "--free-mask", dest="free_mask",
        help="comma-separated booleans; false pins a coordinate",
    )
    fit.add_argument("--out", help="output CSV path")

    select = sub.add_parser("select", help="race models by penalised likelihood")
    common(select, data=True)
    select.add_argument("--models", help="comma-separated built-in model names")
    select.add_argument(
        "--theta0",
        help="semicolon-separated starting vectors, one per model",
    )
    select.add_argument(
        "--free-mask", dest="free_mask",
        help="semicolon-separated masks, one per model",
    )
    select.add_argument(
        "--obs-noise", dest="obs_noise",
        help="observation noise applied to every contender",
    )
    select.add_argument("--N", help="particles (default 100)")
    select.add_argument("--M", help="Euler steps per interval (default 20)")
    select.add_argument("--construct", help="jump construct: one or two")
    select.add_argument("--grad", help="gradient route: fd or analytic")
    select.add_argument("--resample", help="multinomial, systematic, or stratified")
    select.add_argument("--ess", help="ESS fraction triggering resampling")
    select.add_argument("--delta", help="observation spacing (default: inferred)")
    select.add_argument("--out", help="output CSV path")

    validate = sub.add_parser("validate", help="fixed-seed check suite")
    common(validate)
    validate.add_argument(
        "--tolerance-scale", dest="tolerance_scale",
        help="multiply every check tolerance (tiny values force failures)",
    )

    return parser


_HANDLERS = {
    "simulate": cmd_simulate,
    "score": cmd_score,
    "fit": cmd_fit,
    "select": cmd_select,
    "validate": cmd_validate,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return _HANDLERS[args.command](args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except PathsmoothError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
