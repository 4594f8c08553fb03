"""Sequential hyperparameter search with a tree-structured Parzen estimator.

Completed trials are split at the gamma-quantile of the objective (lower is
better, always) into a good set and a bad set. Each dimension gets one
Parzen density per set: truncated Gaussians around numeric observations
with neighbour-gap bandwidths, smoothed category counts for categorical
dimensions. Both densities mix in one prior-weighted component, so they
stay proper even when the split is degenerate. Candidates are drawn from
the good density and ranked by the good/bad density ratio.

Integer dimensions are sampled continuously, then rounded and clamped.
Failed trials are recorded but excluded from both densities. Histories
persist as JSON lines, one trial per line, so interrupted searches resume.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

from .errors import ConfigError, DataFormatError
from .rng import Xoshiro256pp

COMPLETE = "complete"
FAILED = "failed"

_BW_MIN_FRAC = 0.01  # bandwidth clamp, fraction of the dimension range
_BW_MAX_FRAC = 1.0


@dataclass(frozen=True)
class Uniform:
    name: str
    lo: float
    hi: float

    def __post_init__(self):
        if not self.lo < self.hi:
            raise ConfigError(f"{self.name}: need lo < hi, got [{self.lo}, {self.hi}]")


@dataclass(frozen=True)
class LogUniform:
    name: str
    lo: float
    hi: float

    def __post_init__(self):
        if not 0 < self.lo < self.hi:
            raise ConfigError(f"{self.name}: need 0 < lo < hi, got [{self.lo}, {self.hi}]")


@dataclass(frozen=True)
class Integer:
    name: str
    lo: int
    hi: int  # inclusive

    def __post_init__(self):
        if not self.lo < self.hi:
            raise ConfigError(f"{self.name}: need lo < hi, got [{self.lo}, {self.hi}]")


@dataclass(frozen=True)
class Categorical:
    name: str
    choices: tuple

    def __post_init__(self):
        if len(self.choices) == 0:
            raise ConfigError(f"{self.name}: categorical needs at least one choice")


Dimension = Union[Uniform, LogUniform, Integer, Categorical]


@dataclass(frozen=True)
class ParamSpace:
    dimensions: tuple[Dimension, ...]

    def __post_init__(self):
        if not self.dimensions:
            raise ConfigError("search space has no dimensions")
        names = [d.name for d in self.dimensions]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate dimension names in {names}")

    def names(self) -> list[str]:
        return [d.name for d in self.dimensions]


@dataclass
class Trial:
    assignment: dict
    objective: Optional[float]
    status: str = COMPLETE

    def __post_init__(self):
        if self.status not in (COMPLETE, FAILED):
            raise ConfigError(f"trial status must be complete or failed, got {self.status!r}")
        if self.status == FAILED and self.objective is not None:
            raise ConfigError("failed trials carry no objective")
        if self.status == COMPLETE and self.objective is None:
            raise ConfigError("complete trials need an objective")


@dataclass(frozen=True)
class TpeConfig:
    n_startup: int = 10
    gamma: float = 0.25
    n_candidates: int = 24
    seed: int = 0

    def __post_init__(self):
        if self.n_startup < 1:
            raise ConfigError("n_startup must be >= 1")
        if not 0.0 < self.gamma < 1.0:
            raise ConfigError("gamma must be inside (0, 1)")
        if self.n_candidates < 1:
            raise ConfigError("n_candidates must be >= 1")


def good_set_size(n_complete: int, gamma: float) -> int:
    return max(1, math.ceil(gamma * n_complete))


def sample_prior(space: ParamSpace, rng: Xoshiro256pp) -> dict:
    """One independent draw from every dimension's prior."""
    out = {}
    for dim in space.dimensions:
        if isinstance(dim, Uniform):
            out[dim.name] = rng.uniform(dim.lo, dim.hi)
        elif isinstance(dim, LogUniform):
            out[dim.name] = math.exp(rng.uniform(math.log(dim.lo), math.log(dim.hi)))
        elif isinstance(dim, Integer):
            out[dim.name] = _round_clamp(rng.uniform(dim.lo, dim.hi), dim)
        else:
            out[dim.name] = dim.choices[rng.randint(len(dim.choices))]
    return out


def _round_clamp(x: float, dim: Integer) -> int:
    return int(min(dim.hi, max(dim.lo, round(x))))


def _norm_cdf(x: float) -> float:
    return 0.5 * (1.0 + math.erf(x / math.sqrt(2.0)))


class _NumericParzen:
    """Weighted mixture of truncated Gaussians plus one uniform prior component.

    Per-kernel bandwidth is the larger distance to the neighbouring observed
    points, clamped to [1%, 100%] of the range; a lone observation gets the
    full range. Observation weights let the good-set density lean toward its
    best members; the prior component carries the mean observation weight.
    """

    def __init__(
        self,
        obs: Sequence[float],
        lo: float,
        hi: float,
        weights: Optional[Sequence[float]] = None,
    ):
        self.lo, self.hi = lo, hi
        span = hi - lo
        order = sorted(range(len(obs)), key=lambda i: obs[i])
        pts = [obs[i] for i in order]
        if weights is None:
            w = [1.0] * len(pts)
        else:
            w = [float(weights[i]) for i in order]
        bws = []
        for i in range(len(pts)):
            if len(pts) == 1:
                gap = span  # lone observation: no neighbour information
            else:
                left = pts[i] - pts[i - 1] if i > 0 else 0.0
                right = pts[i + 1] - pts[i] if i + 1 < len(pts) else 0.0
                gap = max(left, right)  # duplicates clamp up to the 1% floor
            bws.append(min(max(gap, _BW_MIN_FRAC * span), _BW_MAX_FRAC * span))
        self.mus = pts
        self.sigmas = bws
        self.n = len(pts)
        prior_w = sum(w) / len(w) if w else 1.0
        total = sum(w) + prior_w
        self.weights = [wi / total for wi in w]
        self.prior_weight = prior_w / total

    def log_density(self, x: float) -> float:
        span = self.hi - self.lo
        total = self.prior_weight / span
        for wi, mu, sig in zip(self.weights, self.mus, self.sigmas):
            mass = _norm_cdf((self.hi - mu) / sig) - _norm_cdf((self.lo - mu) / sig)
            if mass <= 0.0:
                continue
            z = (x - mu) / sig
            pdf = math.exp(-0.5 * z * z) / (sig * math.sqrt(2.0 * math.pi))
            total += wi * pdf / mass
        return math.log(total)

    def sample(self, rng: Xoshiro256pp) -> float:
        u = rng.uniform()
        acc = 0.0
        pick = self.n  # prior unless an observation component wins
        for k, wk in enumerate(self.weights):
            acc += wk
            if u < acc:
                pick = k
                break
        if pick == self.n:
            return rng.uniform(self.lo, self.hi)
        mu, sig = self.mus[pick], self.sigmas[pick]
        for _ in range(100):
            x = mu + sig * rng.normal()
            if self.lo <= x <= self.hi:
                return x
        return min(self.hi, max(self.lo, mu))


class _CategoricalParzen:
    """Smoothed (add-one) weighted category counts."""

    def __init__(self, obs: Sequence, choices: tuple, weights: Optional[Sequence[float]] = None):
        self.choices = choices
        counts = {c: 1.0 for c in choices}
        if weights is None:
            w = [1.0] * len(obs)
        else:
            # scale to mean 1 so smoothing stays comparable to the unweighted case
            mean = sum(weights) / len(weights)
            w = [wi / mean for wi in weights]
        for x, wi in zip(obs, w):
            counts[x] += wi
        total = sum(counts.values())
        self.probs = {c: counts[c] / total for c in choices}

    def log_density(self, x) -> float:
        return math.log(self.probs[x])

    def sample(self, rng: Xoshiro256pp):
        u = rng.uniform()
        acc = 0.0
        for c in self.choices:
            acc += self.probs[c]
            if u < acc:
                return c
        return self.choices[-1]


def _to_internal(dim: Dimension, value):
    if isinstance(dim, LogUniform):
        return math.log(value)
    if isinstance(dim, Integer):
        return float(value)
    return value


def _estimator(dim: Dimension, values: list, weights: Optional[list] = None):
    if isinstance(dim, Categorical):
        return _CategoricalParzen(values, dim.choices, weights)
    if isinstance(dim, LogUniform):
        return _NumericParzen(
            [math.log(v) for v in values], math.log(dim.lo), math.log(dim.hi), weights
        )
    return _NumericParzen([float(v) for v in values], float(dim.lo), float(dim.hi), weights)


def suggest(
    history: Sequence[Trial], space: ParamSpace, cfg: TpeConfig, rng: Xoshiro256pp
) -> dict:
    """Next assignment to evaluate.

    Prior samples until ``n_startup`` trials complete; afterwards the best
    assignment among ``n_candidates`` draws from the good-set density, ranked
    by the good/bad log-density ratio.
    """
    completed = [t for t in history if t.status == COMPLETE]
    if len(completed) < cfg.n_startup:
        return sample_prior(space, rng)

    n_good = good_set_size(len(completed), cfg.gamma)
    ranked = sorted(range(len(completed)), key=lambda i: (completed[i].objective, i))
    good = [completed[i] for i in ranked[:n_good]]
    bad = [completed[i] for i in ranked[n_good:]]
    if not bad:
        return sample_prior(space, rng)

    # linear rank weights lean the good density toward its best members,
    # which keeps a large gamma-quantile good set from averaging away the
    # best-found region; the bad density stays uniform
    good_w = [float(n_good - r) for r in range(n_good)]
    good_est = {
        d.name: _estimator(d, [t.assignment[d.name] for t in good], good_w)
        for d in space.dimensions
    }
    bad_est = {d.name: _estimator(d, [t.assignment[d.name] for t in bad]) for d in space.dimensions}

    best_assignment = None
    best_ratio = -math.inf
    for _ in range(cfg.n_candidates):
        assignment = {}
        ratio = 0.0
        for dim in space.dimensions:
            g = good_est[dim.name]
            drawn = g.sample(rng)
            if isinstance(dim, Categorical):
                value = drawn
                internal = drawn
            elif isinstance(dim, LogUniform):
                value = math.exp(drawn)
                internal = drawn
            elif isinstance(dim, Integer):
                value = _round_clamp(drawn, dim)
                internal = float(value)
            else:
                value = drawn
                internal = drawn
            assignment[dim.name] = value
            ratio += g.log_density(internal) - bad_est[dim.name].log_density(internal)
        if ratio > best_ratio:
            best_ratio = ratio
            best_assignment = assignment
    return best_assignment


def optimize(
    objective: Callable[[dict], float],
    space: ParamSpace,
    budget: int,
    cfg: TpeConfig,
    history: Optional[list[Trial]] = None,
    on_trial: Optional[Callable[[Trial], None]] = None,
) -> tuple[Trial, list[Trial]]:
    """Run the sequential suggest/evaluate loop until ``budget`` total trials.

    Exceptions (and non-finite objectives) become failed trials. An existing
    ``history`` is continued in place, reusing its trials for density fitting.
    """
    if budget < 1:
        raise ConfigError("budget must be >= 1")
    history = list(history) if history else []
    rng = Xoshiro256pp(cfg.seed)
    while len(history) < budget:
        assignment = suggest(history, space, cfg, rng)
        try:
            value = float(objective(assignment))
            if not math.isfinite(value):
                raise ValueError(f"objective returned non-finite value {value}")
            trial = Trial(assignment=assignment, objective=value, status=COMPLETE)
        except Exception:
            trial = Trial(assignment=assignment, objective=None, status=FAILED)
        history.append(trial)
        if on_trial is not None:
            on_trial(trial)
    completed = [t for t in history if t.status == COMPLETE]
    if not completed:
        raise RuntimeError(f"all {len(history)} trials failed; no best trial to report")
    best = min(completed, key=lambda t: t.objective)
    return best, history


def default_search_spaces() -> dict[str, ParamSpace]:
    """Per-family architecture spaces; both contain the published optima."""
    cnn = ParamSpace(
        (
            Categorical("conv1_filters", (16, 32, 64, 128)),
            Categorical("conv1_kernel", (3, 5, 7)),
            Categorical("conv2_filters", (16, 32, 64)),
            Categorical("conv2_kernel", (3, 5)),
            Categorical("dense_units", (8, 16, 32, 64)),
            Uniform("dropout", 0.0, 0.5),
        )
    )
    mlp = ParamSpace(
        (
            Categorical("hidden_units", (16, 32, 64, 128)),
            Uniform("dropout", 0.0, 0.5),
        )
    )
    return {"cnn": cnn, "mlp": mlp}


# ---------------------------------------------------------------------------
# history persistence (JSON lines, one trial per line)
# ---------------------------------------------------------------------------

def save_history(history: Sequence[Trial], path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for t in history:
            f.write(trial_to_json(t) + "\n")


def append_trial(trial: Trial, path) -> None:
    with open(path, "a", encoding="utf-8") as f:
        f.write(trial_to_json(trial) + "\n")


def trial_to_json(t: Trial) -> str:
    return json.dumps(
        {"assignment": t.assignment, "objective": t.objective, "status": t.status},
        sort_keys=True,
    )


def load_history(path) -> list[Trial]:
    path = Path(path)
    history = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                doc = json.loads(line)
                history.append(
                    Trial(
                        assignment=doc["assignment"],
                        objective=doc["objective"],
                        status=doc["status"],
                    )
                )
            except (json.JSONDecodeError, KeyError, ConfigError) as e:
                raise DataFormatError(f"{path}:{lineno}: bad trial record ({e})") from None
    return history
