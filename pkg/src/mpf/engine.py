"""Generic particle filter: weighting, ESS, resampling and estimators.

Every filter variant plugs into :func:`pf_run` through a *kernel*: an object
with a ``step(n, prev_states, rng)`` method returning the proposed particles
at time ``n`` together with their incremental log-weights. ``prev_states`` is
``None`` at ``n = 1`` (all particles start from ``x0``). Kernels may also
expose ``ambient(n, states)`` mapping particles to hidden states in
``R^{d_x}``; estimates and diagnostics are computed on those.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from typing import Callable, Protocol

import numpy as np
from scipy.special import logsumexp

from mpf.errors import WeightCollapseError

log = logging.getLogger(__name__)


class Scheme(str, enum.Enum):
    multinomial = "multinomial"
    systematic = "systematic"


class Mode(str, enum.Enum):
    every_step = "every_step"
    adaptive = "adaptive"


@dataclass(frozen=True)
class ResamplePolicy:
    scheme: Scheme = Scheme.systematic
    mode: Mode = Mode.adaptive
    threshold: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "scheme", Scheme(self.scheme))
        object.__setattr__(self, "mode", Mode(self.mode))
        if not 0 < self.threshold <= 1:
            raise ValueError("threshold must lie in (0, 1]")


@dataclass
class ParticleCloud:
    """Particles at one time step.

    ``ancestors`` are 0-based indices into the previous cloud (identity at
    ``n = 0`` and whenever resampling was skipped).
    """

    states: np.ndarray
    log_weights: np.ndarray
    ancestors: np.ndarray
    time_index: int

    @property
    def size(self) -> int:
        return len(self.log_weights)

    def weights(self) -> np.ndarray:
        return normalize_log_weights(self.log_weights, self.time_index)[0]


def _check_finite(log_weights, time_index=None):
    lw = np.asarray(log_weights, dtype=float)
    if lw.size == 0 or not np.any(np.isfinite(lw)) or np.any(np.isnan(lw)) or np.any(lw == np.inf):
        raise WeightCollapseError(time_index)
    return lw


def normalize_log_weights(log_weights, time_index=None):
    """Return ``(normalized weights, log of the mean unnormalized weight)``."""
    lw = _check_finite(log_weights, time_index)
    shift = lw.max()
    w = np.exp(lw - shift)
    total = w.sum()
    return w / total, float(shift + np.log(total) - np.log(lw.size))


def ess(log_weights, time_index=None) -> float:
    """Effective sample size ``(sum w)^2 / sum w^2``."""
    w, _ = normalize_log_weights(log_weights, time_index)
    return float(1.0 / np.sum(w**2))


def multinomial_indices(weights, rng, n=None):
    n = len(weights) if n is None else n
    cdf = np.cumsum(weights)
    cdf[-1] = 1.0
    return np.searchsorted(cdf, rng.random(n), side="right")


def systematic_indices(weights, rng, n=None):
    n = len(weights) if n is None else n
    cdf = np.cumsum(weights)
    cdf[-1] = 1.0
    u = (rng.random() + np.arange(n)) / n
    return np.searchsorted(cdf, u, side="right")


def resample(cloud: ParticleCloud, policy: ResamplePolicy, rng) -> ParticleCloud:
    """Draw ancestors from the normalized weights and equalize the weights."""
    w = cloud.weights()
    draw = systematic_indices if policy.scheme is Scheme.systematic else multinomial_indices
    idx = draw(w, rng)
    return ParticleCloud(
        states=cloud.states[idx],
        log_weights=np.zeros(cloud.size),
        ancestors=idx,
        time_index=cloud.time_index,
    )


def estimate(cloud: ParticleCloud, phi: Callable[[np.ndarray], np.ndarray]) -> float:
    """Self-normalized estimate ``sum_i phi(x_i) w_i / sum_i w_i``."""
    w = cloud.weights()
    return float(np.dot(w, phi(cloud.states)))


def weighted_moments(values, weights):
    mean = weights @ values
    var = weights @ (values - mean) ** 2
    return mean, var


class Kernel(Protocol):
    def step(self, n: int, prev_states: np.ndarray | None, rng: np.random.Generator): ...


def step_rng(seed: int, n: int, stream: int) -> np.random.Generator:
    """Independent generator for ``(seed, time, stream)``.

    Stream 0 feeds proposals, stream 1 resampling. Particle ``i`` consumes
    row ``i`` of each vectorized draw, so results do not depend on how the
    work is scheduled.
    """
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(n, stream)))


@dataclass
class FilterResult:
    """Per-step diagnostics and moments of a particle filter run."""

    ess: np.ndarray
    resampled: np.ndarray
    log_evidence_increments: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    collapsed_at: int | None = None
    clouds: list = field(default_factory=list)
    extras: dict = field(default_factory=dict)

    @property
    def log_likelihood(self) -> float:
        return float(np.sum(self.log_evidence_increments))

    @property
    def n_steps(self) -> int:
        return len(self.ess)


def pf_run(
    kernel,
    n_steps: int,
    n_particles: int,
    policy: ResamplePolicy = ResamplePolicy(),
    seed: int = 0,
    keep_clouds: bool = False,
    observers: tuple = (),
    raise_on_collapse: bool = False,
) -> FilterResult:
    """Run a particle filter for ``n_steps`` observation times.

    At every step the cloud is (optionally) resampled, propagated through the
    kernel and reweighted. With ``Mode.every_step`` this is the textbook
    algorithm with a categorical ancestor draw at each step; with
    ``Mode.adaptive`` the draw only happens when the ESS falls below
    ``threshold * N`` and log-weights accumulate otherwise. Estimates use the
    weighted cloud before the next resampling.

    ``observers`` are callables ``(n, cloud, ambient_states, weights)`` called
    after each step; used to record marginals.

    A weight collapse stops the run; the result records the collapse time and
    diagnostics up to that point (or raises if ``raise_on_collapse``).
    """
    N = n_particles
    ess_trace, flags, incr, means, variances, clouds = [], [], [], [], [], []
    cloud = None
    collapsed_at = None
    for n in range(1, n_steps + 1):
        if cloud is None:
            prev, prev_logw, ancestors, resampled = None, np.zeros(N), np.arange(N), False
        else:
            do_resample = policy.mode is Mode.every_step or ess_trace[-1] < policy.threshold * N
            if do_resample:
                rs = resample(cloud, policy, step_rng(seed, n, 1))
                prev, prev_logw, ancestors = rs.states, rs.log_weights, rs.ancestors
            else:
                prev, prev_logw, ancestors = cloud.states, cloud.log_weights, np.arange(N)
            resampled = bool(do_resample)
        if flags:
            flags[-1] = resampled
        states, inc_logw = kernel.step(n, prev, step_rng(seed, n, 0))
        inc_logw = np.asarray(inc_logw, dtype=float)
        logw = prev_logw + inc_logw
        try:
            w, _ = normalize_log_weights(logw, n)
            prev_w, _ = normalize_log_weights(prev_logw, n)
            _, log_mean = normalize_log_weights(inc_logw + np.log(prev_w * N), n)
        except WeightCollapseError as exc:
            collapsed_at = n
            log.warning("weight collapse at step %d", n)
            if raise_on_collapse:
                exc.snapshot = {"ess": list(ess_trace), "log_weights": logw}
                raise
            break
        cloud = ParticleCloud(states=states, log_weights=logw, ancestors=ancestors, time_index=n)
        x = kernel.ambient(n, states) if hasattr(kernel, "ambient") else states
        m, v = weighted_moments(x, w)
        ess_trace.append(float(1.0 / np.sum(w**2)))
        flags.append(False)
        incr.append(log_mean)
        means.append(m)
        variances.append(v)
        if keep_clouds:
            clouds.append(cloud)
        for obs in observers:
            obs(n, cloud, x, w)
    d = len(means[0]) if means else 0
    empty = np.empty((0, d))
    return FilterResult(
        ess=np.array(ess_trace),
        resampled=np.array(flags, dtype=bool),
        log_evidence_increments=np.array(incr),
        means=np.array(means) if means else empty,
        variances=np.array(variances) if means else empty,
        collapsed_at=collapsed_at,
        clouds=clouds,
    )
