"""Dynamic retrieval-threshold control driven by a single-server queue model.

The serving backend is modeled as an M/D/1 queue. Cache hits are treated as
zero-latency, so the effective service time seen by the queue is the backend
time scaled by the miss ratio. The controller picks the highest retrieval
threshold whose predicted mean waiting time stays under the latency objective,
using an empirically sampled threshold-to-hit-ratio table, and corrects by one
grid step whenever observed waits drift more than 10% from the estimate.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .core import Vector

logger = logging.getLogger(__name__)

THETA_CEILING = 0.98
THETA_FLOOR = 0.60
THETA_STEP = 0.02
DEFAULT_WINDOW_SECONDS = 10.0
DEFAULT_SAMPLE_FRACTION = 0.05
FEEDBACK_TOLERANCE = 0.10
LAMBDA_EWMA_ALPHA = 0.5


def default_grid() -> list[float]:
    """Retrieval-threshold grid, 0.98 down to 0.60 in steps of 0.02."""
    count = int(round((THETA_CEILING - THETA_FLOOR) / THETA_STEP)) + 1
    return [round(THETA_CEILING - THETA_STEP * k, 2) for k in range(count)]


def md1_wait(lam: float, service: float) -> float:
    """Mean time in system of an M/D/1 queue: E + lam*E^2 / (2*(1 - lam*E)).

    Returns +inf when the queue is unstable (lam * service >= 1) rather than a
    finite lie.
    """
    if lam < 0:
        raise ValueError(f"arrival rate must be >= 0, got {lam}")
    if service <= 0:
        raise ValueError(f"service time must be > 0, got {service}")
    rho = lam * service
    if rho >= 1.0:
        return math.inf
    return service + lam * service * service / (2.0 * (1.0 - rho))


def estimate_wait(lam: float, llm_service: float, hit_ratio: float) -> float:
    """Mean wait with a cache absorbing ``hit_ratio`` of the traffic at zero cost.

    Identical to ``md1_wait(lam, llm_service * (1 - hit_ratio))``; exactly 0
    when everything hits.
    """
    if not 0.0 <= hit_ratio <= 1.0:
        raise ValueError(f"hit ratio must be in [0, 1], got {hit_ratio}")
    if hit_ratio == 1.0:
        return 0.0
    return md1_wait(lam, llm_service * (1.0 - hit_ratio))


def isotonic_non_decreasing(values: Sequence[float]) -> list[float]:
    """L2 isotonic projection onto non-decreasing sequences (pool adjacent violators)."""
    blocks: list[tuple[float, int]] = []
    for v in values:
        total, count = float(v), 1
        while blocks and blocks[-1][0] / blocks[-1][1] > total / count:
            ptotal, pcount = blocks.pop()
            total += ptotal
            count += pcount
        blocks.append((total, count))
    out: list[float] = []
    for total, count in blocks:
        out.extend([total / count] * count)
    return out


@dataclass
class T2HTable:
    """Monotone map from retrieval threshold to estimated hit ratio.

    ``entries`` is sorted by strictly decreasing theta; hit ratios are
    non-decreasing as theta decreases (enforced by isotonic post-processing).
    """

    entries: list[tuple[float, float]]
    built_at_epoch: int = 0
    sample_count: int = 0

    def thetas(self) -> list[float]:
        return [t for t, _ in self.entries]

    def hit_ratio_at(self, theta: float) -> float:
        """Hit ratio at the nearest grid threshold at or below ``theta``."""
        for t, h in self.entries:
            if t <= theta + 1e-9:
                return h
        return self.entries[-1][1]

    def floor_theta(self) -> float:
        return self.entries[-1][0]

    def ceiling_theta(self) -> float:
        return self.entries[0][0]


LookupFn = Callable[[Vector, float], bool]


def measure_hit_curve(
    lookup: LookupFn, queries: Sequence[Vector], grid: Sequence[float]
) -> list[float]:
    """Empirical hit ratio of ``lookup`` at every grid threshold.

    Requires lookup monotone in the threshold (a hit at a high threshold
    implies a hit at any lower one), which holds for both the graph search and
    the exact scan; each query is then characterized by the highest grid
    threshold at which it hits, found by bisection.
    """
    thetas = list(grid)
    n_grid = len(thetas)
    counts = [0] * n_grid
    for q in queries:
        if not lookup(q, thetas[-1]):
            continue
        lo, hi = 0, n_grid - 1
        # invariant: hit at thetas[hi], unknown at thetas[lo..hi-1]
        while lo < hi:
            mid = (lo + hi) // 2
            if lookup(q, thetas[mid]):
                hi = mid
            else:
                lo = mid + 1
        counts[hi] += 1
    total = len(queries)
    running = 0
    curve = []
    for c in counts:
        running += c
        curve.append(running / total if total else 0.0)
    return curve


def build_t2h(
    lookup: LookupFn,
    recent_queries: Sequence[Vector],
    sample_fraction: float = DEFAULT_SAMPLE_FRACTION,
    grid: Sequence[float] | None = None,
    seed: int = 0,
    built_at_epoch: int = 0,
) -> T2HTable:
    """Sample recent queries and table the hit ratio the cache would give at
    each grid threshold.

    Draws ceil(fraction * n) queries with a seeded RNG, runs test lookups, and
    applies isotonic regression so the curve is monotone.
    """
    thetas = list(grid) if grid is not None else default_grid()
    if not thetas:
        raise ValueError("grid must be non-empty")
    n = len(recent_queries)
    k = math.ceil(sample_fraction * n)
    if k == 0:
        logger.warning("empty T2H sample; assuming zero hit ratio everywhere")
        return T2HTable(
            entries=[(t, 0.0) for t in thetas], built_at_epoch=built_at_epoch, sample_count=0
        )
    rng = np.random.default_rng(seed)
    picked = sorted(int(i) for i in rng.choice(n, size=min(k, n), replace=False))
    sample = [recent_queries[i] for i in picked]
    raw = measure_hit_curve(lookup, sample, thetas)
    smoothed = isotonic_non_decreasing(raw)
    return T2HTable(
        entries=list(zip(thetas, smoothed)),
        built_at_epoch=built_at_epoch,
        sample_count=len(sample),
    )


@dataclass
class ControllerState:
    """Mutable state of the threshold controller (one owner, periodic ticks)."""

    llm_service_mean: float
    slo_latency: float
    theta_r: float = THETA_CEILING
    lambda_hat: float | None = None
    last_w_estimate: float | None = None
    window_seconds: float = DEFAULT_WINDOW_SECONDS


def update_lambda(state: ControllerState, arrivals_in_window: int) -> float:
    """Fold one window's arrival count into the smoothed arrival-rate estimate."""
    rate = arrivals_in_window / state.window_seconds
    if state.lambda_hat is None:
        state.lambda_hat = rate
    else:
        state.lambda_hat = (
            (1.0 - LAMBDA_EWMA_ALPHA) * state.lambda_hat + LAMBDA_EWMA_ALPHA * rate
        )
    return state.lambda_hat


def choose_theta(table: T2HTable, lam: float, llm_service: float, slo_latency: float) -> float:
    """Highest grid threshold whose predicted wait stays under the objective.

    Falls back to the grid floor when no threshold satisfies it; the controller
    cannot do better than its floor.
    """
    if slo_latency <= 0:
        raise ValueError(f"slo_latency must be > 0, got {slo_latency}")
    if not table.entries:
        raise ValueError("T2H table is empty")
    for theta, h in table.entries:
        if estimate_wait(lam, llm_service, h) < slo_latency:
            return theta
    return table.floor_theta()


def feedback_adjust(
    state: ControllerState,
    w_actual: float,
    step: float = THETA_STEP,
    floor: float = THETA_FLOOR,
    ceiling: float = THETA_CEILING,
) -> float:
    """Step the threshold one grid notch when the wait estimate was off by >10%.

    Observed waits above the estimate push the threshold down (more hits);
    observed waits below push it up (more quality). An infinite estimate with a
    finite observation counts as a large overestimate.
    """
    w_est = state.last_w_estimate
    if w_est is None:
        raise ValueError("no prior wait estimate to compare against")
    theta = state.theta_r
    if math.isinf(w_est):
        if math.isfinite(w_actual):
            theta += step
    elif w_est > 0 and abs(w_actual - w_est) / w_est > FEEDBACK_TOLERANCE:
        theta = theta - step if w_actual > w_est else theta + step
    state.theta_r = round(min(ceiling, max(floor, theta)), 10)
    return state.theta_r


@dataclass
class SloConfig:
    """Latency-objective parameters: objective = multiplier x unloaded latency."""

    slo_multiplier: float = 1.3
    ttft: float = 0.5
    tbt: float = 0.05

    def __post_init__(self):
        if self.slo_multiplier < 1.0:
            raise ValueError(f"slo_multiplier must be >= 1, got {self.slo_multiplier}")

    def e2e_latency(self, n_tokens: int) -> float:
        if n_tokens < 1:
            raise ValueError(f"token count must be >= 1, got {n_tokens}")
        return self.ttft + self.tbt * (n_tokens - 1)

    def bound(self, unloaded_e2e: float) -> float:
        return self.slo_multiplier * unloaded_e2e
