"""Independent discrete-event oracle for single-server FIFO queues.

Kept deliberately separate from the package: the closed-form wait model is
validated against this event simulation, never against itself.
"""

from __future__ import annotations

import heapq
from collections import deque

import numpy as np


def simulate_md1_sojourn(lam: float, service: float, n_arrivals: int, seed: int = 0) -> float:
    """Mean time in system for Poisson arrivals and deterministic service.

    Event-driven single server with a FIFO queue.
    """
    rng = np.random.default_rng(seed)
    arrivals = np.cumsum(rng.exponential(1.0 / lam, size=n_arrivals))
    events: list[tuple[float, int, str, float]] = []
    seq = 0
    heapq.heappush(events, (float(arrivals[0]), seq, "arrival", float(arrivals[0])))
    next_arrival = 1
    queue: deque[float] = deque()
    busy = False
    total_sojourn = 0.0
    completed = 0

    def start_service(now: float, arrived: float) -> None:
        nonlocal seq
        seq += 1
        heapq.heappush(events, (now + service, seq, "done", arrived))

    while events:
        t, _, kind, arrived = heapq.heappop(events)
        if kind == "arrival":
            if busy:
                queue.append(arrived)
            else:
                busy = True
                start_service(t, arrived)
            if next_arrival < n_arrivals:
                seq += 1
                a = float(arrivals[next_arrival])
                heapq.heappush(events, (a, seq, "arrival", a))
                next_arrival += 1
        else:
            total_sojourn += t - arrived
            completed += 1
            if queue:
                start_service(t, queue.popleft())
            else:
                busy = False
    return total_sojourn / completed


def simulate_cache_bypass_sojourn(
    lam: float, service: float, hit_ratio: float, n_arrivals: int, seed: int = 0
) -> float:
    """Mean time in system when a ``hit_ratio`` fraction of requests bypass the
    server at zero cost and the rest queue FIFO on one deterministic server.

    Bypassed requests contribute zero sojourn to the average over all
    requests, mirroring the zero-latency-hit modeling assumption.
    """
    rng = np.random.default_rng(seed)
    arrivals = np.cumsum(rng.exponential(1.0 / lam, size=n_arrivals))
    hits = rng.random(n_arrivals) < hit_ratio
    total = 0.0
    server_free = 0.0
    for t, hit in zip(arrivals, hits):
        if hit:
            continue
        start = max(float(t), server_free)
        server_free = start + service
        total += server_free - t
    return total / n_arrivals
