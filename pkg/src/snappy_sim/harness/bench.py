"""Approval-latency benchmark over a simulated wide-area deployment.

Merchants and statekeepers sit in the regions of an RTT matrix. Requests
arrive as a Poisson stream spread over the merchants. For each request the
merchant sends one sign request per statekeeper (a fixed per-message cost,
serialised per request), each statekeeper queues it on a small pool of
workers, and the merchant processes responses in arrival order until a
majority is in, then aggregates and verifies once. Latency is measured from
request start to a verified quorum.

Timing comes from the cost model below, never from wall clocks, so results
are deterministic. The BLS work is still real: for a seeded sample of
requests, the statekeepers sign the intent and the merchant checks the
aggregate, and a failed check is reported.
"""

from __future__ import annotations

import hashlib
import heapq
import random
from dataclasses import dataclass, field
from typing import Any, Optional, Sequence

from .. import bls
from ..net import LinkModel, load_rtt_csv, regions_of
from .metrics import percentile


@dataclass
class CostModel:
    """Per-operation processing times in ms.

    The defaults stand for Python socket servers on small two-core machines:
    sending or receiving one message costs on the order of a millisecond, a
    BLS signature well under one, one aggregate check a few.
    """

    send_ms: float = 1.2
    recv_ms: float = 0.35
    sign_ms: float = 0.3
    verify_ms: float = 3.0
    statekeeper_workers: int = 2

    @classmethod
    def zero(cls) -> "CostModel":
        return cls(0.0, 0.0, 0.0, 0.0, 1)


@dataclass
class BenchConfig:
    k: int
    rate: float = 1000.0  # requests per second over all merchants
    merchants: int = 100
    duration_ms: float = 1000.0
    warmup_ms: float = 100.0
    matrix: Optional[str] = None
    rtt: Optional[dict[tuple[str, str], float]] = None
    jitter: float = 0.1
    costs: CostModel = field(default_factory=CostModel)
    crypto_sample: int = 20
    seed: int = 0


@dataclass
class BenchResult:
    k: int
    rate: float
    latencies: list[float]
    crypto_checked: int
    crypto_failures: int
    statekeeper_utilisation: float

    @property
    def p50(self) -> Optional[float]:
        return percentile(self.latencies, 50)

    @property
    def p90(self) -> Optional[float]:
        return percentile(self.latencies, 90)

    @property
    def p99(self) -> Optional[float]:
        return percentile(self.latencies, 99)

    @property
    def mean(self) -> Optional[float]:
        return sum(self.latencies) / len(self.latencies) if self.latencies else None

    def as_dict(self) -> dict[str, Any]:
        r = lambda v: None if v is None else round(v, 3)  # noqa: E731
        return {
            "k": self.k,
            "rate": self.rate,
            "requests": len(self.latencies),
            "p50_ms": r(self.p50),
            "p90_ms": r(self.p90),
            "p99_ms": r(self.p99),
            "mean_ms": r(self.mean),
            "crypto_checked": self.crypto_checked,
            "crypto_failures": self.crypto_failures,
            "statekeeper_utilisation": r(self.statekeeper_utilisation),
        }


class _Request:
    __slots__ = ("rid", "merchant", "start", "received", "proc_free", "signers", "done")

    def __init__(self, rid: int, merchant: int, start: float):
        self.rid = rid
        self.merchant = merchant
        self.start = start
        self.received = 0
        self.proc_free = start
        self.signers: list[int] = []
        self.done: Optional[float] = None


def run_latency(cfg: BenchConfig) -> BenchResult:
    if cfg.k < 1 or cfg.rate <= 0 or cfg.merchants < 1:
        raise ValueError("k, rate and merchants must be positive")
    matrix = cfg.rtt if cfg.rtt is not None else load_rtt_csv(cfg.matrix)
    links = LinkModel(base_rtt=matrix, jitter=cfg.jitter)
    regions = regions_of(matrix)
    rng = random.Random(cfg.seed)
    c = cfg.costs
    k = cfg.k
    need = k // 2 + 1
    sk_region = [regions[i % len(regions)] for i in range(k)]
    m_region = [regions[j % len(regions)] for j in range(cfg.merchants)]
    keys = [bls.keygen(f"bench/{i}".encode()) for i in range(k)]

    def one_way(a: str, b: str) -> float:
        d = links.rtt(a, b) / 2.0
        if cfg.jitter:
            d *= rng.lognormvariate(0.0, cfg.jitter)
        return d

    # Poisson arrivals over the whole window
    requests: list[_Request] = []
    t = 0.0
    while True:
        t += rng.expovariate(cfg.rate / 1000.0)
        if t >= cfg.duration_ms:
            break
        requests.append(_Request(len(requests), rng.randrange(cfg.merchants), t))
    measured = [r for r in requests if r.start >= cfg.warmup_ms]
    sample = set(r.rid for r in rng.sample(measured, min(cfg.crypto_sample, len(measured))))

    # events: (time, seq, kind, request id, statekeeper)
    events: list[tuple[float, int, int, int, int]] = []
    seq = 0
    ARRIVE_SK, ARRIVE_M = 0, 1
    for r in requests:
        src = m_region[r.merchant]
        for i in range(k):
            departs = r.start + (i + 1) * c.send_ms
            seq += 1
            heapq.heappush(events, (departs + one_way(src, sk_region[i]), seq, ARRIVE_SK, r.rid, i))

    workers = [[0.0] * max(1, c.statekeeper_workers) for _ in range(k)]
    busy = [0.0] * k
    while events:
        now, _, kind, rid, i = heapq.heappop(events)
        r = requests[rid]
        if kind == ARRIVE_SK:
            pool = workers[i]
            free = heapq.heappop(pool)
            done = max(now, free) + c.sign_ms
            heapq.heappush(pool, done)
            busy[i] += c.sign_ms
            seq += 1
            heapq.heappush(events, (done + one_way(sk_region[i], m_region[r.merchant]), seq, ARRIVE_M, rid, i))
        else:
            if r.done is not None:
                continue
            r.proc_free = max(now, r.proc_free) + c.recv_ms
            r.signers.append(i)
            if len(r.signers) == need:
                r.done = r.proc_free + c.verify_ms

    checked = failures = 0
    for r in measured:
        if r.rid not in sample:
            continue
        msg = hashlib.sha256(f"bench-intent/{cfg.seed}/{r.rid}".encode()).digest()
        sigs = [bls.sign(keys[i], msg) for i in r.signers]
        ok = bls.verify_aggregate(msg, bls.aggregate(sigs), [keys[i].public for i in r.signers])
        checked += 1
        failures += 0 if ok else 1
    latencies = [r.done - r.start for r in measured if r.done is not None]
    util = max(busy) / (cfg.duration_ms * max(1, c.statekeeper_workers)) if k else 0.0
    return BenchResult(k, cfg.rate, latencies, checked, failures, util)


def sweep(
    ks: Sequence[int] = (10, 20, 40, 100, 200),
    rates: Sequence[float] = (1000, 2500, 5000),
    **kwargs: Any,
) -> list[BenchResult]:
    return [run_latency(BenchConfig(k=k, rate=rate, **kwargs)) for rate in rates for k in ks]
