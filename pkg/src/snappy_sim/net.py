"""Discrete-event scheduler and a seeded message layer between actors."""

from __future__ import annotations

import csv
import heapq
import math
import random
from dataclasses import dataclass, field
from importlib import resources
from typing import Any, Callable, Optional

WILDCARD = "*"


class Scheduler:
    """Runs callbacks in (time, insertion sequence) order."""

    def __init__(self) -> None:
        self.now = 0
        self._seq = 0
        self._queue: list[tuple[int, int, str, Callable[..., Any], tuple]] = []
        self.log: list[tuple[int, int, str]] = []
        self.keep_log = True

    def schedule(self, time: int, fn: Callable[..., Any], *args: Any, label: str = "") -> int:
        if time < self.now:
            raise ValueError(f"cannot schedule in the past ({time} < {self.now})")
        self._seq += 1
        heapq.heappush(self._queue, (time, self._seq, label, fn, args))
        return self._seq

    def after(self, delay: int, fn: Callable[..., Any], *args: Any, label: str = "") -> int:
        return self.schedule(self.now + delay, fn, *args, label=label)

    def pending(self) -> int:
        return len(self._queue)

    def next_time(self) -> Optional[int]:
        return self._queue[0][0] if self._queue else None

    def run_until(self, end_time: int) -> int:
        """Execute every event with time <= end_time; returns how many ran."""
        ran = 0
        while self._queue and self._queue[0][0] <= end_time:
            time, seq, label, fn, args = heapq.heappop(self._queue)
            self.now = time
            if self.keep_log:
                self.log.append((time, seq, label))
            fn(*args)
            ran += 1
        self.now = max(self.now, end_time)
        return ran


def load_rtt_csv(path: Optional[str] = None) -> dict[tuple[str, str], float]:
    """Read (region, region, rtt_ms) rows; the shipped matrix when ``path`` is None."""
    if path is None:
        text = resources.files("snappy_sim.data").joinpath("regions.csv").read_text()
    else:
        with open(path) as fh:
            text = fh.read()
    out: dict[tuple[str, str], float] = {}
    for row in csv.reader(line for line in text.splitlines() if line and not line.startswith("#")):
        if row[0].strip() == "region_a":
            continue
        a, b, rtt = row[0].strip(), row[1].strip(), float(row[2])
        if rtt <= 0:
            raise ValueError(f"rtt must be positive: {row}")
        out[(a, b)] = rtt
    return out


def regions_of(matrix: dict[tuple[str, str], float]) -> list[str]:
    return sorted({r for pair in matrix for r in pair})


@dataclass
class LinkModel:
    base_rtt: dict[tuple[str, str], float] = field(default_factory=dict)
    default_rtt: float = 4.0
    jitter: float = 0.0  # lognormal sigma
    drop_rate: float = 0.0
    # (from actor, to actor, start ms, end ms); "*" matches any actor
    partition_windows: list[tuple[str, str, int, int]] = field(default_factory=list)
    fifo: bool = True

    def __post_init__(self) -> None:
        if not 0.0 <= self.drop_rate <= 1.0:
            raise ValueError("drop_rate must lie in [0, 1]")
        if self.jitter < 0 or self.default_rtt <= 0:
            raise ValueError("jitter must be >= 0 and rtt > 0")

    def rtt(self, a: str, b: str) -> float:
        if (a, b) in self.base_rtt:
            return self.base_rtt[(a, b)]
        if (b, a) in self.base_rtt:
            return self.base_rtt[(b, a)]
        if a == b and (a, a) not in self.base_rtt:
            intra = self.base_rtt.get(("*", "*"))
            if intra is not None:
                return intra
        return self.default_rtt

    def partitioned(self, frm: str, to: str, t: int) -> bool:
        for a, b, start, end in self.partition_windows:
            if start <= t < end and a in (frm, WILDCARD) and b in (to, WILDCARD):
                return True
        return False


# adversary hook: returns None to drop, or an extra delay in ms
LinkHook = Callable[[str, str, Any, int], Optional[int]]


class Network:
    def __init__(self, scheduler: Scheduler, links: LinkModel, seed: int = 0):
        self.scheduler = scheduler
        self.links = links
        self.rng = random.Random(seed)
        self.region: dict[str, str] = {}
        self.handlers: dict[str, Callable[[str, Any], None]] = {}
        self.hooks: list[LinkHook] = []
        self._last_delivery: dict[tuple[str, str], int] = {}
        self.log: list[dict[str, Any]] = []
        self.keep_log = True

    def register(self, actor: str, region: str, handler: Callable[[str, Any], None]) -> None:
        self.region[actor] = region
        self.handlers[actor] = handler

    def one_way(self, frm: str, to: str) -> float:
        base = self.links.rtt(self.region[frm], self.region[to]) / 2.0
        if self.links.jitter:
            base *= self.rng.lognormvariate(0.0, self.links.jitter)
        return base

    def _record(self, **entry: Any) -> None:
        if self.keep_log:
            self.log.append(entry)

    def send(self, frm: str, to: str, msg: Any, now: Optional[int] = None) -> Optional[int]:
        """Schedule delivery of ``msg``; returns the delivery time or None if dropped."""
        t = self.scheduler.now if now is None else now
        kind = type(msg).__name__
        if to not in self.handlers:
            raise KeyError(f"unknown actor {to}")
        if self.links.partitioned(frm, to, t):
            self._record(t=t, ev="drop", frm=frm, to=to, msg=kind, why="partition")
            return None
        if self.links.drop_rate and self.rng.random() < self.links.drop_rate:
            self._record(t=t, ev="drop", frm=frm, to=to, msg=kind, why="loss")
            return None
        extra = 0
        for hook in self.hooks:
            verdict = hook(frm, to, msg, t)
            if verdict is None:
                self._record(t=t, ev="drop", frm=frm, to=to, msg=kind, why="adversary")
                return None
            extra += verdict
        at = t + max(1, math.ceil(self.one_way(frm, to))) + extra
        if self.links.fifo:
            at = max(at, self._last_delivery.get((frm, to), 0))
            self._last_delivery[(frm, to)] = at
        self._record(t=t, ev="send", frm=frm, to=to, msg=kind, at=at)
        self.scheduler.schedule(at, self.handlers[to], frm, msg, label=f"msg:{kind}")
        return at
