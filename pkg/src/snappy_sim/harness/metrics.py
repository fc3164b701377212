"""Run metrics derived deterministically from a trace."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Optional, Sequence


def percentile(values: Sequence[float], q: float) -> Optional[float]:
    """Nearest-rank percentile; None for an empty sample."""
    if not values:
        return None
    ordered = sorted(values)
    rank = max(1, math.ceil(q / 100.0 * len(ordered)))
    return float(ordered[rank - 1])


@dataclass
class MetricsReport:
    latencies: list[float] = field(default_factory=list)
    requests: int = 0
    approvals: int = 0
    accepted: int = 0
    aborted: int = 0
    rejected: int = 0
    claims: int = 0
    settlements: int = 0
    deductions: int = 0
    deducted_value: int = 0
    pay_pairings: int = 0
    claim_pairings: list[int] = field(default_factory=list)
    cost_by_op: dict[str, dict[str, int]] = field(default_factory=dict)
    withdrawn_customers: list[int] = field(default_factory=list)

    @property
    def p50(self) -> Optional[float]:
        return percentile(self.latencies, 50)

    @property
    def p90(self) -> Optional[float]:
        return percentile(self.latencies, 90)

    @property
    def p99(self) -> Optional[float]:
        return percentile(self.latencies, 99)

    def as_dict(self) -> dict[str, Any]:
        return {
            "latency_ms": {"p50": self.p50, "p90": self.p90, "p99": self.p99, "n": len(self.latencies)},
            "requests": self.requests,
            "approvals": self.approvals,
            "accepted": self.accepted,
            "aborted": self.aborted,
            "rejected": self.rejected,
            "claims": self.claims,
            "settlements": self.settlements,
            "deductions": self.deductions,
            "deducted_value": self.deducted_value,
            "pay_pairings": self.pay_pairings,
            "claim_pairings_max": max(self.claim_pairings, default=0),
            "cost_by_op": self.cost_by_op,
            "withdrawn_customers": self.withdrawn_customers,
        }


def metrics_from_trace(trace: list[dict[str, Any]]) -> MetricsReport:
    rep = MetricsReport()
    customers: list[str] = []
    for r in trace:
        kind = r.get("kind")
        if kind == "roster":
            customers = r["customers"]
        elif kind == "request":
            rep.requests += 1
        elif kind == "quorum":
            rep.approvals += 1
            rep.latencies.append(r["latency"])
        elif kind == "accept":
            rep.accepted += 1
        elif kind == "abort":
            rep.aborted += 1
        elif kind == "reject":
            rep.rejected += 1
        elif kind == "claim_submitted":
            rep.claims += 1
        elif kind == "block":
            for inc in r["included"]:
                cost = inc.get("cost")
                if cost is None:
                    continue
                agg = rep.cost_by_op.setdefault(inc["op"], {})
                for name, v in cost.items():
                    agg[name] = agg.get(name, 0) + v
                if inc["op"] == "PAY":
                    rep.pay_pairings += cost["pairings"]
                if inc["op"] == "CLAIM":
                    rep.claim_pairings.append(cost["pairings"])
                for ev in inc.get("events", []):
                    if ev["kind"] == "settlement":
                        rep.settlements += 1
                    elif ev["kind"] == "statekeeper_deducted":
                        rep.deductions += 1
                        rep.deducted_value += ev["amount"]
                    elif ev["kind"] == "collateral_withdrawn" and ev["customer"] in customers:
                        rep.withdrawn_customers.append(customers.index(ev["customer"]))
    return rep
