"""Safety auditing from exported traces alone.

Nothing here touches actor or contract objects. The auditor rebuilds what
happened from the JSON trace (merchant accept records, statekeeper sign
records, block records) and checks the safety claims against it, so a bug in
the protocol code cannot also hide itself from the audit.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from typing import Any, Iterable

from .. import bls
from ..arbiter import decode_claim
from ..core import CodecError, intent_digest


@dataclass
class MerchantLedger:
    accepted_value: int = 0
    received_value: int = 0
    exposure: int = 0  # accepted but not (yet) received


@dataclass
class SafetyAudit:
    merchants: dict[str, MerchantLedger] = field(default_factory=dict)
    violations: list[dict[str, Any]] = field(default_factory=list)
    shortfalls_checked: int = 0
    shortfall_misses: list[dict[str, Any]] = field(default_factory=list)
    equivocators: set = field(default_factory=set)
    deductions: dict[int, int] = field(default_factory=dict)
    immunity_violations: list[int] = field(default_factory=list)
    double_approvals: int = 0

    @property
    def ok(self) -> bool:
        return not (self.violations or self.shortfall_misses or self.immunity_violations)

    def as_dict(self) -> dict[str, Any]:
        return {
            "ok": self.ok,
            "violations": self.violations,
            "shortfalls_checked": self.shortfalls_checked,
            "shortfall_misses": self.shortfall_misses,
            "equivocators": sorted(self.equivocators),
            "deductions": dict(sorted(self.deductions.items())),
            "immunity_violations": self.immunity_violations,
            "double_approvals": self.double_approvals,
            "merchants": {
                m: {"accepted": l.accepted_value, "received": l.received_value, "exposure": l.exposure}
                for m, l in sorted(self.merchants.items())
            },
        }


def _blocks(trace: Iterable[dict[str, Any]]) -> list[dict[str, Any]]:
    return [r for r in trace if r.get("kind") == "block"]


def _approvals(trace: list[dict[str, Any]], k: int) -> Iterable[tuple[str, int, str, str, list[int]]]:
    """Yield (customer, index, intent hex, agg hex, quorum) for every Pay tx seen."""
    for r in trace:
        if r.get("kind") == "accept":
            yield r["customer"], r["index"], r["intent"], r["agg"], r["quorum"]
        if r.get("kind") != "block":
            continue
        for inc in r["included"]:
            pay = inc.get("pay")
            if pay:
                yield inc["from"], pay["index"], pay["intent"], pay["agg"], pay["quorum"]
            if inc["op"] == "CLAIM" and "data" in inc:
                try:
                    claim = decode_claim(bytes.fromhex(inc["data"]), k)
                except (CodecError, ValueError):
                    continue
                txs = [claim.pending_tx, *claim.preceding_pending]
                for a, b in claim.conflict_tuples:
                    txs += [a, b]
                for t in txs:
                    if t.is_pay:
                        yield (
                            str(t.frm),
                            t.index,
                            intent_digest(t.intent()).hex(),
                            t.agg_sig.point.hex(),
                            t.quorum.indices(),
                        )


def _consortium(trace: list[dict[str, Any]]) -> dict[int, bytes]:
    keys = {}
    for blk in _blocks(trace):
        for inc in blk["included"]:
            for ev in inc.get("events", []):
                if ev["kind"] == "statekeeper_registered":
                    keys[ev["position"]] = bytes.fromhex(ev["public"])
    return keys


def _approved_slots(trace: list[dict[str, Any]], keys: dict[int, bytes]) -> dict[tuple[str, int], set[str]]:
    k = len(keys)
    need = k // 2 + 1
    slots: dict[tuple[str, int], set[str]] = defaultdict(set)
    checked: dict[tuple[str, str, tuple[int, ...]], bool] = {}
    for customer, index, intent, agg, quorum in _approvals(trace, k) if k else ():
        q = tuple(quorum)
        ck = (intent, agg, q)
        if ck not in checked:
            ok = len(set(q)) >= need and all(0 <= p < k for p in q)
            if ok:
                ok = bls.verify_aggregate(
                    bytes.fromhex(intent), bls.AggregateSignature(bytes.fromhex(agg)), [keys[p] for p in q]
                )
            checked[ck] = ok
        if checked[ck]:
            slots[(customer, index)].add(intent)
    return slots


def audit_trace(trace: list[dict[str, Any]]) -> SafetyAudit:
    audit = SafetyAudit()
    accepts = [r for r in trace if r.get("kind") == "accept" and r.get("honest")]
    accepted_by_intent = {r["intent"]: r for r in accepts}

    received: dict[tuple[str, str], int] = defaultdict(int)
    settle_history: dict[str, int] = defaultdict(int)
    shortfall_cases = []
    for blk in _blocks(trace):
        for inc in blk["included"]:
            for p in inc.get("payouts", []):
                if p["reason"] in ("forward", "settlement") and p["ref"]:
                    received[(p["to"], p["ref"])] += p["amount"]
            events = inc.get("events", [])
            for ev in events:
                if ev["kind"] == "statekeeper_deducted":
                    audit.deductions[ev["position"]] = audit.deductions.get(ev["position"], 0) + ev["amount"]
            settle = [e for e in events if e["kind"] == "settlement"]
            if not settle:
                continue
            s = settle[0]
            prior = settle_history[s["intent"]]
            owed = s["value"] - prior
            settle_history[s["intent"]] = s["paid"]
            if s["intent"] not in accepted_by_intent:
                continue
            from_customer = sum(e["paid"] for e in events if e["kind"] == "customer_claim")
            if from_customer < owed:
                shortfall_cases.append((s["customer"], s["index"], s["intent"], owed, from_customer))

    for r in accepts:
        m = r["merchant"]
        ledger = audit.merchants.setdefault(m, MerchantLedger())
        got = received[(m, r["intent"])]
        ledger.accepted_value += r["value"]
        ledger.received_value += got
        ledger.exposure += max(0, r["value"] - got)
        if got < r["value"]:
            audit.violations.append(
                {"merchant": m, "intent": r["intent"], "value": r["value"], "received": got}
            )

    keys = _consortium(trace)
    slots = _approved_slots(trace, keys)
    audit.double_approvals = sum(1 for v in slots.values() if len(v) > 1)
    for customer, index, intent, owed, paid in shortfall_cases:
        audit.shortfalls_checked += 1
        found = any(
            len(intents) > 1 and c == customer and i <= index for (c, i), intents in slots.items()
        )
        if not found:
            audit.shortfall_misses.append(
                {"customer": customer, "index": index, "intent": intent, "owed": owed, "from_collateral": paid}
            )

    signed: dict[tuple[int, str, int], set[str]] = defaultdict(set)
    for r in trace:
        if r.get("kind") == "sign":
            signed[(r["statekeeper"], r["customer"], r["index"])].add(r["intent"])
    audit.equivocators = {pos for (pos, _, _), intents in signed.items() if len(intents) > 1}
    audit.immunity_violations = sorted(
        pos for pos, amount in audit.deductions.items() if amount and pos not in audit.equivocators
    )
    return audit


def check_expectations(expect, audit: SafetyAudit, metrics) -> list[str]:
    out = []
    if expect.safe and not audit.ok:
        out.append(f"audit failed: {audit.as_dict()}")
    checks = [
        ("accepted", metrics.accepted, lambda v, x: v == x),
        ("min_accepted", metrics.accepted, lambda v, x: v >= x),
        ("max_accepted", metrics.accepted, lambda v, x: v <= x),
        ("min_aborted", metrics.aborted, lambda v, x: v >= x),
        ("min_rejected", metrics.rejected, lambda v, x: v >= x),
        ("min_settlements", metrics.settlements, lambda v, x: v >= x),
        ("max_settlements", metrics.settlements, lambda v, x: v <= x),
        ("min_deductions", metrics.deductions, lambda v, x: v >= x),
        ("max_deductions", metrics.deductions, lambda v, x: v <= x),
    ]
    for name, value, pred in checks:
        want = getattr(expect, name)
        if want is not None and not pred(value, want):
            out.append(f"expected {name}={want}, got {value}")
    for c in expect.withdrawn:
        if c not in metrics.withdrawn_customers:
            out.append(f"customer {c} did not withdraw")
    return out
