"""Built-in scenarios, each with the outcome it is expected to produce."""

from __future__ import annotations

from typing import Any, Callable, Iterable

from .scenario import Scenario
from .world import RunResult, run_scenario


def _purchase(at: int, customer: int, merchant: int, value: int, **extra: Any) -> dict[str, Any]:
    return {"at": at, "kind": "purchase", "customer": customer, "merchant": merchant, "value": value, **extra}


def honest_flow() -> Scenario:
    return Scenario.model_validate(
        {
            "name": "honest-flow",
            "description": "Honest customers pay honest merchants; every payment lands on chain.",
            "seed": 11,
            "consortium": {"k": 5},
            "customers": {"count": 3},
            "chain": {"finality_depth": 3},
            "schedule": [
                _purchase(0, 0, 0, 1_200),
                _purchase(400, 1, 1, 800),
                _purchase(900, 2, 2, 2_500),
                _purchase(20_000, 0, 3, 700),
                _purchase(20_500, 1, 4, 999),
            ],
            "expect": {"accepted": 5, "max_deductions": 0},
        }
    )


def congestion_only() -> Scenario:
    """Blocks hold two transactions, so payments sit in the mempool past the patience window.

    Merchants race settlement claims against their own delayed payments; the
    first to land wins and the other is reverted without loss.
    """
    return Scenario.model_validate(
        {
            "name": "congestion-only",
            "description": "Honest actors on a congested chain: payments stay pending past the patience window.",
            "seed": 12,
            "consortium": {"k": 4},
            "customers": {"count": 4},
            "chain": {"finality_depth": 2, "block_capacity": 2},
            "protocol": {"patience_blocks": 3, "max_patience_blocks": 4},
            # registrations need six blocks at this capacity
            "schedule": [_purchase(80_000 + 100 * i, i % 4, i % 4, 500 + 10 * i) for i in range(12)],
            "expect": {"accepted": 12, "max_deductions": 0},
        }
    )


def double_spend_vs_collateral() -> Scenario:
    return Scenario.model_validate(
        {
            "name": "double-spend-vs-collateral",
            "description": "The customer races a same-nonce transfer of its whole balance; the merchant claims collateral.",
            "seed": 13,
            "consortium": {"k": 3},
            "customers": {"count": 1, "collateral": 1_000, "balance": 5_000},
            "chain": {"finality_depth": 3, "miner": {"colluding": True}},
            "schedule": [_purchase(0, 0, 0, 800, attack="double_spend")],
            "expect": {"accepted": 1, "min_settlements": 1, "max_deductions": 0},
        }
    )


def colluding_statekeeper_equivocation() -> Scenario:
    """The attack from the design discussion: tx to a victim, tx' to a colluder.

    Three of five statekeepers sign both intents. The colluding miner censors
    the victim's transaction while the colluding merchant claims first, so the
    victim can only be made whole from the equivocators' deposits.
    """
    return Scenario.model_validate(
        {
            "name": "colluding-statekeeper-equivocation",
            "description": "Customer, accomplice merchant, miner and a statekeeper majority collude against one victim.",
            "seed": 14,
            "consortium": {"k": 5, "collateral": 50_000, "statekeepers": {p: {"equivocate": True} for p in (0, 1, 2)}},
            "merchants": {"behaviors": {4: {"colluding": True, "drain": "claim", "contact": [0, 1, 2]}}},
            "customers": {"count": 1, "collateral": 1_000, "balance": 10_000},
            "chain": {
                "finality_depth": 3,
                "miner": {"colluding": True, "censor": [{"start": 2, "end": 40, "customers": [0], "ops": ["PAY"]}]},
            },
            "schedule": [_purchase(0, 0, 0, 900, attack="equivocate", accomplice=4, accomplice_value=1_000)],
            "expect": {"accepted": 2, "min_deductions": 1},
        }
    )


def multi_merchant_equivocation() -> Scenario:
    """Equivocating statekeepers serve several victims at once; allocations keep them apart."""
    behaviors = {j: {"colluding": True, "drain": "claim", "contact": [0, 1, 2, 3]} for j in (4, 5)}
    return Scenario.model_validate(
        {
            "name": "multi-merchant-equivocation",
            "description": "Three customers equivocate against three victims with the same statekeeper majority.",
            "seed": 15,
            "consortium": {"k": 6, "collateral": 60_000, "statekeepers": {p: {"equivocate": True} for p in (0, 1, 2, 3)}},
            "merchants": {"behaviors": behaviors},
            "customers": {"count": 3, "collateral": 1_000, "balance": 10_000},
            "chain": {
                "finality_depth": 3,
                "miner": {"colluding": True, "censor": [{"start": 2, "end": 40, "customers": [0, 1, 2], "ops": ["PAY"]}]},
            },
            "schedule": [
                _purchase(0, 0, 0, 900, attack="equivocate", accomplice=4, accomplice_value=1_000),
                _purchase(5, 1, 1, 700, attack="equivocate", accomplice=5, accomplice_value=1_000),
                _purchase(10, 2, 2, 950, attack="equivocate", accomplice=4, accomplice_value=1_000),
            ],
            "expect": {"min_accepted": 3, "min_deductions": 3},
        }
    )


def liveness_case(k: int, responsive: int) -> Scenario:
    """``responsive`` statekeepers answer; the rest stay silent."""
    need = k // 2 + 1
    silent = {p: {"silent": True, "refuse": True} for p in range(responsive, k)}
    ok = responsive >= need
    return Scenario.model_validate(
        {
            "name": f"liveness-k{k}-r{responsive}",
            "description": f"{responsive} of {k} statekeepers reachable.",
            "seed": 16,
            "account_scheme": "stub",
            "consortium": {"k": k, "collateral": 1_000 * k, "statekeepers": silent},
            "merchants": {"count": 1},
            "customers": {"count": 1, "collateral": 500},
            "chain": {"finality_depth": 2},
            "schedule": [_purchase(0, 0, 0, 10)],
            "expect": {"accepted": 1} if ok else {"accepted": 0, "min_aborted": 1, "max_settlements": 0},
        }
    )


def liveness_sweep(ks: Iterable[int] = (3, 5, 10, 101)) -> list[Scenario]:
    out = []
    for k in ks:
        need = k // 2 + 1
        out += [liveness_case(k, need), liveness_case(k, need - 1)]
    return out


def censorship_by_majority() -> Scenario:
    """A statekeeper majority refuses one customer: no approvals, no losses."""
    return Scenario.model_validate(
        {
            "name": "censorship-by-majority",
            "description": "Three of five statekeepers refuse to serve customer 0; customer 1 is unaffected.",
            "seed": 17,
            "consortium": {"k": 5, "statekeepers": {p: {"refuse_customers": [0]} for p in (0, 1, 2)}},
            "customers": {"count": 2},
            "chain": {"finality_depth": 3},
            "schedule": [_purchase(0, 0, 0, 500), _purchase(50, 1, 1, 500)],
            "expect": {"accepted": 1, "min_aborted": 1},
        }
    )


def clearance_lifecycle() -> Scenario:
    return Scenario.model_validate(
        {
            "name": "clearance-lifecycle",
            "description": "Pay, request clearance, wait out the period, withdraw the remaining collateral.",
            "seed": 18,
            "consortium": {"k": 3},
            "customers": {"count": 1, "collateral": 2_000},
            "chain": {"finality_depth": 2},
            "arbiter": {"clearance_period": 6},
            "schedule": [
                _purchase(0, 0, 0, 300),
                {"at": 60_000, "kind": "clear", "customer": 0},
                # refused: the clearance period has not elapsed yet
                {"at": 80_000, "kind": "withdraw", "customer": 0},
                {"at": 160_000, "kind": "withdraw", "customer": 0},
            ],
            "expect": {"accepted": 1, "withdrawn": [0]},
        }
    )


def max_pending_one() -> Scenario:
    return Scenario.model_validate(
        {
            "name": "max-pending-1",
            "description": "Only one unconfirmed payment per customer; a second purchase waits for finality.",
            "seed": 19,
            "consortium": {"k": 4},
            "customers": {"count": 1},
            "chain": {"finality_depth": 2},
            "protocol": {"max_pending": 1},
            "schedule": [_purchase(0, 0, 0, 400), _purchase(200, 0, 1, 400), _purchase(60_000, 0, 2, 400)],
            "expect": {"accepted": 2, "min_rejected": 1},
        }
    )


def centralized_k1() -> Scenario:
    return Scenario.model_validate(
        {
            "name": "centralized-k1",
            "description": "A single statekeeper run by the merchants themselves.",
            "seed": 20,
            "consortium": {"k": 1},
            "merchants": {"count": 2},
            "customers": {"count": 2},
            "chain": {"finality_depth": 2},
            "schedule": [_purchase(0, 0, 0, 600), _purchase(10, 1, 1, 600), _purchase(30_000, 0, 1, 100)],
            "expect": {"accepted": 3},
        }
    )


BUILTINS: dict[str, Callable[[], Scenario]] = {
    "honest-flow": honest_flow,
    "congestion-only": congestion_only,
    "double-spend-vs-collateral": double_spend_vs_collateral,
    "colluding-statekeeper-equivocation": colluding_statekeeper_equivocation,
    "multi-merchant-equivocation": multi_merchant_equivocation,
    "censorship-by-majority": censorship_by_majority,
    "clearance-lifecycle": clearance_lifecycle,
    "max-pending-1": max_pending_one,
    "centralized-k1": centralized_k1,
}


def builtin_scenarios() -> list[Scenario]:
    return [make() for make in BUILTINS.values()] + liveness_sweep()


def run_suite(scenarios: Iterable[Scenario] | None = None) -> list[RunResult]:
    return [run_scenario(s) for s in (builtin_scenarios() if scenarios is None else scenarios)]
