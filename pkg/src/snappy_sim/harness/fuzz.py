"""Seeded adversarial fuzzing of the full protocol stack.

Each iteration draws a random scenario: consortium size, customers, a set of
colluding merchants (never all of them), equivocating statekeepers, a
colluding or censoring miner, and a schedule mixing honest purchases with
every customer attack. The run is audited from its trace. Any violation is
shrunk to a smaller reproducer and written out as a scenario file.
"""

from __future__ import annotations

import copy
import random
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

from .scenario import Scenario
from .world import RunResult, run_scenario

ATTACKS = ["double_spend", "deplete", "withhold", "omit_pending", "equivocate"]

# consortium keys are shared across iterations so their proofs of possession
# are checked once; behaviour and network randomness still vary per seed
FUZZ_KEY_SEED = 7


@dataclass
class FuzzConfig:
    iters: int = 1000
    seed: int = 0
    k_range: tuple[int, int] = (3, 15)
    n_range: tuple[int, int] = (2, 20)
    max_events: int = 6
    # the "difference" rule is excluded by default: it provably under-recovers
    # when the two conflicting values differ by more than one allocation
    penalty_rules: tuple[str, ...] = ("residual",)
    repro_dir: Optional[str] = None


@dataclass
class FuzzReport:
    iterations: int = 0
    violations: int = 0
    shortfalls_checked: int = 0
    shortfall_misses: int = 0
    immunity_violations: int = 0
    conservation_failures: int = 0
    # runs where the equivocators were too few to fill the smallest overlap of
    # two majority quorums, yet some slot was approved twice
    below_overlap_double_approvals: int = 0
    double_approvals: int = 0
    accepted: int = 0
    deductions: int = 0
    elapsed_s: float = 0.0
    failing_seeds: list[int] = field(default_factory=list)
    reproducers: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not (
            self.violations
            or self.shortfall_misses
            or self.immunity_violations
            or self.conservation_failures
            or self.below_overlap_double_approvals
        )

    def as_dict(self) -> dict[str, Any]:
        return {
            "ok": self.ok,
            "iterations": self.iterations,
            "merchant_loss_violations": self.violations,
            "shortfalls_checked": self.shortfalls_checked,
            "shortfall_misses": self.shortfall_misses,
            "immunity_violations": self.immunity_violations,
            "conservation_failures": self.conservation_failures,
            "below_overlap_double_approvals": self.below_overlap_double_approvals,
            "double_approvals": self.double_approvals,
            "accepted": self.accepted,
            "deductions": self.deductions,
            "elapsed_s": round(self.elapsed_s, 3),
            "failing_seeds": self.failing_seeds,
            "reproducers": self.reproducers,
        }


def random_scenario(seed: int, cfg: Optional[FuzzConfig] = None) -> Scenario:
    cfg = cfg or FuzzConfig()
    rng = random.Random(seed)
    k = rng.randint(*cfg.k_range)
    n = rng.randint(*cfg.n_range)
    m = k
    depth = rng.randint(2, 3)

    # adversary: up to all-but-one merchant, any number of statekeepers
    n_colluders = rng.randint(0, m - 1)
    merchants = list(range(m))
    rng.shuffle(merchants)
    colluders = sorted(merchants[:n_colluders])
    honest = [j for j in range(m) if j not in colluders]
    behaviors: dict[int, Any] = {}
    for j in colluders:
        b: dict[str, Any] = {"colluding": True, "drain": rng.choice(["submit", "claim"])}
        if rng.random() < 0.5:
            size = rng.randint(k // 2 + 1, k)
            b["contact"] = sorted(rng.sample(range(k), size))
        behaviors[j] = b
    if rng.random() < 0.1:
        behaviors.setdefault(rng.choice(honest), {})["withhold_broadcast"] = True

    n_equiv = rng.choice([0, rng.randint(1, k // 2 + 1), rng.randint(0, k)])
    statekeepers: dict[int, Any] = {}
    for p in rng.sample(range(k), n_equiv):
        statekeepers[p] = {"equivocate": True}
    for p in range(k):
        if p not in statekeepers and rng.random() < 0.08:
            statekeepers[p] = {"silent": True} if rng.random() < 0.5 else {"crash_at": rng.randint(0, 20_000)}

    collateral = rng.choice([200, 1_000, 5_000])
    deposit_per = rng.choice([50, 300, 2_000])
    scenario: dict[str, Any] = {
        "name": f"fuzz-{seed}",
        "seed": seed,
        "key_seed": FUZZ_KEY_SEED,
        "account_scheme": "stub",
        "consortium": {"k": k, "collateral": deposit_per * m, "statekeepers": statekeepers},
        "merchants": {"count": m, "behaviors": behaviors},
        "customers": {"count": n, "collateral": collateral, "balance": rng.choice([500, 3_000, 20_000])},
        "chain": {
            "finality_depth": depth,
            "miner": {"colluding": rng.random() < 0.6},
        },
        "network": {"jitter": rng.choice([0.0, 0.1, 0.3]), "drop_rate": rng.choice([0.0, 0.0, 0.02])},
        "arbiter": {
            "clearance_period": 400,
            "expiration_window": 400,
            "penalty_rule": rng.choice(list(cfg.penalty_rules)),
        },
        "protocol": {"max_pending": rng.choice([None, 1, 2, 3])},
        "schedule": [],
    }
    if rng.random() < 0.2:
        start = rng.randint(2, 4)
        scenario["chain"]["miner"]["censor"] = [
            {"start": start, "end": start + rng.randint(1, 3 * depth), "customers": sorted(rng.sample(range(n), rng.randint(1, n)))}
        ]
    events = []
    for _ in range(rng.randint(1, cfg.max_events)):
        attack = rng.choice(ATTACKS + [None, None])
        ev: dict[str, Any] = {
            "at": rng.randint(0, 40_000),
            "kind": "purchase",
            "customer": rng.randrange(n),
            "merchant": rng.choice(honest) if rng.random() < 0.8 else rng.randrange(m),
            "value": rng.randint(1, int(collateral * 1.2)),
        }
        if attack == "equivocate":
            if not colluders:
                attack = "double_spend"
            else:
                ev["accomplice"] = rng.choice(colluders)
                ev["accomplice_value"] = rng.randint(1, collateral)
                ev["lower_index"] = rng.random() < 0.3
        if attack:
            ev["attack"] = attack
        events.append(ev)
    if rng.random() < 0.15:
        events.append({"at": rng.randint(0, 40_000), "kind": "clear", "customer": rng.randrange(n)})
    events.sort(key=lambda e: e["at"])
    scenario["schedule"] = events
    return Scenario.model_validate(scenario)


def _broken(result: RunResult) -> bool:
    return not result.audit.ok or not result.conservation_ok


def min_overlap(k: int) -> int:
    """Smallest possible intersection of two majority quorums."""
    q = k // 2 + 1
    return 2 * q - k


def _below_overlap_double(result: RunResult, scenario: Scenario) -> bool:
    byzantine = sum(1 for s in scenario.consortium.statekeepers.values() if s.equivocate)
    return byzantine < min_overlap(scenario.consortium.k) and result.audit.double_approvals > 0


def shrink(scenario: Scenario, still_fails) -> Scenario:
    """Greedy delta-debugging over schedule events and adversarial roles."""
    current = scenario
    changed = True
    while changed:
        changed = False
        data = current.model_dump()
        candidates = []
        for i in range(len(data["schedule"])):
            d = copy.deepcopy(data)
            del d["schedule"][i]
            candidates.append(d)
        for pos in list(data["consortium"]["statekeepers"]):
            d = copy.deepcopy(data)
            del d["consortium"]["statekeepers"][pos]
            candidates.append(d)
        if data["chain"]["miner"]["censor"]:
            d = copy.deepcopy(data)
            d["chain"]["miner"]["censor"] = []
            candidates.append(d)
        for d in candidates:
            try:
                cand = Scenario.model_validate(d)
            except ValueError:
                continue
            if still_fails(cand):
                current = cand
                changed = True
                break
    return current


def run_fuzz(cfg: FuzzConfig, progress=None) -> FuzzReport:
    report = FuzzReport()
    master = random.Random(cfg.seed)
    start = time.perf_counter()
    for it in range(cfg.iters):
        seed = master.getrandbits(48)
        scenario = random_scenario(seed, cfg)
        result = run_scenario(scenario)
        audit = result.audit
        report.iterations += 1
        report.violations += len(audit.violations)
        report.shortfalls_checked += audit.shortfalls_checked
        report.shortfall_misses += len(audit.shortfall_misses)
        report.immunity_violations += len(audit.immunity_violations)
        report.conservation_failures += 0 if result.conservation_ok else 1
        report.double_approvals += audit.double_approvals
        report.accepted += result.metrics.accepted
        report.deductions += result.metrics.deductions
        sparse = _below_overlap_double(result, scenario)
        report.below_overlap_double_approvals += 1 if sparse else 0
        if _broken(result) or sparse:
            report.failing_seeds.append(seed)
            if cfg.repro_dir:
                small = shrink(scenario, lambda s: _broken(run_scenario(s)) or _below_overlap_double(run_scenario(s), s))
                out = Path(cfg.repro_dir) / f"repro-{seed}.json"
                out.parent.mkdir(parents=True, exist_ok=True)
                out.write_text(small.dump() + "\n")
                report.reproducers.append(str(out))
        if progress is not None:
            progress(it + 1, report)
    report.elapsed_s = time.perf_counter() - start
    return report
