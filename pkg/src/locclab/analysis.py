"""Monte Carlo yield estimates and entanglement audits of LOCC programs."""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .decomp import Cut, entropy_across_cut, enumerate_cuts, is_factorizable
from .errors import BranchExplosion, InvalidParameter, NotFactorizable
from .locc import DEFAULT_BRANCH_GUARD, LoccProgram, run_program, sample_program
from .qstate import PureState, apply_local

TOL_MONOTONE = 1e-7
TOL_FACTORIZABLE = 1e-7
MIN_TRIALS = 100
Z95 = 1.96


@dataclass(frozen=True)
class YieldEstimate:
    point: float
    ci_low: float
    ci_high: float
    trials: int
    seed: int

    def to_dict(self) -> dict:
        return {"point": self.point, "ci_low": self.ci_low, "ci_high": self.ci_high,
                "trials": self.trials, "seed": self.seed}


def normal_interval(successes: int, trials: int) -> tuple[float, float, float]:
    p = successes / trials
    half = Z95 * math.sqrt(p * (1 - p) / trials)
    return p, max(0.0, p - half), min(1.0, p + half)


def monte_carlo_yield(prog: LoccProgram, s: PureState, trials: int, seed: int) -> YieldEstimate:
    """Success frequency over seeded trajectories with a 95% normal-approximation interval."""
    if trials < MIN_TRIALS:
        raise InvalidParameter(f"need at least {MIN_TRIALS} trials for a normal-approximation interval")
    res = sample_program(prog, s, seed, trials)
    p, lo, hi = normal_interval(res.success_count, trials)
    return YieldEstimate(p, lo, hi, trials, seed)


@dataclass(eq=False)
class AuditReport:
    kind: str
    per_cut: list[dict]
    violations: list[dict]
    max_violation: float
    tolerance: float
    steps: int = 0
    branches: int = 0
    extra: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.max_violation <= self.tolerance

    def to_dict(self, protocol: str = "", state: PureState | None = None, seed=None, trials=None) -> dict:
        return {
            "kind": self.kind,
            "protocol": protocol,
            "state_digest": state_digest(state) if state is not None else None,
            "per_cut": self.per_cut,
            "violations": self.violations,
            "pass": self.passed,
            "max_violation": self.max_violation,
            "tolerance": self.tolerance,
            "steps": self.steps,
            "branches": self.branches,
            "seed": seed,
            "trials": trials,
        }


def state_digest(s: PureState) -> str:
    h = hashlib.sha256()
    h.update(json.dumps(s.layout.to_dict(), sort_keys=True).encode())
    h.update(np.ascontiguousarray(s.amplitudes, dtype="<c16").tobytes())
    return h.hexdigest()


def monotone_audit(prog: LoccProgram, s: PureState, guard: int | None = None) -> AuditReport:
    """Check expected entropy never increases, step by step, across every canonical cut."""
    guard = DEFAULT_BRANCH_GUARD if guard is None else guard
    cuts = enumerate_cuts(s.layout)
    labels = [c.names(s.layout) for c in cuts]
    initial = [entropy_across_cut(s, c) for c in cuts]
    worst = [0.0] * len(cuts)
    final = [0.0] * len(cuts)
    violations = []
    steps = branches = 0
    stack = [(prog.start, (), 1.0, s, initial)] if prog.nodes else []
    if not prog.nodes:
        final = list(initial)
        branches = 1
    while stack:
        name, path, prob, state, pre = stack.pop()
        node = prog.nodes[name]
        outcomes = [o for o in apply_local(state, node.instrument) if o.state is not None]
        post = [[entropy_across_cut(o.state, c) for c in cuts] for o in outcomes]
        steps += 1
        for k, label in enumerate(labels):
            expected = sum(o.probability * e[k] for o, e in zip(outcomes, post))
            excess = expected - pre[k]
            worst[k] = max(worst[k], excess)
            if excess > TOL_MONOTONE:
                violations.append({"node": name, "path": list(path), "cut": label,
                                   "pre": pre[k], "expected_post": expected, "excess": excess})
        for o, e in zip(outcomes, post):
            target = node.branches[o.label]
            if isinstance(target, str):
                stack.append((target, path + (o.label,), prob * o.probability, o.state, e))
            else:
                branches += 1
                for k in range(len(cuts)):
                    final[k] += prob * o.probability * e[k]
        if len(stack) + branches > guard:
            raise BranchExplosion(f"more than {guard} branches")
    per_cut = [
        {"cut": label, "initial_entropy": a, "expected_final_entropy": b, "max_step_excess": w}
        for label, a, b, w in zip(labels, initial, final, worst)
    ]
    max_violation = max([0.0] + worst + [b - a for a, b in zip(initial, final)])
    return AuditReport("monotone", per_cut, violations, max_violation, TOL_MONOTONE, steps, branches)


def factorizability_audit(prog: LoccProgram, s: PureState, cut: Cut) -> AuditReport:
    """Every branch of a program run on a state factorizable across ``cut`` stays factorizable."""
    if not is_factorizable(s, cut):
        raise NotFactorizable(f"state is entangled across {cut.label(s.layout)}")
    trace = run_program(prog, s)
    ents = [entropy_across_cut(b.state, cut) for b in trace.branches]
    violations = [
        {"path": list(b.path), "entropy": e} for b, e in zip(trace.branches, ents) if e > TOL_FACTORIZABLE
    ]
    max_ent = max(ents, default=0.0)
    per_cut = [{"cut": cut.names(s.layout), "initial_entropy": entropy_across_cut(s, cut),
                "max_branch_entropy": max_ent}]
    return AuditReport("factorizability", per_cut, violations, max_ent, TOL_FACTORIZABLE,
                       branches=len(trace.branches))
