"""LOCC programs: local instruments under broadcast classical control.

A program is a finite DAG of nodes. Each node applies one local instrument
and routes every outcome label either to another node or to a ``Halt``.
Classical communication is a broadcast transcript: every party learns every
outcome, so any node may depend on the whole path so far.
"""
from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Mapping, NamedTuple, Sequence

import numpy as np

from .errors import (
    BranchExplosion,
    IncompleteInstrument,
    InvalidSubset,
    LayoutMismatch,
    MalformedInput,
    NoEprAvailable,
)
from .qstate import (
    TOL_NORM,
    Party,
    PureState,
    RegisterLayout,
    apply_local,
    completeness_deviation,
)

DEFAULT_BRANCH_GUARD = 2**16
SUCCESS = "success"
FAILURE = "failure"
# Trials per RNG substream block; a trial's draws depend only on (seed, trial index).
SAMPLE_CHUNK = 4096
_SEED_MASK = (1 << 64) - 1


@dataclass(frozen=True, eq=False)
class LocalInstrument:
    """A generalized measurement on one party: labelled Kraus operators."""

    at: int | str
    elements: tuple[tuple[str, np.ndarray], ...]

    def __post_init__(self):
        elems = []
        for label, op in self.elements:
            op = np.array(op, dtype=np.complex128)
            if op.ndim != 2 or op.shape[0] != op.shape[1]:
                raise MalformedInput(f"instrument element {label!r} is not a square matrix")
            op.setflags(write=False)
            elems.append((str(label), op))
        if not elems:
            raise MalformedInput("an instrument needs at least one element")
        if len({lab for lab, _ in elems}) != len(elems):
            raise MalformedInput("instrument labels must be unique")
        if len({op.shape for _, op in elems}) != 1:
            raise MalformedInput("instrument elements must share one shape")
        object.__setattr__(self, "elements", tuple(elems))

    @property
    def labels(self) -> list[str]:
        return [lab for lab, _ in self.elements]

    @property
    def dim(self) -> int:
        return self.elements[0][1].shape[0]

    @property
    def cbits(self) -> int:
        """Bits needed to broadcast one outcome."""
        return math.ceil(math.log2(len(self.elements)))

    @classmethod
    def unitary(cls, at, u, label: str = "u") -> "LocalInstrument":
        return cls(at, ((label, u),))

    @classmethod
    def projective(cls, at, basis: np.ndarray, labels: Sequence[str] | None = None) -> "LocalInstrument":
        """Rank-one projectors onto the columns of ``basis``."""
        basis = np.asarray(basis, dtype=np.complex128)
        labels = labels or [str(i) for i in range(basis.shape[1])]
        return cls(at, tuple((lab, np.outer(v, v.conj())) for lab, v in zip(labels, basis.T)))


def validate_instrument(inst: LocalInstrument) -> None:
    """Raise IncompleteInstrument unless sum K^dag K = I within 1e-9."""
    dev = completeness_deviation([op for _, op in inst.elements])
    if dev > TOL_NORM:
        raise IncompleteInstrument(
            f"instrument at {inst.at!r} is incomplete: max deviation {dev:.3g} from identity", dev
        )


@dataclass(frozen=True)
class Halt:
    verdict: str
    tag: str | None = None

    def __post_init__(self):
        if self.verdict not in (SUCCESS, FAILURE):
            raise MalformedInput(f"halt verdict must be success or failure, got {self.verdict!r}")


@dataclass(frozen=True, eq=False)
class Node:
    instrument: LocalInstrument
    branches: Mapping[str, "str | Halt"]


@dataclass(frozen=True, eq=False)
class LoccProgram:
    """Finite acyclic classically-controlled sequence of local instruments.

    An empty program (no nodes) halts immediately with ``empty_verdict``.
    """

    nodes: Mapping[str, Node]
    start: str | None = None
    empty_verdict: str = SUCCESS

    def __post_init__(self):
        nodes = dict(self.nodes)
        object.__setattr__(self, "nodes", nodes)
        if not nodes:
            return
        start = self.start if self.start is not None else next(iter(nodes))
        object.__setattr__(self, "start", start)
        if start not in nodes:
            raise MalformedInput(f"start node {start!r} is not defined")
        for name, node in nodes.items():
            validate_instrument(node.instrument)
            missing = set(node.instrument.labels) - set(node.branches)
            extra = set(node.branches) - set(node.instrument.labels)
            if missing or extra:
                raise MalformedInput(
                    f"node {name!r}: unmapped outcomes {sorted(missing)}, unknown labels {sorted(extra)}"
                )
            for target in node.branches.values():
                if not isinstance(target, Halt) and target not in nodes:
                    raise MalformedInput(f"node {name!r} routes to undefined node {target!r}")
        self._depths()  # raises on cycles

    def _depths(self) -> dict[str, int]:
        """Longest number of instruments from each node to a halt."""
        memo: dict[str, int] = {}
        visiting: set[str] = set()

        def visit(name):
            if name in memo:
                return memo[name]
            if name in visiting:
                raise MalformedInput(f"program has a cycle through {name!r}")
            visiting.add(name)
            best = 0
            for target in self.nodes[name].branches.values():
                if not isinstance(target, Halt):
                    best = max(best, visit(target))
            visiting.discard(name)
            memo[name] = best + 1
            return best + 1

        for name in self.nodes:
            visit(name)
        return memo

    def depth(self) -> int:
        return self._depths()[self.start] if self.nodes else 0

    @classmethod
    def chain(cls, instruments: Sequence[LocalInstrument], verdict: str = SUCCESS) -> "LoccProgram":
        """Unconditional sequence: every outcome of step i goes to step i+1."""
        nodes = {}
        for i, inst in enumerate(instruments):
            nxt = f"s{i + 1}" if i + 1 < len(instruments) else Halt(verdict)
            nodes[f"s{i}"] = Node(inst, {lab: nxt for lab in inst.labels})
        return cls(nodes)

    def with_halts(self, relabel) -> "LoccProgram":
        """Copy with each Halt replaced by ``relabel(halt)``."""
        nodes = {
            name: Node(
                node.instrument,
                {lab: relabel(t) if isinstance(t, Halt) else t for lab, t in node.branches.items()},
            )
            for name, node in self.nodes.items()
        }
        return LoccProgram(nodes, self.start, self.empty_verdict)


def sequence(first: LoccProgram, second: LoccProgram, prefix: str = "then") -> LoccProgram:
    """Run ``second`` after every success halt of ``first``.

    Failure halts of ``first`` stay failures; ``second``'s nodes are renamed
    with ``prefix`` so the two name spaces cannot collide.
    """
    if not first.nodes:
        return second if first.empty_verdict == SUCCESS else first
    if not second.nodes:
        return first
    rename = {name: f"{prefix}/{name}" for name in second.nodes}
    nodes = {
        name: Node(
            node.instrument,
            {
                lab: (rename[second.start] if isinstance(t, Halt) and t.verdict == SUCCESS else t)
                for lab, t in node.branches.items()
            },
        )
        for name, node in first.nodes.items()
    }
    for name, node in second.nodes.items():
        nodes[rename[name]] = Node(
            node.instrument,
            {lab: t if isinstance(t, Halt) else rename[t] for lab, t in node.branches.items()},
        )
    return LoccProgram(nodes, first.start)


class Branch(NamedTuple):
    path: tuple[str, ...]
    probability: float
    state: PureState
    verdict: str
    tag: str | None
    cbits: int


@dataclass(eq=False)
class ProtocolTrace:
    branches: list[Branch]
    dropped_probability: float = 0.0

    @property
    def total_success_probability(self) -> float:
        return float(sum(b.probability for b in self.branches if b.verdict == SUCCESS))

    @property
    def total_probability(self) -> float:
        return float(sum(b.probability for b in self.branches) + self.dropped_probability)

    @property
    def success_branches(self) -> list[Branch]:
        return [b for b in self.branches if b.verdict == SUCCESS]

    @property
    def cbits_sent(self) -> int:
        """Broadcast bits on the longest branch."""
        return max((b.cbits for b in self.branches), default=0)

    def success_by_tag(self) -> dict[str | None, float]:
        out: dict[str | None, float] = {}
        for b in self.success_branches:
            out[b.tag] = out.get(b.tag, 0.0) + b.probability
        return out


def _route(prog: LoccProgram, target):
    return target if isinstance(target, Halt) else prog.nodes[target]


def run_program(prog: LoccProgram, s: PureState, guard: int | None = None) -> ProtocolTrace:
    """Exact enumeration of every branch, in instrument-label order."""
    guard = DEFAULT_BRANCH_GUARD if guard is None else guard
    if not prog.nodes:
        return ProtocolTrace([Branch((), 1.0, s, prog.empty_verdict, None, 0)])
    finished: list[Branch] = []
    dropped = 0.0
    stack = [(prog.start, (), 1.0, s, 0)]
    while stack:
        name, path, prob, state, cbits = stack.pop()
        node = prog.nodes[name]
        children = []
        for p, post, label in apply_local(state, node.instrument):
            if post is None:
                dropped += prob * p
                continue
            target = node.branches[label]
            child = (path + (label,), prob * p, post, cbits + node.instrument.cbits)
            if isinstance(target, Halt):
                finished.append(Branch(*child[:3], target.verdict, target.tag, child[3]))
            else:
                children.append((target,) + child)
        stack.extend(reversed(children))
        if len(finished) + len(stack) > guard:
            raise BranchExplosion(f"more than {guard} branches")
    finished.sort(key=lambda b: _path_key(prog, b.path))
    return ProtocolTrace(finished, dropped)


def _path_key(prog: LoccProgram, path: tuple[str, ...]) -> tuple[int, ...]:
    """Sort key placing branches in instrument-label order."""
    key = []
    name = prog.start
    for label in path:
        node = prog.nodes[name]
        key.append(node.instrument.labels.index(label))
        target = node.branches[label]
        if isinstance(target, Halt):
            break
        name = target
    return tuple(key)


def trial_uniforms(seed: int, start: int, stop: int, width: int) -> np.ndarray:
    """Uniform draws for trials [start, stop), one row of ``width`` per trial.

    Row t depends only on (seed, t, width), so any partition of trials into
    batches yields the same numbers.
    """
    width = max(int(width), 1)
    out = np.empty((stop - start, width))
    if stop <= start:
        return out
    key = int(seed) & _SEED_MASK
    for chunk in range(start // SAMPLE_CHUNK, (stop - 1) // SAMPLE_CHUNK + 1):
        gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence([key, chunk])))
        block = gen.random((SAMPLE_CHUNK, width))
        lo, hi = max(start, chunk * SAMPLE_CHUNK), min(stop, (chunk + 1) * SAMPLE_CHUNK)
        out[lo - start : hi - start] = block[lo - chunk * SAMPLE_CHUNK : hi - chunk * SAMPLE_CHUNK]
    return out


@dataclass(eq=False)
class SampleResult:
    success_count: int
    histogram: dict[tuple[str, ...], int]
    trials: int
    seed: int
    verdicts: dict[tuple[str, ...], str] = field(default_factory=dict)

    @property
    def success_fraction(self) -> float:
        return self.success_count / self.trials if self.trials else 0.0

    def frequencies(self) -> dict[tuple[str, ...], float]:
        return {k: v / self.trials for k, v in self.histogram.items()}


def sample_program(prog: LoccProgram, s: PureState, seed: int, trials: int) -> SampleResult:
    """Monte Carlo trajectories; each trial consumes its own uniform row.

    Outcome distributions are computed once per distinct path and shared by
    every trial that reaches it, so no branch guard is needed.
    """
    trials = int(trials)
    u = trial_uniforms(seed, 0, trials, prog.depth())
    histogram: Counter = Counter()
    verdicts: dict[tuple[str, ...], str] = {}
    success = 0
    if not prog.nodes:
        histogram[()] = trials
        verdicts[()] = prog.empty_verdict
        return SampleResult(trials if prog.empty_verdict == SUCCESS else 0, dict(histogram), trials, seed, verdicts)
    frontier = [((), prog.start, s, np.arange(trials))]
    level = 0
    while frontier:
        nxt = []
        for path, name, state, idx in frontier:
            node = prog.nodes[name]
            outcomes = apply_local(state, node.instrument)
            cum = np.cumsum([o.probability for o in outcomes])
            choice = np.searchsorted(cum / cum[-1], u[idx, level], side="right")
            choice = np.minimum(choice, len(outcomes) - 1)
            for j, (p, post, label) in enumerate(outcomes):
                sub = idx[choice == j]
                if sub.size == 0:
                    continue
                child = path + (label,)
                target = node.branches[label]
                if post is None:
                    histogram[child] += sub.size
                    verdicts[child] = "dropped"
                elif isinstance(target, Halt):
                    histogram[child] += sub.size
                    verdicts[child] = target.verdict
                    if target.verdict == SUCCESS:
                        success += sub.size
                else:
                    nxt.append((child, target, post, sub))
        frontier = nxt
        level += 1
    keys = sorted(histogram, key=lambda p: _path_key(prog, p))
    return SampleResult(success, {k: histogram[k] for k in keys}, trials, seed, verdicts)


# --------------------------------------------------------------------------
# resources


def pair_key(a: str, b: str) -> tuple[str, str]:
    return tuple(sorted((a, b)))


@dataclass
class ResourceLedger:
    """Finite accounting of what a protocol consumed.

    ``yield_per_copy`` follows the multicopy convention: target copies out
    times success probability, per source copy consumed.
    """

    copies_consumed: int = 0
    epr_consumed: dict[tuple[str, str], int] = field(default_factory=dict)
    epr_available: dict[tuple[str, str], int] = field(default_factory=dict)
    cats_consumed: int = 0
    cbits_sent: int = 0
    target_copies: int = 0
    success_probability: float = 1.0

    @property
    def yield_per_copy(self) -> float:
        if self.copies_consumed == 0:
            return 0.0
        return self.target_copies * self.success_probability / self.copies_consumed

    @property
    def total_epr_consumed(self) -> int:
        return sum(self.epr_consumed.values())

    def register_epr(self, a: str, b: str, n: int = 1) -> None:
        key = pair_key(a, b)
        self.epr_available[key] = self.epr_available.get(key, 0) + n

    def available(self, a: str, b: str) -> int:
        return self.epr_available.get(pair_key(a, b), 0)

    def consume_epr(self, a: str, b: str, n: int = 1) -> None:
        """Use registered EPR pairs; raises NoEprAvailable if the supply is short."""
        key = pair_key(a, b)
        if self.epr_available.get(key, 0) < n:
            raise NoEprAvailable(f"need {n} EPR pair(s) between {key[0]} and {key[1]}, have {self.epr_available.get(key, 0)}")
        self.epr_available[key] -= n
        self.charge_epr(a, b, n)

    def charge_epr(self, a: str, b: str, n: int = 1) -> None:
        """Record consumption without checking a supply."""
        key = pair_key(a, b)
        self.epr_consumed[key] = self.epr_consumed.get(key, 0) + n

    def absorb(self, other: "ResourceLedger") -> None:
        """Add another ledger's consumption counts into this one."""
        self.copies_consumed += other.copies_consumed
        self.cats_consumed += other.cats_consumed
        self.cbits_sent += other.cbits_sent
        for key, n in other.epr_consumed.items():
            self.epr_consumed[key] = self.epr_consumed.get(key, 0) + n

    def to_dict(self) -> dict:
        def pairs(d):
            return [{"pair": list(k), "count": v} for k, v in sorted(d.items()) if v]

        return {
            "copies_consumed": self.copies_consumed,
            "epr_consumed": pairs(self.epr_consumed),
            "epr_available": pairs(self.epr_available),
            "cats_consumed": self.cats_consumed,
            "cbits_sent": self.cbits_sent,
            "target_copies": self.target_copies,
            "success_probability": self.success_probability,
            "yield_per_copy": self.yield_per_copy,
        }


def merge_parties(s: PureState, a, b, ledger: ResourceLedger | None = None) -> PureState:
    """Fuse parties ``a`` and ``b`` into one composite party at ``a``'s position.

    The composite owns a's qudits followed by b's. The ledger is charged one
    EPR pair per qudit moved from b to a.
    """
    ia, ib = s.layout.index(a), s.layout.index(b)
    if ia == ib:
        raise InvalidSubset("cannot merge a party with itself")
    pa, pb = s.layout.parties[ia], s.layout.parties[ib]
    order = [i for i in range(s.m) if i != ib]
    pos = order.index(ia)
    order.insert(pos + 1, ib)
    t = s.tensor_view().transpose(order)
    parties = [p for i, p in enumerate(s.layout.parties) if i != ib]
    parties[parties.index(pa)] = Party(f"{pa.name}+{pb.name}", pa.dims + pb.dims)
    if ledger is not None:
        ledger.charge_epr(pa.name, pb.name, max(len(pb.dims), 1))
    return PureState(RegisterLayout(tuple(parties)), t.reshape(-1))


# --------------------------------------------------------------------------
# random programs for property testing


def random_instrument(at, d: int, outcomes: int, rng: np.random.Generator) -> LocalInstrument:
    """Random complete instrument: blocks of a random isometry C^d -> C^(d*outcomes)."""
    g = rng.normal(size=(d * outcomes, d)) + 1j * rng.normal(size=(d * outcomes, d))
    q, r = np.linalg.qr(g)
    q = q * (np.diag(r) / np.abs(np.diag(r)))
    blocks = [q[i * d : (i + 1) * d] for i in range(outcomes)]
    return LocalInstrument(at, tuple((f"k{i}", k) for i, k in enumerate(blocks)))


def random_program(
    layout: RegisterLayout,
    rng: np.random.Generator,
    depth: int = 5,
    max_outcomes: int = 3,
    halt_prob: float = 0.15,
) -> LoccProgram:
    """Random adaptive program tree of at most ``depth`` instruments per branch."""
    nodes: dict[str, Node] = {}

    def build(name: str, level: int):
        party = int(rng.integers(layout.m))
        k = int(rng.integers(1, max_outcomes + 1))
        inst = random_instrument(party, layout.party_dims[party], k, rng)
        branches = {}
        for i, label in enumerate(inst.labels):
            if level + 1 >= depth or rng.random() < halt_prob:
                branches[label] = Halt(SUCCESS if rng.random() < 0.5 else FAILURE)
            else:
                child = f"{name}.{i}"
                build(child, level + 1)
                branches[label] = child
        nodes[name] = Node(inst, branches)

    build("n", 0)
    return LoccProgram(nodes, "n")


# --------------------------------------------------------------------------
# protocol-script file format


def _matrix_to_json(mat: np.ndarray) -> list:
    return [[[float(z.real), float(z.imag)] for z in row] for row in mat]


def _matrix_from_json(rows) -> np.ndarray:
    try:
        return np.array([[complex(float(z[0]), float(z[1])) for z in row] for row in rows], dtype=np.complex128)
    except (TypeError, ValueError, IndexError) as exc:
        raise MalformedInput(f"bad matrix: {exc}") from exc


def program_to_dict(prog: LoccProgram, layout: RegisterLayout | None = None) -> dict:
    def party(at):
        if isinstance(at, str) or layout is None:
            return at
        return layout.names[at]

    nodes = {}
    for name, node in prog.nodes.items():
        branches = {}
        for lab, t in node.branches.items():
            if isinstance(t, Halt):
                branches[lab] = {"halt": t.verdict, **({"tag": t.tag} if t.tag else {})}
            else:
                branches[lab] = t
        nodes[name] = {
            "party": party(node.instrument.at),
            "elements": [{"label": lab, "matrix": _matrix_to_json(op)} for lab, op in node.instrument.elements],
            "branches": branches,
        }
    return {"start": prog.start, "nodes": nodes}


def program_from_dict(data: dict) -> LoccProgram:
    try:
        raw_nodes = data["nodes"]
        if isinstance(raw_nodes, list):
            raw_nodes = {n["name"]: n for n in raw_nodes}
        nodes = {}
        for name, raw in raw_nodes.items():
            inst = LocalInstrument(
                raw["party"], tuple((e["label"], _matrix_from_json(e["matrix"])) for e in raw["elements"])
            )
            branches = {}
            for lab, t in raw["branches"].items():
                branches[lab] = Halt(t["halt"], t.get("tag")) if isinstance(t, dict) else t
            nodes[name] = Node(inst, branches)
        return LoccProgram(nodes, data.get("start"))
    except (KeyError, TypeError, AttributeError) as exc:
        raise MalformedInput(f"bad protocol document: {exc}") from exc


def load_program(path) -> tuple[LoccProgram, dict]:
    """Read a protocol script; returns the program and the raw document."""
    try:
        with open(path) as fh:
            data = json.load(fh)
    except (OSError, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedInput(f"{path}: {exc}") from exc
    return program_from_dict(data), data


def save_program(prog: LoccProgram, path, layout: RegisterLayout | None = None, **extra) -> None:
    with open(path, "w") as fh:
        json.dump({**program_to_dict(prog, layout), **extra}, fh)
        fh.write("\n")


def check_program_layout(prog: LoccProgram, layout: RegisterLayout) -> None:
    """Every instrument must name an existing party and match its dimension."""
    for name, node in prog.nodes.items():
        i = layout.index(node.instrument.at)
        if node.instrument.dim != layout.party_dims[i]:
            raise LayoutMismatch(
                f"node {name!r}: {node.instrument.dim}-dim instrument on party "
                f"{layout.names[i]} of dimension {layout.party_dims[i]}"
            )
