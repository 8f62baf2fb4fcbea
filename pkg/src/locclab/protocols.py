"""Constructive entanglement-transformation protocols.

Everything here builds explicit LOCC programs and evaluates them by exact
branch enumeration; success probabilities are never asserted, only computed.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.stats import unitary_group

from .decomp import (
    Cut,
    EoaCase,
    entropy_across_cut,
    eoa_zero_check,
    is_factorizable,
    is_irreducible,
    schmidt,
    singleton_cut,
)
from .errors import (
    BasisSearchExhausted,
    CopyBudgetExceeded,
    InvalidSubset,
    NoEprAvailable,
    NotACatState,
    NotEntangled,
    NotIrreducible,
    UnsupportedDimension,
)
from .locc import (
    FAILURE,
    SUCCESS,
    Halt,
    LocalInstrument,
    LoccProgram,
    Node,
    ProtocolTrace,
    ResourceLedger,
    merge_parties,
    run_program,
    sequence,
)
from .qstate import (
    Party,
    PureState,
    RegisterLayout,
    apply_local,
    embed,
    fidelity,
    ghz,
    partial_trace,
    qudit_offsets,
    regroup,
    tensor_local,
)

TOL_PURE = 1e-9
# Residual entropy (bits) a helper outcome must leave for assisted_entangle to accept it.
TOL_ASSIST = 1e-6
N_RANDOM_BASES = 32

I2 = np.eye(2, dtype=complex)
X = np.array([[0, 1], [1, 0]], dtype=complex)
Z = np.diag([1.0, -1.0]).astype(complex)
HADAMARD = np.array([[1, 1], [1, -1]], dtype=complex) / math.sqrt(2)

NOTE_FILTER = (
    "filter coefficients use c = a1/sqrt(p), d = a2/sqrt(p); this normalization is the one "
    "that reproduces the total success probability 2 a1^2 a2^2 / (a1^2 + a2^2)"
)
NOTE_YIELD = "yield_per_copy = target copies x success probability / source copies consumed"
NOTE_IRREDUCIBLE = "irreducible is read as: factorizable across no cut"


# --------------------------------------------------------------------------
# results


@dataclass(frozen=True)
class GambleAnalysis:
    chosen_pair: tuple[float, float]
    projection_probability: float
    filter_coeffs: tuple[float, float]
    total_success: float


@dataclass(eq=False)
class DistillationOutcome:
    pair: tuple[int, int]
    pair_names: tuple[str, str]
    success_probability: float
    success_state: PureState
    trace: ProtocolTrace
    ledger: ResourceLedger
    program: LoccProgram
    stages: list[dict] = field(default_factory=list)

    def success_fidelities(self) -> list[float]:
        i, j = (self.success_state.layout.index(n) for n in self.pair_names)
        return [epr_fidelity(b.state, i, j) for b in self.trace.success_branches]

    @property
    def min_success_fidelity(self) -> float:
        return min(self.success_fidelities(), default=0.0)


@dataclass(eq=False)
class AssistOutcome:
    case: EoaCase
    instrument: LocalInstrument | None
    outcomes: list[tuple[str, float, PureState | None, float]]  # label, prob, residual, entropy
    success_probability: float
    basis: str | None


@dataclass(eq=False)
class TeleportResult:
    state: PureState
    branches: list[tuple[float, PureState]]
    min_fidelity: float
    delta: ResourceLedger


# --------------------------------------------------------------------------
# helpers


def epr_state_vector(d1: int = 2, d2: int = 2) -> np.ndarray:
    """(|00> + |11>)/sqrt(2) embedded in the two lowest levels of each side."""
    v = np.zeros(d1 * d2, dtype=complex)
    v[0] = v[d2 + 1] = 1 / math.sqrt(2)
    return v


def epr_fidelity(s: PureState, p, q) -> float:
    """Fidelity of the reduced state on parties p, q with the standard EPR pair."""
    i, j = sorted((s.layout.index(p), s.layout.index(q)))
    if i == j:
        raise InvalidSubset("an EPR pair needs two distinct parties")
    dims = s.layout.party_dims
    target = epr_state_vector(dims[i], dims[j])
    if s.m == 2:
        return float(abs(np.vdot(target, s.amplitudes)) ** 2)
    rho = partial_trace(s, [i, j]).matrix
    return float(np.vdot(target, rho @ target).real)


def _complete_unitary(rows: np.ndarray) -> np.ndarray:
    """Unitary whose leading rows are the given orthonormal rows."""
    rows = np.atleast_2d(rows)
    k, d = rows.shape
    _, _, vh = np.linalg.svd(rows)
    return np.vstack([rows, vh[k:]])


def _pair_vector(s: PureState, p: int, q: int) -> PureState:
    """The pure joint state of parties p, q (which must be in product with the rest)."""
    lo, hi = sorted((p, q))
    sub = s.layout.sub([lo, hi])
    if s.m == 2:
        return s
    cut = Cut(frozenset({lo, hi}), s.m)
    dec = schmidt(s, cut)
    if dec.coefficients[0] < 1 - TOL_PURE:
        raise InvalidSubset(
            f"parties {s.layout.names[p]}, {s.layout.names[q]} are entangled with the rest; "
            "merge parties so each side of the cut is a single party"
        )
    # left/right role depends on which side the canonical cut keeps
    vec = dec.left_basis[0] if lo in cut.x else dec.right_basis[0]
    return PureState.normalized(sub, vec)


def pair_tag(layout: RegisterLayout, p: int, q: int) -> str:
    return ",".join(sorted((layout.names[p], layout.names[q])))


# --------------------------------------------------------------------------
# bipartite gambling


def gamble_success_probability(coeffs: Sequence[float]) -> GambleAnalysis:
    """Closed-form analysis of gambling on the two largest Schmidt coefficients."""
    nz = sorted((float(a) for a in coeffs if a > 0), reverse=True)
    if len(nz) < 2:
        raise NotEntangled("gambling needs at least two nonzero Schmidt coefficients")
    a1, a2 = nz[0], nz[1]
    p = a1**2 + a2**2
    c, d = a1 / math.sqrt(p), a2 / math.sqrt(p)
    return GambleAnalysis((a1, a2), p, (c, d), 2 * a1**2 * a2**2 / p)


def procrustean_filter(at, x1: np.ndarray, x2: np.ndarray, c: float, d: float) -> LocalInstrument:
    """Two-outcome filter in the local basis {x1, x2}; 'a1' equalizes c and d.

    a1 = d|x1><x1| + c|x2><x2|, a2 = sqrt(1-d^2)|x1><x1| + sqrt(1-c^2)|x2><x2| + (rest).
    """
    p1, p2 = np.outer(x1, x1.conj()), np.outer(x2, x2.conj())
    rest = np.eye(len(x1)) - p1 - p2
    a1 = d * p1 + c * p2
    a2 = math.sqrt(max(0.0, 1 - d * d)) * p1 + math.sqrt(max(0.0, 1 - c * c)) * p2 + rest
    return LocalInstrument(at, (("a1", a1), ("a2", a2)))


def _projection(at, vectors: np.ndarray) -> LocalInstrument:
    proj = sum(np.outer(v, v.conj()) for v in vectors)
    return LocalInstrument(at, (("keep", proj), ("discard", np.eye(len(vectors[0])) - proj)))


def gamble_nodes(s: PureState, p: int, q: int, prefix: str = "g") -> tuple[dict, str, GambleAnalysis]:
    """Program nodes for gambling on the pure pair (p, q); p acts as the filtering side.

    Steps: both sides project onto their two leading Schmidt vectors, p applies
    the Procrustean filter, then both rotate the Schmidt vectors onto levels
    0 and 1 so the success output is the standard EPR pair.
    """
    pair = _pair_vector(s, p, q)
    lo = min(p, q)
    dec = schmidt(pair, Cut(frozenset({0}), 2))
    analysis = gamble_success_probability(dec.coefficients)
    # side 0 of the pair layout is the lower-indexed party
    vp, vq = (dec.left_basis, dec.right_basis) if p == lo else (dec.right_basis, dec.left_basis)
    names = s.layout.names
    c, d = analysis.filter_coeffs
    tag = pair_tag(s.layout, p, q)
    nodes = {
        f"{prefix}/proj-{names[p]}": Node(_projection(p, vp[:2]), {"keep": f"{prefix}/proj-{names[q]}", "discard": Halt(FAILURE)}),
        f"{prefix}/proj-{names[q]}": Node(_projection(q, vq[:2]), {"keep": f"{prefix}/filter", "discard": Halt(FAILURE)}),
        f"{prefix}/filter": Node(procrustean_filter(p, vp[0], vp[1], c, d), {"a1": f"{prefix}/rot-{names[p]}", "a2": Halt(FAILURE)}),
        f"{prefix}/rot-{names[p]}": Node(
            LocalInstrument.unitary(p, _complete_unitary(vp[:2].conj())), {"u": f"{prefix}/rot-{names[q]}"}
        ),
        f"{prefix}/rot-{names[q]}": Node(
            LocalInstrument.unitary(q, _complete_unitary(vq[:2].conj())), {"u": Halt(SUCCESS, tag)}
        ),
    }
    return nodes, f"{prefix}/proj-{names[p]}", analysis


def _single_copy_outcome(s, prog, trace, pair) -> DistillationOutcome:
    succ = trace.success_branches
    best = max(succ, key=lambda b: b.probability).state if succ else s
    p = trace.total_success_probability
    ledger = ResourceLedger(copies_consumed=1, target_copies=1, success_probability=p, cbits_sent=trace.cbits_sent)
    names = (s.layout.names[pair[0]], s.layout.names[pair[1]])
    return DistillationOutcome(tuple(pair), names, p, best, trace, ledger, prog)


def gamble_pair(s: PureState, p, q) -> DistillationOutcome:
    """Gamble for an EPR pair between parties p and q, whose joint state must be pure."""
    p, q = s.layout.index(p), s.layout.index(q)
    if p == q:
        raise InvalidSubset("gambling needs two distinct parties")
    nodes, start, _ = gamble_nodes(s, p, q)
    prog = LoccProgram(nodes, start)
    trace = run_program(prog, s)
    return _single_copy_outcome(s, prog, trace, tuple(sorted((p, q))))


def bipartite_gamble(s: PureState, cut: Cut) -> DistillationOutcome:
    """Stochastic conversion to an EPR pair across a cut with a single party on each side."""
    if len(cut.x) != 1 or len(cut.complement) != 1:
        raise InvalidSubset("bipartite_gamble needs one party on each side; merge composite sides first")
    (p,), (q,) = cut.x, cut.complement
    return gamble_pair(s, p, q)


# --------------------------------------------------------------------------
# multipartite gambling


def fourier_basis(d: int) -> np.ndarray:
    k = np.arange(d)
    return np.exp(2j * np.pi * np.outer(k, k) / d) / math.sqrt(d)


def helper_bases(d: int, seed: int = 0):
    """Candidate helper measurement bases: computational, Fourier, then seeded Haar."""
    yield "computational", np.eye(d, dtype=complex)
    yield "fourier", fourier_basis(d)
    rng = np.random.default_rng(seed)
    for i in range(N_RANDOM_BASES):
        yield f"haar-{i}", unitary_group.rvs(d, random_state=rng)


def assisted_entangle(s: PureState, helper, b, seed: int = 0) -> AssistOutcome:
    """Helper measures its share so that b ends up entangled with the remaining parties.

    Returns the zero-assistance case tag instead when the helper cannot help.
    """
    h, bi = s.layout.index(helper), s.layout.index(b)
    case = eoa_zero_check(s, h, bi)
    if case is not EoaCase.NONZERO:
        return AssistOutcome(case, None, [], 0.0, None)
    d = s.layout.party_dims[h]
    cut = singleton_cut(s.layout, bi)
    for name, basis in helper_bases(d, seed):
        inst = LocalInstrument.projective(h, basis, [f"h{i}" for i in range(d)])
        outcomes = []
        for prob, post, label in apply_local(s, inst):
            ent = entropy_across_cut(post, cut) if post is not None else 0.0
            outcomes.append((label, prob, post, ent))
        good = sum(prob for _, prob, _, ent in outcomes if ent > TOL_ASSIST)
        if good > 0:
            return AssistOutcome(case, inst, outcomes, good, name)
    raise BasisSearchExhausted(
        f"no tried helper basis on {s.layout.names[h]} left {s.layout.names[bi]} entangled"
    )


class _Planner:
    """Builds the adaptive program of the some-pair construction, one branch at a time."""

    def __init__(self, seed: int = 0):
        self.nodes: dict[str, Node] = {}
        self.seed = seed

    def plan(self, state: PureState, active: tuple[int, ...], prefix: str):
        anchor = next((p for p in active if not is_factorizable(state, singleton_cut(state.layout, p))), None)
        if anchor is None:
            return Halt(FAILURE)
        if len(active) == 2:
            other = active[1] if active[0] == anchor else active[0]
            nodes, start, _ = gamble_nodes(state, anchor, other, prefix)
            self.nodes.update(nodes)
            return start
        b = next(p for p in active if p != anchor)
        case = eoa_zero_check(state, anchor, b)
        if case is EoaCase.ZERO_CASE_C_PURE:
            return self.plan(state, tuple(sorted((anchor, b))), prefix)
        if case is EoaCase.ZERO_CASE_B_PURE:
            return self.plan(state, tuple(p for p in active if p != b), prefix)
        assist = assisted_entangle(state, anchor, b, self.seed)
        name = f"{prefix}/assist-{state.layout.names[anchor]}"
        rest = tuple(p for p in active if p != anchor)
        branches = {}
        for label, _, post, _ in assist.outcomes:
            branches[label] = Halt(FAILURE) if post is None else self.plan(post, rest, f"{name}={label}")
        self.nodes[name] = Node(assist.instrument, branches)
        return name


def gamble_some_epr(s: PureState, seed: int = 0) -> DistillationOutcome:
    """Single-copy stochastic conversion to an EPR pair between some two parties.

    Recursion on the active party set: two parties gamble directly; otherwise
    the zero-assistance test either detaches a pure factor or a helper
    measurement hands the entanglement to the remaining parties. Branches may
    end on different pairs; the pair with the largest total probability is
    reported and the other branches count as failures.
    """
    if s.m < 2:
        raise NotEntangled("a single party holds no entanglement")
    planner = _Planner(seed)
    start = planner.plan(s, tuple(range(s.m)), "r")
    if isinstance(start, Halt):
        raise NotEntangled("state is a product of single-party states")
    prog = LoccProgram(planner.nodes, start)
    by_tag = run_program(prog, s).success_by_tag()
    best = min(by_tag, key=lambda t: (-by_tag[t], t))
    prog = prog.with_halts(lambda h: h if h.tag == best else Halt(FAILURE, h.tag))
    trace = run_program(prog, s)
    pair = tuple(sorted(s.layout.index(n) for n in best.split(",")))
    return _single_copy_outcome(s, prog, trace, pair)


def epr_between_pair(source: PureState, p1, p2, max_copies: int | None = None, seed: int = 0) -> DistillationOutcome:
    """Multicopy stochastic conversion to an EPR pair between two designated parties.

    Level L works on a fresh copy in which the pairs found at levels < L are
    fused into composite parties. Fusing a copy consumes EPR pairs from earlier
    levels, so a level-j pair needed for k qudits costs k level-j attempts;
    the ledger counts every copy this requires.
    """
    if not is_irreducible(source):
        raise NotIrreducible("source is factorizable across some cut")
    i1, i2 = source.layout.index(p1), source.layout.index(p2)
    if i1 == i2:
        raise InvalidSubset("target parties must differ")
    n1, n2 = source.layout.names[i1], source.layout.names[i2]
    merges: list[tuple[str, str, int]] = []  # (keep name, moved name, qudits moved) on the level-j layout
    levels = []
    while True:
        copy = source
        groups = [[n] for n in source.layout.names]
        for keep, moved, _ in merges:
            ia, ib = copy.layout.index(keep), copy.layout.index(moved)
            copy = merge_parties(copy, ia, ib)
            groups[ia] = groups[ia] + groups[ib]
            del groups[ib]
        out = gamble_some_epr(copy, seed)
        ga, gb = out.pair
        levels.append({"layout": copy.layout.names, "outcome": out, "groups": groups})
        if (n1 in groups[ga] and n2 in groups[gb]) or (n2 in groups[ga] and n1 in groups[gb]):
            break
        pa, pb = copy.layout.parties[ga], copy.layout.parties[gb]
        keep, moved = (pa, pb) if len(pa.dims) >= len(pb.dims) else (pb, pa)
        merges.append((keep.name, moved.name, max(len(moved.dims), 1)))
    # attempts per level: each attempt at level L needs k_j level-j pairs for every merge j < L
    final = len(levels) - 1
    attempts = [0] * len(levels)
    attempts[final] = 1
    for j in range(final - 1, -1, -1):
        attempts[j] = merges[j][2] * sum(attempts[j + 1 :])
    copies = sum(attempts)
    if max_copies is not None and copies > max_copies:
        raise CopyBudgetExceeded(f"needs {copies} source copies, budget is {max_copies}")
    ledger = ResourceLedger(copies_consumed=copies, target_copies=1)
    prob = 1.0
    for j, (level, n) in enumerate(zip(levels, attempts)):
        res = level["outcome"]
        prob *= res.success_probability**n
        ledger.cbits_sent += n * res.trace.cbits_sent
        for keep, moved, k in merges[:j]:
            ledger.charge_epr(keep, moved, k * n)
    ledger.success_probability = prob
    last = levels[final]["outcome"]
    stages = [
        {
            "level": j,
            "parties": lv["layout"],
            "pair": list(lv["outcome"].pair_names),
            "attempts": n,
            "success_probability": lv["outcome"].success_probability,
        }
        for j, (lv, n) in enumerate(zip(levels, attempts))
    ]
    return DistillationOutcome(
        (min(i1, i2), max(i1, i2)), last.pair_names, prob, last.success_state, last.trace, ledger, last.program, stages
    )


# --------------------------------------------------------------------------
# teleportation


BELL = {
    "00": np.array([1, 0, 0, 1], dtype=complex) / math.sqrt(2),
    "01": np.array([1, 0, 0, -1], dtype=complex) / math.sqrt(2),
    "10": np.array([0, 1, 1, 0], dtype=complex) / math.sqrt(2),
    "11": np.array([0, 1, -1, 0], dtype=complex) / math.sqrt(2),
}


def _teleport_corrections() -> dict[str, np.ndarray]:
    """Receiver correction for each Bell outcome, derived from the protocol identity.

    With input |j> on the moving qubit and |00>+|11> shared, projecting onto
    Bell state b leaves M_b|j>/2 at the receiver; the correction is M_b^dag.
    """
    phi = BELL["00"]
    out = {}
    for label, bell in BELL.items():
        m = np.zeros((2, 2), dtype=complex)
        for j in range(2):
            v = np.kron(np.eye(2)[j], phi).reshape(4, 2)
            m[:, j] = 2 * (bell.conj() @ v)
        out[label] = m.conj().T
    return out


TELEPORT_CORRECTIONS = _teleport_corrections()


def teleport_nodes(layout: RegisterLayout, sender, receiver, move: int, sender_half: int, receiver_half: int, prefix: str = "tp"):
    """Bell measurement on (move, sender_half) at the sender, Pauli fix on receiver_half."""
    s_i, r_i = layout.index(sender), layout.index(receiver)
    sdims, rdims = layout.parties[s_i].dims, layout.parties[r_i].dims
    bell = LocalInstrument(
        s_i, tuple((lab, embed(sdims, np.outer(v, v.conj()), [move, sender_half])) for lab, v in BELL.items())
    )
    nodes = {f"{prefix}/bell": Node(bell, {lab: f"{prefix}/fix{lab}" for lab in BELL})}
    for lab, corr in TELEPORT_CORRECTIONS.items():
        nodes[f"{prefix}/fix{lab}"] = Node(
            LocalInstrument.unitary(r_i, embed(rdims, corr, [receiver_half])), {"u": Halt(SUCCESS)}
        )
    return nodes, f"{prefix}/bell"


def relocate(s: PureState, sender, receiver, move: int) -> PureState:
    """The ideal teleportation output: qudit ``move`` of sender appended to receiver."""
    layout = s.layout
    si, ri = layout.index(sender), layout.index(receiver)
    offs = qudit_offsets(layout)
    g = offs[si] + move
    assignment = []
    for i, p in enumerate(layout.parties):
        qs = [offs[i] + k for k in range(len(p.dims))]
        if i == si:
            qs.remove(g)
        if i == ri:
            qs.append(g)
        assignment.append((p.name, qs))
    return regroup(s, assignment)


def teleport(s: PureState, epr_pair_at, move: int = 0, ledger: ResourceLedger | None = None) -> TeleportResult:
    """Teleport qubit ``move`` of the sender to the receiver through a registered EPR pair.

    ``epr_pair_at`` is (sender, receiver). The ledger must hold an EPR pair
    between them; one pair and 2 classical bits are charged to it.
    """
    sender, receiver = epr_pair_at
    si, ri = s.layout.index(sender), s.layout.index(receiver)
    if si == ri:
        raise InvalidSubset("sender and receiver must differ")
    sp, rp = s.layout.parties[si], s.layout.parties[ri]
    if not 0 <= move < len(sp.dims):
        raise InvalidSubset(f"party {sp.name} has no qudit {move}")
    if sp.dims[move] != 2:
        raise UnsupportedDimension("only qubits can be teleported")
    if ledger is None:
        raise NoEprAvailable(f"no EPR pair registered between {sp.name} and {rp.name}")
    ledger.consume_epr(sp.name, rp.name)
    ledger.cbits_sent += 2
    delta = ResourceLedger(cbits_sent=2)
    delta.charge_epr(sp.name, rp.name)

    # physically attach the EPR halves: sender gets one more qubit, receiver too
    offs = qudit_offsets(s.layout)
    nq = len(s.layout.qudit_dims)
    joint = PureState(
        RegisterLayout(s.layout.parties + (Party("_epr", (2, 2)),)),
        np.kron(s.amplitudes, BELL["00"]),
    )
    assignment = []
    for i, p in enumerate(s.layout.parties):
        qs = [offs[i] + k for k in range(len(p.dims))]
        if i == si:
            qs.append(nq)
        if i == ri:
            qs.append(nq + 1)
        assignment.append((p.name, qs))
    joint = regroup(joint, assignment)
    nodes, start = teleport_nodes(joint.layout, si, ri, move, len(sp.dims), len(rp.dims))
    trace = run_program(LoccProgram(nodes, start), joint)

    ideal = relocate(s, si, ri, move)
    branches = []
    for br in trace.branches:
        bell = BELL[br.path[0]]
        out = _discard_pair(br.state, si, move, len(sp.dims), bell)
        branches.append((br.probability, out))
    fids = [fidelity(st, ideal) for _, st in branches]
    return TeleportResult(branches[0][1], branches, min(fids), delta)


def _discard_pair(s: PureState, party: int, q1: int, q2: int, vec: np.ndarray) -> PureState:
    """Remove two qubits of ``party`` known to be in the pure state ``vec``."""
    layout = s.layout
    offs = qudit_offsets(layout)
    g1, g2 = offs[party] + q1, offs[party] + q2
    qd = layout.qudit_dims
    rest = [k for k in range(len(qd)) if k not in (g1, g2)]
    t = s.amplitudes.reshape(qd).transpose([g1, g2] + rest).reshape(4, -1)
    amps = vec.conj() @ t
    dims = list(layout.parties[party].dims)
    for k in sorted((q1, q2), reverse=True):
        del dims[k]
    parties = list(layout.parties)
    parties[party] = Party(parties[party].name, tuple(dims))
    return PureState.normalized(RegisterLayout(tuple(parties)), amps)


# --------------------------------------------------------------------------
# cat states


def is_cat_state(s: PureState, tol: float = 1e-9) -> bool:
    if any(p.dims != (2,) for p in s.layout.parties):
        return False
    return fidelity(s, ghz(s.m, s.layout.names)) >= 1 - tol


def cat_to_epr_program(layout: RegisterLayout, p1, p2, slot: dict | None = None, prefix: str = "cat") -> LoccProgram:
    """Every other party measures its cat share in the |+>,|-> basis; p1 fixes the phase.

    ``slot`` maps party index to the qudit holding its cat share (default 0).
    """
    i1, i2 = layout.index(p1), layout.index(p2)
    slot = slot or {}
    measurers = [i for i in range(layout.m) if i not in (i1, i2)]
    nodes: dict[str, Node] = {}
    if not measurers:
        return LoccProgram({})

    def inst_x(i):
        proj = {lab: np.outer(v, v.conj()) for lab, v in (("+", HADAMARD[:, 0]), ("-", HADAMARD[:, 1]))}
        dims = layout.parties[i].dims
        return LocalInstrument(i, tuple((lab, embed(dims, op, [slot.get(i, 0)])) for lab, op in proj.items()))

    fix = LocalInstrument.unitary(i1, embed(layout.parties[i1].dims, Z, [slot.get(i1, 0)]), "z")
    nodes[f"{prefix}/fix"] = Node(fix, {"z": Halt(SUCCESS)})
    for depth, i in enumerate(measurers):
        for parity_path in itertools.product("+-", repeat=depth):
            name = f"{prefix}/{''.join(parity_path)}"
            branches = {}
            for lab in "+-":
                path = parity_path + (lab,)
                if depth + 1 < len(measurers):
                    branches[lab] = f"{prefix}/{''.join(path)}"
                else:
                    odd = path.count("-") % 2 == 1
                    branches[lab] = f"{prefix}/fix" if odd else Halt(SUCCESS)
            nodes[name] = Node(inst_x(i), branches)
    return LoccProgram(nodes, f"{prefix}/")


def cat_to_epr(cat: PureState, p1, p2) -> DistillationOutcome:
    """Deterministic conversion of an m-party cat state into an EPR pair between p1 and p2."""
    if cat.m < 2 or not is_cat_state(cat):
        raise NotACatState("input is not the qubit cat state (|0...0> + |1...1>)/sqrt(2)")
    i1, i2 = cat.layout.index(p1), cat.layout.index(p2)
    if i1 == i2:
        raise InvalidSubset("target parties must differ")
    prog = cat_to_epr_program(cat.layout, i1, i2)
    trace = run_program(prog, cat)
    out = _single_copy_outcome(cat, prog, trace, tuple(sorted((i1, i2))))
    out.ledger.cats_consumed = 1
    out.ledger.copies_consumed = 0
    return out


@dataclass(eq=False)
class SynthesisResult:
    state: PureState
    fidelity: float
    delta: ResourceLedger
    teleports: list[TeleportResult]


def eprs_to_cat(hub: str, spokes: Sequence[str], epr_supply: ResourceLedger) -> SynthesisResult:
    """The hub prepares a cat state locally and teleports one share to each spoke."""
    m = 1 + len(spokes)
    names = [hub, *spokes]
    if len(set(names)) != m:
        raise InvalidSubset("hub and spokes must be distinct")
    for sp in spokes:
        if epr_supply.available(hub, sp) < 1:
            raise NoEprAvailable(f"no EPR pair registered between {hub} and {sp}")
    layout = RegisterLayout((Party(hub, (2,) * m),) + tuple(Party(sp, ()) for sp in spokes))
    state = ghz(m).relabel(layout)
    return _teleport_out(state, hub, [(sp, 1) for sp in spokes], ghz(m, names), epr_supply)


def _teleport_out(state, site, moves, ideal, supply) -> SynthesisResult:
    """Teleport the site's qubits after its own to the listed parties, in order."""
    delta = ResourceLedger()
    teleports = []
    keep = len(ideal.layout.parties[ideal.layout.index(site)].dims)
    for party, count in moves:
        for _ in range(count):
            res = teleport(state, (site, party), keep, supply)
            delta.absorb(res.delta)
            teleports.append(res)
            state = res.state
    fid = fidelity(state, ideal)
    return SynthesisResult(state, fid, delta, teleports)


def factor_blocks(s: PureState) -> list[list[int]]:
    """Finest partition of the parties into blocks the state factorizes over."""
    blocks = [list(range(s.m))]
    done = []
    while blocks:
        block = blocks.pop()
        split = None
        if len(block) > 1:
            for r in range(1, len(block) // 2 + 1):
                for x in itertools.combinations(block, r):
                    if is_factorizable(s, Cut(frozenset(x), s.m)):
                        split = list(x)
                        break
                if split:
                    break
        if split is None:
            done.append(block)
        else:
            blocks.append(split)
            blocks.append([i for i in block if i not in split])
    return sorted(done)


def synthesize_from_eprs(target: PureState, site, epr_supply: ResourceLedger) -> SynthesisResult:
    """The site prepares the target locally and teleports each remote share out.

    Parties whose share is a single-party factor prepare it themselves from a
    classical description, consuming no EPR pairs.
    """
    si = target.layout.index(site)
    site_name = target.layout.names[si]
    blocks = factor_blocks(target)
    remote = sorted(i for b in blocks if len(b) > 1 for i in b if i != si)
    for i in remote:
        p = target.layout.parties[i]
        if any(d != 2 for d in p.dims):
            raise UnsupportedDimension(f"party {p.name} holds non-qubit systems")
        if epr_supply.available(site_name, p.name) < len(p.dims):
            raise NoEprAvailable(f"need {len(p.dims)} EPR pair(s) between {site_name} and {p.name}")
    offs = qudit_offsets(target.layout)
    assignment = []
    for i, p in enumerate(target.layout.parties):
        own = [offs[i] + k for k in range(len(p.dims))]
        if i == si:
            own += [offs[j] + k for j in remote for k in range(len(target.layout.parties[j].dims))]
        elif i in remote:
            own = []
        assignment.append((p.name, own))
    start = regroup(target, assignment)
    moves = [(target.layout.names[i], len(target.layout.parties[i].dims)) for i in remote]
    return _teleport_out(start, site_name, moves, target, epr_supply)


# --------------------------------------------------------------------------
# LOCCq -> LOCC


@dataclass(eq=False)
class LoccqProtocol:
    """An LOCC program that also consumes ``cats`` cat states.

    The program acts on the joint register in which each party holds its
    share of every cat (one qubit each) followed by its share of every
    source copy.
    """

    program: LoccProgram
    cats: int


def joint_input(source: PureState, n: int, cats: Sequence[PureState]) -> PureState:
    """Per-party concatenation: cat shares first, then n source copies."""
    parts = list(cats) + [source] * n
    state = parts[0]
    for part in parts[1:]:
        state = tensor_local(state, part)
    return state


def cat_teleport_protocol(source: PureState, n: int, sender=0, receiver=1) -> LoccqProtocol:
    """A one-cat LOCCq protocol: turn the cat into an EPR pair, then teleport the
    sender's first source qubit to the receiver through it."""
    layout = joint_input(source, n, [ghz(source.m, source.layout.names)]).layout
    si, ri = layout.index(sender), layout.index(receiver)
    if layout.parties[si].dims[1] != 2:
        raise UnsupportedDimension("the sender's first source system must be a qubit")
    first = cat_to_epr_program(layout, si, ri)
    nodes, start = teleport_nodes(layout, si, ri, move=1, sender_half=0, receiver_half=0)
    return LoccqProtocol(sequence(first, LoccProgram(nodes, start)), 1)


@dataclass(eq=False)
class RewriteResult:
    program: LoccProgram
    stages: list[dict]
    extra_copies: int
    cat_success_probability: float
    min_fidelity: float
    max_probability_gap: float
    original_ledger: ResourceLedger
    rewritten_ledger: ResourceLedger

    def report(self) -> dict:
        return {
            "extra_copies": self.extra_copies,
            "cat_success_probability": self.cat_success_probability,
            "min_success_fidelity": self.min_fidelity,
            "max_probability_gap": self.max_probability_gap,
            "stages": self.stages,
            "original": self.original_ledger.to_dict(),
            "rewritten": self.rewritten_ledger.to_dict(),
        }


def synthesize_cat(source: PureState, seed: int = 0) -> tuple[PureState, int, float, list[dict], ResourceLedger]:
    """One cat state from fresh source copies by LOCC alone.

    Returns (cat, copies used, success probability, stage log, ledger).
    """
    names = source.layout.names
    ledger = ResourceLedger()
    if is_cat_state(source):
        ledger.copies_consumed = 1
        return source, 1, 1.0, [{"stage": "cat-copy", "copies": 1}], ledger
    hub, spokes = names[0], names[1:]
    copies, prob, stages = 0, 1.0, []
    for sp in spokes:
        out = epr_between_pair(source, hub, sp, seed=seed)
        copies += out.ledger.copies_consumed
        prob *= out.success_probability
        ledger.absorb(out.ledger)
        ledger.register_epr(hub, sp)
        stages.append({"stage": "pair-epr", "pair": [hub, sp], "copies": out.ledger.copies_consumed,
                       "success_probability": out.success_probability})
    syn = eprs_to_cat(hub, spokes, ledger)
    stages.append({"stage": "epr-to-cat", "hub": hub, "fidelity": syn.fidelity})
    return syn.state, copies, prob, stages, ledger


def loccq_to_locc_rewrite(protocol: LoccqProtocol, source: PureState, n: int, seed: int = 0) -> RewriteResult:
    """Replace each cat the protocol consumes with one distilled from extra source copies.

    The extra copy count depends only on the source and the cat budget, never on n.
    """
    if not is_irreducible(source):
        raise NotIrreducible("the rewrite needs an irreducible source")
    k = protocol.cats
    ideal_cats = [ghz(source.m, source.layout.names)] * k
    original_ledger = ResourceLedger(copies_consumed=n, cats_consumed=k)
    if k == 0:
        return RewriteResult(protocol.program, [], 0, 1.0, 1.0, 0.0, original_ledger, ResourceLedger(copies_consumed=n))

    cat, per_cat, p_cat, stages, cat_ledger = synthesize_cat(source, seed)
    rewritten_ledger = ResourceLedger(copies_consumed=n)
    for _ in range(k):
        rewritten_ledger.absorb(cat_ledger)
    delta = per_cat * k
    p_all = p_cat**k

    orig = run_program(protocol.program, joint_input(source, n, ideal_cats))
    new = run_program(protocol.program, joint_input(source, n, [cat] * k))
    new_by_path = {b.path: b for b in new.branches}
    fids, gaps = [], []
    for a in orig.branches:
        b = new_by_path.get(a.path)
        gaps.append(abs(a.probability - (b.probability if b else 0.0)))
        if a.verdict == SUCCESS:
            fids.append(fidelity(a.state, b.state) if b else 0.0)
    stages = stages + [{"stage": "run", "cats_substituted": k, "copies": n}]
    original_ledger.cbits_sent = orig.cbits_sent
    rewritten_ledger.cbits_sent += new.cbits_sent
    rewritten_ledger.success_probability = p_all
    return RewriteResult(
        protocol.program, stages, delta, p_all, min(fids, default=1.0), max(gaps, default=0.0),
        original_ledger, rewritten_ledger,
    )
