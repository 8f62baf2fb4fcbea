import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import layout_of
from locclab.errors import (
    BranchExplosion,
    IncompleteInstrument,
    LayoutMismatch,
    MalformedInput,
    NoEprAvailable,
)
from locclab.locc import (
    FAILURE,
    SUCCESS,
    Halt,
    LocalInstrument,
    LoccProgram,
    Node,
    ResourceLedger,
    check_program_layout,
    load_program,
    merge_parties,
    program_from_dict,
    program_to_dict,
    random_instrument,
    random_program,
    run_program,
    sample_program,
    save_program,
    sequence,
    trial_uniforms,
    validate_instrument,
)
from locclab.qstate import PureState, basis_state, epr, fidelity, ghz, random_state

H = np.array([[1, 1], [1, -1]]) / np.sqrt(2)


def coin_program():
    """Measure A of |+>|0> in the computational basis: success on '0'."""
    inst = LocalInstrument.projective(0, np.eye(2))
    return LoccProgram({"m": Node(inst, {"0": Halt(SUCCESS), "1": Halt(FAILURE)})}, "m")


def plus_zero():
    return PureState(layout_of([2, 2]), np.array([1, 0, 1, 0]) / np.sqrt(2))


def test_cbits_per_instrument(rng):
    assert random_instrument(0, 2, 1, rng).cbits == 0
    assert random_instrument(0, 2, 2, rng).cbits == 1
    assert random_instrument(0, 2, 3, rng).cbits == 2
    assert random_instrument(0, 2, 4, rng).cbits == 2


@settings(max_examples=30, deadline=None)
@given(d=st.integers(2, 4), k=st.integers(1, 5), seed=st.integers(0, 2**32 - 1))
def test_random_instrument_complete(d, k, seed):
    validate_instrument(random_instrument(0, d, k, np.random.default_rng(seed)))


def test_incomplete_instrument_rejected():
    inst = LocalInstrument(0, (("a", np.eye(2) * 0.9),))
    with pytest.raises(IncompleteInstrument):
        validate_instrument(inst)
    with pytest.raises(IncompleteInstrument):
        LoccProgram({"n": Node(inst, {"a": Halt(SUCCESS)})})


def test_program_structure_checks():
    inst = LocalInstrument.projective(0, np.eye(2))
    with pytest.raises(MalformedInput, match="unmapped"):
        LoccProgram({"n": Node(inst, {"0": Halt(SUCCESS)})})
    with pytest.raises(MalformedInput, match="undefined"):
        LoccProgram({"n": Node(inst, {"0": "x", "1": Halt(SUCCESS)})})
    with pytest.raises(MalformedInput, match="cycle"):
        LoccProgram({"a": Node(inst, {"0": "b", "1": Halt(SUCCESS)}), "b": Node(inst, {"0": "a", "1": Halt(FAILURE)})})
    with pytest.raises(MalformedInput):
        Halt("maybe")


def test_run_coin_program():
    trace = run_program(coin_program(), plus_zero())
    assert trace.total_success_probability == pytest.approx(0.5)
    assert [b.path for b in trace.branches] == [("0",), ("1",)]
    assert trace.cbits_sent == 1


def test_empty_program_halts_immediately():
    s = epr()
    trace = run_program(LoccProgram({}), s)
    assert trace.total_success_probability == 1.0 and trace.branches[0].state is s
    assert run_program(LoccProgram({}, empty_verdict=FAILURE), s).total_success_probability == 0.0


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_probability_conserved(seed):
    rng = np.random.default_rng(seed)
    s = random_state(layout_of([2, 3, 2]), rng)
    prog = random_program(s.layout, rng, depth=4)
    trace = run_program(prog, s)
    assert trace.total_probability == pytest.approx(1.0, abs=1e-9)
    for b in trace.branches:
        assert np.vdot(b.state.amplitudes, b.state.amplitudes).real == pytest.approx(1.0)
    assert trace.cbits_sent <= 2 * prog.depth()


def test_dropped_mass_accounted():
    prog = coin_program()
    trace = run_program(prog, basis_state(layout_of([2, 2]), [0, 0]))
    assert len(trace.branches) == 1
    assert trace.total_probability == pytest.approx(1.0)


def test_branch_guard():
    rng = np.random.default_rng(3)
    s = random_state(layout_of([2, 2]), rng)
    insts = [random_instrument(i % 2, 2, 2, rng) for i in range(6)]
    with pytest.raises(BranchExplosion):
        run_program(LoccProgram.chain(insts), s, guard=8)
    assert len(run_program(LoccProgram.chain(insts), s).branches) == 64


def test_sequence_routes_only_successes():
    seq = sequence(coin_program(), LoccProgram.chain([LocalInstrument.unitary(1, H)]))
    trace = run_program(seq, plus_zero())
    assert [b.path for b in trace.branches] == [("0", "u"), ("1",)]
    assert trace.success_branches[0].state.amplitudes[1] == pytest.approx(1 / np.sqrt(2))


def test_trial_uniforms_batch_invariant():
    full = trial_uniforms(42, 0, 10000, 3)
    assert np.array_equal(full[5000:9000], trial_uniforms(42, 5000, 9000, 3))
    assert np.array_equal(full[4095:4097], trial_uniforms(42, 4095, 4097, 3))
    assert not np.array_equal(full, trial_uniforms(43, 0, 10000, 3))


def test_sampling_deterministic_and_consistent():
    rng = np.random.default_rng(11)
    s = random_state(layout_of([2, 2, 2]), rng)
    prog = random_program(s.layout, rng, depth=4)
    a = sample_program(prog, s, seed=5, trials=20000)
    b = sample_program(prog, s, seed=5, trials=20000)
    assert a.histogram == b.histogram and a.success_count == b.success_count
    trace = run_program(prog, s)
    exact = {br.path: br.probability for br in trace.branches}
    freq = a.frequencies()
    for path, p in exact.items():
        # 5 sigma binomial band
        assert abs(freq.get(path, 0.0) - p) <= 5 * np.sqrt(p * (1 - p) / 20000) + 1e-12
    assert sum(a.histogram.values()) == 20000


def test_sampling_seed_wraps_to_64_bits():
    prog = coin_program()
    a = sample_program(prog, plus_zero(), seed=-1, trials=500)
    b = sample_program(prog, plus_zero(), seed=2**64 - 1, trials=500)
    assert a.histogram == b.histogram


def test_ledger_supply():
    led = ResourceLedger()
    with pytest.raises(NoEprAvailable):
        led.consume_epr("A", "B")
    led.register_epr("B", "A", 2)
    led.consume_epr("A", "B")
    assert led.available("A", "B") == 1
    assert led.to_dict()["epr_consumed"] == [{"pair": ["A", "B"], "count": 1}]


def test_ledger_yield():
    led = ResourceLedger(copies_consumed=2, target_copies=1, success_probability=0.5)
    assert led.yield_per_copy == 0.25
    assert ResourceLedger().yield_per_copy == 0.0


def test_merge_parties(rng):
    s = random_state(layout_of([2, 3, 2]), rng)
    led = ResourceLedger()
    merged = merge_parties(s, "A", "C", led)
    assert merged.layout.names == ["A+C", "B"]
    assert merged.layout.parties[0].dims == (2, 2)
    assert led.epr_consumed == {("A", "C"): 1}
    # same reduced state on B
    from locclab.qstate import partial_trace

    assert fidelity(partial_trace(merged, ["B"]), partial_trace(s, ["B"])) == pytest.approx(1.0)


def test_script_roundtrip(tmp_path, rng):
    s = random_state(layout_of([2, 3]), rng)
    prog = random_program(s.layout, rng, depth=3)
    path = tmp_path / "p.json"
    save_program(prog, path, s.layout, cats=0)
    loaded, raw = load_program(path)
    assert raw["cats"] == 0
    check_program_layout(loaded, s.layout)
    a, b = run_program(prog, s), run_program(loaded, s)
    assert [x.path for x in a.branches] == [x.path for x in b.branches]
    assert [x.probability for x in a.branches] == [x.probability for x in b.branches]
    assert json.loads(path.read_text())["nodes"]["n"]["party"] in ("A", "B")


def test_script_layout_mismatch(rng):
    prog = LoccProgram.chain([random_instrument("B", 2, 2, rng)])
    with pytest.raises(LayoutMismatch):
        check_program_layout(prog, layout_of([2, 3]))


def test_script_malformed():
    with pytest.raises(MalformedInput):
        program_from_dict({"nodes": {"n": {"party": "A"}}})
    doc = program_to_dict(coin_program())
    doc["nodes"]["m"]["elements"][0]["matrix"] = [[1, 0], [0, 0]]
    with pytest.raises(MalformedInput):
        program_from_dict(doc)


def test_chain_on_ghz_returns_to_start():
    prog = LoccProgram.chain([LocalInstrument.unitary(0, H), LocalInstrument.unitary(0, H)])
    trace = run_program(prog, ghz(3))
    assert fidelity(trace.branches[0].state, ghz(3)) == pytest.approx(1.0)
    assert trace.cbits_sent == 0
