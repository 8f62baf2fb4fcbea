"""Simulator for multipartite pure-state entanglement manipulation under LOCC."""
from .decomp import Cut, enumerate_cuts, entropy_across_cut, is_factorizable, is_irreducible, schmidt
from .errors import InputError, LocclabError, PreconditionError, ResourceGuard
from .locc import LocalInstrument, LoccProgram, ResourceLedger, run_program, sample_program
from .qstate import PureState, RegisterLayout, epr, ghz, load_state, save_state, w_state

__version__ = "0.1.0"

__all__ = [
    "Cut", "enumerate_cuts", "entropy_across_cut", "is_factorizable", "is_irreducible", "schmidt",
    "InputError", "LocclabError", "PreconditionError", "ResourceGuard",
    "LocalInstrument", "LoccProgram", "ResourceLedger", "run_program", "sample_program",
    "PureState", "RegisterLayout", "epr", "ghz", "load_state", "save_state", "w_state",
]
