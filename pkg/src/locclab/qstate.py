"""Dense pure-state and density-matrix engine over a multiparty qudit register.

Flat amplitude index convention: subsystem digits in layout order, party 0
most significant, and within a party its qudits most-significant-first. This
is exactly numpy's C order after reshaping to the flattened qudit dims.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .errors import (
    DimensionLimit,
    IncompleteInstrument,
    InvalidSubset,
    LayoutMismatch,
    MalformedInput,
    NormalizationError,
)

TOL_NORM = 1e-9
# Branches at or below this probability are treated as impossible.
TOL_BRANCH = 1e-12
# Readers renormalize inside this band and reject outside it.
TOL_FILE_NORM = 1e-6
DEFAULT_DIM_GUARD = 2**20


def dim_guard() -> int:
    value = os.environ.get("LOCCLAB_DIM_GUARD")
    return int(value) if value else DEFAULT_DIM_GUARD


@dataclass(frozen=True)
class Party:
    name: str
    dims: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        if any(d < 2 for d in self.dims):
            raise MalformedInput(f"party {self.name!r}: every local dimension must be >= 2")

    @property
    def dim(self) -> int:
        return math.prod(self.dims)


@dataclass(frozen=True)
class RegisterLayout:
    """Ordered parties, each owning an ordered list of qudits.

    A party may own zero qudits (dimension 1); this happens transiently when
    all of its qubits have been teleported away.
    """

    parties: tuple[Party, ...]

    def __post_init__(self):
        parties = tuple(p if isinstance(p, Party) else Party(*p) for p in self.parties)
        object.__setattr__(self, "parties", parties)
        if not parties:
            raise MalformedInput("a layout needs at least one party")
        names = [p.name for p in parties]
        if len(set(names)) != len(names):
            raise MalformedInput(f"duplicate party names in {names}")
        if self.dim > dim_guard():
            raise DimensionLimit(f"total dimension {self.dim} exceeds guard {dim_guard()}")

    @classmethod
    def qubits(cls, m: int, names: Sequence[str] | None = None) -> "RegisterLayout":
        names = names or party_names(m)
        return cls(tuple(Party(n, (2,)) for n in names))

    @classmethod
    def uniform(cls, m: int, d: int) -> "RegisterLayout":
        return cls(tuple(Party(n, (d,)) for n in party_names(m)))

    @property
    def m(self) -> int:
        return len(self.parties)

    @property
    def names(self) -> list[str]:
        return [p.name for p in self.parties]

    @property
    def party_dims(self) -> tuple[int, ...]:
        return tuple(p.dim for p in self.parties)

    @property
    def qudit_dims(self) -> tuple[int, ...]:
        return tuple(d for p in self.parties for d in p.dims)

    @property
    def dim(self) -> int:
        return math.prod(self.party_dims)

    def index(self, ref: int | str) -> int:
        """Resolve a party index or party name to an index."""
        if isinstance(ref, (int, np.integer)):
            if not 0 <= ref < self.m:
                raise InvalidSubset(f"party index {ref} out of range for {self.m} parties")
            return int(ref)
        try:
            return self.names.index(ref)
        except ValueError:
            raise InvalidSubset(f"unknown party {ref!r}; layout has {self.names}") from None

    def sub(self, keep: Sequence[int]) -> "RegisterLayout":
        return RegisterLayout(tuple(self.parties[i] for i in sorted(keep)))

    def to_dict(self) -> list[dict]:
        return [{"name": p.name, "dims": list(p.dims)} for p in self.parties]


def party_names(m: int) -> list[str]:
    if m <= 26:
        return [chr(ord("A") + i) for i in range(m)]
    return [f"P{i}" for i in range(m)]


@dataclass(frozen=True, eq=False)
class PureState:
    layout: RegisterLayout
    amplitudes: np.ndarray

    def __post_init__(self):
        amps = np.array(self.amplitudes, dtype=np.complex128).reshape(-1)
        if amps.size != self.layout.dim:
            raise LayoutMismatch(
                f"{amps.size} amplitudes for a layout of dimension {self.layout.dim}"
            )
        norm = float(np.vdot(amps, amps).real)
        if abs(norm - 1.0) > TOL_NORM:
            raise NormalizationError(f"state norm^2 {norm!r} differs from 1 by more than {TOL_NORM}")
        amps.setflags(write=False)
        object.__setattr__(self, "amplitudes", amps)

    @classmethod
    def normalized(cls, layout: RegisterLayout, amplitudes) -> "PureState":
        amps = np.asarray(amplitudes, dtype=np.complex128).reshape(-1)
        norm = np.linalg.norm(amps)
        if norm == 0:
            raise NormalizationError("zero vector cannot be normalized")
        return cls(layout, amps / norm)

    @property
    def m(self) -> int:
        return self.layout.m

    def tensor_view(self) -> np.ndarray:
        """Amplitudes reshaped with one axis per party."""
        return self.amplitudes.reshape(self.layout.party_dims)

    def density(self) -> "DensityMatrix":
        return DensityMatrix(self.layout, np.outer(self.amplitudes, self.amplitudes.conj()))

    def relabel(self, layout: RegisterLayout) -> "PureState":
        if layout.dim != self.layout.dim:
            raise LayoutMismatch("relabeling must keep the total dimension")
        return PureState(layout, self.amplitudes)

    def __repr__(self):
        return f"PureState({self.layout.names}, dims={self.layout.party_dims})"


@dataclass(frozen=True, eq=False)
class DensityMatrix:
    layout: RegisterLayout
    matrix: np.ndarray

    def __post_init__(self):
        mat = np.array(self.matrix, dtype=np.complex128)
        d = self.layout.dim
        if mat.shape != (d, d):
            raise LayoutMismatch(f"matrix shape {mat.shape} does not match dimension {d}")
        if np.max(np.abs(mat - mat.conj().T), initial=0.0) > TOL_NORM:
            raise MalformedInput("density matrix is not Hermitian")
        if abs(np.trace(mat).real - 1.0) > TOL_NORM:
            raise NormalizationError("density matrix trace differs from 1")
        if np.linalg.eigvalsh(mat).min() < -TOL_NORM:
            raise MalformedInput("density matrix has a negative eigenvalue")
        mat.setflags(write=False)
        object.__setattr__(self, "matrix", mat)

    def purity(self) -> float:
        return float(np.real(np.vdot(self.matrix, self.matrix)))


class Outcome(NamedTuple):
    """One branch of a local instrument: ``state`` is None for dropped branches."""

    probability: float
    state: PureState | None
    label: str


# --------------------------------------------------------------------------
# construction


def basis_state(layout: RegisterLayout, digits: Sequence[int]) -> PureState:
    """Computational basis state; ``digits`` gives one value per qudit."""
    amps = np.zeros(layout.dim, dtype=np.complex128)
    amps[np.ravel_multi_index(tuple(digits), layout.qudit_dims)] = 1.0
    return PureState(layout, amps)


def from_vector(vec, names: Sequence[str] | None = None, dims: Sequence[int] | None = None) -> PureState:
    """Wrap a raw vector as a state with one qudit per party (qubits by default)."""
    vec = np.asarray(vec, dtype=np.complex128).reshape(-1)
    if dims is None:
        m = int(round(math.log2(vec.size)))
        dims = [2] * m
    names = names or party_names(len(dims))
    layout = RegisterLayout(tuple(Party(n, (d,)) for n, d in zip(names, dims)))
    return PureState.normalized(layout, vec)


def ghz(m: int, names: Sequence[str] | None = None) -> PureState:
    """The m-party cat state (|0...0> + |1...1>)/sqrt(2)."""
    layout = RegisterLayout.qubits(m, names)
    amps = np.zeros(2**m, dtype=np.complex128)
    amps[0] = amps[-1] = 1 / math.sqrt(2)
    return PureState(layout, amps)


def epr(names: Sequence[str] = ("A", "B")) -> PureState:
    return ghz(2, names)


def w_state(m: int, names: Sequence[str] | None = None) -> PureState:
    layout = RegisterLayout.qubits(m, names)
    amps = np.zeros(2**m, dtype=np.complex128)
    for k in range(m):
        amps[1 << k] = 1 / math.sqrt(m)
    return PureState(layout, amps)


def random_state(layout: RegisterLayout, rng: np.random.Generator) -> PureState:
    """Haar-random pure state on the layout."""
    vec = rng.normal(size=layout.dim) + 1j * rng.normal(size=layout.dim)
    return PureState.normalized(layout, vec)


def product_state(states: Sequence[PureState]) -> PureState:
    out = states[0]
    for s in states[1:]:
        out = tensor(out, s)
    return out


# --------------------------------------------------------------------------
# composition and reduction


def tensor(a: PureState, b: PureState) -> PureState:
    layout = RegisterLayout(a.layout.parties + b.layout.parties)
    return PureState(layout, np.kron(a.amplitudes, b.amplitudes))


def tensor_local(a: PureState, b: PureState) -> PureState:
    """Tensor two states over the same party names, each party keeping both shares.

    Party P of the result owns P's qudits from ``a`` followed by P's qudits
    from ``b``. Pure re-indexing; no communication involved.
    """
    if a.layout.names != b.layout.names:
        raise LayoutMismatch(f"party names differ: {a.layout.names} vs {b.layout.names}")
    m = a.m
    joint = np.kron(a.amplitudes, b.amplitudes).reshape(a.layout.party_dims + b.layout.party_dims)
    order = [ax for i in range(m) for ax in (i, m + i)]
    joint = joint.transpose(order)
    layout = RegisterLayout(
        tuple(Party(pa.name, pa.dims + pb.dims) for pa, pb in zip(a.layout.parties, b.layout.parties))
    )
    return PureState(layout, joint.reshape(-1))


def _keep_indices(layout: RegisterLayout, keep) -> list[int]:
    idx = sorted({layout.index(k) for k in keep})
    if not idx or len(idx) == layout.m:
        raise InvalidSubset("keep must be a non-empty proper subset of the parties")
    return idx


def partial_trace(s: PureState | DensityMatrix, keep) -> DensityMatrix:
    """Reduced density matrix on the parties in ``keep`` (indices or names)."""
    layout = s.layout
    keep_idx = _keep_indices(layout, keep)
    rest = [i for i in range(layout.m) if i not in keep_idx]
    dims = layout.party_dims
    dk = math.prod(dims[i] for i in keep_idx)
    if isinstance(s, PureState):
        psi = s.tensor_view().transpose(keep_idx + rest).reshape(dk, -1)
        rho = psi @ psi.conj().T
    else:
        m = layout.m
        t = s.matrix.reshape(dims + dims)
        letters = [chr(ord("a") + i) for i in range(2 * m)]
        row = letters[:m]
        col = [letters[m + i] if i in keep_idx else letters[i] for i in range(m)]
        out = [row[i] for i in keep_idx] + [col[i] for i in keep_idx]
        rho = np.einsum("".join(row + col) + "->" + "".join(out), t).reshape(dk, dk)
    rho = (rho + rho.conj().T) / 2
    return DensityMatrix(layout.sub(keep_idx), rho)


def purity(rho: DensityMatrix) -> float:
    return rho.purity()


def _psd_sqrt(mat: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(mat)
    # eigenvalues at round-off level would contribute ~sqrt(eps) each
    w[w < 1e-14 * max(w.max(), 1e-300)] = 0.0
    return (v * np.sqrt(w)) @ v.conj().T


def fidelity(r: PureState | DensityMatrix, s: PureState | DensityMatrix) -> float:
    """Uhlmann fidelity (squared convention): |<psi|phi>|^2 for pure inputs."""
    if r.layout.dim != s.layout.dim:
        raise LayoutMismatch(f"dimension {r.layout.dim} vs {s.layout.dim}")
    if isinstance(r, PureState) and isinstance(s, PureState):
        f = abs(np.vdot(r.amplitudes, s.amplitudes)) ** 2
    elif isinstance(r, PureState):
        f = np.vdot(r.amplitudes, s.matrix @ r.amplitudes).real
    elif isinstance(s, PureState):
        f = np.vdot(s.amplitudes, r.matrix @ s.amplitudes).real
    else:
        # trace norm of sqrt(r) sqrt(s)
        sv = np.linalg.svd(_psd_sqrt(r.matrix) @ _psd_sqrt(s.matrix), compute_uv=False)
        f = np.sum(sv) ** 2
    return float(min(1.0, max(0.0, f)))


# --------------------------------------------------------------------------
# local operators


def embed(dims: Sequence[int], op: np.ndarray, targets: Sequence[int]) -> np.ndarray:
    """Lift ``op`` acting on the qudits ``targets`` of a party to the party's whole space."""
    dims = list(dims)
    n = len(dims)
    targets = list(targets)
    rest = [i for i in range(n) if i not in targets]
    dt = math.prod(dims[i] for i in targets)
    dr = math.prod(dims[i] for i in rest)
    op = np.asarray(op, dtype=np.complex128)
    if op.shape != (dt, dt):
        raise LayoutMismatch(f"operator shape {op.shape} does not act on dims {[dims[i] for i in targets]}")
    full = np.kron(op, np.eye(dr)).reshape([dims[i] for i in targets + rest] * 2)
    perm = targets + rest
    inv = [perm.index(i) for i in range(n)]
    full = full.transpose(inv + [n + i for i in inv])
    d = math.prod(dims)
    return full.reshape(d, d)


def apply_operator(s: PureState, op: np.ndarray, at: int | str) -> np.ndarray:
    """Unnormalized amplitudes of (I x op x I)|s> with ``op`` on party ``at``."""
    i = s.layout.index(at)
    dims = s.layout.party_dims
    op = np.asarray(op, dtype=np.complex128)
    if op.shape != (dims[i], dims[i]):
        raise LayoutMismatch(
            f"operator of shape {op.shape} on party {s.layout.names[i]} of dimension {dims[i]}"
        )
    t = np.tensordot(op, s.tensor_view(), axes=([1], [i]))
    return np.moveaxis(t, 0, i).reshape(-1)


def completeness_deviation(operators: Sequence[np.ndarray]) -> float:
    d = operators[0].shape[0]
    total = sum(k.conj().T @ k for k in operators)
    return float(np.max(np.abs(total - np.eye(d))))


def apply_local(s: PureState, inst, at: int | str | None = None) -> list[Outcome]:
    """Apply a local instrument and return every outcome with its Born probability.

    Outcomes at or below 1e-12 are kept in the list with ``state=None`` so
    callers can account the dropped mass.
    """
    at = inst.at if at is None else at
    ops = [np.asarray(k, dtype=np.complex128) for _, k in inst.elements]
    dev = completeness_deviation(ops)
    if dev > TOL_NORM:
        raise IncompleteInstrument(f"sum K^dag K deviates from identity by {dev:.3g}", dev)
    out = []
    for (label, _), k in zip(inst.elements, ops):
        vec = apply_operator(s, k, at)
        p = float(np.vdot(vec, vec).real)
        if p > TOL_BRANCH:
            out.append(Outcome(p, PureState(s.layout, vec / math.sqrt(p)), label))
        else:
            out.append(Outcome(p, None, label))
    return out


def permute_parties(s: PureState, order: Sequence[int]) -> PureState:
    """Reorder parties: result party j is input party ``order[j]``."""
    order = list(order)
    layout = RegisterLayout(tuple(s.layout.parties[i] for i in order))
    return PureState(layout, s.tensor_view().transpose(order).reshape(-1))


def qudit_offsets(layout: RegisterLayout) -> list[int]:
    """Global index of each party's first qudit."""
    out, k = [], 0
    for p in layout.parties:
        out.append(k)
        k += len(p.dims)
    return out


def regroup(s: PureState, assignment: Sequence[tuple[str, Sequence[int]]]) -> PureState:
    """Reassign qudits to parties.

    ``assignment`` lists ``(party name, global qudit indices)``; every qudit of
    ``s`` must be used exactly once. Pure re-indexing of the amplitudes.
    """
    qd = s.layout.qudit_dims
    order = [int(q) for _, qs in assignment for q in qs]
    if sorted(order) != list(range(len(qd))):
        raise InvalidSubset(f"assignment {order} is not a permutation of {len(qd)} qudits")
    t = s.amplitudes.reshape(qd).transpose(order)
    layout = RegisterLayout(tuple(Party(name, tuple(qd[q] for q in qs)) for name, qs in assignment))
    return PureState(layout, t.reshape(-1))


# --------------------------------------------------------------------------
# file format


def _parse_complex(pair) -> complex:
    if isinstance(pair, (list, tuple)) and len(pair) == 2:
        return complex(float(pair[0]), float(pair[1]))
    raise MalformedInput(f"complex numbers are [re, im] pairs, got {pair!r}")


def state_to_dict(s: PureState) -> dict:
    return {
        "parties": s.layout.to_dict(),
        "amplitudes": [[float(a.real), float(a.imag)] for a in s.amplitudes],
    }


def state_from_dict(data: dict) -> PureState:
    try:
        layout = RegisterLayout(tuple(Party(p["name"], tuple(p["dims"])) for p in data["parties"]))
        amps = np.array([_parse_complex(a) for a in data["amplitudes"]], dtype=np.complex128)
    except (KeyError, TypeError, ValueError) as exc:
        raise MalformedInput(f"bad state document: {exc}") from exc
    if amps.size != layout.dim:
        raise MalformedInput(f"{amps.size} amplitudes for a layout of dimension {layout.dim}")
    norm = float(np.vdot(amps, amps).real)
    if abs(norm - 1.0) > TOL_FILE_NORM:
        raise NormalizationError(f"state norm^2 {norm!r} is outside 1 +/- {TOL_FILE_NORM}")
    # leave already-normalized files bit-exact
    if abs(norm - 1.0) > 1e-14:
        amps = amps / math.sqrt(norm)
    return PureState(layout, amps)


def save_state(s: PureState, path) -> None:
    with open(path, "w") as fh:
        json.dump(state_to_dict(s), fh)
        fh.write("\n")


def load_state(path) -> PureState:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except (OSError, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedInput(f"{path}: {exc}") from exc
    return state_from_dict(data)
