"""Schmidt analysis across cuts of a multiparty pure state."""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidSubset
from .qstate import PureState, RegisterLayout, partial_trace

# Largest Schmidt coefficient at or above 1 - TOL_FACTOR means rank one.
TOL_FACTOR = 1e-9
# Numerical rank cutoff for Schmidt coefficients.
TOL_COEFF = 1e-10
TOL_PURE = 1e-9
# Distance (Frobenius) allowed between rho_BC and rho_B x rho_C in the product test.
TOL_PRODUCT = 1e-6


@dataclass(frozen=True)
class Cut:
    """A bipartition {x, complement}; ``x`` never contains the last party."""

    x: frozenset[int]
    m: int

    def __post_init__(self):
        x = frozenset(int(i) for i in self.x)
        if not x or len(x) >= self.m or not all(0 <= i < self.m for i in x):
            raise InvalidSubset(f"cut side {sorted(x)} is not a proper non-empty subset of {self.m} parties")
        if self.m - 1 in x:
            x = frozenset(range(self.m)) - x
        object.__setattr__(self, "x", x)

    @classmethod
    def of(cls, layout: RegisterLayout, side) -> "Cut":
        return cls(frozenset(layout.index(p) for p in side), layout.m)

    @property
    def complement(self) -> frozenset[int]:
        return frozenset(range(self.m)) - self.x

    @property
    def mask(self) -> int:
        return sum(1 << i for i in self.x)

    def names(self, layout: RegisterLayout) -> list[list[str]]:
        return [sorted(layout.names[i] for i in self.x), sorted(layout.names[i] for i in self.complement)]

    def label(self, layout: RegisterLayout) -> str:
        left, right = self.names(layout)
        return ",".join(left) + "|" + ",".join(right)


@dataclass(frozen=True, eq=False)
class SchmidtDecomposition:
    cut: Cut
    coefficients: np.ndarray
    left_basis: np.ndarray  # rows: orthonormal vectors on the x side
    right_basis: np.ndarray  # rows: orthonormal vectors on the complement
    layout: RegisterLayout

    @property
    def rank(self) -> int:
        return len(self.coefficients)

    def reconstruct(self) -> PureState:
        mat = (self.left_basis.T * self.coefficients) @ self.right_basis
        xs, rest = sorted(self.cut.x), sorted(self.cut.complement)
        dims = self.layout.party_dims
        t = mat.reshape([dims[i] for i in xs + rest])
        perm = xs + rest
        t = t.transpose([perm.index(i) for i in range(self.layout.m)])
        return PureState.normalized(self.layout, t.reshape(-1))


def _check_cut(s: PureState, cut: Cut):
    if cut.m != s.m:
        raise InvalidSubset(f"cut over {cut.m} parties used with a {s.m}-party state")


def cut_matrix(s: PureState, cut: Cut) -> np.ndarray:
    """Amplitudes reshaped to (dim of x side, dim of complement)."""
    _check_cut(s, cut)
    xs, rest = sorted(cut.x), sorted(cut.complement)
    dims = s.layout.party_dims
    dx = math.prod(dims[i] for i in xs)
    return s.tensor_view().transpose(xs + rest).reshape(dx, -1)


def _leading_index(v: np.ndarray) -> int:
    return int(np.flatnonzero(np.abs(v) > 1e-8)[0])


def schmidt(s: PureState, cut: Cut) -> SchmidtDecomposition:
    u, sv, vh = np.linalg.svd(cut_matrix(s, cut), full_matrices=False)
    keep = sv > TOL_COEFF
    sv, left, right = sv[keep], u[:, keep].T, vh[keep]
    # deterministic gauge: leading component of each left vector real positive
    for i in range(len(sv)):
        k = _leading_index(left[i])
        phase = left[i, k] / abs(left[i, k])
        left[i] = left[i] / phase
        right[i] = right[i] * phase
    # descending; ties broken by ascending leading index of the left vector
    order = sorted(range(len(sv)), key=lambda i: (-round(sv[i], 12), _leading_index(left[i])))
    return SchmidtDecomposition(cut, sv[order], left[order], right[order], s.layout)


def schmidt_coefficients(s: PureState, cut: Cut) -> np.ndarray:
    sv = np.linalg.svd(cut_matrix(s, cut), compute_uv=False)
    return sv[sv > TOL_COEFF]


def _entropy_bits(weights: np.ndarray) -> float:
    w = weights[weights > 0]
    return float(max(0.0, -np.sum(w * np.log2(w))))


def entropy_across_cut(s: PureState, cut: Cut) -> float:
    """Entanglement entropy (bits) across the cut."""
    return _entropy_bits(schmidt_coefficients(s, cut) ** 2)


def is_factorizable(s: PureState, cut: Cut) -> bool:
    coeffs = schmidt_coefficients(s, cut)
    return bool(coeffs[0] >= 1 - TOL_FACTOR)


def enumerate_cuts(layout: RegisterLayout) -> list[Cut]:
    m = layout.m
    if m < 2:
        raise InvalidSubset("cuts need at least two parties")
    return [
        Cut(frozenset(i for i in range(m - 1) if mask >> i & 1), m)
        for mask in range(1, 2 ** (m - 1))
    ]


def is_irreducible(s: PureState) -> bool:
    """True iff the state is factorizable across no cut."""
    if s.m < 2:
        raise InvalidSubset("irreducibility needs at least two parties")
    return not any(is_factorizable(s, c) for c in enumerate_cuts(s.layout))


def singleton_cut(layout: RegisterLayout, party) -> Cut:
    return Cut(frozenset({layout.index(party)}), layout.m)


class EoaCase(enum.Enum):
    ZERO_CASE_B_PURE = "ZeroCaseBPure"
    ZERO_CASE_C_PURE = "ZeroCaseCPure"
    NONZERO = "Nonzero"


def eoa_zero_check(s: PureState, helper, b) -> EoaCase:
    """Zero/nonzero dichotomy for the entanglement of assistance of rho_BC.

    C is every party other than ``helper`` and ``b``. Zero assistance happens
    exactly when rho_BC is a product with one factor pure.
    """
    if s.m < 3:
        raise InvalidSubset("entanglement of assistance needs at least three parties")
    h, bi = s.layout.index(helper), s.layout.index(b)
    if h == bi:
        raise InvalidSubset("helper and b must differ")
    c = [i for i in range(s.m) if i not in (h, bi)]
    rho_bc = partial_trace(s, [bi] + c)
    rho_b = partial_trace(s, [bi])
    rho_c = partial_trace(s, c)
    # rho_bc is ordered by party index, so assemble the product in the same order
    sub = rho_bc.layout
    prod = _ordered_product(sub, s.layout.names[bi], rho_b.matrix, rho_c.matrix)
    is_product = np.linalg.norm(rho_bc.matrix - prod) <= TOL_PRODUCT
    if is_product and rho_c.purity() >= 1 - TOL_PURE:
        return EoaCase.ZERO_CASE_C_PURE
    if is_product and rho_b.purity() >= 1 - TOL_PURE:
        return EoaCase.ZERO_CASE_B_PURE
    return EoaCase.NONZERO


def _ordered_product(sub: RegisterLayout, b_name: str, rho_b: np.ndarray, rho_c: np.ndarray) -> np.ndarray:
    """rho_b x rho_c permuted into the party order of ``sub``."""
    m = sub.m
    bpos = sub.names.index(b_name)
    dims = sub.party_dims
    order = [bpos] + [i for i in range(m) if i != bpos]
    t = np.kron(rho_b, rho_c).reshape([dims[i] for i in order] * 2)
    inv = [order.index(i) for i in range(m)]
    t = t.transpose(inv + [m + i for i in inv])
    d = sub.dim
    return t.reshape(d, d)
