"""Dense tensor algebra over float64 or exact rationals.

Tensors are numpy arrays in row-major order. Float tensors use ``float64``;
exact tensors use ``object`` dtype holding :class:`fractions.Fraction`
entries (always reduced). Matrices are plain 2-D arrays of either kind.

All mode indices in this module are 0-based.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np

#: Default hard cap on the number of entries of any materialized tensor.
MAX_ENTRIES = 2**24


class TensorError(ValueError):
    """Invalid tensor shapes, partitions or scalar kinds."""


class CapExceeded(TensorError):
    """A tensor would exceed the configured size cap."""

    def __init__(self, entries: int, cap: int, what: str = "tensor"):
        super().__init__(f"{what} needs {entries} entries, cap is {cap}")
        self.entries = entries
        self.cap = cap
        self.what = what


# ---------------------------------------------------------------------------
# scalar kinds


def is_exact(a) -> bool:
    return np.asarray(a).dtype == object


def to_exact(a) -> np.ndarray:
    """Convert an array of numbers to reduced Fractions (exactly for floats)."""
    arr = np.asarray(a)
    out = np.empty(arr.shape, dtype=object)
    flat = out.reshape(-1)
    for i, v in enumerate(arr.reshape(-1)):
        if isinstance(v, np.generic):
            v = v.item()  # numpy integers would otherwise leak into Fraction numerators
        flat[i] = Fraction(int(v.numerator), int(v.denominator)) if isinstance(v, Fraction) else Fraction(v)
    return out


def to_float(a) -> np.ndarray:
    return np.asarray(a).astype(np.float64)


def check_cap(entries: int, cap: int | None = None, what: str = "tensor") -> None:
    cap = MAX_ENTRIES if cap is None else cap
    if entries > cap:
        raise CapExceeded(entries, cap, what)


@dataclass(frozen=True)
class DenseTensor:
    """An order-T array of float64 or exact-rational entries.

    Thin wrapper kept for JSON golden files; the algebra below works on the
    underlying arrays directly.
    """

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.dtype != object:
            data = data.astype(np.float64)
        elif any(not isinstance(v, Fraction) for v in data.reshape(-1)):
            data = to_exact(data)
        object.__setattr__(self, "data", data)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def order(self) -> int:
        return self.data.ndim

    @property
    def kind(self) -> str:
        return "exact" if self.data.dtype == object else "float64"

    @property
    def entries(self) -> list:
        return list(self.data.reshape(-1))

    def to_json(self) -> str:
        if self.kind == "exact":
            entries = [str(v) for v in self.entries]
        else:
            entries = [float(v) for v in self.entries]
        return json.dumps({"shape": list(self.shape), "kind": self.kind, "entries": entries})

    @classmethod
    def from_json(cls, text: str) -> "DenseTensor":
        doc = json.loads(text)
        shape = tuple(doc["shape"])
        if math.prod(shape) != len(doc["entries"]):
            raise TensorError("entry count does not match shape")
        if doc.get("kind") == "exact":
            data = np.array([Fraction(e) for e in doc["entries"]] or [], dtype=object)
            return cls(data.reshape(shape))
        return cls(np.array(doc["entries"], dtype=np.float64).reshape(shape))


# ---------------------------------------------------------------------------
# products and matricization


def tensor_product(a, b) -> np.ndarray:
    """Outer product: ``(a ⊗ b)[i..., j...] = a[i...] * b[j...]``."""
    a = np.asarray(a)
    b = np.asarray(b)
    if is_exact(a) != is_exact(b):
        raise TensorError("scalar-kind mismatch in tensor_product")
    return np.multiply.outer(a, b)


@dataclass(frozen=True)
class Partition:
    """A split of the modes ``0..T-1`` into row modes I and column modes J."""

    I: tuple[int, ...]
    J: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "I", tuple(sorted(self.I)))
        object.__setattr__(self, "J", tuple(sorted(self.J)))
        if set(self.I) & set(self.J):
            raise TensorError("partition sets overlap")
        if sorted(self.I + self.J) != list(range(len(self.I) + len(self.J))):
            raise TensorError("partition does not cover the modes 0..T-1")

    @property
    def order(self) -> int:
        return len(self.I) + len(self.J)

    @classmethod
    def start_end(cls, T: int) -> "Partition":
        if T % 2:
            raise TensorError("Start-End partition needs an even order")
        return cls(tuple(range(T // 2)), tuple(range(T // 2, T)))


def _common_dim(a: np.ndarray) -> int:
    if a.ndim == 0:
        return 1
    dims = set(a.shape)
    if len(dims) != 1:
        raise TensorError(f"modes have unequal dimensions {a.shape}")
    return dims.pop()


def matricize(a, p: Partition) -> np.ndarray:
    """Arrange tensor entries into an ``M^|I| x M^|J|`` matrix.

    The first mode of I is the most significant digit of the row index,
    and likewise for J and the column index.
    """
    a = np.asarray(a)
    if p.order != a.ndim:
        raise TensorError(f"partition of order {p.order} for tensor of order {a.ndim}")
    M = _common_dim(a)
    return np.transpose(a, p.I + p.J).reshape(M ** len(p.I), M ** len(p.J))


def unmatricize(m, p: Partition, M: int) -> np.ndarray:
    """Inverse of :func:`matricize`."""
    m = np.asarray(m)
    order = p.order
    t = m.reshape((M,) * order)
    return np.transpose(t, np.argsort(p.I + p.J))


# ---------------------------------------------------------------------------
# rank


def singular_values(m) -> np.ndarray:
    """Singular values by one-sided Jacobi rotations, descending.

    Works on the orientation with fewer columns, so the implicit Gram matrix
    has the smaller dimension.
    """
    u = np.array(m, dtype=np.float64)
    if u.ndim != 2:
        raise TensorError("singular_values expects a matrix")
    if not np.all(np.isfinite(u)):
        raise TensorError("non-finite matrix entries")
    if u.shape[0] < u.shape[1]:
        u = u.T.copy()
    n = u.shape[1]
    eps = np.finfo(np.float64).eps
    for _ in range(60):
        rotated = False
        for i in range(n - 1):
            for j in range(i + 1, n):
                alpha = u[:, i] @ u[:, i]
                beta = u[:, j] @ u[:, j]
                gamma = u[:, i] @ u[:, j]
                if alpha == 0.0 or beta == 0.0:
                    continue
                if abs(gamma) <= eps * math.sqrt(alpha * beta):
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                t = math.copysign(1.0, zeta) / (abs(zeta) + math.hypot(1.0, zeta))
                c = 1.0 / math.sqrt(1.0 + t * t)
                s = c * t
                ui = u[:, i].copy()
                u[:, i] = c * ui - s * u[:, j]
                u[:, j] = s * ui + c * u[:, j]
        if not rotated:
            break
    return np.sort(np.linalg.norm(u, axis=0))[::-1]


def numeric_rank(m, rel_tol: float = 1e-10) -> int:
    """Count singular values above ``rel_tol * sigma_max * max(rows, cols)``."""
    if rel_tol <= 0:
        raise ValueError("rel_tol must be positive")
    m = np.asarray(m, dtype=np.float64)
    if m.size == 0:
        return 0
    s = singular_values(m)
    if s[0] == 0.0:
        return 0
    return int(np.sum(s > rel_tol * s[0] * max(m.shape)))


def _integer_rows(m: np.ndarray) -> list[list[int]]:
    rows = []
    for row in m:
        fr = to_exact(row)
        scale = math.lcm(*(int(f.denominator) for f in fr)) if len(fr) else 1
        rows.append([int(f.numerator) * (scale // int(f.denominator)) for f in fr])
    return rows


def exact_rank(m) -> int:
    """Rank by fraction-free (Bareiss) elimination on integer-scaled rows.

    Pivots are chosen by largest absolute value within the column. Scaling a
    row by the lcm of its denominators does not change the rank.
    """
    m = np.asarray(m)
    if m.ndim != 2:
        raise TensorError("exact_rank expects a matrix")
    a = _integer_rows(m)
    nrows, ncols = m.shape
    rank = 0
    prev = 1
    for col in range(ncols):
        if rank == nrows:
            break
        piv = max(range(rank, nrows), key=lambda r: abs(a[r][col]))
        if a[piv][col] == 0:
            continue
        a[rank], a[piv] = a[piv], a[rank]
        p = a[rank][col]
        for r in range(rank + 1, nrows):
            f = a[r][col]
            row_r = a[r]
            row_p = a[rank]
            for c in range(col + 1, ncols):
                row_r[c] = (p * row_r[c] - f * row_p[c]) // prev
            row_r[col] = 0
        prev = p
        rank += 1
    return rank


def matrix_rank(m, rel_tol: float = 1e-10) -> int:
    """Exact rank for exact matrices, numeric rank for float ones."""
    return exact_rank(m) if is_exact(m) else numeric_rank(m, rel_tol)


# ---------------------------------------------------------------------------
# combinatorics and building blocks


def hadamard_power(m, p: int) -> np.ndarray:
    if p < 0:
        raise ValueError("Hadamard power must be non-negative")
    m = np.asarray(m)
    if p == 0:
        if is_exact(m):
            out = np.empty(m.shape, dtype=object)
            out.fill(Fraction(1))
            return out
        return np.ones(m.shape)
    return m**p


def multiset_coeff(n: int, k: int) -> int:
    """Number of size-k multisets over n symbols, ``C(n+k-1, k)``."""
    if n < 0 or k < 0:
        raise ValueError("multiset_coeff needs non-negative arguments")
    if k == 0:
        return 1
    if n == 0:
        raise ValueError("no non-empty multisets over an empty alphabet")
    return math.comb(n + k - 1, k)


def delta_tensor(R: int, exact: bool = False) -> np.ndarray:
    """Order-3 tensor equal to 1 on the super-diagonal ``(i, i, i)``."""
    if R < 1:
        raise ValueError("R must be positive")
    d = np.zeros((R, R, R))
    idx = np.arange(R)
    d[idx, idx, idx] = 1.0
    return to_exact(d) if exact else d


def mps_unit_cell(w_in, w_hid) -> np.ndarray:
    """RAC building block ``core[k_prev, d, k] = W_in[k, d] * W_hid[k, k_prev]``."""
    w_in = np.asarray(w_in)
    w_hid = np.asarray(w_hid)
    R, M = w_in.shape
    if w_hid.shape != (R, R):
        raise TensorError(f"hidden matrix {w_hid.shape} does not match R={R}")
    return w_hid.T[:, None, :] * w_in.T[None, :, :]


@dataclass
class MpsChain:
    """Open-boundary chain of order-3 cores ``(bond_left, phys, bond_right)``."""

    cores: list
    left: np.ndarray
    right: np.ndarray
    cap: int | None = field(default=None, compare=False)

    def __post_init__(self):
        if not self.cores:
            raise TensorError("MPS chain needs at least one core")
        self.left = np.asarray(self.left)
        self.right = np.asarray(self.right)
        bond = self.left.shape[0]
        phys = None
        for t, core in enumerate(self.cores):
            core = np.asarray(core)
            if core.ndim != 3 or core.shape[0] != bond:
                raise TensorError(f"bond mismatch at core {t}")
            if phys is not None and core.shape[1] != phys:
                raise TensorError(f"physical dimension mismatch at core {t}")
            phys = core.shape[1]
            bond = core.shape[2]
        if self.right.shape[0] != bond:
            raise TensorError("right boundary does not match last bond")

    @property
    def phys_dim(self) -> int:
        return np.asarray(self.cores[0]).shape[1]

    @property
    def length(self) -> int:
        return len(self.cores)


def mps_contract(chain: MpsChain, cap: int | None = None) -> np.ndarray:
    """Sum over all bond indices, leaving the physical legs open."""
    cap = chain.cap if cap is None else cap
    M = chain.phys_dim
    check_cap(M**chain.length, cap, "MPS output")
    state = chain.left
    for core in chain.cores:
        core = np.asarray(core)
        check_cap(state.size // state.shape[-1] * M * core.shape[2], cap, "MPS intermediate")
        state = np.tensordot(state, core, axes=([-1], [0]))
    return np.tensordot(state, chain.right, axes=([-1], [0]))


def contract_vectors(a, vectors: Sequence) -> object:
    """Contract mode t of ``a`` with ``vectors[t]`` for every mode."""
    out = np.asarray(a)
    if out.ndim != len(vectors):
        raise TensorError(f"{len(vectors)} vectors for a tensor of order {out.ndim}")
    for v in vectors:
        v = np.asarray(v)
        if v.shape[0] != out.shape[0]:
            raise TensorError("vector length does not match mode dimension")
        out = np.tensordot(v, out, axes=([0], [0]))
    return out[()] if isinstance(out, np.ndarray) else out
