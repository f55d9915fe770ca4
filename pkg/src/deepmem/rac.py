"""Recurrent Arithmetic Circuits and their tensor representations.

A layer computes ``h[t] = g(W_hid @ h[t-1], W_in @ x[t])`` where ``g`` is the
elementwise product (RAC), ``tanh(a + b)`` or ``modrelu(a + b, bias)``.
Tokens are 0-based integers in ``range(M)``; the default embedding is
one-hot, so the template matrix F is the identity.

Networks hold either float64 weights or exact Fractions (object arrays);
forward passes preserve the kind.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Sequence

import numpy as np

from . import tensor as tn
from .ortho import modrelu

NONLINEARITIES = ("rac", "tanh", "modrelu")


@dataclass
class LayerWeights:
    w_in: np.ndarray
    w_hid: np.ndarray
    h0: np.ndarray
    bias: np.ndarray | None = None  # modReLU only

    def __post_init__(self):
        self.w_in = np.asarray(self.w_in)
        self.w_hid = np.asarray(self.w_hid)
        self.h0 = np.asarray(self.h0)
        R = self.w_hid.shape[0]
        if self.w_hid.shape != (R, R) or self.w_in.shape[0] != R or self.h0.shape != (R,):
            raise tn.TensorError("inconsistent layer dimensions")
        if self.bias is not None:
            self.bias = np.asarray(self.bias)

    @property
    def channels(self) -> int:
        return self.w_hid.shape[0]


@dataclass
class RacNetwork:
    """Stacked recurrent layers with a linear read-out ``W_out @ h[T, L]``."""

    layers: list[LayerWeights]
    w_out: np.ndarray
    nonlinearity: str = "rac"

    def __post_init__(self):
        if self.nonlinearity not in NONLINEARITIES:
            raise ValueError(f"unknown nonlinearity {self.nonlinearity!r}")
        if not self.layers:
            raise ValueError("network needs at least one layer")
        self.w_out = np.asarray(self.w_out)
        for lower, upper in zip(self.layers, self.layers[1:]):
            if upper.w_in.shape[1] != lower.channels:
                raise tn.TensorError("layer input width does not match previous layer")
        if self.w_out.shape[1] != self.layers[-1].channels:
            raise tn.TensorError("output matrix does not match top layer width")
        if self.nonlinearity == "modrelu":
            for layer in self.layers:
                if layer.bias is None:
                    layer.bias = np.zeros(layer.channels)

    @property
    def depth(self) -> int:
        return len(self.layers)

    @property
    def channels(self) -> int:
        return self.layers[0].channels

    @property
    def embed_dim(self) -> int:
        return self.layers[0].w_in.shape[1]

    @property
    def num_classes(self) -> int:
        return self.w_out.shape[0]

    @property
    def exact(self) -> bool:
        return tn.is_exact(self.w_out)

    # serialization -----------------------------------------------------

    def to_dict(self) -> dict:
        def enc(a):
            a = np.asarray(a)
            if a.dtype == object:
                return {"shape": list(a.shape), "exact": [str(v) for v in a.reshape(-1)]}
            return {"shape": list(a.shape), "float": a.reshape(-1).tolist()}

        return {
            "L": self.depth,
            "R": self.channels,
            "M": self.embed_dim,
            "C": self.num_classes,
            "nonlinearity": self.nonlinearity,
            "layers": [
                {
                    "w_in": enc(layer.w_in),
                    "w_hid": enc(layer.w_hid),
                    "h0": enc(layer.h0),
                    **({"bias": enc(layer.bias)} if layer.bias is not None else {}),
                }
                for layer in self.layers
            ],
            "w_out": enc(self.w_out),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, doc: dict) -> "RacNetwork":
        def dec(d):
            if "exact" in d:
                arr = np.array([Fraction(v) for v in d["exact"]], dtype=object)
            else:
                arr = np.array(d["float"], dtype=np.float64)
            return arr.reshape(d["shape"])

        layers = [
            LayerWeights(
                dec(ld["w_in"]), dec(ld["w_hid"]), dec(ld["h0"]),
                dec(ld["bias"]) if "bias" in ld else None,
            )
            for ld in doc["layers"]
        ]
        net = cls(layers, dec(doc["w_out"]), doc["nonlinearity"])
        if (net.depth, net.channels, net.embed_dim, net.num_classes) != (
            doc["L"], doc["R"], doc["M"], doc["C"]
        ):
            raise ValueError("declared dimensions disagree with weights")
        return net

    @classmethod
    def from_json(cls, text: str) -> "RacNetwork":
        return cls.from_dict(json.loads(text))


# ---------------------------------------------------------------------------
# embeddings


@dataclass(frozen=True)
class Embedding:
    """Maps token d to ``F[d]``; ``F[i, j] = f_j(x^(i))``. None means one-hot."""

    M: int
    F: np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.F is not None:
            F = np.asarray(self.F)
            if F.shape != (self.M, self.M):
                raise tn.TensorError("custom embedding must be M x M")
            object.__setattr__(self, "F", F)

    def matrix(self, exact: bool = False) -> np.ndarray:
        if self.F is not None:
            return tn.to_exact(self.F) if exact and not tn.is_exact(self.F) else self.F
        eye = np.eye(self.M)
        return tn.to_exact(eye) if exact else eye

    def __call__(self, token: int, exact: bool = False) -> np.ndarray:
        if not 0 <= token < self.M:
            raise ValueError(f"token {token} outside range({self.M})")
        return self.matrix(exact)[token]


def _merge(kind: str, a, b, bias):
    if kind == "rac":
        return a * b
    if kind == "tanh":
        return np.tanh(a + b)
    return modrelu(a + b, bias)


def deep_forward(net: RacNetwork, tokens: Sequence[int], embedding: Embedding | None = None) -> np.ndarray:
    """Class scores ``W_out @ h[T, L]`` after feeding ``tokens``.

    An empty sequence returns ``W_out @ h0`` of the top layer.
    """
    embedding = embedding or Embedding(net.embed_dim)
    if embedding.M != net.embed_dim:
        raise tn.TensorError("embedding dimension does not match network")
    exact = net.exact
    states = [layer.h0 for layer in net.layers]
    for token in tokens:
        x = embedding(int(token), exact)
        for l, layer in enumerate(net.layers):
            states[l] = _merge(net.nonlinearity, layer.w_hid @ states[l], layer.w_in @ x, layer.bias)
            x = states[l]
    return net.w_out @ states[-1]


def shallow_forward(net: RacNetwork, tokens: Sequence[int], embedding: Embedding | None = None) -> np.ndarray:
    if net.depth != 1:
        raise ValueError("shallow_forward needs a single-layer network")
    return deep_forward(net, tokens, embedding)


# ---------------------------------------------------------------------------
# tensor views of the shallow RAC


def build_weights_tensor_tt(net: RacNetwork, c: int, T: int, cap: int | None = None) -> np.ndarray:
    """Order-T weights tensor of a shallow RAC via its TT recursion.

    ``phi[t, beta] = sum_alpha W_hid[beta, alpha] * phi[t-1, alpha] ⊗ W_in[alpha]``
    starting from scalar ones; the last step uses ``W_out[c]`` instead of
    ``W_hid``. Assumes ``W_hid @ h0 == 1`` (see :func:`pseudo_inverse_init`).
    """
    if net.depth != 1 or net.nonlinearity != "rac":
        raise ValueError("TT construction applies to shallow RAC networks")
    if T < 1:
        raise ValueError("T must be at least 1")
    layer = net.layers[0]
    R, M = layer.w_in.shape
    tn.check_cap(M**T, cap, "weights tensor")
    one = Fraction(1) if net.exact else 1.0
    phi = np.empty((R, 1), dtype=layer.w_in.dtype)
    phi.fill(one)
    for t in range(1, T + 1):
        h = (phi[:, :, None] * layer.w_in[:, None, :]).reshape(R, -1)
        mix = net.w_out[c : c + 1] if t == T else layer.w_hid
        phi = mix @ h
    return phi.reshape((M,) * T)


def shallow_mps(net: RacNetwork, c: int, T: int) -> tn.MpsChain:
    """The MPS of a shallow RAC: T identical unit cells, h0 and ``W_out[c]`` at the ends."""
    layer = net.layers[0]
    core = tn.mps_unit_cell(layer.w_in, layer.w_hid)
    return tn.MpsChain([core] * T, layer.h0, net.w_out[c])


def closed_form_score(weights, tokens: Sequence[int], embedding: Embedding | None = None):
    """``sum_d A[d_1..d_T] * prod_t f_{d_t}(x^t)``."""
    weights = np.asarray(weights)
    if weights.ndim != len(tokens):
        raise tn.TensorError("tensor order does not match sequence length")
    M = weights.shape[0] if weights.ndim else 1
    embedding = embedding or Embedding(M)
    exact = tn.is_exact(weights)
    return tn.contract_vectors(weights, [embedding(int(x), exact) for x in tokens])


def grid_tensor(evaluator: Callable[[tuple[int, ...]], object], M: int, T: int,
                cap: int | None = None) -> np.ndarray:
    """Evaluate ``evaluator`` on every template-index tuple in ``range(M)**T``.

    The result is exact (object dtype) if any value is a Fraction or int.
    """
    tn.check_cap(M**T, cap, "grid tensor")
    values = [evaluator(d) for d in itertools.product(range(M), repeat=T)]
    if any(isinstance(v, (Fraction, int)) and not isinstance(v, bool) for v in values):
        arr = np.empty(len(values), dtype=object)
        arr[:] = [Fraction(v) for v in values]
    else:
        arr = np.array(values, dtype=np.float64)
    return arr.reshape((M,) * T)


def score_evaluator(net: RacNetwork, c: int = 0, embedding: Embedding | None = None):
    """Grid evaluator returning class-c score of ``net`` on template tokens."""
    def evaluate(d):
        return deep_forward(net, d, embedding)[c]

    return evaluate


# ---------------------------------------------------------------------------
# the explicit deep assignment


def _exact_inverse(a: np.ndarray) -> np.ndarray:
    """Gauss-Jordan inverse over Fractions."""
    n = a.shape[0]
    aug = [[Fraction(v) for v in row] + [Fraction(int(i == j)) for j in range(n)]
           for i, row in enumerate(a)]
    for col in range(n):
        piv = next((r for r in range(col, n) if aug[r][col] != 0), None)
        if piv is None:
            raise np.linalg.LinAlgError("singular matrix")
        aug[col], aug[piv] = aug[piv], aug[col]
        p = aug[col][col]
        aug[col] = [v / p for v in aug[col]]
        for r in range(n):
            if r != col and aug[r][col] != 0:
                f = aug[r][col]
                aug[r] = [x - f * y for x, y in zip(aug[r], aug[col])]
    out = np.empty((n, n), dtype=object)
    for i in range(n):
        out[i] = aug[i][n:]
    return out


def power_tower_z(M: int, R: int, z, omega: int) -> np.ndarray:
    """``Z[i, j] = z**(omega**(i+1) * [i == j])`` for rows ``i < M``, zero below."""
    z = Fraction(z)
    if z == 0:
        raise ValueError("z must be non-zero")
    if omega <= 0:
        raise ValueError("omega must be positive")
    Z = np.empty((R, M), dtype=object)
    Z.fill(Fraction(0))
    for i in range(min(R, M)):
        for j in range(M):
            Z[i, j] = z ** (omega ** (i + 1)) if i == j else Fraction(1)
    return Z


def explicit_deep_assignment(M: int, R: int, T: int, z, omega: int,
                          F: np.ndarray | None = None, C: int = 1) -> RacNetwork:
    """Depth-2 RAC whose grid tensor has Start-End rank ``multiset(min(M,R), T/2)``.

    ``omega > (T/2)**2`` is what makes the rank argument go through; smaller
    values still build a network.
    """
    del T  # only constrains omega
    Z = power_tower_z(M, R, z, omega)
    if F is None:
        w_in1 = Z
    else:
        w_in1 = Z @ _exact_inverse(tn.to_exact(np.asarray(F).T))
    w_in2 = np.empty((R, R), dtype=object)
    w_in2.fill(Fraction(0))
    w_in2[0, :] = Fraction(1)
    eye = tn.to_exact(np.eye(R))
    ones = tn.to_exact(np.ones(R))
    w_out = np.empty((C, R), dtype=object)
    w_out.fill(Fraction(0))
    w_out[:, 0] = Fraction(1)
    layers = [LayerWeights(w_in1, eye, ones), LayerWeights(w_in2, eye.copy(), ones.copy())]
    return RacNetwork(layers, w_out, "rac")


def deep_grid_closed_form(M: int, R: int, T: int, z, omega: int,
                          max_T: int = 8, max_M: int = 3, cap: int | None = None) -> np.ndarray:
    """``A[d] = prod_t sum_{r < min(R,M)} prod_{j <= t} Z[r, d_j]`` in exact arithmetic."""
    if T > max_T or M > max_M:
        raise tn.CapExceeded(M**T, max_M**max_T, f"closed-form grid (T <= {max_T}, M <= {max_M})")
    tn.check_cap(M**T, cap, "closed-form grid")
    Z = power_tower_z(M, R, z, omega)
    rbar = min(R, M)
    out = np.empty(M**T, dtype=object)
    for idx, d in enumerate(itertools.product(range(M), repeat=T)):
        prefix = [Fraction(1)] * rbar
        value = Fraction(1)
        for t in range(T):
            prefix = [prefix[r] * Z[r, d[t]] for r in range(rbar)]
            value *= sum(prefix)
        out[idx] = value
    return out.reshape((M,) * T)


# names used by the public interface
appendix_z = power_tower_z
appendix_b_assignment = explicit_deep_assignment


# ---------------------------------------------------------------------------
# initial state and sizes


def _exact_pinv(a: np.ndarray) -> np.ndarray:
    """Moore-Penrose inverse via a full-rank factorization ``A = B C``."""
    a = tn.to_exact(a)
    rows, cols = a.shape
    # reduced row echelon form gives C (pivot rows) and pivot columns give B
    rref = [list(r) for r in a]
    pivots = []
    r = 0
    for c in range(cols):
        piv = next((i for i in range(r, rows) if rref[i][c] != 0), None)
        if piv is None:
            continue
        rref[r], rref[piv] = rref[piv], rref[r]
        p = rref[r][c]
        rref[r] = [v / p for v in rref[r]]
        for i in range(rows):
            if i != r and rref[i][c] != 0:
                f = rref[i][c]
                rref[i] = [x - f * y for x, y in zip(rref[i], rref[r])]
        pivots.append(c)
        r += 1
    if r == 0:
        out = np.empty((cols, rows), dtype=object)
        out.fill(Fraction(0))
        return out
    Cm = np.empty((r, cols), dtype=object)
    for i in range(r):
        Cm[i] = rref[i]
    Bm = a[:, pivots]
    BtB_inv = _exact_inverse(Bm.T @ Bm)
    CCt_inv = _exact_inverse(Cm @ Cm.T)
    return Cm.T @ CCt_inv @ BtB_inv @ Bm.T


def pseudo_inverse_init(w_hid) -> np.ndarray:
    """``pinv(W_hid) @ 1``: the h0 that makes ``W_hid @ h0`` all-ones when possible."""
    w_hid = np.asarray(w_hid)
    R = w_hid.shape[0]
    if tn.is_exact(w_hid):
        try:
            inv = _exact_inverse(w_hid) if w_hid.shape[0] == w_hid.shape[1] else _exact_pinv(w_hid)
        except np.linalg.LinAlgError:
            inv = _exact_pinv(w_hid)
        return inv @ tn.to_exact(np.ones(R))
    return np.linalg.pinv(w_hid) @ np.ones(R)


def param_count(L: int, R: int, M: int, C: int, nonlinearity: str = "rac") -> int:
    if min(L, R, M, C) < 1:
        raise ValueError("all sizes must be positive")
    count = R * M + R * R + (L - 1) * 2 * R * R + C * R
    if nonlinearity == "modrelu":
        count += R * L
    return count


# ---------------------------------------------------------------------------
# random networks


#: Magnitude bound for theorem-trial weights; entries are nonzero integers in [-20, 20].
TRIAL_WEIGHT_BOUND = 20


def random_integer_matrix(rng: np.random.Generator, rows: int, cols: int, low: int = -5,
                          high: int = 5, nonzero: bool = False) -> np.ndarray:
    """Uniform integers in ``[low, high]`` as Fractions, with no all-zero row.

    ``nonzero`` drops 0 from the support entirely.
    """
    support = np.array([v for v in range(low, high + 1) if v or not nonzero])
    out = np.empty((rows, cols), dtype=object)
    for i in range(rows):
        row = rng.choice(support, size=cols)
        while not row.any():
            row = rng.choice(support, size=cols)
        out[i] = [Fraction(int(v)) for v in row]
    return out


def random_rational_rac(rng: np.random.Generator, M: int, R: int, C: int = 1,
                        L: int = 1, nonsingular_hidden: bool = True) -> RacNetwork:
    """Random integer-weight RAC with ``h0 = pinv(W_hid) @ 1`` per layer.

    A zero weight is a rank-dropping coincidence with probability 1/11 per entry
    on [-5, 5], so entries are drawn nonzero from a wider range.
    """
    b = TRIAL_WEIGHT_BOUND

    def draw(rows, cols):
        return random_integer_matrix(rng, rows, cols, -b, b, nonzero=True)

    layers = []
    width = M
    for _ in range(L):
        w_in = draw(R, width)
        while True:
            w_hid = draw(R, R)
            if not nonsingular_hidden or tn.exact_rank(w_hid) == R:
                break
        layers.append(LayerWeights(w_in, w_hid, pseudo_inverse_init(w_hid)))
        width = R
    return RacNetwork(layers, draw(C, R), "rac")


def random_float_rac(rng: np.random.Generator, M: int, R: int, C: int = 1, L: int = 1) -> RacNetwork:
    layers = []
    width = M
    for _ in range(L):
        w_in = rng.standard_normal((R, width))
        w_hid = rng.standard_normal((R, R))
        layers.append(LayerWeights(w_in, w_hid, pseudo_inverse_init(w_hid)))
        width = R
    return RacNetwork(layers, rng.standard_normal((C, R)), "rac")
