"""Start-End separation ranks and executable checks of the depth-separation argument.

Bucket states are tuples of non-negative ints (ball counts per color);
a trajectory is the tuple of states ``(p[K-1], ..., p[1])`` met while
removing one ball at a time. Colors are 0-based; color ``r`` carries weight
``omega ** (r + 1)``.
"""

from __future__ import annotations

import csv
import io
import itertools
import json
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from functools import lru_cache
from typing import Callable, Iterable, Sequence

import numpy as np

from . import rac
from . import tensor as tn

State = tuple[int, ...]
Trajectory = tuple[State, ...]

#: Fraction of random trials that must hit the predicted rank.
PASS_RATE = 0.95


class PreconditionError(ValueError):
    """Inputs fall outside the hypotheses of the statement being checked."""


@dataclass
class SepRankReport:
    M: int
    R: int
    T: int
    L: int
    measured_rank: int
    expected: int
    verdict: str  # "equal" | "at-least" | "violation"
    arithmetic: str  # "exact" | "float"
    trials: int = 1
    failures: int = 0
    extra: dict = field(default_factory=dict)

    CSV_FIELDS = ("M", "R", "T", "L", "measured", "expected", "verdict", "trials", "failures")

    def to_json(self) -> str:
        return json.dumps(asdict(self))

    def csv_row(self) -> str:
        buf = io.StringIO()
        csv.writer(buf, lineterminator="").writerow(
            [self.M, self.R, self.T, self.L, self.measured_rank, self.expected,
             self.verdict, self.trials, self.failures])
        return buf.getvalue()


def _start_end_rank(a: np.ndarray, rel_tol: float = 1e-10) -> int:
    return tn.matrix_rank(tn.matricize(a, tn.Partition.start_end(a.ndim)), rel_tol)


# ---------------------------------------------------------------------------
# rank estimators


def sep_rank_shallow(net: rac.RacNetwork, T: int, c: int = 0, cap: int | None = None) -> int:
    """Start-End matricization rank of the shallow RAC weights tensor.

    Exact for rational networks, SVD-based for float ones.
    """
    if T % 2:
        raise ValueError("T must be even")
    M = net.embed_dim
    tn.check_cap(M ** (T // 2) * M ** (T // 2), cap, "Start-End matricization")
    return _start_end_rank(rac.build_weights_tensor_tt(net, c, T, cap))


def sep_rank_lower_bound(grid: np.ndarray, T: int) -> int:
    grid = np.asarray(grid)
    if T % 2 or grid.ndim != T:
        raise ValueError("grid must have even order T")
    return _start_end_rank(grid)


def brute_force_sep_rank(evaluator: Callable[[tuple[int, ...]], object], M: int, T: int,
                         cap: int = 4096) -> int:
    """Evaluate on the whole grid and take the exact Start-End rank."""
    grid = rac.grid_tensor(evaluator, M, T, cap)
    return tn.exact_rank(tn.matricize(tn.to_exact(grid), tn.Partition.start_end(T)))


def min_cut_mps_rank(R: int, M: int, T: int) -> int:
    """Predicted Start-End rank of a bond-R MPS: the smaller of the bond and the open legs."""
    if T % 2:
        raise ValueError("T must be even")
    return min(R, M ** (T // 2))


def measured_mps_rank(R: int, M: int, T: int, rng: np.random.Generator,
                      rel_tol: float = 1e-10) -> int:
    """Start-End rank of a random float RAC MPS (Gaussian unit cell and boundaries)."""
    w_in = rng.standard_normal((R, M))
    w_hid = rng.standard_normal((R, R)) / np.sqrt(R)
    core = tn.mps_unit_cell(w_in, w_hid)
    chain = tn.MpsChain([core] * T, rng.standard_normal(R), rng.standard_normal(R))
    return _start_end_rank(tn.mps_contract(chain), rel_tol)


# ---------------------------------------------------------------------------
# theorem harnesses


def verify_theorem_shallow(M: int, R: int, T: int, trials: int = 20,
                           rng: np.random.Generator | None = None,
                           cap: int | None = None) -> SepRankReport:
    """Random integer shallow RACs must reach ``min(R, M**(T/2))`` and never exceed it."""
    if T % 2:
        raise ValueError("T must be even")
    rng = rng or np.random.default_rng(0)
    tn.check_cap(M**T, cap, f"grid M={M} T={T}")
    expected = min(R, M ** (T // 2))
    ranks = [sep_rank_shallow(rac.random_rational_rac(rng, M, R), T, cap=cap) for _ in range(trials)]
    failures = sum(r != expected for r in ranks)
    exceeded = any(r > expected for r in ranks)
    ok = not exceeded and (trials - failures) >= PASS_RATE * trials
    return SepRankReport(M, R, T, 1, max(ranks) if ranks else 0, expected,
                         "equal" if ok else "violation", "exact", trials, failures,
                         {"ranks": ranks})


def verify_theorem_deep(M: int, R: int, T: int, z=2, omega: int | None = None,
                        float_trials: int = 20, rng: np.random.Generator | None = None,
                        cap: int | None = None) -> SepRankReport:
    """Exact rank of the explicit depth-2 grid against ``multiset(min(M,R), T/2)``.

    Random float depth-2 nets are also measured; their pass-rate is reported
    in ``extra`` and does not decide the verdict.
    """
    if T % 2:
        raise ValueError("T must be even")
    K = T // 2
    omega = K * K + 1 if omega is None else omega
    if omega <= K * K:
        raise PreconditionError(f"omega={omega} must exceed (T/2)^2={K * K}")
    bound = tn.multiset_coeff(min(M, R), K)
    grid = rac.deep_grid_closed_form(M, R, T, z, omega, cap=cap)
    measured = sep_rank_lower_bound(grid, T)
    rng = rng or np.random.default_rng(0)
    passed = 0
    for _ in range(float_trials):
        net = rac.random_float_rac(rng, M, R, L=2)
        g = rac.grid_tensor(rac.score_evaluator(net), M, T, cap)
        passed += sep_rank_lower_bound(g, T) >= bound
    return SepRankReport(M, R, T, 2, measured, bound,
                         "at-least" if measured >= bound else "violation", "exact",
                         1, int(measured < bound),
                         {"z": str(z), "omega": omega, "float_trials": float_trials,
                          "float_pass_rate": passed / float_trials if float_trials else None})


# ---------------------------------------------------------------------------
# bucket states and trajectories


def enumerate_states(rbar: int, K: int) -> list[State]:
    """All compositions of K into ``rbar`` non-negative parts, lexicographic."""
    if rbar < 1:
        raise ValueError("need at least one color")
    if rbar == 1:
        return [(K,)]
    return [(first,) + rest for first in range(K + 1) for rest in enumerate_states(rbar - 1, K - first)]


def _removals(p: State) -> Iterable[State]:
    for r, count in enumerate(p):
        if count:
            yield p[:r] + (count - 1,) + p[r + 1:]


def enumerate_trajectories(p: State, cap: int = 8) -> list[Trajectory]:
    """Every chain ``(p[K-1], ..., p[1])`` obtained by removing one ball per step."""
    K = sum(p)
    if K > cap:
        raise tn.CapExceeded(K, cap, "trajectory enumeration (balls)")
    if K <= 1:
        return [()]
    out = []
    for nxt in sorted(set(_removals(p))):
        for rest in enumerate_trajectories(nxt, cap):
            out.append((nxt,) + rest)
    return out


def is_valid_trajectory(p: State, traj: Trajectory) -> bool:
    chain = (p,) + traj
    if len(chain) != max(sum(p), 1):
        return False
    for k, (hi, lo) in enumerate(zip(chain, chain[1:])):
        if sum(lo) != sum(hi) - 1 or any(a < b for a, b in zip(hi, lo)):
            return False
    return all(min(s) >= 0 for s in chain)


# ---------------------------------------------------------------------------
# the decomposition identity


def decomp_lhs(Z: np.ndarray, d: Sequence[int]) -> Fraction:
    """``prod_{t > T/2} sum_r prod_{j <= t} Z[r, d_j]``."""
    T = len(d)
    rbar = Z.shape[0]
    prefix = [Fraction(1)] * rbar
    value = Fraction(1)
    for t in range(T):
        prefix = [prefix[r] * Z[r, d[t]] for r in range(rbar)]
        if t >= T // 2:
            value *= sum(prefix)
    return value


def decomp_rhs(Z: np.ndarray, d: Sequence[int],
               trajectories: Callable[[State], list[Trajectory]] = enumerate_trajectories) -> Fraction:
    """Sum over bucket states and their trajectories."""
    T = len(d)
    K = T // 2
    rbar = Z.shape[0]
    total = Fraction(0)
    for p in enumerate_states(rbar, K):
        start = Fraction(1)
        for r in range(rbar):
            for j in range(K):
                start *= Z[r, d[j]] ** p[r]
        for traj in trajectories(p):
            chain = (p,) + traj  # chain[i] has K - i balls
            end = Fraction(1)
            for i, j in enumerate(range(K, T)):
                state = chain[i]
                for r in range(rbar):
                    end *= Z[r, d[j]] ** state[r]
            total += start * end
    return total


def verify_decomp_identity(Z, T: int, trajectories=enumerate_trajectories, cap: int = 4096) -> bool:
    """Check the state/trajectory expansion on every index tuple in ``range(M)**T``."""
    if T % 2:
        raise ValueError("T must be even")
    Z = tn.to_exact(Z)
    M = Z.shape[1]
    tn.check_cap(M**T, cap, "decomposition check")
    return all(decomp_lhs(Z, d) == decomp_rhs(Z, d, trajectories)
               for d in itertools.product(range(M), repeat=T))


# ---------------------------------------------------------------------------
# rearrangement and bucket rewards


def rearrangement_check(vectors: Sequence[Sequence[int]], perm: Sequence[int]) -> bool:
    """Whether ``sum <v_i, v_perm(i)> < sum |v_i|^2`` holds strictly."""
    vs = [tuple(v) for v in vectors]
    if len(set(vs)) != len(vs):
        raise PreconditionError("vectors must be pairwise distinct")
    if any(x < 0 for v in vs for x in v):
        raise PreconditionError("vectors must be non-negative")
    perm = list(perm)
    if sorted(perm) != list(range(len(vs))):
        raise ValueError("not a permutation")
    if perm == list(range(len(vs))):
        raise PreconditionError("identity permutation makes no claim")
    lhs = sum(sum(a * b for a, b in zip(vs[i], vs[perm[i]])) for i in range(len(vs)))
    rhs = sum(sum(a * a for a in v) for v in vs)
    return lhs < rhs


def trajectory_reward(d: Sequence[int], p: State, traj: Trajectory, omega) -> int:
    """Reward ``sum_j omega**(d_j+1) * p[K-j+1][d_j]`` of one emptying order."""
    chain = (p,) + traj
    return sum(omega ** (c + 1) * chain[j][c] for j, c in enumerate(d))


def _bucket_reward_dp(d: tuple[int, ...], p: State, omega) -> int:
    @lru_cache(maxsize=None)
    def best(state: State) -> int:
        j = len(d) - sum(state)
        gain = omega ** (d[j] + 1) * state[d[j]]
        if sum(state) == 1:
            return gain
        return gain + max(best(nxt) for nxt in set(_removals(state)))

    return best(tuple(p))


def bucket_reward_optimal(d: Sequence[int], p: State, omega, cap: int = 8,
                          cross_check: bool = True) -> int:
    """Best total reward over all trajectories from ``p``.

    Computed by exhaustive search; a memoized dynamic program gives an
    independent second answer and the two must agree.
    """
    d = tuple(d)
    p = tuple(p)
    if sum(p) != len(d):
        raise ValueError("bucket size must equal the color-sequence length")
    if any(not 0 <= c < len(p) for c in d):
        raise ValueError("color out of range")
    if not d:
        return 0
    brute = max(trajectory_reward(d, p, t, omega) for t in enumerate_trajectories(p, cap))
    if cross_check:
        dp = _bucket_reward_dp(d, p, omega)
        if dp != brute:
            raise AssertionError(f"search {brute} != dynamic program {dp}")
    return brute


def rho_star(p_hat: State, omega) -> int:
    """Reward of always removing the lowest available color: ``sum_r omega**(r+1) * T(p_r)``."""
    return sum(omega ** (r + 1) * (n * (n + 1) // 2) for r, n in enumerate(p_hat))


def verify_unique_argmax(d: Sequence[int], omega, rbar: int, strict: bool = True) -> bool:
    """Whether the best reward over all starting states is attained only at the counts of ``d``."""
    d = tuple(d)
    K = len(d)
    if list(d) != sorted(d):
        raise PreconditionError("color sequence must be sorted")
    if strict and not omega > K * K:
        raise PreconditionError(f"omega={omega} must exceed (T/2)^2={K * K}")
    p_hat = tuple(d.count(r) for r in range(rbar))
    rewards = {p: bucket_reward_optimal(d, p, omega) for p in enumerate_states(rbar, K)}
    top = max(rewards.values())
    winners = [p for p, v in rewards.items() if v == top]
    return winners == [p_hat]


# ---------------------------------------------------------------------------
# depth repetition count and Hadamard bound


def _nested_count(lo: int, hi: int, levels: int) -> int:
    """Number of chains ``lo <= t_2 <= ... <= t_{levels+1} <= hi``, counted by iteration."""
    if levels == 0:
        return 1

    def count(level: int, upper: int) -> int:
        if level == 0:
            return 1
        return sum(count(level - 1, t) for t in range(lo, upper + 1))

    return count(levels, hi)


def repetition_count(T: int, L: int) -> int:
    """Occurrences of the Start-End unit in layer one of a depth-L RAC network.

    Counted as the number of factors in the nested product over
    ``T/2 < t_2 <= t_3 <= ... <= t_L <= T`` and checked against the closed
    form ``multiset(T/2, L-1)``. A single layer has exactly one unit.
    """
    if T % 2 or T < 2:
        raise ValueError("T must be a positive even number")
    if L < 1:
        raise ValueError("L must be positive")
    iterated = _nested_count(T // 2 + 1, T, L - 1)
    closed = tn.multiset_coeff(T // 2, L - 1)
    if iterated != closed:
        raise AssertionError(f"nested count {iterated} != closed form {closed}")
    return closed


def random_rank_matrix(rng: np.random.Generator, rows: int, cols: int, rank: int) -> np.ndarray:
    return rng.standard_normal((rows, rank)) @ rng.standard_normal((rank, cols))


def hadamard_bound_violations(rng: np.random.Generator, trials: int = 200, max_rank: int = 3,
                              max_size: int = 8, max_power: int = 4) -> list[tuple]:
    """Random rank-R matrices whose Hadamard power exceeds ``multiset(R, p)`` rank."""
    bad = []
    for _ in range(trials):
        R = int(rng.integers(1, max_rank + 1))
        rows, cols = (int(x) for x in rng.integers(R, max_size + 1, size=2))
        m = random_rank_matrix(rng, rows, cols, R)
        for p in range(1, max_power + 1):
            r = tn.numeric_rank(tn.hadamard_power(m, p))
            if r > tn.multiset_coeff(R, p):
                bad.append((R, rows, cols, p, r))
    return bad


# ---------------------------------------------------------------------------
# polynomial full-rank spot check


def deficient_points(family: Callable[[object], np.ndarray], points: Sequence) -> list:
    """Sample points where ``family(x)`` is not of full rank (exact arithmetic)."""
    out = []
    for x in points:
        m = tn.to_exact(family(x))
        if tn.exact_rank(m) < min(m.shape):
            out.append(x)
    return out


def poly_full_rank_spotcheck(family: Callable[[object], np.ndarray], points: Sequence,
                             max_exceptions: int | None = None) -> bool:
    """Whether ``family(x)`` is full rank on all but a few sampled ``x``.

    ``max_exceptions`` defaults to ``len(points) - 1``: a single full-rank
    sample already shows the determinant is not the zero polynomial.
    """
    if len(points) < 3:
        raise ValueError("need at least three sample points")
    limit = len(points) - 1 if max_exceptions is None else max_exceptions
    return len(deficient_points(family, points)) <= limit
