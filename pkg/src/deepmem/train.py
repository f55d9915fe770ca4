"""Backpropagation through time for stacked recurrent networks, RMSprop and experiment runners.

Inputs are either integer token arrays of shape ``(N, T)`` (one-hot
embedded) or float arrays of shape ``(N, T, M)``. Hidden states are kept
time-major, ``(T, N, R)``.
"""

from __future__ import annotations

import copy
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import ortho
from . import rac
from . import tasks as tk


class Divergence(FloatingPointError):
    def __init__(self, iteration: int, where: str):
        super().__init__(f"non-finite values in {where} at iteration {iteration}")
        self.iteration = iteration


# ---------------------------------------------------------------------------
# model


@dataclass
class Arch:
    depth: int
    channels: int
    nonlinearity: str = "modrelu"
    scornn: bool = True  # orthogonal W_hid through the scaled Cayley map

    @property
    def name(self) -> str:
        kind = "scornn" if self.scornn else self.nonlinearity
        return f"L{self.depth}-R{self.channels}-{kind}"


class Model:
    """A float :class:`~deepmem.rac.RacNetwork` plus optional Cayley parameters per layer."""

    def __init__(self, net: rac.RacNetwork, skews: list[ortho.SkewParam] | None = None):
        self.net = net
        self.skews = skews
        if skews is not None:
            if len(skews) != net.depth:
                raise ValueError("one skew parameter per layer")
            self.refresh()

    @property
    def nonlinearity(self) -> str:
        return self.net.nonlinearity

    def refresh(self) -> None:
        """Rebuild hidden matrices from their Cayley parameters."""
        if self.skews is not None:
            for layer, skew in zip(self.net.layers, self.skews):
                layer.w_hid = ortho.cayley(skew)

    def params(self) -> dict[str, np.ndarray]:
        """Trainable arrays by name; updated in place by the optimizer."""
        out = {}
        for l, layer in enumerate(self.net.layers):
            out[f"w_in{l}"] = layer.w_in
            if self.skews is None:
                out[f"w_hid{l}"] = layer.w_hid
            else:
                out[f"skew{l}"] = self.skews[l].upper
            if self.nonlinearity == "modrelu":
                out[f"bias{l}"] = layer.bias
        out["w_out"] = self.net.w_out
        return out

    def param_count(self) -> int:
        return sum(p.size for p in self.params().values())


def glorot(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (rows + cols))
    return rng.uniform(-limit, limit, size=(rows, cols))


def build_model(arch: Arch, M: int, C: int, rng: np.random.Generator) -> Model:
    """Glorot-uniform input/output weights; Cayley init for orthogonal layers.

    RAC layers start from ``h0 = pinv(W_hid) @ 1``, the others from zeros.
    """
    R = arch.channels
    layers = []
    skews = [] if arch.scornn else None
    width = M
    for _ in range(arch.depth):
        w_in = glorot(rng, R, width)
        if arch.scornn:
            skew = ortho.sample_skew_init(R, R // 2, rng)
            skews.append(skew)
            w_hid = ortho.cayley(skew)
        else:
            w_hid = ortho.cayley(ortho.sample_skew_init(R, 0, rng))  # orthogonal start
        h0 = rac.pseudo_inverse_init(w_hid) if arch.nonlinearity == "rac" else np.zeros(R)
        bias = np.zeros(R) if arch.nonlinearity == "modrelu" else None
        layers.append(rac.LayerWeights(w_in, w_hid, h0, bias))
        width = R
    net = rac.RacNetwork(layers, glorot(rng, C, R), arch.nonlinearity)
    return Model(net, skews)


def arch_param_count(arch: Arch, M: int, C: int) -> int:
    """Trainable parameters of ``build_model(arch, M, C)``; Cayley layers train R(R-1)/2 hidden entries."""
    R, L = arch.channels, arch.depth
    hidden = R * (R - 1) // 2 if arch.scornn else R * R
    count = R * M + (L - 1) * R * R + L * hidden + C * R
    if arch.nonlinearity == "modrelu":
        count += L * R
    return count


def matched_arch(depth: int, budget: int, M: int, C: int, nonlinearity: str = "modrelu",
                 scornn: bool = True) -> Arch:
    """Widest architecture of the given depth whose parameter count fits ``budget``."""
    R = 1
    while arch_param_count(Arch(depth, R + 1, nonlinearity, scornn), M, C) <= budget:
        R += 1
    return Arch(depth, R, nonlinearity, scornn)


# ---------------------------------------------------------------------------
# forward and backward


def _project_input(w_in: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Time-major ``W_in @ x[t]`` for token or dense inputs."""
    if x.dtype.kind in "iu":
        return w_in.T[x.T]  # (T, N, R)
    return np.einsum("ntm,rm->tnr", x, w_in)


@np.errstate(over="ignore", invalid="ignore")  # divergence is detected explicitly
def forward(model: Model, x: np.ndarray, keep: bool = True):
    """Run all layers; returns top-layer states ``(T, N, R)`` and a cache for backprop."""
    net = model.net
    kind = net.nonlinearity
    N = x.shape[0]
    cache = []
    below = None
    for l, layer in enumerate(net.layers):
        b_seq = _project_input(layer.w_in, x) if l == 0 else below @ layer.w_in.T
        T = b_seq.shape[0]
        R = layer.channels
        hs = np.empty((T, N, R))
        a_seq = np.empty((T, N, R)) if keep else None
        h = np.broadcast_to(layer.h0, (N, R))
        w_hid_t = layer.w_hid.T
        for t in range(T):
            a = h @ w_hid_t
            if kind == "rac":
                h = a * b_seq[t]
            elif kind == "tanh":
                h = np.tanh(a + b_seq[t])
            else:
                z = a + b_seq[t]
                mag = np.abs(z) + layer.bias
                h = np.where(mag > 0, mag * np.sign(z), 0.0)
            hs[t] = h
            if keep:
                a_seq[t] = a
        if keep:
            cache.append((a_seq, b_seq, hs))
        below = hs
    return below, cache


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


@np.errstate(over="ignore", invalid="ignore")
def loss_and_grads(model: Model, x: np.ndarray, y: np.ndarray, loss_kind: str,
                   iteration: int = 0) -> tuple[float, dict[str, np.ndarray]]:
    """Mean softmax cross-entropy and its exact gradient for every trainable array.

    ``per_step`` sums the loss over all time steps (targets ``(N, T)``);
    ``final`` scores only the last step (targets ``(N,)``).
    """
    net = model.net
    N = x.shape[0]
    top, cache = forward(model, x)
    if not np.all(np.isfinite(top)):
        raise Divergence(iteration, "forward pass")
    T = top.shape[0]
    grads: dict[str, np.ndarray] = {}
    d_top = np.zeros_like(top)
    if loss_kind == "per_step":
        logits = top @ net.w_out.T  # (T, N, C)
        probs = _softmax(logits)
        tgt = y.T  # (T, N)
        picked = np.take_along_axis(probs, tgt[..., None], axis=-1)[..., 0]
        loss = float(-np.sum(np.log(np.maximum(picked, 1e-300))) / N)
        dlogits = probs
        np.put_along_axis(dlogits, tgt[..., None], np.take_along_axis(probs, tgt[..., None], -1) - 1.0, -1)
        dlogits /= N
        grads["w_out"] = np.einsum("tnc,tnr->cr", dlogits, top)
        d_top = dlogits @ net.w_out
    elif loss_kind == "final":
        logits = top[-1] @ net.w_out.T
        probs = _softmax(logits)
        picked = probs[np.arange(N), y]
        loss = float(-np.mean(np.log(np.maximum(picked, 1e-300))))
        dlogits = probs.copy()
        dlogits[np.arange(N), y] -= 1.0
        dlogits /= N
        grads["w_out"] = dlogits.T @ top[-1]
        d_top[-1] = dlogits @ net.w_out
    else:
        raise ValueError(f"unknown loss kind {loss_kind!r}")

    d_above = d_top
    kind = net.nonlinearity
    for l in range(net.depth - 1, -1, -1):
        layer = net.layers[l]
        a_seq, b_seq, hs = cache[l]
        R = layer.channels
        d_w_hid = np.zeros((R, R))
        d_b_seq = np.empty_like(b_seq)
        d_bias = np.zeros(R) if kind == "modrelu" else None
        carry = np.zeros((N, R))
        w_hid = layer.w_hid
        for t in range(T - 1, -1, -1):
            dh = d_above[t] + carry
            if kind == "rac":
                da = dh * b_seq[t]
                db = dh * a_seq[t]
            elif kind == "tanh":
                da = db = dh * (1.0 - hs[t] ** 2)
            else:
                z = a_seq[t] + b_seq[t]
                active = (np.abs(z) + layer.bias) > 0
                da = db = dh * active
                d_bias += np.sum(dh * active * np.sign(z), axis=0)
            h_prev = hs[t - 1] if t > 0 else np.broadcast_to(layer.h0, (N, R))
            d_w_hid += da.T @ h_prev
            carry = da @ w_hid
            d_b_seq[t] = db
        if l == 0:
            if x.dtype.kind in "iu":
                M = layer.w_in.shape[1]
                onehot = np.zeros((T * N, M))
                onehot[np.arange(T * N), x.T.reshape(-1)] = 1.0
                grads["w_in0"] = d_b_seq.reshape(-1, R).T @ onehot
            else:
                grads["w_in0"] = np.einsum("tnr,ntm->rm", d_b_seq, x)
        else:
            below = cache[l - 1][2]
            grads[f"w_in{l}"] = np.einsum("tnr,tns->rs", d_b_seq, below)
            d_above = d_b_seq @ layer.w_in
        if model.skews is None:
            grads[f"w_hid{l}"] = d_w_hid
        else:
            skew = model.skews[l]
            d_A = ortho.scornn_grad(d_w_hid, w_hid, skew)
            grads[f"skew{l}"] = d_A[np.triu_indices(R, 1)]
        if d_bias is not None:
            grads[f"bias{l}"] = d_bias
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise Divergence(iteration, f"gradient of {name}")
    return loss, grads


def backprop(model: Model, x: np.ndarray, y: np.ndarray, loss_kind: str) -> dict[str, np.ndarray]:
    return loss_and_grads(model, x, y, loss_kind)[1]


def loss_value(model: Model, x: np.ndarray, y: np.ndarray, loss_kind: str) -> float:
    top, _ = forward(model, x, keep=False)
    logits = top @ model.net.w_out.T
    if loss_kind == "per_step":
        probs = _softmax(logits)
        picked = np.take_along_axis(probs, y.T[..., None], axis=-1)[..., 0]
        return float(-np.sum(np.log(np.maximum(picked, 1e-300))) / x.shape[0])
    probs = _softmax(logits[-1])
    return float(-np.mean(np.log(np.maximum(probs[np.arange(x.shape[0]), y], 1e-300))))


def predict(model: Model, x: np.ndarray, per_step: bool, chunk: int = 1000) -> np.ndarray:
    """Argmax class per step ``(N, T)`` or at the final step ``(N,)``."""
    out = []
    for i in range(0, x.shape[0], chunk):
        top, _ = forward(model, x[i:i + chunk], keep=False)
        if per_step:
            out.append(np.argmax(top @ model.net.w_out.T, axis=-1).T)
        else:
            out.append(np.argmax(top[-1] @ model.net.w_out.T, axis=-1))
    return np.concatenate(out)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class RmsPropState:
    lr: float
    gamma: float = 0.9
    eps: float = 1e-8
    accumulators: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not 0 < self.gamma < 1:
            raise ValueError("gamma must lie in (0, 1)")
        if self.lr < 0:
            raise ValueError("learning rate must be non-negative")


def rmsprop_step(state: RmsPropState, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
    """``acc = gamma acc + (1-gamma) g^2; theta -= lr g / (sqrt(acc) + eps)``, in place."""
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for {name}")
        acc = state.accumulators.get(name)
        if acc is None:
            acc = state.accumulators[name] = np.zeros_like(p)
        acc *= state.gamma
        acc += (1.0 - state.gamma) * g * g
        p -= state.lr * g / (np.sqrt(acc) + state.eps)


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> None:
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if norm > max_norm:
        for g in grads.values():
            g *= max_norm / norm


# ---------------------------------------------------------------------------
# tasks as training problems


class CopyProblem:
    loss_kind = "per_step"
    metric_name = "data_accuracy"

    def __init__(self, cfg: tk.CopyConfig):
        self.cfg = cfg
        self.M = self.C = cfg.vocab.size

    def batch(self, rng, N):
        return tk.copy_batch(self.cfg, rng, N)

    def metric(self, model, x, y) -> float:
        return tk.data_accuracy(predict(model, x, per_step=True), y, self.cfg.m, self.cfg.B)

    def describe(self) -> dict:
        return {"task": "copy", **asdict(self.cfg)}


class SimProblem:
    loss_kind = "final"
    metric_name = "accuracy"

    def __init__(self, cfg: tk.SimConfig):
        self.cfg = cfg
        self.M = cfg.n + 1
        self.C = 3

    def batch(self, rng, N):
        return tk.sim_batch(self.cfg, rng, N)

    def metric(self, model, x, y) -> float:
        return float(np.mean(predict(model, x, per_step=False) == y))

    def describe(self) -> dict:
        return {"task": "similarity", **asdict(self.cfg)}


class DatasetProblem:
    """Fixed train/validation/test arrays, e.g. permuted MNIST as ``(N, 784, 1)`` floats."""

    loss_kind = "final"
    metric_name = "accuracy"

    def __init__(self, train, val, test, C: int = 10, name: str = "dataset"):
        self.train, self.val, self.test = train, val, test
        self.M = train[0].shape[-1]
        self.C = C
        self.name = name

    def metric(self, model, x, y) -> float:
        return float(np.mean(predict(model, x, per_step=False, chunk=250) == y))

    def describe(self) -> dict:
        return {"task": self.name, "train": int(self.train[0].shape[0]),
                "val": int(self.val[0].shape[0]), "test": int(self.test[0].shape[0])}


# ---------------------------------------------------------------------------
# training loops


@dataclass
class TrainConfig:
    batch_size: int = 128
    max_iters: int = 20000
    lrs: tuple[float, ...] = (1e-3, 3e-4, 1e-4)
    gamma: float = 0.9
    eval_every: int = 500
    patience: int = 10
    val_size: int = 1000
    test_size: int = 10000
    success_threshold: float = 0.99
    stop_on_success: bool = True
    clip_norm: float | None = None
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        self.lrs = tuple(self.lrs)


@dataclass
class ExperimentResult:
    config: dict
    lr: float
    iterations: int
    metric: float
    success: bool
    loss_curve: list[tuple[int, float]]
    seconds: float
    params: int = 0
    failed: bool = False
    message: str = ""

    def to_json(self) -> str:
        return json.dumps(asdict(self))


class EarlyStopping:
    """Signals a stop after ``patience`` checks without a new best loss."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = math.inf
        self.bad = 0

    def update(self, loss: float) -> bool:
        if loss < self.best:
            self.best = loss
            self.bad = 0
        else:
            self.bad += 1
        return self.bad >= self.patience


def train_once(model: Model, problem, cfg: TrainConfig, lr: float) -> ExperimentResult:
    """Train ``model`` in place at one learning rate."""
    start = time.perf_counter()
    rng = np.random.default_rng(cfg.seed)
    eval_rng = np.random.default_rng(cfg.seed + 1_000_003)
    synthetic = hasattr(problem, "batch")
    if synthetic:
        x_val, y_val = problem.batch(eval_rng, cfg.val_size)
    else:
        x_val, y_val = problem.val
        order = rng.permutation(problem.train[0].shape[0])
        cursor = 0
    opt = RmsPropState(lr=lr, gamma=cfg.gamma)
    params = model.params()
    stopper = EarlyStopping(cfg.patience)
    curve: list[tuple[int, float]] = []
    it = 0
    failed = False
    message = ""
    try:
        while it < cfg.max_iters:
            if synthetic:
                x, y = problem.batch(rng, cfg.batch_size)
            else:
                if cursor + cfg.batch_size > order.size:
                    order = rng.permutation(order.size)
                    cursor = 0
                idx = order[cursor:cursor + cfg.batch_size]
                cursor += cfg.batch_size
                x, y = problem.train[0][idx], problem.train[1][idx]
            loss, grads = loss_and_grads(model, x, y, problem.loss_kind, it)
            curve.append((it, loss))
            if cfg.clip_norm is not None:
                clip_global_norm(grads, cfg.clip_norm)
            rmsprop_step(opt, params, grads)
            model.refresh()
            it += 1
            if it % cfg.eval_every == 0:
                val_loss = loss_value(model, x_val, y_val, problem.loss_kind)
                if not math.isfinite(val_loss):
                    raise Divergence(it, "validation loss")
                if cfg.stop_on_success and problem.metric(model, x_val, y_val) > cfg.success_threshold:
                    break
                if stopper.update(val_loss):
                    break
    except Divergence as exc:
        failed = True
        message = str(exc)
    if failed:
        metric = 0.0
    elif synthetic:
        x_test, y_test = problem.batch(np.random.default_rng(cfg.seed + 2_000_003), cfg.test_size)
        metric = problem.metric(model, x_test, y_test)
    else:
        metric = problem.metric(model, *problem.test)
    return ExperimentResult(
        config={**problem.describe(), **asdict(cfg)},
        lr=lr, iterations=it, metric=metric,
        success=(not failed) and metric > cfg.success_threshold,
        loss_curve=curve, seconds=time.perf_counter() - start,
        params=model.param_count(), failed=failed, message=message,
    )


def train_loop(model: Model, problem, cfg: TrainConfig) -> ExperimentResult:
    """Best result over the learning-rate sweep; each rate trains a fresh copy.

    The sweep stops at the first successful rate.
    """
    best = None
    for lr in cfg.lrs:
        result = train_once(copy.deepcopy(model), problem, cfg, lr)
        if best is None or (result.success, result.metric) > (best.success, best.metric):
            best = result
        if result.success:
            break
    return best


# ---------------------------------------------------------------------------
# frontier sweeps


FRONTIER_FIELDS = ("depth", "channels", "params", "hardness", "metric", "success", "iters", "seconds")


@dataclass
class FrontierCell:
    depth: int
    channels: int
    params: int
    hardness: int
    metric: float
    success: bool
    iters: int
    seconds: float


def _run_cell(args) -> FrontierCell:
    arch, hardness, make_problem, cfg, trainer, seed = args
    problem = make_problem(hardness)
    model = build_model(arch, problem.M, problem.C, np.random.default_rng(seed))
    result = trainer(model, problem, cfg)
    return FrontierCell(arch.depth, arch.channels, model.param_count(), hardness,
                        result.metric, result.success, result.iterations, result.seconds)


def success_frontier(make_problem: Callable[[int], object], archs: Sequence[Arch],
                     hardness: Sequence[int], cfg: TrainConfig,
                     trainer: Callable = train_loop, stop_at_first_failure: bool = False,
                     jobs: int = 1) -> tuple[list[FrontierCell], dict[str, int | None]]:
    """Train every (architecture, hardness) cell; frontier = largest solved hardness.

    With ``stop_at_first_failure`` each architecture's sweep ends at its first
    failed cell (sequential only).
    """
    grid = sorted(hardness)
    cells: list[FrontierCell] = []
    if jobs > 1 and not stop_at_first_failure:
        work = [(a, h, make_problem, cfg, trainer, cfg.seed) for a in archs for h in grid]
        with ProcessPoolExecutor(jobs) as pool:
            cells = list(pool.map(_run_cell, work))
    else:
        for arch in archs:
            for h in grid:
                cell = _run_cell((arch, h, make_problem, cfg, trainer, cfg.seed))
                cells.append(cell)
                if stop_at_first_failure and not cell.success:
                    break
    frontier: dict[str, int | None] = {}
    for arch in archs:
        solved = [c.hardness for c in cells
                  if c.depth == arch.depth and c.channels == arch.channels and c.success]
        frontier[arch.name] = max(solved) if solved else None
    return cells, frontier


def frontier_csv(cells: Sequence[FrontierCell]) -> str:
    lines = [",".join(FRONTIER_FIELDS)]
    for c in cells:
        lines.append(",".join(str(v) for v in (c.depth, c.channels, c.params, c.hardness,
                                               f"{c.metric:.6f}", int(c.success), c.iters,
                                               f"{c.seconds:.3f}")))
    return "\n".join(lines) + "\n"
