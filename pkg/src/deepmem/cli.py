"""Command-line front end: verification suites, training, frontier sweeps, data generation."""

from __future__ import annotations

import argparse
import csv
import functools
import hashlib
import itertools
import json
import sys
import urllib.error
import urllib.request
from pathlib import Path

import jsonschema
import numpy as np

from . import seprank as sr
from . import tasks as tk
from . import tensor as tn
from . import train as tr

EXIT_OK, EXIT_VIOLATION, EXIT_CONFIG, EXIT_CAP, EXIT_DATA, EXIT_CHECKSUM, EXIT_NETWORK = range(7)
CONFIG_VERSION = 1
MNIST_MIRRORS = (
    "https://ossci-datasets.s3.amazonaws.com/mnist/",
    "http://yann.lecun.com/exdb/mnist/",
)


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# schemas


def _obj(props: dict, required=()) -> dict:
    return {"type": "object", "properties": props, "required": list(required),
            "additionalProperties": False}


_INT = {"type": "integer"}
_POS = {"type": "integer", "minimum": 1}
_NONNEG = {"type": "integer", "minimum": 0}
_INTS = {"type": "array", "items": _INT}
_POSS = {"type": "array", "items": _POS}
_VERSION = {"const": CONFIG_VERSION}

CHECKS = ("theorem-shallow", "theorem-deep", "decomp", "rearrange", "bucket", "repetition",
          "min-cut", "hadamard-bound")

VERIFY_SCHEMA = _obj({
    "version": _VERSION,
    "seed": _INT,
    "cap": _POS,
    "checks": {"type": "array", "items": {"enum": list(CHECKS)}},
    "theorem_shallow": _obj({"M": _POSS, "R": _POSS, "T": _POSS, "trials": _POS}),
    "theorem_deep": _obj({
        "cells": {"type": "array", "items": {"type": "array", "items": _POS, "minItems": 3, "maxItems": 3}},
        "z": _INT, "omega": {"type": ["integer", "null"]}, "float_trials": _NONNEG}),
    "decomp": _obj({"trials": _POS, "T": _POSS, "max_rbar": _POS, "max_M": _POS}),
    "rearrange": _obj({"sets": _POS, "count": _POS, "dim": _POS, "max_entry": _POS}),
    "bucket": _obj({"rbar": _POSS, "K": _POSS}),
    "repetition": _obj({"T": _POSS, "L": _POSS}),
    "min_cut": _obj({"R": _POSS, "M": _POSS, "T": _POSS, "trials": _POS}),
    "hadamard": _obj({"trials": _POS, "max_rank": _POS, "max_size": _POS, "max_power": _POS}),
}, ["version"])

_TASK = {"oneOf": [
    _obj({"kind": {"const": "copy"}, "m": _POS, "B": _NONNEG, "n": _POS}, ["kind"]),
    _obj({"kind": {"const": "similarity"}, "T": _POS, "m": _POS, "n": _POS}, ["kind"]),
    _obj({"kind": {"const": "mnist"}, "permutation_seed": _NONNEG, "val": _POS,
          "train_subset": _POS, "test_subset": _POS, "data_dir": {"type": "string"}}, ["kind"]),
]}
_ARCH = _obj({"depth": _POS, "channels": _POS, "nonlinearity": {"enum": ["rac", "tanh", "modrelu"]},
              "scornn": {"type": "boolean"}}, ["depth"])
_TRAIN = _obj({
    "batch_size": _POS, "max_iters": _NONNEG,
    "lrs": {"type": "array", "items": {"type": "number", "minimum": 0}, "minItems": 1},
    "gamma": {"type": "number"}, "eval_every": _POS, "patience": _POS, "val_size": _POS,
    "test_size": _POS, "success_threshold": {"type": "number"}, "stop_on_success": {"type": "boolean"},
    "clip_norm": {"type": ["number", "null"]},
})

TRAIN_SCHEMA = _obj({"version": _VERSION, "seed": _INT, "task": _TASK, "arch": _ARCH, "train": _TRAIN},
                    ["version", "task", "arch"])
FRONTIER_SCHEMA = _obj({
    "version": _VERSION, "seed": _INT, "task": _TASK, "vary": {"enum": ["B", "m", "T"]},
    "hardness": _INTS, "budget": _POS, "archs": {"type": "array", "items": _ARCH, "minItems": 1},
    "train": _TRAIN, "stop_at_first_failure": {"type": "boolean"},
}, ["version", "task", "vary", "hardness", "archs"])
GEN_SCHEMA = _obj({"version": _VERSION, "seed": _INT, "task": _TASK, "count": _NONNEG},
                  ["version", "task", "count"])
FETCH_SCHEMA = _obj({"version": _VERSION, "dest": {"type": "string"}}, ["version"])

DEFAULT_VERIFY = {
    "version": CONFIG_VERSION,
    "seed": 0,
    "cap": tn.MAX_ENTRIES,
    "checks": list(CHECKS),
    "theorem_shallow": {"M": [2, 3], "R": [1, 2, 3, 4, 5], "T": [2, 4, 6], "trials": 20},
    "theorem_deep": {"cells": [[2, 2, 4], [3, 3, 4], [2, 2, 6]], "z": 2, "omega": None, "float_trials": 0},
    "decomp": {"trials": 20, "T": [4, 6], "max_rbar": 3, "max_M": 3},
    "rearrange": {"sets": 50, "count": 4, "dim": 3, "max_entry": 9},
    "bucket": {"rbar": [2, 3], "K": [2, 3]},
    "repetition": {"T": [2, 4, 6, 8], "L": [1, 2, 3, 4]},
    "min_cut": {"R": [1, 2, 4, 100], "M": [2, 3], "T": [2, 4, 6], "trials": 20},
    "hadamard": {"trials": 200, "max_rank": 3, "max_size": 8, "max_power": 4},
}


def load_config(path, schema: dict, defaults: dict | None = None) -> dict:
    """Read and validate a JSON config; sections present in the file replace defaults."""
    doc = dict(defaults or {})
    if path is not None:
        try:
            loaded = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(loaded, dict):
            raise ConfigError("config must be a JSON object")
        doc.update(loaded)
    try:
        jsonschema.validate(doc, schema)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"invalid config at {where}: {exc.message}") from exc
    return doc


# ---------------------------------------------------------------------------
# verify


VERIFY_FIELDS = ("check", "M", "R", "T", "L", "measured", "expected", "verdict", "trials", "failures")


def _row(check, M="", R="", T="", L="", measured="", expected="", verdict="", trials=1, failures=0):
    return dict(zip(VERIFY_FIELDS, (check, M, R, T, L, measured, expected, verdict, trials, failures)))


def _report_row(check: str, rep: sr.SepRankReport) -> dict:
    return _row(check, rep.M, rep.R, rep.T, rep.L, rep.measured_rank, rep.expected, rep.verdict,
                rep.trials, rep.failures)


def run_check(name: str, cfg: dict, rng: np.random.Generator) -> list[dict]:
    """Rows for one verification suite; raises :class:`~deepmem.tensor.CapExceeded` on oversize cells."""
    cap = cfg["cap"]
    rows = []
    if name == "theorem-shallow":
        c = cfg["theorem_shallow"]
        for M, R, T in itertools.product(c["M"], c["R"], c["T"]):
            if M**T > cap:
                raise tn.CapExceeded(M**T, cap, f"theorem-shallow cell M={M} R={R} T={T}")
            rows.append(_report_row(name, sr.verify_theorem_shallow(M, R, T, c["trials"], rng, cap)))
    elif name == "theorem-deep":
        c = cfg["theorem_deep"]
        for M, R, T in c["cells"]:
            if M**T > cap:
                raise tn.CapExceeded(M**T, cap, f"theorem-deep cell M={M} R={R} T={T}")
            rep = sr.verify_theorem_deep(M, R, T, c["z"], c["omega"], c["float_trials"], rng, cap)
            rows.append(_report_row(name, rep))
    elif name == "decomp":
        c = cfg["decomp"]
        for T in c["T"]:
            bad = 0
            for _ in range(c["trials"]):
                rbar = int(rng.integers(1, c["max_rbar"] + 1))
                M = int(rng.integers(1, c["max_M"] + 1))
                Z = rng.integers(-4, 5, size=(rbar, M))
                bad += not sr.verify_decomp_identity(Z, T, cap=cap)
            rows.append(_row(name, T=T, verdict="violation" if bad else "equal",
                             trials=c["trials"], failures=bad))
    elif name == "rearrange":
        c = cfg["rearrange"]
        bad = checked = 0
        for _ in range(c["sets"]):
            vectors = set()
            while len(vectors) < c["count"]:
                vectors.add(tuple(int(v) for v in rng.integers(0, c["max_entry"] + 1, size=c["dim"])))
            vectors = sorted(vectors)
            for perm in itertools.permutations(range(c["count"])):
                if list(perm) != list(range(c["count"])):
                    checked += 1
                    bad += not sr.rearrangement_check(vectors, perm)
        rows.append(_row(name, verdict="violation" if bad else "equal", trials=checked, failures=bad))
    elif name == "bucket":
        c = cfg["bucket"]
        for rbar, K in itertools.product(c["rbar"], c["K"]):
            omega = K * K + 1
            seqs = list(itertools.combinations_with_replacement(range(rbar), K))
            bad = sum(not sr.verify_unique_argmax(d, omega, rbar) for d in seqs)
            rows.append(_row(name, R=rbar, T=2 * K, verdict="violation" if bad else "equal",
                             trials=len(seqs), failures=bad))
    elif name == "repetition":
        c = cfg["repetition"]
        for T, L in itertools.product(c["T"], c["L"]):
            try:
                got = sr.repetition_count(T, L)
                verdict = "equal"
            except AssertionError:
                got, verdict = "", "violation"
            rows.append(_row(name, T=T, L=L, measured=got, expected=tn.multiset_coeff(T // 2, L - 1),
                             verdict=verdict))
    elif name == "min-cut":
        c = cfg["min_cut"]
        for R, M, T in itertools.product(c["R"], c["M"], c["T"]):
            if M**T > cap:
                continue  # oversize cells are skipped rather than failing the suite
            expected = sr.min_cut_mps_rank(R, M, T)
            ranks = [sr.measured_mps_rank(R, M, T, rng) for _ in range(c["trials"])]
            fails = sum(r != expected for r in ranks)
            ok = c["trials"] - fails >= sr.PASS_RATE * c["trials"]
            rows.append(_row(name, M, R, T, 1, max(ranks), expected, "equal" if ok else "violation",
                             c["trials"], fails))
    elif name == "hadamard-bound":
        c = cfg["hadamard"]
        bad = sr.hadamard_bound_violations(rng, c["trials"], c["max_rank"], c["max_size"], c["max_power"])
        rows.append(_row(name, verdict="violation" if bad else "equal", trials=c["trials"],
                         failures=len(bad)))
    else:
        raise ConfigError(f"unknown check {name!r}")
    return rows


def _write_csv(path: Path, fields, rows) -> None:
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(fields))
        w.writeheader()
        w.writerows(rows)


def cmd_verify(cfg: dict, out: Path) -> int:
    rng = np.random.default_rng(cfg["seed"])
    out.mkdir(parents=True, exist_ok=True)
    rows: list[dict] = []
    summary = {"config": cfg, "status": "pass", "checks": {}}
    code = EXIT_OK
    for name in cfg["checks"]:
        try:
            new = run_check(name, cfg, rng)
        except tn.CapExceeded as exc:
            summary["status"] = "cap-exceeded"
            summary["cap_error"] = {"check": name, "message": str(exc)}
            print(f"cap exceeded: {exc}", file=sys.stderr)
            code = EXIT_CAP
            break
        rows.extend(new)
        bad = sum(r["verdict"] == "violation" for r in new)
        summary["checks"][name] = {"rows": len(new), "violations": bad}
        print(f"{name}: {'FAIL' if bad else 'ok'} ({len(new)} rows, {bad} violations)")
    if code == EXIT_OK and any(r["verdict"] == "violation" for r in rows):
        summary["status"] = "violation"
        code = EXIT_VIOLATION
    _write_csv(out / "verify.csv", VERIFY_FIELDS, rows)
    (out / "verify.json").write_text(json.dumps(summary, indent=2, default=str))
    return code


# ---------------------------------------------------------------------------
# train / frontier


def make_problem(task: dict, vary: str | None = None, hardness: int | None = None):
    """Build a training problem from a task document, optionally overriding one field."""
    task = dict(task)
    if vary is not None:
        task[vary] = hardness
    kind = task.pop("kind")
    if kind == "copy":
        return tr.CopyProblem(tk.CopyConfig(task.get("m", 3), task.get("B", 20), task.get("n", 8)))
    if kind == "similarity":
        return tr.SimProblem(tk.SimConfig(task.get("T", 20), task.get("m", 4), task.get("n", 8)))
    data_dir = tk.default_data_dir(task.get("data_dir"))
    train, val, test = tk.permuted_mnist_splits(
        data_dir, task.get("permutation_seed", 1), task.get("val", 5000),
        task.get("train_subset"), task.get("test_subset"))
    return tr.DatasetProblem(train, val, test, C=10, name="permuted-mnist")


def _train_config(doc: dict | None, seed: int) -> tr.TrainConfig:
    doc = dict(doc or {})
    if "lrs" in doc:
        doc["lrs"] = tuple(doc["lrs"])
    return tr.TrainConfig(seed=seed, **doc)


def _arch(doc: dict) -> tr.Arch:
    return tr.Arch(doc["depth"], doc.get("channels", 16), doc.get("nonlinearity", "modrelu"),
                   doc.get("scornn", True))


def cmd_train(cfg: dict, out: Path) -> int:
    seed = cfg.get("seed", 0)
    problem = make_problem(cfg["task"])
    arch = _arch(cfg["arch"])
    model = tr.build_model(arch, problem.M, problem.C, np.random.default_rng(seed))
    result = tr.train_loop(model, problem, _train_config(cfg.get("train"), seed))
    out.mkdir(parents=True, exist_ok=True)
    doc = json.loads(result.to_json())
    doc["resolved_config"] = cfg
    (out / "result.json").write_text(json.dumps(doc, indent=2))
    with (out / "loss_curve.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "loss"])
        w.writerows(result.loss_curve)
    print(f"{arch.name}: metric={result.metric:.4f} success={result.success} "
          f"iters={result.iterations} lr={result.lr}")
    return EXIT_OK


def cmd_frontier(cfg: dict, out: Path, jobs: int = 1) -> int:
    seed = cfg.get("seed", 0)
    tcfg = _train_config(cfg.get("train"), seed)
    probe = make_problem(cfg["task"], cfg["vary"], min(cfg["hardness"])) if cfg["hardness"] else None
    archs = []
    for doc in cfg["archs"]:
        if "budget" in cfg and "channels" not in doc and probe is not None:
            archs.append(tr.matched_arch(doc["depth"], cfg["budget"], probe.M, probe.C,
                                         doc.get("nonlinearity", "modrelu"), doc.get("scornn", True)))
        else:
            archs.append(_arch(doc))
    factory = functools.partial(make_problem, cfg["task"], cfg["vary"])
    cells, frontier = tr.success_frontier(factory, archs, cfg["hardness"], tcfg,
                                          stop_at_first_failure=cfg.get("stop_at_first_failure", False),
                                          jobs=jobs)
    out.mkdir(parents=True, exist_ok=True)
    (out / "frontier.csv").write_text(tr.frontier_csv(cells))
    (out / "frontier.json").write_text(json.dumps({"resolved_config": cfg, "frontier": frontier}, indent=2))
    for name, h in frontier.items():
        print(f"{name}: frontier {h}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# gen


def cmd_gen(cfg: dict, out: Path) -> int:
    seed = cfg.get("seed", 0)
    task = dict(cfg["task"])
    kind = task.pop("kind")
    rng = np.random.default_rng(seed)
    if kind == "copy":
        tcfg = tk.CopyConfig(task.get("m", 3), task.get("B", 20), task.get("n", 8))
        sample = functools.partial(tk.gen_copy, tcfg)
    elif kind == "similarity":
        tcfg = tk.SimConfig(task.get("T", 20), task.get("m", 4), task.get("n", 8))
        sample = functools.partial(tk.gen_sim, tcfg)
    else:
        raise ConfigError("gen supports copy and similarity tasks only")
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"{kind}.jsonl"
    with path.open("w") as fh:
        fh.write(json.dumps({"header": True, "seed": seed, "config": cfg}) + "\n")
        for _ in range(cfg["count"]):
            fh.write(sample(rng).to_json() + "\n")
    print(f"wrote {cfg['count']} samples to {path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# fetch-mnist


def _md5(path: Path) -> str:
    return hashlib.md5(path.read_bytes()).hexdigest()


def cmd_fetch_mnist(dest: Path, mirrors=MNIST_MIRRORS, opener=urllib.request.urlopen) -> int:
    """Download missing or corrupt archives; a file whose digest matches is left alone."""
    dest.mkdir(parents=True, exist_ok=True)
    for name, digest in tk.MNIST_FILES.values():
        target = dest / name
        if target.is_file() and _md5(target) == digest:
            print(f"{name}: ok")
            continue
        payload = None
        errors = []
        for base in mirrors:
            try:
                with opener(base + name, timeout=60) as resp:
                    payload = resp.read()
                break
            except (urllib.error.URLError, OSError) as exc:
                errors.append(f"{base}: {exc}")
        if payload is None:
            print(f"{name}: download failed\n  " + "\n  ".join(errors), file=sys.stderr)
            return EXIT_NETWORK
        if hashlib.md5(payload).hexdigest() != digest:
            print(f"{name}: checksum mismatch", file=sys.stderr)
            return EXIT_CHECKSUM
        target.write_bytes(payload)
        print(f"{name}: downloaded")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point


SUBCOMMANDS = {
    "verify": "run rank and combinatorics verification suites",
    "train": "train one architecture on one task",
    "frontier": "sweep architectures over a hardness grid",
    "gen": "write a synthetic task dataset as JSON lines",
    "fetch-mnist": "download and checksum the MNIST IDX files",
    "list": "list subcommands and verification checks",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="deepmem", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in SUBCOMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", type=Path, help="JSON config file")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--jobs", type=int, default=1, help="worker processes")
        p.add_argument("--out", type=Path, help="output directory")
        p.add_argument("--list", action="store_true", help="list available checks and exit")
    return parser


def _print_listing() -> None:
    print("subcommands:")
    for name, text in SUBCOMMANDS.items():
        print(f"  {name:12s} {text}")
    print("checks:")
    for name in CHECKS:
        print(f"  {name}")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.list or args.command == "list":
        if args.command == "verify":
            print("\n".join(CHECKS))
        else:
            _print_listing()
        return EXIT_OK
    out = args.out or Path("out")
    try:
        if args.command == "fetch-mnist":
            cfg = load_config(args.config, FETCH_SCHEMA, {"version": CONFIG_VERSION})
            return cmd_fetch_mnist(args.out or tk.default_data_dir(cfg.get("dest")))
        if args.command == "verify":
            cfg = load_config(args.config, VERIFY_SCHEMA, DEFAULT_VERIFY)
        elif args.config is None:
            raise ConfigError(f"{args.command} needs --config")
        else:
            schema = {"train": TRAIN_SCHEMA, "frontier": FRONTIER_SCHEMA, "gen": GEN_SCHEMA}[args.command]
            cfg = load_config(args.config, schema)
        if args.seed is not None:
            cfg["seed"] = args.seed
        cfg.setdefault("seed", 0)
        if args.command == "verify":
            return cmd_verify(cfg, out)
        if args.command == "train":
            return cmd_train(cfg, out)
        if args.command == "frontier":
            return cmd_frontier(cfg, out, args.jobs)
        return cmd_gen(cfg, out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except tn.CapExceeded as exc:
        print(f"cap exceeded: {exc}", file=sys.stderr)
        return EXIT_CAP
    except tk.IdxFormatError as exc:
        print(f"unreadable dataset: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:  # invalid task parameters surface from constructors
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except tk.DataMissing as exc:
        print(f"data missing: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
