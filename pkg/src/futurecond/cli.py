"""Command-line driver: dataset generation, training, evaluation, figure sweeps and checks.

Subcommands share ``--config PATH`` (YAML), repeatable ``--set key.path=value``
overrides, ``--out DIR``, ``--seeds LIST``, ``--deterministic`` and ``--jobs N``.
The effective configuration is written to ``<out>/config.yaml``.
"""
from __future__ import annotations

import argparse
import copy
import csv
import datetime
import logging
import sys
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import fields
from pathlib import Path
from typing import Callable, Iterable

import numpy as np
import yaml

from . import datasets as ds
from .environments import (
    ENVIRONMENTS,
    Environment,
    constant_policy,
    counterexample_env,
    counterexample_episodes,
    load_layout,
    make_env,
    uniform_policy,
)
from .inference import (
    EVAL_FIELDS,
    EvalReport,
    consistency_suite,
    counterexample_check,
    evaluate,
    max_consistency_gap,
    _fmt,
)
from .models import load_checkpoint, save_checkpoint
from .objectives import LossReport, TrainConfig, TrainingDivergedError, train
from .plotting import line_plot

log = logging.getLogger("futurecond")

EXIT_OK, EXIT_FAILED, EXIT_USAGE = 0, 1, 2

DEFAULT_CONFIG = {
    "env": {"name": "bandit", "p": 0.1},
    "dataset": {"behavior": "bandit", "n": 1000, "epsilon": 0.7, "plan": {}},
    "methods": ["doc"],
    "train": {"steps": 3000},
    "method_overrides": {"vae": {"beta": 0.1}, "dt": {"method": "rcsl"},
                         "bc": {"method": "pct-bc", "percentile": 1.0}},
    "eval": {"K": 256, "n_rollouts": 10000, "support_tol": 1e-3, "target_return": {}},
    "seeds": [0],
}

FIGURES = {
    "bandit": {
        "p_grid": [0.1, 0.2, 0.3, 0.4, 0.5],
        "methods": ["doc", "rcsl", "pct-bc", "vae"],
        "n": 1000,
        "seeds": [0, 1, 2, 3, 4],
        "train": {"steps": 3000},
        "method_overrides": {"vae": {"beta": 0.1}},
        "eval": {"K": 256, "n_rollouts": 10000, "target_return": {"rcsl": 1.0}},
    },
    "frozenlake": {
        "p_grid": [1 / 3, 0.5, 0.7, 0.9],
        "epsilons": [0.3, 0.5, 0.7],
        "methods": ["doc", "dt", "vae", "bc"],
        "n": 200,
        "horizon": 20,
        "plan_p": 1 / 3,
        "seeds": [0, 1, 2, 3, 4],
        "train": {"steps": 1500},
        "method_overrides": {"vae": {"beta": 0.1}, "dt": {"method": "rcsl"},
                             "bc": {"method": "pct-bc", "percentile": 1.0}},
        "eval": {"K": 256, "n_rollouts": 1000, "target_return": {"dt": 1.0}},
    },
    "toytree": {
        "n": 10000,
        "methods": ["doc", "rcsl"],
        "seeds": [0, 1, 2, 3, 4],
        "train": {"steps": 3000},
        "method_overrides": {},
        "eval": {"K": 256, "n_rollouts": 10000, "target_return": {"rcsl": 100.0}},
    },
    "counterexample": {},
}


class UsageError(Exception):
    pass


# -- configuration ---------------------------------------------------------


def _deep_update(base: dict, update: dict) -> dict:
    for k, v in update.items():
        if isinstance(v, dict) and isinstance(base.get(k), dict):
            _deep_update(base[k], v)
        else:
            base[k] = v
    return base


def apply_set(config: dict, assignment: str) -> None:
    """Apply one ``a.b.c=value`` override; the value is parsed as YAML."""
    if "=" not in assignment:
        raise UsageError(f"--set expects KEY=VALUE, got {assignment!r}")
    key, raw = assignment.split("=", 1)
    value = yaml.safe_load(raw) if raw.strip() else None
    node = config
    parts = key.strip().split(".")
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise UsageError(f"cannot set {key}: {part} is not a mapping")
    node[parts[-1]] = value


def parse_seeds(text: str) -> list[int]:
    """``"0,1,2"`` or ``"0-4"``."""
    seeds: list[int] = []
    for chunk in text.split(","):
        chunk = chunk.strip()
        if not chunk:
            continue
        if "-" in chunk[1:]:
            lo, hi = chunk.split("-", 1)
            seeds.extend(range(int(lo), int(hi) + 1))
        else:
            seeds.append(int(chunk))
    if not seeds:
        raise UsageError("seed list is empty")
    return seeds


def load_config(args, base: dict) -> dict:
    config = copy.deepcopy(base)
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise UsageError(f"config file not found: {path}")
        loaded = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
        if not isinstance(loaded, dict):
            raise UsageError(f"config file {path} must contain a mapping")
        _deep_update(config, loaded)
    for item in getattr(args, "set", None) or []:
        apply_set(config, item)
    if getattr(args, "seeds", None):
        config["seeds"] = parse_seeds(args.seeds)
    if not config.get("seeds"):
        raise UsageError("seeds list must be nonempty")
    return config


def echo_config(config: dict, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(yaml.safe_dump(config, sort_keys=True), encoding="utf-8")


_TRAIN_FIELDS = {f.name for f in fields(TrainConfig)}


def train_config(label: str, config: dict, seed: int) -> TrainConfig:
    """TrainConfig for a method label: shared ``train`` settings, then per-label overrides."""
    settings = dict(config.get("train", {}))
    settings.update(config.get("method_overrides", {}).get(label, {}))
    settings.setdefault("method", label)
    settings["seed"] = seed
    unknown = set(settings) - _TRAIN_FIELDS
    if unknown:
        raise UsageError(f"unknown training settings: {sorted(unknown)}")
    try:
        return TrainConfig(**settings)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def derive_seed(tag: str, *parts: float) -> int:
    """Stable per-cell seed from a tag and numeric coordinates."""
    entropy = [zlib.crc32(tag.encode())] + [int(round(x * 1_000_000)) for x in parts]
    return int(np.random.SeedSequence(entropy).generate_state(1)[0])


# -- environments and behaviours from config -------------------------------


def build_env(spec: dict) -> Environment:
    spec = dict(spec)
    name = spec.pop("name", None)
    if name is None:
        raise UsageError("env.name is required")
    if name not in ENVIRONMENTS:
        raise UsageError(f"unknown environment {name!r}; known: {', '.join(sorted(ENVIRONMENTS))}")
    if "layout_file" in spec:
        spec["layout"] = load_layout(spec.pop("layout_file"))
    try:
        return make_env(name, **spec)
    except TypeError as exc:
        raise UsageError(f"bad parameters for {name}: {exc}") from exc


def build_behavior(env: Environment, spec: dict, env_spec: dict):
    kind = spec.get("behavior", "uniform")
    if kind == "bandit":
        return ds.bandit_behavior(float(env_spec.get("p", env.params.get("p", 0.5)))), {"behavior": "bandit"}
    if kind == "uniform":
        return uniform_policy(env), {"behavior": "uniform"}
    if kind == "constant":
        return constant_policy(env, int(spec.get("action", 0))), {"behavior": "constant", "action": spec.get("action", 0)}
    if kind == "planner":
        eps = float(spec.get("epsilon", 0.0))
        plan_spec = {**env_spec, **(spec.get("plan") or {})}
        plan_env = build_env(plan_spec)
        meta = {"behavior": "planner", "epsilon": eps, "plan": {k: v for k, v in plan_spec.items()}}
        return ds.epsilon_mixed_planner(env, eps, plan_env=plan_env), meta
    raise UsageError(f"unknown behavior {kind!r}; expected bandit, uniform, constant or planner")


# -- csv helpers -----------------------------------------------------------


def write_train_log(history: list[LossReport], path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LossReport.CSV_FIELDS)
        for rep in history:
            w.writerow([rep.step] + [repr(float(v)) for v in rep.row()[1:]])


class RowWriter:
    """CSV writer with the evaluation schema that flushes after every row."""

    def __init__(self, path: Path, extra: Iterable[str] = ()):
        path.parent.mkdir(parents=True, exist_ok=True)
        self.fields = list(EVAL_FIELDS) + list(extra)
        self.fh = path.open("w", newline="", encoding="utf-8")
        self.writer = csv.DictWriter(self.fh, fieldnames=self.fields, lineterminator="\n", extrasaction="ignore")
        self.writer.writeheader()
        self.fh.flush()

    def write(self, row: dict) -> None:
        self.writer.writerow(_fmt({k: row.get(k) for k in self.fields}))
        self.fh.flush()

    def close(self) -> None:
        self.fh.close()


def _report_row(rep: EvalReport, label: str) -> dict:
    row = rep.row()
    row["method"] = label
    return row


# -- subcommands -----------------------------------------------------------


def _data_path(out: Path, seed: int) -> Path:
    return out / "data" / f"seed{seed}.jsonl"


def cmd_gen_data(args) -> int:
    config = load_config(args, DEFAULT_CONFIG)
    out = Path(args.out)
    echo_config(config, out)
    env = build_env(config["env"])
    env_params = {k: v for k, v in config["env"].items() if k != "name"}
    behavior, meta = build_behavior(env, config["dataset"], config["env"])
    for seed in config["seeds"]:
        d = ds.collect(env, behavior, int(config["dataset"]["n"]), seed, meta={**meta, "env": env.name, **env_params})
        path = ds.save(d, _data_path(out, seed))
        print(f"{path}\t{len(d)} trajectories\tfingerprint {d.env_fingerprint}")
    return EXIT_OK


def cmd_train(args) -> int:
    config = load_config(args, DEFAULT_CONFIG)
    out = Path(args.out)
    echo_config(config, out)
    for seed in config["seeds"]:
        path = Path(args.data) if args.data else _data_path(out, seed)
        if not path.exists():
            raise FileNotFoundError(f"dataset file not found: {path}")
        d = ds.load(path)
        for label in config["methods"]:
            tc = train_config(label, config, seed)
            result = train(None, d, tc)
            ckpt = save_checkpoint(result.bundle, out / "checkpoints" / f"{label}_seed{seed}.ckpt")
            write_train_log(result.log, out / "logs" / f"{label}_seed{seed}.csv")
            print(f"{ckpt}")
    return EXIT_OK


def cmd_eval(args) -> int:
    config = load_config(args, DEFAULT_CONFIG)
    out = Path(args.out)
    echo_config(config, out)
    env = build_env(config["env"])
    ev = config["eval"]
    targets = ev.get("target_return") or {}
    writer = RowWriter(out / "results.csv")
    try:
        for label in config["methods"]:
            rows = []
            for seed in config["seeds"]:
                ckpt = out / "checkpoints" / f"{label}_seed{seed}.ckpt"
                if not ckpt.exists():
                    raise FileNotFoundError(f"checkpoint not found: {ckpt}")
                bundle = load_checkpoint(ckpt)
                rep = evaluate(bundle, env, label, int(ev["n_rollouts"]), int(ev["K"]), seed,
                               targets.get(label), float(ev.get("support_tol", 1e-3)),
                               p=config["env"].get("p"),
                               epsilon=config["dataset"].get("epsilon") if config["dataset"].get("behavior") == "planner" else None)
                row = _report_row(rep, label)
                rows.append(row)
                writer.write(row)
            writer.write(_aggregate(rows, label))
    finally:
        writer.close()
    print(out / "results.csv")
    return EXIT_OK


def _aggregate(rows: list[dict], label: str) -> dict:
    """Across-seed mean of each numeric column; ``ci95`` carries the across-seed std of mean_return."""
    agg = {"method": label, "env": rows[0]["env"], "p": rows[0]["p"], "epsilon": rows[0]["epsilon"], "seed": "aggregate"}
    for key in ("v_selected", "mean_return", "exact_value", "gap"):
        vals = [r[key] for r in rows if r[key] is not None and np.isfinite(r[key])]
        agg[key] = float(np.mean(vals)) if vals else None
    agg["ci95"] = float(np.std([r["mean_return"] for r in rows]))
    return agg


# -- figure sweeps ---------------------------------------------------------


def _eval_cell(bundle, env, label, fig, seed, p, eps) -> dict:
    ev = fig["eval"]
    rep = evaluate(bundle, env, label, int(ev["n_rollouts"]), int(ev["K"]), seed,
                   (ev.get("target_return") or {}).get(label), float(ev.get("support_tol", 1e-3)), p=p, epsilon=eps)
    row = _report_row(rep, label)
    if bundle.kind == "tabular" and bundle.conditioning == "latent":
        row["max_gap"] = max_consistency_gap(bundle, env, float(ev.get("support_tol", 1e-3)))[0]
    return row


def bandit_cell(task: tuple) -> dict:
    fig, p, label, seed = task
    env = make_env("bandit", p=p)
    d = ds.collect(env, ds.bandit_behavior(p), int(fig["n"]), derive_seed("bandit", p, seed))
    bundle = train(None, d, train_config(label, fig, seed)).bundle
    return _eval_cell(bundle, env, label, fig, seed, p, None)


def frozenlake_cell(task: tuple) -> dict:
    fig, p, eps, label, seed = task
    env = make_env("frozenlake", p=p, horizon=int(fig["horizon"]))
    plan = make_env("frozenlake", p=float(fig["plan_p"]), horizon=int(fig["horizon"]))
    d = ds.collect(env, ds.epsilon_mixed_planner(env, eps, plan_env=plan), int(fig["n"]),
                   derive_seed("frozenlake", p, eps, seed))
    bundle = train(None, d, train_config(label, fig, seed)).bundle
    return _eval_cell(bundle, env, label, fig, seed, p, eps)


def toytree_cell(task: tuple) -> dict:
    fig, label, seed = task
    env = make_env("toytree")
    d = ds.collect(env, uniform_policy(env), int(fig["n"]), derive_seed("toytree", seed))
    bundle = train(None, d, train_config(label, fig, seed)).bundle
    return _eval_cell(bundle, env, label, fig, seed, None, None)


def _run_cells(fn: Callable, tasks: list, jobs: int, sink: Callable[[dict], None]) -> list[dict]:
    rows = []
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for row in pool.map(fn, tasks):
                sink(row)
                rows.append(row)
    else:
        for task in tasks:
            row = fn(task)
            sink(row)
            rows.append(row)
    return rows


def _mean_by(rows: list[dict], method: str, key: str, xs: list[float], xkey: str) -> list[float]:
    return [float(np.mean([r[key] for r in rows if r["method"] == method and r[xkey] == x])) for x in xs]


def _write_svg(path: Path, svg: str) -> None:
    path.write_text(svg, encoding="utf-8")
    print(path)


def cmd_reproduce(args) -> int:
    figure = args.figure
    fig = load_config(args, {**copy.deepcopy(FIGURES[figure]), "seeds": FIGURES[figure].get("seeds", [0])})
    out = Path(args.out)
    echo_config(fig, out)
    stamp = None if args.deterministic else datetime.datetime.now(datetime.timezone.utc).isoformat()
    jobs = max(1, int(args.jobs))

    if figure == "counterexample":
        return _reproduce_counterexample(out)

    writer = RowWriter(out / f"{figure}.csv", extra=("max_gap",))
    try:
        if figure == "bandit":
            tasks = [(fig, p, m, s) for p in fig["p_grid"] for m in fig["methods"] for s in fig["seeds"]]
            rows = _run_cells(bandit_cell, tasks, jobs, writer.write)
            for p in fig["p_grid"]:
                writer.write({"method": "bayes-optimal", "env": "bandit", "p": p, "mean_return": 1.0 - p,
                              "exact_value": 1.0 - p})
            xs = list(fig["p_grid"])
            series = {m: (xs, _mean_by(rows, m, "mean_return", xs, "p")) for m in fig["methods"]}
            _write_svg(out / "bandit.svg", line_plot(
                series, "Bernoulli bandit", "p", "average reward",
                reference=(xs, [1.0 - p for p in xs]), reference_label="Bayes-optimal", timestamp=stamp))
        elif figure == "frozenlake":
            tasks = [(fig, p, e, m, s) for e in fig["epsilons"] for p in fig["p_grid"]
                     for m in fig["methods"] for s in fig["seeds"]]
            rows = _run_cells(frozenlake_cell, tasks, jobs, writer.write)
            xs = list(fig["p_grid"])
            for e in fig["epsilons"]:
                sub = [r for r in rows if r["epsilon"] == e]
                series = {m: (xs, _mean_by(sub, m, "exact_value", xs, "p")) for m in fig["methods"]}
                _write_svg(out / f"frozenlake_eps{e:g}.svg", line_plot(
                    series, f"FrozenLake 4x4, epsilon={e:g}", "p", "average return", timestamp=stamp))
        elif figure == "toytree":
            tasks = [(fig, m, s) for m in fig["methods"] for s in fig["seeds"]]
            rows = _run_cells(toytree_cell, tasks, jobs, writer.write)
            xs = [float(s) for s in fig["seeds"]]
            series = {m: (xs, [r["exact_value"] for r in rows if r["method"] == m]) for m in fig["methods"]}
            _write_svg(out / "toytree.svg", line_plot(
                series, "Two-branch tree", "seed", "exact value of selected policy", timestamp=stamp))
    finally:
        writer.close()
    print(out / f"{figure}.csv")
    return EXIT_OK


def _reproduce_counterexample(out: Path) -> int:
    rep = counterexample_check()
    path = out / "counterexample.csv"
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["quantity", "value"])
        w.writerow(["pi(.|s0,z0)", rep.policy_s0_z0])
        w.writerow(["pi(.|s1,z0)", rep.policy_s1_z0])
        w.writerow(["Pr[tau2 | pi_z0, env]", rep.prob_tau2_under_policy])
        w.writerow(["Pr[tau2 | z0, data]", rep.prob_tau2_given_z0_in_data])
        w.writerow(["V(z0)", rep.value_z0])
        w.writerow(["V_env(pi_z0)", rep.exact_value_z0])
        w.writerow(["support contradiction", rep.support_contradiction])
    print(path)
    return EXIT_OK if not rep.failures() else EXIT_FAILED


def cmd_check(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ok = True
    lines = []
    rep = counterexample_check()
    for failure in rep.failures():
        ok = False
        lines.append(f"FAIL counterexample: {failure}")
    if not rep.failures():
        lines.append(
            f"PASS counterexample: pi(.|s0,z0)={rep.policy_s0_z0} Pr[tau2|pi_z0]={rep.prob_tau2_under_policy} "
            f"Pr[tau2|z0,data]={rep.prob_tau2_given_z0_in_data} gap(z0)={rep.gap_z0}"
        )
    for res in consistency_suite():
        ok &= res.ok
        lines.append(f"{'PASS' if res.ok else 'FAIL'} consistency[{res.name}]: max gap {res.max_gap:.3e} "
                     f"(tol {res.tol:g}), MI(r;z|h,s,a)={res.mi_reward:.3e}, MI(s';z|h,s,a)={res.mi_next_state:.3e}")
    env = counterexample_env()
    d = ds.literal_dataset(counterexample_episodes(), env)
    bundle = train("doc", d, TrainConfig(method="doc", steps=int(args.steps), seed=0)).bundle
    gap = max_consistency_gap(bundle, env)[0]
    ok &= gap <= 1e-6
    lines.append(f"{'PASS' if gap <= 1e-6 else 'FAIL'} trained DoC on counterexample: max gap {gap:.3e} (tol 1e-06)")
    (out / "check.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print("\n".join(lines))
    return EXIT_OK if ok else EXIT_FAILED


# -- entry point -----------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML config file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config field (repeatable)")
    common.add_argument("--out", default="runs/default", help="output directory")
    common.add_argument("--seeds", help="seed list, e.g. 0,1,2 or 0-4")
    common.add_argument("--deterministic", action="store_true", help="omit timestamps from SVG output")
    common.add_argument("--jobs", type=int, default=1, help="worker processes for sweeps")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="futurecond", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="collect offline datasets").set_defaults(fn=cmd_gen_data)
    p_train = sub.add_parser("train", parents=[common], help="train methods on a dataset")
    p_train.add_argument("--data", help="dataset file (default: <out>/data/seed<N>.jsonl)")
    p_train.set_defaults(fn=cmd_train)
    sub.add_parser("eval", parents=[common], help="evaluate checkpoints").set_defaults(fn=cmd_eval)
    p_rep = sub.add_parser("reproduce", parents=[common], help="run a figure sweep")
    p_rep.add_argument("figure", choices=sorted(FIGURES))
    p_rep.set_defaults(fn=cmd_reproduce)
    p_check = sub.add_parser("check", parents=[common], help="counter-example and consistency suites")
    p_check.add_argument("--steps", type=int, default=3000, help="training steps for the trained-model check")
    p_check.set_defaults(fn=cmd_check)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.fn(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FileNotFoundError, ds.DatasetError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILED
    except TrainingDivergedError as exc:
        print(f"error: training diverged at step {exc.step}: {exc}", file=sys.stderr)
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
