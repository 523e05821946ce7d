"""Command-line entry point: one-shot routing, verification suites, training.

Subcommands
-----------
route      route a score matrix from CSV and write the mask/gates/plan
verify     run a seeded verification suite, report JSON, exit 1 on failure
gradcheck  shorthand for the gradient-checking suite
train      train one routing mode on the synthetic bench and emit curves
compare    train all three modes at a matched budget and emit aligned curves
report     re-emit curves and charts from stored run-report JSON files

Shared flags: ``--seed``, ``--out <dir>``, ``--config <file>``.  A config
file is a JSON object of flag names; explicit command-line flags override
it.  Every output directory is self-describing: it receives a
``resolved_config.json`` carrying the fully-merged invocation, the seed,
and the package version.  Exit codes: 0 success, 1 property failure
(counterexample files written), 2 usage error or unreadable input.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .numerics import Rng
from .moe_layer import init_params
from .reporting import emit_plots
from .routing import RoutingBudget, route_expert_choice, route_token_choice, route_unified
from .scoring import CompatibilityMatrix
from .suites import DEFAULT_INSTANCES, SUITES, run_suite
from .train_harness import (
    DivergenceError,
    RunReport,
    TrainConfig,
    compare_modes,
    make_task,
    matched_budget_configs,
    train,
)

_MODE_ALIASES = {
    "tc": "token_choice",
    "token_choice": "token_choice",
    "ec": "expert_choice",
    "expert_choice": "expert_choice",
    "usmoe": "usmoe",
}


class UsageError(Exception):
    """Bad flag combination or unreadable input; exits with code 2."""


def _parse_mode(text: str) -> str:
    try:
        return _MODE_ALIASES[text]
    except KeyError:
        raise UsageError(f"unknown mode {text!r}; choose from {sorted(_MODE_ALIASES)}")


def _parse_budget(text: str) -> tuple[str, float]:
    """Return ("fractional", value) for "1.5x" syntax, else ("count", int)."""
    text = str(text)
    if text.endswith("x"):
        try:
            return "fractional", float(text[:-1])
        except ValueError:
            raise UsageError(f"bad fractional budget {text!r}; expected e.g. '1.5x'")
    try:
        return "count", int(text)
    except ValueError:
        raise UsageError(f"bad budget {text!r}; expected an integer or '<float>x'")


def _load_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config file {path}: {exc}")
    if not isinstance(doc, dict):
        raise UsageError(f"config file {path} must hold a JSON object")
    return doc


def _merge(args: argparse.Namespace, defaults: dict) -> dict:
    """Flags beat the config file, the config file beats built-in defaults."""
    file_values = _load_config_file(args.config)
    unknown = set(file_values) - set(defaults)
    if unknown:
        raise UsageError(f"config file sets unknown keys: {sorted(unknown)}")
    resolved = dict(defaults)
    resolved.update(file_values)
    for key in defaults:
        flag_value = getattr(args, key, None)
        if flag_value is not None:
            resolved[key] = flag_value
    return resolved


def _echo(resolved: dict) -> dict:
    """The invocation as written to disk: everything that shapes the output.

    The output directory and config-file path are dropped — they say where
    the artifacts went, not what they contain, and keeping them would make
    otherwise-identical runs into different bytes.
    """
    return {k: v for k, v in resolved.items() if k not in ("out", "config")}


def _stamp(out_dir: Path, resolved: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    doc = {"version": __version__, **_echo(resolved)}
    (out_dir / "resolved_config.json").write_text(
        json.dumps(doc, sort_keys=True, indent=1) + "\n", encoding="utf-8", newline=""
    )


def _read_matrix(path: str) -> np.ndarray:
    try:
        m = np.loadtxt(path, delimiter=",", ndmin=2, dtype=np.float64)
    except (OSError, ValueError) as exc:
        raise UsageError(f"cannot read score matrix {path}: {exc}")
    if m.size == 0:
        raise UsageError(f"score matrix {path} is empty")
    return m


def _write_csv(path: Path, matrix: np.ndarray, fmt) -> None:
    lines = [",".join(fmt(v) for v in row) for row in matrix]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8", newline="")


def _cmd_route(args: argparse.Namespace) -> int:
    resolved = _merge(
        args, {"scores": None, "mode": "usmoe", "budget": "1", "seed": 0, "out": None}
    )
    if resolved["scores"] is None:
        raise UsageError("route needs --scores <csv file>")
    if resolved["out"] is None:
        raise UsageError("route needs --out <dir>")
    mode = _parse_mode(resolved["mode"])
    kind, value = _parse_budget(resolved["budget"])
    matrix = CompatibilityMatrix(_read_matrix(resolved["scores"]), "raw_logits")
    try:
        if mode == "token_choice":
            if kind == "fractional":
                raise UsageError("token choice takes an integer per-token k")
            plan = route_token_choice(matrix, int(value))
        elif mode == "expert_choice":
            if kind == "fractional":
                raise UsageError("expert choice takes an integer per-expert cap")
            plan = route_expert_choice(matrix, int(value))
        else:
            budget = (
                RoutingBudget.fractional(value)
                if kind == "fractional"
                else RoutingBudget.global_pairs(int(value))
            )
            plan = route_unified(matrix, budget)
    except ValueError as exc:
        raise UsageError(str(exc))

    out = Path(resolved["out"])
    _stamp(out, {"subcommand": "route", **resolved})
    _write_csv(out / "mask.csv", plan.mask, lambda v: str(int(v)))
    _write_csv(out / "gates.csv", plan.gates, lambda v: repr(float(v)))
    pairs = [[int(t), int(j)] for t, j in zip(*np.nonzero(plan.mask))]
    doc = {
        "mode": plan.mode,
        "gate_basis": plan.gate_basis,
        "budget_used": plan.budget_used,
        "selected_pairs": pairs,
    }
    (out / "plan.json").write_text(
        json.dumps(doc, sort_keys=True, indent=1) + "\n", encoding="utf-8", newline=""
    )
    print(f"routed {matrix.scores.shape[0]}x{matrix.scores.shape[1]} matrix: "
          f"{plan.budget_used} pairs -> {out}")
    return 0


def _run_suite_command(default_suite: str | None, args: argparse.Namespace) -> int:
    resolved = _merge(
        args, {"suite": default_suite, "instances": None, "seed": 0, "out": None}
    )
    name = resolved["suite"]
    if name is None:
        raise UsageError(f"verify needs --suite <name>; choose from {sorted(SUITES)}")
    if name not in SUITES:
        raise UsageError(f"unknown suite {name!r}; choose from {sorted(SUITES)}")
    instances = resolved["instances"]
    result = run_suite(name, instances=instances, seed=int(resolved["seed"]))
    doc = result.to_doc()
    print(json.dumps(doc, sort_keys=True, indent=1))
    out = resolved["out"]
    if out is None and not result.passed:
        out = f"moelab-verify-failures/{name}"
    if out is not None:
        out_dir = Path(out)
        _stamp(out_dir, {"subcommand": "verify", **resolved, "instances": result.instances})
        (out_dir / f"verify_{name}.json").write_text(
            json.dumps(doc, sort_keys=True, indent=1) + "\n", encoding="utf-8", newline=""
        )
        for idx, payload in enumerate(result.counterexamples):
            (out_dir / f"counterexample_{name}_{idx}.json").write_text(
                json.dumps(payload, sort_keys=True, indent=1) + "\n",
                encoding="utf-8",
                newline="",
            )
    if not result.passed:
        print(f"suite {name}: {result.failures}/{result.instances} instances failed",
              file=sys.stderr)
        return 1
    return 0


def _cmd_verify(args: argparse.Namespace) -> int:
    return _run_suite_command(None, args)


def _cmd_gradcheck(args: argparse.Namespace) -> int:
    return _run_suite_command("gradcheck", args)


def _base_config(resolved: dict, mode: str, budget: RoutingBudget) -> TrainConfig:
    seed = int(resolved["seed"])
    return TrainConfig(
        mode=mode,
        budget=budget,
        alpha=float(resolved["alpha"]),
        learning_rate=float(resolved["lr"]),
        steps=int(resolved["steps"]),
        seed=seed,
        model_seed=seed,
    )


_TRAIN_DEFAULTS = {
    "mode": "usmoe",
    "budget": "2",
    "steps": 200,
    "alpha": 0.5,
    "lr": 0.05,
    "corrupt_fraction": 0.0,
    "seed": 0,
    "out": None,
}


def _cmd_train(args: argparse.Namespace) -> int:
    resolved = _merge(args, _TRAIN_DEFAULTS)
    if resolved["out"] is None:
        raise UsageError("train needs --out <dir>")
    mode = _parse_mode(resolved["mode"])
    kind, value = _parse_budget(resolved["budget"])
    if kind == "fractional":
        if mode != "usmoe":
            raise UsageError("fractional budgets require the global mechanism")
        budget = RoutingBudget.fractional(value)
    else:
        budget = RoutingBudget.per_token(int(value))
    task = make_task(corrupt_fraction=float(resolved["corrupt_fraction"]),
                     seed=int(resolved["seed"]))
    cfg = _base_config(resolved, mode, budget)
    model = init_params(
        task.dim, cfg.d_ff, cfg.num_experts, Rng(cfg.model_seed), cfg.activation,
        cfg.router_init_std,
    )
    try:
        report, _ = train(task, model, cfg)
    except DivergenceError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return 1
    out = Path(resolved["out"])
    emit_plots(report, out, {"subcommand": "train", **_echo(resolved)})
    print(f"{mode}: final eval loss {report.final_eval_loss:.6f} -> {out}")
    return 0


def _cmd_compare(args: argparse.Namespace) -> int:
    resolved = _merge(args, _TRAIN_DEFAULTS)
    if resolved["out"] is None:
        raise UsageError("compare needs --out <dir>")
    kind, value = _parse_budget(resolved["budget"])
    if kind == "fractional":
        raise UsageError("compare needs an integer per-token budget to match mechanisms")
    task = make_task(corrupt_fraction=float(resolved["corrupt_fraction"]),
                     seed=int(resolved["seed"]))
    base = _base_config(resolved, "usmoe", RoutingBudget.per_token(int(value)))
    cfgs = matched_budget_configs(base, int(value))
    try:
        reports = compare_modes(task, cfgs)
    except DivergenceError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return 1
    out = Path(resolved["out"])
    emit_plots(reports, out, {"subcommand": "compare", **_echo(resolved)})
    for label, report in reports.items():
        print(f"{label}: final eval loss {report.final_eval_loss:.6f}")
    print(f"artifacts -> {out}")
    return 0


def _cmd_report(args: argparse.Namespace) -> int:
    resolved = _merge(args, {"reports": None, "seed": 0, "out": None})
    if not resolved["reports"]:
        raise UsageError("report needs --reports <file> [<file> ...]")
    if resolved["out"] is None:
        raise UsageError("report needs --out <dir>")
    loaded: dict[str, RunReport] = {}
    for path in resolved["reports"]:
        try:
            report = RunReport.from_json(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError, KeyError, TypeError) as exc:
            raise UsageError(f"cannot read run report {path}: {exc}")
        if report.mode in loaded:
            raise UsageError(f"two reports share the label {report.mode!r}")
        loaded[report.mode] = report
    emit_plots(loaded, Path(resolved["out"]), {"subcommand": "report", **_echo(resolved)})
    print(f"re-emitted {len(loaded)} report(s) -> {resolved['out']}")
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="moelab",
        description="Sparse mixture-of-experts routing laboratory",
    )
    parser.add_argument("--version", action="version", version=f"moelab {__version__}")
    sub = parser.add_subparsers(dest="subcommand")

    def shared(p: argparse.ArgumentParser) -> None:
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--config", default=None, help="JSON file of flag defaults")

    p = sub.add_parser("route", help="route a CSV score matrix once")
    p.add_argument("--scores", default=None, help="CSV file holding the T x N matrix")
    p.add_argument("--mode", default=None, help="tc | ec | usmoe")
    p.add_argument("--budget", default=None, help="integer, or '<float>x' for fractional")
    shared(p)

    p = sub.add_parser("verify", help="run a seeded verification suite")
    p.add_argument("--suite", default=None, help=" | ".join(sorted(SUITES)))
    p.add_argument("--instances", type=int, default=None,
                   help=f"instance count (defaults: {DEFAULT_INSTANCES})")
    shared(p)

    p = sub.add_parser("gradcheck", help="run the gradient-checking suite")
    p.add_argument("--instances", type=int, default=None)
    shared(p)

    for name in ("train", "compare"):
        p = sub.add_parser(name, help=f"{name} on the synthetic bench")
        if name == "train":
            p.add_argument("--mode", default=None, help="tc | ec | usmoe")
        p.add_argument("--budget", default=None,
                       help="experts per token; '<float>x' fractional (train+usmoe only)")
        p.add_argument("--steps", type=int, default=None)
        p.add_argument("--alpha", type=float, default=None)
        p.add_argument("--lr", type=float, default=None)
        p.add_argument("--corrupt-fraction", dest="corrupt_fraction", type=float,
                       default=None)
        shared(p)

    p = sub.add_parser("report", help="re-emit artifacts from run-report JSON")
    p.add_argument("--reports", nargs="+", default=None, help="run-report JSON files")
    shared(p)

    return parser


_COMMANDS = {
    "route": _cmd_route,
    "verify": _cmd_verify,
    "gradcheck": _cmd_gradcheck,
    "train": _cmd_train,
    "compare": _cmd_compare,
    "report": _cmd_report,
}


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.subcommand is None:
        parser.print_usage(sys.stderr)
        return 2
    try:
        return _COMMANDS[args.subcommand](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
