#!/usr/bin/env python3
"""
tnorm-shield command line.

Subcommands: compile, toygen, train, calibrate, attack, sweep, eval. Every
subcommand reads the experiment config (``--config``, YAML) with optional
``--set section.key=value`` overrides. Tabular outputs are CSV, traces are
JSON lines; without ``--out`` they go to stdout.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

from shield.attack import ALPHA_GRID, attack_dataset, select_alpha, write_trace_jsonl
from shield.compiler import CompiledKnowledge, compile_knowledge, to_sexpr
from shield.defense import calibrate_tau, load_rule, pairing_score, save_rule
from shield.errors import ShieldError
from shield.knowledge import (
    bind_predicates,
    format_weighted,
    parse_knowledge_file,
    read_class_names,
    restrict_knowledge,
)
from shield.logs import log_event
from shield.net import Model, init_model, load_model, save_model
from shield.training import (
    Dataset,
    Split,
    read_dataset_csv,
    select_lambda,
    train,
    write_dataset_csv,
    write_history_csv,
)

from .config import ExperimentConfig, load_config
from .evaluation import (
    classification_quality,
    rejection_curve,
    sweep,
    write_rejection_curve_csv,
    write_sweep_csv,
)
from .toy import gen_toy


def _emit(text: str, out: Optional[str]) -> None:
    if out is None:
        sys.stdout.write(text)
    else:
        Path(out).write_text(text, encoding="utf-8")


def _load_knowledge(
    cfg: ExperimentConfig, class_names: Optional[Sequence[str]]
) -> CompiledKnowledge:
    base = parse_knowledge_file(Path(cfg.knowledge.path).read_text(encoding="utf-8"))
    if cfg.knowledge.drop:
        base = restrict_knowledge(base, cfg.knowledge.drop)
    if class_names is None and cfg.knowledge.classes:
        class_names = read_class_names(Path(cfg.knowledge.classes).read_text(encoding="utf-8"))
    if class_names is None:
        class_names = base.predicates()
    return compile_knowledge(bind_predicates(base, class_names, cfg.knowledge.main))


def _read_dataset(path: str, split: Split) -> Dataset:
    return read_dataset_csv(Path(path).read_text(encoding="utf-8"), split)


def _new_model(cfg: ExperimentConfig, d: int, c: int, seed: int) -> Model:
    return init_model([d, *cfg.model.hidden, c], cfg.model.activation, seed)


def cmd_compile(cfg: ExperimentConfig, args: argparse.Namespace) -> None:
    compiled = _load_knowledge(cfg, None)
    base = compiled.bound.base
    lines = [
        f"# classes: {' '.join(compiled.bound.class_names)}",
        f"# gamma_train={base.gamma_train!r} gamma_test={base.gamma_test!r}",
    ]
    for h, (wf, program) in enumerate(zip(base.formulas, compiled.programs)):
        lines.append(f"[{h}] {format_weighted(wf)}")
        lines.append(f"    {to_sexpr(program)}")
    _emit("\n".join(lines) + "\n", args.out)


def cmd_toygen(cfg: ExperimentConfig, args: argparse.Namespace) -> None:
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for name, data in zip(("train", "val", "test"), gen_toy(cfg.toy)):
        path = out_dir / f"{name}.csv"
        path.write_text(write_dataset_csv(data), encoding="utf-8")
        print(f"{name}: {data.n} samples -> {path}")


def cmd_train(cfg: ExperimentConfig, args: argparse.Namespace) -> None:
    train_set = _read_dataset(args.train, Split.TRAIN)
    val_set = _read_dataset(args.val, Split.VALIDATION)
    compiled = _load_knowledge(cfg, train_set.class_names)
    seed = cfg.model.surrogate_seed if args.surrogate else cfg.model.seed

    def factory() -> Model:
        return _new_model(cfg, train_set.d, train_set.c, seed)

    if args.select_lambda:
        selection = select_lambda(factory, train_set, val_set, compiled, cfg.train)
        model, history = selection.model, selection.history
        for (lam, score), (_, closs) in zip(selection.scores, selection.constraint_losses):
            print(f"lambda={lam!r} val_f1={score!r} val_closs={closs!r}")
        print(f"selected lambda={selection.best_lambda!r}")
    else:
        model, history = train(factory(), train_set, val_set, compiled, cfg.train)
    save_model(model, args.out)
    if args.history:
        Path(args.history).write_text(write_history_csv(history), encoding="utf-8")
    print(f"best epoch: {history.best_epoch}; model -> {args.out}")


def cmd_calibrate(cfg: ExperimentConfig, args: argparse.Namespace) -> None:
    model = load_model(args.model)
    val_set = _read_dataset(args.val, Split.VALIDATION)
    compiled = _load_knowledge(cfg, val_set.class_names)
    rule = calibrate_tau(model, val_set, compiled, cfg.defense.target_rate)
    save_rule(rule, args.out)
    print(json.dumps({"tau": rule.tau, "reject_rate": rule.calibration_reject_rate}))


def cmd_attack(cfg: ExperimentConfig, args: argparse.Namespace) -> None:
    model = load_model(args.model)
    data = _read_dataset(args.data, Split.TEST)
    compiled = _load_knowledge(cfg, data.class_names)
    rule = load_rule(args.rule, compiled) if args.rule else None
    surrogate = load_model(args.surrogate) if args.surrogate else None
    if args.select_alpha:
        grid = cfg.sweep.alpha_grid or ALPHA_GRID
        selection = select_alpha(model, data, compiled, cfg.attack, rule, grid, surrogate)
        adversarial, results = selection.adversarial, list(selection.results)
        for alpha, success, measure in selection.scores:
            print(f"alpha={alpha!r} success={success!r} measure={measure!r}", file=sys.stderr)
        print(f"selected alpha={selection.best_alpha!r}", file=sys.stderr)
    else:
        adversarial, results = attack_dataset(model, data, compiled, cfg.attack, rule, surrogate)
    _emit(write_dataset_csv(adversarial), args.out)
    if args.trace:
        Path(args.trace).write_text(write_trace_jsonl(results), encoding="utf-8")


def cmd_sweep(cfg: ExperimentConfig, args: argparse.Namespace) -> None:
    model = load_model(args.model)
    data = _read_dataset(args.data, Split.TEST)
    compiled = _load_knowledge(cfg, data.class_names)
    rule = load_rule(args.rule, compiled)
    surrogate = load_model(args.surrogate) if args.surrogate else None
    zeta = None
    if args.pairing_data:
        reference = _read_dataset(args.pairing_data, Split.TRAIN)
        zeta = pairing_score(model, reference, compiled, cfg.defense.pairing)
    reports = sweep(
        model,
        rule,
        compiled,
        data,
        cfg.sweep.epsilons,
        cfg.attack,
        surrogate=surrogate,
        primary_metric=cfg.sweep.primary_metric,
        pairing=zeta,
        alpha_grid=cfg.sweep.alpha_grid,
    )
    _emit(write_sweep_csv(reports), args.out)


def cmd_eval(cfg: ExperimentConfig, args: argparse.Namespace) -> None:
    model = load_model(args.model)
    clean = _read_dataset(args.clean, Split.TEST)
    adversarial = _read_dataset(args.adversarial, Split.TEST)
    compiled = _load_knowledge(cfg, clean.class_names)
    rule = load_rule(args.rule, compiled)
    report = classification_quality(
        model, rule, clean, adversarial, args.epsilon, cfg.sweep.primary_metric
    )
    print(report.model_dump_json())
    if args.curve_out:
        taus = cfg.sweep.taus or [rule.tau]
        points = rejection_curve(
            model, compiled, clean, adversarial, taus, cfg.sweep.primary_metric
        )
        Path(args.curve_out).write_text(write_rejection_curve_csv(points), encoding="utf-8")


COMMANDS: Dict[str, Callable[[ExperimentConfig, argparse.Namespace], None]] = {
    "compile": cmd_compile,
    "toygen": cmd_toygen,
    "train": cmd_train,
    "calibrate": cmd_calibrate,
    "attack": cmd_attack,
    "sweep": cmd_sweep,
    "eval": cmd_eval,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tnorm-shield", description=__doc__.splitlines()[1])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML experiment config")
    common.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="SECTION.KEY=VALUE",
        help="override a config key (repeatable)",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("compile", parents=[common], help="dump compiled constraints")
    p.add_argument("--out")

    p = sub.add_parser("toygen", parents=[common], help="generate the toy splits")
    p.add_argument("--out-dir", required=True)

    p = sub.add_parser("train", parents=[common], help="train a constrained classifier")
    p.add_argument("--train", required=True)
    p.add_argument("--val", required=True)
    p.add_argument("--out", required=True, help="model file to write")
    p.add_argument("--history", help="history CSV to write")
    p.add_argument("--select-lambda", action="store_true", help="search the lambda grid")
    p.add_argument("--surrogate", action="store_true", help="use the surrogate seed")

    p = sub.add_parser("calibrate", parents=[common], help="calibrate the rejection threshold")
    p.add_argument("--model", required=True)
    p.add_argument("--val", required=True)
    p.add_argument("--out", required=True, help="rule file to write")

    p = sub.add_parser("attack", parents=[common], help="attack every row of a dataset")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--rule")
    p.add_argument("--surrogate", help="attack this model and transfer to --model")
    p.add_argument("--out")
    p.add_argument("--trace", help="trace JSON-lines file to write")
    p.add_argument(
        "--select-alpha",
        action="store_true",
        help="search sweep.alpha_grid (or the default grid) for the strongest alpha",
    )

    p = sub.add_parser("sweep", parents=[common], help="quality as a function of epsilon")
    p.add_argument("--model", required=True)
    p.add_argument("--rule", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--surrogate")
    p.add_argument("--pairing-data", help="training CSV for the pairing diagnostic")
    p.add_argument("--out")

    p = sub.add_parser("eval", parents=[common], help="score clean vs adversarial data")
    p.add_argument("--model", required=True)
    p.add_argument("--rule", required=True)
    p.add_argument("--clean", required=True)
    p.add_argument("--adversarial", required=True)
    p.add_argument("--epsilon", type=float, required=True)
    p.add_argument("--curve-out", help="rejection-curve CSV to write")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    log_event("command_start", command=args.command)
    try:
        cfg = load_config(args.config, args.overrides)
        COMMANDS[args.command](cfg, args)
    except (ShieldError, OSError) as exc:
        print(f"ERROR: {exc}", file=sys.stderr)
        return 2
    log_event("command_finish", command=args.command)
    return 0


if __name__ == "__main__":
    sys.exit(main())
