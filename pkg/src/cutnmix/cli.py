"""Command-line front door: ``cutnmix {train,eval,ablate,plot,selftest}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import harness
from .harness import MODES, RunConfig

log = logging.getLogger("cutnmix")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON run config (partial configs are defaulted)")
    p.add_argument("--seed", type=int)
    p.add_argument("--dataset", choices=("synthetic", "cifar10", "cifar100"))
    p.add_argument("--arch")
    p.add_argument("--mode", choices=sorted(MODES))
    p.add_argument("--epochs", type=int)
    p.add_argument("--out", type=Path)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="cutnmix", description="Cut^nMix online distillation toolkit")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one run")
    _common(p)
    p.add_argument("--resume", action="store_true", help="continue from OUT/checkpoints/last.pt")

    p = sub.add_parser("eval", help="evaluate a finished run directory")
    p.add_argument("--out", type=Path, required=True, help="run directory")
    p.add_argument("--ensemble-rule", choices=("softmax", "logits"), default="softmax")

    p = sub.add_parser("ablate", help="component ablation over several seeds")
    _common(p)
    p.add_argument("--seeds", type=int, default=3, help="number of seeds, starting at --seed (default 0)")

    p = sub.add_parser("plot", help="accuracy-vs-epoch curves with a std band over seeds")
    p.add_argument("runs", nargs="+", type=Path, help="run directories or roots containing them")
    p.add_argument("--out", type=Path, help="output directory (default: first path /plots)")
    p.add_argument("--peer", default="0", help='metrics row to plot: a peer index or "ensemble"/"teacher"')

    sub.add_parser("selftest", help="run the built-in oracle and invariant checks")
    return ap


def _resolve(args) -> RunConfig:
    base = harness.load_config(args.config) if args.config else RunConfig()
    return base.with_overrides(
        seed=args.seed, arch=args.arch, mode=args.mode, epochs=args.epochs, dataset=args.dataset,
        out=str(args.out) if args.out else None,
    )


def cmd_train(args) -> int:
    cfg = _resolve(args)
    if cfg.out is None:
        cfg = cfg.with_overrides(out=f"runs/{cfg.mode}-seed{cfg.seed}")
    res = harness.run(cfg, resume=args.resume)
    print(json.dumps({"out": cfg.out, "final_test_acc": harness.final_accuracies(res.history)}, indent=2))
    return 0


def cmd_eval(args) -> int:
    from .evaluation import evaluate, evaluate_ensemble, evaluate_teacher
    from .models import load_checkpoint, students_from_checkpoint

    cfg = harness.load_config(args.out / harness.CONFIG_NAME)
    _, test = harness.load_dataset(cfg.dataset)
    students, teacher = students_from_checkpoint(load_checkpoint(args.out / "checkpoints" / "last.pt"))
    result = {f"peer{j}": evaluate(s, test) for j, s in enumerate(students)}
    if len(students) > 1:
        result["ensemble"] = evaluate_ensemble(students, test, rule=args.ensemble_rule)
    if teacher is not None:
        result["teacher"] = evaluate_teacher(students, teacher, test)
    print(json.dumps(result, indent=2))
    return 0


def cmd_ablate(args) -> int:
    cfg = _resolve(args)
    out = Path(cfg.out or "runs/ablation")
    seeds = range(cfg.seed, cfg.seed + args.seeds)
    rows = harness.ablate(cfg, list(seeds), out)
    print(f"{'Cut^nMix':>8} {'MMD':>4} {'PT':>4}  accuracy")
    for r in rows:
        mark = lambda b: "x" if b else ""  # noqa: E731
        print(f"{mark(r['cutnmix']):>8} {mark(r['mmd']):>4} {mark(r['pt']):>4}  "
              f"{100 * r['mean_acc']:.2f} +- {100 * r['std_acc']:.2f}  ({r['mode']})")
    return 0


def cmd_plot(args) -> int:
    runs = harness.find_runs(args.runs)
    if not runs:
        raise FileNotFoundError(f"no run directories with {harness.METRICS_NAME} under {[str(p) for p in args.runs]}")
    out = args.out or args.runs[0] / "plots"
    for p in harness.plot_curves(runs, out, peer=args.peer):
        print(p)
    return 0


def cmd_selftest(args) -> int:
    from .selftest import run_all

    return 0 if run_all() else 1


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate, "plot": cmd_plot, "selftest": cmd_selftest}


def run_cli(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse: usage errors exit 2, --help exits 0
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except KeyboardInterrupt:
        print("interrupted", file=sys.stderr)
        return 130
    except Exception as exc:
        print(f"cutnmix {args.command}: error: {exc}", file=sys.stderr)
        log.debug("traceback", exc_info=True)
        return 1


def main() -> None:
    sys.exit(run_cli())
