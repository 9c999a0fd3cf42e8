"""demoforge: quality-aware curation and post-training on mixed-quality demonstrations.

Exit codes: 0 success, 1 other pipeline error, 2 config error, 3 stage-order
error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .config import load_config
from .errors import ConfigError, DemoforgeError, NumericalError, StageOrderViolation
from .pipeline import (Workspace, curate, curation_report, format_table, gen_corpus, run_eval, run_logpi,
                       run_posttrain, run_pretrain, run_score, run_train_disc)

EXIT_OK, EXIT_ERROR, EXIT_CONFIG, EXIT_STAGE, EXIT_NUMERIC = 0, 1, 2, 3, 4


def _workspace(args) -> Workspace:
    root = Path(args.workdir)
    if args.config is not None:
        path = Path(args.config)
        path = path if path.is_absolute() else root / path
        if not path.exists():
            raise ConfigError(f"{path}: no such config file")
    else:
        path = root / "config.json"
        path = path if path.exists() else None
    return Workspace(root, load_config(path))


def cmd_gen_corpus(args) -> None:
    info = gen_corpus(_workspace(args), args.force)
    print(f"generated {info['n_real']} real and {info['n_sim']} sim episodes in {args.workdir}")


def cmd_curate(args) -> None:
    print(curation_report(curate(_workspace(args), args.force)))


def cmd_pretrain(args) -> None:
    print(json.dumps(run_pretrain(_workspace(args), args.force)))


def cmd_logpi(args) -> None:
    print(json.dumps(run_logpi(_workspace(args), args.force)))


def cmd_train_disc(args) -> None:
    print(json.dumps(run_train_disc(_workspace(args), args.force)))


def cmd_score(args) -> None:
    print(json.dumps(run_score(_workspace(args), args.force)))


def cmd_posttrain(args) -> None:
    print(json.dumps(run_posttrain(_workspace(args), weighted=not args.no_weights, force=args.force)))


def cmd_eval(args) -> None:
    ws = _workspace(args)
    rows = run_eval(ws, rollouts=args.rollouts, arms=args.arms, tasks=args.tasks, plots=args.plots,
                    force=args.force)
    print(format_table(rows))
    print(f"report: {ws.reports / 'eval.jsonl'}")


def cmd_run(args) -> None:
    from .pipeline import run_all
    print(format_table(run_all(_workspace(args), force=args.force)))


def cmd_experiment(args) -> None:
    from .experiments import ablation, scaling, separation
    ws = _workspace(args)
    seeds = [int(s) for s in args.seeds.split(",")]
    if args.name == "separation":
        res = separation(ws)
        print(f"true labels      held-out AUC clean vs heavy_jitter {res.auc:.3f}  "
              f"({res.n_clean} vs {res.n_corrupted} clips, trained in {res.elapsed_s:.0f} s)")
        res = separation(ws, permutations=args.permutations)
        print(f"shuffled labels  mean AUC over {len(res.aucs)} permutations {res.auc:.3f}  "
              f"(range {min(res.aucs):.3f}..{max(res.aucs):.3f})")
    elif args.name == "ablation":
        res = ablation(ws.cfg, ws.root, seeds, force=args.force)
        print(format_table([{**r, "arm": f"{r['arm']}/s{r['seed']}"} for r in res.rows]))
        print(f"weighted beats vanilla in {sum(res.seed_wins.values())} of {len(seeds)} seeds "
              f"({res.elapsed_s / 60:.1f} min)")
    else:
        res = scaling(ws.cfg, ws.root, seeds, rollouts=args.rollouts)
        for r in res.rows:
            print(f"seed {r['seed']}  {r['fraction']:>4.0%}  {r['task']:<14} success {r['success_rate']:.2f}")
        print("non-decreasing success:", {f"s{s}/{t}": ok for (s, t), ok in res.monotone.items()})


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="demoforge", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"demoforge {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--workdir", default=".", help="root of all inputs and outputs (default: .)")
    common.add_argument("--config", default=None, help="YAML/JSON config, relative to the workdir")
    common.add_argument("--force", action="store_true", help="redo a stage whose outputs exist")
    common.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", required=True)
    for name, fn, help_ in (
        ("gen-corpus", cmd_gen_corpus, "generate the real and sim demo corpora and a fresh manifest"),
        ("curate", cmd_curate, "metrics, pre-screen and replay validation"),
        ("pretrain", cmd_pretrain, "train the diffusion policy on the sim corpus"),
        ("compute-logpi", cmd_logpi, "denoising-energy log-pi proxies from the pretrained policy"),
        ("train-disc", cmd_train_disc, "positive-unlabeled training of the quality discriminator"),
        ("score", cmd_score, "score every real clip and store weights in the manifest"),
        ("run", cmd_run, "every stage, both post-training arms and the evaluation"),
    ):
        sp = sub.add_parser(name, parents=[common], help=help_)
        sp.set_defaults(fn=fn)
    sp = sub.add_parser("posttrain", parents=[common], help="post-train on the real corpus")
    sp.add_argument("--no-weights", action="store_true", help="uniform weights (the vanilla arm)")
    sp.set_defaults(fn=cmd_posttrain)
    sp = sub.add_parser("eval", parents=[common], help="closed-loop rollouts of every trained arm")
    sp.add_argument("--rollouts", type=int, default=None, help="rollouts per task (config default: 20)")
    sp.add_argument("--arms", nargs="+", default=None, choices=["pretrained", "vanilla", "weighted"])
    sp.add_argument("--tasks", nargs="+", default=None)
    sp.add_argument("--plots", action="store_true", help="also write static PNG bar charts")
    sp.set_defaults(fn=cmd_eval)
    sp = sub.add_parser("experiment", parents=[common], help="discriminator separation, ablation or data scaling")
    sp.add_argument("name", choices=["separation", "ablation", "scaling"])
    sp.add_argument("--seeds", default="0,1,2")
    sp.add_argument("--rollouts", type=int, default=None)
    sp.add_argument("--permutations", type=int, default=30, help="label shuffles of the separation control")
    sp.set_defaults(fn=cmd_experiment)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StageOrderViolation as exc:
        print(f"stage order: {exc}", file=sys.stderr)
        return EXIT_STAGE
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except DemoforgeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
