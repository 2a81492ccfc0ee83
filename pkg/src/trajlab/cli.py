"""Command-line entry point: `trajlab <command> --config <path> [...]`."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import pipeline
from .config import load_config, save_config


def _add_common(p):
    p.add_argument("--config", type=str, default=None, help="YAML config file")
    p.add_argument("--seed", type=int, default=None, help="override config seed")
    p.add_argument("--out", type=str, default=None, help="override run directory")


def _add_style(p):
    p.add_argument("--style", choices=("aggressive", "defensive"), required=True)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="trajlab",
        description="Style-aligned diffusion trajectory planning lab")
    sub = parser.add_subparsers(dest="command", required=True)

    for name, desc in (
            ("gen-data", "generate the training/preference/eval scenario sets"),
            ("pretrain", "pretrain the diffusion planner on the mixture"),
            ("pipeline", "run the whole workflow end to end")):
        p = sub.add_parser(name, help=desc)
        _add_common(p)

    for name, desc in (
            ("mine", "mine the preference scenario set for one style"),
            ("build-pairs", "fit the style autoencoder and synthesize pairs"),
            ("train-reward", "train the preference reward model"),
            ("eval", "evaluate finetuned vs pretrained on the held-out split")):
        p = sub.add_parser(name, help=desc)
        _add_common(p)
        _add_style(p)
        if name == "eval":
            p.add_argument("--tag", type=str, default=None)

    p = sub.add_parser("finetune", help="group-relative RL finetuning")
    _add_common(p)
    _add_style(p)
    p.add_argument("--alpha", type=float, default=None, help="BC loss weight")
    p.add_argument("--fraction", type=float, default=1.0,
                   help="fraction of the preference set to train on")
    p.add_argument("--tag", type=str, default=None)

    p = sub.add_parser("refresh", help="post-RL supervised refresh")
    _add_common(p)
    _add_style(p)
    p.add_argument("--tag", type=str, default=None)

    p = sub.add_parser("sweep", help="grid over BC weights or data fractions")
    _add_common(p)
    _add_style(p)
    p.add_argument("--kind", choices=("alpha", "fraction"), required=True)

    p = sub.add_parser("serve", help="run the blind annotation service")
    _add_common(p)
    _add_style(p)
    p.add_argument("--subject", type=str, default=None,
                   help="subject checkpoint (default: finetuned for --style)")
    p.add_argument("--baseline", type=str, default=None,
                   help="baseline checkpoint (default: pretrained)")
    p.add_argument("--split", type=str, default=None,
                   help="scenario split to annotate (default: held-out dp)")
    p.add_argument("--pairs", type=int, default=None)
    p.add_argument("--static", type=str, default=None,
                   help="directory of built UI assets to serve at /")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["out_dir"] = args.out
    cfg = load_config(args.config, overrides)

    paths = pipeline.RunPaths(cfg.out_dir).ensure()
    save_config(cfg, paths.root / "config.yaml")

    if args.command == "gen-data":
        result = pipeline.cmd_gen_data(cfg)
    elif args.command == "pretrain":
        result = pipeline.cmd_pretrain(cfg)
    elif args.command == "mine":
        result = pipeline.cmd_mine(cfg, args.style)
    elif args.command == "build-pairs":
        result = pipeline.cmd_build_pairs(cfg, args.style)
    elif args.command == "train-reward":
        result = pipeline.cmd_train_reward(cfg, args.style)
    elif args.command == "finetune":
        result = pipeline.cmd_finetune(cfg, args.style, alpha=args.alpha,
                                       fraction=args.fraction, tag=args.tag)
    elif args.command == "refresh":
        result = pipeline.cmd_refresh(cfg, args.style, tag=args.tag)
    elif args.command == "eval":
        result = pipeline.cmd_eval(cfg, args.style, tag=args.tag)
    elif args.command == "sweep":
        result = pipeline.cmd_sweep(cfg, args.kind, args.style)
    elif args.command == "pipeline":
        result = pipeline.cmd_pipeline(cfg)
    elif args.command == "serve":
        from .annotation import AnnotationServer, open_session
        split = args.split or paths.dp_eval(args.style)
        subject = args.subject or paths.finetuned(args.style)
        baseline = args.baseline or paths.pretrained()
        session = open_session(cfg, split, subject, baseline, args.style,
                               n_pairs=args.pairs)
        server = AnnotationServer(session, host=cfg.host, port=cfg.port,
                                  static_dir=args.static)
        print(f"annotation service on http://{cfg.host}:{server.port}/ "
              f"({len(session.pairs)} pairs)")
        server.serve_forever()
        return 0
    else:  # pragma: no cover
        raise SystemExit(f"unknown command {args.command}")

    print(json.dumps(result, sort_keys=True, default=str, indent=2))
    return 0


if __name__ == "__main__":
    sys.exit(main())
