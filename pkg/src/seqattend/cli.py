"""Command line entry point: generate / train / eval / render."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import torch

from .data import FormatError, save_episode
from .harness import Checkpoint, TrainConfig, checkpoint_source, evaluate, render_trace, train
from .model import rollout
from .ndcore import NumericError
from .tasks import EVAL, TASK_NAMES, make_source

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4


def _generate(args):
    source = make_source(args.task, args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i in range(args.episodes):
        save_episode(out / f"episode_{i:05d}.glep", source.episode(args.seed, EVAL, i))
    manifest = {"task": args.task, "seed": args.seed, "episodes": args.episodes,
                "weights": list(source.weights.weights)}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    print(f"wrote {args.episodes} episodes to {out}")


def _train(args):
    config = TrainConfig.load(args.config)
    if args.out:
        config.out_dir = args.out
    result = train(config, progress=lambda row: logging.info(
        "update %d  nll %.3f  kl %.3f  bound %.3f", *row))
    print(f"final checkpoint: {Path(config.out_dir) / 'checkpoint.glck'}")
    return result


def _eval(args):
    ckpt = Checkpoint.load(args.checkpoint)
    report = evaluate(ckpt, args.task, args.episodes, args.seed, data_path=args.data)
    print(json.dumps(report.to_dict(), indent=2))


def _render(args):
    ckpt = Checkpoint.load(args.checkpoint)
    task = args.task or ckpt.config.task
    source = checkpoint_source(ckpt, task, args.data)
    model = ckpt.model()
    episode = source.episode(args.seed, EVAL, 0)
    with torch.no_grad():
        trace = rollout(model, torch.from_numpy(episode.inputs)[None], None, "prior",
                        torch.Generator().manual_seed(args.seed))
    render_trace(trace, episode, args.out,
                 comment=f"task {task} seed {args.seed} update {ckpt.update}")
    print(f"wrote {args.out}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="seqattend", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write evaluation episodes as .glep files")
    p.add_argument("--task", required=True, choices=TASK_NAMES)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--episodes", type=int, default=16)
    p.add_argument("--data", help="IDX file or PGM directory for hurried-copy")
    p.set_defaults(func=_generate)

    p = sub.add_parser("train", help="train from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", help="overrides out_dir from the config")
    p.set_defaults(func=_train)

    p = sub.add_parser("eval", help="prior-mode evaluation against baselines")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--task", choices=TASK_NAMES)
    p.add_argument("--episodes", type=int, default=256)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--data")
    p.set_defaults(func=_eval)

    p = sub.add_parser("render", help="write an inputs/beliefs/attention strip as PGM")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--task", choices=TASK_NAMES)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--data")
    p.set_defaults(func=_render)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(message)s")
    try:
        args.func(args)
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, FormatError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
