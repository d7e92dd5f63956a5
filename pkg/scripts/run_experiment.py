"""Train on one task and print the prior-mode evaluation against baselines.

    python scripts/run_experiment.py --task track-1 --updates 10000 --out runs/track1
    python scripts/run_experiment.py --task hurried-copy --updates 5000 --out runs/copy
"""

import argparse
import json
import logging
import time
from pathlib import Path

from seqattend.harness import Checkpoint, TrainConfig, evaluate, train

parser = argparse.ArgumentParser()
parser.add_argument("--task", default="track-1")
parser.add_argument("--data")
parser.add_argument("--updates", type=int, default=2000)
parser.add_argument("--batch-size", type=int, default=32)
parser.add_argument("--lr", type=float, default=1e-3)
parser.add_argument("--seed", type=int, default=0)
parser.add_argument("--out", default="runs/experiment")
parser.add_argument("--eval-episodes", type=int, default=512)
parser.add_argument("--init-log-var", type=float, default=0.0)
parser.add_argument("--observer-sees-glimpse", action="store_true")
parser.add_argument("--controller-size", type=int, default=128)
parser.add_argument("--checkpoint-every", type=int, default=500)
parser.add_argument("--eval-checkpoints", action="store_true",
                    help="also score every periodic checkpoint (128 episodes each)")
args = parser.parse_args()

logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
config = TrainConfig(task=args.task, data_path=args.data, total_updates=args.updates,
                     batch_size=args.batch_size, lr=args.lr, seed=args.seed,
                     out_dir=args.out, log_every=50, controller_size=args.controller_size,
                     checkpoint_every=args.checkpoint_every,
                     glimpse_init_log_var=args.init_log_var,
                     observer_sees_glimpse=args.observer_sees_glimpse)
start = time.time()
result = train(config, progress=lambda row: logging.info(
    "update %5d  nll %8.3f  kl %7.3f  bound %8.3f", *row))
logging.info("trained in %.1f s", time.time() - start)
if args.eval_checkpoints:
    for path in sorted(Path(args.out).glob("checkpoint_*.glck")):
        r = evaluate(Checkpoint.load(path), n_episodes=128, seed=1234)
        logging.info("%s  prior-mode mse %.4f  nll %.2f  (all-0.5 mse %.4f, mean frame %.4f)",
                     path.name, r.weighted_mse, r.weighted_nll, r.half_weighted_mse,
                     r.mean_frame_weighted_mse)
report = evaluate(result.checkpoint, n_episodes=args.eval_episodes, seed=1234)
print(json.dumps(report.to_dict(), indent=2))
