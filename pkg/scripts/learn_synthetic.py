"""Train the desk-scale model on synthetic scenes and report val 3D AP at IoU 0.5 per epoch."""

import argparse
import json
import logging
from dataclasses import replace

import torch

from ffkit.experiments import LearningRun, synthetic_split
from ffkit.train import TrainConfig, sample_ap, train


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--train-scenes", type=int, default=300)
    p.add_argument("--val-scenes", type=int, default=60)
    p.add_argument("--epochs", type=int, default=12)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--log", help="per-epoch JSONL log path")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s", datefmt="%H:%M:%S")
    torch.set_num_threads(args.threads)

    run = LearningRun(train_scenes=args.train_scenes, val_scenes=args.val_scenes, epochs=args.epochs)
    data = synthetic_split(run)
    print(f"{len(data.train)} train samples, {len(data.val)} val samples ({data.build_seconds:.0f} s)")
    priors = run.spec.prior_table()
    _, records = train(
        data.train, run.model, replace(TrainConfig(), epochs=args.epochs, seed=args.seed), priors,
        val_samples=data.val, val_eval=lambda dets: sample_ap(dets, data.val, run.match), log_path=args.log,
    )
    for r in records:
        ap = {c: round(v["ap_3d"], 3) for c, v in r["val"].items()}
        print(f"epoch {r['epoch']:3d}  loss {r['loss']['total']:.4f}  AP3D@0.5 {json.dumps(ap)}  {r['wall_time']:.0f} s")


if __name__ == "__main__":
    main()
