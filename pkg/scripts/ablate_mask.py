"""Train with and without the Gaussian-mask point channel over several seeds and compare val AP."""

import argparse
import json
import logging

import torch

from ffkit.experiments import LearningRun, mask_ablation, synthetic_split


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--train-scenes", type=int, default=300)
    p.add_argument("--val-scenes", type=int, default=60)
    p.add_argument("--epochs", type=int, default=12)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--out", help="write the result JSON here as well")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s", datefmt="%H:%M:%S")
    torch.set_num_threads(args.threads)

    run = LearningRun(train_scenes=args.train_scenes, val_scenes=args.val_scenes, epochs=args.epochs)
    data = synthetic_split(run)
    logging.info("%d train / %d val samples in %.0f s", len(data.train), len(data.val), data.build_seconds)
    result = mask_ablation(run, data, tuple(args.seeds))
    result["mask_helps"] = result["with_mask"]["mean"] >= result["zeroed"]["mean"]
    text = json.dumps(result, indent=2)
    print(text)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text + "\n")


if __name__ == "__main__":
    main()
