"""Directional ablation on the desk MNIST subset.

Trains three configurations per seed and prints mean +- std test accuracy:

* snn_alone: the SNN with its own branch exits and CE only
* joint_kld: ANN and SNN trained jointly with CE + KLD, separate weights
* full:      CE + KLD + Norm with shared singular vectors

The full five-seed sweep takes a bit over an hour on one CPU core.

    python demos/prepare_mnist_subset.py /tmp/mnist_desk
    python demos/ablation.py /tmp/mnist_desk --seeds 0 1 2 3 4
"""

import argparse
import json
import time

import numpy as np

from jointsnn import TrainConfig, Trainer, evaluate
from jointsnn.data import load_mnist_idx

DESK = dict(dataset="mnist", stem_stride=2, channels=(8, 16, 32, 64), epochs=20, batch_size=64, time_steps=2)
ROWS = {
    "snn_alone": dict(use_ann=False, branch_exits=True, share_mode="none", use_kld=False, use_norm=False),
    "joint_kld": dict(use_ann=True, branch_exits=True, share_mode="none", use_kld=True, use_norm=False),
    "full": dict(),
}


def run(data_dir, seeds, epochs):
    train, test = load_mnist_idx(data_dir)
    results = {row: {"ann": [], "snn": []} for row in ROWS}
    for seed in seeds:
        for row, overrides in ROWS.items():
            cfg = TrainConfig(**{**DESK, "epochs": epochs}, **overrides, seed=seed)
            trainer = Trainer(cfg, train.sample_shape)
            t0 = time.process_time()
            for _ in range(cfg.epochs):
                trainer.run_epoch(train)
            res = evaluate(trainer.net, test, cfg)
            results[row]["ann"].append(res.ann_top1)
            results[row]["snn"].append(res.snn_top1)
            ann = "--" if res.ann_top1 is None else f"{res.ann_top1:.2f}"
            print(f"seed {seed} {row:<10} SNN {res.snn_top1:.2f}  ANN {ann}  ({time.process_time() - t0:.0f} s)",
                  flush=True)
    return results


def main():
    p = argparse.ArgumentParser(description="desk-scale ablation")
    p.add_argument("data_dir")
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    p.add_argument("--epochs", type=int, default=DESK["epochs"])
    p.add_argument("--json", help="also write the raw accuracies here")
    args = p.parse_args()
    results = run(args.data_dir, args.seeds, args.epochs)
    print()
    for row, r in results.items():
        ann = [a for a in r["ann"] if a is not None]
        ann_txt = f"{np.mean(ann):.2f} +- {np.std(ann):.2f}" if ann else "--"
        print(f"{row:<10} SNN {np.mean(r['snn']):.2f} +- {np.std(r['snn']):.2f}   ANN {ann_txt}")
    if args.json:
        with open(args.json, "w", encoding="utf-8") as fh:
            json.dump(results, fh, indent=2)


if __name__ == "__main__":
    main()
