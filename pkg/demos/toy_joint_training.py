"""Joint ANN/SNN training on the synthetic blobs task, end to end.

Trains a tiny weight-factorized mini-resnet for a few epochs, evaluates
both sides, saves and reloads the checkpoint, then prints the inference
energy report. Runs in well under a minute.

    python demos/toy_joint_training.py [out_dir]
"""

import sys
import tempfile
from pathlib import Path

import numpy as np

from jointsnn import Tensor, TrainConfig, Trainer, build_report, emit_report, evaluate
from jointsnn.checkpoint import load_checkpoint
from jointsnn.data import make_synthetic


def main(out_dir):
    cfg = TrainConfig(dataset="blobs", synthetic_n=256, classes=4, channels=(4, 8, 8, 16),
                      batch_size=32, epochs=6, lr=3e-3)
    full = make_synthetic("blobs", cfg.synthetic_n, cfg.classes, cfg.seed)
    train, test = full.subset(np.arange(192)), full.subset(np.arange(192, 256))

    trainer = Trainer(cfg, train.sample_shape)
    print(f"{trainer.net.parameter_count()} stored parameters")
    for line in trainer.fit(train, test, out_dir):
        print(f"epoch {line['epoch']}: loss {line['l_total']:.3f}  ANN {line['ann_top1']:.1f}%  "
              f"SNN {line['snn_top1']:.1f}%  SNN branches {line['snn_branch_top1']}")

    reloaded = Trainer.from_checkpoint(load_checkpoint(Path(out_dir) / "checkpoint.jasn"))
    again = evaluate(reloaded.net, test, reloaded.cfg)
    print(f"reloaded checkpoint: SNN {again.snn_top1:.1f}%")

    net = reloaded.net.eval()
    _, stats = net.forward_snn(Tensor(test.images))
    print(emit_report(build_report(net.topology(), stats, net.time_steps), "table"))


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else tempfile.mkdtemp(prefix="jointsnn-toy-"))
