"""Write the class-balanced MNIST subset used for desk-scale runs.

Needs the optional ``mnist`` extra (mlxtend ships a 5000-image MNIST
sample). The output directory holds the four standard IDX files, so any
``--data-dir`` flag can point at it.

    python demos/prepare_mnist_subset.py /tmp/mnist_desk
"""

import argparse

from jointsnn.data import load_mnist_idx, write_mnist_subset


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("out", help="directory for the IDX files")
    p.add_argument("--train-per-class", type=int, default=400)
    p.add_argument("--test-per-class", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()
    path = write_mnist_subset(args.out, args.train_per_class, args.test_per_class, args.seed)
    train, test = load_mnist_idx(path)
    print(f"wrote {path}: {len(train)} train / {len(test)} test images")


if __name__ == "__main__":
    main()
