"""Command-line interface: ``jointsnn {train,eval,energy,inspect}``.

Every failure prints one line ``jointsnn: error[<kind>]: <message>`` on
stderr and exits with 2 (usage/config), 3 (data/format), 4 (numeric abort)
or 1 (anything else).
"""

from __future__ import annotations

import argparse
import json
import logging
import re
import sys
from collections import defaultdict
from typing import Optional, Sequence

from .autodiff import Tensor
from .checkpoint import load_checkpoint
from .config import load_config
from .data import load_dataset
from .energy import EnergyConstants, build_report, emit_report
from .errors import ConfigError, DataError, JointSNNError
from .svd import param_count
from .trainer import Trainer, build_network, evaluate

PROG = "jointsnn"
_FACTOR_U = re.compile(r"^(?P<layer>.+)\.u(?:\.k\d+_\d+)?$")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def make_parser() -> argparse.ArgumentParser:
    p = _Parser(prog=PROG, description="Joint ANN/SNN training with shared factorized weights.")
    p.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train from a config file")
    t.add_argument("--config")
    t.add_argument("--data-dir")
    t.add_argument("--out", default="run", help="directory for metrics.jsonl and checkpoint.jasn")
    t.add_argument("--seed", type=int)
    t.add_argument("--checkpoint", help="resume from this checkpoint")

    e = sub.add_parser("eval", help="test accuracy of a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data-dir")
    e.add_argument("--time-steps", type=int)

    n = sub.add_parser("energy", help="inference energy report")
    src = n.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint")
    src.add_argument("--config")
    n.add_argument("--data-dir")
    n.add_argument("--seed", type=int)
    n.add_argument("--time-steps", type=int)
    n.add_argument("--format", choices=("json", "table"), default="json")

    i = sub.add_parser("inspect", help="list checkpoint records")
    i.add_argument("--checkpoint", required=True)
    for sp in (t, e, n, i):
        sp.add_argument("-v", "--verbose", action="count", default=0, dest="sub_verbose", help=argparse.SUPPRESS)
    return p


def _overrides(args) -> dict:
    return {"seed": args.seed} if getattr(args, "seed", None) is not None else {}


def cmd_train(args) -> int:
    if args.checkpoint:
        trainer = Trainer.from_checkpoint(load_checkpoint(args.checkpoint), _overrides(args))
    elif args.config is None:
        raise ConfigError("train needs --config (or --checkpoint to resume)")
    else:
        cfg = load_config(args.config, _overrides(args))
        train, _ = load_dataset(cfg, args.data_dir)
        trainer = Trainer(cfg, train.sample_shape)
    cfg = trainer.cfg
    train, test = load_dataset(cfg, args.data_dir)
    history = trainer.fit(train, test, args.out)
    summary = {"epochs": cfg.epochs, "out": str(args.out)}
    if history:
        best = max(history, key=lambda h: h["snn_top1"])
        summary.update({"last_snn_top1": history[-1]["snn_top1"], "last_ann_top1": history[-1]["ann_top1"],
                        "best_snn_top1": best["snn_top1"], "best_epoch": best["epoch"]})
    print(json.dumps(summary, sort_keys=True))
    return 0


def cmd_eval(args) -> int:
    trainer = Trainer.from_checkpoint(load_checkpoint(args.checkpoint))
    _, test = load_dataset(trainer.cfg, args.data_dir)
    result = evaluate(trainer.net, test, trainer.cfg, time_steps=args.time_steps)
    out = result.as_dict()
    out["time_steps"] = args.time_steps or trainer.net.time_steps
    print(json.dumps(out, sort_keys=True))
    return 0


def cmd_energy(args) -> int:
    overrides = _overrides(args)
    if args.time_steps is not None:
        overrides["time_steps"] = args.time_steps
    if args.checkpoint:
        trainer = Trainer.from_checkpoint(load_checkpoint(args.checkpoint), overrides)
        cfg, net = trainer.cfg, trainer.net
    else:
        cfg = load_config(args.config, overrides)
        net = None
    _, test = load_dataset(cfg, args.data_dir)
    if len(test) == 0:
        raise DataError("the test split is empty; no reference batch for spike statistics")
    if net is None:
        net = build_network(cfg, test.sample_shape)
    ref = test.head(cfg.energy_batch)
    net.eval()
    _, stats = net.forward_snn(Tensor(ref.images))
    report = build_report(net.topology(), stats, net.time_steps, EnergyConstants.from_config(cfg))
    sys.stdout.write(emit_report(report, args.format))
    return 0


def factor_overhead(records: dict) -> list[dict]:
    """Per factorized layer: kernel entries, dims and the parameter overhead of factorizing."""
    layers = defaultdict(list)
    for name, arr in records.items():
        m = _FACTOR_U.match(name)
        if m and not name.startswith(("adam.", "meta.")):
            layers[m.group("layer")].append(arr.shape)
    rows = []
    for layer in sorted(layers):
        shapes = layers[layer]
        c_in = shapes[0][0]
        vname = next(n for n in records if n.startswith(layer + ".v") and not n.startswith("adam."))
        c_out = records[vname].shape[1]
        fact, base = param_count(c_in, c_out)
        fact_thin, _ = param_count(c_in, c_out, thin=True)
        rows.append({"layer": layer, "entries": len(shapes), "c_in": c_in, "c_out": c_out,
                     "overhead_per_entry": fact - base,
                     "stored_per_entry": fact_thin})
    return rows


def cmd_inspect(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)  # verifies magic, CRC and layout
    print(f"{args.checkpoint}: {len(ckpt.records)} records, CRC ok")
    print(f"{'name':<48}{'shape':<20}{'min':>14}{'max':>14}{'mean':>14}")
    for name in sorted(ckpt.records):
        arr = ckpt.records[name]
        if name == "meta.config":
            print(f"{name:<48}{str(arr.shape):<20}{'(config text)':>14}")
            continue
        lo, hi, mu = (float(arr.min()), float(arr.max()), float(arr.mean())) if arr.size else (0.0, 0.0, 0.0)
        print(f"{name:<48}{str(arr.shape):<20}{lo:>14.5g}{hi:>14.5g}{mu:>14.5g}")
    rows = factor_overhead(ckpt.records)
    params = sum(a.size for n, a in ckpt.records.items() if not n.startswith(("adam.", "meta.")) and
                 not n.endswith(("running_mean", "running_var")))
    print(f"\ntrainable parameters stored: {params}")
    if rows:
        print(f"{'factorized layer':<36}{'entries':>8}{'c_in':>6}{'c_out':>6}{'overhead/entry':>16}{'stored/entry':>14}")
        for r in rows:
            print(f"{r['layer']:<36}{r['entries']:>8}{r['c_in']:>6}{r['c_out']:>6}"
                  f"{r['overhead_per_entry']:>16}{r['stored_per_entry']:>14}")
    return 0


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "energy": cmd_energy, "inspect": cmd_inspect}


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = make_parser().parse_args(argv)
        verbosity = args.verbose + getattr(args, "sub_verbose", 0)
        logging.basicConfig(level=logging.WARNING - 10 * min(verbosity, 2), stream=sys.stderr,
                            format="%(levelname)s %(name)s: %(message)s")
        return COMMANDS[args.command](args)
    except JointSNNError as exc:
        print(f"{PROG}: error[{exc.kind}]: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"{PROG}: error[io]: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
