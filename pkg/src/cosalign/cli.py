"""Command-line entry point: ``cosalign <subcommand> ...``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .harness.config import ConfigError, load_config, parse_set_args


def _add_set(p: argparse.ArgumentParser) -> None:
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key (repeatable)")


def _int_list(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v.strip()]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cosalign", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a SynthShift dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", type=int, default=200, help="train scenes per domain")
    p.add_argument("--eval", type=int, default=50, help="target evaluation scenes")
    p.add_argument("--shift", default="default", help="'default', 'none' or key=value,... (hue=a:b:c)")
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--classes", type=int, default=5)
    p.add_argument("--target-only-class", type=int, default=0, help="class never drawn in source scenes")

    p = sub.add_parser("train", help="train stage 1 or stage 2")
    p.add_argument("--stage", type=int, choices=(1, 2))
    p.add_argument("--config")
    _add_set(p)

    p = sub.add_parser("pseudo-label", help="thresholds and pseudo-labels from a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", help="per-class IoU and mIoU of a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--classes", default="", help="comma-separated class subset for the mean")

    p = sub.add_parser("ablate", help="run the six-variant ablation suite")
    p.add_argument("--template", required=True)
    p.add_argument("--seeds", type=_int_list, required=True, help="comma-separated seeds")
    p.add_argument("--out", default="ablation")
    _add_set(p)

    p = sub.add_parser("adapt", help="source-only vs stage 1, and stage-2 ours vs only SSL, per seed")
    p.add_argument("--template", required=True)
    p.add_argument("--seeds", type=_int_list, default=[0, 1, 2, 3, 4], help="comma-separated seeds")
    p.add_argument("--out", default="adaptation")
    _add_set(p)

    p = sub.add_parser("sweep", help="sensitivity sweep over t_cos or dict_size")
    p.add_argument("--param", choices=("tcos", "dict"), required=True)
    p.add_argument("--values", required=True, help="comma-separated values")
    p.add_argument("--template")
    p.add_argument("--seeds", type=_int_list, default=[0])
    p.add_argument("--out", default="sweep")
    _add_set(p)

    p = sub.add_parser("gradcheck", help="gradient checks of every op and the full objectives")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tolerance", type=float, default=1e-3)
    return parser


def cmd_gen_data(args) -> int:
    from .synthdata import generate_dataset, parse_shift

    spec = parse_shift(args.shift)
    generate_dataset(args.out, n_train=args.seeds, n_eval=args.eval, spec=spec, height=args.size, width=args.size,
                     num_classes=args.classes, target_only_class=args.target_only_class or None)
    print(f"wrote {2 * args.seeds} train and {args.eval} eval scenes to {args.out}")
    return 0


def cmd_train(args) -> int:
    from .harness.train import Trainer

    overrides = parse_set_args(args.overrides)
    if args.stage is not None:
        overrides["stage"] = str(args.stage)
    cfg = load_config(args.config, overrides)
    trainer = Trainer(cfg)
    rows = trainer.run()
    print(rows[-1] if rows else "no evaluation rows")
    return 0


def cmd_pseudo_label(args) -> int:
    from .harness.suite import pseudo_label_from_checkpoint

    table = pseudo_label_from_checkpoint(args.ckpt, args.data, args.out)
    for c in sorted(table.tau):
        print(f"tau.{c} = {table.tau[c]:.6f}  (pixels {table.coverage[c]})")
    return 0


def cmd_eval(args) -> int:
    from .harness.train import load_net
    from .metrics import ConfusionMatrix, miou
    from .numerics import argmax_labels
    from .synthdata import EVAL_MANIFEST, load_split

    net = load_net(args.ckpt)
    cm = ConfusionMatrix(net.num_classes)
    for scene in load_split(args.data, EVAL_MANIFEST):
        cm.accumulate(argmax_labels(net(scene.image)[2].data), scene.label)
    per_class, mean = miou(cm, _int_list(args.classes) or None)
    for c, v in enumerate(per_class, 1):
        print(f"class {c}: IoU {v:.4f}")
    print(f"mIoU {mean:.4f}")
    return 0


def cmd_ablate(args) -> int:
    from .harness.suite import ABLATION_TABLE, run_ablation_suite

    template = load_config(args.template, parse_set_args(args.overrides))
    run_ablation_suite(template, args.seeds, args.out)
    print(Path(args.out, ABLATION_TABLE).read_text(encoding="utf-8"), end="")
    return 0


def cmd_adapt(args) -> int:
    from .harness.suite import ADAPTATION_TABLE, adaptation_study

    template = load_config(args.template, parse_set_args(args.overrides))
    adaptation_study(template, args.seeds, args.out)
    print(Path(args.out, ADAPTATION_TABLE).read_text(encoding="utf-8"), end="")
    return 0


def cmd_sweep(args) -> int:
    from .harness.suite import SWEEP_TABLE, sweep

    template = load_config(args.template, parse_set_args(args.overrides))
    sweep(template, args.param, [v for v in args.values.split(",") if v.strip()], args.seeds, args.out)
    print(Path(args.out, SWEEP_TABLE).read_text(encoding="utf-8"), end="")
    return 0


def cmd_gradcheck(args) -> int:
    from .harness.gradchecks import run_all

    reports = run_all(args.seed, args.tolerance)
    for r in reports:
        print(r.line())
    return 0 if all(r.passed for r in reports) else 1


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "pseudo-label": cmd_pseudo_label,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "adapt": cmd_adapt,
    "sweep": cmd_sweep,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
