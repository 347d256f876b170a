"""Pseudo-label generation, the six-variant ablation suite, and hyper-parameter sweeps."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from ..metrics import read_metrics_csv
from ..numerics import softmax
from ..pseudolabel import (
    ThresholdTable,
    compute_class_thresholds,
    generate_pseudo_labels,
    write_pseudo_label,
    write_thresholds,
)
from ..segnet import SegNet
from ..synthdata import EVAL_MANIFEST, TRAIN_MANIFEST, Scene, load_split, read_dataset_info
from .config import VARIANT_LABELS, VARIANTS, ConfigError, RunConfig, replace
from .train import PSEUDO_MANIFEST, THRESHOLD_FILE, Trainer, load_net

log = logging.getLogger(__name__)

ABLATION_TABLE = "ablation.csv"
CURVES_FILE = "curves.csv"
SWEEP_TABLE = "sweep.csv"
SWEEP_PARAMS = {"tcos": "t_cos", "dict": "dict_size"}


class SuiteError(RuntimeError):
    """A member run failed; results gathered so far are already on disk."""


def make_pseudo_labels(net: SegNet, scenes: Sequence[Scene], out_dir) -> tuple[ThresholdTable, dict[int, np.ndarray]]:
    """Threshold table from the network's target predictions, then one PGM per scene."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dumps = [softmax(net(scene.image)[2]).data for scene in scenes]
    table = compute_class_thresholds(dumps, net.num_classes)
    labels = {}
    lines = []
    for scene, dump in zip(scenes, dumps):
        labels[scene.seed] = generate_pseudo_labels(dump, table)
        name = f"{scene.seed:06d}.pgm"
        write_pseudo_label(out / name, labels[scene.seed])
        lines.append(f"{scene.seed} {name}\n")
    with open(out / PSEUDO_MANIFEST, "w", encoding="utf-8") as fh:
        fh.writelines(lines)
    write_thresholds(out / THRESHOLD_FILE, table)
    return table, labels


def pseudo_label_from_checkpoint(ckpt, data_dir, out_dir) -> ThresholdTable:
    net = load_net(ckpt)
    table, _ = make_pseudo_labels(net, load_split(data_dir, TRAIN_MANIFEST, "target"), out_dir)
    return table


@dataclass
class Benchmark:
    """A dataset loaded once and shared by every run of a suite."""

    source: list[Scene]
    target: list[Scene]
    eval_scenes: list[Scene]
    num_classes: int

    @classmethod
    def load(cls, data_dir) -> "Benchmark":
        return cls(
            load_split(data_dir, TRAIN_MANIFEST, "source"),
            load_split(data_dir, TRAIN_MANIFEST, "target"),
            load_split(data_dir, EVAL_MANIFEST),
            read_dataset_info(data_dir).num_classes,
        )

    def trainer(self, cfg: RunConfig, pseudo=None) -> Trainer:
        return Trainer(cfg, self.source, self.target, self.eval_scenes, pseudo=pseudo, num_classes=self.num_classes)


@dataclass
class RunResult:
    variant: str
    seed: int
    final_miou: float
    curve: list[tuple[int, float]] = field(default_factory=list)


def run_member(bench: Benchmark, cfg: RunConfig, out_dir, pseudo=None) -> RunResult:
    trainer = bench.trainer(replace(cfg, out=str(out_dir)), pseudo=pseudo)
    trainer.run(out_dir)
    rows = read_metrics_csv(Path(out_dir) / "metrics.csv")
    return RunResult(cfg.variant, cfg.seed, rows[-1]["miou"], [(int(r["iter"]), r["miou"]) for r in rows])


def _stage1_and_pseudo(bench: Benchmark, template: RunConfig, seed: int, root: Path):
    """Stage-1 run of the method and the pseudo-labels its final checkpoint produces."""
    cfg = replace(template, stage=1, variant="ours", seed=seed)
    stage1 = run_member(bench, cfg, root / "stage1")
    net = load_net(root / "stage1" / "final.ckpt")
    _, pseudo = make_pseudo_labels(net, bench.target, root / "pseudo")
    return stage1, pseudo


def stage2_config(template: RunConfig, variant: str, seed: int, root: Path) -> RunConfig:
    changes = dict(stage=2, variant=variant, seed=seed, init_ckpt=str(root / "stage1" / "final.ckpt"),
                   pseudo_dir=str(root / "pseudo"))
    cfg = replace(template, **changes)
    if variant == "no_dict" and "dict_size" in cfg.explicit:
        # the template may pin dict_size for the other members; no_dict must not carry it
        cfg = RunConfig(**{**cfg.__dict__, "explicit": cfg.explicit - {"dict_size"}})
    return cfg.validate()


def write_ablation_table(path, results: Sequence[RunResult], seeds: Sequence[int]) -> None:
    labels = [VARIANT_LABELS[v] for v in VARIANTS]
    by_key = {(r.variant, r.seed): r.final_miou for r in results}
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["seed", *labels])
        for seed in seeds:
            w.writerow([seed, *(_fmt(by_key.get((v, seed))) for v in VARIANTS)])
        medians = []
        for v in VARIANTS:
            vals = [by_key[(v, s)] for s in seeds if (v, s) in by_key]
            medians.append(_fmt(float(np.median(vals)) if vals else None))
        w.writerow(["median", *medians])


def write_curves(path, results: Sequence[RunResult]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["variant", "seed", "iter", "miou"])
        for r in results:
            for it, m in r.curve:
                w.writerow([r.variant, r.seed, it, _fmt(m)])


def _fmt(value) -> str:
    return "" if value is None else f"{value:.6f}"


def run_ablation_suite(template: RunConfig, seeds: Sequence[int], out_dir, bench: Benchmark | None = None,
                       variants: Sequence[str] = VARIANTS) -> list[RunResult]:
    """Every variant per seed at stage 2, each warm-started from a shared stage-1 run.

    The table and curves files are rewritten after every member, so a failure
    leaves the completed runs on disk before ``SuiteError`` is raised.
    """
    seeds = list(seeds)
    if not seeds:
        raise ConfigError("the ablation suite needs at least one seed")
    if len(seeds) < 3:
        log.warning("median over %d seed(s); use at least 3 for a meaningful table", len(seeds))
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    bench = bench or Benchmark.load(template.data)
    results: list[RunResult] = []

    def flush():
        write_ablation_table(out / ABLATION_TABLE, results, seeds)
        write_curves(out / CURVES_FILE, results)

    for seed in seeds:
        root = out / f"seed{seed}"
        try:
            _, pseudo = _stage1_and_pseudo(bench, template, seed, root)
            for variant in variants:
                cfg = stage2_config(template, variant, seed, root)
                results.append(run_member(bench, cfg, root / variant, pseudo=pseudo))
                flush()
                log.info("seed %d %s: final mIoU %.4f", seed, variant, results[-1].final_miou)
        except Exception as exc:
            flush()
            raise SuiteError(f"ablation member failed at seed {seed}: {exc}") from exc
    flush()
    return results


def sweep(template: RunConfig, param: str, values: Sequence[str], seeds: Sequence[int], out_dir,
          bench: Benchmark | None = None) -> list[tuple[str, int, float]]:
    """Final mIoU of the template run for each value of ``tcos`` or ``dict``."""
    if param not in SWEEP_PARAMS:
        raise ConfigError(f"sweep parameter must be one of {', '.join(SWEEP_PARAMS)}, got {param!r}")
    key = SWEEP_PARAMS[param]
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    bench = bench or Benchmark.load(template.data)
    rows = []
    with open(out / SWEEP_TABLE, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow([param, "seed", "miou"])
        for value in values:
            for seed in seeds:
                cfg = template.with_overrides({key: str(value), "seed": str(seed)}).validate()
                result = run_member(bench, cfg, out / f"{param}_{value}" / f"seed{seed}")
                rows.append((str(value), seed, result.final_miou))
                w.writerow([value, seed, _fmt(result.final_miou)])
                fh.flush()
    return rows


ADAPTATION_TABLE = "adaptation.csv"
ADAPTATION_ARMS = ("source_only", "stage1", "ours", "only_ssl")


def adaptation_study(template: RunConfig, seeds: Sequence[int], out_dir,
                     bench: Benchmark | None = None) -> dict[str, list[float]]:
    """Final target mIoU per seed for source-only, stage 1, and stage-2 ours vs only SSL.

    Source-only is the stage-1 loop with lambda_cos = 0. Both stage-2 arms start
    from the same stage-1 checkpoint and consume the same pseudo-labels.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    bench = bench or Benchmark.load(template.data)
    finals: dict[str, list[float]] = {arm: [] for arm in ADAPTATION_ARMS}
    with open(out / ADAPTATION_TABLE, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["seed", *ADAPTATION_ARMS])
        for seed in seeds:
            root = out / f"seed{seed}"
            base = replace(template, stage=1, variant="ours", seed=seed)
            finals["source_only"].append(
                run_member(bench, replace(base, lambda_cos=0.0), root / "source_only").final_miou)
            stage1, pseudo = _stage1_and_pseudo(bench, template, seed, root)
            finals["stage1"].append(stage1.final_miou)
            for variant in ("ours", "only_ssl"):
                cfg = stage2_config(template, variant, seed, root)
                finals[variant].append(run_member(bench, cfg, root / variant, pseudo=pseudo).final_miou)
            w.writerow([seed, *(_fmt(finals[a][-1]) for a in ADAPTATION_ARMS)])
            fh.flush()
            log.info("seed %d: %s", seed, {a: round(finals[a][-1], 4) for a in ADAPTATION_ARMS})
        w.writerow(["median", *(_fmt(float(np.median(finals[a]))) for a in ADAPTATION_ARMS)])
    return finals
