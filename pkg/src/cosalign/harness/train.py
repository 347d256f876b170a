"""Training loop for both stages and all ablation variants."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import alignment as al
from .. import checkpoint as ck
from ..adversarial import Discriminator, adv_loss, disc_loss
from ..metrics import ConfusionMatrix, MetricsLog, miou
from ..numerics import Tensor, argmax_labels, nearest_resize, scale, softmax, softmax_cross_entropy
from ..pseudolabel import read_pseudo_label
from ..segnet import AdamState, OptimState, SegNet, adam_step, poly_lr, sgd_step
from ..synthdata import EVAL_MANIFEST, TRAIN_MANIFEST, Scene, load_split, read_dataset_info
from .config import ConfigError, RunConfig

log = logging.getLogger(__name__)

PSEUDO_MANIFEST = "pseudo.txt"
THRESHOLD_FILE = "thresholds.txt"


@dataclass
class StepReport:
    iteration: int
    loss_seg: float
    loss_cos: float
    loss_adv: float
    skipped: list[int] = field(default_factory=list)
    matched: list[int] = field(default_factory=list)
    optimizers: tuple[str, ...] = ("seg",)
    matrix_rows: int = 0


def read_pseudo_dir(pseudo_dir) -> dict[int, np.ndarray]:
    pseudo_dir = Path(pseudo_dir)
    path = pseudo_dir / PSEUDO_MANIFEST
    if not path.exists():
        raise FileNotFoundError(f"no pseudo-label manifest at {path}")
    labels = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            parts = line.split()
            if parts:
                labels[int(parts[0])] = read_pseudo_label(pseudo_dir / parts[1])
    return labels


def epoch_order(seed: int, epoch: int, stream: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch, stream]).permutation(n)


def evaluate(net: SegNet, scenes: list[Scene]) -> tuple[list[float], float]:
    cm = ConfusionMatrix(net.num_classes)
    for scene in scenes:
        _, _, up = net.forward(scene.image)
        cm.accumulate(argmax_labels(up.data), scene.label)
    return miou(cm)


class Trainer:
    def __init__(
        self,
        cfg: RunConfig,
        source: list[Scene] | None = None,
        target: list[Scene] | None = None,
        eval_scenes: list[Scene] | None = None,
        pseudo: dict[int, np.ndarray] | None = None,
        num_classes: int | None = None,
    ):
        self.cfg = cfg.validate()
        if source is None or target is None:
            if not cfg.data:
                raise ConfigError("config key 'data' must point at a generated dataset")
            source = load_split(cfg.data, TRAIN_MANIFEST, "source")
            target = load_split(cfg.data, TRAIN_MANIFEST, "target")
            if eval_scenes is None:
                eval_scenes = load_split(cfg.data, EVAL_MANIFEST)
            num_classes = num_classes or read_dataset_info(cfg.data).num_classes
        if not source or not target:
            raise ConfigError("training needs at least one source and one target scene")
        self.source, self.target, self.eval_scenes = source, target, eval_scenes or []
        self.num_classes = num_classes or int(max(s.label.max() for s in source))

        if cfg.stage == 2:
            if pseudo is None:
                if not cfg.pseudo_dir:
                    raise ConfigError("stage 2 needs pseudo-labels: set pseudo_dir")
                pseudo = read_pseudo_dir(cfg.pseudo_dir)
            missing = [s.seed for s in target if s.seed not in pseudo]
            if missing:
                raise ConfigError(f"missing pseudo-labels for target seeds {missing[:5]}")
        self.pseudo = pseudo

        self.net = SegNet(self.num_classes, cfg.feature_dim, seed=cfg.seed)
        if cfg.init_ckpt:
            self.net.load_state_dict(ck.strip_prefix("seg", ck.load_checkpoint(cfg.init_ckpt)))
        self.opt = OptimState(cfg.lr, cfg.weight_decay, cfg.momentum, 0, cfg.max_iter)

        tap_dims = [cfg.feature_dim, 32, 16] if cfg.multi_layer else [cfg.feature_dim]
        self.dictionaries = [al.FeatureDictionary(cfg.dict_size, k) for k in tap_dims]

        self.disc = None
        self.disc_opt = None
        if cfg.uses_adv:
            self.disc = Discriminator(self.num_classes, cfg.disc_channel_tuple(), seed=cfg.seed + 1)
            self.disc_opt = AdamState(cfg.disc_lr)

        # summed seg, cos, adv losses and step count since the last eval row;
        # float32 so a checkpoint stores it exactly
        self.window = np.zeros(4, np.float32)
        if cfg.resume:
            self.load(cfg.resume)

    @property
    def iteration(self) -> int:
        return self.opt.iteration

    # -- data ---------------------------------------------------------------
    def pick(self, scenes: list[Scene], stream: int, it: int) -> Scene:
        n = len(scenes)
        return scenes[epoch_order(self.cfg.seed, it // n, stream, n)[it % n]]

    # -- one iteration --------------------------------------------------------
    def step(self) -> StepReport:
        cfg = self.cfg
        it = self.opt.iteration
        self.opt.learning_rate = poly_lr(cfg.lr, it, cfg.max_iter, cfg.poly_power)
        src = self.pick(self.source, 0, it)
        tgt = self.pick(self.target, 1, it)
        report = StepReport(it, 0.0, 0.0, 0.0)
        total, parts = self.objective(src, tgt, report)
        total.backward()
        sgd_step(self.opt, self.net.named_parameters())

        if parts["adv"] is not None:
            d_loss = disc_loss(self.disc, softmax(parts["up_s"]), softmax(parts["up_t"]))
            d_loss.backward()
            adam_step(self.disc_opt, self.disc.params)
            report.optimizers = ("seg", "disc")

        report.loss_seg = sum(t.item() for t in parts["seg"])
        report.loss_cos = parts["cos"].item()
        report.loss_adv = parts["adv"].item() if parts["adv"] is not None else 0.0
        self.window += np.array([report.loss_seg, report.loss_cos, report.loss_adv, 1.0], np.float32)
        return report

    def objective(self, src: Scene, tgt: Scene, report: StepReport | None = None, update_bank: bool = True):
        """Total loss for one (source, target) pair plus its parts.

        With ``update_bank=False`` the dictionaries are read but not written, which
        keeps the call free of side effects (used by gradient checks).
        """
        cfg, net = self.cfg, self.net
        report = report or StepReport(self.iteration, 0.0, 0.0, 0.0)
        taps_s, logits_s, up_s = net.forward_taps(src.image)
        seg_s = softmax_cross_entropy(up_s, src.label)
        parts = {"seg": [seg_s], "cos": Tensor(0.0), "adv": None, "up_s": up_s, "up_t": None}
        seg_t = None
        if cfg.stage == 2 or cfg.uses_cos or cfg.uses_adv:
            taps_t, logits_t, up_t = net.forward_taps(tgt.image)
            parts["up_t"] = up_t
            pseudo = self.pseudo[tgt.seed] if cfg.stage == 2 else None
            if pseudo is not None:
                seg_t = softmax_cross_entropy(up_t, pseudo)
                parts["seg"].append(seg_t)
            if cfg.uses_cos:
                parts["cos"] = self._cos_loss(
                    src, taps_s, logits_s, up_s, taps_t, logits_t, up_t, pseudo, report, update_bank
                )
            if cfg.uses_adv:
                parts["adv"] = adv_loss(self.disc, softmax(up_t))

        total = al.total_loss(cfg.stage, seg_s, seg_t, parts["cos"], cfg.lambda_cos if cfg.uses_cos else 0.0)
        if parts["adv"] is not None:
            total = total + scale(parts["adv"], cfg.lambda_adv)
        return total, parts

    def _cos_loss(self, src, taps_s, logits_s, up_s, taps_t, logits_t, up_t, pseudo, report, update_bank) -> Tensor:
        cfg, C = self.cfg, self.num_classes
        if not cfg.uses_split:
            f_t, f_s = taps_t[0], taps_s[0]
            h, w = f_t.shape[1:]
            governing = self._governing(logits_t, up_t, pseudo, h, w, from_full=False)
            loss, matrix = al.unsplit_cosine_loss(f_t, governing, f_s, nearest_resize(src.label, h, w), cfg.t_cos, C)
            report.matrix_rows = 0 if matrix is None else matrix.values.shape[0]
            return loss

        n_taps = 3 if cfg.multi_layer else 1
        src_splits, tgt_splits = [], []
        for l in range(n_taps):
            f_s, f_t = taps_s[l], taps_t[l]
            h, w = f_s.shape[1:]
            label_small = nearest_resize(src.label, h, w)
            if cfg.multi_layer:
                pred_small = nearest_resize(argmax_labels(up_s.data), h, w)
                src_splits.append(al.split_source_by_prediction(f_s, pred_small, label_small))
            else:
                src_splits.append(al.split_source(f_s, logits_s, label_small))
            tgt_splits.append(al.split_target(f_t, self._governing(logits_t, up_t, pseudo, h, w, cfg.multi_layer)))

        if cfg.uses_dictionary:
            banks = self.dictionaries
            if cfg.enqueue_first and update_bank:
                for d, s in zip(banks, src_splits):
                    d.enqueue(s)
        else:
            banks = [al.FeatureDictionary.from_split(s) for s in src_splits]

        if cfg.multi_layer:
            loss, skipped = al.multi_layer_cosine_loss(tgt_splits, banks, cfg.t_cos, C)
            report.skipped = sorted(set().union(*skipped))
        else:
            matrices, skipped = al.class_similarities(tgt_splits[0], banks[0], cfg.t_cos)
            loss = al.cosine_loss(matrices, cfg.t_cos, C)
            report.skipped = skipped
            report.matched = [m.class_id for m in matrices]
            report.matrix_rows = sum(m.values.shape[0] for m in matrices)

        if cfg.uses_dictionary and not cfg.enqueue_first and update_bank:
            for d, s in zip(banks, src_splits):
                d.enqueue(s)
        return loss

    def _governing(self, logits_t, up_t, pseudo, h, w, from_full: bool) -> np.ndarray:
        """Class map that splits the target features at resolution h x w."""
        if from_full:
            pred = nearest_resize(argmax_labels(up_t.data), h, w)
        else:
            pred = argmax_labels(logits_t.data)
        if pseudo is None:
            return pred
        return al.augment_pseudo_label(nearest_resize(pseudo, h, w), pred)

    # -- loop -------------------------------------------------------------------
    def evaluate(self) -> tuple[list[float], float]:
        return evaluate(self.net, self.eval_scenes)

    def _window_losses(self) -> dict[str, float]:
        n = self.window[3]
        if n == 0:
            return {"seg": float("nan"), "cos": float("nan"), "adv": float("nan")}
        return {k: float(self.window[i] / n) for i, k in enumerate(("seg", "cos", "adv"))}

    def run(self, out_dir=None) -> list[str]:
        cfg = self.cfg
        out = Path(out_dir or cfg.out or ".")
        out.mkdir(parents=True, exist_ok=True)
        logfile = MetricsLog(out / "metrics.csv", out / "metrics.jsonl", keep_until=self.iteration if cfg.resume else None)
        with open(out / "config.txt", "w", encoding="utf-8") as fh:
            fh.write(cfg.to_text())
        if self.iteration == 0:
            self._eval_row(logfile)
        while self.iteration < cfg.max_iter:
            self.step()
            if self.iteration % cfg.eval_every == 0 or self.iteration == cfg.max_iter:
                self._eval_row(logfile)
                # resume point that agrees with the rows already on disk
                self.save(out / "last.ckpt")
        self.save(out / "final.ckpt")
        return logfile.rows

    def _eval_row(self, logfile: MetricsLog) -> None:
        per_class, m = self.evaluate() if self.eval_scenes else ([float("nan")] * self.num_classes, float("nan"))
        logfile.append(self.iteration, per_class, m, self._window_losses())
        log.info("iter %d  mIoU %.4f  seg %.4f", self.iteration, m, self._window_losses()["seg"])
        self.window[:] = 0.0

    # -- persistence --------------------------------------------------------------
    def state_entries(self) -> dict[str, np.ndarray]:
        entries = ck.with_prefix("seg", self.net.state_dict())
        entries.update(ck.with_prefix("opt", self.opt.state_dict()))
        if len(self.dictionaries) == 1:
            entries.update(ck.with_prefix("dict", self.dictionaries[0].state_dict()))
        else:
            for l, d in enumerate(self.dictionaries, 1):
                entries.update(ck.with_prefix(f"tap{l}/dict", d.state_dict()))
        if self.disc is not None:
            entries.update(ck.with_prefix("disc", self.disc.state_dict()))
            entries.update(ck.with_prefix("discopt", self.disc_opt.state_dict()))
        entries["meta/window"] = self.window.astype(np.float32)
        entries["meta/num_classes"] = np.array([self.num_classes], np.float32)
        return entries

    def save(self, path) -> None:
        ck.save_checkpoint(path, self.state_entries())

    def load(self, path) -> None:
        entries = ck.load_checkpoint(path)
        self.net.load_state_dict(ck.strip_prefix("seg", entries))
        self.opt.load_state_dict(ck.strip_prefix("opt", entries))
        if len(self.dictionaries) == 1:
            self.dictionaries[0].load_state_dict(ck.strip_prefix("dict", entries))
        else:
            for l, d in enumerate(self.dictionaries, 1):
                d.load_state_dict(ck.strip_prefix(f"tap{l}/dict", entries))
        if self.disc is not None:
            self.disc.load_state_dict(ck.strip_prefix("disc", entries))
            self.disc_opt.load_state_dict(ck.strip_prefix("discopt", entries))
        if "meta/window" in entries:
            self.window = entries["meta/window"].astype(np.float32)


def load_net(path) -> SegNet:
    entries = ck.load_checkpoint(path)
    state = ck.strip_prefix("seg", entries)
    num_classes = state["H.cls.bias"].shape[0]
    feature_dim = state["F.conv3.bias"].shape[0]
    net = SegNet(num_classes, feature_dim)
    net.load_state_dict(state)
    return net


def train_stage1(cfg: RunConfig, **kwargs) -> Trainer:
    if cfg.stage != 1:
        raise ConfigError("train_stage1 needs stage = 1")
    trainer = Trainer(cfg, **kwargs)
    trainer.run()
    return trainer


def train_stage2(cfg: RunConfig, **kwargs) -> Trainer:
    if cfg.stage != 2:
        raise ConfigError("train_stage2 needs stage = 2")
    trainer = Trainer(cfg, **kwargs)
    trainer.run()
    return trainer
