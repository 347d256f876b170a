"""Gradient-check battery: every differentiable primitive plus the full objectives."""

from __future__ import annotations

import numpy as np

from .. import alignment as al
from ..adversarial import Discriminator, adv_loss, disc_loss
from ..numerics import (
    GradCheckReport,
    Tensor,
    add,
    bilinear_resize,
    clamped_log,
    conv2d,
    grad_check,
    leaky_relu,
    one_minus,
    relu,
    scale,
    sigmoid,
    softmax,
    softmax_cross_entropy,
    sum_all,
)
from ..synthdata import generate_scene
from .config import RunConfig, replace
from .train import Trainer

TOLERANCE = 1e-3


def _away_from_zero(rng: np.random.Generator, shape, margin: float = 1e-2) -> np.ndarray:
    """Normal samples with no entry closer than ``margin`` to a kink at 0."""
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin, x)


def _weighted(out: Tensor, weights: np.ndarray) -> Tensor:
    """A scalar with a non-uniform upstream gradient, so transposes are exercised."""
    w = Tensor(weights.astype(out.data.dtype))
    return sum_all(_mul_const(out, w))


def _mul_const(x: Tensor, w: Tensor) -> Tensor:
    return Tensor.from_op(x.data * w.data, (x,), lambda g: (g * w.data,))


def primitive_checks(seed: int = 0, tolerance: float = TOLERANCE) -> list[GradCheckReport]:
    rng = np.random.default_rng(seed)
    reports = []

    def check(name, closure, inputs, weight_shape=None, **kw):
        if weight_shape is not None:
            w = rng.normal(size=weight_shape)
            inner = closure
            closure = lambda *xs: _weighted(inner(*xs), w)  # noqa: E731
        reports.append(grad_check(closure, inputs, tolerance, op_name=name, **kw))

    x = Tensor(rng.normal(size=(2, 5, 6)))
    wt = Tensor(rng.normal(size=(3, 2, 3, 3)))
    b = Tensor(rng.normal(size=3))
    check("conv2d", lambda x, w, b: conv2d(x, w, b, stride=2, pad=1), [x, wt, b], (3, 3, 3))
    check("conv2d_4x4", lambda x, w, b: conv2d(x, w, b, stride=2, pad=1),
          [Tensor(rng.normal(size=(2, 8, 8))), Tensor(rng.normal(size=(3, 2, 4, 4))), Tensor(rng.normal(size=3))],
          (3, 4, 4))
    check("relu", relu, [Tensor(_away_from_zero(rng, (3, 4)))], (3, 4))
    check("leaky_relu", lambda t: leaky_relu(t, 0.2), [Tensor(_away_from_zero(rng, (3, 4)))], (3, 4))
    check("sigmoid", sigmoid, [Tensor(rng.normal(size=(3, 4)))], (3, 4))
    check("clamped_log", clamped_log, [Tensor(rng.uniform(0.1, 1.0, size=(3, 4)))], (3, 4))
    check("one_minus", one_minus, [Tensor(rng.normal(size=(3, 4)))], (3, 4))
    check("add", add, [Tensor(rng.normal(size=(2, 3))), Tensor(rng.normal(size=(2, 3)))], (2, 3))
    check("scale", lambda t: scale(t, 0.37), [Tensor(rng.normal(size=(2, 3)))], (2, 3))
    check("softmax", softmax, [Tensor(rng.normal(size=(4, 3, 2)))], (4, 3, 2))
    check("bilinear_resize", lambda t: bilinear_resize(t, 7, 5), [Tensor(rng.normal(size=(2, 3, 4)))], (2, 7, 5))

    target = rng.integers(0, 4, size=(2, 2))
    check("softmax_cross_entropy", lambda t: softmax_cross_entropy(t, target), [Tensor(rng.normal(size=(3, 2, 2)))])

    feat = Tensor(rng.normal(size=(4, 3, 3)))
    idx = np.array([0, 2, 5, 7])
    check("gather_pixels", lambda f: al.gather_pixels(f, idx), [feat], (4, 4))

    bank = rng.normal(size=(6, 4))
    check("cosine_matrix", lambda t: al.cosine_matrix(t, bank), [Tensor(rng.normal(size=(5, 4)))], (5, 6))

    def cos_loss(t):
        values = al.cosine_matrix(t, bank)
        return al.cosine_loss([al.SimilarityMatrix(1, values, 0.0)], 0.0, 2)

    check("cosine_loss", cos_loss, [Tensor(rng.normal(size=(5, 4)))])

    disc = Discriminator(3, channels=(4, 4, 4, 4, 1), seed=seed)
    pred = Tensor(rng.dirichlet(np.ones(3), size=(32, 32)).transpose(2, 0, 1))
    check("adv_loss", lambda p: adv_loss(disc, p), [pred])
    src_pred = Tensor(rng.dirichlet(np.ones(3), size=(32, 32)).transpose(2, 0, 1))
    check("disc_loss", lambda *ps: disc_loss(disc, src_pred, pred), disc.parameters(), max_coords=8, seed=seed)
    return reports


def target_feature_check(seed: int = 0, tolerance: float = TOLERANCE) -> GradCheckReport:
    """Stage-2 total loss w.r.t. a 4x4x8 target feature map."""
    rng = np.random.default_rng(seed)
    k, C, ds = 8, 3, 4
    feature = Tensor(rng.uniform(0.05, 1.0, size=(k, 4, 4)))
    head_w = Tensor(rng.normal(size=(C, k, 1, 1)))
    head_b = Tensor(rng.normal(size=C))
    pseudo = rng.integers(0, C + 1, size=(4 * ds, 4 * ds)).astype(np.uint8)
    pseudo_small = pseudo[::ds, ::ds]
    dictionary = al.FeatureDictionary(16, k)
    for c in range(1, C + 1):
        dictionary.push(c, rng.uniform(0.0, 1.0, size=(5, k)))
    seg_source = Tensor(2.0)

    def total(f):
        logits = conv2d(f, head_w, head_b)
        seg_target = softmax_cross_entropy(bilinear_resize(logits, 4 * ds, 4 * ds), pseudo)
        governing = al.augment_pseudo_label(pseudo_small, al.argmax_labels(logits.data))
        matrices, _ = al.class_similarities(al.split_target(f, governing), dictionary, 0.6)
        cos = al.cosine_loss(matrices, 0.6, C)
        return al.total_loss(2, seg_source, seg_target, cos, 0.01)

    return grad_check(total, [feature], tolerance, op_name="total_loss_stage2_wrt_target_feature")


def _scene_pair(seed: int, size: int = 32):
    src = generate_scene(seed, "source", height=size, width=size)
    tgt = generate_scene(seed + 1, "target", height=size, width=size)
    return src, tgt


def objective_check(stage: int, seed: int = 0, tolerance: float = TOLERANCE, coords_per_param: int = 24,
                    warmup: int = 12, variant: str = "ours") -> GradCheckReport:
    """Full training objective w.r.t. every network parameter on a 32x32 scene pair.

    The network is first trained for ``warmup`` steps so the dictionary is populated
    and the check runs from a mid-training state. Each parameter tensor is probed
    at ``coords_per_param`` random entries.
    """
    src, tgt = _scene_pair(1000 + seed)
    pseudo = None
    if stage == 2:
        mask = np.random.default_rng(seed).random(tgt.label.shape) < 0.3
        pseudo = {tgt.seed: np.where(mask, 0, tgt.label).astype(np.uint8)}
    cfg = replace(RunConfig(), stage=stage, variant=variant, max_iter=warmup + 1, lr=1e-5, seed=seed,
                  dict_size=64, lambda_cos=1.0)
    trainer = Trainer(cfg, [src], [tgt], [], pseudo=pseudo, num_classes=5)
    for _ in range(warmup):
        trainer.step()
    params = trainer.net.parameters()
    report = grad_check(
        lambda *ps: trainer.objective(src, tgt, update_bank=False)[0],
        params,
        tolerance,
        step=1e-5,
        op_name=f"total_loss_stage{stage}_{variant}",
        max_coords=coords_per_param,
        seed=seed,
    )
    return report


def run_all(seed: int = 0, tolerance: float = TOLERANCE) -> list[GradCheckReport]:
    reports = primitive_checks(seed, tolerance)
    reports.append(target_feature_check(seed, tolerance))
    reports.append(objective_check(1, seed, tolerance))
    reports.append(objective_check(2, seed, tolerance))
    return reports
