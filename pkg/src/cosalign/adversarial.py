"""Output-space adversarial baseline: a fully convolutional domain discriminator."""

from __future__ import annotations

from typing import Mapping

import numpy as np

from .numerics import Tensor, add, clamped_log, conv2d, leaky_relu, one_minus, scale, sigmoid, sum_all
from .segnet import kaiming_uniform

LEAKY_SLOPE = 0.2
MIN_INPUT = 32
DEFAULT_CHANNELS = (64, 128, 256, 512, 1)


class Discriminator:
    """Five 4x4 stride-2 convolutions (pad 1), leaky ReLU 0.2 between, sigmoid on top."""

    def __init__(self, in_channels: int, channels=DEFAULT_CHANNELS, seed: int = 0):
        if len(channels) != 5 or channels[-1] != 1:
            raise ValueError(f"discriminator needs 5 layers ending in 1 channel, got {channels}")
        rng = np.random.default_rng(seed)
        self.channels = tuple(channels)
        self.params: dict[str, Tensor] = {}
        c_prev = in_channels
        for i, c in enumerate(channels, 1):
            self.params[f"conv{i}.weight"] = Tensor(kaiming_uniform(rng, (c, c_prev, 4, 4)), requires_grad=True)
            self.params[f"conv{i}.bias"] = Tensor(np.zeros(c, np.float32), requires_grad=True)
            c_prev = c

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def __call__(self, x: Tensor, frozen: bool = False) -> Tensor:
        """``frozen`` runs on constant copies of the weights, so no gradient reaches them."""
        _, h, w = x.shape
        if h < MIN_INPUT or w < MIN_INPUT:
            raise ValueError(f"discriminator input must be at least {MIN_INPUT}x{MIN_INPUT}, got {h}x{w}")
        params = {k: v.detach() for k, v in self.params.items()} if frozen else self.params
        for i in range(1, 6):
            x = conv2d(x, params[f"conv{i}.weight"], params[f"conv{i}.bias"], stride=2, pad=1)
            if i < 5:
                x = leaky_relu(x, LEAKY_SLOPE)
        return sigmoid(x)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        for k, p in self.params.items():
            if k not in state:
                raise KeyError(f"discriminator checkpoint is missing {k}")
            p.data = np.asarray(state[k], np.float32).copy()


def _check_prob(out: Tensor) -> None:
    d = out.data
    if d.size and (d.min() < 0.0 or d.max() > 1.0 or not np.isfinite(d).all()):
        raise ValueError("discriminator output must lie in [0, 1]; is the final sigmoid missing?")


def adv_loss_from_output(d_target: Tensor) -> Tensor:
    """-sum log D(P_t)."""
    _check_prob(d_target)
    return scale(sum_all(clamped_log(d_target)), -1.0)


def disc_loss_from_outputs(d_source: Tensor, d_target: Tensor) -> Tensor:
    """-sum [log(1 - D(P_t)) + log D(P_s)]."""
    _check_prob(d_source)
    _check_prob(d_target)
    return scale(add(sum_all(clamped_log(one_minus(d_target))), sum_all(clamped_log(d_source))), -1.0)


def adv_loss(disc: Discriminator, target_pred: Tensor) -> Tensor:
    """Loss for the segmentation network; discriminator weights receive no gradient."""
    return adv_loss_from_output(disc(target_pred, frozen=True))


def disc_loss(disc: Discriminator, source_pred: Tensor, target_pred: Tensor) -> Tensor:
    """Loss for the discriminator; inputs are detached from the segmentation graph."""
    return disc_loss_from_outputs(disc(source_pred.detach()), disc(target_pred.detach()))
