"""Toy segmentation network: extractor F, 1x1 classification head H, bilinear upsampling."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .numerics import Tensor, bilinear_resize, conv2d, relu


class ConfigError(ValueError):
    pass


# (name, c_in, c_out, kernel, stride, pad); c_out None means the feature size k
EXTRACTOR_LAYERS = (
    ("conv1", 3, 16, 3, 2, 1),
    ("conv2", 16, 32, 3, 2, 1),
    ("conv3", 32, None, 3, 1, 1),
)


def kaiming_uniform(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


class SegNet:
    def __init__(self, num_classes: int = 5, feature_dim: int = 32, seed: int = 0, in_channels: int = 3):
        if num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {num_classes}")
        self.num_classes = num_classes
        self.feature_dim = feature_dim
        self.downsample_factor = 4
        rng = np.random.default_rng(seed)
        self.extractor_params: dict[str, Tensor] = {}
        c_prev = in_channels
        for name, _, c_out, k, _, _ in EXTRACTOR_LAYERS:
            c_out = feature_dim if c_out is None else c_out
            self.extractor_params[f"{name}.weight"] = Tensor(
                kaiming_uniform(rng, (c_out, c_prev, k, k)), requires_grad=True, name=f"F.{name}.weight"
            )
            self.extractor_params[f"{name}.bias"] = Tensor(
                np.zeros(c_out, np.float32), requires_grad=True, name=f"F.{name}.bias"
            )
            c_prev = c_out
        self.head_params: dict[str, Tensor] = {
            "cls.weight": Tensor(
                kaiming_uniform(rng, (num_classes, feature_dim, 1, 1)), requires_grad=True, name="H.cls.weight"
            ),
            "cls.bias": Tensor(np.zeros(num_classes, np.float32), requires_grad=True, name="H.cls.bias"),
        }

    def named_parameters(self) -> dict[str, Tensor]:
        out = {f"F.{k}": v for k, v in self.extractor_params.items()}
        out.update({f"H.{k}": v for k, v in self.head_params.items()})
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def _check_input(self, image) -> Tensor:
        image = image if isinstance(image, Tensor) else Tensor(image)
        if image.ndim != 3:
            raise ValueError(f"image must be [3,H,W], got shape {image.shape}")
        _, h, w = image.shape
        ds = self.downsample_factor
        if h % ds or w % ds:
            raise ValueError(f"image size {h}x{w} is not divisible by the downsample factor {ds}")
        return image

    def extract_taps(self, image) -> list[Tensor]:
        """Feature maps after each extractor block, deepest first."""
        x = self._check_input(image)
        taps = []
        for name, _, _, _, stride, pad in EXTRACTOR_LAYERS:
            p = self.extractor_params
            x = relu(conv2d(x, p[f"{name}.weight"], p[f"{name}.bias"], stride=stride, pad=pad))
            taps.append(x)
        return taps[::-1]

    def head(self, feature: Tensor) -> Tensor:
        return conv2d(feature, self.head_params["cls.weight"], self.head_params["cls.bias"])

    def forward(self, image) -> tuple[Tensor, Tensor, Tensor]:
        """Returns (feature [k,h,w], logits [C,h,w], upsampled logits [C,H,W])."""
        taps = self.extract_taps(image)
        return self._finish(taps[0], image)

    def forward_taps(self, image) -> tuple[list[Tensor], Tensor, Tensor]:
        taps = self.extract_taps(image)
        _, logits, upsampled = self._finish(taps[0], image)
        return taps, logits, upsampled

    def _finish(self, feature: Tensor, image) -> tuple[Tensor, Tensor, Tensor]:
        logits = self.head(feature)
        h, w = np.shape(image.data if isinstance(image, Tensor) else image)[1:]
        return feature, logits, bilinear_resize(logits, h, w)

    __call__ = forward

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters().items()}

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        params = self.named_parameters()
        missing = sorted(set(params) - set(state))
        if missing:
            raise KeyError(f"checkpoint is missing parameters: {', '.join(missing)}")
        for k, p in params.items():
            arr = np.asarray(state[k], dtype=np.float32)
            if arr.shape != p.shape:
                raise ValueError(f"parameter {k}: checkpoint shape {arr.shape} != model shape {p.shape}")
            p.data = arr.copy()


def poly_lr(base_lr: float, iteration: int, max_iter: int, power: float = 0.9) -> float:
    if max_iter <= 0:
        raise ValueError("poly_lr needs max_iter > 0")
    if not 0 <= iteration <= max_iter:
        raise ValueError(f"iteration {iteration} outside [0, {max_iter}]")
    return base_lr * (1.0 - iteration / max_iter) ** power


@dataclass
class OptimState:
    learning_rate: float
    weight_decay: float = 5e-4
    momentum: float = 0.9
    iteration: int = 0
    max_iterations: int = 1
    buffers: dict[str, np.ndarray] = field(default_factory=dict)

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {f"v/{k}": v.copy() for k, v in self.buffers.items()}
        out["iteration"] = np.array([self.iteration], np.float32)
        return out

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        self.buffers = {k[2:]: np.array(v, copy=True) for k, v in state.items() if k.startswith("v/")}
        self.iteration = int(state["iteration"][0])


def _require_grads(params: Mapping[str, Tensor]) -> None:
    for name, p in params.items():
        if p.grad is None:
            raise ValueError(f"parameter {name} has no gradient")


def sgd_step(state: OptimState, params: Mapping[str, Tensor]) -> None:
    """v <- m*v + (g + wd*p); p <- p - lr*v. Clears gradients afterwards."""
    if state.iteration >= state.max_iterations:
        raise RuntimeError(f"optimizer already ran {state.iteration} of {state.max_iterations} iterations")
    _require_grads(params)
    lr = np.float32(state.learning_rate)
    for name, p in params.items():
        d = p.grad + np.float32(state.weight_decay) * p.data if state.weight_decay else p.grad
        if state.momentum:
            buf = state.buffers.get(name)
            buf = d.copy() if buf is None else np.float32(state.momentum) * buf + d
            state.buffers[name] = buf
            d = buf
        p.data = (p.data - lr * d).astype(p.data.dtype)
        p.grad = None
    state.iteration += 1


@dataclass
class AdamState:
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8
    step_count: int = 0
    first: dict[str, np.ndarray] = field(default_factory=dict)
    second: dict[str, np.ndarray] = field(default_factory=dict)

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {f"m/{k}": v.copy() for k, v in self.first.items()}
        out.update({f"s/{k}": v.copy() for k, v in self.second.items()})
        out["step"] = np.array([self.step_count], np.float32)
        return out

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        self.first = {k[2:]: np.array(v, copy=True) for k, v in state.items() if k.startswith("m/")}
        self.second = {k[2:]: np.array(v, copy=True) for k, v in state.items() if k.startswith("s/")}
        self.step_count = int(state["step"][0])


def adam_step(state: AdamState, params: Mapping[str, Tensor]) -> None:
    _require_grads(params)
    state.step_count += 1
    t = state.step_count
    b1, b2 = np.float32(state.beta1), np.float32(state.beta2)
    corr1 = 1.0 - state.beta1**t
    corr2 = 1.0 - state.beta2**t
    for name, p in params.items():
        g = p.grad
        m = state.first.get(name, np.zeros_like(p.data))
        s = state.second.get(name, np.zeros_like(p.data))
        m = b1 * m + (1 - b1) * g
        s = b2 * s + (1 - b2) * g * g
        state.first[name], state.second[name] = m, s
        update = (m / np.float32(corr1)) / (np.sqrt(s / np.float32(corr2)) + np.float32(state.eps))
        p.data = (p.data - np.float32(state.learning_rate) * update).astype(p.data.dtype)
        p.grad = None
