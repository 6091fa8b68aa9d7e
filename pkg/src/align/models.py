"""Classifier and masker networks built on :mod:`align.tensor`."""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor, avg_pool2x2, conv2d, no_grad, softmax


class Module:
    """Minimal parameter container: named learnable tensors plus named buffers."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._buffers: dict[str, np.ndarray] = {}
        self.training = True

    def add_param(self, name: str, shape) -> Tensor:
        t = Tensor(np.zeros(shape), requires_grad=True, name=name)
        self._params[name] = t
        return t

    def named_params(self) -> list[tuple[str, Tensor]]:
        return list(self._params.items())

    def params(self) -> list[Tensor]:
        return list(self._params.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data.copy() for name, p in self._params.items()}
        state.update({name: b.copy() for name, b in self._buffers.items()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        expected = {n: a.shape for n, a in self.state_dict().items()}
        got = {n: np.shape(a) for n, a in state.items()}
        if expected != got:
            raise ValueError("state mismatch:\n" + shape_diff(expected, got))
        for name, p in self._params.items():
            p.data = np.array(state[name], dtype=np.float64)
        for name in self._buffers:
            self._buffers[name] = np.array(state[name], dtype=np.float64)

    def reset_buffers(self) -> None:
        for name, b in self._buffers.items():
            self._buffers[name] = np.ones_like(b) if name.endswith("running_var") else np.zeros_like(b)

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad = None

    def train(self) -> "Module":
        self.training = True
        return self

    def eval(self) -> "Module":
        self.training = False
        return self

    def __call__(self, x: Tensor):
        return self.forward(x)


def shape_diff(expected: dict, got: dict) -> str:
    lines = []
    for name in sorted(set(expected) | set(got)):
        e, g = expected.get(name), got.get(name)
        if e is None:
            lines.append(f"  unexpected {name}: {tuple(g)}")
        elif g is None:
            lines.append(f"  missing    {name}: expected {tuple(e)}")
        elif tuple(e) != tuple(g):
            lines.append(f"  shape      {name}: expected {tuple(e)}, got {tuple(g)}")
    return "\n".join(lines)


@contextlib.contextmanager
def frozen(*modules: Module):
    """Temporarily stop gradients from being recorded for the modules' params."""
    saved = [(p, p.requires_grad) for m in modules for p in m.params()]
    for p, _ in saved:
        p.requires_grad = False
    try:
        yield
    finally:
        for p, flag in saved:
            p.requires_grad = flag


def init_params(net: Module, seed: int) -> Module:
    """He-uniform weights (bound sqrt(6/fan_in)); zero biases; BN scale 1, shift 0."""
    rng = np.random.default_rng(seed)
    for name, p in net.named_params():
        if name.endswith(".weight") and p.ndim in (2, 4):
            fan_in = int(np.prod(p.shape[1:])) if p.ndim == 4 else p.shape[0]
            bound = np.sqrt(6.0 / fan_in)
            p.data = rng.uniform(-bound, bound, size=p.shape)
        elif name.endswith(".gamma"):
            p.data = np.ones(p.shape)
        else:
            p.data = np.zeros(p.shape)
        p.grad = None
    net.reset_buffers()
    return net


class ClassifierNet(Module):
    """Stacked (conv3x3 -> ReLU -> 2x2 avg-pool) stages, global average pool, dense head.

    The post-ReLU output of stage ``cam_layer_index`` is returned with every
    forward pass as the Grad-CAM activation.
    """

    def __init__(self, in_channels: int = 3, num_classes: int = 4,
                 channels: tuple[int, ...] = (16, 32, 64), cam_layer_index: int | None = None):
        super().__init__()
        if cam_layer_index is None:
            cam_layer_index = len(channels) - 1
        if not 0 <= cam_layer_index < len(channels):
            raise ValueError(f"cam_layer_index {cam_layer_index} is not a valid stage")
        self.channels = tuple(channels)
        self.num_classes = num_classes
        self.in_channels = in_channels
        self.cam_layer_index = cam_layer_index
        prev = in_channels
        for i, c in enumerate(channels):
            self.add_param(f"conv{i}.weight", (c, prev, 3, 3))
            self.add_param(f"conv{i}.bias", (c,))
            prev = c
        self.add_param("head.weight", (prev, num_classes))
        self.add_param("head.bias", (num_classes,))
        self.cached_activation: Tensor | None = None

    def forward(self, x: Tensor):
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ValueError(f"classifier expects (N,{self.in_channels},H,W), got {x.shape}")
        div = 2 ** len(self.channels)
        if x.shape[2] % div or x.shape[3] % div:
            raise ValueError(f"spatial size {x.shape[2:]} must be divisible by {div}")
        h = x
        act = None
        for i in range(len(self.channels)):
            h = conv2d(h, self._params[f"conv{i}.weight"], self._params[f"conv{i}.bias"], padding=1).relu()
            if i == self.cam_layer_index:
                act = h
            h = avg_pool2x2(h)
        pooled = h.mean((2, 3))
        n = x.shape[0]
        logits = pooled @ self._params["head.weight"] + \
            self._params["head.bias"].reshape(1, self.num_classes).expand(n, self.num_classes)
        self.cached_activation = act
        return logits, softmax(logits, axis=1), act

    def predict_proba(self, x: np.ndarray | Tensor, batch_size: int = 64) -> np.ndarray:
        arr = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
        out = []
        with no_grad():
            for i in range(0, len(arr), batch_size):
                out.append(self.forward(Tensor(arr[i:i + batch_size]))[1].data)
        return np.concatenate(out, axis=0)


@dataclass
class BatchNormState:
    channels: int
    momentum: float = 0.1
    eps: float = 1e-5
    running_mean: np.ndarray = field(default=None)
    running_var: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.running_mean is None:
            self.running_mean = np.zeros(self.channels)
        if self.running_var is None:
            self.running_var = np.ones(self.channels)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState,
               training: bool, update_stats: bool = True) -> Tensor:
    n, c, h, w = x.shape
    if training:
        mu = x.mean((0, 2, 3), keepdims=True)
        centered = x - mu.expand(x.shape)
        var = (centered * centered).mean((0, 2, 3), keepdims=True)
        if update_stats:
            m = state.momentum
            count = n * h * w
            unbiased = var.data.reshape(c) * count / max(count - 1, 1)
            state.running_mean = (1 - m) * state.running_mean + m * mu.data.reshape(c)
            state.running_var = (1 - m) * state.running_var + m * unbiased
        xhat = centered / ((var + state.eps) ** 0.5).expand(x.shape)
    else:
        mu = Tensor(state.running_mean.reshape(1, c, 1, 1)).expand(x.shape)
        std = Tensor(np.sqrt(state.running_var + state.eps).reshape(1, c, 1, 1)).expand(x.shape)
        xhat = (x - mu) / std
    return xhat * gamma.reshape(1, c, 1, 1).expand(x.shape) + beta.reshape(1, c, 1, 1).expand(x.shape)


class MaskerNet(Module):
    """Two (3x3 conv -> ReLU -> batch-norm) blocks and a 1x1 conv with sigmoid."""

    def __init__(self, in_channels: int = 3, hidden: int = 16, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.in_channels = in_channels
        self.hidden = hidden
        self.add_param("block1.weight", (hidden, in_channels, 3, 3))
        self.add_param("block1.bias", (hidden,))
        self.add_param("bn1.gamma", (hidden,))
        self.add_param("bn1.beta", (hidden,))
        self.add_param("block2.weight", (hidden, hidden, 3, 3))
        self.add_param("block2.bias", (hidden,))
        self.add_param("bn2.gamma", (hidden,))
        self.add_param("bn2.beta", (hidden,))
        self.add_param("block3.weight", (1, hidden, 1, 1))
        self.add_param("block3.bias", (1,))
        self.bn = [BatchNormState(hidden, momentum, eps), BatchNormState(hidden, momentum, eps)]
        self._params["bn1.gamma"].data[:] = 1.0
        self._params["bn2.gamma"].data[:] = 1.0
        self.update_stats = True

    # running statistics live in BatchNormState; expose them as checkpoint buffers
    @property
    def _buffers(self):
        return {
            "bn1.running_mean": self.bn[0].running_mean, "bn1.running_var": self.bn[0].running_var,
            "bn2.running_mean": self.bn[1].running_mean, "bn2.running_var": self.bn[1].running_var,
        }

    @_buffers.setter
    def _buffers(self, value):
        pass

    def reset_buffers(self) -> None:
        for st in self.bn:
            st.running_mean = np.zeros(self.hidden)
            st.running_var = np.ones(self.hidden)

    def load_state_dict(self, state):
        super().load_state_dict(state)
        for i in (0, 1):
            self.bn[i].running_mean = np.array(state[f"bn{i + 1}.running_mean"], dtype=np.float64)
            self.bn[i].running_var = np.array(state[f"bn{i + 1}.running_var"], dtype=np.float64)

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ValueError(f"masker expects (N,{self.in_channels},H,W), got {x.shape}")
        p = self._params
        h = conv2d(x, p["block1.weight"], p["block1.bias"], padding=1).relu()
        h = batch_norm(h, p["bn1.gamma"], p["bn1.beta"], self.bn[0], self.training, self.update_stats)
        h = conv2d(h, p["block2.weight"], p["block2.bias"], padding=1).relu()
        h = batch_norm(h, p["bn2.gamma"], p["bn2.beta"], self.bn[1], self.training, self.update_stats)
        return conv2d(h, p["block3.weight"], p["block3.bias"]).sigmoid()


def init_masker(seed: int, in_channels: int = 3, hidden: int = 16) -> MaskerNet:
    return init_params(MaskerNet(in_channels, hidden), seed)


def init_classifier(seed: int, in_channels: int = 3, num_classes: int = 4,
                    channels=(16, 32, 64), cam_layer_index: int | None = None) -> ClassifierNet:
    return init_params(ClassifierNet(in_channels, num_classes, channels, cam_layer_index), seed)
