"""Small classifiers expressed over the tape primitives.

Two families share one interface: a convolutional net for image work and a
plain fully connected net for cheap tests.  Parameters live in name-keyed
dicts of numpy arrays so they can be saved, perturbed, and updated without
touching a tape; each loss evaluation wraps them in fresh tracked tensors.
Every net also exposes ``features``, the penultimate representation feeding
the linear readout, which the feature-matching objective consumes.
"""

from __future__ import annotations

import re

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, ShapeError

NORMS = ("instance", "none")


class ConvNet:
    """Depth x (3x3 conv, per-channel norm, relu, 2x2 mean-pool), then a
    single linear readout.  Stride-1 convolutions with pad 1 keep the
    spatial size; pooling halves it (floor) after every block."""

    def __init__(self, in_channels: int, image_hw: tuple[int, int], num_classes: int,
                 width: int = 128, depth: int = 3, norm: str = "instance"):
        if norm not in NORMS:
            raise ConfigError(f"norm must be one of {NORMS}, got {norm!r}")
        if depth < 1:
            raise ConfigError("depth must be >= 1")
        self.in_channels = int(in_channels)
        self.image_hw = (int(image_hw[0]), int(image_hw[1]))
        self.num_classes = int(num_classes)
        self.width = int(width)
        self.depth = int(depth)
        self.norm = norm
        h, w = self.image_hw
        for _ in range(self.depth):
            h, w = h // 2, w // 2
            if h == 0 or w == 0:
                raise ConfigError(
                    f"image {self.image_hw} too small for depth {self.depth}")
        self.feat_hw = (h, w)
        self.flat_features = self.width * h * w

    # ------------------------------------------------------------------
    # identity

    @property
    def arch_id(self) -> str:
        c, (h, w) = self.in_channels, self.image_hw
        return (f"convnet:d={self.depth},w={self.width},in={c}x{h}x{w},"
                f"classes={self.num_classes},norm={self.norm}")

    @classmethod
    def from_arch_id(cls, arch: str) -> "ConvNet":
        m = re.fullmatch(
            r"convnet:d=(\d+),w=(\d+),in=(\d+)x(\d+)x(\d+),classes=(\d+),norm=(\w+)",
            arch)
        if not m:
            raise ConfigError(f"unrecognized architecture id {arch!r}")
        d, w, c, h, iw, k, norm = *map(int, m.groups()[:6]), m.group(7)
        return cls(c, (h, iw), k, width=w, depth=d, norm=norm)

    # ------------------------------------------------------------------
    # parameters

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes: dict[str, tuple[int, ...]] = {}
        cin = self.in_channels
        for i in range(self.depth):
            shapes[f"block{i}.conv.w"] = (self.width, cin, 3, 3)
            shapes[f"block{i}.conv.b"] = (self.width,)
            if self.norm == "instance":
                shapes[f"block{i}.norm.gamma"] = (self.width,)
                shapes[f"block{i}.norm.beta"] = (self.width,)
            cin = self.width
        shapes["fc.w"] = (self.num_classes, self.flat_features)
        shapes["fc.b"] = (self.num_classes,)
        return shapes

    def param_count(self) -> int:
        return sum(int(np.prod(s)) for s in self.param_shapes().values())

    def init_params(self, seed: int) -> dict[str, np.ndarray]:
        """Uniform(-b, b) weights with b = sqrt(6 / fan_in); biases and norm
        shifts start at zero, norm scales at one."""
        rng = np.random.default_rng(seed)
        params: dict[str, np.ndarray] = {}
        for name, shape in self.param_shapes().items():
            if name.endswith("conv.w"):
                fan_in = int(np.prod(shape[1:]))
                bound = np.sqrt(6.0 / fan_in)
                params[name] = rng.uniform(-bound, bound, size=shape)
            elif name == "fc.w":
                bound = np.sqrt(6.0 / shape[1])
                params[name] = rng.uniform(-bound, bound, size=shape)
            elif name.endswith("gamma"):
                params[name] = np.ones(shape)
            else:
                params[name] = np.zeros(shape)
        return params

    # ------------------------------------------------------------------
    # forward

    def features(self, params: dict, x) -> ad.Tensor:
        """Flattened representation after the last block, before the
        readout."""
        t = ad.as_tensor(x)
        if t.data.ndim != 4 or t.shape[1] != self.in_channels:
            raise ShapeError(
                f"forward: expected (N,{self.in_channels},H,W), got {t.shape}")
        n = t.shape[0]
        for i in range(self.depth):
            w = ad.as_tensor(params[f"block{i}.conv.w"])
            b = ad.as_tensor(params[f"block{i}.conv.b"])
            t = ad.conv2d(t, w, padding=1)
            t = ad.add(t, ad.reshape(b, (1, self.width, 1, 1)))
            if self.norm == "instance":
                t = ad.group_norm(t, params[f"block{i}.norm.gamma"],
                                  params[f"block{i}.norm.beta"],
                                  num_groups=self.width)
            t = ad.relu(t)
            t = ad.avgpool2d(t, 2)
        return ad.reshape(t, (n, self.flat_features))

    def forward(self, params: dict, x) -> ad.Tensor:
        t = self.features(params, x)
        logits = ad.add(ad.matmul(t, ad.transpose(ad.as_tensor(params["fc.w"]))),
                        ad.as_tensor(params["fc.b"]))
        return logits

    def loss(self, params: dict, x, labels) -> ad.Tensor:
        return ad.softmax_cross_entropy(self.forward(params, x), labels)

    def macs_per_image(self, batch: int = 1) -> int:
        """Multiply-accumulate count of one forward pass over ``batch``
        images (convs and the readout; norms and pools are ignored)."""
        total = 0
        cin = self.in_channels
        h, w = self.image_hw
        for _ in range(self.depth):
            total += self.width * cin * 9 * h * w
            cin = self.width
            h, w = h // 2, w // 2
        total += self.flat_features * self.num_classes
        return total * batch


class MLP:
    """Depth x (linear, relu) over the flattened image, then a linear
    readout.  Exists mostly to keep tests and oracles cheap; shares the
    ConvNet parameter and call conventions."""

    def __init__(self, in_channels: int, image_hw: tuple[int, int], num_classes: int,
                 width: int = 16, depth: int = 2):
        if depth < 1:
            raise ConfigError("depth must be >= 1")
        self.in_channels = int(in_channels)
        self.image_hw = (int(image_hw[0]), int(image_hw[1]))
        self.num_classes = int(num_classes)
        self.width = int(width)
        self.depth = int(depth)
        self.in_features = self.in_channels * self.image_hw[0] * self.image_hw[1]

    @property
    def arch_id(self) -> str:
        c, (h, w) = self.in_channels, self.image_hw
        return (f"mlp:d={self.depth},w={self.width},in={c}x{h}x{w},"
                f"classes={self.num_classes}")

    @classmethod
    def from_arch_id(cls, arch: str) -> "MLP":
        m = re.fullmatch(
            r"mlp:d=(\d+),w=(\d+),in=(\d+)x(\d+)x(\d+),classes=(\d+)", arch)
        if not m:
            raise ConfigError(f"unrecognized architecture id {arch!r}")
        d, w, c, h, iw, k = map(int, m.groups())
        return cls(c, (h, iw), k, width=w, depth=d)

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes: dict[str, tuple[int, ...]] = {}
        fan = self.in_features
        for i in range(self.depth):
            shapes[f"layer{i}.w"] = (self.width, fan)
            shapes[f"layer{i}.b"] = (self.width,)
            fan = self.width
        shapes["fc.w"] = (self.num_classes, self.width)
        shapes["fc.b"] = (self.num_classes,)
        return shapes

    def param_count(self) -> int:
        return sum(int(np.prod(s)) for s in self.param_shapes().values())

    def init_params(self, seed: int) -> dict[str, np.ndarray]:
        rng = np.random.default_rng(seed)
        params: dict[str, np.ndarray] = {}
        for name, shape in self.param_shapes().items():
            if name.endswith(".w"):
                bound = np.sqrt(6.0 / shape[1])
                params[name] = rng.uniform(-bound, bound, size=shape)
            else:
                params[name] = np.zeros(shape)
        return params

    def features(self, params: dict, x) -> ad.Tensor:
        """Activation of the last hidden layer."""
        t = ad.as_tensor(x)
        if t.data.ndim != 4 or t.shape[1] != self.in_channels:
            raise ShapeError(
                f"forward: expected (N,{self.in_channels},H,W), got {t.shape}")
        t = ad.reshape(t, (t.shape[0], self.in_features))
        for i in range(self.depth):
            w = ad.as_tensor(params[f"layer{i}.w"])
            b = ad.as_tensor(params[f"layer{i}.b"])
            t = ad.relu(ad.add(ad.matmul(t, ad.transpose(w)), b))
        return t

    def forward(self, params: dict, x) -> ad.Tensor:
        t = self.features(params, x)
        return ad.add(ad.matmul(t, ad.transpose(ad.as_tensor(params["fc.w"]))),
                      ad.as_tensor(params["fc.b"]))

    def loss(self, params: dict, x, labels) -> ad.Tensor:
        return ad.softmax_cross_entropy(self.forward(params, x), labels)

    def macs_per_image(self, batch: int = 1) -> int:
        total = 0
        fan = self.in_features
        for _ in range(self.depth):
            total += fan * self.width
            fan = self.width
        total += self.width * self.num_classes
        return total * batch


def network_from_arch_id(arch: str):
    """Rebuild a network of either family from its descriptor string."""
    if arch.startswith("convnet:"):
        return ConvNet.from_arch_id(arch)
    if arch.startswith("mlp:"):
        return MLP.from_arch_id(arch)
    raise ConfigError(f"unrecognized architecture id {arch!r}")


def wrap_params(params: dict, requires_grad: bool = True) -> dict:
    """Lift a dict of arrays to tracked tensors (fresh leaves each call)."""
    return {k: ad.Tensor(v, requires_grad=requires_grad) for k, v in params.items()}


def sgd_step(params: dict, grads: dict, lr: float) -> None:
    """In-place p <- p - lr * g for every shared key."""
    for name, g in grads.items():
        if isinstance(g, ad.Tensor):
            g = g.data
        params[name] -= lr * g


def predict(net, params: dict, x, batch: int = 256) -> np.ndarray:
    """Argmax class per row, evaluated off-tape in slices."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty(x.shape[0], dtype=np.int64)
    with ad.no_grad():
        for start in range(0, x.shape[0], batch):
            logits = net.forward(params, x[start:start + batch])
            out[start:start + batch] = np.argmax(logits.data, axis=1)
    return out


def accuracy(net, params: dict, x, labels, batch: int = 256) -> float:
    return float(np.mean(predict(net, params, x, batch) == np.asarray(labels)))
