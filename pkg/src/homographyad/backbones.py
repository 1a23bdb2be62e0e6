"""Feature backbones with named tap points and a documented stride table."""
from __future__ import annotations

import hashlib
import io
import logging
import os
from dataclasses import dataclass

import torch
from torch import nn

from .errors import UnknownLayer

log = logging.getLogger(__name__)

CACHE_ENV = "HOMOGRAPHYAD_CACHE"

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


def _stage(cin: int, cout: int, pool: bool) -> nn.Sequential:
    layers: list[nn.Module] = [
        nn.Conv2d(cin, cout, 3, padding=1),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
        nn.Conv2d(cout, cout, 3, padding=1),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    ]
    if pool:
        layers.append(nn.MaxPool2d(2))
    return nn.Sequential(*layers)


class CompactCNN(nn.Module):
    """Five conv stages; ``layer1..layer3`` are the feature taps (strides 4, 8, 16)."""

    widths = (32, 64, 128, 128, 256)

    def __init__(self, in_channels: int = 3):
        super().__init__()
        w = self.widths
        self.stem = nn.Sequential(
            nn.Conv2d(in_channels, w[0], 3, stride=2, padding=1),
            nn.BatchNorm2d(w[0]),
            nn.ReLU(inplace=True),
        )
        self.layer1 = _stage(w[0], w[0], pool=True)
        self.layer2 = _stage(w[0], w[1], pool=True)
        self.layer3 = _stage(w[1], w[2], pool=True)
        self.layer4 = _stage(w[2], w[3], pool=True)
        self.layer5 = _stage(w[3], w[4], pool=False)
        self.out_channels = w[4]
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")
                nn.init.zeros_(m.bias)

    def forward(self, x):
        x = self.stem(x)
        for name in ("layer1", "layer2", "layer3", "layer4", "layer5"):
            x = getattr(self, name)(x)
        return x


@dataclass(frozen=True)
class BackboneInfo:
    name: str
    strides: dict[str, int]
    channels: dict[str, int]
    default_taps: tuple[str, ...]
    out_channels: int


REGISTRY: dict[str, BackboneInfo] = {
    "compact_cnn": BackboneInfo(
        "compact_cnn",
        {"layer1": 4, "layer2": 8, "layer3": 16, "layer4": 32, "layer5": 32},
        {"layer1": 32, "layer2": 64, "layer3": 128, "layer4": 128, "layer5": 256},
        ("layer1", "layer2", "layer3"),
        256,
    ),
    "resnet18": BackboneInfo(
        "resnet18",
        {"layer1": 4, "layer2": 8, "layer3": 16, "layer4": 32},
        {"layer1": 64, "layer2": 128, "layer3": 256, "layer4": 512},
        ("layer1", "layer2", "layer3"),
        512,
    ),
    "wideresnet50": BackboneInfo(
        "wideresnet50",
        {"layer1": 4, "layer2": 8, "layer3": 16, "layer4": 32},
        {"layer1": 256, "layer2": 512, "layer3": 1024, "layer4": 2048},
        ("layer1", "layer2", "layer3"),
        2048,
    ),
    "efficientnet_b5": BackboneInfo(
        "efficientnet_b5",
        {"features.2": 4, "features.3": 8, "features.4": 16, "features.8": 32},
        {"features.2": 40, "features.3": 64, "features.4": 128, "features.8": 2048},
        ("features.2", "features.3", "features.4"),
        2048,
    ),
}


class Backbone(nn.Module):
    """A registered network plus input normalization.

    ``forward`` returns the final feature map; ``taps`` returns a dict of the
    requested intermediate activations.
    """

    def __init__(self, name: str, net: nn.Module, in_channels: int = 3, normalize: str = "imagenet"):
        super().__init__()
        if name not in REGISTRY:
            raise KeyError(f"unknown backbone {name!r}; choose from {sorted(REGISTRY)}")
        self.name = name
        self.info = REGISTRY[name]
        self.net = net
        self.in_channels = in_channels
        reps = in_channels // 3
        if normalize == "imagenet":
            mean, std = IMAGENET_MEAN * reps, IMAGENET_STD * reps
        else:
            mean, std = (0.5,) * in_channels, (0.25,) * in_channels
        self.register_buffer("mean", torch.tensor(mean).view(1, -1, 1, 1))
        self.register_buffer("std", torch.tensor(std).view(1, -1, 1, 1))
        self._modules_by_name = dict(net.named_modules())

    def _check(self, layers):
        for layer in layers:
            if layer not in self.info.strides or layer not in self._modules_by_name:
                raise UnknownLayer(f"{self.name} has no tap {layer!r}; available: {sorted(self.info.strides)}")

    def taps(self, x: torch.Tensor, layers) -> dict[str, torch.Tensor]:
        layers = tuple(layers)
        self._check(layers)
        out: dict[str, torch.Tensor] = {}
        hooks = [
            self._modules_by_name[name].register_forward_hook(
                lambda _m, _i, o, name=name: out.__setitem__(name, o)
            )
            for name in layers
        ]
        try:
            self._run(x, stop_after=max(layers, key=self._order))
        finally:
            for h in hooks:
                h.remove()
        return {name: out[name] for name in layers}

    def _order(self, layer: str) -> int:
        return list(self.info.strides).index(layer)

    def _run(self, x: torch.Tensor, stop_after: str | None = None) -> torch.Tensor:
        x = (x - self.mean) / self.std
        net = self.net
        if self.name == "compact_cnn":
            x = net.stem(x)
            for name in ("layer1", "layer2", "layer3", "layer4", "layer5"):
                x = getattr(net, name)(x)
                if name == stop_after:
                    break
            return x
        if self.name in ("resnet18", "wideresnet50"):
            x = net.maxpool(net.relu(net.bn1(net.conv1(x))))
            for name in ("layer1", "layer2", "layer3", "layer4"):
                x = getattr(net, name)(x)
                if name == stop_after:
                    break
            return x
        for i, block in enumerate(net.features):
            x = block(x)
            if f"features.{i}" == stop_after:
                break
        return x

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self._run(x)


def _torchvision_net(name: str, pretrained: bool, in_channels: int) -> nn.Module:
    import torchvision.models as tvm

    cache = os.environ.get(CACHE_ENV)
    if cache:
        os.environ.setdefault("TORCH_HOME", cache)
    ctor, weights = {
        "resnet18": (tvm.resnet18, tvm.ResNet18_Weights.IMAGENET1K_V1),
        "wideresnet50": (tvm.wide_resnet50_2, tvm.Wide_ResNet50_2_Weights.IMAGENET1K_V1),
        "efficientnet_b5": (tvm.efficientnet_b5, tvm.EfficientNet_B5_Weights.IMAGENET1K_V1),
    }[name]
    net = ctor(weights=weights if pretrained else None)
    if in_channels != 3:
        first = net.features[0][0] if name == "efficientnet_b5" else net.conv1
        new = nn.Conv2d(in_channels, first.out_channels, first.kernel_size, first.stride, first.padding, bias=False)
        with torch.no_grad():
            reps = in_channels // 3
            new.weight.copy_(first.weight.repeat(1, reps, 1, 1) / reps)
        if name == "efficientnet_b5":
            net.features[0][0] = new
        else:
            net.conv1 = new
    return net


def build_backbone(name: str, seed: int = 0, pretrained: bool = True, in_channels: int = 3) -> Backbone:
    """Instantiate a registered backbone.

    ``compact_cnn`` is initialized from ``seed`` (it has no pretrained
    weights). The ImageNet networks load torchvision weights when
    ``pretrained`` is set, which needs the weights in the torch cache.
    """
    if name not in REGISTRY:
        raise KeyError(f"unknown backbone {name!r}; choose from {sorted(REGISTRY)}")
    if name == "compact_cnn":
        gen_state = torch.random.get_rng_state()
        torch.manual_seed(seed)
        try:
            net = CompactCNN(in_channels)
        finally:
            torch.random.set_rng_state(gen_state)
        return Backbone(name, net, in_channels, normalize="plain")
    return Backbone(name, _torchvision_net(name, pretrained, in_channels), in_channels)


def imagenet_weights_available(name: str) -> bool:
    """True if torchvision weights for ``name`` are already on disk."""
    import torchvision.models as tvm
    from torch.hub import get_dir

    cache = os.environ.get(CACHE_ENV)
    if cache:
        os.environ.setdefault("TORCH_HOME", cache)
    weights = {
        "resnet18": tvm.ResNet18_Weights.IMAGENET1K_V1,
        "wideresnet50": tvm.Wide_ResNet50_2_Weights.IMAGENET1K_V1,
        "efficientnet_b5": tvm.EfficientNet_B5_Weights.IMAGENET1K_V1,
    }.get(name)
    if weights is None:
        return False
    fname = os.path.basename(weights.url)
    return os.path.exists(os.path.join(get_dir(), "checkpoints", fname))


def state_digest(module: nn.Module) -> str:
    """Content hash of a module's parameters and buffers."""
    h = hashlib.sha256()
    for key, value in sorted(module.state_dict().items()):
        h.update(key.encode())
        t = value.detach().cpu().contiguous()
        buf = io.BytesIO()
        buf.write(t.numpy().tobytes() if t.dtype != torch.bfloat16 else t.float().numpy().tobytes())
        h.update(buf.getvalue())
    return h.hexdigest()


class RegressionHead(nn.Module):
    """Pool the final feature map and regress the 8 corner displacements.

    ``pool=1`` is plain global average pooling; larger values keep a coarse
    spatial grid before the linear layer. Outputs are multiplied by
    ``output_scale`` so the linear layer works in units of ``output_scale`` px.
    """

    def __init__(self, in_channels: int, pool: int = 1, output_scale: float = 1.0):
        super().__init__()
        self.pool = nn.AdaptiveAvgPool2d(pool)
        self.fc = nn.Linear(in_channels * pool * pool, 8)
        self.output_scale = float(output_scale)
        nn.init.zeros_(self.fc.bias)
        nn.init.normal_(self.fc.weight, std=1e-3)

    def forward(self, feats: torch.Tensor) -> torch.Tensor:
        return self.fc(torch.flatten(self.pool(feats), 1)) * self.output_scale


class DisplacementRegressor(nn.Module):
    def __init__(self, backbone: Backbone, head: RegressionHead):
        super().__init__()
        self.backbone = backbone
        self.head = head

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.backbone(x))


def to_tensor(images) -> torch.Tensor:
    """``(N, H, W, C)`` float images in [0, 1] (or a list of them) to NCHW float32."""
    import numpy as np

    arr = np.stack(images) if isinstance(images, (list, tuple)) else np.asarray(images)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.dtype == np.uint8:
        arr = arr.astype(np.float32) / 255.0
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2), dtype=np.float32))
