"""Spatial-temporal graph convolution blocks and the stacked backbone."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .graph import GraphConv, SkeletonGraph
from .nn import (BatchNorm, JointConv1d, Layer, ReLU, ShapeError, Sigmoid, TemporalConv,
                 as_tensor)


@dataclass
class StgcnBlockConfig:
    in_channels: int
    out_channels: int
    temporal_kernel: int = 9
    temporal_stride: int = 1
    residual: bool = True
    batch_norm: bool = True

    def __post_init__(self):
        if self.temporal_kernel % 2 != 1:
            raise ValueError(f"temporal_kernel must be odd, got {self.temporal_kernel}")
        if self.temporal_stride < 1:
            raise ValueError(f"temporal_stride must be >= 1, got {self.temporal_stride}")


@dataclass
class BackboneConfig:
    blocks: list[StgcnBlockConfig] = field(default_factory=lambda: default_blocks())
    esa_enabled: bool = False
    esa_kernel: int = 9

    def __post_init__(self):
        self.blocks = [b if isinstance(b, StgcnBlockConfig) else StgcnBlockConfig(**b)
                       for b in self.blocks]
        if not self.blocks:
            raise ValueError("backbone needs at least one block")
        for a, b in zip(self.blocks, self.blocks[1:]):
            if a.out_channels != b.in_channels:
                raise ValueError(f"block channels do not chain: {a.out_channels} -> "
                                 f"{b.in_channels}")

    @property
    def out_channels(self) -> int:
        return self.blocks[-1].out_channels

    def output_length(self, t: int) -> int:
        for b in self.blocks:
            t = -(-t // b.temporal_stride)
        return t

    def to_dict(self) -> dict:
        return asdict(self)


def default_blocks(in_channels: int = 3, channels=(16, 16, 32, 64), strides=(1, 1, 2, 2),
                   kernel: int = 9) -> list[StgcnBlockConfig]:
    blocks = []
    c = in_channels
    for i, (co, s) in enumerate(zip(channels, strides)):
        blocks.append(StgcnBlockConfig(c, co, kernel, s, residual=i > 0))
        c = co
    return blocks


class StgcnBlock(Layer):
    """graph conv -> BN -> ReLU -> temporal conv -> BN -> (+ residual) -> ReLU."""

    def __init__(self, graph: SkeletonGraph, cfg: StgcnBlockConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        self.gcn = GraphConv(graph, cfg.in_channels, cfg.out_channels, rng)
        self.bn1 = BatchNorm(cfg.out_channels) if cfg.batch_norm else None
        self.relu1 = ReLU()
        self.tcn = TemporalConv(cfg.out_channels, cfg.out_channels, cfg.temporal_kernel,
                                cfg.temporal_stride, rng)
        self.bn2 = BatchNorm(cfg.out_channels) if cfg.batch_norm else None
        self.res_conv = self.res_bn = None
        self.identity_residual = False
        if cfg.residual:
            if cfg.in_channels == cfg.out_channels and cfg.temporal_stride == 1:
                self.identity_residual = True
            else:
                self.res_conv = TemporalConv(cfg.in_channels, cfg.out_channels, 1,
                                             cfg.temporal_stride, rng)
                self.res_bn = BatchNorm(cfg.out_channels) if cfg.batch_norm else None
        self.relu_out = ReLU()

    def named_layers(self):
        for name in ("gcn", "bn1", "relu1", "tcn", "bn2", "res_conv", "res_bn", "relu_out"):
            layer = getattr(self, name)
            if layer is not None:
                yield name, layer

    def train(self, mode=True):
        self.training = mode
        for _, layer in self.named_layers():
            layer.train(mode)
        return self

    def forward(self, x):
        x = as_tensor(x)
        if x.ndim != 4 or x.shape[1] != self.cfg.in_channels:
            raise ShapeError(f"block expects [B, {self.cfg.in_channels}, T, V], got {x.shape}")
        h = self.gcn.forward(x)
        if self.bn1:
            h = self.bn1.forward(h)
        h = self.relu1.forward(h)
        h = self.tcn.forward(h)
        if self.bn2:
            h = self.bn2.forward(h)
        if self.identity_residual:
            h = h + x
        elif self.res_conv is not None:
            r = self.res_conv.forward(x)
            if self.res_bn:
                r = self.res_bn.forward(r)
            h = h + r
        self._cache = True
        return self.relu_out.forward(h)

    def backward(self, dy):
        self._need_cache()
        dh = self.relu_out.backward(dy)
        dx = np.zeros(0)
        if self.identity_residual:
            dx = dh
        elif self.res_conv is not None:
            dr = self.res_bn.backward(dh) if self.res_bn else dh
            dx = self.res_conv.backward(dr)
        if self.bn2:
            dh = self.bn2.backward(dh)
        dh = self.tcn.backward(dh)
        dh = self.relu1.backward(dh)
        if self.bn1:
            dh = self.bn1.backward(dh)
        dh = self.gcn.backward(dh)
        return dh + dx if dx.size else dh


class EsaBlock(Layer):
    """Residual spatial attention ``f + sigmoid(conv_V(mean_T f)) * f``.

    The joint-axis convolution maps C channels to a single mask channel that is
    broadcast over channels and time.
    """

    def __init__(self, channels: int, kernel: int = 9, rng: np.random.Generator | None = None):
        super().__init__()
        self.conv = JointConv1d(channels, 1, kernel, rng)
        self.sigmoid = Sigmoid()

    def named_layers(self):
        yield "conv", self.conv
        yield "sigmoid", self.sigmoid

    def forward(self, f):
        f = as_tensor(f)
        if f.ndim != 4 or f.shape[1] != self.conv.c_in:
            raise ShapeError(f"ESA expects [B, {self.conv.c_in}, T, V], got {f.shape}")
        m = self.sigmoid.forward(self.conv.forward(f.mean(axis=2)))[:, :, None, :]
        self._cache = (f, m)
        return f + m * f

    def backward(self, dy):
        f, m = self._need_cache()
        df = dy * (1.0 + m)
        dm = np.sum(dy * f, axis=(1, 2))[:, None, :]
        dpooled = self.conv.backward(self.sigmoid.backward(dm))
        return df + dpooled[:, :, None, :] / f.shape[2]


class Backbone(Layer):
    def __init__(self, graph: SkeletonGraph, cfg: BackboneConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        self.graph = graph
        self.blocks = [StgcnBlock(graph, b, rng) for b in cfg.blocks]
        self.esa = ([EsaBlock(b.out_channels, cfg.esa_kernel, rng) for b in cfg.blocks]
                    if cfg.esa_enabled else [])
        self.activations: list[np.ndarray] = []

    def named_layers(self):
        for i, block in enumerate(self.blocks):
            for name, layer in block.named_layers():
                yield f"blocks.{i}.{name}", layer
            if self.esa:
                for name, layer in self.esa[i].named_layers():
                    yield f"esa.{i}.{name}", layer

    def train(self, mode=True):
        self.training = mode
        for b in self.blocks:
            b.train(mode)
        for e in self.esa:
            e.train(mode)
        return self

    def forward(self, x):
        x = as_tensor(x)
        if x.ndim != 4 or x.shape[3] != self.graph.num_joints:
            raise ShapeError(f"backbone expects [B, C, T, {self.graph.num_joints}], got {x.shape}")
        self.activations = []
        h = x
        for i, block in enumerate(self.blocks):
            h = block.forward(h)
            if self.esa:
                h = self.esa[i].forward(h)
            self.activations.append(h)
        self._cache = True
        return h

    def backward(self, dy):
        self._need_cache()
        for i in reversed(range(len(self.blocks))):
            if self.esa:
                dy = self.esa[i].backward(dy)
            dy = self.blocks[i].backward(dy)
        return dy

    def receptive_field(self, start: int, stop: int, input_length: int) -> tuple[int, int]:
        """Input frames ``[lo, hi)`` that can influence output frames ``[start, stop)``."""
        lengths = [input_length]
        for b in self.cfg.blocks:
            lengths.append(-(-lengths[-1] // b.temporal_stride))
        lo, hi = start, stop - 1
        for b, t_in in zip(reversed(self.cfg.blocks), reversed(lengths[:-1])):
            pad = (b.temporal_kernel - 1) // 2
            lo = max(lo * b.temporal_stride - pad, 0)
            hi = min(hi * b.temporal_stride - pad + b.temporal_kernel - 1, t_in - 1)
        return lo, hi + 1
