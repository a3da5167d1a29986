"""Finite-difference checks over every layer type and the full model at tiny shapes."""

from __future__ import annotations

import contextlib

import numpy as np

from .backbone import Backbone, BackboneConfig, EsaBlock, StgcnBlock, StgcnBlockConfig, \
    default_blocks
from .graph import GraphConv, build_graph
from .heads import DflModel, ModelConfig
from .nn import (BatchNorm, Dense, GradCheckReport, JointConv1d, MeanPool, ReLU, Sigmoid,
                 TemporalConv, grad_check)
from .skeleton import SkeletonTopology

# 8 joints: hip, spine, chest, head, shoulders, hands
TINY_TOPOLOGY = SkeletonTopology(
    ("hip", "spine", "chest", "head", "lshoulder", "rshoulder", "lhand", "rhand"),
    (-1, 0, 1, 2, 2, 2, 4, 5), center=1, chest=2, lshoulder=4, rshoulder=5)

TOLERANCE = 1e-4


def tiny_model_config(esa: bool = False, seed: int = 0, num_classes: int = 3) -> ModelConfig:
    blocks = default_blocks(3, (4, 4, 6), (1, 2, 2), kernel=3)
    return ModelConfig(num_classes=num_classes, backbone=BackboneConfig(blocks, esa, 3),
                       segments=3, selected=2, frames=12, topology=TINY_TOPOLOGY.to_dict(),
                       seed=seed)


def _layer_cases(seed: int):
    rng = np.random.default_rng(seed)
    graph = build_graph(TINY_TOPOLOGY)
    v = TINY_TOPOLOGY.num_joints

    def x(*shape):
        return rng.standard_normal(shape)

    bn_eval = BatchNorm(3)
    bn_eval.running_stats["mean"][:] = rng.standard_normal(3)
    bn_eval.running_stats["var"][:] = rng.uniform(0.5, 2.0, 3)
    bn_eval.eval()
    yield "Dense", Dense(5, 4, rng), x(3, 5)
    # keep inputs away from the kink so central differences are valid
    relu_in = x(3, 6)
    relu_in += np.sign(relu_in) * 0.1
    yield "ReLU", ReLU(), relu_in
    yield "Sigmoid", Sigmoid(), x(3, 6)
    yield "BatchNorm(train)", BatchNorm(3), x(4, 3, 5, v)
    yield "BatchNorm(eval)", bn_eval, x(4, 3, 5, v)
    yield "TemporalConv(stride 1)", TemporalConv(3, 4, 3, 1, rng), x(2, 3, 7, v)
    yield "TemporalConv(stride 2)", TemporalConv(3, 4, 5, 2, rng, bias=True), x(2, 3, 9, v)
    yield "JointConv1d", JointConv1d(3, 2, 3, rng), x(2, 3, v)
    yield "MeanPool", MeanPool(), x(2, 3, 4, v)
    yield "GraphConv", GraphConv(graph, 3, 4, rng), x(2, 3, 5, v)
    yield "StgcnBlock", StgcnBlock(graph, StgcnBlockConfig(3, 4, 3, 2), rng), x(4, 3, 8, v)
    yield "EsaBlock", EsaBlock(4, 3, rng), x(2, 4, 5, v)
    bb = Backbone(graph, BackboneConfig(default_blocks(3, (4, 4), (1, 2), 3), True, 3), rng)
    yield "Backbone", bb, x(4, 3, 8, v)


def run_suite(seed: int = 0, epsilon: float = 1e-5, tolerance: float = TOLERANCE
              ) -> list[tuple[str, GradCheckReport]]:
    """``(name, report)`` for every layer type, then the two-branch model
    without and with spatial attention."""
    results = []
    for name, layer, x in _layer_cases(seed):
        layer.train(getattr(layer, "training", True))
        results.append((name, grad_check(layer, x, epsilon=epsilon, tolerance=tolerance,
                                         seed=seed + 1)))
    rng = np.random.default_rng(seed + 100)
    cfg = tiny_model_config(seed=seed)
    x = rng.standard_normal((3, 3, cfg.frames, TINY_TOPOLOGY.num_joints))
    labels = np.arange(3) % cfg.num_classes
    for esa in (False, True):
        model = DflModel(tiny_model_config(esa, seed))
        model.train()
        name = "DflModel(esa)" if esa else "DflModel"
        results.append((name, grad_check(model, x, labels, epsilon, tolerance)))
    return results


@contextlib.contextmanager
def corrupted_backward(factor: float = 1.5):
    """Negative control: scale every ReLU backward pass by ``factor``."""
    original = ReLU.backward

    def broken(self, dy):
        return factor * original(self, dy)

    ReLU.backward = broken
    try:
        yield
    finally:
        ReLU.backward = original
