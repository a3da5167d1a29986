"""Global and discriminative-feature-learning (DFL) classification heads, the
joint loss, inference fusion, and the full two-branch model.

The DFL branch cuts the backbone feature map into ``N`` temporal segments,
scores each segment with a shared classifier, keeps the ``D`` most salient
segments in temporal order and sends the m-th one to its own classifier.
Segment selection is a hard, non-differentiable choice: within one step the
chosen indices are constants and gradients only reach the chosen segments.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .backbone import Backbone, BackboneConfig
from .graph import build_graph
from .nn import Dense, Layer, ShapeError, as_tensor, cross_entropy, softmax
from .skeleton import SkeletonTopology, ntu_topology

BRANCH_MODES = ("global", "dfl", "both")


# -- functional pieces -------------------------------------------------------------

def segment_bounds(length: int, n: int) -> list[tuple[int, int]]:
    """Contiguous split of ``length`` frames into ``n`` parts; the first
    ``length % n`` parts are one frame longer."""
    if n < 1:
        raise ValueError(f"segment count must be >= 1, got {n}")
    if length < n:
        raise ValueError(f"cannot cut {length} frames into {n} segments")
    base, extra = divmod(length, n)
    bounds, start = [], 0
    for i in range(n):
        stop = start + base + (1 if i < extra else 0)
        bounds.append((start, stop))
        start = stop
    return bounds


def global_pool(f_out: np.ndarray) -> np.ndarray:
    return f_out.mean(axis=(2, 3))


def segment_and_pool(f_out: np.ndarray, n: int) -> np.ndarray:
    """``[B, C, T, V] -> [B, N, C]``, each segment averaged over its frames and joints."""
    f_out = as_tensor(f_out)
    return np.stack([f_out[:, :, a:b, :].mean(axis=(2, 3))
                     for a, b in segment_bounds(f_out.shape[2], n)], axis=1)


def saliency_scores(segment_logits: np.ndarray, mode: str = "softmax") -> np.ndarray:
    """Max class score per segment, ``[B, N, c] -> [B, N]``."""
    if mode == "softmax":
        return softmax(segment_logits, axis=-1).max(axis=-1)
    if mode == "logit":
        return np.max(segment_logits, axis=-1)
    raise ValueError(f"unknown saliency mode {mode!r}")


def select_top(scores: np.ndarray, d: int) -> np.ndarray:
    """Indices of the ``d`` highest scores per row, ties to the smaller index,
    returned in increasing (temporal) order."""
    scores = np.atleast_2d(scores)
    if d > scores.shape[1]:
        raise ValueError(f"cannot select {d} of {scores.shape[1]} segments")
    order = np.argsort(-scores, axis=1, kind="stable")[:, :d]
    return np.sort(order, axis=1)


def saliency_and_select(segment_logits: np.ndarray, d: int, mode: str = "softmax"):
    scores = saliency_scores(segment_logits, mode)
    return select_top(scores, d), scores


def total_loss(lg: float, ls: float, ld: float, la: float, weights=(1.0, 1.0, 1.0, 1.0)) -> float:
    return weights[0] * lg + weights[1] * ls + weights[2] * ld + weights[3] * la


def fuse_inference(global_logits: np.ndarray, aggregate_logits: np.ndarray) -> np.ndarray:
    return 0.5 * (softmax(global_logits, axis=-1) + softmax(aggregate_logits, axis=-1))


class GlobalBranch(Layer):
    """Average over time and joints, then one dense layer."""

    def __init__(self, channels: int, num_classes: int, rng: np.random.Generator):
        super().__init__()
        self.fc = Dense(channels, num_classes, rng)

    def named_layers(self):
        yield "fc", self.fc

    def forward(self, f_out):
        self._cache = f_out.shape
        return self.fc.forward(global_pool(f_out))

    def backward(self, dlogits):
        b, c, t, v = self._need_cache()
        dpool = self.fc.backward(dlogits)
        return np.broadcast_to((dpool / (t * v))[:, :, None, None], (b, c, t, v))


class DflBranch(Layer):
    """Shared segment classifier ``h`` plus ``D`` unshared slot classifiers."""

    def __init__(self, channels: int, num_classes: int, n: int, d: int,
                 rng: np.random.Generator, saliency: str = "softmax"):
        super().__init__()
        if not 1 <= d <= n:
            raise ValueError(f"need 1 <= D <= N, got D={d}, N={n}")
        self.n, self.d = n, d
        self.saliency = saliency
        self.shared = Dense(channels, num_classes, rng)
        self.slots = [Dense(channels, num_classes, rng) for _ in range(d)]

    def named_layers(self):
        yield "shared", self.shared
        for m, g in enumerate(self.slots):
            yield f"slot{m}", g


@dataclass
class DflRecord:
    """Per-batch transient state of one two-branch forward pass."""
    global_logits: np.ndarray | None = None
    segment_features: np.ndarray | None = None   # [B, N, C]
    segment_logits: np.ndarray | None = None     # [B, N, c]
    saliency: np.ndarray | None = None           # [B, N]
    selected: np.ndarray | None = None           # [B, D], increasing
    slot_logits: np.ndarray | None = None        # [B, D, c]
    aggregate_logits: np.ndarray | None = None   # [B, c]
    losses: dict = field(default_factory=dict)
    loss: float | None = None


@dataclass
class ModelConfig:
    num_classes: int = 8
    in_channels: int = 3
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    segments: int = 5
    selected: int = 3
    saliency: str = "softmax"
    loss_weights: tuple = (1.0, 1.0, 1.0, 1.0)
    dif_enabled: bool = True
    frames: int = 100
    topology: dict = field(default_factory=lambda: ntu_topology().to_dict())
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.backbone, dict):
            self.backbone = BackboneConfig(**self.backbone)
        self.loss_weights = tuple(float(w) for w in self.loss_weights)
        if len(self.loss_weights) != 4:
            raise ValueError("loss_weights needs 4 entries (global, segment, slot, aggregate)")
        if not 1 <= self.selected <= self.segments:
            raise ValueError(f"need 1 <= selected <= segments, got {self.selected}, "
                             f"{self.segments}")
        if self.saliency not in ("softmax", "logit"):
            raise ValueError(f"saliency must be 'softmax' or 'logit', got {self.saliency!r}")
        if self.backbone.blocks[0].in_channels != self.in_channels:
            raise ValueError("first block in_channels must equal in_channels")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["loss_weights"] = list(self.loss_weights)
        return d


class DflModel:
    """Backbone plus global and DFL branches."""

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        self.topology = SkeletonTopology.from_dict(cfg.topology)
        self.graph = build_graph(self.topology)
        rng = np.random.default_rng(cfg.seed)
        c_out = cfg.backbone.out_channels
        self.backbone = Backbone(self.graph, cfg.backbone, rng)
        self.global_branch = GlobalBranch(c_out, cfg.num_classes, rng)
        self.dfl = DflBranch(c_out, cfg.num_classes, cfg.segments, cfg.selected, rng,
                             cfg.saliency)
        self.training = True
        self._cache = None

    # -- parameters ----------------------------------------------------------------

    def named_layers(self):
        for name, layer in self.backbone.named_layers():
            yield f"backbone.{name}", layer
        for name, layer in self.global_branch.named_layers():
            yield f"global.{name}", layer
        for name, layer in self.dfl.named_layers():
            yield f"dfl.{name}", layer

    def layers(self):
        return [layer for _, layer in self.named_layers()]

    def named_params(self) -> dict[str, np.ndarray]:
        return {f"{ln}.{pn}": p for ln, layer in self.named_layers()
                for pn, p in layer.params.items()}

    def named_grads(self) -> dict[str, np.ndarray]:
        return {f"{ln}.{pn}": g for ln, layer in self.named_layers()
                for pn, g in layer.grads.items()}

    def named_running_stats(self) -> dict[str, np.ndarray]:
        return {f"{ln}.{sn}": s for ln, layer in self.named_layers()
                for sn, s in layer.running_stats.items()}

    def zero_grad(self):
        for layer in self.layers():
            layer.zero_grad()

    def train(self, mode: bool = True):
        self.training = mode
        self.backbone.train(mode)
        for layer in self.layers():
            layer.train(mode)
        return self

    def eval(self):
        return self.train(False)

    # -- forward / backward --------------------------------------------------------------

    def forward(self, x: np.ndarray, labels=None, branch_mode: str = "both",
                frozen_selection: np.ndarray | None = None) -> DflRecord:
        if branch_mode not in BRANCH_MODES:
            raise ValueError(f"branch_mode must be one of {BRANCH_MODES}, got {branch_mode!r}")
        x = as_tensor(x)
        if x.ndim != 4 or x.shape[1] != self.cfg.in_channels:
            raise ShapeError(f"model expects [B, {self.cfg.in_channels}, T, V], got {x.shape}")
        f_out = self.backbone.forward(x)
        rec = DflRecord()
        w = self.cfg.loss_weights
        if branch_mode in ("global", "both"):
            rec.global_logits = self.global_branch.forward(f_out)
        if branch_mode in ("dfl", "both"):
            self._dfl_forward(f_out, rec, frozen_selection)
        if labels is not None:
            labels = np.asarray(labels, dtype=np.int64)
            grads = {}
            if rec.global_logits is not None:
                rec.losses["lg"], grads["g"] = cross_entropy(rec.global_logits, labels)
            if rec.segment_logits is not None:
                b, n, c = rec.segment_logits.shape
                rec.losses["ls"], gs = cross_entropy(rec.segment_logits.reshape(b * n, c),
                                                     np.repeat(labels, n))
                grads["s"] = gs.reshape(b, n, c)
                d = rec.slot_logits.shape[1]
                slot_losses, gd = [], np.zeros_like(rec.slot_logits)
                for m in range(d):
                    lm, gd[:, m] = cross_entropy(rec.slot_logits[:, m], labels)
                    slot_losses.append(lm)
                rec.losses["ld"] = sum(slot_losses) / d
                grads["d"] = gd / d
                rec.losses["la"], grads["a"] = cross_entropy(rec.aggregate_logits, labels)
            rec.loss = total_loss(rec.losses.get("lg", 0.0), rec.losses.get("ls", 0.0),
                                  rec.losses.get("ld", 0.0), rec.losses.get("la", 0.0), w)
            self._cache = (f_out.shape, rec, grads, branch_mode)
        else:
            self._cache = None
        return rec

    def _dfl_forward(self, f_out, rec: DflRecord, frozen_selection):
        b = f_out.shape[0]
        n, d = self.dfl.n, self.dfl.d
        seg = segment_and_pool(f_out, n)
        rec.segment_features = seg
        c = seg.shape[2]
        rec.segment_logits = self.dfl.shared.forward(seg.reshape(b * n, c)).reshape(b, n, -1)
        rec.saliency = saliency_scores(rec.segment_logits, self.dfl.saliency)
        if frozen_selection is not None:
            rec.selected = np.asarray(frozen_selection, dtype=np.int64)
        else:
            rec.selected = select_top(rec.saliency, d)
        rows = np.arange(b)
        rec.slot_logits = np.stack([g.forward(seg[rows, rec.selected[:, m]])
                                    for m, g in enumerate(self.dfl.slots)], axis=1)
        rec.aggregate_logits = rec.slot_logits.sum(axis=1)

    def backward(self) -> np.ndarray:
        """Backpropagate the weighted joint loss of the last labelled forward pass;
        returns the gradient with respect to the model input."""
        if self._cache is None:
            raise RuntimeError("backward needs a preceding forward pass with labels")
        (b, c, t, v), rec, grads, mode = self._cache
        w = self.cfg.loss_weights
        df = np.zeros((b, c, t, v))
        if "g" in grads:
            df += self.global_branch.backward(w[0] * grads["g"])
        if "s" in grads:
            dseg = self._dfl_backward(rec, grads, w)
            for i, (a, z) in enumerate(segment_bounds(t, self.dfl.n)):
                df[:, :, a:z, :] += (dseg[:, i] / ((z - a) * v))[:, :, None, None]
        return self.backbone.backward(df)

    def _dfl_backward(self, rec, grads, w):
        b, n, _ = rec.segment_logits.shape
        dseg = self.dfl.shared.backward(
            (w[1] * grads["s"]).reshape(b * n, -1)).reshape(b, n, -1)
        rows = np.arange(b)
        dslot = w[2] * grads["d"] + w[3] * grads["a"][:, None, :]
        for m, g in enumerate(self.dfl.slots):
            np.add.at(dseg, (rows, rec.selected[:, m]), g.backward(dslot[:, m]))
        return dseg

    def predict_proba(self, x: np.ndarray, fusion: str = "both") -> np.ndarray:
        rec = self.forward(x, branch_mode="both" if fusion == "both" else fusion)
        if fusion == "global":
            return softmax(rec.global_logits, axis=-1)
        if fusion == "dfl":
            return softmax(rec.aggregate_logits, axis=-1)
        return fuse_inference(rec.global_logits, rec.aggregate_logits)

    # -- verification --------------------------------------------------------------------

    def check_objective(self, x, labels, branch_mode: str = "both"):
        """Objective closure, analytic gradients and live arrays for ``grad_check``.

        Must be called with batch-norm running statistics frozen.
        """
        x = as_tensor(x)
        self.zero_grad()
        rec = self.forward(x, labels, branch_mode)
        selection = rec.selected
        dx = self.backward()
        analytic = {k: g.copy() for k, g in self.named_grads().items()}
        analytic["input"] = dx

        def objective():
            return self.forward(x, labels, branch_mode, frozen_selection=selection).loss

        arrays = dict(self.named_params())
        arrays["input"] = x
        return objective, analytic, arrays


# -- checkpoints ---------------------------------------------------------------------

CHECKPOINT_FORMAT = "dflgcn-checkpoint"
CHECKPOINT_VERSION = 1


def _pack(arrays: dict[str, np.ndarray]) -> dict:
    return {k: {"shape": list(a.shape), "data": a.ravel().tolist()} for k, a in arrays.items()}


def checkpoint_dict(model: DflModel) -> dict:
    return {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION,
            "config": model.cfg.to_dict(),
            "params": _pack(model.named_params()),
            "running_stats": _pack(model.named_running_stats())}


def save_checkpoint(model: DflModel, path) -> None:
    Path(path).write_text(json.dumps(checkpoint_dict(model), sort_keys=True))


def load_checkpoint(path) -> DflModel:
    d = json.loads(Path(path).read_text())
    if d.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    if d.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {d.get('version')}")
    model = DflModel(ModelConfig(**d["config"]))
    for group, target in (("params", model.named_params()),
                          ("running_stats", model.named_running_stats())):
        stored = d[group]
        if set(stored) != set(target):
            raise ValueError(f"{path}: {group} names do not match the model config")
        for name, arr in target.items():
            vals = np.asarray(stored[name]["data"], dtype=np.float64)
            if list(arr.shape) != stored[name]["shape"]:
                raise ValueError(f"{path}: {name} has shape {stored[name]['shape']}, "
                                 f"expected {list(arr.shape)}")
            arr[...] = vals.reshape(arr.shape)
    model.eval()
    return model


def uniform_loss(num_classes: int) -> float:
    return 4.0 * math.log(num_classes)
