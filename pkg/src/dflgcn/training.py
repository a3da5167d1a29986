"""Mini-batch training with SGD-Nesterov and a step learning-rate schedule,
evaluation, and the reduced-data / input-noise experiment runners."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .dif import apply_dif
from .heads import BRANCH_MODES, DflModel, ModelConfig, fuse_inference
from .nn import OptimizerState, sgd_nesterov_step
from .skeleton import Dataset, SkeletonClip, add_gaussian_noise, resample_uniform, \
    stratified_subsample

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("epoch", "lg", "ls", "ld", "la", "train_top1", "val_top1", "val_top5")


@dataclass
class TrainConfig:
    epochs: int = 60
    batch_size: int = 16
    lr0: float = 0.1
    lr_drop_epochs: tuple = (30, 45)
    lr_drop_factor: float = 10.0
    momentum: float = 0.9
    weight_decay: float = 1e-4
    seed: int = 0
    dif_enabled: bool = True
    branch_mode: str = "both"

    def __post_init__(self):
        self.lr_drop_epochs = tuple(int(e) for e in self.lr_drop_epochs)
        if any(e >= self.epochs for e in self.lr_drop_epochs):
            raise ValueError(f"lr drop epochs {self.lr_drop_epochs} must be < epochs "
                             f"({self.epochs})")
        if self.lr_drop_factor <= 1:
            raise ValueError(f"lr_drop_factor must be > 1, got {self.lr_drop_factor}")
        if self.branch_mode not in BRANCH_MODES:
            raise ValueError(f"branch_mode must be one of {BRANCH_MODES}")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("epochs and batch_size must be positive")

    @classmethod
    def paper_scale(cls, **kw) -> "TrainConfig":
        base = dict(epochs=120, batch_size=64, lr_drop_epochs=(60, 90))
        base.update(kw)
        return cls(**base)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lr_drop_epochs"] = list(self.lr_drop_epochs)
        return d


def learning_rate_at(cfg: TrainConfig, epoch: int) -> float:
    drops = sum(1 for e in cfg.lr_drop_epochs if epoch >= e)
    return cfg.lr0 / cfg.lr_drop_factor ** drops


@dataclass
class MetricsRecord:
    epoch: int
    lg: float
    ls: float
    ld: float
    la: float
    train_top1: float
    val_top1: float
    val_top5: float
    seconds: float = field(default=0.0, compare=False)


def write_metrics_csv(records, path) -> None:
    """Per-epoch metrics; wall-clock seconds go to a sibling ``timing.csv``
    so that the metrics file itself is reproducible bit for bit."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRIC_COLUMNS)
        for r in records:
            w.writerow([r.epoch] + [repr(float(getattr(r, k))) for k in METRIC_COLUMNS[1:]])


def write_timing_csv(records, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "seconds"])
        for r in records:
            w.writerow([r.epoch, f"{r.seconds:.3f}"])


# -- data -----------------------------------------------------------------------------

def prepare_clip(clip: SkeletonClip, dif_enabled: bool, frames: int = 100) -> np.ndarray:
    """Clip -> ``[3, T, V]`` network input (DIF first, then length normalisation)."""
    if dif_enabled:
        clip = apply_dif(clip)
    if clip.num_frames != frames:
        clip = resample_uniform(clip, frames)
    return clip.positions.transpose(2, 0, 1).copy()


def dataset_tensors(ds: Dataset, dif_enabled: bool, frames: int = 100):
    if len(ds) == 0:
        raise ValueError("empty dataset")
    x = np.stack([prepare_clip(c, dif_enabled, frames) for c in ds.clips])
    return x, ds.labels


def noisy_dataset(ds: Dataset, sigma: float, seed: int) -> Dataset:
    return Dataset([add_gaussian_noise(c, sigma, [seed, i]) for i, c in enumerate(ds.clips)],
                   ds.class_count, ds.split, list(ds.names))


# -- evaluation -----------------------------------------------------------------------

@dataclass
class EvalResult:
    top1: float
    top5: float
    confusion: np.ndarray
    predictions: np.ndarray
    probabilities: np.ndarray


def topk_accuracy(probs: np.ndarray, labels: np.ndarray, k: int) -> float:
    k = min(k, probs.shape[1])
    order = np.argsort(-probs, axis=1, kind="stable")[:, :k]
    return float(np.mean(np.any(order == labels[:, None], axis=1)))


def evaluate_tensors(model: DflModel, x: np.ndarray, labels: np.ndarray, fusion: str = "both",
                     batch_size: int = 64) -> EvalResult:
    if fusion not in BRANCH_MODES:
        raise ValueError(f"fusion must be one of {BRANCH_MODES}")
    was_training = model.training
    model.eval()
    probs = np.concatenate([model.predict_proba(x[i:i + batch_size], fusion)
                            for i in range(0, len(x), batch_size)])
    model.train(was_training)
    labels = np.asarray(labels, dtype=np.int64)
    pred = np.argmax(probs, axis=1)
    c = probs.shape[1]
    confusion = np.zeros((c, c), dtype=np.int64)
    np.add.at(confusion, (labels, pred), 1)
    return EvalResult(float(np.mean(pred == labels)), topk_accuracy(probs, labels, 5),
                      confusion, pred, probs)


def evaluate(model: DflModel, dataset: Dataset, fusion: str = "both") -> EvalResult:
    x, y = dataset_tensors(dataset, model.cfg.dif_enabled, model.cfg.frames)
    return evaluate_tensors(model, x, y, fusion)


# -- training -------------------------------------------------------------------------

def trainable_params(model: DflModel, branch_mode: str) -> dict[str, np.ndarray]:
    skip = {"global": ("dfl.",), "dfl": ("global.",), "both": ()}[branch_mode]
    return {k: v for k, v in model.named_params().items() if not k.startswith(skip)}


@dataclass
class TrainResult:
    model: DflModel
    metrics: list[MetricsRecord]


def train(model_cfg: ModelConfig, train_set: Dataset, val_set: Dataset | None,
          cfg: TrainConfig, progress=None) -> TrainResult:
    """Train a fresh model. Deterministic given ``cfg.seed`` and ``model_cfg.seed``."""
    if len(train_set) == 0:
        raise ValueError("cannot train on an empty dataset")
    if train_set.class_count > model_cfg.num_classes:
        raise ValueError(f"dataset has {train_set.class_count} classes, model "
                         f"{model_cfg.num_classes}")
    model_cfg.dif_enabled = cfg.dif_enabled
    model = DflModel(model_cfg)
    frames = model_cfg.frames
    x_tr, y_tr = dataset_tensors(train_set, cfg.dif_enabled, frames)
    val = None
    if val_set is not None and len(val_set):
        val = dataset_tensors(val_set, cfg.dif_enabled, frames)
    return train_tensors(model, x_tr, y_tr, val, cfg, progress)


def train_tensors(model: DflModel, x_tr, y_tr, val, cfg: TrainConfig, progress=None
                  ) -> TrainResult:
    rng = np.random.default_rng(cfg.seed)
    opt = OptimizerState(cfg.lr0, cfg.momentum, cfg.weight_decay)
    params = trainable_params(model, cfg.branch_mode)
    grads = model.named_grads()
    n = len(x_tr)
    metrics = []
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        opt.learning_rate = learning_rate_at(cfg, epoch)
        model.train()
        perm = rng.permutation(n)
        sums = dict(lg=0.0, ls=0.0, ld=0.0, la=0.0)
        correct = 0
        for start in range(0, n, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            xb, yb = x_tr[idx], y_tr[idx]
            model.zero_grad()
            rec = model.forward(xb, yb, cfg.branch_mode)
            model.backward()
            sgd_nesterov_step(opt, params, grads)
            for k, v in rec.losses.items():
                sums[k] += v * len(idx)
            correct += int(np.sum(_predict(rec, cfg.branch_mode) == yb))
        rec_val = (evaluate_tensors(model, val[0], val[1], cfg.branch_mode)
                   if val is not None else None)
        m = MetricsRecord(epoch, *(sums[k] / n for k in ("lg", "ls", "ld", "la")),
                          correct / n,
                          rec_val.top1 if rec_val else float("nan"),
                          rec_val.top5 if rec_val else float("nan"),
                          time.perf_counter() - t0)
        metrics.append(m)
        log.debug("epoch %d lr %.4g loss %.4f train %.3f val %.3f", epoch, opt.learning_rate,
                  sum(sums.values()) / n, m.train_top1, m.val_top1)
        if progress:
            progress(m)
    model.eval()
    return TrainResult(model, metrics)


def _predict(rec, branch_mode) -> np.ndarray:
    if branch_mode == "global":
        return np.argmax(rec.global_logits, axis=1)
    if branch_mode == "dfl":
        return np.argmax(rec.aggregate_logits, axis=1)
    return np.argmax(fuse_inference(rec.global_logits, rec.aggregate_logits), axis=1)


# -- experiments ----------------------------------------------------------------------

def _fresh(model_cfg: ModelConfig, seed: int) -> ModelConfig:
    d = model_cfg.to_dict()
    d["seed"] = seed
    return ModelConfig(**d)


def _with_seed(cfg: TrainConfig, seed: int, **kw) -> TrainConfig:
    d = {f.name: getattr(cfg, f.name) for f in fields(cfg)}
    d.update(seed=seed, **kw)
    return TrainConfig(**d)


def run_reduced_data_experiment(model_cfg: ModelConfig, cfg: TrainConfig, train_set: Dataset,
                                val_set: Dataset, fractions, seeds=(0,)) -> list[dict]:
    """Accuracy on a fixed validation split versus class-stratified training fraction."""
    rows = []
    for frac in fractions:
        for seed in seeds:
            sub = stratified_subsample(train_set, frac, seed)
            res = train(_fresh(model_cfg, seed), sub, None, _with_seed(cfg, seed))
            top1 = evaluate(res.model, val_set, cfg.branch_mode).top1
            rows.append({"fraction": frac, "seed": seed, "top1": top1})
    return rows


def run_noise_experiment(model_cfg: ModelConfig, cfg: TrainConfig, train_set: Dataset,
                         val_set: Dataset, sigmas, seeds=(0,)) -> list[dict]:
    """Train on clean clips, evaluate on validation clips with Gaussian joint noise."""
    for s in sigmas:
        if s < 0:
            raise ValueError(f"noise sigma must be >= 0, got {s}")
    rows = []
    for seed in seeds:
        res = train(_fresh(model_cfg, seed), train_set, None, _with_seed(cfg, seed))
        for sigma in sigmas:
            noisy = noisy_dataset(val_set, sigma, seed)
            top1 = evaluate(res.model, noisy, cfg.branch_mode).top1
            rows.append({"sigma": sigma, "seed": seed, "top1": top1})
    return rows


def write_experiment_csv(rows: list[dict], path) -> None:
    if not rows:
        raise ValueError("no experiment rows to write")
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})


def mean_by(rows: list[dict], key: str) -> dict:
    out: dict = {}
    for r in rows:
        out.setdefault(r[key], []).append(r["top1"])
    return {k: float(np.mean(v)) for k, v in out.items()}
