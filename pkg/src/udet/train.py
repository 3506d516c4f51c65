"""Adam optimization, early stopping, LR plateau reduction and K-fold training."""
from __future__ import annotations

import ctypes
import ctypes.util
import dataclasses
import gc
import hashlib
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .data.augment import AugmentSpec, augment
from .data.dataset import Sample
from .data.split import Split
from .metrics import MetricsLog, MetricsRecord, aggregate, binarize, estimate_class_weight, weighted_bce
from .model import ModelGraph, build
from .tensor import Tape, backward, no_grad

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr0: float = 1e-4
    beta1: float = 0.99
    beta2: float = 0.999
    decay: float = 1e-6
    adam_eps: float = 1e-8
    batch_size: int = 2
    early_stop_patience: int = 10
    plateau_factor: float = 0.5
    plateau_patience: int = 5
    max_epochs: int = 200
    seed: int = 0
    # 'train' estimates the class weight from the training masks; a number fixes it
    pos_weight: str = "train"
    variant: str = "udet"
    input_size: int = 128
    width_scale: str = "1/4"
    augment: bool = True
    # stop once validation DSC reaches this value (0 disables)
    target_dsc: float = 0.0
    test_fraction: float = 244 / 1166
    eval_batch: int = 8
    # running-statistics momentum of every batch-norm layer
    bn_momentum: float = 0.99

    def __post_init__(self):
        if self.lr0 < 0:
            raise ValueError("lr0 must be >= 0")
        if not 0 < self.beta1 < 1 or not 0 < self.beta2 < 1:
            raise ValueError("beta1 and beta2 must lie in (0, 1)")
        if self.early_stop_patience < 1 or self.plateau_patience < 1:
            raise ValueError("patiences must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0 <= self.bn_momentum < 1:
            raise ValueError("bn_momentum must lie in [0, 1)")

    def to_text(self) -> str:
        return "".join(f"{f.name} = {getattr(self, f.name)}\n" for f in dataclasses.fields(self))

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:16]

    @classmethod
    def from_text(cls, text: str) -> "TrainConfig":
        kinds = {f.name: f.type for f in dataclasses.fields(cls)}
        values = {}
        for n, line in enumerate(text.splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, raw = line.partition("=")
            key, raw = key.strip(), raw.strip()
            if not sep or key not in kinds:
                raise ValueError(f"config line {n}: unknown or malformed entry {line!r}")
            kind = kinds[key]
            if kind == "bool":
                values[key] = raw.lower() in ("1", "true", "yes", "on")
            elif kind == "int":
                values[key] = int(raw)
            elif kind == "float":
                values[key] = float(raw)
            else:
                values[key] = raw
        return cls(**values)

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        return cls.from_text(Path(path).read_text())


# ---------------------------------------------------------------- init

def init_weights(g: ModelGraph, seed: int) -> None:
    """Fan-in scaled uniform init: He for relu sections, Glorot for Mish ones."""
    rng = np.random.default_rng(seed)
    for name, p in g.params.items():
        info = g.reg.info[name]
        if info.init == "he":
            limit = math.sqrt(6.0 / info.fan_in)
        elif info.init == "glorot":
            limit = math.sqrt(6.0 / (info.fan_in + info.fan_out))
        elif info.init == "zero":
            p.data[...] = 0
            continue
        elif info.init == "one":
            p.data[...] = 1
            continue
        else:
            raise ValueError(f"{name}: unknown init {info.init!r}")
        p.data[...] = rng.uniform(-limit, limit, size=p.shape)
    for name, b in g.buffers.items():
        b[...] = 1.0 if name.endswith("running_var") else 0.0


# ---------------------------------------------------------------- optimizer

@dataclass
class OptimizerState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0
    lr: float = 1e-4


def step_size(lr: float, decay: float, t: int) -> float:
    return lr / (1.0 + decay * t)


def adam_step(params: Sequence, state: OptimizerState, cfg: TrainConfig) -> None:
    """One bias-corrected Adam update with time-decayed step size lr/(1 + decay t)."""
    for p in params:
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise FloatingPointError(f"non-finite gradient in {p.name}")
    state.t += 1
    t = state.t
    lr_t = step_size(state.lr, cfg.decay, t - 1)
    bc1 = 1.0 - cfg.beta1 ** t
    bc2 = 1.0 - cfg.beta2 ** t
    for p in params:
        if p.grad is None:
            continue
        g = p.grad
        m = state.m.get(p.name)
        if m is None:
            m = state.m[p.name] = np.zeros_like(p.data)
            state.v[p.name] = np.zeros_like(p.data)
        v = state.v[p.name]
        m *= cfg.beta1
        m += (1 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1 - cfg.beta2) * (g * g)
        update = (lr_t / bc1) * m / (np.sqrt(v / bc2) + cfg.adam_eps)
        p.data -= update.astype(p.dtype)


# ---------------------------------------------------------------- schedule

class PlateauTracker:
    """Tracks validation loss for LR reduction and early stopping."""

    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        self.best = math.inf
        self.best_epoch = 0
        self.since_best = 0
        self.since_reduce = 0

    def update(self, epoch: int, val_loss: float) -> tuple[bool, bool, bool]:
        """Returns (improved, reduce_lr, stop)."""
        if val_loss < self.best:
            self.best = val_loss
            self.best_epoch = epoch
            self.since_best = 0
            self.since_reduce = 0
            return True, False, False
        self.since_best += 1
        self.since_reduce += 1
        reduce = self.since_reduce >= self.cfg.plateau_patience
        if reduce:
            self.since_reduce = 0
        return False, reduce, self.since_best >= self.cfg.early_stop_patience


# ---------------------------------------------------------------- loops

def _load_malloc_trim():
    name = ctypes.util.find_library("c")
    try:
        return getattr(ctypes.CDLL(name), "malloc_trim", None) if name else None
    except OSError:
        return None


_malloc_trim = _load_malloc_trim()


def release_memory() -> None:
    """Hand freed heap pages back to the OS.

    glibc raises its mmap threshold after freeing large blocks, so the
    multi-megabyte activation buffers end up on the main heap and fragment
    it; without a trim the resident size grows every epoch.
    """
    gc.collect()
    if _malloc_trim is not None:
        _malloc_trim(0)


def _stack(samples: Sequence[Sample], dtype) -> tuple[np.ndarray, np.ndarray]:
    x = np.stack([s.image for s in samples])[:, None].astype(dtype)
    y = np.stack([s.mask for s in samples])[:, None].astype(np.uint8)
    return x, y


def predict(g: ModelGraph, images: np.ndarray, batch: int = 8) -> np.ndarray:
    """Probability maps (N, H, W) in infer mode."""
    out = []
    with no_grad():
        for i in range(0, len(images), batch):
            x = np.asarray(images[i:i + batch])[:, None].astype(g.dtype)
            out.append(g.forward(x, "infer").data[:, 0])
    return np.concatenate(out)


def evaluate(g: ModelGraph, samples: Sequence[Sample], pos_weight: float, batch: int = 8) -> tuple[MetricsRecord, list]:
    """Aggregate and per-sample metrics of ``samples`` in infer mode."""
    records = []
    losses = []
    with no_grad():
        for i in range(0, len(samples), batch):
            chunk = samples[i:i + batch]
            x, y = _stack(chunk, g.dtype)
            p = g.forward(x, "infer")
            losses.append(weighted_bce(p, y, pos_weight).item() * len(chunk))
            for s, prob in zip(chunk, p.data[:, 0]):
                records.append(MetricsRecord.from_masks(s.mask, binarize(prob), tag=s.id))
    agg = aggregate(records)
    rec = MetricsRecord(agg["dsc"], agg["sen"], agg["ppv"], loss=float(np.sum(losses) / len(samples)))
    return rec, records


@dataclass
class FoldResult:
    best_state: dict
    best_epoch: int
    history: list  # (epoch, split, MetricsRecord)
    pos_weight: float
    model: ModelGraph
    stopped_early: bool = False


def _resolve_pos_weight(cfg: TrainConfig, train: Sequence[Sample]) -> float:
    if cfg.pos_weight == "train":
        w = estimate_class_weight(s.mask for s in train)
    else:
        w = float(cfg.pos_weight)
    if not w > 0:
        raise ValueError(f"class weight must be positive, got {w}")
    return w


def train_fold(model: ModelGraph, train: Sequence[Sample], val: Sequence[Sample], cfg: TrainConfig,
               fold=0, log: Optional[MetricsLog] = None, aug_spec: Optional[AugmentSpec] = None) -> FoldResult:
    """Optimize weighted BCE; keep the best-validation-loss state."""
    if not train or not val:
        raise ValueError("train_fold needs non-empty train and validation sets")
    pos_weight = _resolve_pos_weight(cfg, train)
    model.set_bn_momentum(cfg.bn_momentum)
    aug_spec = aug_spec or AugmentSpec()
    state = OptimizerState(lr=cfg.lr0)
    tracker = PlateauTracker(cfg)
    params = model.parameters()
    history = []
    best_state = {k: v.copy() for k, v in model.state_dict().items()}
    stopped = False
    order_rng = np.random.default_rng([cfg.seed, 1])
    for epoch in range(1, cfg.max_epochs + 1):
        order = order_rng.permutation(len(train))
        batch_losses = []
        for b0 in range(0, len(order), cfg.batch_size):
            idx = order[b0:b0 + cfg.batch_size]
            chunk = []
            for i in idx:
                s = train[int(i)]
                if cfg.augment:
                    rng = np.random.default_rng([cfg.seed, epoch, int(i)])
                    s = augment(s, aug_spec, rng)
                chunk.append(s)
            x, y = _stack(chunk, model.dtype)
            drop_rng = np.random.default_rng([cfg.seed, epoch, b0, 7])
            model.zero_grads()
            with Tape():
                loss = weighted_bce(model.forward(x, "train", drop_rng), y, pos_weight)
                if not math.isfinite(loss.item()):
                    raise FloatingPointError(f"non-finite loss at epoch {epoch}")
                backward(loss)
            adam_step(params, state, cfg)
            batch_losses.append(loss.item())
        del loss
        release_memory()
        train_rec = MetricsRecord(math.nan, math.nan, math.nan, loss=float(np.mean(batch_losses)))
        val_rec, _ = evaluate(model, val, pos_weight, cfg.eval_batch)
        history.append((epoch, "train", train_rec))
        history.append((epoch, "val", val_rec))
        if log is not None:
            log.append(epoch, fold, "train", train_rec)
            log.append(epoch, fold, "val", val_rec)
        logger.info("fold %s epoch %d: train loss %.5f val loss %.5f val dsc %.4f lr %.3g",
                    fold, epoch, train_rec.loss, val_rec.loss, val_rec.dsc, state.lr)
        improved, reduce, stop = tracker.update(epoch, val_rec.loss)
        if improved:
            best_state = {k: v.copy() for k, v in model.state_dict().items()}
        if reduce:
            state.lr *= cfg.plateau_factor
        if cfg.target_dsc and val_rec.dsc >= cfg.target_dsc:
            # the reached model is the one of interest even if its loss is not the lowest
            best_state = {k: v.copy() for k, v in model.state_dict().items()}
            tracker.best_epoch = epoch
            break
        if stop:
            stopped = True
            break
    return FoldResult(best_state, tracker.best_epoch, history, pos_weight, model, stopped)


@dataclass
class CrossValResult:
    folds: list  # FoldResult per fold
    fold_metrics: list  # MetricsRecord of each fold's best state on its validation set
    summary: dict  # metric -> (mean, std)


def summarize(fold_metrics: Sequence[MetricsRecord]) -> dict:
    out = {}
    for key in ("dsc", "sen", "ppv"):
        vals = np.array([getattr(r, key) for r in fold_metrics], dtype=float)
        vals = vals[~np.isnan(vals)]
        out[key] = (float(vals.mean()), float(vals.std())) if vals.size else (math.nan, math.nan)
    return out


def cross_validate(split: Split, cfg: TrainConfig, log: Optional[MetricsLog] = None,
                   aug_spec: Optional[AugmentSpec] = None, checkpoint_dir=None) -> CrossValResult:
    """One freshly initialized model per fold; mean +- std of validation metrics."""
    from .checkpoint import save_checkpoint

    results, metrics = [], []
    for k in range(len(split.folds)):
        tr, va = split.fold(k)
        model = build(cfg.variant, cfg.input_size, _scale(cfg.width_scale))
        fold_cfg = dataclasses.replace(cfg, seed=cfg.seed + k)
        init_weights(model, fold_cfg.seed)
        res = train_fold(model, tr, va, fold_cfg, fold=k, log=log, aug_spec=aug_spec)
        model.load_state_dict(res.best_state)
        rec, _ = evaluate(model, va, res.pos_weight, cfg.eval_batch)
        if checkpoint_dir is not None:
            save_checkpoint(model, Path(checkpoint_dir) / f"fold{k}.ckpt",
                            extra={"fold": k, "pos_weight": res.pos_weight, "best_epoch": res.best_epoch})
        results.append(res)
        metrics.append(rec)
    return CrossValResult(results, metrics, summarize(metrics))


def _scale(text):
    from fractions import Fraction
    return Fraction(str(text))
