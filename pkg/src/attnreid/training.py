"""Augmentation, identity-balanced sampling, SGD and the training loops."""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Iterable, Iterator, Optional, Sequence

import numpy as np

from .backbone import Model, build_model
from .data import ReidDataset, normalize_images
from .engine import Tensor, check_finite, no_grad, precision
from .losses import circle_loss, cross_entropy_ls

LOSSES = ("ce", "circle", "circle_only")
CROP_MODES = ("random", "center")
CIRCLE_FEATURES = ("bnneck", "pooled")
LOG_SCHEMA = 1


@dataclass(frozen=True)
class TrainConfig:
    loss: str = "ce"
    label_smoothing: float = 0.1
    gamma: float = 128.0
    margin: float = 0.25
    circle_weight: float = 1.0
    circle_features: str = "bnneck"
    epochs: int = 120
    warmup_epochs: int = 10
    base_lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    milestones: tuple = (40, 70)
    lr_decay: float = 0.1
    warmup_factor: float = 0.1
    p_ids: int = 16
    k_instances: int = 4
    flip_prob: float = 0.5
    pad: int = 10
    crop: str = "random"
    erasing_prob: float = 0.5
    seed: int = 0
    prefetch: bool = False

    def __post_init__(self):
        object.__setattr__(self, "milestones", tuple(int(m) for m in self.milestones))
        if self.loss not in LOSSES:
            raise ValueError(f"loss must be one of {LOSSES}, got {self.loss!r}")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ValueError("label_smoothing must be in [0, 1)")
        if not 0.0 < self.margin < 1.0:
            raise ValueError("circle margin must be in (0, 1)")
        if not self.gamma > 0:
            raise ValueError("circle gamma must be positive")
        if self.epochs < 0 or self.warmup_epochs < 0:
            raise ValueError("epoch counts must be non-negative")
        if self.base_lr < 0:
            raise ValueError("base_lr must be non-negative")
        if self.p_ids < 1 or self.k_instances < 1:
            raise ValueError("sampler sizes must be positive")
        if self.loss != "ce" and self.k_instances < 2:
            raise ValueError("circle loss needs k_instances >= 2 to form positive pairs")
        if self.circle_features not in CIRCLE_FEATURES:
            raise ValueError(f"circle_features must be one of {CIRCLE_FEATURES}")
        if self.crop not in CROP_MODES:
            raise ValueError(f"crop must be one of {CROP_MODES}")
        for name in ("flip_prob", "erasing_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must be a probability")
        if self.pad < 0:
            raise ValueError("pad must be non-negative")

    @property
    def batch_size(self) -> int:
        return self.p_ids * self.k_instances

    def with_(self, **changes) -> "TrainConfig":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["milestones"] = list(self.milestones)
        return d


def desk_train_config(**changes) -> TrainConfig:
    """Schedule sized for the 64x32 synthetic set.

    The circle term is weighted by about 1/gamma: its gradient grows with
    gamma, and at full weight it swamps cross-entropy and collapses the
    embedding under this learning rate.
    """
    base = TrainConfig(epochs=40, warmup_epochs=5, base_lr=0.05, milestones=(30,), p_ids=8,
                       k_instances=4, pad=4, circle_weight=0.01)
    return base.with_(**changes)


# ---------------------------------------------------------------------------
# log
# ---------------------------------------------------------------------------

@dataclass
class TrainLog:
    epochs: list = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def add(self, epoch: int, loss: float, lr: float, **extra) -> None:
        if self.epochs and epoch <= self.epochs[-1]["epoch"]:
            raise ValueError(f"epoch {epoch} logged after epoch {self.epochs[-1]['epoch']}")
        self.epochs.append({"epoch": int(epoch), "loss": float(loss), "lr": float(lr), **extra})

    def snapshot(self, epoch: int, **metrics) -> None:
        """Attach evaluation metrics to an epoch already logged."""
        for row in self.epochs:
            if row["epoch"] == epoch:
                row.update({k: float(v) for k, v in metrics.items()})
                return
        raise KeyError(f"epoch {epoch} not in log")

    @property
    def losses(self) -> list:
        return [row["loss"] for row in self.epochs]

    def write_csv(self, fh) -> None:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["schema", "epoch", "loss", "lr"])
        for row in self.epochs:
            writer.writerow([LOG_SCHEMA, row["epoch"], repr(row["loss"]), repr(row["lr"])])

    def to_dict(self) -> dict:
        return {
            "schema": LOG_SCHEMA,
            "config": self.config,
            "epochs": self.epochs,
            "final_loss": self.epochs[-1]["loss"] if self.epochs else None,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainLog":
        if d.get("schema") != LOG_SCHEMA:
            raise ValueError(f"unsupported train log schema {d.get('schema')!r}")
        log = cls(config=d.get("config", {}))
        for row in d["epochs"]:
            extra = {k: v for k, v in row.items() if k not in ("epoch", "loss", "lr")}
            log.add(row["epoch"], row["loss"], row["lr"], **extra)
        return log


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

def random_erasing_box(h: int, w: int, rng: np.random.Generator, area=(0.02, 0.4),
                       min_aspect: float = 0.3, attempts: int = 100) -> Optional[tuple]:
    """(top, left, height, width) of a random rectangle inside an h x w image, or None."""
    log_lo, log_hi = math.log(min_aspect), math.log(1.0 / min_aspect)
    for _ in range(attempts):
        target = rng.uniform(*area) * h * w
        aspect = math.exp(rng.uniform(log_lo, log_hi))
        eh = int(round(math.sqrt(target * aspect)))
        ew = int(round(math.sqrt(target / aspect)))
        if 0 < eh < h and 0 < ew < w:
            top = int(rng.integers(0, h - eh + 1))
            left = int(rng.integers(0, w - ew + 1))
            return top, left, eh, ew
    return None


def augment(img: np.ndarray, cfg: TrainConfig, rng: np.random.Generator) -> np.ndarray:
    """Flip, pad-and-crop and random erasing on one uint8 H x W x 3 image."""
    h, w = img.shape[:2]
    out = img
    if rng.random() < cfg.flip_prob:
        out = out[:, ::-1]
    if cfg.pad:
        p = cfg.pad
        padded = np.zeros((h + 2 * p, w + 2 * p, img.shape[2]), dtype=img.dtype)
        padded[p:p + h, p:p + w] = out
        if cfg.crop == "random":
            top, left = int(rng.integers(0, 2 * p + 1)), int(rng.integers(0, 2 * p + 1))
        else:
            top = left = p
        out = padded[top:top + h, left:left + w]
    if rng.random() < cfg.erasing_prob:
        box = random_erasing_box(h, w, rng)
        if box is not None:
            out = np.array(out)
            top, left, eh, ew = box
            out[top:top + eh, left:left + ew] = rng.integers(0, 256, size=(eh, ew, img.shape[2]), dtype=np.uint8)
    return np.ascontiguousarray(out)


# ---------------------------------------------------------------------------
# sampling, optimizer, schedule
# ---------------------------------------------------------------------------

def identity_batches(labels: np.ndarray, p: int, k: int, rng: np.random.Generator) -> list:
    """One epoch of P x K batches.

    Each identity's images are shuffled and cut into chunks of K (short chunks
    are topped up by resampling that identity); batches take one chunk from
    each of P identities drawn at random among those with chunks left.
    """
    labels = np.asarray(labels)
    ids = np.unique(labels)
    if len(ids) < p:
        raise ValueError(f"P={p} identities requested but only {len(ids)} available")
    chunks = {}
    for pid in ids.tolist():
        idx = rng.permutation(np.flatnonzero(labels == pid))
        if len(idx) < k:
            idx = np.concatenate([idx, rng.choice(idx, size=k - len(idx), replace=True)])
        n = len(idx) // k
        chunks[pid] = [idx[i * k:(i + 1) * k] for i in range(n)]
    batches = []
    while True:
        alive = [pid for pid in ids.tolist() if chunks[pid]]
        if len(alive) < p:
            break
        chosen = rng.choice(alive, size=p, replace=False)
        batches.append(np.concatenate([chunks[int(pid)].pop() for pid in chosen]))
    return batches


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Linear warmup from ``warmup_factor * base_lr``, then step decay at each milestone."""
    if epoch < cfg.warmup_epochs:
        alpha = epoch / cfg.warmup_epochs
        factor = cfg.warmup_factor * (1.0 - alpha) + alpha
    else:
        factor = 1.0
    decays = sum(1 for m in cfg.milestones if epoch >= m)
    return cfg.base_lr * factor * cfg.lr_decay ** decays


class SGD:
    """Momentum SGD; weight decay applies to weight matrices and kernels only."""

    def __init__(self, params: Sequence[Tensor], momentum: float = 0.9, weight_decay: float = 0.0):
        self.params = list(params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float) -> None:
        for p, v in zip(self.params, self.velocity):
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay and p.ndim > 1:
                g = g + self.weight_decay * p.data
            v *= self.momentum
            v += g
            p.data -= (lr * v).astype(p.dtype)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def _train_view(dataset: ReidDataset):
    idx = dataset.indices("train")
    if len(idx) == 0:
        raise ValueError("dataset has no training images")
    pids = dataset.pids[idx]
    classes = np.unique(pids)
    labels = np.searchsorted(classes, pids)
    return idx, labels, classes


def compute_loss(model: Model, x: Tensor, labels: np.ndarray, cfg: TrainConfig) -> Tensor:
    pooled, feat, logits = model.forward_train(x)
    emb = feat if cfg.circle_features == "bnneck" else pooled
    if cfg.loss == "circle_only":
        loss = circle_loss(emb, labels, cfg.gamma, cfg.margin)
    else:
        loss = cross_entropy_ls(logits, labels, cfg.label_smoothing)
        if cfg.loss == "circle":
            loss = loss + circle_loss(emb, labels, cfg.gamma, cfg.margin) * cfg.circle_weight
    return check_finite(loss, "training loss")


def _dtype(model: Model):
    return model.conv1.weight.dtype


def evaluate_loss(model: Model, dataset: ReidDataset, cfg: TrainConfig, freeze_bn: bool = False) -> float:
    """Mean training loss over one fixed P x K pass without augmentation.

    Batch-norm statistics are those of each batch (as during training) unless
    ``freeze_bn``; running buffers are restored afterwards.
    """
    idx, labels, _ = _train_view(dataset)
    buffers = {n: b.copy() for n, b in model.named_buffers()}
    was_training = model.training
    model.train(not freeze_bn)
    rng = np.random.default_rng([cfg.seed, 0x5EED])
    total, count = 0.0, 0
    try:
        with no_grad():
            for batch in identity_batches(labels, cfg.p_ids, cfg.k_instances, rng):
                x = Tensor(dataset.tensor(idx[batch], dtype=_dtype(model)))
                total += compute_loss(model, x, labels[batch], cfg).item()
                count += 1
    finally:
        model.train(was_training)
        own = dict(model.named_buffers())
        for n, b in buffers.items():
            own[n][...] = b
    if count == 0:
        raise ValueError("training split too small for one P x K batch")
    return total / count


def _make_batch(dataset, idx, labels, batch, cfg, seed_key, dtype):
    rng = np.random.default_rng(seed_key)
    imgs = np.stack([augment(dataset.images[i], cfg, rng) for i in idx[batch]])
    return normalize_images(imgs, dataset.mean, dataset.std, dtype), labels[batch]


def _batches(dataset, idx, labels, cfg, epoch, dtype) -> Iterator:
    order_rng = np.random.default_rng([cfg.seed, epoch])
    plan = identity_batches(labels, cfg.p_ids, cfg.k_instances, order_rng)
    keys = [[cfg.seed, epoch, b] for b in range(len(plan))]
    if not cfg.prefetch:
        for batch, key in zip(plan, keys):
            yield _make_batch(dataset, idx, labels, batch, cfg, key, dtype)
        return
    # augmentation seeds depend only on (seed, epoch, batch), so prefetching
    # one batch ahead does not change results
    with ThreadPoolExecutor(max_workers=1) as pool:
        pending = None
        for batch, key in zip(plan, keys):
            nxt = pool.submit(_make_batch, dataset, idx, labels, batch, cfg, key, dtype)
            if pending is not None:
                yield pending.result()
            pending = nxt
        if pending is not None:
            yield pending.result()


def train(model: Model, dataset: ReidDataset, cfg: TrainConfig, trainable: Iterable[str] | None = None,
          freeze_bn: bool = False, callback: Callable | None = None):
    """Train ``model`` in place on the train split; returns (model, TrainLog).

    ``trainable`` restricts updates to the named parameters. With
    ``freeze_bn`` the network runs in eval mode so running statistics stay put.
    Epoch 0 of the log is the loss before any update.
    """
    idx, labels, classes = _train_view(dataset)
    if len(classes) != model.cfg.num_classes:
        raise ValueError(f"classifier width {model.cfg.num_classes} does not match "
                         f"{len(classes)} training identities")
    named = dict(model.named_parameters())
    if trainable is None:
        params = list(named.values())
    else:
        names = list(trainable)
        unknown = [n for n in names if n not in named]
        if unknown:
            raise KeyError(f"unknown parameters: {unknown}")
        params = [named[n] for n in names]
    frozen = [p for p in named.values() if all(p is not q for q in params)]

    log = TrainLog(config=cfg.to_dict())
    log.add(0, evaluate_loss(model, dataset, cfg, freeze_bn=freeze_bn), lr_at(0, cfg))
    opt = SGD(params, cfg.momentum, cfg.weight_decay)
    dtype = _dtype(model)
    for p in frozen:
        p.requires_grad = False
    try:
        for epoch in range(cfg.epochs):
            lr = lr_at(epoch, cfg)
            model.train(not freeze_bn)
            losses = []
            for x, y in _batches(dataset, idx, labels, cfg, epoch, dtype):
                opt.zero_grad()
                loss = compute_loss(model, Tensor(x), y, cfg)
                loss.backward()
                opt.step(lr)
                losses.append(loss.item())
            log.add(epoch + 1, float(np.mean(losses)) if losses else float("nan"), lr)
            if callback is not None:
                callback(epoch + 1, model, log)
    finally:
        for p in frozen:
            p.requires_grad = True
        opt.zero_grad()
    model.eval()
    return model, log


def clone_model(model: Model) -> Model:
    name = "float64" if _dtype(model) == np.float64 else "float32"
    with precision(name):
        copy = build_model(model.cfg, model.plan, model.seed)
    copy.load_state_dict(model.state_dict())
    return copy


def finetune_two_step(model: Model, target: ReidDataset, cfg1: TrainConfig, cfg2: TrainConfig,
                      seed: int = 0, callback: Callable | None = None) -> Model:
    """Adapt a pretrained model to a new identity set.

    A copy of ``model`` gets a freshly initialized classifier sized to the
    target's training identities. Step 1 trains only that classifier with the
    backbone frozen (eval-mode batch norm included); step 2 trains everything.
    ``callback(step, model, log)`` runs after each step. The input model is
    not modified.
    """
    tuned = clone_model(model)
    name = "float64" if _dtype(model) == np.float64 else "float32"
    with precision(name):
        tuned.reset_classifier(target.num_ids("train"), seed)
    tuned, log1 = train(tuned, target, cfg1, trainable=tuned.head_parameter_names(), freeze_bn=True)
    if callback is not None:
        callback(1, tuned, log1)
    tuned, log2 = train(tuned, target, cfg2)
    if callback is not None:
        callback(2, tuned, log2)
    return tuned
