"""Training loop, evaluation and the ablation runner."""

from __future__ import annotations

import dataclasses
import logging
import math
import time
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import checkpoint as ckpt_io
from . import tensor as T
from .data import SegSample, split, splitmix64
from .errors import ConfigurationError, NumericError
from .metrics import TABLE_COLUMNS, MetricReport, aggregate, evaluate_masks
from .model import ABLATION_SWITCHES, NetConfig, SambaUNet, parameter_census
from .tensor import Tensor

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0001
    batch_size: int = 12
    max_iters: int = 10000
    eval_interval: int = 200
    loss_mix: float = 0.5
    schedule: str = "constant"
    train_fraction: float = 0.8
    seed: int = 0
    checkpoint_dir: str | None = None
    target_dice: float | None = None
    eval_on_train: bool = False

    def __post_init__(self):
        if not 0 <= self.loss_mix <= 1:
            raise ConfigurationError(f"loss mix must lie in [0, 1], got {self.loss_mix}")
        if self.schedule not in ("constant", "poly"):
            raise ConfigurationError(f"unknown schedule {self.schedule!r}")
        if self.batch_size < 1 or self.max_iters < 0 or self.eval_interval < 1:
            raise ConfigurationError("batch size and eval interval must be >= 1, iterations >= 0")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


PROFILES = {
    "paper": TrainConfig(),
    "desk": TrainConfig(batch_size=4, max_iters=2000),
}


# ---------------------------------------------------------------------------
# loss and optimizer
# ---------------------------------------------------------------------------

def one_hot(labels: np.ndarray, num_classes: int, dtype=np.float32) -> np.ndarray:
    """(B, H, W) int -> (B, K, H, W)."""
    return (labels[:, None] == np.arange(num_classes)[None, :, None, None]).astype(dtype)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    target = T.Tensor(one_hot(labels, logits.shape[1]), dtype=logits.dtype)
    logp = T.log_softmax(logits, axis=1)
    return -(logp * target).sum() * (1.0 / (labels.size))


def soft_dice_loss(logits: Tensor, labels: np.ndarray, eps: float = 1e-5) -> Tensor:
    """1 - mean over classes of the batch soft Dice."""
    probs = T.softmax(logits, axis=1)
    target = T.Tensor(one_hot(labels, logits.shape[1]), dtype=logits.dtype)
    inter = (probs * target).sum(axis=(0, 2, 3))
    denom = probs.sum(axis=(0, 2, 3)) + target.sum(axis=(0, 2, 3))
    dice = (inter * 2.0 + eps) / (denom + eps)
    return 1.0 - dice.mean()


def segmentation_loss(logits: Tensor, labels: np.ndarray, mix: float = 0.5) -> Tensor:
    return cross_entropy(logits, labels) * mix + soft_dice_loss(logits, labels) * (1.0 - mix)


class SGD:
    """Momentum SGD with decoupled weight decay (also scaled by the learning rate)."""

    def __init__(self, named_params, lr: float, momentum: float = 0.9, weight_decay: float = 0.0):
        self.params = OrderedDict((n, p) for n, p in named_params if p.trainable)
        self.lr, self.momentum, self.weight_decay = lr, momentum, weight_decay
        self.buffers: OrderedDict[str, np.ndarray] = OrderedDict(
            (n, np.zeros_like(p.data)) for n, p in self.params.items()
        )

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        for name, p in self.params.items():
            if p.grad is None:
                continue
            buf = self.buffers[name]
            buf *= self.momentum
            buf += p.grad
            if self.weight_decay:
                p.data -= (lr * self.weight_decay) * p.data
            p.data -= lr * buf

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def _stack(samples: Sequence[SegSample]) -> tuple[np.ndarray, np.ndarray]:
    images = np.stack([s.image for s in samples])[:, None].astype(np.float32)
    labels = np.stack([s.label for s in samples]).astype(np.int64)
    return images, labels


def predict(net: SambaUNet, images: np.ndarray, batch_size: int = 8) -> np.ndarray:
    """Argmax label masks for (N, 1, H, W) images."""
    out = []
    with T.no_grad():
        for i in range(0, len(images), batch_size):
            logits = net(T.Tensor(images[i:i + batch_size]))
            out.append(np.argmax(logits.data, axis=1).astype(np.uint8))
    return np.concatenate(out)


def evaluate_predictions(preds: np.ndarray, samples: Sequence[SegSample],
                         spacing: float = 1.0) -> list[MetricReport]:
    if len(preds) != len(samples):
        raise ConfigurationError(f"{len(preds)} predictions for {len(samples)} samples")
    return [evaluate_masks(p, s.label, spacing) for p, s in zip(preds, samples)]


def evaluate(net: SambaUNet, samples: Sequence[SegSample], spacing: float = 1.0) -> list[MetricReport]:
    size = net.cfg.image_size
    for s in samples:
        if s.image.shape != (size, size):
            raise ConfigurationError(
                f"data extent {s.image.shape} does not match the network input {size}x{size}"
            )
    images, _ = _stack(samples)
    return evaluate_predictions(predict(net, images), samples, spacing)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    net: SambaUNet
    history: list = field(default_factory=list)
    evals: list = field(default_factory=list)
    best: dict = field(default_factory=dict)
    best_state: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)
    checkpoint: ckpt_io.Checkpoint | None = None
    seconds: float = 0.0

    @property
    def losses(self) -> list[float]:
        return [h["loss"] for h in self.history]


def batch_indices(seed: int, iteration: int, n: int, batch: int) -> tuple[int, np.ndarray]:
    batch_seed = splitmix64((seed << 32) ^ iteration)
    rng = np.random.default_rng(batch_seed)
    return batch_seed, rng.choice(n, size=batch, replace=n < batch)


def train(cfg: TrainConfig, net_cfg: NetConfig, data: Sequence[SegSample] | str | Path,
          callback: Callable[[dict], None] | None = None) -> TrainResult:
    """Run the optimization loop; keeps the checkpoint with the best validation mDice."""
    if isinstance(data, (str, Path)):
        from .data import read_dataset

        data = read_dataset(data)
    data = list(data)
    if cfg.eval_on_train:
        train_set = val_set = data
    else:
        train_set, val_set = split(data, cfg.train_fraction, cfg.seed)

    net = SambaUNet(net_cfg)
    opt = SGD(net.named_parameters(), cfg.lr, cfg.momentum, cfg.weight_decay)
    images, labels = _stack(train_set)
    result = TrainResult(net)
    ckpt_dir = Path(cfg.checkpoint_dir) if cfg.checkpoint_dir else None
    if ckpt_dir:
        ckpt_dir.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()

    def validate(iteration: int) -> bool:
        reports = evaluate(net, val_set)
        agg = aggregate(reports).summary()
        record = {"iteration": iteration, "val_mDice": agg["mDice"], "val_HD95": agg["mHD95"]}
        result.evals.append(record)
        if result.history and result.history[-1]["iteration"] == iteration:
            result.history[-1].update(record)
        if not result.best or agg["mDice"] > result.best["mDice"]:
            result.best = {"iteration": iteration, **agg}
            result.best_state = net.state_dict()
            result.checkpoint = _make_checkpoint(net, opt, cfg, iteration, result.best)
            if ckpt_dir:
                ckpt_io.save(result.checkpoint, ckpt_dir / "best.smbc")
        logger.info("iter %d  val mDice %.4f  HD95 %.3f", iteration, agg["mDice"], agg["mHD95"])
        return cfg.target_dice is not None and agg["mDice"] >= cfg.target_dice

    if cfg.max_iters == 0:
        validate(0)
    for it in range(1, cfg.max_iters + 1):
        batch_seed, idx = batch_indices(cfg.seed, it, len(train_set), cfg.batch_size)
        logits = net(T.Tensor(images[idx]))
        loss = segmentation_loss(logits, labels[idx], cfg.loss_mix)
        value = loss.item()
        if not math.isfinite(value):
            dump = _dump_batch(ckpt_dir, it, batch_seed, images[idx], labels[idx])
            raise NumericError(
                f"non-finite loss {value} at iteration {it} (batch seed {batch_seed}); "
                f"batch dumped to {dump}"
            )
        opt.zero_grad()
        loss.backward()
        lr = cfg.lr if cfg.schedule == "constant" else cfg.lr * (1 - (it - 1) / cfg.max_iters) ** 0.9
        opt.step(lr)
        entry = {"iteration": it, "loss": value}
        result.history.append(entry)
        if callback:
            callback(entry)
        if it % cfg.eval_interval == 0 or it == cfg.max_iters:
            if validate(it):
                break
    result.seconds = time.perf_counter() - start
    if ckpt_dir:
        ckpt_io.save(_make_checkpoint(net, opt, cfg, result.history[-1]["iteration"] if result.history else 0,
                                      result.best), ckpt_dir / "last.smbc")
    return result


def _make_checkpoint(net: SambaUNet, opt: SGD, cfg: TrainConfig, iteration: int,
                     best: dict) -> ckpt_io.Checkpoint:
    return ckpt_io.Checkpoint(
        net_config=net.cfg.to_dict(),
        train_config=cfg.to_dict(),
        params=net.state_dict(),
        buffers=OrderedDict((n, b.copy()) for n, b in opt.buffers.items()),
        iteration=iteration,
        best={k: (v if not isinstance(v, float) or math.isfinite(v) else None) for k, v in best.items()},
    )


def _dump_batch(ckpt_dir: Path | None, it: int, seed: int, images, labels) -> Path:
    path = (ckpt_dir or Path(".")) / f"nan_batch_iter{it}_seed{seed}.npz"
    np.savez(path, images=images, labels=labels, batch_seed=seed, iteration=it)
    return path


def net_from_checkpoint(ckpt: ckpt_io.Checkpoint) -> SambaUNet:
    net = SambaUNet(NetConfig.from_dict(ckpt.net_config))
    net.load_state_dict(ckpt.params)
    return net


# ---------------------------------------------------------------------------
# ablation
# ---------------------------------------------------------------------------

@dataclass
class AblationRow:
    name: str
    labels: tuple
    params: int
    metrics: dict
    census: dict


def ablation_configs(base: NetConfig) -> list[tuple[str, tuple, NetConfig]]:
    rows = [("ALL", ("ALL",), base)]
    for switch, (label, alias) in ABLATION_SWITCHES.items():
        names = (label, f"w/o {alias}")
        if switch == "mlp_adapter":
            names = (label, "w/o MLP-Adapter", "w/o IRMLP")
        elif switch == "gcaa":
            names = (label, "w/o GCAA")
        rows.append((label, names, base.ablated(switch)))
    return rows


def ablate(train_cfg: TrainConfig, net_cfg: NetConfig, data, callback=None) -> list[AblationRow]:
    rows = []
    for name, labels, cfg in ablation_configs(net_cfg):
        logger.info("ablation run: %s", name)
        result = train(train_cfg, cfg, data, callback)
        census = parameter_census(result.net)
        metrics = {k: result.best.get(k, math.nan) for k in TABLE_COLUMNS}
        rows.append(AblationRow(name, labels, census["total"], metrics, dict(census)))
    return rows


def format_table(rows: Sequence[AblationRow]) -> str:
    header = ("Configuration",) + TABLE_COLUMNS
    lines = [" | ".join(header), " | ".join("---" for _ in header)]
    for r in rows:
        cells = [r.name] + [
            f"{r.metrics[c]:.4f}" if math.isfinite(r.metrics[c]) else "undefined" for c in TABLE_COLUMNS
        ]
        lines.append(" | ".join(cells))
    return "\n".join(lines)
