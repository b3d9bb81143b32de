"""Fine-tuning strategies, optimizers, schedules and the training loop."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autograd as ag
from .errors import ConfigError, ContractError, FreezeBreachError, NumericalError
from .synthcenters import augment

logger = logging.getLogger(__name__)

STRATEGIES = ("none", "partial", "full", "shallow_prompt", "deep_prompt")
PROMPT_STRATEGIES = ("shallow_prompt", "deep_prompt")


@dataclass(frozen=True)
class TuningStrategy:
    kind: str

    def __post_init__(self):
        if self.kind not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.kind!r}; expected one of {STRATEGIES}")

    @property
    def uses_prompts(self):
        return self.kind in PROMPT_STRATEGIES

    @property
    def prompt_mode(self):
        return {"shallow_prompt": "shallow", "deep_prompt": "deep"}.get(self.kind, "none")


def _kind(strategy):
    return strategy.kind if isinstance(strategy, TuningStrategy) else TuningStrategy(strategy).kind


def select_learnable(model, strategy):
    """Names of the parameters the strategy may update.

    partial: the final decoder stage's conv block and the head.
    shallow/deep prompt: every prompt matrix and the head.
    """
    kind = _kind(strategy)
    if kind in PROMPT_STRATEGIES:
        wanted = "shallow" if kind == "shallow_prompt" else "deep"
        if model.prompt_config.mode != wanted:
            raise ContractError(f"strategy {kind} needs a model with {wanted} prompts, got mode {model.prompt_config.mode!r}")
        return model.prompt_names + model.head_names
    if kind == "none":
        return []
    if kind == "partial":
        return model.last_block_names + model.head_names
    return list(model.params)


def apply_freeze(model, strategy):
    """Set ``requires_grad`` to match the strategy and clear stale grads."""
    learnable = set(select_learnable(model, strategy))
    for name, p in model.params.items():
        p.requires_grad = name in learnable
        p.grad = None
    return [n for n in model.params if n in learnable]


def count_learnable(model, strategy):
    """(learnable scalar count, fraction of all model scalars)."""
    names = select_learnable(model, strategy)
    count = sum(model.params[n].size for n in names)
    total = model.num_parameters()
    return count, count / total


# ---------------------------------------------------------------------------
# optimizers


@dataclass
class OptimizerConfig:
    algorithm: str = "sgd"
    lr0: float = 0.05
    weight_decay: float = 0.0
    schedule: str = "cosine"
    epochs: int = 100
    batch_size: int = 3
    momentum: float = 0.0
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.algorithm not in ("sgd", "adamw"):
            raise ConfigError(f"unknown optimizer {self.algorithm!r}")
        if self.schedule not in ("constant", "cosine"):
            raise ConfigError(f"unknown schedule {self.schedule!r}")
        if self.epochs < 0 or self.batch_size < 1 or self.lr0 < 0:
            raise ConfigError("epochs >= 0, batch_size >= 1 and lr0 >= 0 are required")

    @classmethod
    def for_strategy(cls, strategy, **overrides):
        """Defaults per strategy: AdamW 1e-5 / wd 1e-3 / constant for full and
        partial, SGD 0.05 / wd 0 / cosine for prompt strategies."""
        kind = _kind(strategy)
        if kind in PROMPT_STRATEGIES:
            base = dict(algorithm="sgd", lr0=0.05, weight_decay=0.0, schedule="cosine")
        else:
            base = dict(algorithm="adamw", lr0=1e-5, weight_decay=1e-3, schedule="constant")
        base.update(overrides)
        return cls(**base)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def cosine_lr(t, total, lr0):
    """lr0 * (1 + cos(pi * t / total)) / 2 for 0 <= t <= total."""
    if total <= 0:
        raise ContractError("total steps must be positive")
    if t < 0 or t > total:
        raise ContractError(f"step {t} outside [0, {total}]")
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * t / total))


def learning_rate(config, t, total):
    if config.schedule == "constant":
        return config.lr0
    return cosine_lr(t, total, config.lr0)


def _check_grads(params, learnable):
    for name, p in params.items():
        if name not in learnable and p.grad is not None:
            raise FreezeBreachError(f"frozen parameter {name} received a gradient")


def sgd_step(params, learnable, lr, config, state=None):
    """p <- p - lr * (g + wd * p), with optional heavy-ball momentum."""
    _check_grads(params, learnable)
    state = {} if state is None else state
    for name in learnable:
        p = params[name]
        if p.grad is None:
            continue
        g = p.grad + config.weight_decay * p.data if config.weight_decay else p.grad
        if config.momentum:
            buf = state.get(name)
            buf = g.copy() if buf is None else config.momentum * buf + g
            state[name] = buf
            g = buf
        p.data -= (lr * g).astype(p.dtype)
    return state


def adamw_step(params, learnable, lr, config, state=None):
    """AdamW with decoupled weight decay.

    m <- b1 m + (1 - b1) g;  v <- b2 v + (1 - b2) g^2
    p <- p - lr * wd * p - lr * (m / (1 - b1^t)) / (sqrt(v / (1 - b2^t)) + eps)
    """
    _check_grads(params, learnable)
    state = {"t": 0} if state is None else state
    state["t"] += 1
    t = state["t"]
    b1, b2 = config.betas
    for name in learnable:
        p = params[name]
        if p.grad is None:
            continue
        g = p.grad.astype(np.float64)
        m, v = state.get(("m", name)), state.get(("v", name))
        m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
        v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
        state[("m", name)], state[("v", name)] = m, v
        mhat = m / (1 - b1**t)
        vhat = v / (1 - b2**t)
        new = p.data.astype(np.float64)
        new = new - lr * config.weight_decay * new - lr * mhat / (np.sqrt(vhat) + config.eps)
        p.data[...] = new.astype(p.dtype)
    return state


# ---------------------------------------------------------------------------
# losses


def one_hot(mask, num_classes):
    return (np.arange(num_classes).reshape((-1,) + (1,) * mask.ndim) == mask[None]).astype(np.float64)


def _class_probs(logits):
    """(K, X, Y, Z) logits -> (V, K) softmax probabilities."""
    k = logits.shape[0]
    return ag.softmax_rows(ag.transpose(ag.reshape(logits, (k, -1))))


def soft_dice_loss(logits_list, masks, foreground=(1, 2), smooth=1.0):
    """1 - mean over foreground classes of the batch soft Dice.

    Numerators and denominators are summed over every voxel of every sample
    in the batch before the ratio is taken.
    """
    k = logits_list[0].shape[0]
    inter = denom = None
    for logits, mask in zip(logits_list, masks):
        probs = _class_probs(logits)
        target = ag.Tensor(one_hot(mask, k).reshape(k, -1).T, dtype=probs.dtype)
        i = ag.tsum(ag.mul(probs, target), axis=0)
        d = ag.add(ag.tsum(probs, axis=0), ag.Tensor(target.data.sum(axis=0), dtype=probs.dtype))
        inter = i if inter is None else ag.add(inter, i)
        denom = d if denom is None else ag.add(denom, d)
    dice = ag.div(ag.add(ag.mul(inter, 2.0), smooth), ag.add(denom, smooth))
    sel = ag.Tensor(np.isin(np.arange(k), foreground).astype(np.float64), dtype=dice.dtype)
    return ag.sub(ag.Tensor(np.asarray(1.0), dtype=dice.dtype), ag.mul(ag.tsum(ag.mul(dice, sel)), 1.0 / len(foreground)))


def cross_entropy_loss(logits_list, masks):
    total, count = None, 0
    for logits, mask in zip(logits_list, masks):
        k = logits.shape[0]
        logp = ag.log_softmax_rows(ag.transpose(ag.reshape(logits, (k, -1))))
        target = ag.Tensor(one_hot(mask, k).reshape(k, -1).T, dtype=logp.dtype)
        nll = ag.tsum(ag.mul(logp, target))
        total = nll if total is None else ag.add(total, nll)
        count += mask.size
    return ag.mul(total, -1.0 / count)


LOSSES = {"dice": soft_dice_loss, "ce": cross_entropy_loss}


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainingLog:
    rows: list = field(default_factory=list)  # (step, epoch, loss, lr)

    def append(self, step, epoch, loss, lr):
        self.rows.append((step, epoch, loss, lr))

    @property
    def losses(self):
        return [r[2] for r in self.rows]

    def epoch_means(self):
        out = {}
        for _, epoch, loss, _ in self.rows:
            out.setdefault(epoch, []).append(loss)
        return [float(np.mean(v)) for _, v in sorted(out.items())]

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "epoch", "loss", "lr"])
            for step, epoch, loss, lr in self.rows:
                w.writerow([step, epoch, repr(float(loss)), repr(float(lr))])

    @classmethod
    def from_csv(cls, path):
        log = cls()
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                log.append(int(row["step"]), int(row["epoch"]), float(row["loss"]), float(row["lr"]))
        return log


def train_epochs(model, samples, strategy, config, seed, crop_size=None, loss="dice", num_crops=4):
    """Fine-tune ``model`` in place on augmented crops of ``samples``.

    Each epoch draws ``num_crops`` crops per sample, shuffles them, and takes
    one optimizer step per batch. Only ``select_learnable`` parameters move.
    """
    names = apply_freeze(model, strategy)
    log = TrainingLog()
    if not names or config.epochs == 0 or not samples:
        return log
    learnable = set(names)
    crop_size = tuple(crop_size or model.config.volume_shape)
    loss_fn = LOSSES[loss]
    rng = np.random.default_rng(seed)
    steps_per_epoch = math.ceil(len(samples) * num_crops / config.batch_size)
    total = config.epochs * steps_per_epoch
    step_fn = adamw_step if config.algorithm == "adamw" else sgd_step
    state = None
    step = 0
    for epoch in range(config.epochs):
        crops = [c for s in samples for c in augment(s, rng, crop_size, num_crops)]
        order = rng.permutation(len(crops))
        for b in range(steps_per_epoch):
            batch = [crops[i] for i in order[b * config.batch_size : (b + 1) * config.batch_size]]
            logits = [model(c.volume.astype(model.dtype, copy=False)) for c in batch]
            value = loss_fn(logits, [c.mask for c in batch])
            lval = float(value.item())
            if not math.isfinite(lval):
                raise NumericalError(f"non-finite loss {lval} at step {step} (epoch {epoch})")
            ag.backward(value)
            lr = learning_rate(config, step, total)
            state = step_fn(model.params, names, lr, config, state)
            for n in names:
                model.params[n].grad = None
            _check_grads(model.params, learnable)
            log.append(step, epoch, lval, lr)
            step += 1
        logger.debug("epoch %d mean loss %.4f", epoch, np.mean(log.losses[-steps_per_epoch:]))
    for p in model.params.values():
        p.requires_grad = False
    return log
