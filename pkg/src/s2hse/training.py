"""Mini-batch training: Nesterov-Adam steps, dataset splitting, early stopping.

All randomness (shuffling, dropout masks) flows from one seeded generator so
two runs with the same config are bit-identical. Batch assembly runs inline;
parameters have a single writer (this module).
"""

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import net, nn
from .errors import DivergenceError, InvalidConfigError, InvalidInputError


@dataclass
class TrainConfig:
    lr: float = 2e-4
    batch_size: int = 8
    patience: int = 10
    max_epochs: int = 200
    seed: int = 42
    split: str = "spatial"
    val_fraction: float = 0.25
    class_weights: tuple | None = None  # optional (w0, w1); off by default

    def __post_init__(self):
        if self.lr <= 0:
            raise InvalidConfigError(f"lr must be > 0, got {self.lr}")
        if self.batch_size < 1 or self.patience < 1 or self.max_epochs < 1:
            raise InvalidConfigError("batch_size, patience and max_epochs must be >= 1")
        if not (0.0 < self.val_fraction < 1.0):
            raise InvalidConfigError(f"val_fraction must be in (0, 1), got {self.val_fraction}")
        if self.split not in ("spatial", "random"):
            raise InvalidConfigError(f"split must be spatial|random, got {self.split!r}")


@dataclass
class NadamState:
    """Per-parameter first/second moments plus the shared step counter."""

    m: list
    v: list
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def init(cls, params):
        return cls(m=[np.zeros_like(p) for p in params],
                   v=[np.zeros_like(p) for p in params])


def nadam_step(params, grads, state, lr):
    """One Nesterov-Adam update, applied to ``params`` in place.

    With t the incremented step counter:
        m <- b1*m + (1-b1)*g          mhat <- m / (1 - b1^(t+1))
        v <- b2*v + (1-b2)*g^2        ghat <- g / (1 - b1^t)
                                      vhat <- v / (1 - b2^t)
        theta <- theta - lr * (b1*mhat + (1-b1)*ghat) / (sqrt(vhat) + eps)
    """
    if len(params) != len(grads):
        raise InvalidInputError(f"{len(params)} params vs {len(grads)} grads")
    for i, g in enumerate(grads):
        if not np.isfinite(g).all():
            raise DivergenceError(f"non-finite gradient in parameter {i} at step {state.t + 1}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c_m = 1.0 - b1 ** (state.t + 1)
    c_g = 1.0 - b1 ** state.t
    c_v = 1.0 - b2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * np.square(g)
        update = (b1 * (m / c_m) + (1.0 - b1) * (g / c_g)) / (np.sqrt(v / c_v) + state.eps)
        p -= lr * update


def split_dataset(samples, mode, fraction, rng):
    """Partition a SampleSet into (train, val).

    random: uniform draw without replacement of ~fraction of the samples.
    spatial: per scene, patches whose full footprint lies inside the
    upper-left region covering ~fraction of the scene area (side factor
    sqrt(fraction) per axis) go to validation; patches straddling the region
    boundary are discarded so the two footprint sets are disjoint.
    """
    if not (0.0 < fraction < 1.0):
        raise InvalidConfigError(f"fraction must be in (0, 1), got {fraction}")
    n = len(samples)
    if n < 2:
        raise InvalidInputError(f"need at least 2 samples to split, got {n}")

    if mode == "random":
        perm = rng.permutation(n)
        n_val = max(1, min(n - 1, round(fraction * n)))
        val_idx = np.sort(perm[:n_val])
        train_idx = np.sort(perm[n_val:])
    elif mode == "spatial":
        side = math.sqrt(fraction)
        train_sel, val_sel = [], []
        for i in range(n):
            sid = samples.scene[i]
            if sid not in samples.scene_shapes:
                raise InvalidInputError(f"sample scene {sid!r} missing from scene_shapes")
            sh, sw = samples.scene_shapes[sid]
            r, c = samples.origin[i]
            p = samples.patch
            region_h, region_w = side * sh, side * sw
            inside = (r + p <= region_h) and (c + p <= region_w)
            intersects = (r < region_h) and (c < region_w)
            if inside:
                val_sel.append(i)
            elif not intersects:
                train_sel.append(i)
            # else: straddles the boundary -> discarded
        train_idx, val_idx = np.asarray(train_sel), np.asarray(val_sel)
    else:
        raise InvalidConfigError(f"split mode must be spatial|random, got {mode!r}")

    if len(train_idx) == 0 or len(val_idx) == 0:
        raise InvalidInputError(
            f"{mode} split left an empty side (train {len(train_idx)}, val {len(val_idx)})")
    return samples.subset(train_idx), samples.subset(val_idx)


class EarlyStopping:
    """Stop when the tracked loss has not decreased for ``patience`` epochs."""

    def __init__(self, patience):
        if patience < 1:
            raise InvalidConfigError(f"patience must be >= 1, got {patience}")
        self.patience = patience
        self.best = math.inf
        self.best_epoch = None
        self.stale = 0

    def update(self, epoch, loss):
        """Record an epoch's loss; returns True when training should stop."""
        if loss < self.best:
            self.best = loss
            self.best_epoch = epoch
            self.stale = 0
        else:
            self.stale += 1
        return self.stale >= self.patience


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_loss: float
    seconds: float


def history_lines(history):
    """Render history in the line-per-epoch log format."""
    lines = ["epoch,train_loss,val_loss,seconds"]
    lines += [f"{h.epoch},{h.train_loss!r},{h.val_loss!r},{h.seconds:.3f}" for h in history]
    return lines


@dataclass
class _Snapshot:
    params: list = field(default_factory=list)

    def take(self, model):
        self.params = [p.copy() for p in model.parameters()]

    def restore(self, model):
        for p, saved in zip(model.parameters(), self.params):
            p[...] = saved


def mean_loss(model, samples, batch_size, class_weights=None):
    """Pixel-weighted mean loss over a SampleSet, eval mode."""
    total, weight = 0.0, 0.0
    for lo in range(0, len(samples), batch_size):
        xb = samples.x[lo:lo + batch_size]
        yb = samples.y[lo:lo + batch_size]
        logits = net.forward(model, xb)
        loss, _ = nn.softmax2_xent(logits, yb, class_weights)
        n_valid = int((yb != nn.IGNORE).sum())
        total += loss * n_valid
        weight += n_valid
    return total / weight


def train(model, train_set, val_set, config, log=None):
    """Run the training loop; returns (model with best-val weights, history).

    Epochs are numbered from 1. After each full pass the validation loss is
    computed in eval mode; the lowest-loss weights are kept and restored at
    the end. Training stops once the validation loss has not improved for
    ``config.patience`` consecutive epochs, or at ``config.max_epochs``.
    """
    if len(train_set) == 0 or len(val_set) == 0:
        raise InvalidInputError("train and validation sets must be non-empty")
    rng = np.random.default_rng(config.seed)
    params = model.parameters()
    state = NadamState.init(params)
    stopper = EarlyStopping(config.patience)
    best = _Snapshot()
    history = []

    for epoch in range(1, config.max_epochs + 1):
        tic = time.perf_counter()
        model.set_mode("train")
        order = rng.permutation(len(train_set))
        total, weight = 0.0, 0.0
        for lo in range(0, len(order), config.batch_size):
            idx = order[lo:lo + config.batch_size]
            xb = train_set.x[idx]
            yb = train_set.y[idx]
            logits, tape = net.forward_tape(model, xb, rng)
            loss, grad = nn.softmax2_xent(logits, yb, config.class_weights)
            if not math.isfinite(loss):
                raise DivergenceError(f"non-finite training loss at epoch {epoch}", epoch=epoch)
            grads = net.backward(model, tape, grad)
            nadam_step(params, grads, state, config.lr)
            n_valid = int((yb != nn.IGNORE).sum())
            total += loss * n_valid
            weight += n_valid

        model.set_mode("eval")
        val_loss = mean_loss(model, val_set, config.batch_size, config.class_weights)
        if not math.isfinite(val_loss):
            raise DivergenceError(f"non-finite validation loss at epoch {epoch}", epoch=epoch)
        stats = EpochStats(epoch, total / weight, val_loss, time.perf_counter() - tic)
        history.append(stats)
        if log is not None:
            log(stats)
        if val_loss < stopper.best:
            best.take(model)
        if stopper.update(epoch, val_loss):
            break

    best.restore(model)
    model.set_mode("eval")
    return model, history
