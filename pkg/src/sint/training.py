"""Margin contrastive loss and the SGD training loop."""
import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from . import nnet
from .siamese import to_tensor

log = logging.getLogger(__name__)


def contrastive_loss(distance, label, epsilon=1.0):
    """``0.5 * y * D**2 + 0.5 * (1 - y) * max(0, eps - D**2)``, elementwise."""
    d2 = np.square(distance)
    out = 0.5 * label * d2 + 0.5 * (1 - label) * np.maximum(0.0, epsilon - d2)
    return float(out) if np.ndim(out) == 0 else out


def contrastive_loss_grad(a, b, label, epsilon=1.0):
    """Gradients of :func:`contrastive_loss` w.r.t. feature rows ``a`` and ``b``.

    Negatives already beyond the margin get exactly zero gradient.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    label = np.asarray(label, dtype=np.float64)
    diff = a - b
    d2 = np.sum(diff * diff, axis=-1)
    active = (label == 0) & (d2 < epsilon)
    coef = np.where(label == 1, 1.0, np.where(active, -1.0, 0.0))
    ga = coef[..., None] * diff
    return ga, -ga


@dataclass
class TrainingConfig:
    epsilon: float = 1.0
    sgd: nnet.SgdConfig = field(default_factory=nnet.SgdConfig)
    batch_size: int = 128
    max_epochs: int = 10
    patience: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float


@dataclass
class TrainingReport:
    records: list = field(default_factory=list)
    stop_reason: str = "max-epochs"
    best_epoch: int = 0

    @property
    def val_losses(self):
        return [r.val_loss for r in self.records]

    @property
    def best_val_loss(self):
        return self.records[self.best_epoch].val_loss

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "train_loss", "val_loss", "lr"])
            for r in self.records:
                writer.writerow([r.epoch, repr(float(r.train_loss)), repr(float(r.val_loss)), repr(float(r.lr))])


def _pair_loss(model, pairset, epsilon, with_grad):
    xq = to_tensor(pairset.query_image, model.arch.in_channels)
    xs = to_tensor(pairset.search_image, model.arch.in_channels)
    fq, cq = model.forward(xq, pairset.query_box[None])
    fs, cs = model.forward(xs, pairset.search_boxes)
    a = np.broadcast_to(fq, fs.shape)
    d = np.linalg.norm(a - fs, axis=1)
    losses = contrastive_loss(d, pairset.labels, epsilon)
    if not with_grad:
        return losses.sum(), len(losses), None
    ga, gb = contrastive_loss_grad(a, fs, pairset.labels, epsilon)
    return losses.sum(), len(losses), (ga.sum(axis=0, keepdims=True), cq, gb, cs)


def dataset_loss(model, pairsets, epsilon=1.0):
    """Mean contrastive loss over every box pair in ``pairsets``."""
    total, count = 0.0, 0
    for ps in pairsets:
        s, n, _ = _pair_loss(model, ps, epsilon, with_grad=False)
        total += s
        count += n
    return float(total / max(count, 1))


def _batches(n_items, pairs_per_item, batch_size, rng):
    order = rng.permutation(n_items)
    per = max(1, int(round(batch_size / max(pairs_per_item, 1))))
    return [order[i:i + per] for i in range(0, n_items, per)]


def train_step(model, pairsets, config, epoch):
    """One SGD step on the mean loss of ``pairsets``; returns that loss."""
    total, count, grads = 0.0, 0, []
    for ps in pairsets:
        s, n, g = _pair_loss(model, ps, config.epsilon, with_grad=True)
        total += s
        count += n
        grads.append(g)
    loss = float(total / count)
    if not np.isfinite(loss):
        raise FloatingPointError(f"non-finite loss at epoch {epoch} on frame pairs "
                                 f"{[(p.query_index, p.search_index) for p in pairsets]}")
    for gq, cq, gs, cs in grads:
        model.backward(gq / count, cq)
        model.backward(gs / count, cs)
    nnet.sgd_step(model.params(), config.sgd, epoch)
    return loss


def train(model, train_pairs, val_pairs, config=TrainingConfig(), progress=None):
    """Train ``model`` in place and leave it at the best-validation weights.

    ``train_pairs`` and ``val_pairs`` are lists of :class:`~sint.datagen.PairSet`.
    Record 0 of the report holds the losses of the initial weights; one
    record follows per epoch.  Training stops after ``patience`` epochs
    without a new best validation loss, or at ``max_epochs``.
    """
    rng = np.random.default_rng(config.seed)
    model.zero_grad()
    report = TrainingReport()
    init_val = dataset_loss(model, val_pairs, config.epsilon)
    init_train = dataset_loss(model, train_pairs, config.epsilon) if config.max_epochs > 0 else float("nan")
    report.records.append(EpochRecord(0, init_train, init_val, config.sgd.lr_at(0)))
    best = [p.value.copy() for p in model.params()]
    stale = 0
    pairs_per_item = int(np.mean([len(p) for p in train_pairs])) if train_pairs else 1
    for epoch in range(config.max_epochs):
        losses = []
        for batch in _batches(len(train_pairs), pairs_per_item, config.batch_size, rng):
            losses.append(train_step(model, [train_pairs[i] for i in batch], config, epoch))
        val = dataset_loss(model, val_pairs, config.epsilon)
        rec = EpochRecord(epoch + 1, float(np.mean(losses)), val, config.sgd.lr_at(epoch))
        report.records.append(rec)
        log.info("epoch %d train %.5f val %.5f lr %g", rec.epoch, rec.train_loss, val, rec.lr)
        if progress is not None:
            progress(rec)
        if val < report.best_val_loss:
            report.best_epoch = rec.epoch
            best = [p.value.copy() for p in model.params()]
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                report.stop_reason = "validation-plateau"
                break
    for p, v in zip(model.params(), best):
        p.value[...] = v
    return model, report
