"""
Training: class-weighted combo loss, Adam with decoupled weight decay and
an exponentially decaying learning rate.
"""
import collections
import csv
import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .bayes import evaluate
from .checkpoint import save_checkpoint
from .data import AugmentSpec, augment as augment_sample, draw_rescale, rescaled_size
from .graph import EvalContext
from .ops import log_softmax_channels
from .tensor import Tape, Tensor, backward
from .utils import (
    ConfigError,
    ConfigOption,
    DatasetError,
    InvalidArgument,
    NumericError,
    check_options,
    substream,
    worker_count,
)

log = logging.getLogger(__name__)

TRAIN_OPTIONS = (
    ConfigOption("epochs", 800, """
        Number of passes over the training set
    """.strip()),
    ConfigOption("lr0", 0.001, """
        Learning rate at epoch 0
    """.strip()),
    ConfigOption("lr_decay", 0.996, """
        Learning rate multiplier applied every epoch
    """.strip()),
    ConfigOption("batch_size", 2, """
        Samples per optimizer step
    """.strip()),
    ConfigOption("weight_decay", 1e-3, """
        Decoupled weight decay (BN parameters and biases are exempt)
    """.strip()),
    ConfigOption("dropout_p", 0.05, """
        Channel dropout rate used by every dropout layer during training
    """.strip()),
    ConfigOption("loss_alpha", 0.5, """
        Weight of cross-entropy against the soft-Dice term in the combo loss
    """.strip()),
    ConfigOption("use_log_dice", False, """
        Add -log(soft Dice) to the loss, for heavily unbalanced data
    """.strip()),
    ConfigOption("seed", 0, """
        Seed for initialisation, shuffling, augmentation and dropout
    """.strip()),
    ConfigOption("eval_every", 1, """
        Evaluate validation mIoU every this many epochs
    """.strip()),
    ConfigOption("eval_samples", 1, """
        MC samples per validation image
    """.strip()),
    ConfigOption("ignore_index", 255, """
        Mask value of unlabelled pixels
    """.strip()),
    ConfigOption("precision", "float64", """
        Parameter and activation precision, float64 or float32
    """.strip()),
    ConfigOption("beta1", 0.9, """
        Adam first moment decay
    """.strip()),
    ConfigOption("beta2", 0.999, """
        Adam second moment decay
    """.strip()),
    ConfigOption("adam_eps", 1e-8, """
        Adam denominator epsilon
    """.strip()),
    ConfigOption("scale_min", 0.5, """
        Smallest random rescale factor
    """.strip()),
    ConfigOption("scale_max", 2.0, """
        Largest random rescale factor
    """.strip()),
    ConfigOption("aspect_min", 0.75, """
        Smallest random aspect ratio change (width over height)
    """.strip()),
    ConfigOption("aspect_max", 4 / 3, """
        Largest random aspect ratio change (width over height)
    """.strip()),
    ConfigOption("crop_size", 360, """
        Side of the random square crop - 0 to disable cropping
    """.strip()),
    ConfigOption("hflip", True, """
        Randomly flip samples horizontally
    """.strip()),
    ConfigOption("vflip", False, """
        Randomly flip samples vertically
    """.strip()),
    ConfigOption("contrast", 0.2, """
        Colour jitter: relative contrast range
    """.strip()),
    ConfigOption("saturation", 0.2, """
        Colour jitter: relative saturation range
    """.strip()),
    ConfigOption("hue", 0.05, """
        Colour jitter: hue rotation range in cycles
    """.strip()),
    ConfigOption("log_wall_time", False, """
        Fill the wall_seconds column of the training log
    """.strip()),
)
DEFAULT_TRAIN = {option.name: option.default for option in TRAIN_OPTIONS}

PRECISIONS = ("float64", "float32")


class TrainConfig:
    def __init__(self, **kwargs):
        values = dict(DEFAULT_TRAIN)
        unknown = sorted(set(kwargs) - set(values))
        if unknown:
            raise ConfigError(
                "Invalid training config",
                problems=["unknown option {!r}".format(k) for k in unknown],
            )
        values.update(kwargs)
        for name, value in values.items():
            setattr(self, name, value)

    @classmethod
    def from_dict(cls, data):
        return cls(**check_options(data, TRAIN_OPTIONS, "train"))

    def to_dict(self):
        return {name: getattr(self, name) for name in DEFAULT_TRAIN}

    def violations(self):
        problems = []
        for name in ("epochs", "seed"):
            if getattr(self, name) < 0:
                problems.append("{} must be non-negative".format(name))
        for name in ("batch_size", "eval_every", "eval_samples"):
            if getattr(self, name) < 1:
                problems.append("{} must be a positive integer".format(name))
        if self.lr0 <= 0:
            problems.append("lr0 must be positive")
        if not 0 < self.lr_decay < 1:
            problems.append("lr_decay must be in (0, 1)")
        if self.weight_decay < 0:
            problems.append("weight_decay must be non-negative")
        if not 0 <= self.dropout_p < 1:
            problems.append("dropout_p must be in [0, 1)")
        if not 0 <= self.loss_alpha <= 1:
            problems.append("loss_alpha must be in [0, 1]")
        if self.precision not in PRECISIONS:
            problems.append("precision must be one of {}".format(", ".join(PRECISIONS)))
        if self.crop_size < 0:
            problems.append("crop_size must be non-negative")
        return problems

    def validate(self):
        problems = self.violations()
        if problems:
            raise ConfigError("Invalid training config", problems=problems)
        return self

    def augment_spec(self, mean=None, std=None):
        return AugmentSpec(
            scale_range=(self.scale_min, self.scale_max),
            aspect_range=(self.aspect_min, self.aspect_max),
            crop_size=self.crop_size or None,
            hflip=self.hflip,
            vflip=self.vflip,
            contrast=self.contrast,
            saturation=self.saturation,
            hue=self.hue,
            mean=mean,
            std=std,
        )


class OptimizerState:
    "Adam moments per parameter name, plus the step counter"

    def __init__(self, params):
        self.m = collections.OrderedDict(
            (name, np.zeros(t.shape, dtype=np.float64)) for name, t in params.items()
        )
        self.v = collections.OrderedDict(
            (name, np.zeros(t.shape, dtype=np.float64)) for name, t in params.items()
        )
        self.step = 0


def lr_at(epoch, config):
    if epoch < 0:
        raise InvalidArgument("epoch must be non-negative, got {}".format(epoch))
    return config.lr0 * config.lr_decay ** epoch


def class_weights(dataset, num_classes, ignore_index=255):
    """
    Median-frequency weights: w_c = median(freq) / freq_c over the classes
    that occur; classes without pixels get weight 0.
    """
    counts = np.zeros(num_classes, dtype=np.int64)
    for sample in dataset:
        ids = sample.mask[sample.mask != ignore_index]
        if ids.size and (ids.min() < 0 or ids.max() >= num_classes):
            raise DatasetError("Mask holds class ids outside 0..{}".format(num_classes - 1))
        counts += np.bincount(ids.ravel(), minlength=num_classes)
    total = counts.sum()
    if total == 0:
        raise DatasetError("Every pixel of the dataset is ignored")
    freq = counts / total
    present = counts > 0
    median = np.median(freq[present])
    weights = np.zeros(num_classes, dtype=np.float64)
    weights[present] = median / freq[present]
    return weights


def combo_loss(logits, target, weights, alpha=0.5, use_log_dice=False, ignore_index=255, smooth=1.0):
    """
    alpha * weighted cross-entropy + (1 - alpha) * (1 - soft Dice), plus
    -log(soft Dice) when ``use_log_dice`` is set.

    Cross-entropy is the weighted mean over labelled pixels. Soft Dice is
    averaged over the classes with positive weight.
    """
    target = np.asarray(target)
    if target.ndim == 2:
        target = target[None]
    n, c, h, w = logits.shape
    if target.shape != (n, h, w):
        raise InvalidArgument(
            "combo_loss: target shape {} does not match logits {}".format(target.shape, logits.shape)
        )
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (c,):
        raise InvalidArgument("combo_loss: need {} class weights, got {}".format(c, weights.shape))
    valid = target != ignore_index
    labels = target[valid]
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise InvalidArgument(
            "combo_loss: target holds class ids outside 0..{} (ignore_index {})".format(c - 1, ignore_index)
        )
    dtype = logits.dtype
    onehot = (np.arange(c)[None, :, None, None] == target[:, None]) & valid[:, None]
    onehot = onehot.astype(dtype)
    pixel_weights = onehot * weights[None, :, None, None].astype(dtype)

    log_probs = log_softmax_channels(logits)
    probs = log_probs.exp() * valid[:, None].astype(dtype)
    total_weight = pixel_weights.sum()
    if total_weight > 0:
        wce = -(log_probs * pixel_weights).sum() / total_weight
    else:
        wce = Tensor(np.zeros((), dtype=dtype))

    axes = (0, 2, 3)
    intersection = (probs * onehot).sum(axis=axes)
    dice = (intersection * 2.0 + smooth) / (probs.sum(axis=axes) + onehot.sum(axis=axes) + smooth)
    selected = (weights > 0).astype(dtype)
    if selected.sum() == 0:
        selected = np.ones(c, dtype=dtype)
    soft_dice = (dice * selected).sum() / selected.sum()

    loss = wce * alpha + (1.0 - soft_dice) * (1.0 - alpha)
    if use_log_dice:
        loss = loss - soft_dice.log()
    return loss


def decays(name):
    "BN parameters and biases are exempt from weight decay"
    return name.rsplit(".", 1)[-1] not in ("gamma", "beta", "bias")


def adam_step(state, params, grads, lr, weight_decay, beta1=0.9, beta2=0.999, eps=1e-8):
    """
    One Adam update of ``params`` (name -> Tensor) in place. The decoupled
    decay theta -= lr * weight_decay * theta follows the moment update.
    """
    for name, grad in grads.items():
        if grad is not None and not np.all(np.isfinite(grad)):
            raise NumericError("Non-finite gradient", layer=name.rsplit(".", 1)[0])
    state.step += 1
    t = state.step
    for name, tensor in params.items():
        grad = grads.get(name)
        if grad is None:
            grad = np.zeros(tensor.shape, dtype=np.float64)
        m = state.m[name] = beta1 * state.m[name] + (1 - beta1) * grad
        v = state.v[name] = beta2 * state.v[name] + (1 - beta2) * grad * grad
        m_hat = m / (1 - beta1 ** t)
        v_hat = v / (1 - beta2 ** t)
        theta = tensor.data - lr * m_hat / (np.sqrt(v_hat) + eps)
        if weight_decay and decays(name):
            theta = theta - lr * weight_decay * theta
        tensor.data = theta.astype(tensor.dtype)
    return params, state


LogRow = collections.namedtuple("LogRow", ("epoch", "lr", "train_loss", "val_miou", "wall_seconds"))


class TrainResult:
    def __init__(self, rows, best_epoch, best_miou, state):
        self.rows = rows
        self.best_epoch = best_epoch
        self.best_miou = best_miou
        self.state = state


def _format_float(value):
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return ""
    return repr(float(value))


class TrainingLog:
    """
    CSV training log, one row per epoch, flushed as it goes. With
    ``append`` rows go after an existing log; a missing or empty file still
    gets the header.
    """

    def __init__(self, path=None, append=False):
        self.path = path
        self.rows = []
        if path is not None and not (append and os.path.exists(path) and os.path.getsize(path)):
            with open(path, "w", newline="") as fp:
                csv.writer(fp, lineterminator="\n").writerow(LogRow._fields)

    def add(self, row):
        self.rows.append(row)
        if self.path is not None:
            with open(self.path, "a", newline="") as fp:
                csv.writer(fp, lineterminator="\n").writerow(
                    [
                        row.epoch,
                        _format_float(row.lr),
                        _format_float(row.train_loss),
                        _format_float(row.val_miou),
                        _format_float(row.wall_seconds),
                    ]
                )


def _augment_batch(batch, spec, seed, epoch, batch_index, indices):
    if spec is None:
        return batch
    size = None
    if spec.crop_size is None and len(batch) > 1:
        # Without a crop every sample takes the first one's rescaled size
        _, h, w = batch[0].image.shape
        size = rescaled_size(h, w, *draw_rescale(spec, substream(seed, "rescale", epoch, batch_index)))

    def one(args):
        sample, index = args
        return augment_sample(sample, spec, substream(seed, "augment", epoch, int(index)), size=size)

    workers = max(1, min(worker_count(), len(batch)))
    with ThreadPoolExecutor(max_workers=workers) as executor:
        return list(executor.map(one, zip(batch, indices)))


def train(
    graph,
    train_samples,
    val_samples,
    config,
    augment=None,
    weights=None,
    checkpoint_path=None,
    log_path=None,
    state=None,
    start_epoch=0,
    meta=None,
):
    """
    Run the epoch loop from ``start_epoch`` to ``config.epochs``.

    The checkpoint at ``checkpoint_path`` is rewritten whenever validation
    mIoU improves (every epoch when there is no validation set). A
    non-finite loss stops training with that checkpoint left untouched and
    re-raises as NumericError.
    """
    config.validate()
    if not train_samples:
        raise DatasetError("Training set is empty")
    if config.batch_size > len(train_samples):
        raise ConfigError(
            "batch_size {} exceeds the {} training samples".format(config.batch_size, len(train_samples))
        )
    graph.astype(np.dtype(config.precision))
    num_classes = graph.output_channels
    if weights is None:
        weights = class_weights(train_samples, num_classes, config.ignore_index)
    params = graph.parameters()
    state = state or OptimizerState(params)
    training_log = TrainingLog(log_path, append=start_epoch > 0)
    best_epoch, best_miou = None, -1.0
    started = time.time()

    if config.epochs == 0 and checkpoint_path:
        save_checkpoint(checkpoint_path, graph, 0, config, state, meta)

    for epoch in range(start_epoch, config.epochs):
        lr = lr_at(epoch, config)
        order = substream(config.seed, "shuffle", epoch).permutation(len(train_samples))
        losses = []
        for batch_index, start in enumerate(range(0, len(order), config.batch_size)):
            indices = order[start:start + config.batch_size]
            batch = _augment_batch(
                [train_samples[i] for i in indices], augment, config.seed, epoch, batch_index, indices
            )
            try:
                images = np.stack([s.image for s in batch]).astype(config.precision)
                targets = np.stack([s.mask for s in batch])
            except ValueError:
                raise DatasetError("Samples in a batch must share a size; set crop_size")
            context = EvalContext(
                rng=substream(config.seed, "dropout", epoch, batch_index),
                dropout=True,
                dropout_p=config.dropout_p,
            )
            with Tape() as tape:
                logits = graph.forward(Tensor(images), context)
                loss = combo_loss(
                    logits,
                    targets,
                    weights,
                    config.loss_alpha,
                    config.use_log_dice,
                    config.ignore_index,
                )
            value = loss.item()
            if not np.isfinite(value):
                log.warning("Loss became %r at epoch %d; halting", value, epoch)
                raise NumericError("Training loss became non-finite at epoch {}".format(epoch))
            grads_by_id = backward(loss, tape)
            grads = {name: grads_by_id.get(id(t)) for name, t in params.items()}
            for tensor in params.values():
                tensor.zero_grad()
            adam_step(
                state,
                params,
                grads,
                lr,
                config.weight_decay,
                config.beta1,
                config.beta2,
                config.adam_eps,
            )
            losses.append(value)
        train_loss = float(np.mean(losses))

        val_miou = None
        last = epoch == config.epochs - 1
        if val_samples and ((epoch + 1) % config.eval_every == 0 or last):
            val_seed = int(substream(config.seed, "validate", epoch).integers(2 ** 31))
            val_miou = evaluate(
                graph, val_samples, config.eval_samples, val_seed, num_classes, config.ignore_index
            ).miou
        improved = (val_miou is not None and val_miou > best_miou) or not val_samples
        if improved:
            best_epoch, best_miou = epoch, val_miou if val_miou is not None else best_miou
            if checkpoint_path:
                save_checkpoint(checkpoint_path, graph, epoch + 1, config, state, meta)
                log.info("Checkpoint at epoch %d written to %s", epoch, checkpoint_path)
        wall = round(time.time() - started, 3) if config.log_wall_time else None
        training_log.add(LogRow(epoch, lr, train_loss, val_miou, wall))
        log.info(
            "epoch %d lr %.6g loss %.6f val_miou %s",
            epoch,
            lr,
            train_loss,
            "-" if val_miou is None else "{:.4f}".format(val_miou),
        )
    return TrainResult(training_log.rows, best_epoch, best_miou, state)
