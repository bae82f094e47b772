"""
Monte-Carlo-Dropout inference and segmentation metrics.

``mc_predict`` runs S stochastic forward passes of one image, each with its
own dropout stream derived from the seed, and aggregates the softmax
outputs into a predictive mean, a mask and a per-pixel entropy map.
"""
import collections
import csv
import io
import logging
from concurrent.futures import ThreadPoolExecutor

import numpy as np
from PIL import Image

from .data import MASK_PALETTE
from .graph import EvalContext
from .ops import softmax_channels
from .tensor import Tensor
from .utils import EmptyReduction, InvalidArgument, substream, worker_count, write_atomic

log = logging.getLogger(__name__)

PROB_SUM_TOLERANCE = 1e-4


class PredictiveResult:
    """
    ``mean_probs`` is C x H x W, ``mask`` and ``entropy`` are H x W.
    ``variance`` holds the across-sample variance of the probability of the
    predicted class at every pixel. ``sample_probs`` (S x C x H x W) is only
    kept when requested.
    """

    def __init__(self, mean_probs, mask, entropy, variance, samples, sample_probs=None):
        self.mean_probs = mean_probs
        self.mask = mask
        self.entropy = entropy
        self.variance = variance
        self.samples = samples
        self.sample_probs = sample_probs

    @property
    def num_classes(self):
        return self.mean_probs.shape[0]


def _as_batch(graph, input):
    data = input.data if isinstance(input, Tensor) else np.asarray(input)
    if data.ndim == 3:
        data = data[None]
    if data.ndim != 4 or data.shape[0] != 1:
        raise InvalidArgument(
            "mc_predict: expected one C x H x W image, got shape {}".format(data.shape)
        )
    return Tensor(data.astype(graph.dtype))


def mc_predict(graph, input, samples, seed, dropout=True, keep_samples=False):
    if samples < 1:
        raise InvalidArgument("samples must be a positive integer, got {}".format(samples))
    x = _as_batch(graph, input)

    def one_pass(index):
        context = EvalContext(rng=substream(seed, "mc", index), dropout=dropout)
        logits = graph.forward(x, context)
        return softmax_channels(logits).data[0].astype(np.float64)

    if dropout:
        workers = max(1, min(worker_count(), samples))
        with ThreadPoolExecutor(max_workers=workers) as executor:
            passes = executor.map(one_pass, range(samples))
            mean, m2, kept = _aggregate(passes, keep_samples)
    else:
        # Without dropout every pass is the same deterministic forward
        probs = one_pass(0)
        mean, m2 = probs, np.zeros_like(probs)
        kept = [probs] * samples if keep_samples else None
    mask = predict_mask(mean)
    variance = np.take_along_axis(m2, mask[None], axis=0)[0] / samples
    result = PredictiveResult(
        mean_probs=mean,
        mask=mask,
        entropy=entropy_map(mean),
        variance=variance,
        samples=samples,
        sample_probs=np.stack(kept) if kept is not None else None,
    )
    log.debug("mc_predict: %d passes, mean entropy %.4f", samples, result.entropy.mean())
    return result


def _aggregate(passes, keep_samples):
    """
    Pairwise mean and sum of squared deviations over the passes, merged like
    a binary counter in pass order so the result does not depend on thread
    timing and only O(log S) partial results are held.
    """
    stack = []
    kept = [] if keep_samples else None
    for probs in passes:
        node = (1, probs, np.zeros_like(probs))
        while stack and stack[-1][0] == node[0]:
            node = _merge(stack.pop(), node)
        stack.append(node)
        if kept is not None:
            kept.append(probs)
    node = stack.pop()
    while stack:
        node = _merge(stack.pop(), node)
    _, mean, m2 = node
    return mean, m2, kept


def _merge(left, right):
    "Combine two (count, mean, m2) partials"
    n_a, mean_a, m2_a = left
    n_b, mean_b, m2_b = right
    n = n_a + n_b
    delta = mean_b - mean_a
    return n, mean_a + delta * (n_b / n), m2_a + m2_b + delta * delta * (n_a * n_b / n)


def entropy_map(mean_probs):
    "Per-pixel entropy in nats of a C x H x W probability map"
    probs = np.asarray(mean_probs, dtype=np.float64)
    sums = probs.sum(axis=0)
    if probs.min() < 0 or np.abs(sums - 1).max() > PROB_SUM_TOLERANCE:
        raise InvalidArgument(
            "entropy_map: pixels must hold probability vectors (sums range {:.6f} to {:.6f})".format(
                sums.min(), sums.max()
            )
        )
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(probs > 0, probs * np.log(probs), 0.0)
    return np.clip(-terms.sum(axis=0), 0.0, np.log(probs.shape[0]))


def predict_mask(mean_probs):
    "Per-pixel argmax; ties go to the lowest class id"
    return np.argmax(np.asarray(mean_probs), axis=0)


def confusion_matrix(pred, target, num_classes, ignore_index=None):
    "Counts with ground truth on rows and predictions on columns"
    pred, target = np.asarray(pred), np.asarray(target)
    if pred.shape != target.shape:
        raise InvalidArgument(
            "prediction shape {} does not match target shape {}".format(pred.shape, target.shape)
        )
    valid = np.ones(target.shape, dtype=bool) if ignore_index is None else target != ignore_index
    t = target[valid].astype(np.int64)
    p = pred[valid].astype(np.int64)
    for name, ids in (("target", t), ("prediction", p)):
        if ids.size and (ids.min() < 0 or ids.max() >= num_classes):
            raise InvalidArgument(
                "{} holds class ids outside 0..{}".format(name, num_classes - 1)
            )
    return np.bincount(t * num_classes + p, minlength=num_classes ** 2).reshape(
        num_classes, num_classes
    )


def iou_from_confusion(matrix):
    matrix = np.asarray(matrix, dtype=np.float64)
    tp = np.diag(matrix)
    denom = matrix.sum(axis=0) + matrix.sum(axis=1) - tp
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(denom > 0, tp / denom, np.nan)


def class_iou(pred, target, num_classes, ignore_index=None):
    "IoU per class; NaN for classes absent from both masks"
    return iou_from_confusion(confusion_matrix(pred, target, num_classes, ignore_index))


def miou_from_confusion(matrix):
    ious = iou_from_confusion(matrix)
    if np.all(np.isnan(ious)):
        raise EmptyReduction("mIoU: no class occurs in prediction or target")
    return float(np.nanmean(ious))


def miou(pred, target, num_classes, ignore_index=None):
    return miou_from_confusion(confusion_matrix(pred, target, num_classes, ignore_index))


def mean_entropy(entropy, ignore_mask=None):
    entropy = np.asarray(entropy, dtype=np.float64)
    values = entropy if ignore_mask is None else entropy[~np.asarray(ignore_mask, dtype=bool)]
    if values.size == 0:
        raise EmptyReduction("mean_entropy: every pixel is ignored")
    return float(values.mean())


def format_mean_std(values, scale=100.0, decimals=1):
    "``mean±std`` with the sample standard deviation (0 for a single value)"
    values = np.asarray(values, dtype=np.float64) * scale
    if values.size == 0:
        raise EmptyReduction("format_mean_std: no values")
    std = values.std(ddof=1) if values.size > 1 else 0.0
    return "{:.{d}f}±{:.{d}f}".format(values.mean(), std, d=decimals)


EvalRow = collections.namedtuple("EvalRow", ("image_id", "miou", "mean_entropy"))


class EvalResult:
    def __init__(self, confusion, rows, entropy_sum, entropy_count):
        self.confusion = confusion
        self.rows = rows
        self.entropy_sum = entropy_sum
        self.entropy_count = entropy_count

    @property
    def miou(self):
        return miou_from_confusion(self.confusion)

    @property
    def class_iou(self):
        return iou_from_confusion(self.confusion)

    @property
    def mean_entropy(self):
        if not self.entropy_count:
            raise EmptyReduction("mean_entropy: every pixel is ignored")
        return self.entropy_sum / self.entropy_count


def evaluate(graph, samples, mc_samples, seed, num_classes, ignore_index=255, dropout=True):
    """
    MC predictions for every labelled sample. mIoU is computed from the
    confusion counts summed over all images.
    """
    if not samples:
        raise EmptyReduction("evaluate: no samples")
    confusion = np.zeros((num_classes, num_classes), dtype=np.int64)
    rows = []
    entropy_sum, entropy_count = 0.0, 0
    for index, sample in enumerate(samples):
        image_seed = int(substream(seed, "eval", index).integers(2 ** 31))
        result = mc_predict(graph, sample.image, mc_samples, image_seed, dropout=dropout)
        ignored = sample.mask == ignore_index
        matrix = confusion_matrix(result.mask, sample.mask, num_classes, ignore_index)
        confusion += matrix
        kept = result.entropy[~ignored]
        entropy_sum += float(kept.sum())
        entropy_count += int(kept.size)
        image_miou = miou_from_confusion(matrix) if matrix.sum() else float("nan")
        image_entropy = float(kept.mean()) if kept.size else float("nan")
        rows.append(EvalRow(sample.meta.get("id", str(index)), image_miou, image_entropy))
    return EvalResult(confusion, rows, entropy_sum, entropy_count)


def _png_bytes(image):
    buf = io.BytesIO()
    image.save(buf, format="PNG")
    return buf.getvalue()


def entropy_scale(num_classes):
    "Factor mapping entropy in nats to 16-bit levels, ln C -> 65535"
    return 65535.0 / np.log(num_classes) if num_classes > 1 else 0.0


def save_entropy_png(entropy, path, num_classes):
    scale = entropy_scale(num_classes)
    levels = np.clip(np.round(np.asarray(entropy) * scale), 0, 65535).astype(np.uint16)
    write_atomic(path, _png_bytes(Image.fromarray(levels)))
    write_atomic(
        path + ".scale.txt",
        "scale {!r}\nmax_entropy {!r}\n".format(float(scale), float(np.log(num_classes))),
    )
    return scale


def load_entropy_png(path, scale):
    levels = np.asarray(Image.open(path), dtype=np.float64)
    return levels / scale if scale else levels


def save_mask_png(mask, path):
    image = Image.fromarray(np.asarray(mask, dtype=np.uint8))
    image.putpalette(MASK_PALETTE)
    write_atomic(path, _png_bytes(image))


METRIC_COLUMNS = ("image_id", "miou", "mean_entropy")


def render_metrics_csv(rows):
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(METRIC_COLUMNS)
    for row in rows:
        writer.writerow(
            [
                row[0],
                "" if row[1] is None or np.isnan(row[1]) else "{:.6f}".format(row[1]),
                "{:.6f}".format(row[2]),
            ]
        )
    return out.getvalue()
