"""
Primitive layer operations on N x C x H x W tensors.

Every operation returns a new Tensor and, inside an active Tape, records
its adjoint. Convolutions are cross-correlations.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, apply, as_tensor
from .utils import DegenerateStatistics, InvalidArgument

BN_EPS = 1e-5

# Fixed 2x2 box filter of the anti-aliased downsampling, applied depthwise
BLUR_KERNEL = np.full((2, 2), 0.25)

_AXES = ("batch", "channel", "height", "width")


class ConvSpec:
    "Kernel geometry of a 2D convolution"

    def __init__(
        self,
        in_channels,
        out_channels,
        kernel_h,
        kernel_w=None,
        stride=1,
        dilation=1,
        groups=1,
        padding=0,
        has_bias=False,
    ):
        if kernel_w is None:
            kernel_w = kernel_h
        if isinstance(padding, int):
            padding = (padding, padding)
        self.in_channels = int(in_channels)
        self.out_channels = int(out_channels)
        self.kernel_h = int(kernel_h)
        self.kernel_w = int(kernel_w)
        self.stride = int(stride)
        self.dilation = int(dilation)
        self.groups = int(groups)
        self.padding = (int(padding[0]), int(padding[1]))
        self.has_bias = bool(has_bias)
        problems = []
        for name in ("in_channels", "out_channels", "kernel_h", "kernel_w", "stride", "dilation", "groups"):
            if getattr(self, name) < 1:
                problems.append("{} must be positive".format(name))
        if min(self.padding) < 0:
            problems.append("padding must be non-negative")
        if not problems and (
            self.in_channels % self.groups or self.out_channels % self.groups
        ):
            problems.append(
                "in_channels ({}) and out_channels ({}) must be divisible by groups ({})".format(
                    self.in_channels, self.out_channels, self.groups
                )
            )
        if problems:
            raise InvalidArgument("Invalid ConvSpec: {}".format("; ".join(problems)))

    @property
    def is_depthwise(self):
        return self.groups == self.in_channels == self.out_channels

    @property
    def weight_shape(self):
        return (
            self.out_channels,
            self.in_channels // self.groups,
            self.kernel_h,
            self.kernel_w,
        )

    @property
    def effective_kernel(self):
        return (
            (self.kernel_h - 1) * self.dilation + 1,
            (self.kernel_w - 1) * self.dilation + 1,
        )

    def output_hw(self, h, w):
        ekh, ekw = self.effective_kernel
        ph, pw = self.padding
        return (
            (h + 2 * ph - ekh) // self.stride + 1,
            (w + 2 * pw - ekw) // self.stride + 1,
        )

    def to_dict(self):
        return {
            "in_channels": self.in_channels,
            "out_channels": self.out_channels,
            "kernel_h": self.kernel_h,
            "kernel_w": self.kernel_w,
            "stride": self.stride,
            "dilation": self.dilation,
            "groups": self.groups,
            "padding": list(self.padding),
            "has_bias": self.has_bias,
        }

    def __eq__(self, other):
        return isinstance(other, ConvSpec) and self.to_dict() == other.to_dict()

    def __repr__(self):
        return "ConvSpec({in_channels}->{out_channels}, {kernel_h}x{kernel_w}, stride={stride}, dilation={dilation}, groups={groups}, padding={padding})".format(
            **self.to_dict()
        )


def _check_4d(tensor, op):
    if tensor.ndim != 4:
        raise InvalidArgument(
            "{}: expected an N x C x H x W tensor, got shape {}".format(op, tensor.shape)
        )


def _check_spatial(tensor, op, minimum):
    for axis in (2, 3):
        if tensor.shape[axis] < minimum:
            raise InvalidArgument(
                "{}: {} axis (axis {}) has size {}, needs at least {}".format(
                    op, _AXES[axis], axis, tensor.shape[axis], minimum
                )
            )


def conv2d(input, weight, bias, spec):
    input, weight = as_tensor(input), as_tensor(weight)
    if bias is not None:
        bias = as_tensor(bias)
    _check_4d(input, "conv2d")
    x = input.data
    n, c, h, w = x.shape
    if c != spec.in_channels:
        raise InvalidArgument(
            "conv2d: channel axis (axis 1) has {} channels, spec expects {}".format(
                c, spec.in_channels
            )
        )
    if weight.shape != spec.weight_shape:
        raise InvalidArgument(
            "conv2d: weight shape {} does not match spec {}".format(
                weight.shape, spec.weight_shape
            )
        )
    if bias is not None and bias.shape != (spec.out_channels,):
        raise InvalidArgument(
            "conv2d: bias shape {} does not match {} output channels".format(
                bias.shape, spec.out_channels
            )
        )
    ph, pw = spec.padding
    ekh, ekw = spec.effective_kernel
    for axis, size, pad, extent in ((2, h, ph, ekh), (3, w, pw, ekw)):
        if size + 2 * pad < extent:
            raise InvalidArgument(
                "conv2d: {} axis (axis {}) is {} after padding, kernel extent is {}".format(
                    _AXES[axis], axis, size + 2 * pad, extent
                )
            )
    kh, kw = spec.kernel_h, spec.kernel_w
    s, d, g = spec.stride, spec.dilation, spec.groups
    ho, wo = spec.output_hw(h, w)
    og, cg = spec.out_channels // g, c // g

    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x
    cols = sliding_window_view(xp, (ekh, ekw), axis=(2, 3))[:, :, ::s, ::s, ::d, ::d]
    cols = cols.reshape(n, g, cg, ho, wo, kh, kw)
    w_g = weight.data.reshape(g, og, cg, kh, kw)
    out = np.einsum("ngchwij,gocij->ngohw", cols, w_g, optimize=True)
    out = out.reshape(n, spec.out_channels, ho, wo)
    if bias is not None:
        out = out + bias.data.reshape(1, -1, 1, 1)

    def adjoint(grad):
        grad_g = grad.reshape(n, g, og, ho, wo)
        d_weight = np.einsum("ngohw,ngchwij->gocij", grad_g, cols, optimize=True)
        d_cols = np.einsum("ngohw,gocij->ngchwij", grad_g, w_g, optimize=True)
        d_cols = d_cols.reshape(n, c, ho, wo, kh, kw)
        d_xp = np.zeros(xp.shape, dtype=np.result_type(xp, grad))
        for i in range(kh):
            for j in range(kw):
                d_xp[
                    :,
                    :,
                    i * d:i * d + s * (ho - 1) + 1:s,
                    j * d:j * d + s * (wo - 1) + 1:s,
                ] += d_cols[..., i, j]
        grads = [d_xp[:, :, ph:ph + h, pw:pw + w], d_weight.reshape(weight.shape)]
        if bias is not None:
            grads.append(grad.sum(axis=(0, 2, 3)))
        return grads

    inputs = (input, weight) if bias is None else (input, weight, bias)
    return apply(out, inputs, adjoint)


def separable_conv3x3(input, w_1x3, w_3x1, w_pointwise):
    """
    Completely separable 3x3 convolution: depthwise 1x3, depthwise 3x1,
    then a biasless 1x1 channel mixer. Spatial size is preserved.
    """
    input = as_tensor(input)
    _check_4d(input, "separable_conv3x3")
    w_1x3, w_3x1, w_pointwise = as_tensor(w_1x3), as_tensor(w_3x1), as_tensor(w_pointwise)
    c = input.shape[1]
    for name, weight, expected in (
        ("w_1x3", w_1x3, (c, 1, 1, 3)),
        ("w_3x1", w_3x1, (c, 1, 3, 1)),
    ):
        if weight.shape != expected:
            raise InvalidArgument(
                "separable_conv3x3: {} must be depthwise over {} channels with shape {}, got {}".format(
                    name, c, expected, weight.shape
                )
            )
    if w_pointwise.ndim != 4 or w_pointwise.shape[1:] != (c, 1, 1):
        raise InvalidArgument(
            "separable_conv3x3: w_pointwise must have shape (k, {}, 1, 1), got {}".format(
                c, w_pointwise.shape
            )
        )
    k = w_pointwise.shape[0]
    x = conv2d(input, w_1x3, None, ConvSpec(c, c, 1, 3, groups=c, padding=(0, 1)))
    x = conv2d(x, w_3x1, None, ConvSpec(c, c, 3, 1, groups=c, padding=(1, 0)))
    return conv2d(x, w_pointwise, None, ConvSpec(c, k, 1, 1))


def batchnorm2d(input, gamma, beta, eps=BN_EPS):
    "Normalise with the statistics of the current batch (biased variance)"
    input = as_tensor(input)
    _check_4d(input, "batchnorm2d")
    gamma, beta = as_tensor(gamma), as_tensor(beta)
    x = input.data
    n, c, h, w = x.shape
    for name, param in (("gamma", gamma), ("beta", beta)):
        if param.shape != (c,):
            raise InvalidArgument(
                "batchnorm2d: {} has shape {}, input has {} channels".format(
                    name, param.shape, c
                )
            )
    count = n * h * w
    if count == 1:
        raise DegenerateStatistics(
            "batchnorm2d: one value per channel, batch statistics are undefined"
        )
    axes = (0, 2, 3)
    mu = x.mean(axis=axes, keepdims=True)
    centred = x - mu
    var = (centred * centred).mean(axis=axes, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = centred * inv_std
    gamma_b = gamma.data.reshape(1, c, 1, 1)
    out = gamma_b * x_hat + beta.data.reshape(1, c, 1, 1)

    def adjoint(grad):
        d_hat = grad * gamma_b
        d_x = inv_std / count * (
            count * d_hat
            - d_hat.sum(axis=axes, keepdims=True)
            - x_hat * (d_hat * x_hat).sum(axis=axes, keepdims=True)
        )
        return d_x, (grad * x_hat).sum(axis=axes), grad.sum(axis=axes)

    return apply(out, (input, gamma, beta), adjoint)


def relu(input):
    input = as_tensor(input)
    positive = input.data > 0

    def adjoint(grad):
        return (grad * positive,)

    return apply(np.where(positive, input.data, 0.0).astype(input.dtype), (input,), adjoint)


def dropout2d(input, p, rng, active=True):
    """
    Channel-wise dropout: whole (sample, channel) maps are zeroed with
    probability ``p`` and survivors scaled by 1 / (1 - p).
    """
    if not 0 <= p < 1:
        raise InvalidArgument("dropout2d: p must be in [0, 1), got {}".format(p))
    input = as_tensor(input)
    if not active or p == 0:
        return input
    _check_4d(input, "dropout2d")
    n, c = input.shape[:2]
    keep = rng.random((n, c, 1, 1)) >= p
    scale = (keep / (1.0 - p)).astype(input.dtype)

    def adjoint(grad):
        return (grad * scale,)

    return apply(input.data * scale, (input,), adjoint)


_POOL_OFFSETS = ((0, 0), (0, 1), (1, 0), (1, 1))


def maxpool2x2_s1(input):
    "2x2 max-pooling with stride 1; ties go to the first window cell, row-major"
    input = as_tensor(input)
    _check_4d(input, "maxpool2x2_s1")
    _check_spatial(input, "maxpool2x2_s1", 2)
    x = input.data
    h, w = x.shape[2:]
    stacked = np.stack(
        [x[:, :, di:di + h - 1, dj:dj + w - 1] for di, dj in _POOL_OFFSETS]
    )
    index = stacked.argmax(axis=0)
    out = np.take_along_axis(stacked, index[None], axis=0)[0]

    def adjoint(grad):
        d_x = np.zeros_like(x, dtype=np.result_type(x, grad))
        for k, (di, dj) in enumerate(_POOL_OFFSETS):
            d_x[:, :, di:di + h - 1, dj:dj + w - 1] += np.where(index == k, grad, 0.0)
        return (d_x,)

    return apply(out, (input,), adjoint)


def blurpool2x2_s2(input):
    """
    Depthwise convolution with the fixed BLUR_KERNEL, stride 2, no padding.
    The kernel is not trainable.
    """
    input = as_tensor(input)
    _check_4d(input, "blurpool2x2_s2")
    _check_spatial(input, "blurpool2x2_s2", 2)
    x = input.data
    h, w = x.shape[2:]
    ho, wo = h // 2, w // 2
    out = sum(
        BLUR_KERNEL[di, dj] * x[:, :, di:2 * ho:2, dj:2 * wo:2] for di, dj in _POOL_OFFSETS
    )

    def adjoint(grad):
        d_x = np.zeros_like(x, dtype=np.result_type(x, grad))
        for di, dj in _POOL_OFFSETS:
            d_x[:, :, di:2 * ho:2, dj:2 * wo:2] = BLUR_KERNEL[di, dj] * grad
        return (d_x,)

    return apply(out, (input,), adjoint)


def pad_replicate(input, top=0, bottom=0, left=0, right=0):
    "Pad the spatial axes by repeating the edge rows and columns"
    input = as_tensor(input)
    _check_4d(input, "pad_replicate")
    x = input.data
    h, w = x.shape[2:]
    rows = np.clip(np.arange(-top, h + bottom), 0, h - 1)
    cols = np.clip(np.arange(-left, w + right), 0, w - 1)
    out = x[:, :, rows][:, :, :, cols]

    def adjoint(grad):
        d_rows = np.zeros(x.shape[:3] + (grad.shape[3],), dtype=grad.dtype)
        np.add.at(d_rows, (slice(None), slice(None), rows), grad)
        d_x = np.zeros(x.shape, dtype=grad.dtype)
        np.add.at(d_x, (slice(None), slice(None), slice(None), cols), d_rows)
        return (d_x,)

    return apply(out, (input,), adjoint)


def interpolation_matrix(size_in, size_out):
    """
    Linear interpolation weights (size_out x size_in) with half-pixel centres
    and align-corners disabled; source coordinates are clamped to the edges.
    """
    dst = np.arange(size_out)
    src = np.maximum((dst + 0.5) * (size_in / size_out) - 0.5, 0.0)
    lo = np.minimum(np.floor(src).astype(np.int64), size_in - 1)
    hi = np.minimum(lo + 1, size_in - 1)
    frac = src - lo
    matrix = np.zeros((size_out, size_in))
    np.add.at(matrix, (dst, lo), 1.0 - frac)
    np.add.at(matrix, (dst, hi), frac)
    return matrix


def bilinear_resize(input, out_h, out_w):
    input = as_tensor(input)
    _check_4d(input, "bilinear_resize")
    if out_h < 1 or out_w < 1:
        raise InvalidArgument(
            "bilinear_resize: target size must be positive, got {}x{}".format(out_h, out_w)
        )
    h, w = input.shape[2:]
    if (h, w) == (out_h, out_w):
        return input
    rows = interpolation_matrix(h, out_h).astype(input.dtype)
    cols = interpolation_matrix(w, out_w).astype(input.dtype)
    out = rows @ input.data @ cols.T

    def adjoint(grad):
        return (rows.T @ grad @ cols,)

    return apply(out, (input,), adjoint)


def concat_channels(inputs):
    inputs = [as_tensor(t) for t in inputs]
    if not inputs:
        raise InvalidArgument("concat_channels: nothing to concatenate")
    for t in inputs:
        _check_4d(t, "concat_channels")
    if len(inputs) == 1:
        return inputs[0]
    first = inputs[0].shape
    for i, t in enumerate(inputs[1:], 1):
        if (t.shape[0],) + t.shape[2:] != (first[0],) + first[2:]:
            raise InvalidArgument(
                "concat_channels: input {} has shape {}, input 0 has shape {}; batch and spatial axes must match".format(
                    i, t.shape, first
                )
            )
    bounds = np.cumsum([0] + [t.shape[1] for t in inputs])

    def adjoint(grad):
        return [grad[:, bounds[i]:bounds[i + 1]] for i in range(len(inputs))]

    return apply(np.concatenate([t.data for t in inputs], axis=1), inputs, adjoint)


def global_avg_pool(input):
    input = as_tensor(input)
    _check_4d(input, "global_avg_pool")
    h, w = input.shape[2:]

    def adjoint(grad):
        return (np.broadcast_to(grad / (h * w), input.shape).copy(),)

    return apply(input.data.mean(axis=(2, 3), keepdims=True), (input,), adjoint)


def softmax_channels(input):
    input = as_tensor(input)
    shifted = input.data - input.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=1, keepdims=True)

    def adjoint(grad):
        return (out * (grad - (grad * out).sum(axis=1, keepdims=True)),)

    return apply(out, (input,), adjoint)


def log_softmax_channels(input):
    input = as_tensor(input)
    shifted = input.data - input.data.max(axis=1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))

    def adjoint(grad):
        return (grad - np.exp(out) * grad.sum(axis=1, keepdims=True),)

    return apply(out, (input,), adjoint)


def resize_array(image, out_h, out_w):
    "Bilinear resize of a plain C x H x W array, outside of any tape"
    return bilinear_resize(Tensor(image[None]), out_h, out_w).data[0]
