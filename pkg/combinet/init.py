import numpy as np

from .utils import substream


def fan_in(shape):
    "Inputs feeding one output unit of a kernel shaped Cout x Cin/groups x Kh x Kw"
    return int(np.prod(shape[1:]))


def he_uniform_init(graph, seed=0):
    """
    He-Uniform initialisation in place: kernels ~ U(-b, b) with
    b = sqrt(6 / fan_in); BN gamma 1, beta 0; biases 0.

    Parameters are drawn in graph order from one stream, so the same
    (graph, seed) always gives the same values.
    """
    rng = substream(seed, "init")
    for name, tensor in graph.parameters().items():
        kind = name.rsplit(".", 1)[-1]
        if kind == "gamma":
            tensor.data = np.ones(tensor.shape, dtype=tensor.dtype)
        elif kind in ("beta", "bias"):
            tensor.data = np.zeros(tensor.shape, dtype=tensor.dtype)
        else:
            bound = np.sqrt(6.0 / fan_in(tensor.shape))
            tensor.data = rng.uniform(-bound, bound, size=tensor.shape).astype(tensor.dtype)
        tensor.zero_grad()
    return graph
