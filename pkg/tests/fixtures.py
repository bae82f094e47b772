from combinet.arch import ArchConfig, build_combinet
from combinet.checkpoint import save_checkpoint
from combinet.data import synth_dataset, write_dataset
from combinet.tensor import Tape, Tensor, backward
import numpy as np
import os
import pytest


def mini_config(**overrides):
    "Three repeat blocks with ASPP at the middle level, small enough for 16x16 inputs"
    config = dict(
        growth_rate_k=4,
        num_repeat_blocks=3,
        bl_counts_down=[1, 1, 2],
        bl_counts_up=[1, 1, 1],
        bl_count_bottom=1,
        aspp_partial_channels=4,
        dropout_p=0.05,
        stem_channels=8,
        num_classes=2,
        input_channels=3,
    )
    config.update(overrides)
    return ArchConfig(**config)


def random_arch_config(rng):
    levels = int(rng.integers(1, 5))
    down = sorted(int(v) for v in rng.integers(1, 4, size=levels))
    return ArchConfig(
        growth_rate_k=int(rng.integers(1, 9)),
        num_repeat_blocks=levels,
        bl_counts_down=down,
        bl_counts_up=[int(v) for v in rng.integers(1, 4, size=levels)],
        bl_count_bottom=int(rng.integers(1, 4)),
        aspp_partial_channels=int(rng.integers(1, 9)),
        dropout_p=0.05,
        stem_channels=int(rng.integers(1, 17)),
        num_classes=int(rng.integers(2, 12)),
        input_channels=int(rng.integers(1, 4)),
        downsample_compression=float(rng.choice([0.5, 0.75, 1.0])),
    )


def check_gradients(fn, *arrays, h=1e-5, seed=0):
    """
    Largest relative error between reverse-mode and central-difference
    gradients of sum(fn(*inputs) * R) for a fixed random R, over all inputs.
    """
    tensors = [Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in arrays]
    with Tape() as tape:
        out = fn(*tensors)
        projection = np.random.default_rng(seed).uniform(-1, 1, size=out.shape)
        loss = (out * projection).sum()
    grads = backward(loss, tape)

    def value(*values):
        return float((fn(*[Tensor(v) for v in values]).data * projection).sum())

    worst = 0.0
    for index, tensor in enumerate(tensors):
        analytic = grads.get(id(tensor), np.zeros(tensor.shape))
        numeric = np.zeros(tensor.shape)
        base = [np.array(a, dtype=np.float64) for a in arrays]
        flat = base[index].reshape(-1)
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + h
            plus = value(*base)
            flat[i] = original - h
            minus = value(*base)
            flat[i] = original
            numeric.reshape(-1)[i] = (plus - minus) / (2 * h)
        scale = max(np.abs(numeric).max(), np.abs(analytic).max(), 1e-8)
        worst = max(worst, np.abs(analytic - numeric).max() / scale)
    return worst


def uniform_draw(rng, shape):
    return rng.uniform(-2.0, 2.0, size=shape)


def spaced_draw(rng, shape):
    "Distinct values in [-2, 2], well apart from each other and from zero"
    size = int(np.prod(shape))
    grid = np.linspace(-2.0, 2.0, 2 * size + 1)
    grid = np.delete(grid, size)
    return rng.choice(grid, size=size, replace=False).reshape(shape)


def check_gradient_draws(fn, *shapes, draws=20, draw=uniform_draw):
    "Worst check_gradients error over ``draws`` seeded random inputs of the given shapes"
    worst = 0.0
    for index in range(draws):
        rng = np.random.default_rng([7, index])
        arrays = [draw(rng, shape) for shape in shapes]
        worst = max(worst, check_gradients(fn, *arrays, seed=index))
    return worst


@pytest.fixture(scope="session")
def mini_graph():
    return build_combinet(mini_config(), seed=0)


@pytest.fixture(scope="session")
def disc_samples():
    return synth_dataset(6, 16, 2, "discs", 0.05, np.random.default_rng(0), radius=4)


@pytest.fixture(scope="session")
def dataset_dir(tmp_path_factory):
    directory = str(tmp_path_factory.mktemp("dataset"))
    samples = synth_dataset(4, 16, 2, "discs", 0.05, np.random.default_rng(1), radius=4)
    manifest = write_dataset(samples, directory)
    return directory, manifest


@pytest.fixture(scope="session")
def checkpoint_path(tmp_path_factory, mini_graph):
    path = os.path.join(str(tmp_path_factory.mktemp("checkpoint")), "mini.cbn")
    save_checkpoint(path, mini_graph, epoch=0)
    return path
