from .fixtures import dataset_dir, disc_samples  # noqa
from combinet import data
from combinet.data import AugmentSpec, Sample
from combinet.shapes import disc_mask
from combinet.utils import DatasetError, InvalidArgument
from PIL import Image
import numpy as np
import os
import pytest


def checker_sample(h=8, w=8, classes=3):
    rng = np.random.default_rng(0)
    mask = rng.integers(0, classes, size=(h, w))
    image = data.class_colors(classes)[mask].transpose(2, 0, 1)
    return Sample(image, mask, meta={"id": "checker"})


def test_sample_shape_checks():
    with pytest.raises(DatasetError):
        Sample(np.zeros((3, 4, 4)), np.zeros((4, 5)))
    with pytest.raises(DatasetError):
        Sample(np.zeros((4, 4)), np.zeros((4, 4)))


def test_class_ids_skip_ignore():
    sample = Sample(np.zeros((1, 2, 2)), np.array([[0, 2], [255, 2]]))
    assert [0, 2] == sample.class_ids().tolist()


def test_save_and_load_pair(tmpdir):
    sample = checker_sample()
    image_path, mask_path = str(tmpdir / "a.png"), str(tmpdir / "a-mask.png")
    data.save_pair(sample, image_path, mask_path)
    assert "P" == Image.open(mask_path).mode
    loaded = data.load_pair(image_path, mask_path)
    assert np.array_equal(sample.mask, loaded.mask)
    assert np.abs(sample.image - loaded.image).max() <= 0.5 / 255 + 1e-12
    assert "a" == loaded.meta["id"]


def test_load_pair_rejects_rgb_mask(tmpdir):
    image_path, mask_path = str(tmpdir / "a.png"), str(tmpdir / "m.png")
    Image.new("RGB", (4, 4)).save(image_path)
    Image.new("RGB", (4, 4)).save(mask_path)
    with pytest.raises(DatasetError) as e:
        data.load_pair(image_path, mask_path)
    assert "indexed" in e.value.message


def test_load_pair_size_mismatch(tmpdir):
    image_path, mask_path = str(tmpdir / "a.png"), str(tmpdir / "m.png")
    Image.new("RGB", (4, 4)).save(image_path)
    Image.new("L", (4, 5)).save(mask_path)
    with pytest.raises(DatasetError):
        data.load_pair(image_path, mask_path)


def test_load_missing_image(tmpdir):
    with pytest.raises(DatasetError):
        data.load_image(str(tmpdir / "missing.png"))


def test_sixteen_bit_grayscale(tmpdir):
    path = str(tmpdir / "deep.png")
    Image.fromarray(np.array([[0, 65535]], dtype=np.uint16)).save(path)
    assert [[[0.0, 1.0]]] == data.load_image(path).tolist()


def test_resize_mask_nearest():
    mask = np.array([[0, 1], [2, 3]])
    assert [[0, 0, 1, 1], [0, 0, 1, 1], [2, 2, 3, 3], [2, 2, 3, 3]] == data.resize_mask(mask, 4, 4).tolist()


def test_flips():
    sample = Sample(np.arange(4.0).reshape(1, 2, 2), np.array([[0, 1], [2, 3]]))
    assert [[1, 0], [3, 2]] == data.hflip(sample).mask.tolist()
    assert [[2, 3], [0, 1]] == data.vflip(sample).mask.tolist()
    assert [[[1.0, 0.0], [3.0, 2.0]]] == data.hflip(sample).image.tolist()


def test_identity_augment_keeps_sample():
    sample = checker_sample()
    out = data.augment(sample, AugmentSpec.identity(), np.random.default_rng(0))
    assert np.array_equal(sample.image, out.image)
    assert np.array_equal(sample.mask, out.mask)


def test_augment_pads_with_ignore():
    sample = checker_sample(4, 4)
    out = data.augment(sample, AugmentSpec.identity(crop_size=6), np.random.default_rng(0))
    assert (6, 6) == out.size
    assert np.all(out.mask[4:, :] == 255)
    assert np.all(out.mask[:, 4:] == 255)
    assert np.array_equal(sample.mask, out.mask[:4, :4])


@pytest.mark.parametrize("seed", range(5))
def test_augment_keeps_image_and_mask_aligned(seed):
    sample = checker_sample(12, 10)
    spec = AugmentSpec.identity(crop_size=8, hflip=True, vflip=True)
    out = data.augment(sample, spec, np.random.default_rng(seed))
    assert (3, 8, 8) == out.image.shape
    expected = data.class_colors(3)[out.mask].transpose(2, 0, 1)
    assert np.allclose(expected, out.image)


@pytest.mark.parametrize("seed", range(5))
def test_augment_rescales(seed):
    sample = checker_sample(12, 12)
    spec = AugmentSpec(scale_range=(0.5, 2.0), crop_size=None)
    out = data.augment(sample, spec, np.random.default_rng(seed))
    assert out.image.shape[1:] == out.mask.shape
    assert set(np.unique(out.mask)) <= set(np.unique(sample.mask))


@pytest.mark.parametrize("seed", range(3))
def test_augment_with_fixed_size(seed):
    spec = AugmentSpec(scale_range=(0.5, 2.0), crop_size=None)
    for h, w in ((12, 12), (10, 14)):
        out = data.augment(checker_sample(h, w), spec, np.random.default_rng(seed), size=(9, 11))
        assert (3, 9, 11) == out.image.shape
        assert (9, 11) == out.mask.shape


def test_rescaled_size():
    assert (8, 8) == data.rescaled_size(16, 16, 0.5, 1.0)
    assert (16, 36) == data.rescaled_size(24, 24, 1.0, 2.25)


def test_augment_is_reproducible():
    sample = checker_sample(12, 12)
    spec = AugmentSpec(crop_size=8)
    a = data.augment(sample, spec, np.random.default_rng(3))
    b = data.augment(sample, spec, np.random.default_rng(3))
    assert np.array_equal(a.image, b.image)
    assert np.array_equal(a.mask, b.mask)


def test_augment_normalises():
    sample = Sample(np.full((3, 4, 4), 0.5), np.zeros((4, 4)))
    spec = AugmentSpec.identity(mean=[0.25, 0.5, 0.75], std=[0.5, 0.5, 0.25])
    out = data.augment(sample, spec, np.random.default_rng(0))
    assert [0.5, 0.0, -1.0] == out.image[:, 0, 0].tolist()


@pytest.mark.parametrize(
    "kwargs",
    [{"scale_range": (2.0, 1.0)}, {"crop_size": 0}, {"hue": -0.1}, {"mean": [0.5]}],
)
def test_augment_spec_validation(kwargs):
    with pytest.raises(InvalidArgument):
        AugmentSpec(**kwargs)


def test_color_jitter_stays_in_range():
    image = np.random.default_rng(0).uniform(size=(3, 6, 6))
    out = data.color_jitter(image, 0.5, 0.5, 0.2, np.random.default_rng(1))
    assert out.min() >= 0.0 and out.max() <= 1.0
    assert not np.array_equal(image, out)


def test_hue_rotation_keeps_gray():
    gray = np.full((3, 2, 2), 0.4)
    assert np.allclose(gray, data._rotate_hue(gray, 0.3))


def test_channel_stats_and_normalise():
    samples = [Sample(np.array([[[0.0, 1.0]], [[0.5, 0.5]]]), np.zeros((1, 2)))]
    mean, std = data.channel_stats(samples)
    assert [0.5, 0.5] == mean.tolist()
    assert [0.5, 0.0] == std.tolist()
    with pytest.raises(InvalidArgument):
        data.normalize_dataset(samples, mean, std)
    normalised = data.normalize_dataset(samples, mean, [0.5, 1.0])
    assert [[[-1.0, 1.0]], [[0.0, 0.0]]] == normalised[0].image.tolist()


@pytest.mark.parametrize(
    "n,fractions,expected",
    [
        (366, (0.6, 0.2, 0.2), (219, 73, 74)),
        (10, (0.8, 0.2), (8, 2)),
        (3, (0.5, 0.5), (1, 2)),
        (5, (1.0,), (5,)),
    ],
)
def test_split_sizes(n, fractions, expected):
    parts = data.split(range(n), fractions, seed=0)
    assert expected == tuple(len(p) for p in parts)
    assert list(range(n)) == sorted(i for part in parts for i in part)


def test_split_is_seeded():
    assert data.split(range(20), (0.5, 0.5), 1) == data.split(range(20), (0.5, 0.5), 1)
    assert data.split(range(20), (0.5, 0.5), 1) != data.split(range(20), (0.5, 0.5), 2)


@pytest.mark.parametrize("fractions", [(0.5, 0.6), (-0.5, 1.5)])
def test_split_rejects_fractions(fractions):
    with pytest.raises(InvalidArgument):
        data.split(range(4), fractions, 0)


def test_split_empty():
    with pytest.raises(DatasetError):
        data.split([], (1.0,), 0)


def test_synth_discs(disc_samples):
    assert 6 == len(disc_samples)
    sample = disc_samples[0]
    assert (3, 16, 16) == sample.image.shape
    assert "synth-00000" == sample.meta["id"]
    (shape,) = sample.meta["shapes"]
    assert "disc" == shape["kind"]
    assert 4 == shape["radius"]
    assert np.array_equal(disc_mask(16, shape["cy"], shape["cx"], 4), sample.mask == 1)


def test_synth_stripes_and_errors():
    samples = data.synth_dataset(2, 32, 3, "stripes", 0.0, np.random.default_rng(0))
    assert set(np.unique(samples[0].mask)) <= {0, 1, 2}
    with pytest.raises(InvalidArgument):
        data.synth_dataset(1, 8, 2, "discs", 0.0, np.random.default_rng(0))
    with pytest.raises(InvalidArgument) as e:
        data.synth_dataset(1, 16, 2, "stars", 0.0, np.random.default_rng(0))
    assert "discs, stripes" in e.value.message


def test_noise_images():
    images = data.noise_images(3, 8, 1, np.random.default_rng(0))
    assert [(1, 8, 8)] * 3 == [image.shape for image in images]


def test_dataset_round_trip(dataset_dir):
    directory, manifest = dataset_dir
    assert os.path.join(directory, "manifest.tsv") == manifest
    lines = open(manifest).read().splitlines()
    assert "images/synth-00000.png\tmasks/synth-00000.png" == lines[0]
    samples = data.load_dataset(manifest)
    assert 4 == len(samples)
    assert "synth-00000" == samples[0].meta["id"]


def test_manifest_without_masks(tmpdir):
    path = str(tmpdir / "infer.tsv")
    open(path, "w").write("# comment\na.png\n\nb.png\n")
    entries = data.read_manifest(path)
    assert [(str(tmpdir / "a.png"), None), (str(tmpdir / "b.png"), None)] == entries
    with pytest.raises(DatasetError):
        data.load_dataset(path)


def test_manifest_too_many_columns(tmpdir):
    path = str(tmpdir / "bad.tsv")
    open(path, "w").write("a.png\tb.png\tc.png\n")
    with pytest.raises(DatasetError) as e:
        data.read_manifest(path)
    assert "line 1" in e.value.message


def test_palette():
    assert 768 == len(data.MASK_PALETTE)
    assert [255, 255, 255] == data.MASK_PALETTE[255 * 3:]
    assert list(data.CLASS_COLORS[1]) == data.MASK_PALETTE[3:6]
