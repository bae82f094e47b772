"""
Segmentation samples: PNG pairs, augmentation, splits and synthetic data.

Images are C x H x W float arrays in [0, 1] before normalisation; masks are
H x W integer class ids where ``ignore_index`` marks unlabelled pixels.
"""
import csv
import logging
import os

import numpy as np
from PIL import Image

from .ops import resize_array
from .plugins import pm
from .utils import DatasetError, InvalidArgument, substream

log = logging.getLogger(__name__)

IGNORE_INDEX = 255

# Class colours for the first 11 ids, then a generated sequence; 255 is white
CLASS_COLORS = (
    (128, 128, 128),
    (128, 0, 0),
    (192, 192, 128),
    (128, 64, 128),
    (60, 40, 222),
    (128, 128, 0),
    (192, 128, 128),
    (64, 64, 128),
    (64, 0, 128),
    (64, 64, 0),
    (0, 128, 192),
)


def _build_palette():
    colors = list(CLASS_COLORS)
    for index in range(len(colors), 256):
        r = g = b = 0
        value = index
        for bit in range(8):
            r |= ((value >> 0) & 1) << (7 - bit)
            g |= ((value >> 1) & 1) << (7 - bit)
            b |= ((value >> 2) & 1) << (7 - bit)
            value >>= 3
        colors.append((r, g, b))
    colors[IGNORE_INDEX] = (255, 255, 255)
    return [channel for color in colors for channel in color]


MASK_PALETTE = _build_palette()


class Sample:
    def __init__(self, image, mask, ignore_index=IGNORE_INDEX, meta=None):
        image = np.asarray(image, dtype=np.float64)
        mask = np.asarray(mask)
        if image.ndim != 3 or mask.ndim != 2:
            raise DatasetError(
                "Sample needs a C x H x W image and an H x W mask, got {} and {}".format(
                    image.shape, mask.shape
                )
            )
        if image.shape[1:] != mask.shape:
            raise DatasetError(
                "Image is {}x{} but mask is {}x{}".format(
                    image.shape[1], image.shape[2], mask.shape[0], mask.shape[1]
                )
            )
        self.image = image
        self.mask = mask.astype(np.int64)
        self.ignore_index = ignore_index
        self.meta = dict(meta or {})

    @property
    def size(self):
        return self.mask.shape

    def class_ids(self):
        ids = np.unique(self.mask)
        return ids[ids != self.ignore_index]

    def __repr__(self):
        return "<Sample {} {}>".format(self.meta.get("id", ""), self.image.shape)


def _open_image(path):
    try:
        image = Image.open(path)
        image.load()
        return image
    except OSError as e:
        raise DatasetError("Could not read image {}: {}".format(path, e))


def image_to_array(image):
    "Decode a Pillow image to a C x H x W float array in [0, 1]"
    if image.mode in ("I;16", "I;16B", "I;16L", "I"):
        data = np.asarray(image, dtype=np.float64)[None] / 65535.0
        return np.clip(data, 0.0, 1.0)
    if image.mode == "L":
        return np.asarray(image, dtype=np.float64)[None] / 255.0
    if image.mode != "RGB":
        image = image.convert("RGB")
    return np.asarray(image, dtype=np.float64).transpose(2, 0, 1) / 255.0


def load_image(path):
    return image_to_array(_open_image(path))


def load_pair(image_path, mask_path, ignore_index=IGNORE_INDEX):
    image = _open_image(image_path)
    mask_image = _open_image(mask_path)
    if mask_image.mode not in ("P", "L"):
        raise DatasetError(
            "Mask {} must be an 8-bit indexed PNG, got mode {}".format(mask_path, mask_image.mode)
        )
    if image.size != mask_image.size:
        raise DatasetError(
            "Image {} is {}x{} but mask {} is {}x{}".format(
                image_path, image.size[0], image.size[1], mask_path, *mask_image.size
            )
        )
    return Sample(
        image_to_array(image),
        np.asarray(mask_image, dtype=np.int64),
        ignore_index=ignore_index,
        meta={"id": os.path.splitext(os.path.basename(image_path))[0]},
    )


def array_to_image(image):
    data = np.round(np.clip(image, 0.0, 1.0) * 255).astype(np.uint8)
    if data.shape[0] == 1:
        return Image.fromarray(data[0])
    if data.shape[0] == 3:
        return Image.fromarray(data.transpose(1, 2, 0))
    raise DatasetError("Can only save 1 or 3 channel images, got {}".format(data.shape[0]))


def mask_to_image(mask):
    mask = np.asarray(mask)
    if mask.min() < 0 or mask.max() > 255:
        raise DatasetError("Mask ids must fit in 8 bits")
    image = Image.fromarray(mask.astype(np.uint8))
    image.putpalette(MASK_PALETTE)
    return image


def save_pair(sample, image_path, mask_path):
    "Write an 8-bit image PNG and an 8-bit indexed mask PNG"
    array_to_image(sample.image).save(image_path, format="PNG")
    mask_to_image(sample.mask).save(mask_path, format="PNG")


class AugmentSpec:
    def __init__(
        self,
        scale_range=(0.5, 2.0),
        aspect_range=(3 / 4, 4 / 3),
        crop_size=360,
        hflip=True,
        vflip=False,
        contrast=0.2,
        saturation=0.2,
        hue=0.05,
        mean=None,
        std=None,
    ):
        self.scale_range = tuple(scale_range)
        self.aspect_range = tuple(aspect_range)
        self.crop_size = crop_size
        self.hflip = hflip
        self.vflip = vflip
        self.contrast = contrast
        self.saturation = saturation
        self.hue = hue
        self.mean = mean
        self.std = std
        self.validate()

    @classmethod
    def identity(cls, crop_size=None, **kwargs):
        "No geometric or colour changes; optionally still crops"
        defaults = dict(
            scale_range=(1.0, 1.0),
            aspect_range=(1.0, 1.0),
            crop_size=crop_size,
            hflip=False,
            vflip=False,
            contrast=0.0,
            saturation=0.0,
            hue=0.0,
        )
        defaults.update(kwargs)
        return cls(**defaults)

    def validate(self):
        problems = []
        for name in ("scale_range", "aspect_range"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi:
                problems.append("{} must satisfy 0 < lo <= hi, got {}".format(name, (lo, hi)))
        if self.crop_size is not None and self.crop_size < 1:
            problems.append("crop_size must be positive")
        for name in ("contrast", "saturation", "hue"):
            if getattr(self, name) < 0:
                problems.append("{} must be non-negative".format(name))
        if (self.mean is None) != (self.std is None):
            problems.append("mean and std must be given together")
        if problems:
            raise InvalidArgument("Invalid augmentation: {}".format("; ".join(problems)))

    def to_dict(self):
        return {
            "scale_range": list(self.scale_range),
            "aspect_range": list(self.aspect_range),
            "crop_size": self.crop_size,
            "hflip": self.hflip,
            "vflip": self.vflip,
            "contrast": self.contrast,
            "saturation": self.saturation,
            "hue": self.hue,
            "mean": None if self.mean is None else list(np.asarray(self.mean, dtype=float)),
            "std": None if self.std is None else list(np.asarray(self.std, dtype=float)),
        }


def resize_mask(mask, out_h, out_w):
    "Nearest-neighbour resize using the same half-pixel centres as the image"
    h, w = mask.shape
    rows = np.minimum(((np.arange(out_h) + 0.5) * h / out_h).astype(np.int64), h - 1)
    cols = np.minimum(((np.arange(out_w) + 0.5) * w / out_w).astype(np.int64), w - 1)
    return mask[rows[:, None], cols[None, :]]


def hflip(sample):
    return Sample(
        sample.image[:, :, ::-1].copy(), sample.mask[:, ::-1].copy(), sample.ignore_index, sample.meta
    )


def vflip(sample):
    return Sample(
        sample.image[:, ::-1, :].copy(), sample.mask[::-1, :].copy(), sample.ignore_index, sample.meta
    )


# RGB -> YIQ, hue is a rotation of the (I, Q) plane
_YIQ = np.array([[0.299, 0.587, 0.114], [0.596, -0.274, -0.322], [0.211, -0.523, 0.312]])
_YIQ_INV = np.linalg.inv(_YIQ)


def _rotate_hue(image, cycles):
    angle = 2 * np.pi * cycles
    cos, sin = np.cos(angle), np.sin(angle)
    rotation = np.array([[1, 0, 0], [0, cos, -sin], [0, sin, cos]])
    matrix = _YIQ_INV @ rotation @ _YIQ
    return np.einsum("ij,jhw->ihw", matrix, image)


def color_jitter(image, contrast, saturation, hue, rng):
    "Random contrast, saturation and hue changes; ranges of 0 are skipped"
    if contrast:
        factor = 1 + rng.uniform(-contrast, contrast)
        image = (image - image.mean()) * factor + image.mean()
    if image.shape[0] == 3:
        if saturation:
            factor = 1 + rng.uniform(-saturation, saturation)
            gray = np.einsum("c,chw->hw", _YIQ[0], image)[None]
            image = gray + (image - gray) * factor
        if hue:
            image = _rotate_hue(image, rng.uniform(-hue, hue))
    return np.clip(image, 0.0, 1.0)


def draw_rescale(spec, rng):
    "Random (scale, aspect) pair for one rescale"
    return rng.uniform(*spec.scale_range), rng.uniform(*spec.aspect_range)


def rescaled_size(h, w, scale, aspect):
    return (
        max(1, int(round(h * scale / np.sqrt(aspect)))),
        max(1, int(round(w * scale * np.sqrt(aspect)))),
    )


def augment(sample, spec, rng, size=None):
    """
    Rescale (isotropic and aspect ratio in one resize), pad short sides,
    random square crop, flips, colour jitter, then normalisation. The mask
    follows every geometric step with nearest-neighbour sampling and is
    padded with ``ignore_index``.

    ``size`` fixes the rescaled (H, W) instead of drawing a scale and
    aspect; batches pass one shared size when cropping is off.
    """
    image, mask = sample.image, sample.mask
    _, h, w = image.shape
    if size is None:
        size = rescaled_size(h, w, *draw_rescale(spec, rng))
    out_h, out_w = size
    if (out_h, out_w) != (h, w):
        image = resize_array(image, out_h, out_w)
        mask = resize_mask(mask, out_h, out_w)
    if spec.crop_size is not None:
        crop = spec.crop_size
        pad_h, pad_w = max(0, crop - out_h), max(0, crop - out_w)
        if pad_h or pad_w:
            image = np.pad(image, ((0, 0), (0, pad_h), (0, pad_w)), mode="edge")
            mask = np.pad(mask, ((0, pad_h), (0, pad_w)), constant_values=sample.ignore_index)
        top = int(rng.integers(0, image.shape[1] - crop + 1))
        left = int(rng.integers(0, image.shape[2] - crop + 1))
        image = image[:, top:top + crop, left:left + crop]
        mask = mask[top:top + crop, left:left + crop]
    out = Sample(image, mask, sample.ignore_index, sample.meta)
    if spec.hflip and rng.random() < 0.5:
        out = hflip(out)
    if spec.vflip and rng.random() < 0.5:
        out = vflip(out)
    image = color_jitter(out.image, spec.contrast, spec.saturation, spec.hue, rng)
    if spec.mean is not None:
        image = normalize_channels(image, spec.mean, spec.std)
    return Sample(image, out.mask, sample.ignore_index, sample.meta)


def normalize_channels(image, mean, std):
    mean = np.asarray(mean, dtype=np.float64).reshape(-1, 1, 1)
    std = np.asarray(std, dtype=np.float64).reshape(-1, 1, 1)
    if np.any(std <= 0):
        raise InvalidArgument("normalize_channels: std must be positive in every channel")
    return (np.asarray(image, dtype=np.float64) - mean) / std


def channel_stats(samples):
    "Per-channel mean and (population) standard deviation over every pixel"
    if not samples:
        raise DatasetError("channel_stats: no samples")
    count = sum(s.image.shape[1] * s.image.shape[2] for s in samples)
    mean = sum(s.image.sum(axis=(1, 2)) for s in samples) / count
    var = sum(((s.image - mean[:, None, None]) ** 2).sum(axis=(1, 2)) for s in samples) / count
    return mean, np.sqrt(var)


def normalize_dataset(samples, mean, std):
    return [
        Sample(normalize_channels(s.image, mean, std), s.mask, s.ignore_index, s.meta)
        for s in samples
    ]


def split(dataset, fractions, seed):
    """
    Seeded disjoint split. Every part but the last gets floor(f * n); the
    last takes the remainder.
    """
    dataset = list(dataset)
    if not dataset:
        raise DatasetError("Cannot split an empty dataset")
    fractions = [float(f) for f in fractions]
    if any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise InvalidArgument("split fractions must be non-negative and sum to 1, got {}".format(fractions))
    n = len(dataset)
    order = substream(seed, "split").permutation(n)
    sizes = [int(np.floor(f * n + 1e-9)) for f in fractions[:-1]]
    sizes.append(n - sum(sizes))
    parts, start = [], 0
    for size in sizes:
        parts.append([dataset[i] for i in order[start:start + size]])
        start += size
    return tuple(parts)


def shape_painters():
    painters = {}
    for mapping in pm.hook.synth_shapes():
        painters.update(mapping or {})
    return painters


def class_colors(num_classes, channels=3):
    colors = np.asarray(MASK_PALETTE, dtype=np.float64).reshape(256, 3)[:num_classes] / 255.0
    if channels == 3:
        return colors
    return np.repeat(colors.mean(axis=1, keepdims=True), channels, axis=1)


def synth_dataset(
    num_samples, size, num_classes, shape_kind, noise_sigma, rng, radius=None, channels=3
):
    "Images of class-coloured shapes plus Gaussian noise, with exact masks"
    if size < 16:
        raise InvalidArgument("synthetic images need size >= 16, got {}".format(size))
    if num_classes < 2:
        raise InvalidArgument("synthetic data needs at least 2 classes")
    painters = shape_painters()
    if shape_kind not in painters:
        raise InvalidArgument(
            "Unknown shape kind {!r}, expected one of {}".format(shape_kind, ", ".join(sorted(painters)))
        )
    colors = class_colors(num_classes, channels)
    samples = []
    for index in range(num_samples):
        mask, shapes = painters[shape_kind](rng, size, num_classes, radius=radius)
        image = colors[mask].transpose(2, 0, 1)
        if noise_sigma:
            image = image + rng.normal(0.0, noise_sigma, size=image.shape)
        samples.append(
            Sample(
                np.clip(image, 0.0, 1.0),
                mask,
                meta={"id": "synth-{:05d}".format(index), "shapes": shapes},
            )
        )
    return samples


def noise_images(n, size, channels, rng):
    "Uniform noise images, used as out-of-distribution inputs"
    return [rng.uniform(0.0, 1.0, size=(channels, size, size)) for _ in range(n)]


def read_manifest(path):
    """
    Read ``image<TAB>mask`` lines; the mask column may be absent for
    inference-only manifests. Relative paths resolve against the manifest.
    """
    root = os.path.dirname(os.path.abspath(path))
    entries = []
    try:
        with open(path, encoding="utf8", newline="") as fp:
            for number, row in enumerate(csv.reader(fp, delimiter="\t"), 1):
                if not row or not row[0].strip() or row[0].startswith("#"):
                    continue
                if len(row) > 2:
                    raise DatasetError("{} line {}: expected at most 2 columns".format(path, number))
                paths = [os.path.join(root, p) for p in row]
                entries.append((paths[0], paths[1] if len(paths) > 1 else None))
    except OSError as e:
        raise DatasetError("Could not read manifest {}: {}".format(path, e.strerror))
    return entries


def write_manifest(path, entries):
    root = os.path.dirname(os.path.abspath(path))
    with open(path, "w", encoding="utf8", newline="") as fp:
        writer = csv.writer(fp, delimiter="\t", lineterminator="\n")
        for entry in entries:
            writer.writerow([os.path.relpath(p, root) for p in entry if p is not None])


def load_dataset(manifest_path, ignore_index=IGNORE_INDEX):
    entries = read_manifest(manifest_path)
    if not entries:
        raise DatasetError("Manifest {} lists no samples".format(manifest_path))
    missing = [image for image, mask in entries if mask is None]
    if missing:
        raise DatasetError("Manifest {} has images without masks, e.g. {}".format(manifest_path, missing[0]))
    samples = [load_pair(image, mask, ignore_index) for image, mask in entries]
    log.info("Loaded %d samples from %s", len(samples), manifest_path)
    return samples


def write_dataset(samples, directory):
    "Write every sample as a PNG pair plus ``manifest.tsv``; returns the manifest path"
    images_dir = os.path.join(directory, "images")
    masks_dir = os.path.join(directory, "masks")
    os.makedirs(images_dir, exist_ok=True)
    os.makedirs(masks_dir, exist_ok=True)
    entries = []
    for index, sample in enumerate(samples):
        name = "{}.png".format(sample.meta.get("id", "{:05d}".format(index)))
        image_path = os.path.join(images_dir, name)
        mask_path = os.path.join(masks_dir, name)
        save_pair(sample, image_path, mask_path)
        entries.append((image_path, mask_path))
    manifest = os.path.join(directory, "manifest.tsv")
    write_manifest(manifest, entries)
    return manifest
