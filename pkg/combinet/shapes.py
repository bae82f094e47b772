"""
Default shape painters for synthetic segmentation data.

A painter is called as ``painter(rng, size, num_classes, radius=None)`` and
returns ``(mask, shapes)``: a size x size array of class ids (0 is the
background) and a list of dicts describing what was drawn.
"""
import numpy as np

from combinet import hookimpl


def disc_mask(size, cy, cx, radius):
    "Pixels (y, x) with (x - cx)^2 + (y - cy)^2 <= radius^2"
    ys, xs = np.mgrid[0:size, 0:size]
    return (xs - cx) ** 2 + (ys - cy) ** 2 <= radius ** 2


def paint_discs(rng, size, num_classes, radius=None):
    mask = np.zeros((size, size), dtype=np.int64)
    shapes = []
    for class_id in range(1, num_classes):
        r = radius if radius is not None else int(rng.integers(size // 8, size // 4 + 1))
        r = max(1, min(int(r), (size - 1) // 2))
        cy, cx = (int(v) for v in rng.integers(r, size - r, size=2))
        mask[disc_mask(size, cy, cx, r)] = class_id
        shapes.append({"kind": "disc", "class": class_id, "cy": cy, "cx": cx, "radius": r})
    return mask, shapes


def paint_stripes(rng, size, num_classes, radius=None):
    # radius is accepted for a uniform painter signature; stripes ignore it
    mask = np.zeros((size, size), dtype=np.int64)
    shapes = []
    vertical = bool(rng.integers(2))
    for class_id in range(1, num_classes):
        width = int(rng.integers(max(1, size // 16), max(2, size // 6) + 1))
        start = int(rng.integers(0, size - width + 1))
        if vertical:
            mask[:, start:start + width] = class_id
        else:
            mask[start:start + width, :] = class_id
        shapes.append(
            {
                "kind": "stripe",
                "class": class_id,
                "start": start,
                "width": width,
                "vertical": vertical,
            }
        )
    return mask, shapes


@hookimpl
def synth_shapes():
    return {"discs": paint_discs, "stripes": paint_stripes}
