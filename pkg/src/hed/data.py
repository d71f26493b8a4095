"""Annotated images, consensus labels, augmentation and the synthetic corpus."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from .losses import LabelMap
from .netpbm import FormatError, read_pnm, write_pgm, write_ppm

logger = logging.getLogger(__name__)


class CorpusError(ValueError):
    pass


@dataclass
class AnnotatedImage:
    image: np.ndarray  # (C, H, W) in [0, 1]
    annotations: list  # K binary (H, W) uint8 maps
    id: str

    def __post_init__(self):
        if self.image.ndim == 2:
            self.image = self.image[None]
        if not self.annotations:
            raise CorpusError(f"image {self.id!r} has no annotations")
        hw = self.image.shape[1:]
        for k, ann in enumerate(self.annotations):
            if ann.shape != hw:
                raise CorpusError(f"image {self.id!r} annotation {k} has shape {ann.shape}, image is {hw}")

    @property
    def shape(self) -> tuple:
        return self.image.shape[1:]


@dataclass
class TrainingSample:
    image: np.ndarray  # (C, H, W)
    labels: LabelMap
    provenance: tuple = field(default=("", 0.0, False, 1.0))  # (source id, angle, flip, scale)


def consensus(annotations: Sequence[np.ndarray], threshold: int = 3) -> LabelMap:
    """Positive where at least ``threshold`` annotators marked the pixel."""
    if len(annotations) < 1:
        raise ValueError("consensus needs at least one annotation")
    if threshold < 1:
        raise ValueError("consensus threshold must be >= 1")
    shape = annotations[0].shape
    for k, ann in enumerate(annotations):
        if ann.shape != shape:
            raise ValueError(f"annotation {k} has shape {ann.shape}, expected {shape}")
    votes = np.sum([(np.asarray(a) > 0) for a in annotations], axis=0)
    return LabelMap((votes >= threshold).astype(np.uint8))


# geometry -------------------------------------------------------------------


def largest_rotated_rect(w: float, h: float, angle: float) -> tuple:
    """Width and height of the largest axis-aligned rectangle inside a w x h
    rectangle rotated by ``angle`` radians (both centered at the same point)."""
    if w <= 0 or h <= 0:
        return 0.0, 0.0
    width_is_longer = w >= h
    long_side, short_side = (w, h) if width_is_longer else (h, w)
    sin_a, cos_a = abs(math.sin(angle)), abs(math.cos(angle))
    if short_side <= 2.0 * sin_a * cos_a * long_side or abs(sin_a - cos_a) < 1e-10:
        # half constrained: two crop corners touch the longer side
        x = 0.5 * short_side
        wr, hr = (x / sin_a, x / cos_a) if width_is_longer else (x / cos_a, x / sin_a)
    else:
        cos_2a = cos_a * cos_a - sin_a * sin_a
        wr = (w * cos_a - h * sin_a) / cos_2a
        hr = (h * cos_a - w * sin_a) / cos_2a
    return wr, hr


def rotate_crop(arr: np.ndarray, angle_deg: float, order: int) -> np.ndarray:
    """Rotate a (H, W) map about its center and keep the largest inscribed rectangle.

    ``order`` 1 is bilinear, 0 nearest-neighbour.
    """
    h, w = arr.shape
    theta = math.radians(angle_deg)
    wr, hr = largest_rotated_rect(w, h, theta)
    wc, hc = int(math.floor(wr + 1e-9)), int(math.floor(hr + 1e-9))
    if wc < 1 or hc < 1:
        return np.zeros((0, 0), dtype=arr.dtype)
    # output (r, c) -> source = center + R(theta) . (r - rc, c - cc); pixel centers at integers
    cos_t, sin_t = math.cos(theta), math.sin(theta)
    matrix = np.array([[cos_t, sin_t], [-sin_t, cos_t]])
    out_center = np.array([(hc - 1) / 2.0, (wc - 1) / 2.0])
    src_center = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    offset = src_center - matrix @ out_center
    # snap exact quarter turns so they are pure index permutations
    matrix = np.where(np.abs(matrix) < 1e-12, 0.0, matrix)
    matrix = np.where(np.abs(np.abs(matrix) - 1.0) < 1e-12, np.sign(matrix), matrix)
    offset = np.where(np.abs(offset - np.rint(offset)) < 1e-9, np.rint(offset), offset)
    return ndimage.affine_transform(
        arr.astype(np.float64), matrix, offset=offset, output_shape=(hc, wc), order=order, mode="nearest"
    )


def resize(arr: np.ndarray, shape: tuple, order: int) -> np.ndarray:
    """Resample a (H, W) map to ``shape`` with pixel-center alignment."""
    h, w = arr.shape
    oh, ow = shape
    if (oh, ow) == (h, w):
        return arr.astype(np.float64)
    sy, sx = h / oh, w / ow
    matrix = np.diag([sy, sx])
    offset = np.array([0.5 * sy - 0.5, 0.5 * sx - 0.5])
    return ndimage.affine_transform(arr.astype(np.float64), matrix, offset=offset, output_shape=(oh, ow), order=order, mode="nearest")


def flip_horizontal(arr: np.ndarray) -> np.ndarray:
    return arr[..., ::-1].copy()


def _transform_image(image: np.ndarray, fn) -> np.ndarray:
    return np.stack([fn(ch) for ch in image])


def augment(
    sample: AnnotatedImage,
    angles: int = 16,
    flips: bool = True,
    scales: Sequence[float] = (1.0,),
    threshold: int = 3,
    min_size: int = 1,
    resize_to: Optional[int] = None,
    stats: Optional[dict] = None,
) -> list:
    """Rotation x flip x scale variants of one annotated image.

    Annotations are transformed with nearest-neighbour sampling and reduced to a
    consensus map afterwards. Variants whose spatial extent falls below
    ``min_size`` are skipped and counted in ``stats['skipped']``.
    """
    if angles < 1:
        raise ValueError("angles must be >= 1")
    out = []
    skipped = 0
    for i in range(angles):
        angle = 360.0 * i / angles
        img_r = _transform_image(sample.image, lambda ch: rotate_crop(ch, angle, order=1))
        anns_r = [rotate_crop(a.astype(np.float64), angle, order=0) for a in sample.annotations]
        for scale in scales:
            h, w = img_r.shape[1:]
            if resize_to is not None:
                target = (int(round(resize_to * scale)), int(round(resize_to * scale)))
            else:
                target = (int(round(h * scale)), int(round(w * scale)))
            if min(target) < max(min_size, 1) or h == 0:
                skipped += 2 if flips else 1
                continue
            img_s = _transform_image(img_r, lambda ch: resize(ch, target, order=1))
            anns_s = [resize(a, target, order=0) for a in anns_r]
            label = consensus(anns_s, threshold)
            img_s = np.clip(img_s, 0.0, 1.0)
            out.append(TrainingSample(img_s, label, (sample.id, angle, False, scale)))
            if flips:
                out.append(
                    TrainingSample(flip_horizontal(img_s), LabelMap(flip_horizontal(label.values)), (sample.id, angle, True, scale))
                )
    if skipped:
        logger.warning("skipped %d augmented variants of %s below minimum size %d", skipped, sample.id, min_size)
    if stats is not None:
        stats["skipped"] = stats.get("skipped", 0) + skipped
    return out


def augment_corpus(corpus: Sequence[AnnotatedImage], **kwargs) -> list:
    samples = []
    for item in sorted(corpus, key=lambda a: a.id):
        samples.extend(augment(item, **kwargs))
    return samples


def split_corpus(corpus: Sequence[AnnotatedImage], holdout: int, seed: int = 0) -> tuple:
    """Seeded ``(train, held_out)`` split; both parts keep id order."""
    items = sorted(corpus, key=lambda a: a.id)
    if not 0 <= holdout <= len(items):
        raise ValueError(f"cannot hold out {holdout} of {len(items)} images")
    chosen = set(np.random.default_rng(seed).choice(len(items), size=holdout, replace=False).tolist())
    return [a for i, a in enumerate(items) if i not in chosen], [a for i, a in enumerate(items) if i in chosen]


# corpus on disk -------------------------------------------------------------


def load_corpus(directory) -> list:
    """Read ``images/<id>.pgm|ppm`` with ``groundtruth/<id>/<k>.pgm`` annotations."""
    root = Path(directory)
    img_dir = root / "images"
    if not img_dir.is_dir():
        return []
    items = []
    for path in sorted(p for p in img_dir.iterdir() if p.suffix in (".pgm", ".ppm")):
        ident = path.stem
        image = read_pnm(path)
        gt_dir = root / "groundtruth" / ident
        ann_paths = sorted(gt_dir.glob("*.pgm"), key=annotator_key) if gt_dir.is_dir() else []
        if not ann_paths:
            raise CorpusError(f"image {ident!r} has no annotations under {gt_dir}")
        anns = [(read_pnm(p) > 0.5).astype(np.uint8) for p in ann_paths]
        items.append(AnnotatedImage(image if image.ndim == 3 else image[None], anns, ident))
    return items


def annotator_key(path: Path):
    return (0, int(path.stem), "") if path.stem.isdigit() else (1, 0, path.stem)


def save_corpus(corpus: Sequence[AnnotatedImage], directory) -> None:
    root = Path(directory)
    (root / "images").mkdir(parents=True, exist_ok=True)
    for item in corpus:
        if item.image.shape[0] == 3:
            write_ppm(root / "images" / f"{item.id}.ppm", item.image)
        else:
            write_pgm(root / "images" / f"{item.id}.pgm", item.image[0])
        gt = root / "groundtruth" / item.id
        gt.mkdir(parents=True, exist_ok=True)
        for k, ann in enumerate(item.annotations):
            write_pgm(gt / f"{k}.pgm", ann.astype(np.float64))


# synthetic corpus -----------------------------------------------------------


def _shape_mask(kind: str, params: tuple, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    if kind == "rect":
        y0, x0, y1, x1 = params
        return (yy >= y0) & (yy <= y1) & (xx >= x0) & (xx <= x1)
    cy, cx, r = params
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r


def outline(mask: np.ndarray) -> np.ndarray:
    """Mask pixels with at least one 4-neighbour outside the mask."""
    inner = ndimage.binary_erosion(mask, structure=ndimage.generate_binary_structure(2, 1), border_value=0)
    return mask & ~inner


def _jitter(edge: np.ndarray, rng: np.random.Generator, prob: float) -> np.ndarray:
    out = np.zeros_like(edge)
    ys, xs = np.nonzero(edge)
    moves = np.array([(-1, 0), (1, 0), (0, -1), (0, 1)])
    h, w = edge.shape
    for y, x in zip(ys, xs):
        if rng.random() < prob:
            dy, dx = moves[rng.integers(4)]
            y2, x2 = min(max(y + dy, 0), h - 1), min(max(x + dx, 0), w - 1)
            out[y2, x2] = 1
        else:
            out[y, x] = 1
    return out


def synth_corpus(
    n: int,
    size: int = 64,
    seed: int = 0,
    annotators: int = 5,
    jitter: float = 0.1,
    channels: int = 3,
    max_shapes: int = 3,
) -> list:
    """Render ``n`` images of non-overlapping bright rectangles and circles on a dark
    shaded background.

    Each simulated annotator marks the exact shape outlines, except that every
    outline pixel is displaced by one pixel with probability ``jitter``.
    """
    rng = np.random.default_rng(seed)
    corpus = []
    yy, xx = np.mgrid[0:size, 0:size] / max(size - 1, 1)
    for idx in range(n):
        tint = rng.uniform(0.7, 1.0, size=channels)
        g = rng.uniform(-0.1, 0.1, size=2)
        background = rng.uniform(0.05, 0.25) + g[0] * yy + g[1] * xx
        image = np.stack([background * t for t in tint])
        occupied = np.zeros((size, size), bool)
        edges = np.zeros((size, size), bool)
        n_shapes = int(rng.integers(1, max_shapes + 1))
        placed = 0
        for _ in range(60):
            if placed == n_shapes:
                break
            lo, hi = max(size // 8, 4), max(size // 2, 6)
            if rng.random() < 0.5:
                hh, ww = rng.integers(lo, hi, size=2)
                y0 = int(rng.integers(2, max(size - hh - 2, 3)))
                x0 = int(rng.integers(2, max(size - ww - 2, 3)))
                mask = _shape_mask("rect", (y0, x0, y0 + hh - 1, x0 + ww - 1), size)
            else:
                r = rng.uniform(lo / 2, hi / 2)
                cy, cx = rng.uniform(r + 2, size - r - 3, size=2)
                mask = _shape_mask("circle", (cy, cx, r), size)
            grown = ndimage.binary_dilation(mask, iterations=3)
            if (grown & occupied).any() or mask.sum() < 9 or mask[0].any() or mask[-1].any() or mask[:, 0].any() or mask[:, -1].any():
                continue
            occupied |= mask
            edges |= outline(mask)
            base = rng.uniform(0.6, 0.95)
            sg = rng.uniform(-0.15, 0.15, size=2)
            shade = np.clip(base + sg[0] * (yy - 0.5) + sg[1] * (xx - 0.5), 0.45, 1.0)
            color = rng.uniform(0.8, 1.0, size=channels)
            for c in range(channels):
                image[c][mask] = (shade * color[c])[mask]
            placed += 1
        edges = edges.astype(np.uint8)
        anns = [_jitter(edges, rng, jitter) for _ in range(annotators)]
        corpus.append(AnnotatedImage(np.clip(image, 0.0, 1.0), anns, f"synth{idx:04d}"))
    return corpus


def true_outlines(item: AnnotatedImage) -> np.ndarray:
    """Pixels marked by a strict majority of annotators."""
    return consensus(item.annotations, len(item.annotations) // 2 + 1).values
