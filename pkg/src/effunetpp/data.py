"""
Dataset schema, online augmentation, epoch streams and synthetic phantoms.

Label alphabet: 0 background, 1 artery, 2 catheter.

On-disk layout of a dataset directory::

    images/<stem>.png   8-bit grayscale
    masks/<stem>.png    indexed PNG, values {0, 1, 2}
    meta.csv            stem, patient_id, view, annotator, split
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import asdict, dataclass, field, fields
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image
from scipy import ndimage

from .exceptions import ConfigError, ContractError, DataError

LABELS = (0, 1, 2)
META_FIELDS = ("stem", "patient_id", "view", "annotator", "split")
# millimetres per pixel on a 512x512 frame; 2 mm is then 10 px
MM_PER_PX_512 = 0.2
RELEVANCE_MM = 2.0


@dataclass
class AnnotatedImage:
    image: np.ndarray
    mask: np.ndarray
    meta: Dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        self.image = np.asarray(self.image)
        self.mask = np.asarray(self.mask)
        if self.image.shape != self.mask.shape or self.image.ndim != 2:
            raise ContractError(f"image {self.image.shape} and mask {self.mask.shape} must be equal 2-D shapes")
        if self.image.dtype != np.uint8:
            raise ContractError("image must be 8-bit")
        check_labels(self.mask)
        self.mask = self.mask.astype(np.uint8, copy=False)


def check_labels(mask: np.ndarray):
    bad = np.setdiff1d(np.unique(mask), LABELS)
    if bad.size:
        raise DataError(f"unknown label value(s) {bad.tolist()} in mask")


# --------------------------------------------------------------------------
# augmentation


@dataclass
class AugmentationPolicy:
    rotation_deg: float = 20.0
    shift_frac: float = 0.10
    zoom_frac: float = 0.10
    brightness_frac: float = 0.40
    copies_per_sample: int = 3

    def __post_init__(self):
        for f in ("rotation_deg", "shift_frac", "zoom_frac", "brightness_frac"):
            if getattr(self, f) < 0:
                raise ConfigError(f"augmentation range {f} must be >= 0")
        if self.zoom_frac >= 1 or self.brightness_frac >= 1:
            raise ConfigError("zoom and brightness ranges must stay below 1")
        if self.copies_per_sample < 0:
            raise ConfigError("copies_per_sample must be >= 0")

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown augmentation key(s): {', '.join(sorted(unknown))}")
        return cls(**d)

    def to_dict(self):
        return asdict(self)

    def sample(self, rng: np.random.Generator) -> "AugmentParams":
        u = lambda r: float(rng.uniform(-r, r)) if r > 0 else 0.0  # noqa: E731
        return AugmentParams(
            rotation_deg=u(self.rotation_deg),
            shift_y=u(self.shift_frac),
            shift_x=u(self.shift_frac),
            zoom=u(self.zoom_frac),
            brightness=u(self.brightness_frac),
        )


@dataclass
class AugmentParams:
    rotation_deg: float = 0.0
    shift_y: float = 0.0
    shift_x: float = 0.0
    zoom: float = 0.0
    brightness: float = 0.0


def _inverse_affine(shape, p: AugmentParams):
    """Matrix and offset mapping output (row, col) to input coordinates.

    Forward geometry: rotate about the centre, shift by a fraction of each
    side, then zoom by ``1 + zoom`` about the centre.
    """
    h, w = shape
    c = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    t = np.array([p.shift_y * h, p.shift_x * w])
    s = 1.0 + p.zoom
    a = math.radians(p.rotation_deg)
    rot = np.array([[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]])
    inv = rot.T / s
    offset = c - inv @ c - rot.T @ t
    return inv, offset


def apply_augmentation(sample: AnnotatedImage, p: AugmentParams) -> AnnotatedImage:
    image = sample.image
    mask = sample.mask
    if any((p.rotation_deg, p.shift_y, p.shift_x, p.zoom)):
        mat, off = _inverse_affine(image.shape, p)
        image_f = ndimage.affine_transform(image.astype(np.float64), mat, off, order=1, mode="nearest")
        mask = ndimage.affine_transform(mask, mat, off, order=0, mode="constant", cval=0)
    else:
        image_f = image.astype(np.float64)
    if p.brightness:
        image_f = image_f * (1.0 + p.brightness)
    out = np.clip(np.rint(image_f), 0, 255).astype(np.uint8)
    return AnnotatedImage(out, mask.astype(np.uint8), dict(sample.meta))


def augment(sample: AnnotatedImage, policy: AugmentationPolicy, rng_seed) -> AnnotatedImage:
    """Random rotation, shift, zoom and brightness, deterministic in ``rng_seed``."""
    rng = np.random.default_rng(rng_seed)
    return apply_augmentation(sample, policy.sample(rng))


def augmentation_seed(global_seed: int, epoch: int, sample_index: int, copy_index: int) -> int:
    return int(np.random.SeedSequence([global_seed, epoch, sample_index, copy_index]).generate_state(1)[0])


def epoch_items(n_samples: int, policy: AugmentationPolicy, epoch: int, global_seed: int = 0, shuffle: bool = True):
    """``(sample_index, copy_index, seed)`` triples for one epoch.

    Copy 0 is the original sample; copies ``1..copies_per_sample`` are
    augmentations. Seeds depend only on the indices, never on worker layout.
    """
    items = [
        (i, k, augmentation_seed(global_seed, epoch, i, k))
        for i in range(n_samples)
        for k in range(policy.copies_per_sample + 1)
    ]
    if shuffle:
        order = np.random.default_rng(np.random.SeedSequence([global_seed, epoch, 2**31 - 1])).permutation(len(items))
        items = [items[j] for j in order]
    return items


def materialize(dataset: Sequence[AnnotatedImage], item, policy: AugmentationPolicy) -> AnnotatedImage:
    i, k, seed = item
    return dataset[i] if k == 0 else augment(dataset[i], policy, seed)


def epoch_stream(
    dataset: Sequence[AnnotatedImage],
    policy: AugmentationPolicy,
    epoch: int,
    batch_size: int,
    global_seed: int = 0,
    shuffle: bool = True,
) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
    """Yield ``(images, masks)`` uint8 batches of shape ``(B, H, W)``."""
    if batch_size <= 0:
        raise ContractError("batch_size must be positive")
    items = epoch_items(len(dataset), policy, epoch, global_seed, shuffle)
    for start in range(0, len(items), batch_size):
        chunk = [materialize(dataset, it, policy) for it in items[start : start + batch_size]]
        yield np.stack([s.image for s in chunk]), np.stack([s.mask for s in chunk])


# --------------------------------------------------------------------------
# mask and dataset IO

_PALETTE = [0, 0, 0, 220, 40, 40, 40, 120, 220] + [0] * (256 * 3 - 9)


def write_mask(mask: np.ndarray, path):
    mask = np.asarray(mask)
    check_labels(mask)
    img = Image.fromarray(mask.astype(np.uint8), mode="P")
    img.putpalette(_PALETTE)
    img.save(path)


def read_mask(path) -> np.ndarray:
    with Image.open(path) as img:
        if img.mode not in ("P", "L"):
            raise DataError(f"{path}: expected an indexed or 8-bit mask, got mode {img.mode}")
        mask = np.array(img)
    try:
        check_labels(mask)
    except DataError as e:
        raise DataError(f"{path}: {e}") from None
    return mask.astype(np.uint8)


def write_image(image: np.ndarray, path):
    Image.fromarray(np.asarray(image, dtype=np.uint8), mode="L").save(path)


def read_image(path) -> np.ndarray:
    with Image.open(path) as img:
        return np.array(img.convert("L"))


def stratified_split(views: Sequence[str], test_fraction: float, seed: int = 0) -> List[str]:
    """Assign ``train``/``test`` per item, keeping each view's test share close to ``test_fraction``."""
    rng = np.random.default_rng(seed)
    out = ["train"] * len(views)
    for view in sorted(set(views)):
        idx = [i for i, v in enumerate(views) if v == view]
        n_test = int(round(len(idx) * test_fraction))
        for i in rng.permutation(idx)[:n_test]:
            out[int(i)] = "test"
    return out


def write_dataset(samples: Sequence[AnnotatedImage], out_dir, stems: Optional[Sequence[str]] = None):
    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "masks"), exist_ok=True)
    stems = list(stems) if stems is not None else [f"{i:05d}" for i in range(len(samples))]
    rows = []
    for stem, s in zip(stems, samples):
        write_image(s.image, os.path.join(out_dir, "images", f"{stem}.png"))
        write_mask(s.mask, os.path.join(out_dir, "masks", f"{stem}.png"))
        row = {k: s.meta.get(k, "") for k in META_FIELDS}
        row["stem"] = stem
        rows.append(row)
    with open(os.path.join(out_dir, "meta.csv"), "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=META_FIELDS)
        w.writeheader()
        w.writerows(rows)


def read_dataset(data_dir, split: Optional[str] = None) -> List[AnnotatedImage]:
    meta_path = os.path.join(data_dir, "meta.csv")
    if not os.path.isfile(meta_path):
        raise DataError(f"no meta.csv in {data_dir}")
    with open(meta_path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for row in rows:
        if split is not None and row.get("split") != split:
            continue
        stem = row["stem"]
        img_path = os.path.join(data_dir, "images", f"{stem}.png")
        mask_path = os.path.join(data_dir, "masks", f"{stem}.png")
        if not (os.path.isfile(img_path) and os.path.isfile(mask_path)):
            raise DataError(f"missing image or mask for {stem!r} in {data_dir}")
        out.append(AnnotatedImage(read_image(img_path), read_mask(mask_path), dict(row)))
    return out


# --------------------------------------------------------------------------
# synthetic vessel phantoms


@dataclass
class _Branch:
    points: np.ndarray  # (n, 2) row/col in px
    radii: np.ndarray  # (n,) px
    labeled: bool


class _TreeGrower:
    def __init__(self, rng, size, mm_per_px):
        self.rng = rng
        self.size = size
        self.px = 1.0 / mm_per_px  # px per mm
        self.branches: List[_Branch] = []
        self.min_radius = 0.75  # px; keeps thin labeled ends pixel-connected

    def grow(self, start, heading, width_mm, length_px, labeled, generation, curl=0.06):
        rng = self.rng
        step = 0.35
        n = max(2, int(length_px / step))
        end_width = width_mm * rng.uniform(0.55, 0.75)
        widths = np.linspace(width_mm, end_width, n)
        pts = np.empty((n, 2))
        p = np.array(start, dtype=float)
        turn = rng.normal(0, curl)
        for k in range(n):
            pts[k] = p
            turn = 0.97 * turn + rng.normal(0, curl * 0.25)
            heading += turn * step * 0.1
            p = p + step * np.array([math.sin(heading), math.cos(heading)])
            if not (0 <= p[0] < self.size and 0 <= p[1] < self.size):
                # a branch that leaves the frame never re-enters it
                n = k + 1
                pts, widths = pts[:n], widths[:n]
                break
        radii = np.maximum(widths * self.px / 2.0, self.min_radius)
        self.branches.append(_Branch(pts, radii, labeled))
        if generation >= 4:
            return
        n_children = rng.integers(1, 4) if generation < 2 else rng.integers(0, 3)
        for _ in range(n_children):
            at = int(rng.uniform(0.2, 0.85) * (n - 1))
            parent_w = widths[at]
            child_w = parent_w * rng.uniform(0.45, 0.85)
            if child_w < 0.6:
                continue
            side = rng.choice([-1.0, 1.0])
            child_heading = heading_at(pts, at) + side * math.radians(rng.uniform(25, 65))
            child_len = length_px * rng.uniform(0.35, 0.7)
            child_labeled = labeled and child_w >= RELEVANCE_MM
            self.grow(pts[at], child_heading, child_w, child_len, child_labeled, generation + 1, curl)


def heading_at(pts, k):
    a = pts[max(k - 1, 0)]
    b = pts[min(k + 1, len(pts) - 1)]
    d = b - a
    return math.atan2(d[0], d[1])


def _render_tubes(shape, branches, flat=False):
    """Tube thickness profile in [0, 1] and the covered-pixel mask."""
    h, w = shape
    profile = np.zeros(shape)
    for br in branches:
        for (y, x), r in zip(br.points, br.radii):
            y0, y1 = max(int(y - r - 1), 0), min(int(y + r + 2), h)
            x0, x1 = max(int(x - r - 1), 0), min(int(x + r + 2), w)
            if y0 >= y1 or x0 >= x1:
                continue
            yy, xx = np.mgrid[y0:y1, x0:x1]
            d2 = (yy - y) ** 2 + (xx - x) ** 2
            inside = d2 < r * r
            val = np.where(inside, 1.0 if flat else np.sqrt(np.clip(1 - d2 / (r * r), 0, 1)) * 0.6 + 0.4, 0.0)
            np.maximum(profile[y0:y1, x0:x1], val, out=profile[y0:y1, x0:x1])
    return profile, profile > 0


def _catheter(rng, size, root, px_per_mm):
    edge = rng.integers(0, 4)
    t = rng.uniform(0.15, 0.85) * (size - 1)
    start = [(0.0, t), (size - 1.0, t), (t, 0.0), (t, size - 1.0)][edge]
    start = np.array(start)
    root = np.asarray(root, dtype=float)
    mid = (start + root) / 2 + rng.normal(0, size * 0.12, size=2)
    n = int(np.linalg.norm(root - start) / 0.35) + 2
    s = np.linspace(0, 1, n)[:, None]
    pts = (1 - s) ** 2 * start + 2 * (1 - s) * s * mid + s**2 * root
    radius = max(rng.uniform(1.7, 2.1) * px_per_mm / 2.0, 0.75)
    return _Branch(pts, np.full(n, radius), True)


def generate_phantom(seed: int, size: int = 512, mm_per_px: Optional[float] = None, view: Optional[str] = None) -> AnnotatedImage:
    """Render a synthetic angiogram with an exact three-class mask.

    A dark branching tree is grown from a root vessel 3-4 mm wide. Branches
    whose origin is at least 2 mm wide are labeled artery; thinner side
    branches are drawn with the same contrast but left as background. A
    constant-width catheter enters from a frame edge and ends at the tree
    root. Artery labels take precedence over catheter where they overlap.

    ``mm_per_px`` defaults to the 512-pixel convention scaled to ``size``,
    i.e. a fixed field of view.
    """
    if size % 32:
        raise ContractError(f"phantom size {size} is not divisible by 32")
    rng = np.random.default_rng(seed)
    if mm_per_px is None:
        mm_per_px = MM_PER_PX_512 * 512 / size
    px_per_mm = 1.0 / mm_per_px
    view = view or ("LCA" if rng.random() < 0.7 else "RCA")

    root = rng.uniform(0.3, 0.7, size=2) * size
    to_centre = math.atan2(size / 2 - root[0], size / 2 - root[1])
    heading = to_centre + rng.normal(0, 0.5)
    grower = _TreeGrower(rng, size, mm_per_px)
    root_w = rng.uniform(3.0, 4.0)
    span = size * rng.uniform(0.55, 0.8)
    if view == "LCA":
        # short main stem splitting into two large branches
        stem_len = span * rng.uniform(0.08, 0.15)
        grower.grow(root, heading, root_w, stem_len, True, 4)
        stem = grower.branches[-1]
        tip = stem.points[-1]
        end_w = 2 * stem.radii[-1] / px_per_mm
        for side in (-1, 1):
            w = max(end_w * rng.uniform(0.8, 0.95), RELEVANCE_MM * 1.1)
            grower.grow(tip, heading + side * math.radians(rng.uniform(20, 45)), w, span * rng.uniform(0.6, 0.9), True, 1)
    else:
        grower.grow(root, heading, root_w, span, True, 0, curl=0.12)

    arteries = [b for b in grower.branches if b.labeled]
    distractors = [b for b in grower.branches if not b.labeled]
    cath = _catheter(rng, size, root, px_per_mm)

    art_prof, art_mask = _render_tubes((size, size), arteries)
    dis_prof, _ = _render_tubes((size, size), distractors)
    cath_prof, cath_mask = _render_tubes((size, size), [cath], flat=True)

    # background: smooth illumination field plus soft anatomical clutter
    base = rng.uniform(165, 205)
    field_ = ndimage.gaussian_filter(rng.normal(0, 1, (size, size)), size / 8)
    field_ = field_ / (np.abs(field_).max() + 1e-9) * rng.uniform(10, 25)
    yy, xx = np.mgrid[0:size, 0:size]
    clutter = np.zeros((size, size))
    for _ in range(rng.integers(1, 4)):
        cy, cx = rng.uniform(0, size, 2)
        sy, sx = rng.uniform(0.08, 0.25, 2) * size
        clutter += rng.uniform(10, 30) * np.exp(-(((yy - cy) / sy) ** 2 + ((xx - cx) / sx) ** 2))
    vessel_c = rng.uniform(55, 80)
    cath_c = rng.uniform(85, 105)
    vessel = np.maximum(art_prof, dis_prof)
    img = base + field_ - clutter - vessel_c * vessel - cath_c * cath_prof
    img = ndimage.gaussian_filter(img, 0.5)
    img = img + rng.normal(0, rng.uniform(4, 8), img.shape)
    image = np.clip(np.rint(img), 0, 255).astype(np.uint8)

    mask = np.zeros((size, size), np.uint8)
    mask[cath_mask] = 2
    mask[art_mask] = 1
    meta = {"patient_id": f"phantom{seed}", "view": view, "annotator": "phantom", "split": ""}
    meta["root"] = f"{int(root[0])},{int(root[1])}"
    return AnnotatedImage(image, mask, meta)


def generate_dataset(count: int, size: int = 512, seed: int = 0, mm_per_px: Optional[float] = None, test_fraction: float = 0.0):
    samples = []
    for k in range(count):
        s = generate_phantom(int(np.random.SeedSequence([seed, k]).generate_state(1)[0]), size, mm_per_px)
        samples.append(s)
    splits = stratified_split([s.meta["view"] for s in samples], test_fraction, seed)
    for s, sp in zip(samples, splits):
        s.meta["split"] = sp
    return samples
