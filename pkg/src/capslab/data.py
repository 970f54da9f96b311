"""Dataset ingestion and synthesis.

IDX container parsing (big-endian, byte images), 40x40 canvas placement,
affine warping with bilinear interpolation, affine test-set synthesis, and
overlapping-digit composition. Every generator is a pure function of its
inputs and a seed: the same seed reproduces a byte-identical set.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801

VALID_HW = (28, 36, 40)


class IdxFormatError(ValueError):
    """Malformed IDX file: wrong magic, truncation, or count mismatch."""


class TransformRejected(ValueError):
    """Affine params would push the digit bounding box outside the canvas."""


@dataclass
class ImageSet:
    """Byte-valued images with integer labels (optionally a second label)."""
    images: np.ndarray              # uint8 [count, H, W]
    labels: np.ndarray              # int64 [count]
    labels2: np.ndarray | None = None

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.uint8)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 3:
            raise ValueError(f"images must be [count, H, W], got "
                             f"{self.images.shape}")
        if len(self.labels) != len(self.images):
            raise ValueError(f"count mismatch: {len(self.images)} images vs "
                             f"{len(self.labels)} labels")
        h, w = self.images.shape[1:]
        if h not in VALID_HW or w not in VALID_HW:
            raise ValueError(f"unsupported image size {h}x{w}; "
                             f"expected side in {VALID_HW}")
        if self.labels2 is not None:
            self.labels2 = np.asarray(self.labels2, dtype=np.int64)
            if len(self.labels2) != len(self.images):
                raise ValueError("count mismatch between images and labels2")

    def __len__(self):
        return len(self.images)


@dataclass
class AffineParams:
    rotation_deg: float = 0.0
    scale_x: float = 1.0
    scale_y: float = 1.0
    shear_x: float = 0.0
    translate_x_px: float = 0.0
    translate_y_px: float = 0.0


@dataclass
class AffineRanges:
    """Sampling ranges for the synthesized affine test set (config-exposed)."""
    rotation_deg: float = 20.0
    scale_min: float = 0.8
    scale_max: float = 1.2
    shear: float = 0.2
    translate_px: float = 5.0


# ---------------------------------------------------------------------------
# IDX container
# ---------------------------------------------------------------------------

def read_idx(path) -> np.ndarray:
    """Parse one IDX file: [count, H, W] uint8 for images, [count] for labels."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 4:
        raise IdxFormatError(f"{path}: truncated header")
    magic, = struct.unpack(">I", raw[:4])
    if magic == IDX_IMAGE_MAGIC:
        if len(raw) < 16:
            raise IdxFormatError(f"{path}: truncated image header")
        count, h, w = struct.unpack(">III", raw[4:16])
        expected = 16 + count * h * w
        if len(raw) != expected:
            raise IdxFormatError(f"{path}: expected {expected} bytes for "
                                 f"{count} images of {h}x{w}, got {len(raw)}")
        return np.frombuffer(raw, dtype=np.uint8, offset=16) \
                 .reshape(count, h, w).copy()
    if magic == IDX_LABEL_MAGIC:
        if len(raw) < 8:
            raise IdxFormatError(f"{path}: truncated label header")
        count, = struct.unpack(">I", raw[4:8])
        if len(raw) != 8 + count:
            raise IdxFormatError(f"{path}: expected {8 + count} bytes for "
                                 f"{count} labels, got {len(raw)}")
        return np.frombuffer(raw, dtype=np.uint8, offset=8).copy()
    raise IdxFormatError(f"{path}: unknown magic 0x{magic:08x}")


def read_idx_images(path) -> np.ndarray:
    arr = read_idx(path)
    if arr.ndim != 3:
        raise IdxFormatError(f"{path}: wrong magic for image file "
                             f"(found a label file)")
    return arr


def read_idx_labels(path) -> np.ndarray:
    arr = read_idx(path)
    if arr.ndim != 1:
        raise IdxFormatError(f"{path}: wrong magic for label file "
                             f"(found an image file)")
    return arr


def write_idx(path, array: np.ndarray) -> None:
    """Inverse of read_idx: 3-d arrays as image files, 1-d as label files."""
    array = np.ascontiguousarray(array, dtype=np.uint8)
    with open(path, "wb") as f:
        if array.ndim == 3:
            count, h, w = array.shape
            f.write(struct.pack(">IIII", IDX_IMAGE_MAGIC, count, h, w))
        elif array.ndim == 1:
            f.write(struct.pack(">II", IDX_LABEL_MAGIC, len(array)))
        else:
            raise IdxFormatError(f"cannot encode array with {array.ndim} axes "
                                 f"as IDX")
        f.write(array.tobytes())


def load_image_set(images_path, labels_path, labels2_path=None) -> ImageSet:
    images = read_idx_images(images_path)
    labels = read_idx_labels(labels_path)
    if len(images) != len(labels):
        raise IdxFormatError(f"count mismatch: {images_path} holds "
                             f"{len(images)} images but {labels_path} holds "
                             f"{len(labels)} labels")
    labels2 = None
    if labels2_path is not None:
        labels2 = read_idx_labels(labels2_path)
        if len(labels2) != len(images):
            raise IdxFormatError(f"count mismatch: {labels2_path} holds "
                                 f"{len(labels2)} second labels for "
                                 f"{len(images)} images")
    return ImageSet(images, labels, labels2)


def save_image_set(s: ImageSet, images_path, labels_path,
                   labels2_path=None) -> None:
    write_idx(images_path, s.images)
    write_idx(labels_path, s.labels.astype(np.uint8))
    if labels2_path is not None:
        if s.labels2 is None:
            raise ValueError("image set has no second labels to write")
        write_idx(labels2_path, s.labels2.astype(np.uint8))


# ---------------------------------------------------------------------------
# canvas placement
# ---------------------------------------------------------------------------

def place_at(image: np.ndarray, canvas: int, oy: int, ox: int) -> np.ndarray:
    """Copy a digit intact onto a zero canvas at offset (oy, ox)."""
    h, w = image.shape
    if oy < 0 or ox < 0 or oy + h > canvas or ox + w > canvas:
        raise ValueError(f"offset ({oy},{ox}) puts {h}x{w} digit outside "
                         f"{canvas}x{canvas} canvas")
    out = np.zeros((canvas, canvas), dtype=np.uint8)
    out[oy:oy + h, ox:ox + w] = image
    return out


def place_on_canvas(s: ImageSet, canvas: int = 40, seed: int = 0) -> ImageSet:
    """Place each digit at a uniformly random in-bounds offset on a black canvas."""
    h, w = s.images.shape[1:]
    if canvas < h or canvas < w:
        raise ValueError(f"canvas {canvas} smaller than source {h}x{w}")
    rng = np.random.default_rng(seed)
    offsets = rng.integers(0, canvas - h + 1, size=(len(s), 2))
    out = np.zeros((len(s), canvas, canvas), dtype=np.uint8)
    for i, (oy, ox) in enumerate(offsets):
        out[i, oy:oy + h, ox:ox + w] = s.images[i]
    return ImageSet(out, s.labels.copy(),
                    None if s.labels2 is None else s.labels2.copy())


# ---------------------------------------------------------------------------
# affine warping
# ---------------------------------------------------------------------------

def affine_matrix(params: AffineParams) -> np.ndarray:
    """Forward 2x2 linear map: rotation . scale . shear, in (x, y) coords."""
    th = np.deg2rad(params.rotation_deg)
    rot = np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
    sc = np.array([[params.scale_x, 0.0], [0.0, params.scale_y]])
    sh = np.array([[1.0, params.shear_x], [0.0, 1.0]])
    return rot @ sc @ sh


def _is_identity(params: AffineParams) -> bool:
    return (params.rotation_deg == 0.0 and params.scale_x == 1.0
            and params.scale_y == 1.0 and params.shear_x == 0.0
            and params.translate_x_px == 0.0 and params.translate_y_px == 0.0)


def warp_bilinear(image: np.ndarray, matrix: np.ndarray, translate,
                  out_hw=None) -> np.ndarray:
    """Apply p -> matrix.(p - c) + c + translate about the image center.

    Inverse-maps every output pixel and samples the float input bilinearly;
    out-of-bounds samples are zero. Coordinates are (x, y) = (col, row).
    """
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape
    oh, ow = out_hw if out_hw is not None else (h, w)
    inv = np.linalg.inv(matrix)
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    ocx, ocy = (ow - 1) / 2.0, (oh - 1) / 2.0
    tx, ty = translate
    xs, ys = np.meshgrid(np.arange(ow, dtype=np.float64),
                         np.arange(oh, dtype=np.float64))
    rel = np.stack([xs - ocx - tx, ys - ocy - ty])
    src_x = inv[0, 0] * rel[0] + inv[0, 1] * rel[1] + cx
    src_y = inv[1, 0] * rel[0] + inv[1, 1] * rel[1] + cy

    x0 = np.floor(src_x).astype(np.int64)
    y0 = np.floor(src_y).astype(np.int64)
    fx = src_x - x0
    fy = src_y - y0

    def sample(yy, xx):
        inside = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
        vals = np.zeros_like(src_x)
        vals[inside] = img[yy[inside], xx[inside]]
        return vals

    v00 = sample(y0, x0)
    v01 = sample(y0, x0 + 1)
    v10 = sample(y0 + 1, x0)
    v11 = sample(y0 + 1, x0 + 1)
    top = v00 * (1.0 - fx) + v01 * fx
    bot = v10 * (1.0 - fx) + v11 * fx
    return top * (1.0 - fy) + bot * fy


def _nonzero_bbox(image) -> tuple | None:
    ys, xs = np.nonzero(image)
    if len(ys) == 0:
        return None
    return xs.min(), ys.min(), xs.max(), ys.max()


def affine_transform(image: np.ndarray, params: AffineParams) -> np.ndarray:
    """Warp a byte image; raises TransformRejected if the digit would clip.

    The digit's nonzero bounding box is mapped through the forward transform;
    all four corners must land inside the canvas (affine maps preserve
    convexity, so corner containment bounds the whole digit).
    """
    image = np.asarray(image, dtype=np.uint8)
    if _is_identity(params):
        return image.copy()
    h, w = image.shape
    A = affine_matrix(params)
    bbox = _nonzero_bbox(image)
    if bbox is not None:
        # dilate by the 1-px bilinear support so no mass can bleed onto the
        # canvas border; affine maps preserve convexity, so corner
        # containment bounds the whole transformed digit
        x0, y0, x1, y1 = bbox
        cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
        corners = np.array([[x0 - 1, y0 - 1], [x1 + 1, y0 - 1],
                            [x0 - 1, y1 + 1], [x1 + 1, y1 + 1]],
                           dtype=np.float64)
        mapped = (A @ (corners - [cx, cy]).T).T + [cx, cy] \
            + [params.translate_x_px, params.translate_y_px]
        if (mapped[:, 0].min() < 0.5 or mapped[:, 0].max() > w - 1.5
                or mapped[:, 1].min() < 0.5 or mapped[:, 1].max() > h - 1.5):
            raise TransformRejected(
                f"digit bounding box maps outside the {h}x{w} canvas")
    out = warp_bilinear(image, A,
                        (params.translate_x_px, params.translate_y_px))
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def sample_affine_params(rng: np.random.Generator,
                         ranges: AffineRanges) -> AffineParams:
    return AffineParams(
        rotation_deg=rng.uniform(-ranges.rotation_deg, ranges.rotation_deg),
        scale_x=rng.uniform(ranges.scale_min, ranges.scale_max),
        scale_y=rng.uniform(ranges.scale_min, ranges.scale_max),
        shear_x=rng.uniform(-ranges.shear, ranges.shear),
        translate_x_px=rng.uniform(-ranges.translate_px, ranges.translate_px),
        translate_y_px=rng.uniform(-ranges.translate_px, ranges.translate_px),
    )


def generate_affnist_like(s: ImageSet, seed: int = 0,
                          ranges: AffineRanges | None = None,
                          max_tries: int = 200) -> ImageSet:
    """One sampled affine transform per placed image; resamples on rejection."""
    if ranges is None:
        ranges = AffineRanges()
    rng = np.random.default_rng(seed)
    out = np.empty_like(s.images)
    for i in range(len(s)):
        for _ in range(max_tries):
            params = sample_affine_params(rng, ranges)
            try:
                out[i] = affine_transform(s.images[i], params)
                break
            except TransformRejected:
                continue
        else:
            raise RuntimeError(f"image {i}: no in-canvas transform found in "
                               f"{max_tries} tries; ranges too aggressive")
    return ImageSet(out, s.labels.copy(),
                    None if s.labels2 is None else s.labels2.copy())


# ---------------------------------------------------------------------------
# overlapping digits
# ---------------------------------------------------------------------------

MULTI_CANVAS = 36
MULTI_SHIFT = 4


def compose_digit_pair(img_a: np.ndarray, shift_a, img_b: np.ndarray,
                       shift_b, canvas: int = MULTI_CANVAS) -> np.ndarray:
    """Overlay two digits, each shifted from center, merged by per-pixel max."""
    h, w = img_a.shape
    base = (canvas - h) // 2
    a = place_at(img_a, canvas, base + shift_a[0], base + shift_a[1])
    b = place_at(img_b, canvas, base + shift_b[0], base + shift_b[1])
    return np.maximum(a, b)


def generate_multimnist(s: ImageSet, seed: int = 0,
                        count: int | None = None) -> ImageSet:
    """Overlapping-digit set: two digits of different classes per image.

    Each source digit is shifted independently by up to +/-4 px on a 36x36
    canvas and the pair is merged by per-pixel max. Both labels are kept.
    """
    if len(np.unique(s.labels)) < 2:
        raise ValueError("need at least two distinct classes to overlap")
    if count is None:
        count = len(s)
    rng = np.random.default_rng(seed)
    images = np.empty((count, MULTI_CANVAS, MULTI_CANVAS), dtype=np.uint8)
    labels = np.empty(count, dtype=np.int64)
    labels2 = np.empty(count, dtype=np.int64)
    n = len(s)
    for k in range(count):
        i = int(rng.integers(0, n))
        j = int(rng.integers(0, n))
        while s.labels[j] == s.labels[i]:
            j = int(rng.integers(0, n))
        shift_a = tuple(rng.integers(-MULTI_SHIFT, MULTI_SHIFT + 1, size=2))
        shift_b = tuple(rng.integers(-MULTI_SHIFT, MULTI_SHIFT + 1, size=2))
        images[k] = compose_digit_pair(s.images[i], shift_a,
                                       s.images[j], shift_b)
        labels[k] = s.labels[i]
        labels2[k] = s.labels[j]
    return ImageSet(images, labels, labels2)
