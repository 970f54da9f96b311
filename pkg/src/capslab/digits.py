"""Deterministic synthetic digit source.

Renders the ten digit classes from fixed glyph bitmaps with per-sample
variation (rotation, scale, shear, stroke thickness, intensity, pixel noise)
so a classifier has something non-trivial to learn without any dataset
download. Output matches the byte-image container the rest of the pipeline
consumes. The intrinsic per-sample variation is kept well inside the affine
ranges used for the robustness test set, so those transforms remain novel.
"""

from __future__ import annotations

import numpy as np

from .data import ImageSet, warp_bilinear

_GLYPHS_RAW = {
    0: [".###.", "#...#", "#...#", "#...#", "#...#", "#...#", ".###."],
    1: ["..#..", ".##..", "..#..", "..#..", "..#..", "..#..", ".###."],
    2: [".###.", "#...#", "....#", "...#.", "..#..", ".#...", "#####"],
    3: [".###.", "#...#", "....#", "..##.", "....#", "#...#", ".###."],
    4: ["...#.", "..##.", ".#.#.", "#..#.", "#####", "...#.", "...#."],
    5: ["#####", "#....", "####.", "....#", "....#", "#...#", ".###."],
    6: [".###.", "#....", "#....", "####.", "#...#", "#...#", ".###."],
    7: ["#####", "....#", "...#.", "...#.", "..#..", "..#..", "..#.."],
    8: [".###.", "#...#", "#...#", ".###.", "#...#", "#...#", ".###."],
    9: [".###.", "#...#", "#...#", ".####", "....#", "....#", ".###."],
}

GLYPHS = {
    d: np.array([[1.0 if ch == "#" else 0.0 for ch in row] for row in rows])
    for d, rows in _GLYPHS_RAW.items()
}

# per-sample style jitter; deliberately narrower than the affine test ranges
STYLE_ROTATION_DEG = 9.0
STYLE_SCALE = (0.88, 1.12)
STYLE_SHEAR = 0.08
STYLE_SHIFT_PX = 1.5
STYLE_THRESHOLD = (0.18, 0.38)
STYLE_GAIN = 2.6
STYLE_INTENSITY = (0.78, 1.0)
STYLE_NOISE_STD = 6.0
TARGET_DIGIT_H = 19.0


def render_digit(digit: int, rng: np.random.Generator,
                 hw: int = 28) -> np.ndarray:
    """One byte image of the given class with random style jitter."""
    glyph = GLYPHS[int(digit)]
    gh, gw = glyph.shape
    sy = TARGET_DIGIT_H / gh * rng.uniform(*STYLE_SCALE)
    sx = TARGET_DIGIT_H / gh * rng.uniform(*STYLE_SCALE)
    th = np.deg2rad(rng.uniform(-STYLE_ROTATION_DEG, STYLE_ROTATION_DEG))
    shear = rng.uniform(-STYLE_SHEAR, STYLE_SHEAR)
    rot = np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
    mat = rot @ np.array([[sx, 0.0], [0.0, sy]]) @ np.array([[1.0, shear],
                                                             [0.0, 1.0]])
    shift = rng.uniform(-STYLE_SHIFT_PX, STYLE_SHIFT_PX, size=2)
    field = warp_bilinear(glyph, mat, (shift[0], shift[1]), out_hw=(hw, hw))
    # soft threshold shapes the stroke; the cut level sets its thickness
    cut = rng.uniform(*STYLE_THRESHOLD)
    field = np.clip(STYLE_GAIN * (field - cut), 0.0, 1.0)
    field *= rng.uniform(*STYLE_INTENSITY)
    # noise only on the stroke: the background stays exactly zero so the
    # digit bounding box (and canvas placement accounting) is meaningful
    noise = rng.normal(0.0, STYLE_NOISE_STD, size=field.shape)
    field = field * 255.0 + noise * (field > 0.0)
    return np.clip(np.rint(field), 0, 255).astype(np.uint8)


def generate_digit_set(count: int, seed: int = 0, hw: int = 28) -> ImageSet:
    """Class-balanced digit set, byte-identical for a fixed seed."""
    rng = np.random.default_rng(seed)
    labels = np.arange(count, dtype=np.int64) % 10
    rng.shuffle(labels)
    images = np.empty((count, hw, hw), dtype=np.uint8)
    for i in range(count):
        images[i] = render_digit(int(labels[i]), rng, hw)
    return ImageSet(images, labels)
