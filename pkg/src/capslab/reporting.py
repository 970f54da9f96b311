"""Report writers: RFC-4180 CSV, binary PGM (P5) image grids, and matplotlib
figures rendered alongside the delimited output.

CSV and PGM outputs are byte-reproducible from (config, seed); the PNG
figures are a convenience rendering of the same data.
"""

from __future__ import annotations

import csv
import os

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .training import METRICS_COLUMNS, MetricsRow  # noqa: E402


def fmt(value) -> str:
    """Canonical cell rendering: deterministic for identical doubles."""
    if isinstance(value, float):
        return f"{value:.10g}"
    return str(value)


def write_csv(path, header, rows) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        for row in rows:
            writer.writerow([fmt(v) for v in row])


def read_csv(path):
    with open(path, "r", newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        rows = list(reader)
    return rows[0], rows[1:]


def write_metrics_csv(path, metrics: list) -> None:
    rows = []
    for m in metrics:
        rows.append([fmt(float(m.epoch)), m.split, fmt(m.accuracy),
                     fmt(m.margin_loss), fmt(m.recon_loss),
                     fmt(m.target_agreement), fmt(m.nontarget_agreement),
                     f"{m.wall_seconds:.3f}"])
    write_csv(path, list(METRICS_COLUMNS), rows)


def read_metrics_csv(path) -> list:
    _, rows = read_csv(path)
    return [MetricsRow(float(r[0]), r[1], *(float(x) for x in r[2:]))
            for r in rows]


# ---------------------------------------------------------------------------
# portable graymap
# ---------------------------------------------------------------------------

def write_pgm(path, image: np.ndarray) -> None:
    """Binary PGM (P5), maxval 255."""
    image = np.ascontiguousarray(image, dtype=np.uint8)
    if image.ndim != 2:
        raise ValueError(f"PGM needs a 2-d image, got shape {image.shape}")
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    h, w = image.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(image.tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as f:
        raw = f.read()
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h = (int(x) for x in parts[1].split())
    if parts[2] != b"255":
        raise ValueError(f"{path}: unsupported maxval {parts[2]!r}")
    return np.frombuffer(parts[3], dtype=np.uint8,
                         count=w * h).reshape(h, w).copy()


def tile_grid(images: np.ndarray, pad: int = 1, pad_value: int = 64) -> np.ndarray:
    """Tile [rows, cols, h, w] byte images into one image with separators."""
    r, c, h, w = images.shape
    out = np.full((r * h + (r + 1) * pad, c * w + (c + 1) * pad),
                  pad_value, dtype=np.uint8)
    for i in range(r):
        for j in range(c):
            y = pad + i * (h + pad)
            x = pad + j * (w + pad)
            out[y:y + h, x:x + w] = images[i, j]
    return out


# ---------------------------------------------------------------------------
# figures
# ---------------------------------------------------------------------------

def _fig_path(out_dir, name):
    path = os.path.join(out_dir, "figures", name)
    os.makedirs(os.path.dirname(path), exist_ok=True)
    return path


def save_training_curves(out_dir, metrics: list, name="training_curves.png"):
    fig, axes = plt.subplots(1, 3, figsize=(12, 3.5))
    for split, style in (("train", "-"), ("test", "--")):
        rows = [m for m in metrics if m.split == split]
        if not rows:
            continue
        ep = [m.epoch for m in rows]
        axes[0].plot(ep, [m.accuracy for m in rows], style, label=split)
        axes[1].plot(ep, [m.margin_loss for m in rows], style, label=split)
        axes[2].plot(ep, [m.recon_loss for m in rows], style, label=split)
    for ax, title in zip(axes, ("accuracy", "margin loss",
                                "reconstruction loss")):
        ax.set_xlabel("epoch")
        ax.set_title(title)
        ax.legend()
    fig.tight_layout()
    fig.savefig(_fig_path(out_dir, name), dpi=120)
    plt.close(fig)


def save_agreement_figure(out_dir, rows, name="agreement.png"):
    """rows: (epoch, regime, split, target, nontarget) tuples."""
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.5))
    regimes = sorted({r[1] for r in rows})
    for regime in regimes:
        for split, style in (("train", "-"), ("test", "--")):
            sel = [r for r in rows if r[1] == regime and r[2] == split]
            if not sel:
                continue
            ep = [r[0] for r in sel]
            axes[0].plot(ep, [r[3] for r in sel], style,
                         label=f"{regime}/{split}")
            axes[1].plot(ep, [r[4] for r in sel], style,
                         label=f"{regime}/{split}")
    axes[0].set_title("target-class agreement")
    axes[1].set_title("non-target agreement")
    for ax in axes:
        ax.set_xlabel("epoch")
        ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(_fig_path(out_dir, name), dpi=120)
    plt.close(fig)


def save_gradcheck_figure(out_dir, cosines, ratios, name="gradcheck.png"):
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.5))
    axes[0].hist(cosines, bins=40)
    axes[0].set_title("unrolled vs rolled gradient cosine")
    axes[1].hist(ratios, bins=40)
    axes[1].set_title("gradient magnitude ratio")
    fig.tight_layout()
    fig.savefig(_fig_path(out_dir, name), dpi=120)
    plt.close(fig)


def save_bench_figure(out_dir, cells, name="bench_affine.png"):
    """cells: {cell_name: {split: (mean, var)}} accuracy summary."""
    names = sorted(cells)
    splits = ("clean", "affine")
    width = 0.38
    xs = np.arange(len(names))
    fig, ax = plt.subplots(figsize=(8, 4))
    for k, split in enumerate(splits):
        means = [cells[n].get(split, (np.nan, 0.0))[0] for n in names]
        errs = [np.sqrt(cells[n].get(split, (np.nan, 0.0))[1]) for n in names]
        ax.bar(xs + (k - 0.5) * width, means, width, yerr=errs, capsize=3,
               label=f"{split} test")
    ax.set_xticks(xs)
    ax.set_xticklabels(names, fontsize=8)
    ax.set_ylabel("accuracy")
    ax.set_ylim(0, 1.05)
    ax.legend()
    ax.set_title("affine robustness benchmark (synthesized affine test set)")
    fig.tight_layout()
    fig.savefig(_fig_path(out_dir, name), dpi=120)
    plt.close(fig)


def save_image_montage(out_dir, images: np.ndarray, title,
                       name="samples.png", cols: int = 8):
    count = min(len(images), cols * cols)
    rows = (count + cols - 1) // cols
    fig, axes = plt.subplots(rows, cols, figsize=(cols, rows))
    axes = np.atleast_2d(axes)
    for k in range(rows * cols):
        ax = axes[k // cols, k % cols]
        ax.axis("off")
        if k < count:
            ax.imshow(images[k], cmap="gray", vmin=0, vmax=255)
    fig.suptitle(title)
    fig.savefig(_fig_path(out_dir, name), dpi=120)
    plt.close(fig)


def save_perturb_figure(out_dir, grid: np.ndarray, name="perturb_grid.png"):
    fig, ax = plt.subplots(figsize=(10, 6))
    ax.imshow(grid, cmap="gray", vmin=0, vmax=255)
    ax.set_title("decoder sweep: rows = capsule dimensions, "
                 "columns = perturbation steps")
    ax.axis("off")
    fig.tight_layout()
    fig.savefig(_fig_path(out_dir, name), dpi=120)
    plt.close(fig)
