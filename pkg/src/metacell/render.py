"""Figure and bitmap emission.

All SVG output is deterministic: fixed hash salt, no embedded creation
date, so identical inputs produce identical bytes. Binary pixel arrays go
out as 1-bit portable bitmaps (P4).
"""

from __future__ import annotations

import numpy as np

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from .errors import ValidationError

plt.rcParams["svg.hashsalt"] = "metacell"

_SVG_META = {"Date": None}


def save_pbm(path, bitmap: np.ndarray) -> None:
    """1-bit portable bitmap, 1 = solid (black)."""
    bitmap = np.asarray(bitmap)
    if bitmap.ndim != 2:
        raise ValidationError("bitmap must be 2-d")
    h, w = bitmap.shape
    packed = np.packbits(bitmap.astype(bool), axis=1)
    with open(path, "wb") as fh:
        fh.write(f"P4\n{w} {h}\n".encode("ascii"))
        fh.write(packed.tobytes())


def load_pbm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.readline().strip()
        if magic != b"P4":
            raise ValidationError(f"not a raw portable bitmap: {magic!r}")
        line = fh.readline()
        while line.startswith(b"#"):
            line = fh.readline()
        w, h = (int(t) for t in line.split())
        data = fh.read()
    row_bytes = (w + 7) // 8
    packed = np.frombuffer(data, dtype=np.uint8, count=h * row_bytes).reshape(h, row_bytes)
    return np.unpackbits(packed, axis=1)[:, :w]


def _finish(fig, path):
    fig.savefig(path, format="svg", metadata=_SVG_META)
    plt.close(fig)


def property_scatter_svg(path, props: np.ndarray, color=None, xlabel="c11", ylabel="c22"):
    """2-d scatter of the property cloud, colored by a per-point value."""
    props = np.asarray(props, dtype=float)
    fig, ax = plt.subplots(figsize=(5, 4))
    style = {"c": color, "cmap": "viridis"} if color is not None else {}
    sc = ax.scatter(props[:, 0], props[:, 2], s=6, **style)
    if color is not None:
        fig.colorbar(sc, ax=ax)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    fig.tight_layout()
    _finish(fig, path)


def latent_scatter_svg(path, coords: np.ndarray, color=None):
    """Scatter of 2-d projected latent coordinates."""
    coords = np.asarray(coords, dtype=float)
    fig, ax = plt.subplots(figsize=(5, 4))
    style = {"c": color, "cmap": "viridis"} if color is not None else {}
    sc = ax.scatter(coords[:, 0], coords[:, 1], s=6, **style)
    if color is not None:
        fig.colorbar(sc, ax=ax)
    ax.set_xlabel("component 1")
    ax.set_ylabel("component 2")
    fig.tight_layout()
    _finish(fig, path)


def cell_strip_svg(path, cells, labels=None):
    """A row of binary cells, e.g. one traversal or one family."""
    cells = list(cells)
    if not cells:
        raise ValidationError("nothing to draw")
    n = len(cells)
    fig, axes = plt.subplots(1, n, figsize=(1.2 * n, 1.5))
    if n == 1:
        axes = [axes]
    for k, (ax, cell) in enumerate(zip(axes, cells)):
        ax.imshow(np.asarray(cell), cmap="gray_r", interpolation="nearest")
        ax.set_xticks([])
        ax.set_yticks([])
        if labels is not None:
            ax.set_title(str(labels[k]), fontsize=7)
    fig.tight_layout()
    _finish(fig, path)


def field_heatmap_svg(path, grid: np.ndarray, title: str = ""):
    """Per-element scalar on the design mesh."""
    grid = np.asarray(grid, dtype=float)
    fig, ax = plt.subplots(figsize=(5, 2.5))
    im = ax.imshow(grid, cmap="viridis", interpolation="nearest")
    fig.colorbar(im, ax=ax)
    if title:
        ax.set_title(title)
    ax.set_xticks([])
    ax.set_yticks([])
    fig.tight_layout()
    _finish(fig, path)


def bitmap_svg(path, bitmap: np.ndarray):
    """Full assembled structure as one image."""
    fig, ax = plt.subplots(figsize=(8, 8 * bitmap.shape[0] / bitmap.shape[1]))
    ax.imshow(np.asarray(bitmap), cmap="gray_r", interpolation="nearest")
    ax.set_xticks([])
    ax.set_yticks([])
    fig.tight_layout()
    _finish(fig, path)


def curve_svg(path, xs, series: dict, xlabel: str, ylabel: str, logy: bool = False):
    """Line plot of named series over a shared abscissa."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for name, ys in series.items():
        ax.plot(xs, ys, label=name)
    if logy:
        ax.set_yscale("log")
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.legend(fontsize=8)
    fig.tight_layout()
    _finish(fig, path)
