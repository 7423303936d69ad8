"""Attention-distribution overlays: per-layer text/image bars plus heatmaps."""

from __future__ import annotations

import csv
import os

import numpy as np

from . import scenegen
from .mmdit import ModelConfig, attention_modal_split, image_query_index


def overlay_rows(captures: dict, point, config: ModelConfig = ModelConfig()) -> list:
    """``(layer, text_mass, image_mass)`` for the query token under ``point``."""
    q = image_query_index(point[0], point[1], config)
    return [(layer, *attention_modal_split(captures[layer], q)) for layer in sorted(captures)]


def query_heatmap(attn, query: int, config: ModelConfig = ModelConfig()) -> np.ndarray:
    """Head-averaged attention of ``query`` over the own image keys as a grid."""
    a = np.asarray(attn.detach().double() if hasattr(attn, "detach") else attn, np.float64)
    if a.ndim == 4:
        a = a[0]
    keys = a[:, query, config.text_len : config.text_len + config.n_image_tokens].mean(0)
    return keys.reshape(config.grid, config.grid)


def render_overlay(captures: dict, point, out_dir, layers=None, vital=(), image=None,
                   config: ModelConfig = ModelConfig(), tag: str = "") -> tuple[str, str]:
    """Write ``attn_<tag>r<row>_c<col>.png`` and the matching CSV; returns both paths."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    layers = sorted(captures) if layers is None else list(layers)
    missing = [l for l in layers if l not in captures]
    if missing:
        raise KeyError(f"no attention captured for layer(s) {missing}")
    sub = {l: captures[l] for l in layers}
    rows = overlay_rows(sub, point, config)
    os.makedirs(out_dir, exist_ok=True)
    stem = f"attn_{tag}r{point[0]:02d}_c{point[1]:02d}"
    csv_path = os.path.join(out_dir, stem + ".csv")
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["layer", "text_mass", "image_mass", "vital"])
        for layer, t, im in rows:
            w.writerow([layer, repr(t), repr(im), int(layer in set(vital))])

    q = image_query_index(point[0], point[1], config)
    n = len(layers)
    fig = plt.figure(figsize=(max(6, 1.1 * n), 4.2), dpi=80)
    ax = fig.add_axes([0.06, 0.55, 0.9, 0.38])
    xs = np.arange(n)
    text = np.array([r[1] for r in rows])
    colors = ["tab:red" if l in set(vital) else "tab:gray" for l in layers]
    ax.bar(xs, text, color=colors, label="text")
    ax.bar(xs, 1 - text, bottom=text, color="tab:blue", alpha=0.35, label="image")
    ax.set_xticks(xs, [str(l) for l in layers])
    ax.set_ylim(0, 1)
    ax.set_ylabel("attention mass")
    ax.set_title(f"query pixel {tuple(point)} (red = vital layer text mass)")
    for j, layer in enumerate(layers):
        hm = query_heatmap(sub[layer], q, config)
        lo, hi = hm.min(), hm.max()
        hm = (hm - lo) / (hi - lo) if hi > lo else np.zeros_like(hm)
        hax = fig.add_axes([0.06 + 0.9 * j / n, 0.08, 0.9 / n * 0.92, 0.36])
        hax.imshow(hm, cmap="magma", vmin=0, vmax=1, interpolation="nearest")
        if image is not None:
            hax.imshow(scenegen.to_uint8(image), alpha=0.3, extent=(-0.5, config.grid - 0.5, config.grid - 0.5, -0.5))
        hax.plot(point[1] / config.patch - 0.5, point[0] / config.patch - 0.5, "c+", ms=8)
        hax.set_xticks([])
        hax.set_yticks([])
    png_path = os.path.join(out_dir, stem + ".png")
    fig.savefig(png_path, metadata={"Software": None})
    plt.close(fig)
    return png_path, csv_path


def group_means(rows, vital) -> dict:
    vital = set(vital)
    out = {}
    for name, sel in (("vital", [r for r in rows if r[0] in vital]), ("nonvital", [r for r in rows if r[0] not in vital])):
        if sel:
            out[name] = (float(np.mean([r[1] for r in sel])), float(np.mean([r[2] for r in sel])))
    return out
