"""Vital-layer detection by single-layer residual bypass.

For a probe set of prompts and seeds, a reference image set is generated
with the full model and one more set per layer with that layer bypassed.
A layer's vitality is one minus the mean perceptual similarity between the
two sets; the vital layers are those scoring highest.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch

from . import scenegen
from .flow import FlowSchedule, GuidanceConfig, sample, seed_latent
from .mmdit import LayerHooks, MMDiT

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# probe set


@dataclass
class ProbeSet:
    specs: list
    prompts: np.ndarray
    seeds: list
    master_seed: int

    def __len__(self) -> int:
        return len(self.seeds)


def _covers_vocabulary(specs) -> bool:
    bgs = {s.background for s in specs}
    objs = [o for s in specs for o in s.objects]
    return (
        bgs == set(scenegen.COLORS)
        and {o.shape for o in objs} == set(scenegen.SHAPES)
        and {o.color for o in objs} == set(scenegen.COLORS)
        and {o.size for o in objs} == set(scenegen.SIZES)
    )


def gen_probe_set(master_seed: int, k: int = 64) -> ProbeSet:
    """``k`` distinct non-empty scenes and ``k`` noise seeds.

    When ``k`` is large enough to cover every background, shape, color and
    size, draws are repeated until they do.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    rng = np.random.default_rng(master_seed)
    need_cover = k >= len(scenegen.COLORS) + 1
    for _ in range(1000):
        specs, seen = [], set()
        while len(specs) < k:
            s = scenegen.random_scene(rng, n_objects=int(rng.integers(1, scenegen.MAX_OBJECTS + 1)))
            if s not in seen:
                seen.add(s)
                specs.append(s)
        if not need_cover or _covers_vocabulary(specs):
            break
    seeds = [int(x) for x in rng.integers(0, 2**31 - 1, size=k)]
    return ProbeSet(specs, np.stack([scenegen.prompt_of(s) for s in specs]), seeds, master_seed)


# ---------------------------------------------------------------------------
# perceptual metrics


def _cosine(fa: np.ndarray, fb: np.ndarray) -> np.ndarray:
    na = np.linalg.norm(fa, axis=1)
    nb = np.linalg.norm(fb, axis=1)
    dot = (fa * fb).sum(1)
    out = np.where((na > 0) & (nb > 0), dot / np.maximum(na * nb, 1e-300), 0.0)
    both_zero = (na == 0) & (nb == 0)
    out[both_zero] = 1.0
    # identical inputs must score exactly 1
    out[np.all(fa == fb, axis=1)] = 1.0
    return np.clip(out, -1.0, 1.0)


def pooled_features(images: np.ndarray, scales=(1, 2, 4), tiles: int = 4) -> np.ndarray:
    """Per-tile channel mean and std at several downsampling factors."""
    x = (np.asarray(images, np.float64) + 1.0) / 2.0
    n, h, w, c = x.shape
    feats = []
    for f in scales:
        xs = x.reshape(n, h // f, f, w // f, f, c).mean((2, 4))
        t = xs.shape[1] // tiles
        blocks = xs.reshape(n, tiles, t, tiles, t, c)
        feats.append(blocks.mean((2, 4)).reshape(n, -1))
        feats.append(blocks.std((2, 4)).reshape(n, -1))
    return np.concatenate(feats, axis=1)


class PerceptualMetric:
    """Similarity ``d(a, b)`` in [-1, 1]; higher means more alike."""

    VARIANTS = ("pooled-feature-cosine", "pixel-cosine")

    def __init__(self, name: str = "pooled-feature-cosine"):
        if name not in self.VARIANTS:
            raise ValueError(f"unknown metric {name!r}; expected one of {self.VARIANTS}")
        self.name = name

    def features(self, images) -> np.ndarray:
        images = np.asarray(images)
        if self.name == "pixel-cosine":
            return images.reshape(len(images), -1).astype(np.float64)
        return pooled_features(images)

    def __call__(self, a, b) -> np.ndarray:
        a, b = np.asarray(a), np.asarray(b)
        single = a.ndim == 3
        if single:
            a, b = a[None], b[None]
        out = _cosine(self.features(a), self.features(b))
        return out[0] if single else out

    def __repr__(self):
        return f"PerceptualMetric({self.name!r})"


# ---------------------------------------------------------------------------
# report


@dataclass
class VitalityReport:
    scores: list
    rule: dict
    vital: list
    metric: str = "pooled-feature-cosine"
    tau: Optional[float] = None
    galleries: dict = field(default_factory=dict)
    errors: dict = field(default_factory=dict)
    settings: dict = field(default_factory=dict)

    @property
    def n_layers(self) -> int:
        return len(self.scores)

    def to_dict(self) -> dict:
        return {
            "scores": self.scores, "rule": self.rule, "vital": self.vital, "metric": self.metric,
            "tau": self.tau, "galleries": self.galleries, "errors": {str(k): v for k, v in self.errors.items()},
            "settings": self.settings,
        }

    def save(self, out_dir) -> None:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "report.json"), "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
        with open(os.path.join(out_dir, "scores.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["layer", "score", "similarity", "vital"])
            for l, s in enumerate(self.scores):
                w.writerow([l, repr(s), repr(1.0 - s) if s is not None else "", int(l in self.vital)])

    @classmethod
    def load(cls, path) -> "VitalityReport":
        if os.path.isdir(path):
            path = os.path.join(path, "report.json")
        with open(path) as fh:
            d = json.load(fh)
        d["errors"] = {int(k): v for k, v in d.get("errors", {}).items()}
        return cls(**d)


def select_vital(scores: Sequence[float], rule: str = "top_k", tau: float | None = None, m: int | None = None) -> list:
    """Vital layer indices (ascending) under a threshold or top-k rule.

    Top-k ranks by score, breaking ties toward the lower layer index. Layers
    whose scan failed (score ``None``) are never selected.
    """
    L = len(scores)
    valid = [(l, s) for l, s in enumerate(scores) if s is not None]
    if rule == "threshold":
        if tau is None:
            raise ValueError("threshold rule needs tau")
        return [l for l, s in valid if s >= tau]
    if rule == "top_k":
        if m is None:
            m = math.ceil(L / 4)
        if not 0 <= m <= L:
            raise ValueError(f"cannot select {m} of {L} layers")
        ranked = sorted(valid, key=lambda ls: (-ls[1], ls[0]))
        return sorted(l for l, _ in ranked[:m])
    raise ValueError(f"unknown selection rule {rule!r}")


# ---------------------------------------------------------------------------
# scan


def _generate(model, probe, schedule, guidance, hooks, batch):
    out = []
    for i in range(0, len(probe), batch):
        z = seed_latent(probe.seeds[i : i + batch])
        tok = torch.from_numpy(probe.prompts[i : i + batch])
        out.append(sample(model, z, tok, schedule, guidance, hooks).numpy())
    return np.concatenate(out)


def image_grid(images: np.ndarray, cols: int = 8) -> np.ndarray:
    n, h, w, c = images.shape
    rows = math.ceil(n / cols)
    grid = np.ones((rows * (h + 1) + 1, cols * (w + 1) + 1, c), np.float32)
    for i, img in enumerate(images):
        r, q = divmod(i, cols)
        grid[1 + r * (h + 1) : 1 + r * (h + 1) + h, 1 + q * (w + 1) : 1 + q * (w + 1) + w] = img
    return grid


def vitality_scan(
    model: MMDiT,
    probe: ProbeSet,
    metric: PerceptualMetric | None = None,
    schedule: FlowSchedule | None = None,
    guidance: GuidanceConfig | None = None,
    rule: str = "top_k",
    tau: float | None = None,
    m: int | None = None,
    gallery_dir: str | None = None,
    gallery_size: int = 16,
    batch: int = 64,
) -> VitalityReport:
    metric = metric or PerceptualMetric()
    schedule = schedule or FlowSchedule.make(50)
    L = model.n_layers
    ref = _generate(model, probe, schedule, guidance, None, batch)
    galleries = {}
    if gallery_dir:
        os.makedirs(gallery_dir, exist_ok=True)
        path = os.path.join(gallery_dir, "ref.png")
        scenegen.save_png(path, image_grid(ref[:gallery_size]))
        galleries["ref"] = path
    scores, errors = [], {}
    for layer in range(L):
        try:
            imgs = _generate(model, probe, schedule, guidance, LayerHooks(bypass={layer}), batch)
            sim = metric(ref, imgs)
            score = float(1.0 - sim.mean())
            if not math.isfinite(score):
                raise FloatingPointError("non-finite similarity")
        except Exception as exc:  # one failing layer must not sink the scan
            logger.warning("bypass scan of layer %d failed: %s", layer, exc)
            errors[layer] = f"{type(exc).__name__}: {exc}"
            scores.append(None)
            continue
        scores.append(score)
        logger.info("layer %d vitality %.4f", layer, score)
        if gallery_dir:
            path = os.path.join(gallery_dir, f"layer{layer:02d}.png")
            scenegen.save_png(path, image_grid(imgs[:gallery_size]))
            galleries[str(layer)] = path
    vital = select_vital(scores, rule, tau, m)
    rule_desc = {"rule": rule, "tau": tau, "m": m if m is not None or rule != "top_k" else math.ceil(L / 4)}
    settings = {
        "k": len(probe), "master_seed": probe.master_seed, "steps": schedule.steps, "schedule": schedule.kind,
        "guidance": None if guidance is None else guidance.scale,
    }
    return VitalityReport(scores, rule_desc, vital, metric.name, tau, galleries, errors, settings)


def vital_subset_sweep(model, report: VitalityReport, tasks, fractions=(1.0, 0.8, 0.6, 0.4, 0.2, 0.0), **eval_kwargs) -> list:
    """Edit quality when injecting only the top fraction of the vital set.

    Returns one row per fraction with the layers used and the mean metrics;
    an empty subset is evaluated as the no-injection baseline.
    """
    from .evalbench import evaluate_tasks

    if not report.vital:
        raise ValueError("vital set is empty")
    ranked = sorted(report.vital, key=lambda l: (-report.scores[l], l))
    rows = []
    for f in fractions:
        n = math.ceil(f * len(ranked) - 1e-9)
        subset = sorted(ranked[:n])
        mode = "inject_vital" if subset else "none"
        res = evaluate_tasks(model, tasks, subset, [mode], **eval_kwargs)
        rows.append({"fraction": f, "layers": subset, "mode": mode, **res.means()[mode]})
    return rows
