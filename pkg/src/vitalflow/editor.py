"""Two-branch editing with hidden-state injection into selected layers.

A reference branch (the source generation, or a replay of a cached
inversion) and an edit branch (same starting latent, edit prompt) are
integrated step by step. At every step the reference forward records its
per-layer image tokens, and the edit forward consumes them according to the
session mode.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
import torch

from .flow import (
    FlowSchedule,
    GuidanceConfig,
    NudgeConfig,
    TrajectoryCache,
    invert,
    seed_latent,
    velocity,
)
from .mmdit import LayerHooks, MMDiT, image_query_index

logger = logging.getLogger(__name__)

MODES = ("inject_vital", "inject_all", "inject_nonvital", "extend_all", "none")


@dataclass(frozen=True)
class InjectionConfig:
    inject: frozenset = frozenset()
    extend: frozenset = frozenset()
    capture: frozenset = frozenset()


@dataclass
class EditSession:
    """Editing request for one or more items sharing solver settings.

    ``source`` is ``"generated"`` (``seeds`` given) or ``"real"`` (``images``
    given). Token arrays are ``(B, text_len)``.
    """

    source_tokens: np.ndarray
    edit_tokens: np.ndarray
    vital: Sequence[int]
    source: str = "generated"
    seeds: Optional[Sequence[int]] = None
    images: Optional[np.ndarray] = None
    mode: str = "inject_vital"
    layer_scores: Optional[Sequence[float]] = None
    schedule: FlowSchedule = field(default_factory=lambda: FlowSchedule.make(50))
    nudge: NudgeConfig = field(default_factory=NudgeConfig)
    guidance: Optional[GuidanceConfig] = field(default_factory=GuidanceConfig)
    cache: Optional[TrajectoryCache] = None
    z0: Optional[torch.Tensor] = None

    def __post_init__(self):
        self.source_tokens = np.atleast_2d(np.asarray(self.source_tokens, np.int64))
        self.edit_tokens = np.atleast_2d(np.asarray(self.edit_tokens, np.int64))
        if self.source_tokens.shape != self.edit_tokens.shape:
            raise ValueError("source and edit prompts must have the same shape")
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.source == "generated":
            if self.seeds is None or len(self.seeds) != len(self.source_tokens):
                raise ValueError("generated sources need one seed per prompt")
        elif self.source == "real":
            if self.images is None:
                raise ValueError("real sources need images")
            self.images = np.asarray(self.images, np.float32).reshape(-1, *np.shape(self.images)[-3:])
            if len(self.images) != len(self.source_tokens):
                raise ValueError("real sources need one image per prompt")
        else:
            raise ValueError(f"unknown source kind {self.source!r}")
        self.vital = sorted(int(v) for v in self.vital)

    @property
    def batch(self) -> int:
        return len(self.source_tokens)

    @property
    def prepared(self) -> bool:
        return self.z0 is not None and (self.source != "real" or self.cache is not None)


def layers_for_mode(mode: str, vital: Sequence[int], n_layers: int, scores: Optional[Sequence[float]] = None) -> InjectionConfig:
    vital = set(int(v) for v in vital)
    if any(not 0 <= v < n_layers for v in vital):
        raise ValueError(f"vital set {sorted(vital)} not inside [0, {n_layers})")
    every = frozenset(range(n_layers))
    if mode == "inject_vital":
        return InjectionConfig(inject=frozenset(vital))
    if mode == "inject_all":
        return InjectionConfig(inject=every)
    if mode == "extend_all":
        return InjectionConfig(extend=every)
    if mode == "none":
        return InjectionConfig()
    if mode == "inject_nonvital":
        if scores is None:
            raise ValueError("inject_nonvital needs per-layer vitality scores")
        rest = [l for l in range(n_layers) if l not in vital]
        rest.sort(key=lambda l: (scores[l], l))
        return InjectionConfig(inject=frozenset(rest[: len(vital)]))
    raise ValueError(f"unknown mode {mode!r}")


def forward_batch_pair(model: MMDiT, ref, edit, sigma: float, injection: InjectionConfig,
                       guidance: GuidanceConfig | None = None):
    """Velocities of a reference/edit pair at one noise level.

    ``ref`` and ``edit`` are ``(z, tokens)`` tuples. The reference runs first
    and records its per-layer image tokens; the edit branch then runs with
    ``injection`` applied. Returns ``(v_ref, v_edit, edit_output)``.
    """
    z_ref, t_ref = ref
    z_edit, t_edit = edit
    if z_ref.shape != z_edit.shape:
        raise ValueError("reference and edit latents must have the same shape")
    v_ref, out_ref = velocity(model, z_ref, sigma, t_ref, guidance, LayerHooks(record_states=True), return_output=True)
    hooks = LayerHooks(
        inject=injection.inject,
        extend=injection.extend,
        capture=injection.capture,
        companion=out_ref.states if (injection.inject or injection.extend) else None,
    )
    v_edit, out_edit = velocity(model, z_edit, sigma, t_edit, guidance, hooks, return_output=True)
    return v_ref, v_edit, out_edit


def prepare(model: MMDiT, session: EditSession) -> EditSession:
    """Fix the starting latent; real sources are inverted (with nudging) and cached."""
    if session.source == "generated":
        return replace(session, z0=seed_latent(session.seeds).values)
    x = torch.from_numpy(session.images)
    tokens = torch.from_numpy(session.source_tokens)
    z, cache = invert(model, x, tokens, session.schedule, session.nudge, session.guidance)
    return replace(session, z0=z.values, cache=cache)


def run_modes(model: MMDiT, session: EditSession, modes: Sequence[str], capture: Sequence[int] = (),
              on_capture=None) -> tuple[dict, torch.Tensor]:
    """Integrate one reference branch and an edit branch per mode.

    Every mode's edit branch consumes the same per-step reference states, so
    this equals running :func:`edit` once per mode. ``on_capture(step, mode,
    attention)`` receives the conditional half of captured attention maps.
    """
    if not session.prepared:
        raise RuntimeError("session is not prepared; call prepare() first")
    n = model.n_layers
    configs = {m: layers_for_mode(m, session.vital, n, session.layer_scores) for m in modes}
    if capture:
        configs = {m: replace(c, capture=frozenset(capture)) for m, c in configs.items()}
    sched = session.schedule
    s = sched.sigmas
    g = session.guidance
    t_src = torch.from_numpy(session.source_tokens)
    t_edit = torch.from_numpy(session.edit_tokens)
    real = session.source == "real"
    if real:
        session.cache.check(sched)
    z_ref = session.z0
    z_edit = {m: session.z0 for m in modes}
    need_ref = not real or any(configs[m].inject or configs[m].extend for m in modes)
    b = session.batch

    with torch.no_grad():
        for i in range(sched.steps):
            if real:
                z_ref = session.cache.latents[i]
            states = None
            if need_ref:
                v_ref, out_ref = velocity(model, z_ref, s[i], t_src, g, LayerHooks(record_states=True), return_output=True)
                states = out_ref.states
            for m in modes:
                cfg = configs[m]
                hooks = LayerHooks(
                    inject=cfg.inject, extend=cfg.extend, capture=cfg.capture,
                    companion=states if (cfg.inject or cfg.extend) else None,
                )
                v_e, out_e = velocity(model, z_edit[m], s[i], t_edit, g, hooks, return_output=True)
                if on_capture is not None and out_e.attention:
                    on_capture(i, m, {l: a[:b] for l, a in out_e.attention.items()})
                z_edit[m] = z_edit[m] + (s[i + 1] - s[i]) * v_e
            if not real:
                z_ref = z_ref + (s[i + 1] - s[i]) * v_ref
    reference = session.cache.latents[-1] if real else z_ref
    return {m: z.clamp(-1.0, 1.0) for m, z in z_edit.items()}, reference.clamp(-1.0, 1.0)


def edit(model: MMDiT, session: EditSession) -> tuple[torch.Tensor, torch.Tensor]:
    """Returns ``(edited, reference)`` images for the session's mode."""
    outs, ref = run_modes(model, session, [session.mode])
    return outs[session.mode], ref


@dataclass
class AttentionProfile:
    points: list
    vital: list
    table: dict  # point -> list of (layer, text_mass, image_mass)
    summary: dict  # point -> {"vital": (text, image), "nonvital": (text, image)}
    mean_maps: dict  # layer -> (heads, queries, keys) step-averaged attention of item 0
    step_maps: Optional[list] = None


def profile_from_maps(mean_maps: dict, points, vital, config) -> tuple[dict, dict]:
    from .attnviz import group_means, overlay_rows

    table = {tuple(pt): overlay_rows(mean_maps, pt, config) for pt in points}
    summary = {pt: group_means(rows, vital) for pt, rows in table.items()}
    return table, summary


def attn_profile(model: MMDiT, session: EditSession, points, keep_steps: bool = False) -> AttentionProfile:
    """Per-layer text/image attention split at pixel ``points`` of the first item."""
    cfg = model.config
    for r, c in points:
        image_query_index(r, c, cfg)
    sums: dict = {}
    steps: list = []

    def collect(step, mode, attn):
        maps = {l: a[0].double() for l, a in attn.items()}
        for l, a in maps.items():
            sums[l] = sums.get(l, 0) + a
        if keep_steps:
            steps.append({l: a.float() for l, a in maps.items()})

    run_modes(model, session, [session.mode], capture=range(model.n_layers), on_capture=collect)
    T = session.schedule.steps
    mean_maps = {l: (a / T).float() for l, a in sums.items()}
    table, summary = profile_from_maps(mean_maps, points, session.vital, cfg)
    return AttentionProfile([tuple(p) for p in points], list(session.vital), table, summary, mean_maps,
                            steps if keep_steps else None)
