"""Deterministic ODE machinery over the sigma grid.

Convention: the schedule is ``sigma_0 = 1 > sigma_1 > ... > sigma_T = 0``.
Sampling walks it forward,

    z_{i+1} = z_i + (sigma_{i+1} - sigma_i) * u(z_i, sigma_i),

and inversion walks it backward with the velocity of the step being undone
evaluated at the latent already available,

    z_i = z_{i+1} + (sigma_i - sigma_{i+1}) * u(z_{i+1}, sigma_i).

Anything callable as ``field(z, sigma, tokens, hooks)`` works as a velocity
field; the analytic fields below let solver behaviour be checked without a
trained network.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import torch

from . import scenegen
from .container import load_tensors, save_tensors
from .mmdit import LayerHooks, MMDiT


@dataclass(frozen=True)
class FlowSchedule:
    sigmas: tuple
    kind: str = "linear"

    def __post_init__(self):
        s = np.asarray(self.sigmas, np.float64)
        if s.ndim != 1 or len(s) < 2:
            raise ValueError("schedule needs at least two sigma values")
        if s[0] != 1.0 or s[-1] != 0.0:
            raise ValueError("schedule must start at sigma=1 and end at sigma=0")
        if np.any(np.diff(s) >= 0):
            raise ValueError("schedule must be strictly decreasing")

    @property
    def steps(self) -> int:
        return len(self.sigmas) - 1

    @classmethod
    def make(cls, steps: int, kind: str = "linear") -> "FlowSchedule":
        if steps < 1:
            raise ValueError("steps must be >= 1")
        t = np.arange(steps + 1) / steps
        if kind == "linear":
            s = 1.0 - t
        elif kind == "cosine":
            s = np.cos(0.5 * np.pi * t)
        else:
            raise ValueError(f"unknown schedule kind {kind!r}")
        s[0], s[-1] = 1.0, 0.0
        return cls(tuple(float(v) for v in s), kind)


@dataclass
class Latent:
    values: torch.Tensor
    sigma: float
    provenance: str = "seed-noise"

    def __post_init__(self):
        if not 0.0 <= self.sigma <= 1.0:
            raise ValueError(f"sigma {self.sigma} outside [0, 1]")
        if self.provenance not in ("seed-noise", "inverted", "nudged-inverted"):
            raise ValueError(f"unknown provenance {self.provenance!r}")


@dataclass(frozen=True)
class NudgeConfig:
    lam: float = 1.15

    def __post_init__(self):
        if not self.lam > 0:
            raise ValueError("nudging factor must be positive")


@dataclass(frozen=True)
class GuidanceConfig:
    scale: float = 3.0
    null_prompt: tuple = tuple(int(t) for t in scenegen.null_prompt())

    def __post_init__(self):
        if self.scale < 0:
            raise ValueError("guidance scale must be non-negative")


@dataclass
class TrajectoryCache:
    """Inversion latents indexed like the schedule: ``latents[i]`` sits at ``sigmas[i]``."""

    latents: list
    sigmas: tuple
    lam: float = 1.0

    def check(self, schedule: FlowSchedule) -> None:
        if len(self.latents) != schedule.steps + 1:
            raise ValueError(f"cache holds {len(self.latents)} latents, schedule needs {schedule.steps + 1}")
        if tuple(self.sigmas) != tuple(schedule.sigmas):
            raise ValueError("cache sigmas do not match the schedule")

    def save(self, path) -> None:
        tensors = {f"latent/{i:05d}": z.detach().cpu().numpy() for i, z in enumerate(self.latents)}
        tensors["sigmas"] = np.asarray(self.sigmas, np.float64)
        save_tensors(path, tensors, {"kind": "trajectory-cache", "lam": self.lam})

    @classmethod
    def load(cls, path) -> "TrajectoryCache":
        tensors, meta = load_tensors(path)
        if meta.get("kind") != "trajectory-cache":
            raise ValueError(f"{path} is not a trajectory cache")
        keys = sorted(k for k in tensors if k.startswith("latent/"))
        return cls([torch.from_numpy(tensors[k]) for k in keys], tuple(tensors["sigmas"].tolist()), meta["lam"])


# ---------------------------------------------------------------------------
# velocity fields


class ConstantField:
    def __init__(self, c):
        self.c = c

    def __call__(self, z, sigma, tokens=None, hooks=None):
        return torch.zeros_like(z) + self.c


class LinearField:
    """``u(z) = a * z``."""

    def __init__(self, a: float):
        self.a = a

    def __call__(self, z, sigma, tokens=None, hooks=None):
        return self.a * z


class AffineField:
    """``u(z, sigma) = a * z + b + c * sigma``."""

    def __init__(self, a: float, b: float = 0.0, c: float = 0.0):
        self.a, self.b, self.c = a, b, c

    def __call__(self, z, sigma, tokens=None, hooks=None):
        return self.a * z + self.b + self.c * float(sigma)


def velocity(model: MMDiT, z: torch.Tensor, sigma: float, tokens: torch.Tensor,
             guidance: GuidanceConfig | None = None, hooks: LayerHooks | None = None,
             return_output: bool = False):
    """Guided velocity ``u_uncond + g * (u_cond - u_uncond)``.

    With guidance the conditional and unconditional halves run as one
    stacked batch ``[cond; uncond]``; hook companions must be stacked the
    same way. ``guidance=None`` evaluates the conditional branch only.
    """
    if guidance is None:
        out = model(z, sigma, tokens, hooks)
        return (out.velocity, out) if return_output else out.velocity
    null = torch.as_tensor(guidance.null_prompt, dtype=tokens.dtype).expand_as(tokens)
    out = model(torch.cat([z, z]), sigma, torch.cat([tokens, null]), hooks)
    u_c, u_u = out.velocity.chunk(2)
    v = u_u + guidance.scale * (u_c - u_u)
    return (v, out) if return_output else v


class ModelField:
    """Adapts an :class:`MMDiT` plus guidance settings to the field interface."""

    def __init__(self, model: MMDiT, guidance: GuidanceConfig | None = None):
        self.model = model
        self.guidance = guidance

    def __call__(self, z, sigma, tokens, hooks=None):
        return velocity(self.model, z, sigma, tokens, self.guidance, hooks)


def as_field(obj, guidance: GuidanceConfig | None = None) -> Callable:
    return ModelField(obj, guidance) if isinstance(obj, MMDiT) else obj


# ---------------------------------------------------------------------------
# solvers


def seed_noise(seed: int, shape=(scenegen.IMAGE_SIZE, scenegen.IMAGE_SIZE, 3), dtype=torch.float32) -> torch.Tensor:
    g = torch.Generator().manual_seed(int(seed))
    return torch.randn(shape, generator=g, dtype=dtype)


def seed_latent(seeds, dtype=torch.float32) -> Latent:
    return Latent(torch.stack([seed_noise(s, dtype=dtype) for s in seeds]), 1.0, "seed-noise")


def integrate(field, z: torch.Tensor, tokens, schedule: FlowSchedule, hooks=None, callback=None) -> torch.Tensor:
    """Forward Euler over the whole schedule without clamping."""
    s = schedule.sigmas
    with torch.no_grad():
        for i in range(schedule.steps):
            u = field(z, s[i], tokens, hooks)
            z = z + (s[i + 1] - s[i]) * u
            if callback is not None:
                callback(i, z)
    return z


def sample(model, z_noise: Latent, tokens, schedule: FlowSchedule,
           guidance: GuidanceConfig | None = None, hooks: LayerHooks | None = None) -> torch.Tensor:
    """Generate images from noise; the result is clamped to [-1, 1]."""
    if z_noise.sigma != schedule.sigmas[0]:
        raise ValueError(f"latent sits at sigma={z_noise.sigma}, schedule starts at {schedule.sigmas[0]}")
    z = integrate(as_field(model, guidance), z_noise.values, tokens, schedule, hooks)
    return z.clamp(-1.0, 1.0)


def invert(model, x: torch.Tensor, tokens, schedule: FlowSchedule, nudge: NudgeConfig = NudgeConfig(),
           guidance: GuidanceConfig | None = None) -> tuple[Latent, TrajectoryCache]:
    """Inverse Euler from a clean image to sigma=1, starting from ``lam * x``."""
    if x.min() < -1.0 - 1e-6 or x.max() > 1.0 + 1e-6:
        raise ValueError("image values must lie in [-1, 1]")
    field = as_field(model, guidance)
    s = schedule.sigmas
    T = schedule.steps
    z = nudge.lam * x
    latents = [None] * (T + 1)
    latents[T] = z
    with torch.no_grad():
        for i in range(T - 1, -1, -1):
            z = z + (s[i] - s[i + 1]) * field(z, s[i], tokens, None)
            if not torch.isfinite(z).all():
                raise FloatingPointError(f"inversion produced non-finite values at step {i}")
            latents[i] = z
    prov = "inverted" if nudge.lam == 1.0 else "nudged-inverted"
    return Latent(z, 1.0, prov), TrajectoryCache(latents, schedule.sigmas, nudge.lam)


def reconstruct_with_cache(cache: TrajectoryCache, schedule: FlowSchedule, model=None, tokens=None) -> torch.Tensor:
    """Replay the cached trajectory as the reference branch and decode its endpoint."""
    cache.check(schedule)
    z = cache.latents[0]
    for i in range(1, schedule.steps + 1):
        if cache.latents[i].shape != z.shape:
            raise ValueError(f"cache latent {i} has shape {tuple(cache.latents[i].shape)}")
        z = cache.latents[i]
    return z.clamp(-1.0, 1.0)
