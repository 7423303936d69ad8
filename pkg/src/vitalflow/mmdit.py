"""Compact multimodal diffusion transformer (MM-DiT) with per-layer hooks.

Each layer runs one joint attention over the concatenated text and image
streams (separate projection weights per stream) followed by per-stream
MLPs. Both sub-blocks are modulated by the noise level through adaLN with
zero-initialized gates, so a freshly built model has ``Block(h) == 0`` at
every layer.

A layer is applied as ``h <- h + Block(h)``; the hooks can skip that update
(bypass), overwrite the image half of ``h`` with a companion's image tokens
before the block (injection), append the companion's image keys/values to the
attention (extension), and record attention weights (capture).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import scenegen
from .container import load_tensors, save_tensors


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 32
    patch: int = 4
    channels: int = 3
    d_model: int = 64
    heads: int = 4
    layers: int = 12
    text_len: int = scenegen.TEXT_LEN
    vocab: int = scenegen.VOCAB_SIZE
    mlp_ratio: int = 4

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ValueError("d_model must be divisible by heads")
        if self.image_size % self.patch:
            raise ValueError("patch must divide image_size")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch

    @property
    def n_image_tokens(self) -> int:
        return self.grid**2

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch * self.channels

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LayerHooks:
    """Per-call layer interventions.

    ``companion`` holds per-layer image-token inputs of another branch (as
    returned in ``ForwardOutput.states``); it is read by ``inject`` and
    ``extend`` layers.
    """

    bypass: frozenset = frozenset()
    inject: frozenset = frozenset()
    extend: frozenset = frozenset()
    capture: frozenset = frozenset()
    companion: Optional[Sequence[torch.Tensor]] = None
    record_states: bool = False

    def __post_init__(self):
        for name in ("bypass", "inject", "extend", "capture"):
            setattr(self, name, frozenset(int(i) for i in getattr(self, name)))
        if self.bypass & self.inject:
            raise ValueError(f"layers {sorted(self.bypass & self.inject)} are both bypassed and injected")
        if (self.inject or self.extend) and self.companion is None:
            raise ValueError("injection/extension requires companion states")

    def check(self, n_layers: int) -> None:
        for name in ("bypass", "inject", "extend", "capture"):
            bad = [i for i in getattr(self, name) if not 0 <= i < n_layers]
            if bad:
                raise ValueError(f"{name} hook references layer(s) {bad} outside [0, {n_layers})")
        if self.companion is not None and len(self.companion) != n_layers:
            raise ValueError(f"companion holds {len(self.companion)} layer states, model has {n_layers}")


@dataclass
class ForwardOutput:
    velocity: torch.Tensor
    attention: dict = field(default_factory=dict)  # layer -> (B, heads, queries, keys)
    states: list = field(default_factory=list)  # per-layer image-token inputs


def timestep_embedding(sigma: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=sigma.dtype, device=sigma.device) / half)
    args = (sigma * 1000.0)[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


def sincos_2d(grid: int, dim: int) -> np.ndarray:
    """Fixed 2D sine/cosine position table, ``(grid*grid, dim)``."""
    quarter = dim // 4
    omega = 1.0 / 10000 ** (np.arange(quarter) / quarter)
    ys, xs = np.meshgrid(np.arange(grid), np.arange(grid), indexing="ij")
    parts = []
    for pos in (ys.reshape(-1), xs.reshape(-1)):
        out = pos[:, None] * omega[None]
        parts += [np.sin(out), np.cos(out)]
    return np.concatenate(parts, axis=1).astype(np.float32)


def modulate(x, shift, scale):
    return x * (1 + scale[:, None]) + shift[:, None]


class StreamWeights(nn.Module):
    """Projection, MLP and modulation weights of one modality inside a block."""

    def __init__(self, d: int, mlp_ratio: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(d, elementwise_affine=False, eps=1e-6)
        self.qkv = nn.Linear(d, 3 * d)
        self.proj = nn.Linear(d, d)
        self.norm2 = nn.LayerNorm(d, elementwise_affine=False, eps=1e-6)
        self.mlp = nn.Sequential(nn.Linear(d, mlp_ratio * d), nn.GELU(approximate="tanh"), nn.Linear(mlp_ratio * d, d))
        self.ada = nn.Linear(d, 6 * d)
        nn.init.zeros_(self.ada.weight)
        nn.init.zeros_(self.ada.bias)

    def modulation(self, c):
        return self.ada(c).chunk(6, dim=-1)

    def qkv_of(self, x, shift, scale, heads):
        b, n, d = x.shape
        qkv = self.qkv(modulate(self.norm1(x), shift, scale))
        return qkv.view(b, n, 3, heads, d // heads).permute(2, 0, 3, 1, 4)


class MMDiTBlock(nn.Module):
    def __init__(self, d: int, heads: int, mlp_ratio: int):
        super().__init__()
        self.heads = heads
        self.txt = StreamWeights(d, mlp_ratio)
        self.img = StreamWeights(d, mlp_ratio)

    def forward(self, txt, img, c, ext_img=None, capture=False):
        """Residual updates ``(d_txt, d_img)`` and optional attention weights."""
        t_mod = self.txt.modulation(c)
        i_mod = self.img.modulation(c)
        tq, tk, tv = self.txt.qkv_of(txt, t_mod[0], t_mod[1], self.heads)
        iq, ik, iv = self.img.qkv_of(img, i_mod[0], i_mod[1], self.heads)
        q = torch.cat([tq, iq], dim=2)
        k = torch.cat([tk, ik], dim=2)
        v = torch.cat([tv, iv], dim=2)
        if ext_img is not None:
            _, ek, ev = self.img.qkv_of(ext_img, i_mod[0], i_mod[1], self.heads)
            k = torch.cat([k, ek], dim=2)
            v = torch.cat([v, ev], dim=2)
        scores = (q @ k.transpose(-2, -1)) / math.sqrt(q.shape[-1])
        attn = scores.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).flatten(2)
        n_txt = txt.shape[1]
        deltas = []
        for x, stream, mod, o in ((txt, self.txt, t_mod, out[:, :n_txt]), (img, self.img, i_mod, out[:, n_txt:])):
            shift1, scale1, gate1, shift2, scale2, gate2 = mod
            dx = gate1[:, None] * stream.proj(o)
            h = x + dx
            dx = dx + gate2[:, None] * stream.mlp(modulate(stream.norm2(h), shift2, scale2))
            deltas.append(dx)
        return deltas[0], deltas[1], (attn if capture else None)


class MMDiT(nn.Module):
    def __init__(self, config: ModelConfig = ModelConfig()):
        super().__init__()
        self.config = cfg = config
        d = cfg.d_model
        self.patch_embed = nn.Linear(cfg.patch_dim, d)
        self.token_embed = nn.Embedding(cfg.vocab, d)
        self.text_pos = nn.Parameter(torch.zeros(cfg.text_len, d))
        nn.init.normal_(self.text_pos, std=0.02)
        nn.init.normal_(self.token_embed.weight, std=0.02)
        self.register_buffer("image_pos", torch.from_numpy(sincos_2d(cfg.grid, d)), persistent=False)
        self.sigma_mlp = nn.Sequential(nn.Linear(256, d), nn.SiLU(), nn.Linear(d, d))
        self.blocks = nn.ModuleList(MMDiTBlock(d, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.layers))
        self.final_norm = nn.LayerNorm(d, elementwise_affine=False, eps=1e-6)
        self.final_ada = nn.Linear(d, 2 * d)
        self.final_proj = nn.Linear(d, cfg.patch_dim)
        for lin in (self.final_ada, self.final_proj):
            nn.init.zeros_(lin.weight)
            nn.init.zeros_(lin.bias)

    @property
    def n_layers(self) -> int:
        return len(self.blocks)

    # -- patching -----------------------------------------------------------

    def patchify(self, z: torch.Tensor) -> torch.Tensor:
        """(B, H, W, C) -> (B, tokens, patch*patch*C)."""
        cfg = self.config
        b = z.shape[0]
        g, p = cfg.grid, cfg.patch
        return z.reshape(b, g, p, g, p, cfg.channels).permute(0, 1, 3, 2, 4, 5).reshape(b, g * g, -1)

    def unpatchify(self, x: torch.Tensor) -> torch.Tensor:
        cfg = self.config
        b = x.shape[0]
        g, p = cfg.grid, cfg.patch
        return x.reshape(b, g, g, p, p, cfg.channels).permute(0, 1, 3, 2, 4, 5).reshape(b, cfg.image_size, cfg.image_size, cfg.channels)

    def embed(self, z, tokens):
        img = self.patch_embed(self.patchify(z)) + self.image_pos.to(z.dtype)
        txt = self.token_embed(tokens) + self.text_pos
        return txt, img

    def condition(self, sigma, dtype):
        return F.silu(self.sigma_mlp(timestep_embedding(sigma.to(dtype), 256)))

    def head(self, img, c):
        shift, scale = self.final_ada(c).chunk(2, dim=-1)
        return self.unpatchify(self.final_proj(modulate(self.final_norm(img), shift, scale)))

    # -- forward ------------------------------------------------------------

    def forward(self, z: torch.Tensor, sigma, tokens: torch.Tensor, hooks: LayerHooks | None = None) -> ForwardOutput:
        """Predict the velocity for latents ``z`` (B, H, W, C) at noise level ``sigma``."""
        cfg = self.config
        if z.ndim != 4 or tuple(z.shape[1:]) != (cfg.image_size, cfg.image_size, cfg.channels):
            raise ValueError(f"latent shape {tuple(z.shape)} does not match image shape {(cfg.image_size, cfg.image_size, cfg.channels)}")
        b = z.shape[0]
        if tokens.ndim != 2 or tokens.shape != (b, cfg.text_len):
            raise ValueError(f"prompt tokens shape {tuple(tokens.shape)} != {(b, cfg.text_len)}")
        sigma = torch.as_tensor(sigma, dtype=z.dtype)
        if sigma.ndim == 0:
            sigma = sigma.expand(b)
        hooks = hooks or LayerHooks()
        hooks.check(self.n_layers)

        txt, img = self.embed(z, tokens)
        c = self.condition(sigma, z.dtype)
        out = ForwardOutput(velocity=None)
        for i, block in enumerate(self.blocks):
            if i in hooks.inject:
                img = hooks.companion[i]
            if hooks.record_states:
                out.states.append(img)
            if i in hooks.bypass:
                continue
            ext = hooks.companion[i] if i in hooks.extend else None
            dt, di, attn = block(txt, img, c, ext_img=ext, capture=i in hooks.capture)
            txt, img = txt + dt, img + di
            if attn is not None:
                out.attention[i] = attn
        out.velocity = self.head(img, c)
        return out

    # -- persistence --------------------------------------------------------

    def save(self, path, meta: dict | None = None, extra: dict | None = None) -> None:
        tensors = {f"param/{k}": v.detach().cpu().numpy() for k, v in self.state_dict().items()}
        tensors.update(extra or {})
        save_tensors(path, tensors, {"kind": "mmdit", "config": self.config.to_dict(), **(meta or {})})

    @classmethod
    def load(cls, path, dtype=torch.float32) -> "MMDiT":
        model, _, _ = load_checkpoint(path, dtype)
        return model


def load_checkpoint(path, dtype=torch.float32):
    """Returns ``(model, meta, extra_tensors)``."""
    tensors, meta = load_tensors(path)
    if meta.get("kind") != "mmdit":
        raise ValueError(f"{path} is not an MM-DiT checkpoint")
    model = MMDiT(ModelConfig(**meta["config"]))
    state = {k[len("param/") :]: torch.from_numpy(v) for k, v in tensors.items() if k.startswith("param/")}
    model.load_state_dict(state)
    model.to(dtype)
    model.eval()
    extra = {k: v for k, v in tensors.items() if not k.startswith("param/")}
    return model, meta, extra


def attention_modal_split(attn: torch.Tensor, query: int, n_text: int = scenegen.TEXT_LEN) -> tuple[float, float]:
    """Head-averaged attention mass a query puts on text keys vs image keys.

    ``attn`` is one layer's capture for a single sample, ``(heads, queries, keys)``.
    Keys past the text block (own image tokens and any extension tokens) all
    count as image mass.
    """
    if attn.ndim == 4:
        if attn.shape[0] != 1:
            raise ValueError("pass a single sample's attention")
        attn = attn[0]
    if not 0 <= query < attn.shape[1]:
        raise IndexError(f"query {query} outside [0, {attn.shape[1]})")
    row = attn[:, query].double().mean(0)
    return float(row[:n_text].sum()), float(row[n_text:].sum())


def image_query_index(row: int, col: int, config: ModelConfig = ModelConfig()) -> int:
    """Sequence index of the image token covering pixel ``(row, col)``."""
    if not (0 <= row < config.image_size and 0 <= col < config.image_size):
        raise IndexError(f"pixel ({row}, {col}) outside the {config.image_size}x{config.image_size} image")
    return config.text_len + (row // config.patch) * config.grid + col // config.patch
