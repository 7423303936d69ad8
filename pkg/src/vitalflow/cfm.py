"""Conditional flow-matching training for the MM-DiT.

Straight-line paths: ``z_sigma = sigma * eps + (1 - sigma) * x`` with target
velocity ``eps - x``, so sigma=0 is data and sigma=1 is noise.
"""

from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import asdict, dataclass, fields
from typing import Sequence

import numpy as np
import torch

from . import scenegen
from .container import load_tensors
from .mmdit import MMDiT, ModelConfig, load_checkpoint

logger = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 32
    steps: int = 20000
    lr: float = 3e-4
    lr_min: float = 3e-5
    warmup_steps: int = 200
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.01
    grad_clip: float = 1.0
    prompt_drop: float = 0.1
    seed: int = 0
    checkpoint_every: int = 1000
    n_data: int = 16384

    def __post_init__(self):
        if not 0.0 <= self.prompt_drop < 1.0:
            raise ValueError("prompt_drop must lie in [0, 1)")
        if self.batch_size < 1 or self.steps < 0:
            raise ValueError("batch_size must be positive and steps non-negative")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class FlowSample:
    x: torch.Tensor
    eps: torch.Tensor
    sigma: torch.Tensor
    z: torch.Tensor
    target: torch.Tensor


def interpolate(x: torch.Tensor, eps: torch.Tensor, sigma: torch.Tensor) -> torch.Tensor:
    s = sigma.reshape(-1, *([1] * (x.ndim - 1)))
    return s * eps + (1 - s) * x


def draw_flow_sample(x: torch.Tensor, generator: torch.Generator) -> FlowSample:
    eps = torch.randn(x.shape, generator=generator, dtype=x.dtype)
    sigma = torch.rand(x.shape[0], generator=generator, dtype=x.dtype)
    return FlowSample(x, eps, sigma, interpolate(x, eps, sigma), eps - x)


def drop_prompts(tokens: torch.Tensor, p: float, generator: torch.Generator) -> torch.Tensor:
    keep = torch.rand(tokens.shape[0], generator=generator) >= p
    null = torch.as_tensor(scenegen.null_prompt()).expand_as(tokens)
    return torch.where(keep[:, None], tokens, null)


def cfm_loss(model: MMDiT, x: torch.Tensor, tokens: torch.Tensor, generator: torch.Generator, prompt_drop: float = 0.0):
    """Mean squared velocity error on one batch; returns ``(loss, sample)``."""
    if x.shape[0] == 0:
        raise ValueError("empty batch")
    sample = draw_flow_sample(x, generator)
    tokens = drop_prompts(tokens, prompt_drop, generator) if prompt_drop > 0 else tokens
    pred = model(sample.z, sample.sigma, tokens).velocity
    loss = ((pred - sample.target) ** 2).mean()
    return loss, sample


def cfm_loss_and_grad(model, x, tokens, seed: int, prompt_drop: float = 0.0):
    """Loss value and a ``{name: grad}`` dict for a batch drawn with ``seed``."""
    model.zero_grad(set_to_none=True)
    loss, _ = cfm_loss(model, x, tokens, torch.Generator().manual_seed(seed), prompt_drop)
    if not torch.isfinite(loss):
        raise TrainingDiverged(f"non-finite loss {loss.item()}")
    loss.backward()
    # parameters off the output path (e.g. the last block's text update) get no grad
    return loss.item(), {n: torch.zeros_like(p) if p.grad is None else p.grad.detach().clone()
                         for n, p in model.named_parameters()}


def lr_at(step: int, cfg: TrainConfig) -> float:
    if step < cfg.warmup_steps:
        return cfg.lr * (step + 1) / cfg.warmup_steps
    span = max(cfg.steps - cfg.warmup_steps, 1)
    t = min((step - cfg.warmup_steps) / span, 1.0)
    return cfg.lr_min + 0.5 * (cfg.lr - cfg.lr_min) * (1 + math.cos(math.pi * t))


def _step_generator(seed: int, step: int) -> torch.Generator:
    state = np.random.SeedSequence([seed, step]).generate_state(2, np.uint32)
    return torch.Generator().manual_seed(int(state[0]) << 32 | int(state[1]))


def init_model(model_config: ModelConfig, seed: int) -> MMDiT:
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        return MMDiT(model_config)


def _make_optimizer(model, cfg):
    return torch.optim.AdamW(
        model.parameters(), lr=cfg.lr, betas=(cfg.beta1, cfg.beta2), weight_decay=cfg.weight_decay
    )


def _optimizer_tensors(model, opt) -> dict:
    out = {}
    for name, p in model.named_parameters():
        st = opt.state.get(p)
        if st:
            out[f"opt/exp_avg/{name}"] = st["exp_avg"].numpy()
            out[f"opt/exp_avg_sq/{name}"] = st["exp_avg_sq"].numpy()
            out[f"opt/step/{name}"] = np.array([st["step"].item()], np.float64)
    return out


def _restore_optimizer(model, opt, extra):
    for name, p in model.named_parameters():
        key = f"opt/exp_avg/{name}"
        if key in extra:
            opt.state[p] = {
                "step": torch.tensor(float(extra[f"opt/step/{name}"][0])),
                "exp_avg": torch.from_numpy(extra[key].copy()),
                "exp_avg_sq": torch.from_numpy(extra[f"opt/exp_avg_sq/{name}"].copy()),
            }


def dataset_arrays(dataset: Sequence) -> tuple[torch.Tensor, torch.Tensor]:
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    x = torch.from_numpy(np.stack([img for _, img, _ in dataset]).astype(np.float32))
    tok = torch.from_numpy(np.stack([t for _, _, t in dataset]).astype(np.int64))
    return x, tok


def save_training_checkpoint(path, model, opt, cfg, step, curve):
    extra = _optimizer_tensors(model, opt)
    extra["train/curve"] = np.asarray(curve, np.float64).reshape(-1, 3)
    model.save(path, meta={"step": step, "train_config": cfg.to_dict()}, extra=extra)


def write_curve(path, curve) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss", "lr"])
        for step, loss, lr in curve:
            w.writerow([int(step), repr(float(loss)), repr(float(lr))])


def train(
    cfg: TrainConfig,
    dataset: Sequence,
    out_dir: str | os.PathLike,
    model_config: ModelConfig = ModelConfig(),
    resume: str | os.PathLike | None = None,
    stop_at: int | None = None,
    log_every: int = 100,
) -> MMDiT:
    """Train from scratch (or from ``resume``) and write ``final.ckpt`` and ``loss.csv``.

    ``stop_at`` ends the run early at that step (checkpointing it) without
    changing the schedule, which is how an interrupted run is simulated.
    """
    os.makedirs(out_dir, exist_ok=True)
    x_all, tok_all = dataset_arrays(dataset)
    if resume is not None:
        model, meta, extra = load_checkpoint(resume)
        model.train()
        start = int(meta["step"])
        curve = [tuple(r) for r in extra.get("train/curve", np.zeros((0, 3)))]
    else:
        model = init_model(model_config, cfg.seed)
        start, curve, extra = 0, [], {}
    opt = _make_optimizer(model, cfg)
    _restore_optimizer(model, opt, extra)
    end = cfg.steps if stop_at is None else min(stop_at, cfg.steps)

    model.train()
    for step in range(start, end):
        g = _step_generator(cfg.seed, step)
        idx = torch.randint(x_all.shape[0], (cfg.batch_size,), generator=g)
        lr = lr_at(step, cfg)
        for group in opt.param_groups:
            group["lr"] = lr
        loss, _ = cfm_loss(model, x_all[idx], tok_all[idx], g, cfg.prompt_drop)
        if not torch.isfinite(loss):
            raise TrainingDiverged(
                f"loss became {loss.item()} at step {step} (lr={lr:.3g}); last finite loss "
                f"{curve[-1][1] if curve else 'n/a'}"
            )
        opt.zero_grad(set_to_none=True)
        loss.backward()
        if cfg.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
        opt.step()
        curve.append((step, loss.item(), lr))
        if log_every and (step + 1) % log_every == 0:
            recent = np.mean([c[1] for c in curve[-log_every:]])
            logger.info("step %d loss %.5f lr %.2e", step + 1, recent, lr)
        if cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0 and step + 1 < end:
            save_training_checkpoint(os.path.join(out_dir, f"step{step + 1:07d}.ckpt"), model, opt, cfg, step + 1, curve)

    model.eval()
    name = "final.ckpt" if end == cfg.steps else f"step{end:07d}.ckpt"
    save_training_checkpoint(os.path.join(out_dir, name), model, opt, cfg, end, curve)
    write_curve(os.path.join(out_dir, "loss.csv"), curve)
    return model


def checkpoint_step(path) -> int:
    _, meta = load_tensors(path)
    return int(meta.get("step", 0))
