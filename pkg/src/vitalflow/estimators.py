"""scikit-learn style wrappers around the generator, the layer scan and the editor.

``FlowMatchingGenerator`` fits the MM-DiT on (image, prompt) pairs and
predicts images from prompts. ``VitalLayerSelector`` fits on a generator
and exposes the chosen layers through ``get_support``.
``StableFlowEditor`` fits on a source (seeds or real images plus their
prompts) and transforms edit prompts into edited images.
"""

from __future__ import annotations

import math
import os
import tempfile

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import cfm, editor, flow, scenegen
from .mmdit import MMDiT, ModelConfig, load_checkpoint
from .validation import check_consistent_length, check_images, check_seeds, check_tokens
from .vitality import PerceptualMetric, VitalityReport, gen_probe_set, select_vital, vitality_scan


def _guidance(scale):
    return None if scale is None else flow.GuidanceConfig(float(scale))


def _model_of(obj) -> MMDiT:
    if isinstance(obj, MMDiT):
        return obj
    if isinstance(obj, FlowMatchingGenerator):
        check_is_fitted(obj, "model_")
        return obj.model_
    if isinstance(obj, (str, os.PathLike)):
        return MMDiT.load(obj)
    raise TypeError(f"cannot get a model from {type(obj).__name__}")


class FlowMatchingGenerator(BaseEstimator):
    def __init__(self, d_model=64, heads=4, layers=12, patch=4, mlp_ratio=4, batch_size=32, steps=20000,
                 lr=3e-4, lr_min=3e-5, warmup_steps=200, weight_decay=0.01, prompt_drop=0.1, random_state=0,
                 sample_steps=50, schedule="linear", guidance=3.0, out_dir=None):
        self.d_model = d_model
        self.heads = heads
        self.layers = layers
        self.patch = patch
        self.mlp_ratio = mlp_ratio
        self.batch_size = batch_size
        self.steps = steps
        self.lr = lr
        self.lr_min = lr_min
        self.warmup_steps = warmup_steps
        self.weight_decay = weight_decay
        self.prompt_drop = prompt_drop
        self.random_state = random_state
        self.sample_steps = sample_steps
        self.schedule = schedule
        self.guidance = guidance
        self.out_dir = out_dir

    def _model_config(self):
        return ModelConfig(d_model=self.d_model, heads=self.heads, layers=self.layers, patch=self.patch,
                           mlp_ratio=self.mlp_ratio)

    def _train_config(self):
        return cfm.TrainConfig(batch_size=self.batch_size, steps=self.steps, lr=self.lr, lr_min=self.lr_min,
                               warmup_steps=self.warmup_steps, weight_decay=self.weight_decay,
                               prompt_drop=self.prompt_drop, seed=self.random_state, checkpoint_every=0)

    def fit(self, X, y):
        """Train on images ``X`` (n, 32, 32, 3) conditioned on prompt tokens ``y``."""
        X = check_images(X)
        y = check_tokens(y)
        check_consistent_length(X, y)
        data = [(None, img, tok) for img, tok in zip(X, y)]
        out = self.out_dir or tempfile.mkdtemp(prefix="vitalflow-")
        self.model_ = cfm.train(self._train_config(), data, out, self._model_config(), log_every=0)
        self.checkpoint_ = os.path.join(out, "final.ckpt")
        self.loss_curve_ = np.loadtxt(os.path.join(out, "loss.csv"), delimiter=",", skiprows=1)[:, 1]
        self.n_layers_ = self.model_.n_layers
        return self

    @classmethod
    def from_checkpoint(cls, path, **params):
        model, meta, _ = load_checkpoint(path)
        cfg = meta["config"]
        est = cls(d_model=cfg["d_model"], heads=cfg["heads"], layers=cfg["layers"], patch=cfg["patch"],
                  mlp_ratio=cfg["mlp_ratio"], **params)
        est.model_ = model
        est.checkpoint_ = str(path)
        est.n_layers_ = model.n_layers
        return est

    def _sched(self):
        return flow.FlowSchedule.make(self.sample_steps, self.schedule)

    def predict(self, y, seeds=None):
        """Generate one image per prompt from noise seeds (default ``0..n-1``)."""
        check_is_fitted(self, "model_")
        y = check_tokens(y)
        seeds = check_seeds(range(len(y)) if seeds is None else seeds, len(y))
        z = flow.seed_latent(seeds)
        return flow.sample(self.model_, z, torch.from_numpy(y), self._sched(), _guidance(self.guidance)).numpy()

    def invert(self, X, y, lam=1.15):
        """Returns ``(noise latents, trajectory cache)`` for real images."""
        check_is_fitted(self, "model_")
        X, y = check_images(X), check_tokens(y)
        check_consistent_length(X, y)
        z, cache = flow.invert(self.model_, torch.from_numpy(X), torch.from_numpy(y), self._sched(),
                               flow.NudgeConfig(lam), _guidance(self.guidance))
        return z.values.numpy(), cache

    def reconstruct(self, X, y, lam=1.15, use_cache=False):
        """Invert then regenerate. With ``use_cache`` the result is ``clip(lam * X, -1, 1)``."""
        z, cache = self.invert(X, y, lam)
        if use_cache:
            return flow.reconstruct_with_cache(cache, self._sched()).numpy()
        latent = flow.Latent(torch.from_numpy(z), 1.0, "nudged-inverted" if lam != 1.0 else "inverted")
        return flow.sample(self.model_, latent, torch.from_numpy(check_tokens(y)), self._sched(),
                           _guidance(self.guidance)).numpy()

    def score(self, X, y):
        """Negative flow-matching loss on a fixed noise draw."""
        check_is_fitted(self, "model_")
        X, y = check_images(X), check_tokens(y)
        with torch.no_grad():
            loss, _ = cfm.cfm_loss(self.model_, torch.from_numpy(X), torch.from_numpy(y),
                                   torch.Generator().manual_seed(self.random_state))
        return -float(loss)


class VitalLayerSelector(BaseEstimator):
    def __init__(self, k=64, master_seed=0, metric="pooled-feature-cosine", rule="top_k", n_vital=None, tau=None,
                 steps=50, schedule="linear", guidance=3.0, gallery_dir=None):
        self.k = k
        self.master_seed = master_seed
        self.metric = metric
        self.rule = rule
        self.n_vital = n_vital
        self.tau = tau
        self.steps = steps
        self.schedule = schedule
        self.guidance = guidance
        self.gallery_dir = gallery_dir

    def fit(self, generator, y=None):
        """Scan every layer of ``generator`` (estimator, model, or checkpoint path)."""
        model = _model_of(generator)
        probe = gen_probe_set(self.master_seed, self.k)
        self.report_ = vitality_scan(
            model, probe, PerceptualMetric(self.metric), flow.FlowSchedule.make(self.steps, self.schedule),
            _guidance(self.guidance), self.rule, self.tau, self.n_vital, self.gallery_dir,
        )
        self.scores_ = np.array([np.nan if s is None else s for s in self.report_.scores])
        self.vital_layers_ = np.array(self.report_.vital, dtype=int)
        self.n_layers_ = model.n_layers
        return self

    def get_support(self, indices=False):
        check_is_fitted(self, "vital_layers_")
        if indices:
            return self.vital_layers_.copy()
        mask = np.zeros(self.n_layers_, bool)
        mask[self.vital_layers_] = True
        return mask

    def reselect(self, rule="top_k", tau=None, n_vital=None):
        """Vital set under another rule without rescanning."""
        check_is_fitted(self, "report_")
        return np.array(select_vital(self.report_.scores, rule, tau, n_vital), dtype=int)


class StableFlowEditor(TransformerMixin, BaseEstimator):
    def __init__(self, generator=None, vital_layers=None, layer_scores=None, mode="inject_vital", steps=50,
                 schedule="linear", lam=1.15, guidance=3.0):
        self.generator = generator
        self.vital_layers = vital_layers
        self.layer_scores = layer_scores
        self.mode = mode
        self.steps = steps
        self.schedule = schedule
        self.lam = lam
        self.guidance = guidance

    def fit(self, X, y):
        """Bind the source.

        ``X`` is either a 1-D array of noise seeds (generated sources) or real
        images ``(n, 32, 32, 3)``; ``y`` holds the source prompts.
        """
        if self.mode not in editor.MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        model = _model_of(self.generator)
        vital = self.vital_layers
        scores = self.layer_scores
        if isinstance(vital, VitalLayerSelector):
            scores = vital.report_.scores if scores is None else scores
            vital = vital.get_support(indices=True)
        elif isinstance(vital, VitalityReport):
            scores = vital.scores if scores is None else scores
            vital = vital.vital
        if vital is None:
            vital = []
        y = check_tokens(y)
        X = np.asarray(X)
        if X.ndim == 1:
            kw = dict(source="generated", seeds=check_seeds(X, len(y)))
        else:
            X = check_images(X)
            check_consistent_length(X, y)
            kw = dict(source="real", images=X)
        self.model_ = model
        self.source_tokens_ = y
        self._session_kw = dict(
            vital=[int(v) for v in vital], mode=self.mode, layer_scores=scores,
            schedule=flow.FlowSchedule.make(self.steps, self.schedule), nudge=flow.NudgeConfig(self.lam),
            guidance=_guidance(self.guidance), **kw,
        )
        base = editor.EditSession(y, y, **self._session_kw)
        self.session_ = editor.prepare(model, base)
        self.reference_ = None
        return self

    def transform(self, X):
        """Edited images for edit prompts ``X`` (one per source item)."""
        check_is_fitted(self, "session_")
        X = check_tokens(X, "X")
        check_consistent_length(X, self.source_tokens_)
        sess = editor.EditSession(self.source_tokens_, X, **self._session_kw)
        sess.z0, sess.cache = self.session_.z0, self.session_.cache
        edited, ref = editor.edit(self.model_, sess)
        self.reference_ = ref.numpy()
        return edited.numpy()
