import numpy as np
import pytest
import torch

from conftest import randomized
from vitalflow import cfm, scenegen
from vitalflow.cfm import TrainConfig, cfm_loss, cfm_loss_and_grad, init_model, interpolate
from vitalflow.mmdit import ModelConfig, load_checkpoint

SMALL = ModelConfig(d_model=8, heads=2, layers=2)


def _batch(n=4, seed=0, dtype=torch.float64):
    items = scenegen.make_dataset(n, seed)
    x = torch.from_numpy(np.stack([i[1] for i in items])).to(dtype)
    tok = torch.from_numpy(np.stack([i[2] for i in items]))
    return x, tok


def test_interpolation_endpoints():
    x, _ = _batch(dtype=torch.float32)
    eps = torch.randn_like(x)
    assert torch.equal(interpolate(x, eps, torch.zeros(len(x))), x)
    assert torch.equal(interpolate(x, eps, torch.ones(len(x))), eps)


def test_loss_zero_when_model_outputs_target():
    x, tok = _batch(dtype=torch.float32)

    class Oracle(torch.nn.Module):
        def forward(self, z, sigma, tokens, hooks=None):
            s = sigma.reshape(-1, 1, 1, 1)
            # z = s*eps + (1-s)*x  =>  eps - x = (z - x) / s
            return type("O", (), {"velocity": (z - x) / s})()

    loss, _ = cfm_loss(Oracle(), x, tok, torch.Generator().manual_seed(0))
    assert loss.item() < 1e-10


def test_zero_model_on_degenerate_batch():
    model = init_model(SMALL, 0)  # zero-initialized head -> velocity 0
    x = torch.zeros(2, 32, 32, 3)
    tok = torch.zeros(2, 8, dtype=torch.long)

    class ZeroNoise(torch.Generator):
        pass

    z = torch.zeros_like(x)
    assert torch.count_nonzero(model(z, torch.rand(2), tok).velocity) == 0
    # with eps = x = 0 the target is 0 too
    loss = ((model(z, torch.rand(2), tok).velocity - (z - x)) ** 2).mean()
    assert loss.item() == 0.0
    with pytest.raises(ValueError):
        cfm_loss(model, x[:0], tok[:0], torch.Generator())


def _fd_check(model, x, tok, seed, n_per_tensor=3, h=1e-3):
    """Worst relative error of the analytic gradient against a 5-point central stencil."""
    loss, grads = cfm_loss_and_grad(model, x, tok, seed, prompt_drop=0.5)
    rng = np.random.default_rng(0)

    def f(flat, j, v):
        flat[j] = v
        return cfm_loss(model, x, tok, torch.Generator().manual_seed(seed), 0.5)[0].item()

    worst = 0.0
    with torch.no_grad():
        for name, p in model.named_parameters():
            flat = p.data.view(-1)
            for j in rng.choice(flat.numel(), size=min(n_per_tensor, flat.numel()), replace=False):
                old = flat[j].item()
                fd = (-f(flat, j, old + 2 * h) + 8 * f(flat, j, old + h) - 8 * f(flat, j, old - h) + f(flat, j, old - 2 * h)) / (12 * h)
                flat[j] = old
                an = grads[name].view(-1)[j].item()
                worst = max(worst, abs(fd - an) / max(abs(fd), abs(an), 1e-7))
    return worst


def test_gradients_match_finite_differences():
    model = randomized(init_model(SMALL, 0), seed=1, scale=0.3).double()
    x, tok = _batch(3)
    assert _fd_check(model, x, tok, seed=5) < 1e-4


def test_lr_schedule():
    cfg = TrainConfig(steps=1000, warmup_steps=100, lr=1e-3, lr_min=1e-4)
    assert cfm.lr_at(0, cfg) == pytest.approx(1e-5)
    assert cfm.lr_at(99, cfg) == pytest.approx(1e-3)
    assert cfm.lr_at(100, cfg) == pytest.approx(1e-3)
    assert cfm.lr_at(1000, cfg) == pytest.approx(1e-4)
    lrs = [cfm.lr_at(s, cfg) for s in range(100, 1000)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))


def _train(tmp_path, name, steps, **kw):
    data = scenegen.make_dataset(64, 0)
    cfg = TrainConfig(batch_size=8, steps=steps, warmup_steps=2, checkpoint_every=0, seed=3)
    return cfm.train(cfg, data, tmp_path / name, SMALL, log_every=0, **kw)


def test_one_step_changes_params(tmp_path):
    before = init_model(SMALL, 3)
    after = _train(tmp_path, "one", 1)
    changed = [n for (n, a), b in zip(before.named_parameters(), after.parameters()) if not torch.equal(a, b)]
    assert changed


def test_training_is_deterministic_and_resumable(tmp_path):
    full = _train(tmp_path, "full", 12)
    again = _train(tmp_path, "again", 12)
    _train(tmp_path, "part", 12, stop_at=5)
    resumed = _train(tmp_path, "resumed", 12, resume=tmp_path / "part" / "step0000005.ckpt")
    for a, b, c in zip(full.parameters(), again.parameters(), resumed.parameters()):
        assert torch.equal(a, b) and torch.equal(a, c)
    curve_full = (tmp_path / "full" / "loss.csv").read_text()
    assert curve_full == (tmp_path / "resumed" / "loss.csv").read_text()
    assert curve_full.splitlines()[0] == "step,loss,lr" and len(curve_full.splitlines()) == 13


def test_loss_decreases(tmp_path):
    _train(tmp_path, "dec", 150)
    curve = np.loadtxt(tmp_path / "dec" / "loss.csv", delimiter=",", skiprows=1)
    assert curve[-20:, 1].mean() < curve[:20, 1].mean()


def test_divergence_aborts(tmp_path):
    data = scenegen.make_dataset(8, 0)
    data[0] = (data[0][0], np.full_like(data[0][1], np.nan), data[0][2])
    cfg = TrainConfig(batch_size=8, steps=3, checkpoint_every=0)
    with pytest.raises(cfm.TrainingDiverged, match="step 0"):
        cfm.train(cfg, data, tmp_path / "nan", SMALL, log_every=0)


def test_prompt_dropping_rate():
    tok = torch.ones(10_000, 8, dtype=torch.long)
    out = cfm.drop_prompts(tok, 0.1, torch.Generator().manual_seed(0))
    rate = (out == 0).all(1).float().mean().item()
    assert abs(rate - 0.1) < 0.01
