import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from wam import flowmatch as fm
from wam import toyworld as tw
from wam.diffcore import AdamState, Rng
from wam.inference import euler
from wam.model import ModelConfig, WorldActionModel

SMALL = dict(d_model=16, heads=2, layers=1, image_h=8, image_w=8)


@pytest.fixture(scope="module")
def demos():
    return [tw.generate_demo(s, h=8, w=8) for s in range(6)]


def test_interpolation_endpoints_exact():
    x = torch.randn(3, 4, 5, dtype=torch.float64)
    eps = torch.randn(3, 4, 5, dtype=torch.float64)
    assert torch.equal(fm.interpolate(x, eps, torch.zeros(3)).x_s, eps)
    assert torch.equal(fm.interpolate(x, eps, torch.ones(3)).x_s, x)
    assert torch.equal(fm.interpolate(x, eps, torch.ones(3)).target_v, x - eps)


@given(st.floats(0, 1), st.integers(0, 2**31))
@settings(max_examples=30, deadline=None)
def test_interpolation_velocity_is_derivative(s, seed):
    g = torch.Generator().manual_seed(seed)
    x, eps = torch.randn(2, 3, generator=g, dtype=torch.float64), torch.randn(2, 3, generator=g, dtype=torch.float64)
    h = 1e-6
    a = fm.interpolate(x, eps, torch.full((2,), s, dtype=torch.float64)).x_s
    b = fm.interpolate(x, eps, torch.full((2,), s + h, dtype=torch.float64)).x_s
    torch.testing.assert_close((b - a) / h, x - eps, rtol=1e-4, atol=1e-4)


def test_sample_flow_draw_order():
    x = torch.zeros(4, 3, dtype=torch.float64)
    f = fm.sample_flow(x, Rng(1))
    r = Rng(1)
    s = r.uniform(4)
    eps = r.normal(12)
    np.testing.assert_array_equal(f.s.numpy(), s)
    np.testing.assert_array_equal(f.epsilon.numpy().reshape(-1), eps)


def test_total_loss_weights():
    lv, la = torch.tensor(2.0), torch.tensor(3.0)
    assert float(fm.total_loss(lv, la, 1.0, 5.0)) == 17.0
    assert float(fm.total_loss(lv, la, 0.0, 5.0)) == 15.0
    with pytest.raises(ValueError):
        fm.total_loss(lv, la, -1.0, 1.0)


def test_euler_constant_field_exact():
    x0 = torch.tensor([0.25, -1.5], dtype=torch.float64)
    v = torch.tensor([0.5, 2.0], dtype=torch.float64)
    for n in (1, 3, 7, 10, 64):
        assert torch.equal(euler(x0, lambda x, s: v, n), x0 + v)
    g = torch.Generator().manual_seed(0)
    for n in range(1, 40):
        x0, v = torch.randn(5, generator=g), torch.randn(5, generator=g)
        assert torch.equal(euler(x0, lambda x, s: v, n), x0 + v)


def test_euler_first_order_convergence():
    c = 1.7
    errs, ns = [], [4, 8, 16, 32, 64]
    for n in ns:
        out = euler(torch.tensor([0.0], dtype=torch.float64), lambda x, s: torch.tensor([c * s], dtype=torch.float64), n)
        errs.append(abs(float(out) - c / 2))
    slope = np.polyfit(np.log(1 / np.array(ns)), np.log(errs), 1)[0]
    assert 0.8 <= slope <= 1.2


def test_window_dataset_alignment(demos):
    cfg = ModelConfig(**SMALL)
    data = fm.WindowDataset(demos, cfg)
    span = max(cfg.p - 1, cfg.K * cfg.delta)
    assert len(data) == sum(d.length - span for d in demos if d.success)
    j, t = data.index[3]
    b = data.batch([3])
    from wam import tokens as tk

    tr = [d for d in demos if d.success][j]
    np.testing.assert_array_equal(b.obs[0].numpy(), tk.patchify(tk.compose_stack(tr.frames[t]), 4).astype(np.float32))
    np.testing.assert_allclose(b.actions[0].numpy(), tk.normalize_actions(tr.actions[t : t + cfg.p].astype(np.float64)), rtol=1e-6)
    fut = tk.patchify(tk.compose_stack(tr.frames[t + cfg.delta]), 4).astype(np.float32)
    np.testing.assert_array_equal(b.future[0, : cfg.frame_tokens].numpy(), fut)
    assert b.instruction[0].tolist()[: len(tr.instruction)] == tr.instruction


def test_window_dataset_excludes_failures(demos):
    cfg = ModelConfig(**SMALL)
    bad = tw.generate_demo(99, h=8, w=8, t_max=3)
    assert not bad.success
    assert len(fm.WindowDataset(demos + [bad], cfg)) == len(fm.WindowDataset(demos, cfg))
    assert len(fm.WindowDataset(demos + [bad], cfg, include_failed=True)) > len(fm.WindowDataset(demos, cfg))
    with pytest.raises(ValueError):
        fm.WindowDataset([bad], cfg)


@pytest.mark.parametrize("mode", fm.MODES)
def test_compute_losses_modes(demos, mode):
    cfg = ModelConfig(**SMALL)
    m = WorldActionModel(cfg)
    b = fm.WindowDataset(demos, cfg).sample(Rng(0), 4)
    out = fm.compute_losses(m, b, Rng(1), mode)
    if mode == "pretrain-video":
        assert float(out["action"].detach()) == 0.0 and float(out["all"].detach()) == float(out["video"].detach())
    elif mode == "action-only":
        assert float(out["video"].detach()) == 0.0 and float(out["all"].detach()) == pytest.approx(5 * float(out["action"].detach()))
    else:
        assert float(out["all"].detach()) == pytest.approx(float(out["video"].detach()) + 5 * float(out["action"].detach()))


def test_action_only_never_builds_future_tokens(demos):
    cfg = ModelConfig(**SMALL)
    m = WorldActionModel(cfg)
    b = fm.WindowDataset(demos, cfg).sample(Rng(0), 4)
    fm.compute_losses(m, b, Rng(1), "action-only")
    assert m.counters["tokens_future"] == 0


def test_joint_loss_value_with_zero_heads(demos):
    # zero heads predict v = 0, so each loss is E|x - eps|^2
    cfg = ModelConfig(precision=64, **SMALL)
    m = WorldActionModel(cfg)
    b = fm.WindowDataset(demos, cfg).sample(Rng(0), 4)
    rng = Rng(5)
    out = fm.compute_losses(m, b, rng, "joint")
    r = Rng(5)
    fa = fm.sample_flow(b.actions, r)
    fv = fm.sample_flow(b.future, r)
    assert float(out["action"].detach()) == pytest.approx(float((fa.target_v**2).mean()), rel=1e-12)
    assert float(out["video"].detach()) == pytest.approx(float((fv.target_v**2).mean()), rel=1e-12)


def test_noised_conditioning_single_pass(demos):
    cfg = ModelConfig(video_conditioning="noised", **SMALL)
    m = WorldActionModel(cfg)
    b = fm.WindowDataset(demos, cfg).sample(Rng(0), 4)
    fm.compute_losses(m, b, Rng(1), "joint")
    assert m.counters["forward_calls"] == 1


def test_pretrain_needs_video():
    cfg = ModelConfig(delta=0, **SMALL)
    with pytest.raises(ValueError):
        fm.compute_losses(WorldActionModel(cfg), None, Rng(0), "pretrain-video")


def test_training_reduces_loss_and_is_deterministic(demos):
    cfg = ModelConfig(**SMALL)
    data = fm.WindowDataset(demos, cfg)
    hp = fm.OptimConfig(lr_init=3e-3, lr_final=3e-4, total_steps=60)
    runs = []
    for _ in range(2):
        m = WorldActionModel(cfg, seed=1)
        _, rec = fm.fit(m, data, 60, seed=2, batch_size=8, hp=hp, log_every=0)
        runs.append(rec)
    assert [r["L_all"] for r in runs[0]] == [r["L_all"] for r in runs[1]]
    first = np.mean([r["L_all"] for r in runs[0][:10]])
    last = np.mean([r["L_all"] for r in runs[0][-10:]])
    assert last < first


def test_fit_resume_matches_uninterrupted(demos):
    cfg = ModelConfig(**SMALL)
    data = fm.WindowDataset(demos, cfg)
    hp = fm.OptimConfig(lr_init=1e-3, total_steps=10)
    a = WorldActionModel(cfg, seed=1)
    _, full = fm.fit(a, data, 10, seed=4, batch_size=4, hp=hp, log_every=0)
    b = WorldActionModel(cfg, seed=1)
    opt, first = fm.fit(b, data, 6, seed=4, batch_size=4, hp=hp, log_every=0)
    opt, rest = fm.fit(b, data, 10, seed=4, batch_size=4, hp=hp, opt=opt, log_every=0)
    assert [r["L_all"] for r in full] == [r["L_all"] for r in first + rest]
    assert all(torch.equal(a.params[k], b.params[k]) for k in a.params)


def test_nan_loss_is_reported(demos):
    cfg = ModelConfig(**SMALL)
    m = WorldActionModel(cfg)
    with torch.no_grad():
        m.params["head_action.w"].fill_(float("nan"))
    b = fm.WindowDataset(demos, cfg).sample(Rng(0), 2)
    with pytest.raises(FloatingPointError):
        fm.train_step(m, b, AdamState(), Rng(0), "joint", 1e-3, fm.OptimConfig())
