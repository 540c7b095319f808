import json

import numpy as np
import pytest
import torch

from wam import inference as inf
from wam import toyworld as tw
from wam.diffcore import Rng, sample_normal
from wam.model import ModelConfig, WorldActionModel

SMALL = dict(d_model=16, heads=2, layers=2, image_h=8, image_w=8)


def perturbed(cfg, seed=0):
    m = WorldActionModel(cfg, seed=seed)
    rng = Rng(seed + 7)
    with torch.no_grad():
        for p in m.params.values():
            p.add_(sample_normal(rng, p.shape, p.dtype) * 0.05)
    return m


def context(m, n=3):
    cfg = m.config
    states = [tw.reset(Rng(i), i % tw.N_TASKS) for i in range(n)]
    views = np.stack([tw.render_views(s, cfg.image_h, cfg.image_w) for s in states])
    return inf.make_context(m, views, np.stack([s.vector() for s in states]), [tw.instruction_tokens(i) for i in range(n)])


@pytest.mark.parametrize("precision", [32, 64])
def test_joint_and_action_only_agree(precision):
    m = perturbed(ModelConfig(precision=precision, **SMALL))
    ctx = context(m)
    a1 = inf.decode_actions(m, ctx, [Rng(i) for i in range(3)])
    a2, frames, _ = inf.decode_joint(m, ctx, [Rng(i) for i in range(3)])
    assert torch.equal(a1, a2)
    assert frames.shape == (3, m.config.K, 8, 24, 3)
    assert frames.min() >= 0 and frames.max() <= 1


def test_full_mask_joint_differs():
    m = perturbed(ModelConfig(mask_mode="full", **SMALL))
    ctx = context(m)
    a1 = inf.decode_actions(m, ctx, [Rng(i) for i in range(3)])
    a2, _, _ = inf.decode_joint(m, ctx, [Rng(i) for i in range(3)])
    assert not torch.equal(a1, a2)


@pytest.mark.parametrize("precision", [32, 64])
def test_cached_video_matches_uncached(precision):
    m = perturbed(ModelConfig(precision=precision, **SMALL))
    ctx = context(m)
    raw, cache = inf.decode_actions(m, ctx, [Rng(i) for i in range(3)], raw=True, return_cache=True)
    _, l1 = inf.decode_video_from_cache(m, cache, [Rng(10 + i) for i in range(3)])
    _, l2 = inf.decode_video_uncached(m, ctx, raw, [Rng(10 + i) for i in range(3)])
    assert float((l1 - l2).abs().max()) <= 1e-4


def test_action_only_never_touches_future():
    m = perturbed(ModelConfig(**SMALL))
    ctx = context(m)
    m.counters.clear()
    inf.decode_actions(m, ctx, [Rng(0), Rng(1), Rng(2)])
    assert m.counters["tokens_future"] == 0
    assert m.counters["forward_calls"] == m.config.flow_steps
    inf.decode_joint(m, ctx, [Rng(0), Rng(1), Rng(2)])
    assert m.counters["tokens_future"] > 0


def test_batch_decodes_like_rows():
    m = perturbed(ModelConfig(precision=64, **SMALL))
    ctx = context(m)
    full = inf.decode_actions(m, ctx, [Rng(i) for i in range(3)])
    one = inf.decode_actions(m, inf.Context(ctx.obs[1:2], ctx.state[1:2], ctx.instruction[1:2]), [Rng(1)])
    torch.testing.assert_close(full[1:2], one, rtol=1e-12, atol=1e-12)


def test_decode_is_seeded():
    m = perturbed(ModelConfig(**SMALL))
    ctx = context(m)
    a = inf.decode_actions(m, ctx, [Rng(4)] * 1 + [Rng(5), Rng(6)])
    b = inf.decode_actions(m, ctx, [Rng(4), Rng(5), Rng(6)])
    assert torch.equal(a, b)


def test_zero_model_returns_noise_scaled():
    # zero heads: the flow leaves the initial noise in place
    m = WorldActionModel(ModelConfig(precision=64, **SMALL))
    ctx = context(m, 1)
    raw = inf.decode_actions(m, ctx, [Rng(3)], raw=True)
    noise = torch.from_numpy(Rng(3).normal(m.config.p * 3).reshape(1, m.config.p, 3))
    assert torch.equal(raw, noise)


def test_euler_linear_field_error_shrinks():
    errs = []
    for n in (5, 10, 20, 40):
        out = inf.euler(torch.zeros(1, dtype=torch.float64), lambda x, s: torch.full((1,), 2.0 * s, dtype=torch.float64), n)
        errs.append(abs(float(out) - 1.0))
    assert all(a > b for a, b in zip(errs, errs[1:]))
    assert errs[0] == pytest.approx(1 / 5)
    with pytest.raises(ValueError):
        inf.EulerPath(torch.zeros(1), 0)


def test_expert_and_random_policies():
    eps = inf.rollout_batch(inf.ExpertPolicy(8), list(range(40)))
    assert np.mean([e.success for e in eps]) >= 0.95
    assert all(e.score == 1.0 for e in eps if e.success)
    eps = inf.rollout_batch(inf.RandomPolicy(8), list(range(20)))
    assert np.mean([e.success for e in eps]) <= 0.1


def test_rollout_batch_matches_single():
    m = perturbed(ModelConfig(**SMALL))
    pol = inf.ModelPolicy(m)
    batch = inf.rollout_batch(pol, [3, 4], max_steps=12)
    single = inf.rollout_batch(pol, [4], max_steps=12)
    assert (batch[1].steps, batch[1].success, batch[1].score) == (single[0].steps, single[0].success, single[0].score)


def test_rollout_horizon_and_trace(tmp_path):
    ok, score, trace = inf.rollout(inf.ExpertPolicy(8), seed=1, max_steps=30, horizon=3)
    assert len(trace) >= 2 and trace[-1][1] is None
    paths = inf.dump_trace(trace[:3], tmp_path)
    data = paths[0].read_bytes()
    assert data.startswith(b"P6\n48 16\n255\n")
    assert len(data) == len(b"P6\n48 16\n255\n") + 16 * 48 * 3
    with pytest.raises(ValueError):
        inf.rollout_batch(inf.ExpertPolicy(8), [0], horizon=9)


def test_bench_report_fields():
    m = WorldActionModel(ModelConfig(**SMALL))
    rep = inf.bench_latency(m, repetitions=2, warmup=1)
    assert set(rep) == {"action_only_ms", "joint_ms", "cached_video_ms", "context_tokens", "joint_tokens"}
    assert rep["context_tokens"] < rep["joint_tokens"]
    assert json.loads(inf.bench_record(rep)) == rep
    rep0 = inf.bench_latency(WorldActionModel(ModelConfig(delta=0, **SMALL)), repetitions=2, warmup=0)
    assert rep0["joint_ms"] is None and rep0["context_tokens"] == rep0["joint_tokens"]
