"""Decoding paths, closed-loop rollouts and the latency benchmark.

All decoders integrate the learned velocity field with fixed-step explicit
Euler from s=0 to s=1. Noise is drawn per sample from that sample's own
:class:`Rng`, actions before video, so a batch decodes exactly as its rows
would one by one.
"""
from __future__ import annotations

import json
import statistics
import time
from dataclasses import dataclass, field

import numpy as np
import torch

from . import tokens as tk
from . import toyworld as tw
from .diffcore import Rng, check_finite
from .model import KVCache, WorldActionModel


@dataclass
class Context:
    """Conditioning for one decode: w_t = (instruction, state, observation)."""

    obs: torch.Tensor  # (B, n_o, latent)
    state: torch.Tensor  # (B, state_dim), normalised
    instruction: torch.Tensor  # (B, Li) long, -1 padded

    @property
    def size(self) -> int:
        return self.obs.shape[0]


def make_context(model: WorldActionModel, views: np.ndarray, states: np.ndarray, instructions: list[list[int]]) -> Context:
    """From raw (B, 3, H, W, 3) views, (B, state_dim) states and token lists."""
    cfg = model.config
    lat = tk.patchify(tk.compose_stack(np.asarray(views)), cfg.patch)
    width = max((len(i) for i in instructions), default=0)
    ids = [list(i) + [-1] * (width - len(i)) for i in instructions]
    return Context(
        obs=torch.from_numpy(lat).to(cfg.dtype),
        state=torch.from_numpy(tk.normalize_state(np.asarray(states, dtype=np.float64))).to(cfg.dtype),
        instruction=torch.tensor(ids, dtype=torch.long).reshape(len(instructions), width),
    )


def _rng_list(rngs, n: int) -> list[Rng]:
    if isinstance(rngs, Rng):
        return [rngs] * n if n == 1 else [rngs.spawn() for _ in range(n)]
    rngs = list(rngs)
    if len(rngs) != n:
        raise ValueError(f"need {n} generators, got {len(rngs)}")
    return rngs


def _noise(rngs: list[Rng], shape, dtype) -> torch.Tensor:
    n = int(np.prod(shape))
    return torch.stack([torch.from_numpy(r.normal(n).reshape(shape)) for r in rngs]).to(dtype)


def _times(n: int, size: int, dtype) -> list[torch.Tensor]:
    return [torch.full((size,), i / n, dtype=dtype) for i in range(n)]


class EulerPath:
    """Fixed-step explicit Euler from s=0 to s=1.

    The state is kept as ``x_k = x_0 + (k/N) * mean(v_0 .. v_{k-1})``, which
    is the usual recurrence ``x_{k+1} = x_k + v_k / N`` rearranged. The
    running mean of a constant field is exact, so ``x_N = x_0 + v``
    holds bit for bit for every ``N``.
    """

    def __init__(self, x0: torch.Tensor, n_steps: int):
        if n_steps < 1:
            raise ValueError("need at least one Euler step")
        self.x0 = x0
        self.x = x0
        self.n = n_steps
        self.k = 0
        self.mean = torch.zeros_like(x0)

    @property
    def s(self) -> float:
        return self.k / self.n

    def update(self, v: torch.Tensor) -> torch.Tensor:
        self.k += 1
        self.mean = self.mean + (v - self.mean) / self.k
        self.x = self.x0 + (self.k / self.n) * self.mean
        return self.x


def euler(x0: torch.Tensor, velocity, n_steps: int) -> torch.Tensor:
    """Integrate ``dx/ds = velocity(x, s)`` over [0, 1] in ``n_steps`` Euler steps."""
    path = EulerPath(x0, n_steps)
    for _ in range(n_steps):
        path.update(velocity(path.x, path.s))
    return path.x


@torch.no_grad()
def decode_actions(model: WorldActionModel, ctx: Context, rngs, n_steps: int | None = None, *, raw: bool = False,
                   return_cache: bool = False):
    """Action-only decoding: integrate the action block without any future tokens.

    Returns the chunk in environment units ((B, p, action_dim); model units
    if ``raw``). With ``return_cache`` also returns a :class:`KVCache` of the
    final [obs; state; action] context for later video decoding.
    """
    cfg = model.config
    n_steps = n_steps or cfg.flow_steps
    rngs = _rng_list(rngs, ctx.size)
    a = _noise(rngs, (cfg.p, cfg.action_dim), cfg.dtype)
    instr = model.encode_instruction(ctx.instruction)
    t_o = tk.embed_obs(model, ctx.obs)
    t_s = tk.embed_state(model, ctx.state)
    layout = model.layout.without_future()
    mask = tk.build_block_mask(layout, cfg.mask_mode, cfg.action_self_attention)
    path = EulerPath(a, n_steps)
    for s in _times(n_steps, ctx.size, cfg.dtype):
        tokens = torch.cat([t_o, t_s, tk.embed_actions(model, path.x)], dim=1)
        a = path.update(model.forward(tokens, layout, mask, instr, s)["action_velocity"])
    check_finite(a, "decoded actions")
    out = a if raw else tk.denormalize_actions(a)
    if return_cache:
        tokens = torch.cat([t_o, t_s, tk.embed_actions(model, a)], dim=1)
        cache = model.kv_cache_forward(tokens, layout, instr, torch.ones(ctx.size, dtype=cfg.dtype))
        return out, cache
    return out


def latents_to_frames(model: WorldActionModel, latents: torch.Tensor) -> np.ndarray:
    """(B, K * n_o, latent) -> (B, K, H, 3W, 3) images clamped to [0, 1]."""
    cfg = model.config
    B = latents.shape[0]
    lat = latents.detach().to(torch.float64).numpy().reshape(B, cfg.K, cfg.frame_tokens, cfg.latent_dim)
    img = tk.unpatchify(lat, cfg.image_h, 3 * cfg.image_w, cfg.patch)
    return np.clip(img, 0.0, 1.0)


@torch.no_grad()
def decode_joint(model: WorldActionModel, ctx: Context, rngs, n_steps: int | None = None, *, raw: bool = False):
    """Denoise the action and future blocks together. Returns (actions, frames)."""
    cfg = model.config
    if cfg.K == 0:
        raise ValueError("no video branch: config has K=0")
    n_steps = n_steps or cfg.flow_steps
    rngs = _rng_list(rngs, ctx.size)
    a = _noise(rngs, (cfg.p, cfg.action_dim), cfg.dtype)
    f = _noise(rngs, (cfg.K * cfg.frame_tokens, cfg.latent_dim), cfg.dtype)
    instr = model.encode_instruction(ctx.instruction)
    t_o = tk.embed_obs(model, ctx.obs)
    t_s = tk.embed_state(model, ctx.state)
    layout = model.layout
    mask = tk.build_block_mask(layout, cfg.mask_mode, cfg.action_self_attention)
    pa, pf = EulerPath(a, n_steps), EulerPath(f, n_steps)
    for s in _times(n_steps, ctx.size, cfg.dtype):
        tokens = torch.cat([t_o, t_s, tk.embed_actions(model, pa.x), tk.embed_future(model, pf.x)], dim=1)
        out = model.forward(tokens, layout, mask, instr, s, s)
        a = pa.update(out["action_velocity"])
        f = pf.update(out["video_velocity"])
    check_finite(a, "decoded actions")
    return (a if raw else tk.denormalize_actions(a)), latents_to_frames(model, f), f


@torch.no_grad()
def decode_video_from_cache(model: WorldActionModel, cache: KVCache, rngs, n_steps: int | None = None):
    """Denoise future frames against a cached action context. Returns (frames, latents)."""
    cfg = model.config
    if cfg.K == 0:
        raise ValueError("no video branch: config has K=0")
    n_steps = n_steps or cfg.flow_steps
    size = cache.keys[0].shape[0]
    rngs = _rng_list(rngs, size)
    f = _noise(rngs, (cfg.K * cfg.frame_tokens, cfg.latent_dim), cfg.dtype)
    path = EulerPath(f, n_steps)
    for s in _times(n_steps, size, cfg.dtype):
        f = path.update(model.extend_with_cache(cache, tk.embed_future(model, path.x), s)["video_velocity"])
    check_finite(f, "decoded video latents")
    return latents_to_frames(model, f), f


@torch.no_grad()
def decode_video_uncached(model: WorldActionModel, ctx: Context, actions_raw: torch.Tensor, rngs, n_steps: int | None = None):
    """Reference for :func:`decode_video_from_cache`: full forward passes with fixed actions at s=1."""
    cfg = model.config
    if cfg.K == 0:
        raise ValueError("no video branch: config has K=0")
    n_steps = n_steps or cfg.flow_steps
    rngs = _rng_list(rngs, ctx.size)
    f = _noise(rngs, (cfg.K * cfg.frame_tokens, cfg.latent_dim), cfg.dtype)
    instr = model.encode_instruction(ctx.instruction)
    one = torch.ones(ctx.size, dtype=cfg.dtype)
    path = EulerPath(f, n_steps)
    for s in _times(n_steps, ctx.size, cfg.dtype):
        tokens, layout, mask = tk.assemble_sequence(model, ctx.obs, ctx.state, actions_raw, path.x)
        f = path.update(model.forward(tokens, layout, mask, instr, one, s)["video_velocity"])
    return latents_to_frames(model, f), f


# ---------------------------------------------------------------------------
# policies and rollouts


class ModelPolicy:
    """Chunk policy backed by a model; joint decoding when the mask lets actions see the future."""

    def __init__(self, model: WorldActionModel, n_steps: int | None = None):
        self.model = model
        self.n_steps = n_steps or model.config.flow_steps
        self.p = model.config.p
        model.eval_params()

    def __call__(self, states: list[tw.WorldState], instructions, rngs) -> np.ndarray:
        model = self.model
        cfg = model.config
        views = np.stack([tw.render_views(s, cfg.image_h, cfg.image_w) for s in states])
        vec = np.stack([s.vector() for s in states])
        ctx = make_context(model, views, vec, instructions)
        if cfg.mask_mode == "full" and cfg.K > 0:
            actions = decode_joint(model, ctx, rngs, self.n_steps)[0]
        else:
            actions = decode_actions(model, ctx, rngs, self.n_steps)
        return actions.to(torch.float64).numpy()


class ExpertPolicy:
    """The scripted expert planned open-loop over a chunk (exact, since dynamics are deterministic)."""

    def __init__(self, p: int):
        self.p = p

    def __call__(self, states, instructions, rngs) -> np.ndarray:
        out = np.zeros((len(states), self.p, tw.ACTION_DIM))
        for b, s in enumerate(states):
            for i in range(self.p):
                a = tw.expert_action(s)
                out[b, i] = a
                s = tw.step(s, a)
        return out


class RandomPolicy:
    def __init__(self, p: int):
        self.p = p

    def __call__(self, states, instructions, rngs) -> np.ndarray:
        return np.stack([np.stack([tw.random_action(r) for _ in range(self.p)]) for r in rngs])


@dataclass
class Episode:
    seed: int
    task: int
    success: bool = False
    score: float = 0.0
    steps: int = 0
    trace: list = field(default_factory=list)


def episode_seed(eval_seed: int, episode: int) -> int:
    return (eval_seed * 1_000_003 + episode * 7919 + 17) & ((1 << 63) - 1)


def rollout_batch(policy, seeds: list[int], tasks: list[int] | None = None, max_steps: int = 200,
                  horizon: int | None = None, keep_trace: bool = False) -> list[Episode]:
    """Run episodes in lockstep: decode a chunk, execute its first ``horizon`` actions, re-observe."""
    p = policy.p
    horizon = horizon or max(1, p // 2)
    if not 1 <= horizon <= p:
        raise ValueError(f"execute horizon {horizon} must be in [1, {p}]")
    tasks = tasks if tasks is not None else [tw.task_for_seed(s) for s in seeds]
    rngs = [Rng(s) for s in seeds]
    states = [tw.reset(r, t) for r, t in zip(rngs, tasks)]
    instr = [tw.instruction_tokens(t) for t in tasks]
    eps = [Episode(seed=s, task=t) for s, t in zip(seeds, tasks)]
    active = list(range(len(seeds)))
    while active:
        chunks = policy([states[i] for i in active], [instr[i] for i in active], [rngs[i] for i in active])
        still = []
        for row, i in enumerate(active):
            ep = eps[i]
            for a in chunks[row][:horizon]:
                if keep_trace:
                    ep.trace.append((states[i], np.asarray(a)))
                states[i] = tw.step(states[i], a)
                ep.steps += 1
                if tw.success(states[i]) or ep.steps >= max_steps:
                    break
            if tw.success(states[i]) or ep.steps >= max_steps:
                ep.success = tw.success(states[i])
                ep.score = tw.graded_score(states[i])
                if keep_trace:
                    ep.trace.append((states[i], None))
            else:
                still.append(i)
        active = still
    return eps


def rollout(policy, seed: int, task: int | None = None, max_steps: int = 200, horizon: int | None = None):
    """Single episode. Returns (success, graded score, trace of (state, action))."""
    ep = rollout_batch(policy, [seed], None if task is None else [task], max_steps, horizon, keep_trace=True)[0]
    return ep.success, ep.score, ep.trace


def write_ppm(path, image: np.ndarray) -> None:
    """Binary portable pixmap (P6) of an (H, W, 3) image in [0, 1]."""
    img = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    h, w, _ = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def dump_trace(trace, directory, h: int = 16, w: int = 16) -> list:
    """Write each traced state's composite view as ``frame_XXXX.ppm``."""
    from pathlib import Path

    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, (state, _) in enumerate(trace):
        path = d / f"frame_{i:04d}.ppm"
        write_ppm(path, tk.compose_stack(tw.render_views(state, h, w)))
        paths.append(path)
    return paths


# ---------------------------------------------------------------------------
# latency


def bench_latency(model: WorldActionModel, repetitions: int = 30, warmup: int = 3, seed: int = 0) -> dict:
    """Median wall time (ms) of single-sample decodes on one thread, plus sequence lengths."""
    cfg = model.config
    model.eval_params()
    state = tw.reset(Rng(seed), 0)
    ctx = make_context(model, tw.render_views(state, cfg.image_h, cfg.image_w)[None], state.vector()[None],
                       [tw.instruction_tokens(0)])

    def timed(fn):
        for i in range(warmup):
            fn(i)
        out = []
        for i in range(repetitions):
            t0 = time.perf_counter()
            fn(i)
            out.append((time.perf_counter() - t0) * 1e3)
        return statistics.median(out)

    layout = cfg.layout
    report = {
        "action_only_ms": timed(lambda i: decode_actions(model, ctx, [Rng(i)])),
        "joint_ms": None,
        "cached_video_ms": None,
        "context_tokens": layout.context,
        "joint_tokens": layout.total,
    }
    if cfg.K:
        report["joint_ms"] = timed(lambda i: decode_joint(model, ctx, [Rng(i)]))
        _, cache = decode_actions(model, ctx, [Rng(0)], return_cache=True)
        report["cached_video_ms"] = timed(lambda i: decode_video_from_cache(model, cache, [Rng(i)]))
    return report


def bench_record(report: dict) -> str:
    return json.dumps(report, sort_keys=True)
