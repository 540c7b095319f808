"""Flow-matching objectives and the optimisation loop.

For a clean target ``x`` and noise ``eps`` at flow time ``s``::

    x_s = (1 - s) * eps + s * x        target velocity = x - eps

The action and video branches draw independent flow times. By default the
video branch is conditioned on clean (teacher-forced) actions in a pass of
its own, and the action loss runs on the context-only sequence, which under
the causal mask yields exactly the action outputs of a joint pass.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass

import numpy as np
import torch

from . import tokens as tk
from .diffcore import AdamState, Rng, adam_step, backward, check_finite, cosine_lr, splitmix64
from .model import WorldActionModel
from .toyworld import Trajectory

log = logging.getLogger(__name__)

MODES = ("joint", "pretrain-video", "action-only")


@dataclass
class FlowSample:
    s: torch.Tensor  # (B,)
    epsilon: torch.Tensor
    x_s: torch.Tensor
    target_v: torch.Tensor


def interpolate(x: torch.Tensor, eps: torch.Tensor, s: torch.Tensor) -> FlowSample:
    s = torch.as_tensor(s, dtype=x.dtype).reshape(-1)
    sb = s.reshape(-1, *([1] * (x.dim() - 1)))
    return FlowSample(s=s, epsilon=eps, x_s=(1.0 - sb) * eps + sb * x, target_v=x - eps)


def sample_flow(x: torch.Tensor, rng: Rng, s=None) -> FlowSample:
    """Draw per-sample s ~ U(0,1) (unless forced) and eps ~ N(0, I), in that order."""
    check_finite(x, "flow target")
    B = x.shape[0]
    if s is None:
        s = torch.from_numpy(rng.uniform(B))
    else:
        s = torch.as_tensor(s, dtype=torch.float64).reshape(-1).expand(B)
    eps = torch.from_numpy(rng.normal(x.numel()).reshape(tuple(x.shape))).to(x.dtype)
    return interpolate(x, eps, s.to(x.dtype))


def mse(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    return ((pred - target) ** 2).mean()


def total_loss(l_video, l_action, lambda_video: float, lambda_action: float):
    if lambda_video < 0 or lambda_action < 0:
        raise ValueError("loss weights must be non-negative")
    return lambda_video * l_video + lambda_action * l_action


# ---------------------------------------------------------------------------
# data


@dataclass
class Batch:
    obs: torch.Tensor  # (B, n_o, latent)
    state: torch.Tensor  # (B, state_dim), normalised
    actions: torch.Tensor  # (B, p, action_dim), normalised
    future: torch.Tensor | None  # (B, K * n_o, latent)
    instruction: torch.Tensor  # (B, Li) long, -1 padded

    @property
    def size(self) -> int:
        return self.obs.shape[0]


class WindowDataset:
    """All training windows of a trajectory set, pre-tokenised.

    A window starting at ``t`` uses frame/state ``t``, actions ``t..t+p-1``
    and future frames ``t + k*delta`` for ``k = 1..K``.
    """

    def __init__(self, trajectories: list[Trajectory], config, *, include_failed: bool = False):
        self.config = config
        p, K, delta = config.p, config.K, config.delta
        span = max(p - 1, K * delta)
        self.latents, self.states, self.actions, self.instructions = [], [], [], []
        index = []
        for tr in trajectories:
            if not tr.success and not include_failed:
                continue
            if tr.length <= span:
                continue
            comp = tk.compose_stack(tr.frames)
            self.latents.append(torch.from_numpy(tk.patchify(comp, config.patch)).to(config.dtype))
            self.states.append(torch.from_numpy(tk.normalize_state(tr.states.astype(np.float64))).to(config.dtype))
            self.actions.append(torch.from_numpy(tk.normalize_actions(tr.actions.astype(np.float64))).to(config.dtype))
            self.instructions.append(list(tr.instruction))
            j = len(self.latents) - 1
            index.extend((j, t) for t in range(tr.length - span))
        if not index:
            raise ValueError("no usable training windows")
        self.index = np.array(index, dtype=np.int64)
        self.max_instr = max(len(i) for i in self.instructions)

    def __len__(self) -> int:
        return len(self.index)

    def batch(self, rows) -> Batch:
        cfg = self.config
        offsets = cfg.frame_offsets
        obs, st, act, fut, ins = [], [], [], [], []
        for r in rows:
            j, t = self.index[int(r)]
            obs.append(self.latents[j][t])
            st.append(self.states[j][t])
            act.append(self.actions[j][t : t + cfg.p])
            if cfg.K:
                fut.append(torch.cat([self.latents[j][t + o] for o in offsets], dim=0))
            ids = self.instructions[j]
            ins.append(ids + [-1] * (self.max_instr - len(ids)))
        return Batch(
            obs=torch.stack(obs),
            state=torch.stack(st),
            actions=torch.stack(act),
            future=torch.stack(fut) if cfg.K else None,
            instruction=torch.tensor(ins, dtype=torch.long),
        )

    def sample(self, rng: Rng, size: int) -> Batch:
        return self.batch(rng.integers(len(self), size))


# ---------------------------------------------------------------------------
# losses


def video_loss(model: WorldActionModel, batch: Batch, flow: FlowSample, actions=None, s_action=None, instruction=None):
    """MSE of the future-block velocity, conditioned on obs, state, actions, instruction.

    ``actions`` defaults to the clean batch actions at flow time 1.
    """
    if model.config.K == 0:
        raise ValueError("video loss needs K >= 1")
    if actions is None:
        actions = batch.actions
        s_action = torch.ones(batch.size, dtype=model.config.dtype)
    instr = instruction if instruction is not None else model.encode_instruction(batch.instruction)
    tokens, layout, mask = tk.assemble_sequence(model, batch.obs, batch.state, actions, flow.x_s)
    out = model.forward(tokens, layout, mask, instr, s_action, flow.s)
    return mse(out["video_velocity"], flow.target_v), out


def action_loss(model: WorldActionModel, batch: Batch, flow: FlowSample, future_flow: FlowSample | None = None, instruction=None):
    """MSE of the action-block velocity conditioned on obs, state, instruction.

    Under the causal mask no future tokens are built. Under the full mask the
    action block reads the noised future block from ``future_flow`` when one
    is given (joint training of the unmasked ablation).
    """
    instr = instruction if instruction is not None else model.encode_instruction(batch.instruction)
    if model.config.mask_mode == "full" and future_flow is not None:
        tokens, layout, mask = tk.assemble_sequence(model, batch.obs, batch.state, flow.x_s, future_flow.x_s)
        out = model.forward(tokens, layout, mask, instr, flow.s, future_flow.s)
    else:
        tokens, layout, mask = tk.assemble_sequence(model, batch.obs, batch.state, flow.x_s, None)
        out = model.forward(tokens, layout, mask, instr, flow.s, None)
    return mse(out["action_velocity"], flow.target_v), out


def compute_losses(model: WorldActionModel, batch: Batch, rng: Rng, mode: str = "joint") -> dict:
    """Sample flows (actions first, then video) and evaluate the mode's losses."""
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    cfg = model.config
    use_video = mode in ("joint", "pretrain-video") and cfg.K > 0
    use_action = mode in ("joint", "action-only")
    if mode == "pretrain-video" and cfg.K == 0:
        raise ValueError("pretrain-video needs K >= 1")
    zero = torch.zeros((), dtype=cfg.dtype)
    fa = sample_flow(batch.actions, rng) if use_action else None
    fv = sample_flow(batch.future, rng) if use_video else None
    instr = model.encode_instruction(batch.instruction)
    l_video, l_action = zero, zero
    if use_video and use_action and cfg.video_conditioning == "noised":
        tokens, layout, mask = tk.assemble_sequence(model, batch.obs, batch.state, fa.x_s, fv.x_s)
        out = model.forward(tokens, layout, mask, instr, fa.s, fv.s)
        l_video = mse(out["video_velocity"], fv.target_v)
        l_action = mse(out["action_velocity"], fa.target_v)
    else:
        if use_video:
            l_video, _ = video_loss(model, batch, fv, instruction=instr)
        if use_action:
            l_action, _ = action_loss(model, batch, fa, future_flow=fv, instruction=instr)
    lam_v = cfg.lambda_video if use_video else 0.0
    lam_a = cfg.lambda_action if use_action else 0.0
    l_all = total_loss(l_video, l_action, lam_v, lam_a)
    return {"video": l_video, "action": l_action, "all": l_all}


@dataclass
class OptimConfig:
    lr_init: float = 1e-4
    lr_final: float = 1e-6
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    total_steps: int = 1000


def step_rng(seed: int, step: int) -> Rng:
    """Stream for one optimizer step, a pure function of (seed, step)."""
    x = (seed * 0x100000001B3) ^ (step + 1)
    return Rng(splitmix64(x & ((1 << 64) - 1))[1])


def train_step(model: WorldActionModel, batch: Batch, opt: AdamState, rng: Rng, mode: str, lr: float, hp: OptimConfig) -> dict:
    """One forward/backward/Adam update. Returns float loss components."""
    model.train_params()
    losses = compute_losses(model, batch, rng, mode)
    if not bool(torch.isfinite(losses["all"].detach())):
        raise FloatingPointError(
            f"non-finite loss at step {opt.step + 1}: video={float(losses['video'].detach())}, action={float(losses['action'].detach())}"
        )
    backward(losses["all"], model.params)
    grads = {k: p.grad for k, p in model.params.items()}
    adam_step(model.params, grads, opt, lr, hp.beta1, hp.beta2, hp.eps, hp.weight_decay)
    for p in model.params.values():
        p.grad = None
    model.version += 1
    return {k: float(v.detach()) for k, v in losses.items()}


def fit(
    model: WorldActionModel,
    data: WindowDataset,
    steps: int,
    *,
    seed: int,
    batch_size: int,
    mode: str = "joint",
    hp: OptimConfig | None = None,
    opt: AdamState | None = None,
    on_step=None,
    log_every: int = 100,
) -> tuple[AdamState, list[dict]]:
    """Run optimizer steps ``opt.step + 1 .. steps``; returns the state and metric records.

    Batches and noise for step ``i`` depend only on ``(seed, i)``, so a run
    resumed from a checkpoint with its Adam moments reproduces the trace of
    an uninterrupted one.
    """
    hp = hp or OptimConfig(total_steps=steps)
    opt = opt or AdamState()
    records = []
    t0 = time.perf_counter()
    while opt.step < steps:
        i = opt.step
        rng = step_rng(seed, i)
        batch = data.sample(rng, batch_size)
        lr = cosine_lr(i, hp.total_steps, hp.lr_init, hp.lr_final)
        losses = train_step(model, batch, opt, rng, mode, lr, hp)
        rec = {"step": opt.step, "L_video": losses["video"], "L_action": losses["action"], "L_all": losses["all"],
               "lr": lr, "wall_time": time.perf_counter() - t0}
        records.append(rec)
        if on_step is not None:
            on_step(rec)
        if log_every and opt.step % log_every == 0:
            log.info("step %d  L_all %.4f  L_video %.4f  L_action %.4f", opt.step, rec["L_all"], rec["L_video"], rec["L_action"])
    return opt, records
