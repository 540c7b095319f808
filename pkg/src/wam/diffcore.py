"""Differentiable tensor core.

Tensors are ``torch.Tensor`` and reverse-mode gradients come from torch
autograd. The model only touches the ops defined here: masked softmax and the
Adam update are written out; layer norm and tanh-GELU call torch's fused
kernels for speed (the test suite checks them against the explicit formulas).
Random numbers never come from torch: :class:`Rng` is xoshiro256** seeded
through SplitMix64 with Box-Muller normals, so streams do not depend on the
torch build.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from numba import njit

_MASK64 = (1 << 64) - 1

# ---------------------------------------------------------------------------
# precision


def dtype_for(precision: int) -> torch.dtype:
    if precision == 32:
        return torch.float32
    if precision == 64:
        return torch.float64
    raise ValueError(f"precision must be 32 or 64, got {precision}")


def check_finite(t: torch.Tensor, what: str = "tensor") -> torch.Tensor:
    """Raise if ``t`` holds NaN or Inf; returns ``t`` so it can wrap expressions."""
    if not bool(torch.isfinite(t).all()):
        bad = int((~torch.isfinite(t)).sum())
        raise FloatingPointError(f"{what}: {bad} non-finite value(s) in shape {tuple(t.shape)}")
    return t


# ---------------------------------------------------------------------------
# random numbers


def splitmix64(x: int) -> tuple[int, int]:
    """One SplitMix64 step. Returns (new_state, output)."""
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x, z ^ (z >> 31)


@njit(cache=True)
def _rotl(x, k):
    return (x << np.uint64(k)) | (x >> np.uint64(64 - k))


@njit(cache=True)
def _fill_u64(s, out):
    for i in range(out.shape[0]):
        s1 = s[1]
        out[i] = _rotl(s1 * np.uint64(5), 7) * np.uint64(9)
        t = s1 << np.uint64(17)
        s[2] ^= s[0]
        s[3] ^= s[1]
        s[1] ^= s[2]
        s[0] ^= s[3]
        s[2] ^= t
        s[3] = _rotl(s[3], 45)


@njit(cache=True)
def _fill_uniform(s, out):
    scale = 1.0 / 9007199254740992.0  # 2**-53
    for i in range(out.shape[0]):
        s1 = s[1]
        r = _rotl(s1 * np.uint64(5), 7) * np.uint64(9)
        t = s1 << np.uint64(17)
        s[2] ^= s[0]
        s[3] ^= s[1]
        s[1] ^= s[2]
        s[0] ^= s[3]
        s[2] ^= t
        s[3] = _rotl(s[3], 45)
        out[i] = float(r >> np.uint64(11)) * scale


@njit(cache=True)
def _box_muller(u, out):
    # u holds 2*ceil(n/2) uniforms; pairs (u1, u2) -> (r cos, r sin)
    n = out.shape[0]
    two_pi = 2.0 * math.pi
    for j in range((n + 1) // 2):
        r = math.sqrt(-2.0 * math.log(1.0 - u[2 * j]))
        theta = two_pi * u[2 * j + 1]
        out[2 * j] = r * math.cos(theta)
        if 2 * j + 1 < n:
            out[2 * j + 1] = r * math.sin(theta)


class Rng:
    """xoshiro256** generator seeded from a 64-bit integer via SplitMix64.

    Normal variates use Box-Muller on consecutive uniform pairs; an odd
    request discards the spare sine variate, so every call consumes
    ``2 * ceil(n / 2)`` raw draws.
    """

    def __init__(self, seed: int):
        x = int(seed) & _MASK64
        words = []
        for _ in range(4):
            x, z = splitmix64(x)
            words.append(z)
        self.state = np.array(words, dtype=np.uint64)

    def next_u64(self, n: int) -> np.ndarray:
        out = np.empty(n, dtype=np.uint64)
        _fill_u64(self.state, out)
        return out

    def uniform(self, n: int) -> np.ndarray:
        """``n`` doubles in [0, 1) with 53 random bits each."""
        out = np.empty(n, dtype=np.float64)
        _fill_uniform(self.state, out)
        return out

    def normal(self, n: int) -> np.ndarray:
        u = self.uniform(2 * ((n + 1) // 2))
        out = np.empty(n, dtype=np.float64)
        _box_muller(u, out)
        return out

    def integers(self, high: int, n: int) -> np.ndarray:
        """``n`` integers in [0, high) by scaling uniforms (bias < 2**-40 for small ``high``)."""
        return np.minimum((self.uniform(n) * high).astype(np.int64), high - 1)

    def spawn(self) -> "Rng":
        """Independent child stream seeded from this stream's next output."""
        return Rng(int(self.next_u64(1)[0]))


def sample_normal(rng: Rng, shape, dtype: torch.dtype = torch.float64) -> torch.Tensor:
    shape = tuple(shape)
    n = int(np.prod(shape)) if shape else 1
    return torch.from_numpy(rng.normal(n).reshape(shape)).to(dtype)


def sample_uniform01(rng: Rng) -> float:
    return float(rng.uniform(1)[0])


def truncated_normal(rng: Rng, shape, std: float, dtype: torch.dtype) -> torch.Tensor:
    """Normal(0, std) truncated to +-2 std by redrawing out-of-range entries."""
    shape = tuple(shape)
    n = int(np.prod(shape))
    vals = rng.normal(n)
    bad = np.abs(vals) > 2.0
    while bad.any():
        vals[bad] = rng.normal(int(bad.sum()))
        bad = np.abs(vals) > 2.0
    return torch.from_numpy(vals.reshape(shape) * std).to(dtype)


# ---------------------------------------------------------------------------
# differentiable ops


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """``a @ b``; a batched ``a`` against a 2D ``b`` is always folded into one 2D product.

    torch otherwise picks folded or batched kernels depending on which inputs
    require grad, and the two round differently.
    """
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: inner extents differ, {tuple(a.shape)} x {tuple(b.shape)}")
    if b.dim() == 2 and a.dim() > 2:
        return (a.reshape(-1, a.shape[-1]) @ b).reshape(*a.shape[:-1], b.shape[-1])
    return a @ b


def linear(x: torch.Tensor, w: torch.Tensor, b: torch.Tensor | None = None) -> torch.Tensor:
    y = matmul(x, w)
    return y if b is None else y + b


def masked_softmax(logits: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Softmax over the last axis restricted to ``mask``; blocked entries get exactly 0.

    The row max is taken over allowed entries only, so the result does not
    depend on the values sitting under blocked entries.
    """
    mask = torch.as_tensor(mask, dtype=torch.bool)
    if not bool(mask.any(dim=-1).all()):
        raise ValueError("masked_softmax: a row has no allowed entry")
    neg_inf = torch.tensor(float("-inf"), dtype=logits.dtype)
    masked = torch.where(mask, logits, neg_inf)
    row_max = masked.amax(dim=-1, keepdim=True).detach()
    e = torch.where(mask, torch.exp(masked - row_max), torch.zeros((), dtype=logits.dtype))
    return e / e.sum(dim=-1, keepdim=True)


def softmax(logits: torch.Tensor) -> torch.Tensor:
    """Unmasked row softmax (max-subtracted inside the fused kernel)."""
    return torch.softmax(logits, dim=-1)


LN_EPS = 1e-5


def layer_norm(x: torch.Tensor, gain: torch.Tensor, bias: torch.Tensor, eps: float = LN_EPS) -> torch.Tensor:
    """Per-row (x - mean) / sqrt(biased var + eps), then gain and bias (fused kernel)."""
    if x.shape[-1] != gain.shape[-1] or gain.shape != bias.shape:
        raise ValueError(f"layer_norm: feature dim {x.shape[-1]} vs gain {tuple(gain.shape)}")
    return F.layer_norm(x, (x.shape[-1],), gain, bias, eps)


# tanh approximation constants
GELU_C = math.sqrt(2.0 / math.pi)
GELU_A = 0.044715


def gelu(x: torch.Tensor) -> torch.Tensor:
    """0.5 x (1 + tanh(GELU_C (x + GELU_A x^3))), via torch's fused tanh-approximate kernel."""
    return F.gelu(x, approximate="tanh")


def backward(loss: torch.Tensor, params: dict[str, torch.Tensor] | None = None) -> None:
    """Populate ``.grad`` on every leaf reachable from ``loss``.

    Parameters in ``params`` that the loss never touches get explicit zero
    gradients rather than ``None``.
    """
    if loss.numel() != 1 or loss.dim() != 0:
        raise ValueError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    if params is not None:
        for p in params.values():
            p.grad = None
    loss.backward()
    if params is not None:
        for p in params.values():
            if p.grad is None:
                p.grad = torch.zeros_like(p)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)


def adam_step(
    params: dict[str, torch.Tensor],
    grads: dict[str, torch.Tensor],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> AdamState:
    """One bias-corrected Adam update with decoupled weight decay, in place.

    Raises ``FloatingPointError`` before touching anything if a gradient is
    not finite.
    """
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise ValueError(f"adam_step: grad shape {tuple(g.shape)} != param {name} {tuple(params[name].shape)}")
        if not bool(torch.isfinite(g).all()):
            raise FloatingPointError(f"adam_step: non-finite gradient for {name}")
    state.step += 1
    bc1 = 1.0 - beta1**state.step
    bc2 = 1.0 - beta2**state.step
    with torch.no_grad():
        for name, g in grads.items():
            p = params[name]
            m = state.m.get(name)
            if m is None:
                m = state.m[name] = torch.zeros_like(p)
                state.v[name] = torch.zeros_like(p)
            v = state.v[name]
            m.mul_(beta1).add_(g, alpha=1.0 - beta1)
            v.mul_(beta2).addcmul_(g, g, value=1.0 - beta2)
            if weight_decay:
                p.mul_(1.0 - lr * weight_decay)
            p.sub_(lr * (m / bc1) / (torch.sqrt(v / bc2) + eps))
    return state


def cosine_lr(step: int, total: int, lr_init: float, lr_final: float) -> float:
    """Cosine decay from ``lr_init`` at step 0 to ``lr_final`` at ``total``."""
    if total <= 1:
        return lr_init
    frac = min(max(step / (total - 1), 0.0), 1.0)
    return lr_final + 0.5 * (lr_init - lr_final) * (1.0 + math.cos(math.pi * frac))
