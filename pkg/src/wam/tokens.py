"""Unified token sequence [obs; state; action; future] and its block mask.

Visual latents are exact pixel patches rescaled to [-1, 1]. Attention
constraints are defined between blocks; within a block every token may see
every other (action self-attention can be switched off for ablations).
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property, lru_cache

import numpy as np
import torch

from . import toyworld as tw
from .diffcore import linear

BLOCKS = ("obs", "state", "action", "future")

# ---------------------------------------------------------------------------
# views and patches


def compose_views(left: np.ndarray, front: np.ndarray, right: np.ndarray) -> np.ndarray:
    """Side-by-side composite, width order left | front | right."""
    if not (left.shape == front.shape == right.shape):
        raise ValueError(f"view shapes differ: {left.shape}, {front.shape}, {right.shape}")
    return np.concatenate([left, front, right], axis=-2)


def decompose_views(image: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    w3 = image.shape[-2]
    if w3 % 3:
        raise ValueError(f"composite width {w3} not divisible by 3")
    w = w3 // 3
    return image[..., :, :w, :], image[..., :, w : 2 * w, :], image[..., :, 2 * w :, :]


def compose_stack(frames: np.ndarray) -> np.ndarray:
    """(..., 3 views, H, W, C) -> (..., H, 3W, C)."""
    return compose_views(frames[..., 0, :, :, :], frames[..., 1, :, :, :], frames[..., 2, :, :, :])


def patchify(image: np.ndarray, patch: int = 4) -> np.ndarray:
    """(..., H, W, C) in [0, 1] -> (..., n_patches, patch*patch*C) in [-1, 1].

    Patches are row-major over the grid; each vector is (ph, pw, c) ordered.
    Computed in float64, where the affine map is exact for float32 pixels.
    """
    *lead, h, w, c = image.shape
    if h % patch or w % patch:
        raise ValueError(f"image {h}x{w} not divisible by patch {patch}")
    gh, gw = h // patch, w // patch
    x = np.asarray(image, dtype=np.float64).reshape(*lead, gh, patch, gw, patch, c)
    nd = len(lead)
    x = x.transpose(*range(nd), nd, nd + 2, nd + 1, nd + 3, nd + 4)
    x = x.reshape(*lead, gh * gw, patch * patch * c)
    return 2.0 * x - 1.0


def unpatchify(latents: np.ndarray, h: int, w: int, patch: int = 4, channels: int = 3) -> np.ndarray:
    lat = np.asarray(latents, dtype=np.float64)
    *lead, n, dim = lat.shape
    gh, gw = h // patch, w // patch
    if n != gh * gw or dim != patch * patch * channels:
        raise ValueError(f"latents {lat.shape} do not tile a {h}x{w} image with patch {patch}")
    nd = len(lead)
    x = lat.reshape(*lead, gh, gw, patch, patch, channels)
    x = x.transpose(*range(nd), nd, nd + 2, nd + 1, nd + 3, nd + 4)
    return ((x.reshape(*lead, h, w, channels) + 1.0) / 2.0).astype(np.float32)


def patch_grid_positions(h: int, w: int, patch: int) -> np.ndarray:
    """(n_patches, 2) integer (row, col) of each patch in patchify order."""
    gh, gw = h // patch, w // patch
    r, c = np.divmod(np.arange(gh * gw), gw)
    return np.stack([r, c], axis=1)


# ---------------------------------------------------------------------------
# normalisation of low-dimensional streams


def normalize_state(states):
    """Positions [0,1] and grip flag {0,1} -> [-1, 1]."""
    return 2.0 * states - 1.0


def normalize_actions(actions):
    """Velocities scaled by 1/v_max, grip command [0,1] -> [-1, 1]."""
    out = actions.copy() if isinstance(actions, np.ndarray) else actions.clone()
    out[..., :2] = actions[..., :2] / tw.V_MAX
    out[..., 2] = 2.0 * actions[..., 2] - 1.0
    return out


def denormalize_actions(actions):
    out = actions.copy() if isinstance(actions, np.ndarray) else actions.clone()
    out[..., :2] = actions[..., :2] * tw.V_MAX
    out[..., 2] = (actions[..., 2] + 1.0) / 2.0
    return out


# ---------------------------------------------------------------------------
# layout and mask


def future_frame_indices(p: int, delta: int) -> tuple[list[int], int]:
    """Offsets of the predicted future frames inside a p-step chunk and their count."""
    if p < 1 or delta < 0:
        raise ValueError(f"need p >= 1 and delta >= 0, got p={p}, delta={delta}")
    if delta == 0:
        return [], 0
    k = p // delta
    return [i * delta for i in range(1, k + 1)], k


@dataclass(frozen=True)
class SequenceLayout:
    n_o: int
    n_s: int
    n_a: int
    n_f: int
    K: int
    frame_tokens: int

    def __post_init__(self):
        if self.n_f != self.K * self.frame_tokens:
            raise ValueError(f"n_f={self.n_f} != K*frame_tokens={self.K * self.frame_tokens}")

    @property
    def sizes(self) -> tuple[int, int, int, int]:
        return (self.n_o, self.n_s, self.n_a, self.n_f)

    @property
    def offsets(self) -> tuple[int, int, int, int]:
        o = np.concatenate([[0], np.cumsum(self.sizes)[:-1]])
        return tuple(int(v) for v in o)

    @property
    def total(self) -> int:
        return sum(self.sizes)

    @property
    def context(self) -> int:
        """Tokens before the future block."""
        return self.n_o + self.n_s + self.n_a

    def slice(self, block: str) -> slice:
        i = BLOCKS.index(block)
        start = self.offsets[i]
        return slice(start, start + self.sizes[i])

    def block_of(self, index: int) -> str:
        for name, off, size in zip(BLOCKS, self.offsets, self.sizes):
            if off <= index < off + size:
                return name
        raise IndexError(index)

    def without_future(self) -> "SequenceLayout":
        return SequenceLayout(self.n_o, self.n_s, self.n_a, 0, 0, self.frame_tokens)


def make_layout(n_obs: int, n_state: int, p: int, delta: int) -> SequenceLayout:
    _, k = future_frame_indices(p, delta)
    return SequenceLayout(n_obs, n_state, p, k * n_obs, k, n_obs)


# which key blocks each query block may read, in causal mode
CAUSAL_RULES = {
    "obs": ("obs", "state"),
    "state": ("obs", "state"),
    "action": ("obs", "state", "action"),
    "future": ("obs", "state", "action", "future"),
}


def block_rules(mask_mode: str = "causal", action_self_attention: bool = True) -> dict[str, tuple[str, ...]]:
    if mask_mode == "full":
        return {b: BLOCKS for b in BLOCKS}
    if mask_mode != "causal":
        raise ValueError(f"mask_mode must be 'causal' or 'full', got {mask_mode!r}")
    rules = dict(CAUSAL_RULES)
    if not action_self_attention:
        rules["action"] = ("obs", "state")
    return rules


@dataclass(frozen=True)
class BlockMask:
    """Token-level attention mask derived from block rules.

    Every rule set used here lets a query block read a prefix of the block
    order, so ``key_limits`` (exclusive end of the readable prefix, per
    block) is an exact compact encoding of ``allowed``.
    """

    layout: SequenceLayout
    mask_mode: str = "causal"
    action_self_attention: bool = True

    @cached_property
    def rules(self) -> dict[str, tuple[str, ...]]:
        return block_rules(self.mask_mode, self.action_self_attention)

    @cached_property
    def allowed(self) -> np.ndarray:
        L = self.layout
        m = np.zeros((L.total, L.total), dtype=bool)
        for q in BLOCKS:
            qs = L.slice(q)
            for k in self.rules[q]:
                m[qs, L.slice(k)] = True
        return m

    @cached_property
    def key_limits(self) -> dict[str, int]:
        L = self.layout
        limits = {}
        for q in BLOCKS:
            end = max(L.slice(k).stop for k in self.rules[q])
            rows = self.allowed[L.slice(q)]
            if rows.size and not (rows[:, :end].all() and not rows[:, end:].any()):
                raise ValueError(f"readable blocks for {q} are not a prefix: {self.rules[q]}")
            limits[q] = end
        return limits

    def block_table(self) -> list[list[bool]]:
        return [[k in self.rules[q] for k in BLOCKS] for q in BLOCKS]


@lru_cache(maxsize=64)
def build_block_mask(layout: SequenceLayout, mask_mode: str = "causal", action_self_attention: bool = True) -> BlockMask:
    mask = BlockMask(layout, mask_mode, action_self_attention)
    allowed = mask.allowed
    if layout.total and not allowed.any(axis=1).all():
        raise ValueError("mask has a fully blocked row")
    return mask


def format_block_table(mask: BlockMask) -> str:
    head = "query\\key " + " ".join(f"{b:>7}" for b in BLOCKS)
    rows = [head]
    for q, row in zip(BLOCKS, mask.block_table()):
        rows.append(f"{q:>9} " + " ".join(f"{'allow' if v else '-':>7}" for v in row))
    return "\n".join(rows)


# ---------------------------------------------------------------------------
# positional encodings


def sinusoid(positions, dim: int, base: float = 10000.0) -> np.ndarray:
    """Interleaved sin/cos table: out[..., 2i] = sin(pos * w_i), out[..., 2i+1] = cos(pos * w_i)."""
    if dim % 2:
        raise ValueError(f"sinusoid dim must be even, got {dim}")
    pos = np.asarray(positions, dtype=np.float64)[..., None]
    freqs = base ** (-np.arange(dim // 2, dtype=np.float64) * 2.0 / dim)
    out = np.empty(pos.shape[:-1] + (dim,), dtype=np.float64)
    out[..., 0::2] = np.sin(pos * freqs)
    out[..., 1::2] = np.cos(pos * freqs)
    return out


def positional_encoding(kind: str, index, dim: int, grid_w: int | None = None) -> np.ndarray:
    """Fixed encoding for one token.

    ``visual-2d`` takes ``(row, col)`` (or a flat patch index plus ``grid_w``)
    and spends the first half of the channels on the row and the second half
    on the column. ``temporal-1d`` encodes a chunk step.
    """
    if kind == "visual-2d":
        if dim % 4:
            raise ValueError(f"visual encoding needs dim divisible by 4, got {dim}")
        if isinstance(index, (int, np.integer)):
            if grid_w is None:
                raise ValueError("flat visual index needs grid_w")
            row, col = divmod(int(index), grid_w)
        else:
            row, col = index
        return np.concatenate([sinusoid(row, dim // 2), sinusoid(col, dim // 2)])
    if kind == "temporal-1d":
        return sinusoid(index, dim)
    raise ValueError(f"unknown encoding kind {kind!r}")


def visual_encoding_table(h: int, w: int, patch: int, dim: int) -> np.ndarray:
    if dim % 4:
        raise ValueError(f"visual encoding needs dim divisible by 4, got {dim}")
    rc = patch_grid_positions(h, w, patch)
    return np.concatenate([sinusoid(rc[:, 0], dim // 2), sinusoid(rc[:, 1], dim // 2)], axis=1)


def temporal_encoding_table(n: int, dim: int) -> np.ndarray:
    return sinusoid(np.arange(n), dim)


# ---------------------------------------------------------------------------
# sequence assembly


def embed_obs(model, obs):
    prm = model.params
    if obs.shape[1] != model.config.frame_tokens:
        raise ValueError(f"expected {model.config.frame_tokens} observation tokens, got {obs.shape[1]}")
    return linear(obs, prm["patch_proj.w"], prm["patch_proj.b"]) + model.buffers["pe_visual"]


def embed_state(model, state):
    cfg, prm = model.config, model.params
    t_s = linear(state, prm["state_proj.w"], prm["state_proj.b"]).reshape(state.shape[0], cfg.state_tokens, cfg.d_model)
    return t_s + model.buffers["pe_temporal"][: cfg.state_tokens]


def embed_actions(model, actions):
    cfg, prm = model.config, model.params
    if actions.shape[1] != cfg.p:
        raise ValueError(f"expected {cfg.p} action tokens, got {actions.shape[1]}")
    return linear(actions, prm["action_proj.w"], prm["action_proj.b"]) + model.buffers["pe_temporal"][: cfg.p]


def embed_future(model, future):
    """Future patch latents: shared patch projector, 2D encoding, learned frame index."""
    cfg, prm = model.config, model.params
    if cfg.K == 0:
        raise ValueError("config has K=0: no future block")
    if future is None or future.shape[1] != cfg.K * cfg.frame_tokens:
        raise ValueError("missing or mis-sized future frames")
    model.counters["tokens_future"] += future.shape[0] * future.shape[1]
    pe = model.buffers["pe_visual"].repeat(cfg.K, 1)
    frame_ids = torch.arange(cfg.K).repeat_interleave(cfg.frame_tokens)
    return linear(future, prm["patch_proj.w"], prm["patch_proj.b"]) + pe + prm["frame_embed"][frame_ids]


def assemble_sequence(model, obs, state, actions, future=None):
    """Embed each stream and concatenate [T_o; T_s; T_a; T_f].

    Returns ``(tokens, layout, mask)``. With ``future=None`` the future block
    is never built and the layout/mask shrink to the context.
    """
    cfg = model.config
    parts = [embed_obs(model, obs), embed_state(model, state), embed_actions(model, actions)]
    if future is not None:
        parts.append(embed_future(model, future))
        layout = model.layout
    else:
        layout = model.layout.without_future()
    tokens = torch.cat(parts, dim=1)
    return tokens, layout, build_block_mask(layout, cfg.mask_mode, cfg.action_self_attention)
