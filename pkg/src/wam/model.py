"""Shared-block diffusion transformer over the unified token sequence.

One stack of pre-norm blocks processes every token type with the same
projections. Each block: masked self-attention, cross-attention to the
instruction tokens, MLP. Flow time enters additively, one small MLP per
modality. Two heads read velocities off the action and future blocks.
"""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import asdict, dataclass, fields

import torch

from . import tokens as tk
from . import toyworld as tw
from .diffcore import Rng, check_finite, dtype_for, gelu, layer_norm, linear, masked_softmax, softmax, truncated_normal

INIT_STD = 0.02
TIME_SCALE = 1000.0


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 64
    heads: int = 4
    layers: int = 4
    mlp_ratio: int = 4
    p: int = 8
    delta: int = 4
    image_h: int = 16
    image_w: int = 16
    patch: int = 4
    state_dim: int = tw.STATE_DIM
    action_dim: int = tw.ACTION_DIM
    state_tokens: int = 1
    vocab_size: int = len(tw.WORDS)
    max_instruction: int = 16
    lambda_action: float = 5.0
    lambda_video: float = 1.0
    flow_steps: int = 10
    precision: int = 32
    mask_mode: str = "causal"
    action_self_attention: bool = True
    cross_attention: str = "all"
    video_conditioning: str = "teacher"

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ValueError(f"d_model {self.d_model} not divisible by heads {self.heads}")
        if self.d_model % 4:
            raise ValueError("d_model must be divisible by 4 for the 2D visual encoding")
        if self.image_h % self.patch or (3 * self.image_w) % self.patch or self.image_w % self.patch:
            raise ValueError("image size must be divisible by the patch size")
        if self.mask_mode not in ("causal", "full"):
            raise ValueError(f"mask_mode {self.mask_mode!r}")
        if self.cross_attention not in ("all", "none"):
            raise ValueError(f"cross_attention {self.cross_attention!r}")
        if self.video_conditioning not in ("teacher", "noised"):
            raise ValueError(f"video_conditioning {self.video_conditioning!r}")
        if min(self.p, self.layers, self.heads, self.state_tokens, self.flow_steps) < 1 or self.delta < 0:
            raise ValueError("p, layers, heads, state_tokens, flow_steps must be >= 1 and delta >= 0")
        dtype_for(self.precision)

    @property
    def K(self) -> int:
        return tk.future_frame_indices(self.p, self.delta)[1]

    @property
    def frame_offsets(self) -> list[int]:
        return tk.future_frame_indices(self.p, self.delta)[0]

    @property
    def frame_tokens(self) -> int:
        return (self.image_h // self.patch) * (3 * self.image_w // self.patch)

    @property
    def latent_dim(self) -> int:
        return self.patch * self.patch * 3

    @property
    def dtype(self) -> torch.dtype:
        return dtype_for(self.precision)

    @property
    def layout(self) -> tk.SequenceLayout:
        return tk.make_layout(self.frame_tokens, self.state_tokens, self.p, self.delta)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def parameter_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Name -> shape for every learnable tensor, in a fixed order."""
    d, r = cfg.d_model, cfg.mlp_ratio * cfg.d_model
    shapes: dict[str, tuple[int, ...]] = {
        "patch_proj.w": (cfg.latent_dim, d),
        "patch_proj.b": (d,),
        "state_proj.w": (cfg.state_dim, cfg.state_tokens * d),
        "state_proj.b": (cfg.state_tokens * d,),
        "action_proj.w": (cfg.action_dim, d),
        "action_proj.b": (d,),
        "instr_embed": (cfg.vocab_size, d),
    }
    if cfg.K:
        shapes["frame_embed"] = (cfg.K, d)
    for mod in ("action", "video"):
        shapes[f"time_{mod}.w1"] = (d, d)
        shapes[f"time_{mod}.b1"] = (d,)
        shapes[f"time_{mod}.w2"] = (d, d)
        shapes[f"time_{mod}.b2"] = (d,)
    for i in range(cfg.layers):
        pre = f"layers.{i}."
        shapes.update(
            {
                pre + "ln1.g": (d,),
                pre + "ln1.b": (d,),
                pre + "attn.qkv.w": (d, 3 * d),
                pre + "attn.qkv.b": (3 * d,),
                pre + "attn.out.w": (d, d),
                pre + "attn.out.b": (d,),
                pre + "ln2.g": (d,),
                pre + "ln2.b": (d,),
                pre + "xattn.q.w": (d, d),
                pre + "xattn.q.b": (d,),
                pre + "xattn.kv.w": (d, 2 * d),
                pre + "xattn.kv.b": (2 * d,),
                pre + "xattn.out.w": (d, d),
                pre + "xattn.out.b": (d,),
                pre + "ln3.g": (d,),
                pre + "ln3.b": (d,),
                pre + "mlp.w1": (d, r),
                pre + "mlp.b1": (r,),
                pre + "mlp.w2": (r, d),
                pre + "mlp.b2": (d,),
            }
        )
    shapes.update(
        {
            "final_ln.g": (d,),
            "final_ln.b": (d,),
            "head_action.w": (d, cfg.action_dim),
            "head_action.b": (cfg.action_dim,),
            "head_video.w": (d, cfg.latent_dim),
            "head_video.b": (cfg.latent_dim,),
        }
    )
    return shapes


def init_params(cfg: ModelConfig, seed: int) -> dict[str, torch.Tensor]:
    """Truncated-normal weights, zero biases, unit norm gains, zero heads."""
    rng = Rng(seed)
    params = {}
    for name, shape in parameter_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if name.startswith("head_"):
            t = torch.zeros(shape, dtype=cfg.dtype)
        elif leaf == "g":
            t = torch.ones(shape, dtype=cfg.dtype)
        elif leaf.startswith("b") and len(shape) == 1:
            t = torch.zeros(shape, dtype=cfg.dtype)
        else:
            t = truncated_normal(rng, shape, INIT_STD, cfg.dtype)
        params[name] = t.requires_grad_(True)
    return params


class KVCache:
    """Per-layer keys/values of a finalized [obs; state; action] prefix."""

    def __init__(self, signature: tuple, n_prefix: int):
        self.signature = signature
        self.n_prefix = n_prefix
        self.keys: list[torch.Tensor] = []
        self.values: list[torch.Tensor] = []
        self.instruction: tuple[torch.Tensor, torch.Tensor] | None = None


class WorldActionModel:
    """Parameters plus the forward computation; holds no optimizer state."""

    def __init__(self, config: ModelConfig, params: dict[str, torch.Tensor] | None = None, seed: int = 0):
        self.config = config
        self.params = params if params is not None else init_params(config, seed)
        expected = parameter_shapes(config)
        if list(self.params) != list(expected) or any(
            tuple(self.params[k].shape) != v for k, v in expected.items()
        ):
            raise ValueError("parameter table does not match the config")
        d = config.d_model
        self.buffers = {
            "pe_visual": torch.from_numpy(
                tk.visual_encoding_table(config.image_h, 3 * config.image_w, config.patch, d)
            ).to(config.dtype),
            "pe_temporal": torch.from_numpy(
                tk.temporal_encoding_table(max(config.p, config.state_tokens, config.max_instruction), d)
            ).to(config.dtype),
        }
        self.layout = config.layout
        self.counters: Counter = Counter()
        self.version = 0  # bumped by every optimizer step

    @property
    def signature(self) -> tuple:
        return (tuple(sorted(self.config.to_dict().items())), id(self.params), self.version)

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.params.values())

    def eval_params(self) -> None:
        for p in self.params.values():
            p.requires_grad_(False)

    def train_params(self) -> None:
        for p in self.params.values():
            p.requires_grad_(True)

    # -- conditioning ---------------------------------------------------

    def encode_instruction(self, ids) -> tuple[torch.Tensor, torch.Tensor]:
        """Embed padded id rows (pad = -1). Returns (tokens (B, Li, d), key mask (B, Li))."""
        ids = torch.as_tensor(ids, dtype=torch.long)
        if ids.dim() == 1:
            ids = ids[None]
        if ids.numel() and int(ids.max()) >= self.config.vocab_size:
            raise ValueError(f"instruction id {int(ids.max())} outside vocabulary of {self.config.vocab_size}")
        if ids.shape[1] > self.config.max_instruction:
            raise ValueError(f"instruction longer than {self.config.max_instruction} tokens")
        valid = ids >= 0
        emb = self.params["instr_embed"][ids.clamp(min=0)]
        emb = emb + self.buffers["pe_temporal"][: ids.shape[1]]
        emb = emb * valid[..., None].to(emb.dtype)
        return emb, valid

    def time_embedding(self, s: torch.Tensor, modality: str) -> torch.Tensor:
        """Sinusoid of the flow time through a 2-layer MLP; (B,) -> (B, d)."""
        s = torch.as_tensor(s, dtype=self.config.dtype).reshape(-1)
        table = torch.from_numpy(tk.sinusoid((s * TIME_SCALE).detach().numpy(), self.config.d_model)).to(
            self.config.dtype
        )
        pre = f"time_{modality}."
        h = gelu(linear(table, self.params[pre + "w1"], self.params[pre + "b1"]))
        return linear(h, self.params[pre + "w2"], self.params[pre + "b2"])

    # -- blocks ---------------------------------------------------------

    def _split_heads(self, x: torch.Tensor) -> torch.Tensor:
        B, L, d = x.shape
        h = self.config.heads
        return x.reshape(B, L, h, d // h).transpose(1, 2)

    def _merge_heads(self, x: torch.Tensor) -> torch.Tensor:
        B, h, L, dh = x.shape
        return x.transpose(1, 2).reshape(B, L, h * dh)

    def _self_attention(self, i, x, layout, mask, dense, collect=None):
        P = self.params
        pre = f"layers.{i}."
        d = self.config.d_model
        h = layer_norm(x, P[pre + "ln1.g"], P[pre + "ln1.b"])
        qkv = linear(h, P[pre + "attn.qkv.w"], P[pre + "attn.qkv.b"])
        q, k, v = (self._split_heads(t) for t in qkv.split(d, dim=-1))
        if collect is not None:
            collect.append((k, v))
        q = q * (1.0 / math.sqrt(d // self.config.heads))
        if dense:
            allowed = torch.from_numpy(mask.allowed)
            att = masked_softmax(q @ k.transpose(-1, -2), allowed)
            out = att @ v
        else:
            out = torch.cat(
                [softmax(q[:, :, lo:hi] @ k[:, :, :lim].transpose(-1, -2)) @ v[:, :, :lim]
                 for lo, hi, lim in _query_groups(layout, mask)],
                dim=2,
            )
        return x + linear(self._merge_heads(out), P[pre + "attn.out.w"], P[pre + "attn.out.b"])

    def _cross_attention(self, i, x, instr):
        if self.config.cross_attention == "none" or instr is None:
            return x
        emb, valid = instr
        if emb.shape[1] == 0 or not bool(valid.any()):
            return x
        P = self.params
        pre = f"layers.{i}."
        d = self.config.d_model
        h = layer_norm(x, P[pre + "ln2.g"], P[pre + "ln2.b"])
        q = self._split_heads(linear(h, P[pre + "xattn.q.w"], P[pre + "xattn.q.b"]))
        kv = linear(emb, P[pre + "xattn.kv.w"], P[pre + "xattn.kv.b"])
        k, v = (self._split_heads(t) for t in kv.split(d, dim=-1))
        has = valid.any(dim=1)
        # rows of samples without any instruction token get a dummy key and are zeroed below
        keymask = (valid | ~has[:, None])[:, None, None, :]
        scores = (q * (1.0 / math.sqrt(d // self.config.heads))) @ k.transpose(-1, -2)
        att = masked_softmax(scores, keymask.expand_as(scores))
        out = linear(self._merge_heads(att @ v), P[pre + "xattn.out.w"], P[pre + "xattn.out.b"])
        if not bool(has.all()):
            out = out * has[:, None, None].to(out.dtype)
        return x + out

    def _mlp(self, i, x):
        P = self.params
        pre = f"layers.{i}."
        h = layer_norm(x, P[pre + "ln3.g"], P[pre + "ln3.b"])
        return x + linear(gelu(linear(h, P[pre + "mlp.w1"], P[pre + "mlp.b1"])), P[pre + "mlp.w2"], P[pre + "mlp.b2"])

    def _add_flow_time(self, x, layout, s_action, s_video):
        parts = []
        sl_a, sl_f = layout.slice("action"), layout.slice("future")
        parts.append(x[:, : sl_a.start])
        if layout.n_a:
            parts.append(x[:, sl_a] + self.time_embedding(s_action, "action")[:, None, :])
        if layout.n_f:
            parts.append(x[:, sl_f] + self.time_embedding(s_video, "video")[:, None, :])
        return torch.cat(parts, dim=1)

    def _heads(self, x, layout):
        P = self.params
        x = layer_norm(x, P["final_ln.g"], P["final_ln.b"])
        out = {"hidden": x}
        out["action_velocity"] = (
            linear(x[:, layout.slice("action")], P["head_action.w"], P["head_action.b"]) if layout.n_a else None
        )
        out["video_velocity"] = (
            linear(x[:, layout.slice("future")], P["head_video.w"], P["head_video.b"]) if layout.n_f else None
        )
        return out

    def forward(self, tokens, layout, mask, instruction, s_action, s_video=None, *, dense: bool = False, check: bool = True):
        """Run the stack on an embedded sequence.

        ``instruction`` is the output of :meth:`encode_instruction` (or None).
        ``s_action``/``s_video`` are per-sample flow times. ``dense=True``
        evaluates attention with the full token-level mask instead of the
        per-block key prefixes; both give the same numbers.
        """
        if tokens.shape[1] != layout.total:
            raise ValueError(f"sequence has {tokens.shape[1]} tokens, layout expects {layout.total}")
        self.counters["forward_calls"] += 1
        self.counters["tokens_processed"] += tokens.shape[0] * tokens.shape[1]
        x = self._add_flow_time(tokens, layout, s_action, s_video)
        for i in range(self.config.layers):
            x = self._self_attention(i, x, layout, mask, dense)
            x = self._cross_attention(i, x, instruction)
            x = self._mlp(i, x)
        out = self._heads(x, layout)
        if check:
            check_finite(out["hidden"], "forward hidden states")
        return out

    # -- cached extension --------------------------------------------------

    def kv_cache_forward(self, tokens, layout, instruction, s_action) -> KVCache:
        """Cache per-layer keys/values of a finalized [obs; state; action] prefix."""
        if layout.n_f:
            raise ValueError("cache prefix must not contain future tokens")
        if self.config.mask_mode != "causal":
            raise ValueError("a prefix cache is only exact under the causal mask")
        mask = tk.build_block_mask(layout, self.config.mask_mode, self.config.action_self_attention)
        cache = KVCache(self.signature, layout.total)
        cache.instruction = instruction
        self.counters["prefix_passes"] += 1
        x = self._add_flow_time(tokens, layout, s_action, None)
        for i in range(self.config.layers):
            kv: list = []
            x = self._self_attention(i, x, layout, mask, False, collect=kv)
            cache.keys.append(kv[0][0])
            cache.values.append(kv[0][1])
            x = self._cross_attention(i, x, instruction)
            x = self._mlp(i, x)
        return cache

    def extend_with_cache(self, cache: KVCache, future_tokens, s_video) -> dict:
        """Process future tokens whose queries read cached prefix keys plus their own."""
        if cache.signature != self.signature:
            raise ValueError("cache was built for a different model/config")
        if future_tokens.shape[1] == 0:
            return {"video_velocity": None, "hidden": future_tokens}
        self.counters["cache_extensions"] += 1
        P = self.params
        d = self.config.d_model
        x = future_tokens + self.time_embedding(s_video, "video")[:, None, :]
        for i in range(self.config.layers):
            pre = f"layers.{i}."
            h = layer_norm(x, P[pre + "ln1.g"], P[pre + "ln1.b"])
            q, k, v = (self._split_heads(t) for t in linear(h, P[pre + "attn.qkv.w"], P[pre + "attn.qkv.b"]).split(d, dim=-1))
            q = q * (1.0 / math.sqrt(d // self.config.heads))
            k = torch.cat([cache.keys[i], k], dim=2)
            v = torch.cat([cache.values[i], v], dim=2)
            att = softmax(q @ k.transpose(-1, -2))
            x = x + linear(self._merge_heads(att @ v), P[pre + "attn.out.w"], P[pre + "attn.out.b"])
            x = self._cross_attention(i, x, cache.instruction)
            x = self._mlp(i, x)
        x = layer_norm(x, P["final_ln.g"], P["final_ln.b"])
        return {"video_velocity": linear(x, P["head_video.w"], P["head_video.b"]), "hidden": x}


def _query_groups(layout: tk.SequenceLayout, mask: tk.BlockMask) -> list[tuple[int, int, int]]:
    """Contiguous query ranges sharing one key prefix: [(start, stop, key_limit)]."""
    groups: list[list[int]] = []
    for b in tk.BLOCKS:
        sl = layout.slice(b)
        if sl.stop == sl.start:
            continue
        lim = mask.key_limits[b]
        if groups and groups[-1][2] == lim and groups[-1][1] == sl.start:
            groups[-1][1] = sl.stop
        else:
            groups.append([sl.start, sl.stop, lim])
    return [tuple(g) for g in groups]
