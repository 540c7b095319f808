"""Binary dataset (.wamd) and checkpoint (.wamc) files.

Both are little-endian and start with a 4-byte magic and a u32 version,
validated before anything else is read. Variable-length strings carry a
u16 byte-length prefix; the checkpoint's config text uses a u32 prefix.

Dataset::

    "WAMD" u32 version u32 n_traj
    u16 views u16 H u16 W u16 channels u16 state_dim u16 action_dim u16 vocab_size
    vocab_size x (u16 len, utf-8 word)
    per trajectory:
        u32 T, u8 success, u16 instr_len, instr_len x u16 id
        f32 frames[T, views, H, W, channels], f32 states[T, state_dim], f32 actions[T, action_dim]

Checkpoint::

    "WAMC" u32 version u64 step u32 config_len config_text u32 n_entries
    per entry: u16 name_len name u8 rank rank x u32 dim f32 data

Entries are the model parameters in table order followed, when an optimizer
state is saved, by ``adam.m.<name>`` and ``adam.v.<name>`` moments.
"""
from __future__ import annotations

import struct
from pathlib import Path
from typing import BinaryIO, Iterator

import numpy as np
import torch

from .. import toyworld as tw
from ..diffcore import AdamState
from ..model import ModelConfig, parameter_shapes

DATASET_MAGIC = b"WAMD"
CHECKPOINT_MAGIC = b"WAMC"
VERSION = 1
_HEADER = struct.Struct("<4sII7H")


class FormatError(ValueError):
    """Malformed or truncated file; the message names the byte offset."""


class _Reader:
    def __init__(self, fh: BinaryIO, path):
        self.fh = fh
        self.path = path
        self.offset = 0

    def read(self, n: int, what: str) -> bytes:
        data = self.fh.read(n)
        if len(data) != n:
            raise FormatError(f"{self.path}: truncated {what} at offset {self.offset} (wanted {n} bytes, got {len(data)})")
        self.offset += n
        return data

    def unpack(self, fmt: str, what: str):
        s = struct.Struct("<" + fmt)
        return s.unpack(self.read(s.size, what))

    def array(self, shape, what: str, dtype="<f4") -> np.ndarray:
        n = int(np.prod(shape))
        return np.frombuffer(self.read(n * np.dtype(dtype).itemsize, what), dtype=dtype).reshape(shape)

    def string(self, what: str, wide: bool = False) -> str:
        (n,) = self.unpack("I" if wide else "H", what + " length")
        raw = self.read(n, what)
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError(f"{self.path}: {what} at offset {self.offset - n} is not UTF-8") from None

    def magic(self, expected: bytes):
        got = self.read(4, "magic")
        if got != expected:
            raise FormatError(f"{self.path}: bad magic {got!r} at offset 0, expected {expected!r}")
        (version,) = self.unpack("I", "version")
        if version != VERSION:
            raise FormatError(f"{self.path}: unsupported version {version} at offset 4, expected {VERSION}")


def _pack_string(s: str, wide: bool = False) -> bytes:
    raw = s.encode("utf-8")
    limit = 0xFFFFFFFF if wide else 0xFFFF
    if len(raw) > limit:
        raise ValueError("string too long for its length prefix")
    return struct.pack("<I" if wide else "<H", len(raw)) + raw


# ---------------------------------------------------------------------------
# dataset


def _f32(a) -> bytes:
    return np.ascontiguousarray(a, dtype="<f4").tobytes()


def write_dataset(trajectories: list[tw.Trajectory], path, vocab=tw.WORDS) -> int:
    """Write trajectories; returns the file size in bytes."""
    if not trajectories:
        raise ValueError("no trajectories to write")
    first = trajectories[0]
    _, views, H, W, C = first.frames.shape
    sd, ad = first.states.shape[1], first.actions.shape[1]
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(DATASET_MAGIC, VERSION, len(trajectories), views, H, W, C, sd, ad, len(vocab)))
        for word in vocab:
            fh.write(_pack_string(word))
        for tr in trajectories:
            if tr.frames.shape[1:] != (views, H, W, C) or tr.states.shape[1] != sd or tr.actions.shape[1] != ad:
                raise ValueError("all trajectories in a dataset must share view, image and vector shapes")
            ids = list(tr.instruction)
            fh.write(struct.pack("<IBH", tr.length, int(bool(tr.success)), len(ids)))
            fh.write(np.asarray(ids, dtype="<u2").tobytes())
            fh.write(_f32(tr.frames))
            fh.write(_f32(tr.states))
            fh.write(_f32(tr.actions))
        return fh.tell()


def dataset_size(trajectories, vocab=tw.WORDS) -> int:
    """Expected file size computed from the header fields alone."""
    size = _HEADER.size + sum(2 + len(w.encode("utf-8")) for w in vocab)
    for tr in trajectories:
        T = tr.length
        _, v, H, W, C = tr.frames.shape
        size += 4 + 1 + 2 + 2 * len(tr.instruction)
        size += 4 * T * (v * H * W * C + tr.states.shape[1] + tr.actions.shape[1])
    return size




def iter_dataset(path) -> Iterator[tw.Trajectory]:
    """Stream trajectories one at a time without loading the whole file."""
    with open(path, "rb") as fh:
        r = _Reader(fh, path)
        r.magic(DATASET_MAGIC)
        n, views, H, W, C, sd, ad, nv = r.unpack("I7H", "header")
        vocab = [r.string(f"vocab word {i}") for i in range(nv)]
        for i in range(n):
            T, ok, li = r.unpack("IBH", f"trajectory {i} header")
            ids = r.array((li,), f"trajectory {i} instruction", "<u2").astype(int).tolist()
            if any(t >= nv for t in ids):
                raise FormatError(f"{path}: trajectory {i} instruction id out of vocabulary near offset {r.offset}")
            yield tw.Trajectory(
                instruction=ids,
                frames=r.array((T, views, H, W, C), f"trajectory {i} frames").copy(),
                states=r.array((T, sd), f"trajectory {i} states").copy(),
                actions=r.array((T, ad), f"trajectory {i} actions").copy(),
                success=bool(ok),
            )
        rest = fh.read(1)
        if rest:
            raise FormatError(f"{path}: trailing bytes at offset {r.offset}")


def read_dataset(path) -> list[tw.Trajectory]:
    return list(iter_dataset(path))


# ---------------------------------------------------------------------------
# checkpoint


def config_text(config: ModelConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in config.to_dict().items())


def parse_config_text(text: str) -> ModelConfig:
    from .config import from_mapping

    values = {}
    for line in text.splitlines():
        if line.strip():
            k, v = (s.strip() for s in line.split("=", 1))
            values[k] = v
    return from_mapping(values).model


def save_checkpoint(params: dict, config: ModelConfig, step: int, path, opt: AdamState | None = None) -> None:
    """Parameters (and optionally Adam moments) stored as float32."""
    expected = parameter_shapes(config)
    if list(params) != list(expected) or any(tuple(params[k].shape) != expected[k] for k in expected):
        raise ValueError("parameters do not match the config's parameter table")
    entries = [(k, v) for k, v in params.items()]
    if opt is not None:
        entries += [(f"adam.m.{k}", opt.m[k]) for k in params if k in opt.m]
        entries += [(f"adam.v.{k}", opt.v[k]) for k in params if k in opt.v]
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sIQ", CHECKPOINT_MAGIC, VERSION, int(step)))
        fh.write(_pack_string(config_text(config), wide=True))
        fh.write(struct.pack("<I", len(entries)))
        for name, t in entries:
            a = t.detach().to(torch.float32).numpy()
            fh.write(_pack_string(name))
            fh.write(struct.pack("<B", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape))
            fh.write(_f32(a))


def load_checkpoint(path, expect: ModelConfig | None = None):
    """Returns (params, config, step, adam state or None).

    ``expect`` is a code-side config; any difference from the embedded one
    is an error. Tensors come back in the embedded config's precision.
    """
    with open(path, "rb") as fh:
        r = _Reader(fh, path)
        r.magic(CHECKPOINT_MAGIC)
        (step,) = r.unpack("Q", "step")
        config = parse_config_text(r.string("config", wide=True))
        if expect is not None and expect != config:
            diff = {k: (v, config.to_dict()[k]) for k, v in expect.to_dict().items() if config.to_dict()[k] != v}
            raise ValueError(f"{path}: checkpoint config differs from the expected config: {diff}")
        (n,) = r.unpack("I", "entry count")
        raw = {}
        for i in range(n):
            name = r.string(f"entry {i} name")
            (rank,) = r.unpack("B", f"entry {name} rank")
            shape = r.unpack(f"{rank}I", f"entry {name} dims") if rank else ()
            raw[name] = r.array(shape, f"entry {name} data")
        if fh.read(1):
            raise FormatError(f"{path}: trailing bytes at offset {r.offset}")
    shapes = parameter_shapes(config)
    dtype = config.dtype
    params = {}
    for k, shape in shapes.items():
        if k not in raw:
            raise ValueError(f"{path}: missing parameter {k}")
        if tuple(raw[k].shape) != shape:
            raise ValueError(f"{path}: parameter {k} has shape {raw[k].shape}, table says {shape}")
        params[k] = torch.from_numpy(raw[k].copy()).to(dtype)
    extra = set(raw) - set(shapes) - {f"adam.{m}.{k}" for m in "mv" for k in shapes}
    if extra:
        raise ValueError(f"{path}: unknown entries {sorted(extra)}")
    opt = None
    if any(k.startswith("adam.") for k in raw):
        opt = AdamState(step=int(step))
        for k in shapes:
            if f"adam.m.{k}" in raw:
                opt.m[k] = torch.from_numpy(raw[f"adam.m.{k}"].copy()).to(dtype)
                opt.v[k] = torch.from_numpy(raw[f"adam.v.{k}"].copy()).to(dtype)
    return params, config, int(step), opt
