"""Data generation, training and model loading shared by the CLI and the ablations."""
from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from functools import partial
from pathlib import Path

import torch

from .. import toyworld as tw
from ..diffcore import splitmix64
from ..flowmatch import WindowDataset, fit
from ..model import ModelConfig, WorldActionModel
from .config import RunConfig
from .formats import load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)


def worker_count() -> int:
    """Parallelism cap from ``WAM_THREADS`` (default 1)."""
    raw = os.environ.get("WAM_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"WAM_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise ValueError("WAM_THREADS must be >= 1")
    return n


def apply_threads() -> None:
    torch.set_num_threads(worker_count())


def demo_seed(seed: int, index: int) -> int:
    return splitmix64(((seed & 0xFFFFFFFF) << 32) | index)[1] >> 1


def _demo(cfg: RunConfig, index: int) -> tw.Trajectory:
    m = cfg.model
    horizon = max(16, m.p + m.K * m.delta)
    return tw.generate_demo(demo_seed(cfg.seed, index), h=m.image_h, w=m.image_w, t_max=cfg.demo_t_max, horizon=horizon)


def generate_dataset(cfg: RunConfig, n: int | None = None) -> list[tw.Trajectory]:
    """``n`` expert demonstrations, identical for any worker count."""
    n = cfg.n_demos if n is None else n
    workers = worker_count()
    if workers == 1 or n < 2:
        return [_demo(cfg, i) for i in range(n)]
    with ProcessPoolExecutor(workers) as pool:
        return list(pool.map(partial(_demo, cfg), range(n), chunksize=8))


def train(cfg: RunConfig, trajectories, *, mode: str | None = None, init: WorldActionModel | None = None,
          resume=None, metrics_path=None, checkpoint_path=None, steps: int | None = None):
    """Train from ``init`` (or a fresh seeded init, or a resumed checkpoint). Returns (model, opt, records).

    ``steps`` is the absolute final step; metrics are appended as JSON lines.
    """
    mode = mode or cfg.mode
    steps = cfg.steps if steps is None else steps
    opt = None
    if resume is not None:
        params, mcfg, _, opt = load_checkpoint(resume, expect=cfg.model)
        model = WorldActionModel(mcfg, params)
    elif init is not None:
        model = WorldActionModel(cfg.model, {k: v.detach().clone() for k, v in init.params.items()})
    else:
        model = WorldActionModel(cfg.model, seed=cfg.seed)
    data = WindowDataset(trajectories, cfg.model)
    log.info("training %s for %d steps on %d windows", mode, steps, len(data))
    fh = open(metrics_path, "a") if metrics_path else None
    try:
        on_step = (lambda rec: fh.write(json.dumps(rec) + "\n")) if fh else None
        opt, records = fit(model, data, steps, seed=cfg.seed, batch_size=cfg.batch_size, mode=mode, hp=cfg.optim(),
                           opt=opt, on_step=on_step)
    finally:
        if fh:
            fh.close()
    if checkpoint_path is not None:
        save_checkpoint(model.params, model.config, opt.step, checkpoint_path, opt)
    return model, opt, records


def load_model(path, expect: ModelConfig | None = None) -> WorldActionModel:
    params, mcfg, _, _ = load_checkpoint(path, expect=expect)
    return WorldActionModel(mcfg, params)


def metrics_file(cfg: RunConfig, name: str) -> Path:
    return Path(f"{cfg.metrics}.{name}.jsonl")
