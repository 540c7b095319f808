"""Closed-loop evaluation campaigns over a fixed episode-seed set."""
from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from ..inference import Episode, rollout_batch
from .config import RunConfig

CHUNK = 25  # episodes decoded in lockstep


def eval_seeds(cfg: RunConfig) -> list[int]:
    return [cfg.eval_seed + i for i in range(cfg.eval_episodes)]


def summarize(episodes: list[Episode]) -> dict:
    n = len(episodes)
    return {
        "SR": float(np.mean([e.success for e in episodes])) if n else 0.0,
        "graded_score": float(np.mean([e.score for e in episodes])) if n else 0.0,
        "episodes": n,
        "mean_steps": float(np.mean([e.steps for e in episodes])) if n else 0.0,
    }


def run_eval(policy, cfg: RunConfig, out: Path | str | None = None) -> dict:
    """Roll ``policy`` on the config's evaluation seeds; optionally write ``out``.csv and ``out``.json.

    Tasks follow from each episode seed, so two runs with the same config
    see the same starts and goals.
    """
    seeds = eval_seeds(cfg)
    episodes: list[Episode] = []
    for i in range(0, len(seeds), CHUNK):
        episodes += rollout_batch(policy, seeds[i : i + CHUNK], max_steps=cfg.max_episode_steps,
                                  horizon=min(cfg.execute_horizon, policy.p))
    metrics = summarize(episodes)
    if out is not None:
        out = Path(out)
        with open(out.with_suffix(".csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["seed", "task", "success", "score", "steps"])
            for e in episodes:
                w.writerow([e.seed, e.task, int(e.success), f"{e.score:.3f}", e.steps])
        out.with_suffix(".json").write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    return metrics
