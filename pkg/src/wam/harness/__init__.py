"""Operational shell: configs, file formats, evaluation, ablations and the CLI."""
from .config import RunConfig, load_config, parse_config
from .evaluate import run_eval
from .formats import iter_dataset, load_checkpoint, read_dataset, save_checkpoint, write_dataset

__all__ = ["RunConfig", "load_config", "parse_config", "run_eval", "iter_dataset", "load_checkpoint",
           "read_dataset", "save_checkpoint", "write_dataset"]
