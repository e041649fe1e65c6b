import json

from ._core import (
    Error,
    Model,
    cli,
    generate_synthetic,
    linear_cka,
    split_indices,
    task_metrics,
)
from . import _core


def train(mode, train_set, val_set, config=None, task=0):
    """train_set and val_set are (features, protected, labels) tuples."""
    cfg = json.dumps(config) if config else ""
    return _core.train(mode, *train_set, *val_set, config_json=cfg, task=task)


def evaluate(probabilities, protected, labels, baseline):
    return json.loads(_core.evaluate_json(probabilities, protected, labels, baseline))


def report(model):
    return json.loads(model.report_json())


__all__ = [
    "Error",
    "Model",
    "cli",
    "evaluate",
    "generate_synthetic",
    "linear_cka",
    "report",
    "split_indices",
    "task_metrics",
    "train",
]
