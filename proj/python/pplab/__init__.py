"""Python bindings for the pplab library."""

import json

from . import _pplab
from ._pplab import (
    ConfigError,
    DomainError,
    Error,
    InputError,
    Model,
    ShapeError,
    TrainingDiverged,
    UndefinedCorrelation,
    collapse_laplacian_pyramid,
    entropy_upper_bound,
    experiment_ids,
    laplacian_pyramid,
    msssim,
    nlpd,
    polyfit_smooth,
    psnr,
    spearman,
)

__version__ = _pplab.__version__


def default_config(experiment):
    return json.loads(_pplab.default_config(experiment))


def run_experiment(experiment, out_dir, config=None, seed=None, steps=None, jobs=1, cache_dir=None):
    """Run one experiment; returns (files, summary, failures)."""
    files, summary, failures = _pplab.run_experiment(
        experiment, json.dumps(config or {}), str(out_dir), seed, steps, jobs,
        None if cache_dir is None else str(cache_dir))
    return files, json.loads(summary), json.loads(failures)


def pdf(density, x):
    return _pplab.pdf(json.dumps(density), x)


def sample(density, n, seed=0):
    """n samples as an (n, dim) array."""
    return _pplab.sample(json.dumps(density), n, seed).T


def train(config):
    """Train from a TrainConfig dict; returns (Model, curve)."""
    return _pplab.train(json.dumps(config))
