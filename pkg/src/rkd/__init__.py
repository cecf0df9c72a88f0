"""Robust Knowledge Distillation (RKD) for backdoor-resilient federated learning.

A desk-scale, deterministic simulator: numpy MLPs, Dirichlet Non-IID clients,
backdoor attacks, the RKD server filter (cosine scores, 1-D HDBSCAN, median
selection, ensemble distillation) and reference aggregators.
"""
from .config import ExperimentConfig, parse_config, load_config
from .simulator import run_experiment

__all__ = ["ExperimentConfig", "parse_config", "load_config", "run_experiment"]
__version__ = "0.1.0"
