"""Confidence-based subgraph matching for edge denoising and GNN regularisation."""

from .config import Config
from .graph import Graph, generate_synthetic, load_bundle, save_bundle
from .matcher import EdgeCoefficients, train_matcher
from .trainer import RunReport, run, run_gcn

__all__ = [
    "Config", "EdgeCoefficients", "Graph", "RunReport", "generate_synthetic", "load_bundle",
    "run", "run_gcn", "save_bundle", "train_matcher",
]
__version__ = "0.1.0"
