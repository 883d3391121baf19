"""Relative molecule self-attention toolkit.

Pure-numpy implementation of a graph transformer for small molecules:
parsing (SDF V2000, SMILES subset), pair-relation featurization, a
reverse-mode autodiff engine, the relative self-attention stack with
its published variants, pretraining label construction, and a small
training/evaluation CLI.
"""

from . import autodiff, cli, featurize, model, molio, pretrain, rmsa, train

__all__ = [
    "autodiff",
    "cli",
    "featurize",
    "model",
    "molio",
    "pretrain",
    "rmsa",
    "train",
]

__version__ = "0.1.0"
