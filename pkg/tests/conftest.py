import json
import os

import numpy as np
import pytest

from rmat import featurize, model, molio

HERE = os.path.dirname(os.path.abspath(__file__))


@pytest.fixture(scope="session")
def golden():
    with open(os.path.join(HERE, "golden", "fixtures.json"), encoding="utf-8") as fh:
        return json.load(fh)


def tiny_model_config(**overrides) -> model.ModelConfig:
    """Small-but-real config so tests stay fast."""
    base = dict(
        n_layers=1,
        n_heads=2,
        d_model=16,
        relation_hidden=8,
        pool_heads=2,
        pool_hidden=16,
        mlp_hidden=16,
        distance=featurize.DistanceConfig(n_emb=8),
    )
    base.update(overrides)
    return model.ModelConfig(**base)


def synthetic_smiles(rng: np.random.Generator) -> str:
    """Valence-safe random chain or ring over C/N/O heavy atoms."""
    n = int(rng.integers(2, 9))
    symbols = [str(rng.choice(["C", "C", "C", "C", "N", "O"])) for _ in range(n)]
    text = "".join(symbols)
    if n >= 3 and rng.random() < 0.3:
        text = symbols[0] + "1" + "".join(symbols[1:]) + "1"
    return text


def synthetic_corpus(seed: int, size: int):
    rng = np.random.default_rng([seed, 71])
    return [molio.parse_smiles(synthetic_smiles(rng)) for _ in range(size)]
