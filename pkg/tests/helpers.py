import numpy as np

from oslab import autodiff as ad
from oslab.model import ModelConfig, init_params
from oslab.vocab import EOS


def random_instance(rng: np.random.Generator, T: int, V: int, spread: float = 3.0):
    """Normalized random T x V log-probs and an <eos>-terminated target."""
    logits = rng.normal(scale=spread, size=(T, V))
    slp = ad.log_softmax(logits).data.copy()
    target = list(rng.integers(4, V, size=T - 1)) + [EOS] if V > 4 else [EOS] * T
    return slp, [int(t) for t in target]


def worked_example(eos_second: float = -0.9):
    """Gold log-probs (-0.5, -1.0, -0.1); <eos> log-probs (-3.0, eos_second) at t = 1, 2."""
    V = 6
    target = [4, 5, EOS]
    slp = np.full((3, V), -7.0)
    slp[0, 4], slp[1, 5], slp[2, EOS] = -0.5, -1.0, -0.1
    slp[0, EOS], slp[1, EOS] = -3.0, eos_second
    return slp, target


def tiny_model(V: int = 8, d: int = 4, seed: int = 0, **kw):
    return init_params(ModelConfig(src_vocab=V, tgt_vocab=V, d_embed=d, d_hidden=d, seed=seed, **kw))
