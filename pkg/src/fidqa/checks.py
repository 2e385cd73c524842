"""Finite-difference check of the whole model at a tiny configuration."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .model import FidModel, ModelConfig
from .vocab import DECODER_START, EOS, PAD, QUESTION, RESERVED, Vocab

TINY = dict(vocab_size=50, d_model=16, n_heads=2, n_enc_layers=2, n_dec_layers=2, d_ff=32,
            max_input_len=8, max_answer_len=4, dropout_p=0.0)


def tiny_model_gradcheck(seed: int = 0, max_coords: int | None = None, init_std: float = 0.3,
                         h: float = 1e-4) -> dict[str, float]:
    """Max relative error per parameter for the teacher-forced loss, in float64.

    Batch of 2 questions x 2 passages x 8 tokens. ``init_std`` is larger than
    the training default so that no parameter's gradient is vanishingly small.
    """
    vocab = Vocab(list(RESERVED) + [f"w{i}" for i in range(TINY["vocab_size"] - len(RESERVED))])
    model = FidModel(ModelConfig(**TINY, init_std=init_std), vocab, seed=seed, dtype=np.float64)
    rng = np.random.default_rng(seed)
    tokens = rng.integers(len(RESERVED), TINY["vocab_size"], size=(2, 2, 8))
    tokens[..., 0] = QUESTION
    tokens[..., -2:] = PAD
    words = rng.integers(len(RESERVED), TINY["vocab_size"], size=5)
    dec_in = np.array([[DECODER_START, *words[:3]], [DECODER_START, *words[3:], PAD]])
    targets = np.array([[*words[:3], EOS], [*words[3:], EOS, PAD]])
    return T.gradcheck(lambda: model.loss(tokens, tokens != PAD, dec_in, targets), model.params,
                       h=h, max_coords=max_coords, rng=np.random.default_rng(seed + 1))
