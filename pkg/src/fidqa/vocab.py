from __future__ import annotations

from collections import Counter
from collections.abc import Iterable, Sequence

from .corpus import split_words

PAD, EOS, UNK, DECODER_START = 0, 1, 2, 3
SPECIALS = ("<pad>", "</s>", "<unk>", "<s>")
MARKERS = ("question:", "title:", "context:")
QUESTION, TITLE, CONTEXT = 4, 5, 6
RESERVED = SPECIALS + MARKERS


def tokenize(text: str) -> list[str]:
    return [w.lower() for w in split_words(text)]


class Vocab:
    def __init__(self, tokens: Sequence[str]):
        if tuple(tokens[:len(RESERVED)]) != RESERVED:
            raise ValueError("vocabulary must start with the reserved specials and markers")
        self.tokens = list(tokens)
        self.index = {tok: i for i, tok in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ValueError("duplicate vocabulary entries")

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.tokens == other.tokens

    def id(self, token: str) -> int:
        return self.index.get(token, UNK)

    def encode(self, text: str) -> list[int]:
        return [self.index.get(tok, UNK) for tok in tokenize(text)]

    def decode(self, ids: Iterable[int]) -> str:
        """Join word tokens with single spaces, skipping specials and markers."""
        return " ".join(self.tokens[i] for i in ids if i >= len(RESERVED))


def build_vocab(texts: Iterable[str], max_size: int, min_freq: int = 1) -> Vocab:
    """Most frequent tokens first, ties broken lexicographically."""
    if max_size < len(RESERVED):
        raise ValueError(f"max_size {max_size} cannot hold the {len(RESERVED)} reserved tokens")
    counts: Counter[str] = Counter()
    n_texts = 0
    for text in texts:
        counts.update(tokenize(text))
        n_texts += 1
    if n_texts == 0:
        raise ValueError("cannot build a vocabulary from an empty stream")
    reserved = set(RESERVED)
    ranked = sorted((tok for tok, c in counts.items() if c >= min_freq and tok not in reserved),
                    key=lambda tok: (-counts[tok], tok))
    return Vocab(list(RESERVED) + ranked[:max_size - len(RESERVED)])
