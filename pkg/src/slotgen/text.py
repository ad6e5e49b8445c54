"""Vocabulary, tokenization, and embedding providers.

The contextual provider stands in for a frozen pretrained dialogue language
model: it maps (previous system response, current user utterance) pairs to
deterministic 768-dimensional per-token vectors and never participates in
gradient flow.
"""

from __future__ import annotations

from collections import Counter
from collections.abc import Iterable, Sequence

import numpy as np

from .autodiff import Tensor, take_rows
from .errors import InputError, ValidationError

PAD, UNK, BOS, EOS = 0, 1, 2, 3
RESERVED = ("<pad>", "<unk>", "<bos>", "<eos>")

CONTEXTUAL_DIM = 768
_HASH_DIM = 64


def tokenize(text: str) -> list[str]:
    """Whitespace tokenization with lowercasing."""
    return text.lower().split()


class Vocabulary:
    """Token <-> id bijection with the four reserved ids fixed at 0..3."""

    def __init__(self, tokens: Sequence[str]):
        if tuple(tokens[:4]) != RESERVED:
            tokens = list(RESERVED) + [t for t in tokens if t not in RESERVED]
        self._tokens = list(tokens)
        self._ids = {t: i for i, t in enumerate(self._tokens)}
        if len(self._ids) != len(self._tokens):
            raise ValidationError("vocabulary contains duplicate tokens")

    def __len__(self) -> int:
        return len(self._tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._ids

    def id_of(self, token: str) -> int:
        return self._ids.get(token, UNK)

    def token_of(self, idx: int) -> str:
        return self._tokens[idx]

    @property
    def tokens(self) -> list[str]:
        return list(self._tokens)


def build_vocab(corpus: Iterable[Sequence[str]], min_count: int = 1) -> Vocabulary:
    """Vocabulary of tokens occurring at least min_count times.

    Order is deterministic: descending frequency, ties broken lexically.
    """
    if min_count < 1:
        raise InputError(f"min_count must be >= 1, got {min_count}")
    counts: Counter[str] = Counter()
    empty = True
    for seq in corpus:
        empty = False
        counts.update(seq)
    if empty:
        raise InputError("cannot build a vocabulary from an empty corpus")
    kept = sorted(
        (t for t, c in counts.items() if c >= min_count and t not in RESERVED),
        key=lambda t: (-counts[t], t),
    )
    return Vocabulary(list(RESERVED) + kept)


def encode(tokens: Sequence[str], vocab: Vocabulary) -> list[int]:
    """Map tokens to ids; unknown tokens become UNK. No BOS/EOS is added."""
    return [vocab.id_of(t) for t in tokens]


def decode(ids: Sequence[int], vocab: Vocabulary) -> list[str]:
    return [vocab.token_of(i) for i in ids]


def write_vocab(path, vocab: Vocabulary) -> None:
    """One token per line; line number - 1 is the id."""
    with open(path, "w", encoding="utf-8") as fh:
        for t in vocab.tokens:
            fh.write(t + "\n")


def read_vocab(path) -> Vocabulary:
    with open(path, encoding="utf-8") as fh:
        tokens = [line.rstrip("\n") for line in fh]
    if tokens[:4] != list(RESERVED):
        raise ValidationError(f"vocabulary file must start with {RESERVED}")
    return Vocabulary(tokens)


# ---------------------------------------------------------------------------
# Embedding providers
# ---------------------------------------------------------------------------


class TrainableEmbedding:
    """Learned lookup table; rows participate in gradient flow."""

    kind = "trainable-table"

    def __init__(self, table: Tensor):
        self.table = table
        self.dim = table.shape[1]

    def embed(self, ids: Sequence[int]) -> Tensor:
        return take_rows(self.table, np.asarray(ids, dtype=np.intp))


def _fingerprint(ids: Iterable[int]) -> int:
    """64-bit FNV-1a over an id sequence."""
    h = 0xCBF29CE484222325
    for i in ids:
        h ^= (int(i) + 1) & 0xFFFFFFFFFFFFFFFF
        h = (h * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h


class ContextualEmbedding:
    """Frozen deterministic contextual provider (768-dim per token).

    Each token vector is a seeded hash embedding of (token id, 64-bit
    fingerprint of the surrounding context ids) pushed through a fixed
    random projection and L2-normalized. Identical inputs always give
    bitwise-identical outputs; the provider is excluded from training.
    """

    kind = "contextual-stub"

    def __init__(self, seed: int = 0):
        self.dim = CONTEXTUAL_DIM
        self.seed = int(seed)
        rng = np.random.default_rng(np.random.SeedSequence([self.seed, 0xC0]))
        self._proj = rng.standard_normal((_HASH_DIM, CONTEXTUAL_DIM))

    def vectors(self, prev_system: Sequence[int], current: Sequence[int]) -> np.ndarray:
        """Per-token vectors for `current`, conditioned on the previous turn."""
        if len(current) == 0:
            raise InputError("contextual embedding requires a non-empty utterance")
        ctx = _fingerprint(list(prev_system) + [0] + list(current))
        out = np.empty((len(current), CONTEXTUAL_DIM))
        cache: dict[int, np.ndarray] = {}
        for i, tok in enumerate(current):
            vec = cache.get(tok)
            if vec is None:
                rng = np.random.default_rng(
                    np.random.SeedSequence([self.seed, ctx, int(tok)])
                )
                base = rng.standard_normal(_HASH_DIM)
                vec = base @ self._proj
                vec = vec / np.linalg.norm(vec)
                cache[tok] = vec
            out[i] = vec
        return out


def contextual_embed(
    prev_system: Sequence[int], current_user: Sequence[int], provider: ContextualEmbedding
) -> np.ndarray:
    """Frozen per-token vectors for current_user given the previous system turn."""
    return provider.vectors(prev_system, current_user)
