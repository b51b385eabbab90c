from __future__ import annotations

import itertools
from typing import Mapping, Sequence

import numpy as np

from ..core import RngState, Vocabulary, check_distribution

Key = tuple[tuple[int, ...], int]


class TabularModel:
    """Exact lookup-table language model.

    Keys are ``(window, bucket)`` where ``window`` is the last ``order``
    tokens of the prefix (shorter at the start of a sequence) and ``bucket``
    a quantized context id. Unknown keys fall back to ``fallback``.
    """

    def __init__(
        self,
        vocab: Vocabulary,
        order: int,
        table: Mapping[Key, Sequence[float]],
        fallback: Sequence[float] | None = None,
        n_buckets: int = 1,
    ):
        if order < 0:
            raise ValueError("order must be non-negative")
        if n_buckets < 1 or n_buckets & (n_buckets - 1):
            raise ValueError("n_buckets must be a power of two")
        self.vocab = vocab
        self.order = order
        self.n_buckets = n_buckets
        self.table: dict[Key, np.ndarray] = {}
        for (window, bucket), probs in table.items():
            self.table[(tuple(int(t) for t in window), int(bucket))] = self._freeze(probs)
        if fallback is None:
            fallback = np.full(vocab.size, 1.0 / vocab.size)
        self.fallback = self._freeze(fallback)

    def _freeze(self, probs) -> np.ndarray:
        d = check_distribution(np.array(probs, dtype=np.float64))
        if d.size != self.vocab.size:
            raise ValueError(f"distribution has {d.size} entries, vocabulary has {self.vocab.size}")
        d.setflags(write=False)
        return d

    def bucket(self, ctx) -> int:
        if ctx is None or self.n_buckets == 1:
            return 0
        if np.ndim(ctx) == 0:
            return int(ctx) % self.n_buckets
        bits = self.n_buckets.bit_length() - 1
        signs = np.asarray(ctx, dtype=np.float64)[:bits] > 0
        return int(sum(int(s) << i for i, s in enumerate(signs)))

    def window(self, prefix: Sequence[int]) -> tuple[int, ...]:
        if self.order == 0:
            return ()
        return tuple(prefix[-self.order:])

    def next_distribution(self, prefix: Sequence[int], ctx=None) -> np.ndarray:
        return self.table.get((self.window(prefix), self.bucket(ctx)), self.fallback)


def all_windows(vocab_size: int, order: int):
    for length in range(order + 1):
        yield from itertools.product(range(vocab_size), repeat=length)


def random_tabular(
    vocab: Vocabulary,
    order: int,
    rng: RngState,
    concentration: float = 1.0,
    n_buckets: int = 1,
) -> TabularModel:
    """Fill every window of length <= order with a Dirichlet draw."""
    gen = rng.numpy()
    alpha = np.full(vocab.size, concentration)
    table = {}
    for window in all_windows(vocab.size, order):
        for b in range(n_buckets):
            table[(window, b)] = gen.dirichlet(alpha)
    return TabularModel(vocab, order, table, n_buckets=n_buckets)


def constant_model(vocab: Vocabulary, probs: Sequence[float]) -> TabularModel:
    """Order-0 model emitting the same distribution at every position."""
    return TabularModel(vocab, 0, {((), 0): probs}, fallback=probs)
