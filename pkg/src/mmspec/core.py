"""Vocabulary, probability-vector and sampling primitives.

Distributions are plain 1-D float64 numpy arrays. Operations here are pure;
the only state is the caller-owned :class:`RngState`.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

PROB_FLOOR = 1e-12
SUM_TOL = 1e-9

_BLOCK = 4096


class AllZeroError(ValueError):
    """Raised when normalizing a vector with no positive mass."""


class InvalidDistribution(ValueError):
    pass


class DimensionMismatch(ValueError):
    pass


class TokenOutOfRange(IndexError):
    pass


@dataclass(frozen=True)
class Vocabulary:
    size: int
    eos: int

    def __post_init__(self):
        if self.size < 2:
            raise ValueError(f"vocabulary size must be >= 2, got {self.size}")
        if not 0 <= self.eos < self.size:
            raise ValueError(f"eos id {self.eos} outside [0, {self.size})")

    def check_token(self, tok: int) -> None:
        if not 0 <= tok < self.size:
            raise TokenOutOfRange(f"token {tok} outside [0, {self.size})")


def _derive_seed(seed: int, label: str) -> int:
    digest = hashlib.blake2b(f"{seed}/{label}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


class RngState:
    """Counter-based deterministic uniform stream (Philox), single owner.

    Uniforms are drawn in blocks, so the stream depends only on ``seed`` and
    on how many values were consumed before, never on the block size used by
    any particular caller.
    """

    __slots__ = ("seed", "counter", "_gen", "_buf", "_pos")

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.counter = 0
        self._gen = np.random.Generator(np.random.Philox(key=self.seed))
        self._buf = self._gen.random(_BLOCK)
        self._pos = 0

    def uniform(self) -> float:
        if self._pos == _BLOCK:
            self._buf = self._gen.random(_BLOCK)
            self._pos = 0
        u = self._buf[self._pos]
        self._pos += 1
        self.counter += 1
        return float(u)

    def child(self, label: str | int) -> "RngState":
        """Independent labelled sub-stream; does not advance this stream."""
        return RngState(_derive_seed(self.seed, str(label)))

    def child_seed(self, label: str | int) -> int:
        return _derive_seed(self.seed, str(label))

    def numpy(self) -> np.random.Generator:
        """Fresh numpy Generator seeded from this stream (for bulk draws)."""
        return np.random.Generator(np.random.Philox(key=_derive_seed(self.seed, "numpy")))

    def __repr__(self):
        return f"RngState(seed={self.seed}, counter={self.counter})"


def check_distribution(d: np.ndarray, tol: float = SUM_TOL) -> np.ndarray:
    d = np.asarray(d, dtype=np.float64)
    if d.ndim != 1 or d.size == 0:
        raise InvalidDistribution(f"expected a non-empty vector, got shape {d.shape}")
    if not np.all(np.isfinite(d)) or np.any(d < 0):
        raise InvalidDistribution("entries must be finite and non-negative")
    if abs(d.sum() - 1.0) > tol:
        raise InvalidDistribution(f"entries sum to {d.sum()!r}, not 1")
    return d


def normalize(raw) -> np.ndarray:
    raw = np.asarray(raw, dtype=np.float64)
    if np.any(raw < 0):
        raise InvalidDistribution("normalize expects non-negative entries")
    total = raw.sum()
    if not total > 0:
        raise AllZeroError("cannot normalize a vector with no positive entry")
    return raw / total


def floor_probs(d: np.ndarray, floor: float = PROB_FLOOR) -> np.ndarray:
    d = np.maximum(d, floor)
    return d / d.sum()


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def sample(d: np.ndarray, rng: RngState) -> int:
    """Inverse-CDF draw; consumes exactly one uniform from ``rng``."""
    u = rng.uniform()
    cdf = d.cumsum()
    i = int(cdf.searchsorted(u * cdf[-1], side="right"))
    if i >= d.size:
        # u*total landed on the rounding tail: take the last token with mass
        i = int(np.flatnonzero(d)[-1])
    return i


def argmax(d: np.ndarray) -> int:
    # np.argmax returns the first maximal index, which is the tie rule we want
    return int(np.argmax(d))


def temperature_scale(d: np.ndarray, temperature: float) -> np.ndarray:
    if temperature < 0:
        raise ValueError("temperature must be non-negative")
    if temperature == 1.0:
        return d
    if temperature == 0.0:
        out = np.zeros_like(d, dtype=np.float64)
        out[argmax(d)] = 1.0
        return out
    with np.errstate(divide="ignore", over="ignore"):
        logd = np.log(d)
        scaled = np.exp((logd - logd.max()) / temperature)
    return scaled / scaled.sum()


def top_p_filter(d: np.ndarray, p: float) -> np.ndarray:
    """Keep the smallest descending-probability prefix with mass >= p."""
    if not 0 < p <= 1:
        raise ValueError("top-p must lie in (0, 1]")
    if p == 1.0:
        return d
    order = np.argsort(-d, kind="stable")
    cum = np.cumsum(d[order])
    keep = int(np.searchsorted(cum, p - 1e-12, side="left")) + 1
    out = np.zeros_like(d, dtype=np.float64)
    idx = order[:keep]
    out[idx] = d[idx]
    return out / out.sum()
