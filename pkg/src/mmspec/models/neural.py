"""Tiny trainable language models and the encoder/projector/LM composite.

Everything is float64 numpy with hand-written backprop. The backbone is a
fixed-window MLP: the last ``k`` token embeddings (left-padded with a
dedicated pad row) are concatenated with one context slot, which is either
the projected visual feature or a learned "no-image" embedding.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from ..core import DimensionMismatch, RngState, TokenOutOfRange, Vocabulary, floor_probs, softmax

Params = dict[str, np.ndarray]

PHASES = ("text_pretrain", "projector_pretrain", "sdvit")


class EmptyResponse(ValueError):
    pass


class ShapeMismatch(ValueError):
    pass


def uniform_init(gen: np.random.Generator, shape, scale: float = 0.1) -> np.ndarray:
    return gen.uniform(-scale, scale, size=shape)


class VisionEncoder:
    """Frozen linear feature extractor; weights are read-only after construction."""

    def __init__(self, weights):
        w = np.array(weights, dtype=np.float64)
        if w.ndim != 2:
            raise DimensionMismatch("encoder weights must be a (d_vis, d_ctx) matrix")
        w.setflags(write=False)
        self._weights = w

    @property
    def weights(self) -> np.ndarray:
        return self._weights

    @property
    def frozen(self) -> bool:
        return True

    @property
    def d_ctx(self) -> int:
        return self._weights.shape[1]

    @property
    def d_vis(self) -> int:
        return self._weights.shape[0]

    def encode(self, ctx) -> np.ndarray:
        """Map one context vector (d_ctx,) or a batch (n, d_ctx) to features."""
        ctx = np.asarray(ctx, dtype=np.float64)
        if ctx.shape[-1] != self.d_ctx or ctx.ndim > 2:
            raise DimensionMismatch(f"context has shape {ctx.shape}, encoder expects (..., {self.d_ctx})")
        return ctx @ self._weights.T


class Projector:
    """Two-layer tanh MLP from visual features to LM embeddings."""

    def __init__(self, params: Params):
        self.params = params

    @classmethod
    def init(cls, d_vis: int, d_emb: int, gen: np.random.Generator, d_hidden: int | None = None, scale: float = 0.1):
        d_hidden = d_hidden or d_vis
        return cls({
            "w1": uniform_init(gen, (d_vis, d_hidden), scale),
            "b1": uniform_init(gen, (d_hidden,), scale),
            "w2": uniform_init(gen, (d_hidden, d_emb), scale),
            "b2": uniform_init(gen, (d_emb,), scale),
        })

    @property
    def d_in(self) -> int:
        return self.params["w1"].shape[0]

    @property
    def d_out(self) -> int:
        return self.params["w2"].shape[1]

    def forward(self, h: np.ndarray):
        if h.shape[-1] != self.d_in:
            raise DimensionMismatch(f"features have dim {h.shape[-1]}, projector expects {self.d_in}")
        p = self.params
        z = np.tanh(h @ p["w1"] + p["b1"])
        return z @ p["w2"] + p["b2"], (h, z)

    def project(self, h) -> np.ndarray:
        return self.forward(np.asarray(h, dtype=np.float64))[0]

    def backward(self, dout: np.ndarray, cache) -> Params:
        h, z = cache
        w2 = self.params["w2"]
        dpre = (dout @ w2.T) * (1.0 - z * z)
        return {
            "w1": h.T @ dpre if h.ndim == 2 else np.outer(h, dpre),
            "b1": dpre.sum(axis=0) if dpre.ndim == 2 else dpre,
            "w2": z.T @ dout if z.ndim == 2 else np.outer(z, dout),
            "b2": dout.sum(axis=0) if dout.ndim == 2 else dout,
        }


class TinyNeuralLm:
    """Fixed-window embedding MLP over ``vocab.size`` tokens."""

    def __init__(self, vocab: Vocabulary, k: int, params: Params):
        self.vocab = vocab
        self.k = k
        self.params = params
        self.pad = vocab.size

    @classmethod
    def init(cls, vocab: Vocabulary, d_emb: int, k: int, d_hidden: int, gen: np.random.Generator, scale: float = 0.1):
        return cls(vocab, k, {
            "embed": uniform_init(gen, (vocab.size + 1, d_emb), scale),
            "no_image": uniform_init(gen, (d_emb,), scale),
            "w1": uniform_init(gen, ((k + 1) * d_emb, d_hidden), scale),
            "b1": uniform_init(gen, (d_hidden,), scale),
            "w2": uniform_init(gen, (d_hidden, vocab.size), scale),
            "b2": uniform_init(gen, (vocab.size,), scale),
        })

    @property
    def d_emb(self) -> int:
        return self.params["embed"].shape[1]

    @property
    def d_hidden(self) -> int:
        return self.params["w1"].shape[1]

    def window(self, prefix: Sequence[int]) -> list[int]:
        tail = list(prefix[-self.k:]) if self.k else []
        for t in tail:
            if not 0 <= t < self.vocab.size:
                raise TokenOutOfRange(f"token {t} outside [0, {self.vocab.size})")
        return [self.pad] * (self.k - len(tail)) + tail

    def logits(self, window: Sequence[int], slot: np.ndarray) -> np.ndarray:
        p = self.params
        x = np.concatenate([p["embed"][window].ravel(), slot])
        return np.tanh(x @ p["w1"] + p["b1"]) @ p["w2"] + p["b2"]


class CompositeVlm:
    """(frozen encoder, projector, language model) triple.

    ``frozen`` names trainable-parameter keys (``projector.*`` / ``lm.*``)
    that receive zero gradient; the encoder is frozen unconditionally.
    """

    def __init__(self, encoder: VisionEncoder, projector: Projector, lm: TinyNeuralLm, frozen: Iterable[str] = ()):
        if projector.d_in != encoder.d_vis:
            raise DimensionMismatch(f"projector input {projector.d_in} != encoder output {encoder.d_vis}")
        if projector.d_out != lm.d_emb:
            raise DimensionMismatch(f"projector output {projector.d_out} != LM embedding dim {lm.d_emb}")
        self.encoder = encoder
        self.projector = projector
        self.lm = lm
        self.frozen = frozenset(frozen)

    @property
    def vocab(self) -> Vocabulary:
        return self.lm.vocab

    def parameters(self) -> Params:
        out = {f"projector.{n}": a for n, a in self.projector.params.items()}
        out.update({f"lm.{n}": a for n, a in self.lm.params.items()})
        return out

    def set_parameters(self, params: Mapping[str, np.ndarray]) -> None:
        for name, value in params.items():
            part, key = name.split(".", 1)
            target = self.projector.params if part == "projector" else self.lm.params
            if key not in target:
                raise KeyError(name)
            target[key] = value

    def set_phase(self, phase: str) -> None:
        names = self.parameters().keys()
        if phase == "text_pretrain":
            self.frozen = frozenset(n for n in names if not n.startswith("lm."))
        elif phase == "projector_pretrain":
            self.frozen = frozenset(n for n in names if not n.startswith("projector."))
        elif phase == "sdvit":
            self.frozen = frozenset()
        else:
            raise ValueError(f"unknown phase {phase!r}; expected one of {PHASES}")

    def context_slot(self, ctx) -> np.ndarray:
        if ctx is None:
            return self.lm.params["no_image"]
        return self.projector.project(self.encoder.encode(ctx))

    def next_distribution(self, prefix: Sequence[int], ctx=None) -> np.ndarray:
        logits = self.lm.logits(self.lm.window(prefix), self.context_slot(ctx))
        return floor_probs(softmax(logits))


def composite_from_scratch(
    vocab: Vocabulary,
    encoder: VisionEncoder,
    d_emb: int,
    k: int,
    d_hidden: int,
    rng: RngState,
) -> CompositeVlm:
    """Fresh drafter-style composite with uniform(-0.1, 0.1) parameters."""
    gen = rng.numpy()
    lm = TinyNeuralLm.init(vocab, d_emb, k, d_hidden, gen)
    projector = Projector.init(encoder.d_vis, d_emb, gen)
    return CompositeVlm(encoder, projector, lm)


@dataclass
class TokenBatch:
    """Teacher-forcing positions for a batch of (ctx, instruction, response) records."""

    windows: np.ndarray  # (P, k) token ids, pad = vocab size
    targets: np.ndarray  # (P,)
    record: np.ndarray  # (P,) index into the batch records
    ctx: np.ndarray  # (B, d_ctx); rows without context are zero
    has_ctx: np.ndarray  # (B,) bool
    n_records: int


def make_batch(model: CompositeVlm, records: Sequence[tuple]) -> TokenBatch:
    k, pad, V = model.lm.k, model.lm.pad, model.vocab.size
    windows, targets, rec = [], [], []
    d_ctx = model.encoder.d_ctx
    ctx = np.zeros((len(records), d_ctx))
    has_ctx = np.zeros(len(records), dtype=bool)
    for i, (c, instruction, response) in enumerate(records):
        if len(response) == 0:
            raise EmptyResponse(f"record {i} has an empty response")
        if c is not None:
            c = np.asarray(c, dtype=np.float64)
            if c.shape != (d_ctx,):
                raise DimensionMismatch(f"record {i} context has shape {c.shape}, expected ({d_ctx},)")
            ctx[i] = c
            has_ctx[i] = True
        seq = [pad] * k + list(instruction) + list(response)
        start = k + len(instruction)
        for j in range(start, len(seq)):
            windows.append(seq[j - k:j])
            targets.append(seq[j])
            rec.append(i)
    windows = np.asarray(windows, dtype=np.int64).reshape(-1, k)
    targets = np.asarray(targets, dtype=np.int64)
    if windows.size and (windows.max() > pad or targets.max() >= V or targets.min() < 0 or windows.min() < 0):
        raise TokenOutOfRange("batch contains tokens outside the vocabulary")
    return TokenBatch(windows, targets, np.asarray(rec, dtype=np.int64), ctx, has_ctx, len(records))


def batch_loss_and_gradients(model: CompositeVlm, batch: TokenBatch, need_grads: bool = True):
    """Mean over records of the summed token NLL, and its gradients.

    Gradients for names in ``model.frozen`` are returned as zero arrays.
    """
    lm, proj = model.lm, model.projector
    p = lm.params
    k, d = lm.k, lm.d_emb
    B = batch.n_records
    mask = batch.has_ctx

    slots = np.broadcast_to(p["no_image"], (B, d)).copy()
    proj_cache = None
    if mask.any():
        h = model.encoder.encode(batch.ctx[mask])
        s, proj_cache = proj.forward(h)
        slots[mask] = s

    P = len(batch.targets)
    x = np.concatenate([p["embed"][batch.windows].reshape(P, k * d), slots[batch.record]], axis=1)
    hid = np.tanh(x @ p["w1"] + p["b1"])
    logits = hid @ p["w2"] + p["b2"]
    logits -= logits.max(axis=1, keepdims=True)
    logz = np.log(np.exp(logits).sum(axis=1))
    logp_tgt = logits[np.arange(P), batch.targets] - logz
    loss = float(-logp_tgt.sum() / B)
    if not need_grads:
        return loss, None

    frozen = model.frozen
    g = np.exp(logits - logz[:, None])
    g[np.arange(P), batch.targets] -= 1.0
    g /= B
    grads: Params = {}
    grads["lm.w2"] = hid.T @ g
    grads["lm.b2"] = g.sum(axis=0)
    da = (g @ p["w2"].T) * (1.0 - hid * hid)
    grads["lm.w1"] = x.T @ da
    grads["lm.b1"] = da.sum(axis=0)
    dx = da @ p["w1"].T
    gembed = np.zeros_like(p["embed"])
    np.add.at(gembed, batch.windows.ravel(), dx[:, : k * d].reshape(-1, d))
    grads["lm.embed"] = gembed
    dslots = np.zeros((B, d))
    np.add.at(dslots, batch.record, dx[:, k * d:])
    grads["lm.no_image"] = dslots[~mask].sum(axis=0)
    proj_trainable = any(f"projector.{n}" not in frozen for n in proj.params)
    if proj_cache is not None and proj_trainable:
        pg = proj.backward(dslots[mask], proj_cache)
    else:
        pg = {n: np.zeros_like(a) for n, a in proj.params.items()}
    grads.update({f"projector.{n}": a for n, a in pg.items()})
    for name in frozen:
        grads[name] = np.zeros_like(grads[name])
    return loss, grads


def nll_loss_and_gradients(model: CompositeVlm, records: Sequence[tuple]):
    """Teacher-forced NLL of ``(ctx, instruction, response)`` records."""
    return batch_loss_and_gradients(model, make_batch(model, records))


def sgd_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], lr: float,
             frozen: Iterable[str] = ()) -> Params:
    frozen = set(frozen)
    out = {}
    for name, w in params.items():
        if name in frozen:
            out[name] = w
            continue
        g = grads.get(name)
        if g is None:
            out[name] = w
            continue
        if np.shape(g) != np.shape(w):
            raise ShapeMismatch(f"{name}: gradient {np.shape(g)} vs parameter {np.shape(w)}")
        out[name] = w - lr * g
    return out
