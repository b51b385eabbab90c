"""JSON checkpoints for composite models.

Layout: a header (format tag, version, vocabulary, dimensions, window,
freeze mask) followed by flat weight arrays. Floats are written with
``repr`` precision so a round trip is bit-exact.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from ..core import Vocabulary
from .neural import CompositeVlm, Projector, TinyNeuralLm, VisionEncoder

FORMAT = "mmspec.composite"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _pack(a: np.ndarray) -> dict:
    return {"shape": list(a.shape), "data": [float(x) for x in np.asarray(a, dtype=np.float64).ravel()]}


def _unpack(blob: dict) -> np.ndarray:
    return np.array(blob["data"], dtype=np.float64).reshape(blob["shape"])


def to_dict(model: CompositeVlm) -> dict:
    weights = {"encoder.weights": _pack(model.encoder.weights)}
    weights.update({name: _pack(a) for name, a in sorted(model.parameters().items())})
    return {
        "format": FORMAT,
        "version": VERSION,
        "vocab_size": model.vocab.size,
        "eos": model.vocab.eos,
        "dims": {
            "d_ctx": model.encoder.d_ctx,
            "d_vis": model.encoder.d_vis,
            "d_proj_hidden": model.projector.params["w1"].shape[1],
            "d_emb": model.lm.d_emb,
            "d_hidden": model.lm.d_hidden,
            "k": model.lm.k,
        },
        "frozen": sorted(model.frozen),
        "weights": weights,
    }


def from_dict(blob: dict, encoder: VisionEncoder | None = None) -> CompositeVlm:
    """Rebuild a model; pass ``encoder`` to re-attach a shared encoder instance."""
    if blob.get("format") != FORMAT:
        raise CheckpointError(f"not a composite checkpoint: format={blob.get('format')!r}")
    if blob.get("version") != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {blob.get('version')!r}")
    vocab = Vocabulary(blob["vocab_size"], blob["eos"])
    w = blob["weights"]
    enc_w = _unpack(w["encoder.weights"])
    if encoder is None:
        encoder = VisionEncoder(enc_w)
    elif not np.array_equal(encoder.weights, enc_w):
        raise CheckpointError("checkpoint encoder weights differ from the supplied shared encoder")
    proj = Projector({n.split(".", 1)[1]: _unpack(b) for n, b in w.items() if n.startswith("projector.")})
    lm = TinyNeuralLm(vocab, blob["dims"]["k"],
                      {n.split(".", 1)[1]: _unpack(b) for n, b in w.items() if n.startswith("lm.")})
    return CompositeVlm(encoder, proj, lm, frozen=blob.get("frozen", ()))


def save(model: CompositeVlm, path: str | Path) -> None:
    Path(path).write_text(json.dumps(to_dict(model)), encoding="utf-8")


def load(path: str | Path, encoder: VisionEncoder | None = None) -> CompositeVlm:
    return from_dict(json.loads(Path(path).read_text(encoding="utf-8")), encoder=encoder)
