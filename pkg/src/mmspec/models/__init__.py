"""Language-model interface, exact tabular oracles and tiny neural composites."""
import hashlib
from typing import Protocol, Sequence

import numpy as np

from ..core import Vocabulary
from .checkpoint import CheckpointError, load, save
from .neural import (
    CompositeVlm,
    DimensionMismatch,
    EmptyResponse,
    Projector,
    ShapeMismatch,
    TinyNeuralLm,
    TokenBatch,
    VisionEncoder,
    batch_loss_and_gradients,
    composite_from_scratch,
    make_batch,
    nll_loss_and_gradients,
    sgd_step,
)
from .tabular import TabularModel, constant_model, random_tabular


class LanguageModel(Protocol):
    vocab: Vocabulary

    def next_distribution(self, prefix: Sequence[int], ctx=None) -> np.ndarray: ...


def parameter_digest(arrays) -> str:
    """Hex digest over raw parameter bytes, for bit-identity checks."""
    h = hashlib.sha256()
    for name in sorted(arrays):
        h.update(name.encode())
        h.update(np.ascontiguousarray(arrays[name]).tobytes())
    return h.hexdigest()


__all__ = [
    "CheckpointError",
    "CompositeVlm",
    "DimensionMismatch",
    "EmptyResponse",
    "LanguageModel",
    "Projector",
    "ShapeMismatch",
    "TabularModel",
    "TinyNeuralLm",
    "TokenBatch",
    "VisionEncoder",
    "batch_loss_and_gradients",
    "composite_from_scratch",
    "constant_model",
    "load",
    "make_batch",
    "nll_loss_and_gradients",
    "parameter_digest",
    "random_tabular",
    "save",
    "sgd_step",
]
