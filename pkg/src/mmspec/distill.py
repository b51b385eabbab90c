"""Synthetic conditioned-generation task and the drafter training pipeline.

Pipeline order for a drafter: text-only backbone pretraining (stand-in for
an off-the-shelf small LM of the target's family), projector pretraining on
caption pairs with everything but the projector frozen, then fine-tuning of
projector + backbone on responses sampled from the target itself
(self-distillation) or, for the ablation arm, on fixed reference labels.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .analysis import tvd
from .core import RngState, Vocabulary
from .models import CompositeVlm, Projector, TinyNeuralLm, VisionEncoder
from .models.neural import PHASES, TokenBatch, batch_loss_and_gradients, make_batch, sgd_step
from .specdec import generate


class CtxIndependentTarget(RuntimeError):
    pass


@dataclass(frozen=True)
class TaskDims:
    vocab: int = 32
    d_ctx: int = 8
    d_vis: int = 8
    target_d_emb: int = 32
    target_k: int = 3
    target_hidden: int = 64
    drafter_d_emb: int = 12
    drafter_k: int = 2
    drafter_hidden: int = 32
    max_response: int = 24
    max_instruction: int = 3
    logit_scale: float = 3.0
    ctx_scale: float = 2.0
    eos_bias: float = 1.0
    reference_mix: float = 1.0


@dataclass
class SyntheticTask:
    seed: int
    vocab: Vocabulary
    dims: TaskDims
    target: CompositeVlm
    reference: CompositeVlm
    ctx_dependent: bool

    @property
    def encoder(self) -> VisionEncoder:
        return self.target.encoder

    def sample_ctx(self, rng: RngState) -> np.ndarray:
        return rng.child("ctx").numpy().standard_normal(self.dims.d_ctx)

    def sample_instruction(self, rng: RngState, min_len: int = 0, max_len: int | None = None) -> list[int]:
        hi = self.dims.max_instruction if max_len is None else max_len
        n = min_len + int(rng.uniform() * (hi - min_len + 1))
        non_eos = [t for t in range(self.vocab.size) if t != self.vocab.eos]
        return [non_eos[int(rng.uniform() * len(non_eos))] for _ in range(n)]

    def sample_prompt(self, rng: RngState, min_len: int = 0, max_len: int | None = None):
        return self.sample_ctx(rng), self.sample_instruction(rng.child("instruction"), min_len, max_len)


def _target_composite(vocab: Vocabulary, dims: TaskDims, gen: np.random.Generator, ctx_dependent: bool):
    d, k, h = dims.target_d_emb, dims.target_k, dims.target_hidden
    encoder = VisionEncoder(gen.standard_normal((dims.d_vis, dims.d_ctx)) / np.sqrt(dims.d_ctx))
    w2 = gen.standard_normal((dims.d_vis, d)) * dims.ctx_scale / np.sqrt(dims.d_vis)
    projector = Projector({
        "w1": gen.standard_normal((dims.d_vis, dims.d_vis)) * 1.5 / np.sqrt(dims.d_vis),
        "b1": np.zeros(dims.d_vis),
        "w2": w2 if ctx_dependent else np.zeros_like(w2),
        "b2": gen.standard_normal(d) * 0.5,
    })
    b2 = gen.standard_normal(vocab.size) * 0.5
    b2[vocab.eos] += dims.eos_bias
    lm = TinyNeuralLm(vocab, k, {
        "embed": gen.standard_normal((vocab.size + 1, d)),
        "no_image": gen.standard_normal(d),
        "w1": gen.standard_normal(((k + 1) * d, h)) * 1.5 / np.sqrt((k + 1) * d),
        "b1": gen.standard_normal(h) * 0.1,
        "w2": gen.standard_normal((h, vocab.size)) * dims.logit_scale / np.sqrt(h),
        "b2": b2,
    })
    return CompositeVlm(encoder, projector, lm, frozen=())


def _perturbed_reference(target: CompositeVlm, dims: TaskDims, gen: np.random.Generator) -> CompositeVlm:
    ref = clone(target)
    p = ref.lm.params
    m = dims.reference_mix
    fresh_w2 = gen.standard_normal(p["w2"].shape) * dims.logit_scale / np.sqrt(p["w2"].shape[0])
    fresh_b2 = gen.standard_normal(p["b2"].shape) * 0.5
    fresh_b2[target.vocab.eos] += dims.eos_bias
    p["w2"] = (1 - m) * p["w2"] + m * fresh_w2
    p["b2"] = (1 - m) * p["b2"] + m * fresh_b2
    return ref


def ctx_dependence_witness(model, d_ctx: int, rng: RngState, pairs: int = 50, prefixes=((),)) -> float:
    """Largest next-token TVD found between random context pairs."""
    gen = rng.numpy()
    best = 0.0
    for _ in range(pairs):
        a, b = gen.standard_normal(d_ctx), gen.standard_normal(d_ctx)
        for prefix in prefixes:
            best = max(best, tvd(model.next_distribution(list(prefix), a), model.next_distribution(list(prefix), b)))
    return best


def build_synthetic_task(seed: int, dims: TaskDims = TaskDims(), vocab: Vocabulary | None = None,
                         ctx_dependent: bool = True, max_attempts: int = 100) -> SyntheticTask:
    """Random target whose outputs depend on context (or provably do not, for a control)."""
    vocab = vocab or Vocabulary(dims.vocab, eos=0)
    if vocab.size != dims.vocab:
        raise ValueError("vocabulary size disagrees with dims.vocab")
    root = RngState(seed)
    for attempt in range(max_attempts):
        gen = root.child(f"task.attempt{attempt}").numpy()
        target = _target_composite(vocab, dims, gen, ctx_dependent)
        if not ctx_dependent:
            break
        witness = ctx_dependence_witness(target, dims.d_ctx, root.child(f"task.witness{attempt}"))
        if witness > 0.1:
            break
    else:
        raise CtxIndependentTarget(f"no context-dependent target in {max_attempts} initializations")
    reference = _perturbed_reference(target, dims, root.child("task.reference").numpy())
    return SyntheticTask(seed, vocab, dims, target, reference, ctx_dependent)


def clone(model: CompositeVlm) -> CompositeVlm:
    """Deep copy of projector and LM parameters; the encoder instance is shared."""
    proj = Projector({n: a.copy() for n, a in model.projector.params.items()})
    lm = TinyNeuralLm(model.vocab, model.lm.k, {n: a.copy() for n, a in model.lm.params.items()})
    return CompositeVlm(model.encoder, proj, lm, frozen=model.frozen)


def new_drafter(task: SyntheticTask, rng: RngState) -> CompositeVlm:
    """Small composite attached to the target's encoder, uniform(-0.1, 0.1) init."""
    d = task.dims
    lm = TinyNeuralLm.init(task.vocab, d.drafter_d_emb, d.drafter_k, d.drafter_hidden, rng.child("lm").numpy())
    proj = Projector.init(d.d_vis, d.drafter_d_emb, rng.child("projector").numpy())
    return CompositeVlm(task.encoder, proj, lm)


def attach_projector(backbone: CompositeVlm, rng: RngState) -> CompositeVlm:
    """Copy of ``backbone`` with a freshly initialized projector."""
    model = clone(backbone)
    model.projector = Projector.init(model.encoder.d_vis, model.lm.d_emb, rng.numpy())
    return model


# ---------------------------------------------------------------- datasets


@dataclass
class Record:
    ctx: list[float] | None
    instruction: list[int]
    response: list[int]
    temperature: float = 1.0
    top_p: float = 1.0
    seed: int = 0

    def as_tuple(self):
        return (None if self.ctx is None else np.asarray(self.ctx), self.instruction, self.response)


@dataclass
class Dataset:
    """Records of (ctx, instruction, response) plus the sampling settings used."""

    kind: str
    records: list[Record] = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def __iter__(self) -> Iterator[Record]:
        return iter(self.records)

    def tuples(self) -> list[tuple]:
        return [r.as_tuple() for r in self.records]

    def to_jsonl(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for r in self.records:
                fh.write(json.dumps(asdict(r), sort_keys=True) + "\n")

    @classmethod
    def from_jsonl(cls, path: str | Path, kind: str = "") -> "Dataset":
        with open(path, encoding="utf-8") as fh:
            return cls(kind, [Record(**json.loads(line)) for line in fh if line.strip()])


def _respond(model, ctx, instruction, max_len: int, seed: int, temperature: float, top_p: float) -> list[int]:
    out = generate(model, instruction, ctx, max_len - 1, RngState(seed), temperature, top_p)
    if out[-1] != model.vocab.eos:
        out.append(model.vocab.eos)
    return out


def regenerate(model, record: Record, max_len: int) -> list[int]:
    """Re-run the sampling that produced ``record`` from its stored settings."""
    ctx = None if record.ctx is None else np.asarray(record.ctx)
    return _respond(model, ctx, record.instruction, max_len, record.seed, record.temperature, record.top_p)


def sample_prompts(task: SyntheticTask, n: int, rng: RngState, min_len: int = 0,
                   max_len: int | None = None) -> list[tuple[np.ndarray, list[int]]]:
    return [task.sample_prompt(rng.child(i), min_len, max_len) for i in range(n)]


def generate_pretrain_data(task: SyntheticTask, n: int, rng: RngState) -> Dataset:
    """Context/caption pairs: target samples at T=1, top-p=1 from an empty prompt."""
    if n <= 0:
        raise ValueError("dataset size must be positive")
    records = []
    for i in range(n):
        r = rng.child(i)
        ctx = task.sample_ctx(r)
        seed = r.child_seed("response")
        caption = _respond(task.target, ctx, [], task.dims.max_response, seed, 1.0, 1.0)
        records.append(Record(ctx.tolist(), [], caption, 1.0, 1.0, seed))
    return Dataset("pretrain", records)


DEFAULT_GRID = ((0.7, 0.9), (0.7, 1.0), (1.0, 0.9), (1.0, 1.0))


def generate_self_distilled_data(task: SyntheticTask, prompts: Sequence[tuple], grid: Sequence[tuple[float, float]],
                                 rng: RngState, model=None, kind: str = "sdvit") -> Dataset:
    """Responses sampled from the target; (temperature, top_p) cycles through ``grid``."""
    if not prompts or not grid:
        raise ValueError("need at least one prompt and one (temperature, top_p) setting")
    model = model or task.target
    records = []
    for i, (ctx, instruction) in enumerate(prompts):
        T, top_p = grid[i % len(grid)]
        seed = rng.child_seed(i)
        response = _respond(model, ctx, instruction, task.dims.max_response, seed, T, top_p)
        records.append(Record(np.asarray(ctx).tolist(), list(instruction), response, float(T), float(top_p), seed))
    return Dataset(kind, records)


def generate_reference_data(task: SyntheticTask, prompts: Sequence[tuple], rng: RngState) -> Dataset:
    """Fixed labels from the perturbed reference process (the vanilla dataset)."""
    return generate_self_distilled_data(task, prompts, ((1.0, 1.0),), rng, model=task.reference, kind="vanilla")


def generate_text_corpus(task: SyntheticTask, prompts: Sequence[tuple], rng: RngState) -> Dataset:
    """Target samples with the context stripped, for text-only backbone pretraining."""
    ds = generate_self_distilled_data(task, prompts, ((1.0, 1.0),), rng, kind="text")
    for r in ds.records:
        r.ctx = None
    return ds


# ---------------------------------------------------------------- training


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 5
    batch_size: int = 64
    lr: float = 1e-2
    seed: int = 0
    phase: str = "projector_pretrain"

    def __post_init__(self):
        if self.phase not in PHASES:
            raise ValueError(f"unknown phase {self.phase!r}")
        if self.epochs < 0 or self.batch_size < 1 or self.lr < 0:
            raise ValueError("epochs >= 0, batch_size >= 1 and lr >= 0 required")


def _subset(full: TokenBatch, offsets: np.ndarray, ids: np.ndarray) -> TokenBatch:
    pos = np.concatenate([np.arange(offsets[i], offsets[i + 1]) for i in ids])
    remap = np.empty(full.n_records, dtype=np.int64)
    remap[ids] = np.arange(len(ids))
    return TokenBatch(full.windows[pos], full.targets[pos], remap[full.record[pos]],
                      full.ctx[ids], full.has_ctx[ids], len(ids))


def fit(model: CompositeVlm, dataset: Dataset | Sequence[tuple], cfg: TrainConfig) -> list[float]:
    """Minibatch SGD on the teacher-forced NLL; returns per-epoch mean loss."""
    model.set_phase(cfg.phase)
    records = dataset.tuples() if isinstance(dataset, Dataset) else list(dataset)
    full = make_batch(model, records)
    offsets = np.searchsorted(full.record, np.arange(len(records) + 1))
    shuffle = RngState(cfg.seed).child(f"{cfg.phase}.shuffle")
    n = len(records)
    curve = []
    for epoch in range(cfg.epochs):
        order = shuffle.child(epoch).numpy().permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            ids = order[start:start + cfg.batch_size]
            loss, grads = batch_loss_and_gradients(model, _subset(full, offsets, ids))
            total += loss * len(ids)
            model.set_parameters(sgd_step(model.parameters(), grads, cfg.lr, model.frozen))
        curve.append(total / n)
    return curve


def _require_phase(cfg: TrainConfig, phase: str):
    if cfg.phase != phase:
        raise ValueError(f"expected a {phase!r} train config, got {cfg.phase!r}")


def pretrain_text_backbone(drafter: CompositeVlm, corpus: Dataset, cfg: TrainConfig):
    _require_phase(cfg, "text_pretrain")
    return drafter, fit(drafter, corpus, cfg)


def pretrain_projector(drafter: CompositeVlm, d_pre: Dataset, cfg: TrainConfig,
                       shared_encoder: VisionEncoder | None = None):
    """Only projector weights move; encoder and backbone stay bit-identical."""
    _require_phase(cfg, "projector_pretrain")
    if shared_encoder is not None and drafter.encoder is not shared_encoder:
        raise ValueError("drafter must share the target's encoder instance")
    return drafter, fit(drafter, d_pre, cfg)


def sdvit_finetune(drafter: CompositeVlm, d_distilled: Dataset, cfg: TrainConfig):
    """Projector + backbone on target-sampled responses; encoder frozen."""
    _require_phase(cfg, "sdvit")
    return drafter, fit(drafter, d_distilled, cfg)


def vanilla_finetune(drafter: CompositeVlm, d_ref: Dataset, cfg: TrainConfig):
    """Same optimization as :func:`sdvit_finetune`, on fixed reference labels."""
    _require_phase(cfg, "sdvit")
    return drafter, fit(drafter, d_ref, cfg)
