"""Draft / verify / resample speculative decoding over any LanguageModel.

Target verification of the drafted block is evaluated position by position
here but accounted as a single target forward pass per iteration, which is
what the mean accepted length measures.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import IO, Iterable, Sequence

from .core import AllZeroError, RngState, argmax, normalize, sample, temperature_scale, top_p_filter

import numpy as np

_SAME = object()


class DraftZeroProbability(ValueError):
    """A drafted token had zero draft probability (violates the sampling contract)."""


class ResidualInvariantError(AllZeroError):
    """Residual mass vanished although a rejection occurred."""


@dataclass(frozen=True)
class SpecConfig:
    gamma: int = 5
    temperature: float = 1.0
    max_tokens: int = 64
    mode: str = ""

    def __post_init__(self):
        if self.gamma < 1:
            raise ValueError("gamma must be a positive integer")
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be a positive integer")
        if self.temperature < 0:
            raise ValueError("temperature must be non-negative")
        expected = "greedy" if self.temperature == 0 else "sampled"
        if not self.mode:
            object.__setattr__(self, "mode", expected)
        elif self.mode != expected:
            raise ValueError(f"mode {self.mode!r} inconsistent with temperature {self.temperature}")

    @property
    def greedy(self) -> bool:
        return self.mode == "greedy"


@dataclass
class IterationRecord:
    drafted: list[int]
    accepted: list[bool]
    emitted: list[int]
    target_passes: int = 1


@dataclass
class SpeculationTrace:
    iterations: list[IterationRecord] = field(default_factory=list)

    @property
    def emitted(self) -> int:
        return sum(len(it.emitted) for it in self.iterations)

    @property
    def forward_passes(self) -> int:
        return sum(it.target_passes for it in self.iterations)


@dataclass
class DecodeResult:
    tokens: list[int]
    trace: SpeculationTrace
    tau: float


def acceptance_probability(p_tok: float, q_tok: float) -> float:
    if q_tok <= 0:
        raise DraftZeroProbability(f"drafted token has draft probability {q_tok}")
    return min(1.0, p_tok / q_tok)


def residual_distribution(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    try:
        return normalize(np.maximum(p - q, 0.0))
    except AllZeroError as exc:
        raise ResidualInvariantError("residual distribution is empty: p == q at a rejected position") from exc


def run_iteration(target, drafter, prefix: Sequence[int], ctx, cfg: SpecConfig, rng: RngState,
                  draft_ctx=_SAME, budget: int | None = None) -> tuple[list[int], IterationRecord]:
    """One draft-then-verify round; returns emitted tokens and the record.

    ``budget`` caps the number of emitted tokens (the draft is shortened to
    ``budget - 1``). ``draft_ctx`` overrides the context seen by the
    drafter; pass ``None`` for text-only drafting.
    """
    if draft_ctx is _SAME:
        draft_ctx = ctx
    budget = cfg.max_tokens if budget is None else budget
    if budget < 1:
        raise ValueError("budget must be at least one token")
    eos = target.vocab.eos
    T = cfg.temperature
    greedy = cfg.greedy
    n_draft = min(cfg.gamma, budget - 1)

    seq = list(prefix)
    drafted: list[int] = []
    qs = []
    for _ in range(n_draft):
        q = drafter.next_distribution(seq, draft_ctx)
        if greedy:
            x = argmax(q)
        else:
            q = temperature_scale(q, T)
            x = sample(q, rng)
        drafted.append(x)
        qs.append(q)
        seq.append(x)
        if x == eos:
            break

    # the target scores drafted[:i] for i = 0..len(drafted) in one notional pass
    seq = list(prefix)
    emitted: list[int] = []
    accepted: list[bool] = []
    for i, x in enumerate(drafted):
        p = target.next_distribution(seq, ctx)
        if greedy:
            ok = x == argmax(p)
        else:
            p = temperature_scale(p, T)
            ok = bool(rng.uniform() < acceptance_probability(float(p[x]), float(qs[i][x])))
        accepted.append(ok)
        if not ok:
            emitted.append(argmax(p) if greedy else sample(residual_distribution(p, qs[i]), rng))
            break
        emitted.append(x)
        seq.append(x)
    else:
        if not drafted or drafted[-1] != eos:
            p = target.next_distribution(seq, ctx)
            emitted.append(argmax(p) if greedy else sample(temperature_scale(p, T), rng))
    return emitted, IterationRecord(drafted, accepted, list(emitted))


def decode(target, drafter, prompt: Sequence[int], ctx, cfg: SpecConfig, rng: RngState,
           draft_ctx=_SAME) -> DecodeResult:
    eos = target.vocab.eos
    if drafter.vocab.size != target.vocab.size:
        raise ValueError("drafter and target must share a vocabulary")
    prompt = list(prompt)
    out: list[int] = []
    trace = SpeculationTrace()
    while len(out) < cfg.max_tokens:
        emitted, rec = run_iteration(target, drafter, prompt + out, ctx, cfg, rng,
                                     draft_ctx=draft_ctx, budget=cfg.max_tokens - len(out))
        if eos in emitted:
            emitted = emitted[: emitted.index(eos) + 1]
            rec.emitted = list(emitted)
        trace.iterations.append(rec)
        out.extend(emitted)
        if out[-1] == eos:
            break
    return DecodeResult(out, trace, trace.emitted / trace.forward_passes)


def text_only_decode(target, text_drafter, prompt: Sequence[int], ctx, cfg: SpecConfig,
                     rng: RngState) -> DecodeResult:
    """Same protocol, but the drafter never sees the context."""
    return decode(target, text_drafter, prompt, ctx, cfg, rng, draft_ctx=None)


def generate(model, prompt: Sequence[int], ctx, max_tokens: int, rng: RngState | None = None,
             temperature: float = 1.0, top_p: float = 1.0) -> list[int]:
    """Plain autoregressive generation from one model, stopping at EOS."""
    if temperature != 0 and rng is None:
        raise ValueError("sampled generation needs an RngState")
    eos = model.vocab.eos
    seq = list(prompt)
    out: list[int] = []
    while len(out) < max_tokens:
        d = model.next_distribution(seq, ctx)
        if temperature == 0:
            x = argmax(d)
        else:
            x = sample(top_p_filter(temperature_scale(d, temperature), top_p), rng)
        out.append(x)
        seq.append(x)
        if x == eos:
            break
    return out


def write_traces(fh: IO[str], traces: Iterable[SpeculationTrace], **meta) -> None:
    """One JSON line per iteration, tagged with its sequence index."""
    for s, trace in enumerate(traces):
        for j, it in enumerate(trace.iterations):
            row = dict(meta, seq=s, iter=j, **asdict(it))
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def read_traces(path: str | Path) -> list[SpeculationTrace]:
    traces: dict[int, SpeculationTrace] = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            row = json.loads(line)
            rec = IterationRecord(row["drafted"], row["accepted"], row["emitted"], row["target_passes"])
            traces.setdefault(row["seq"], SpeculationTrace()).iterations.append(rec)
    return [traces[k] for k in sorted(traces)]
