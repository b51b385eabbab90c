"""Alignment and acceleration metrics plus brute-force correctness oracles."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy import stats

from . import specdec
from .core import DimensionMismatch, RngState, temperature_scale
from .specdec import SpecConfig, SpeculationTrace

N_BINS = 20
CHI2_ALPHA = 1e-3
MIN_EXPECTED = 5.0


class EmptyTraces(ValueError):
    pass


class ExplosionGuard(ValueError):
    """Enumeration would exceed the sequence-count budget."""


def tvd(P: np.ndarray, Q: np.ndarray) -> float:
    P = np.asarray(P, dtype=np.float64)
    Q = np.asarray(Q, dtype=np.float64)
    if P.shape != Q.shape:
        raise DimensionMismatch(f"distributions over {P.shape} and {Q.shape}")
    return float(0.5 * np.abs(P - Q).sum())


@dataclass
class TvdReport:
    values: list[float]
    edges: list[float]
    counts: list[int]
    mean: float
    median: float

    @classmethod
    def from_values(cls, values: Sequence[float], bins: int = N_BINS) -> "TvdReport":
        v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
        counts, edges = np.histogram(v, bins=bins, range=(0.0, 1.0))
        return cls(v.tolist(), edges.tolist(), counts.tolist(), float(v.mean()), float(np.median(v)))

    def mass_below(self, threshold: float) -> float:
        v = np.asarray(self.values)
        return float((v < threshold).mean())


def tvd_probe(target, drafter, probes: Sequence[tuple], text_only: bool = False) -> TvdReport:
    """TVD between target and drafter next-token distributions at each (prefix, ctx)."""
    if not probes:
        raise ValueError("probe set is empty")
    values = []
    for prefix, ctx in probes:
        p = target.next_distribution(prefix, ctx)
        q = drafter.next_distribution(prefix, None if text_only else ctx)
        values.append(tvd(p, q))
    return TvdReport.from_values(values)


def greedy_rollout_probes(target, prompts: Iterable[tuple], max_tokens: int) -> list[tuple]:
    """Every position along the target's greedy continuation of each (prompt, ctx)."""
    probes = []
    for prompt, ctx in prompts:
        out = specdec.generate(target, prompt, ctx, max_tokens, temperature=0)
        seq = list(prompt)
        for tok in out:
            probes.append((tuple(seq), ctx))
            seq.append(tok)
    return probes


def mean_accepted_length(traces: Iterable[SpeculationTrace]) -> float:
    """Emitted tokens per target forward pass, pooled over all traces."""
    emitted = passes = 0
    for t in traces:
        emitted += t.emitted
        passes += t.forward_passes
    if passes == 0:
        raise EmptyTraces("no speculation iterations to average")
    return emitted / passes


def paired_tau_difference(a: Sequence[SpeculationTrace], b: Sequence[SpeculationTrace]) -> tuple[float, float]:
    """tau(a) - tau(b) and its delta-method standard error.

    ``a[i]`` and ``b[i]`` must decode the same prompt, so the per-sequence
    linearized contributions are differenced before taking the variance.
    """
    if len(a) != len(b) or not a:
        raise ValueError("need two equally long, non-empty trace lists")
    ea = np.array([t.emitted for t in a], dtype=np.float64)
    pa = np.array([t.forward_passes for t in a], dtype=np.float64)
    eb = np.array([t.emitted for t in b], dtype=np.float64)
    pb = np.array([t.forward_passes for t in b], dtype=np.float64)
    ta, tb = ea.sum() / pa.sum(), eb.sum() / pb.sum()
    z = (ea - ta * pa) / pa.sum() - (eb - tb * pb) / pb.sum()
    n = len(z)
    se = float(np.sqrt(n / (n - 1) * np.sum((z - z.mean()) ** 2))) if n > 1 else math.inf
    return float(ta - tb), se


def speedup_model(tau: float, gamma: int, cost_ratio: float) -> float:
    """Target-equivalent tokens per unit cost of gamma draft calls plus one target call."""
    if tau < 1:
        raise ValueError("tau must be at least 1")
    if gamma < 1:
        raise ValueError("gamma must be a positive integer")
    if cost_ratio < 0:
        raise ValueError("cost ratio must be non-negative")
    return tau / (gamma * cost_ratio + 1.0)


def enumerate_sequence_distribution(model, ctx, max_len: int, temperature: float = 1.0,
                                    prompt: Sequence[int] = (), limit: int = 10**6) -> dict[tuple, float]:
    """Exact probability of every EOS-terminated or length-capped continuation."""
    V = model.vocab.size
    if V ** max_len > limit:
        raise ExplosionGuard(f"{V}^{max_len} sequences exceed the enumeration limit {limit}")
    eos = model.vocab.eos
    out: dict[tuple, float] = {}
    stack = [((), 1.0)]
    prompt = list(prompt)
    while stack:
        seq, mass = stack.pop()
        d = temperature_scale(model.next_distribution(prompt + list(seq), ctx), temperature)
        for tok in np.flatnonzero(d):
            tok = int(tok)
            m = mass * float(d[tok])
            nxt = seq + (tok,)
            if tok == eos or len(nxt) == max_len:
                out[nxt] = out.get(nxt, 0.0) + m
            else:
                stack.append((nxt, m))
    return out


def single_step_identity_error(p: np.ndarray, q: np.ndarray, acceptance=None) -> float:
    """Max over tokens of |accepted mass + rejected mass * residual - p|.

    Out-of-range acceptance probabilities count as identity violations.
    """
    acceptance = acceptance or specdec.acceptance_probability
    accept = np.zeros_like(p)
    for x in np.flatnonzero(q):
        accept[x] = acceptance(float(p[x]), float(q[x]))
    range_violation = float(np.max(np.maximum(accept - 1.0, 0.0) + np.maximum(-accept, 0.0)))
    accepted_mass = q * accept
    p_reject = float(np.sum(q - accepted_mass))
    if p_reject > 0:
        residual = specdec.residual_distribution(p, q)
        total = accepted_mass + p_reject * residual
    else:
        total = accepted_mass
    return max(float(np.max(np.abs(total - p))), range_violation)


@dataclass
class ChiSquareResult:
    statistic: float
    p_value: float
    dof: int
    impossible: int
    passed: bool


def chi_square_test(counts: Mapping, probs: Mapping, alpha: float = CHI2_ALPHA) -> ChiSquareResult:
    """Goodness of fit; cells with expected count < 5 are pooled into one."""
    n = sum(counts.values())
    impossible = sum(c for key, c in counts.items() if probs.get(key, 0.0) <= 0.0)
    obs, exp = [], []
    other_obs = other_exp = 0.0
    for key, pr in probs.items():
        e = n * pr
        if e >= MIN_EXPECTED:
            obs.append(counts.get(key, 0))
            exp.append(e)
        else:
            other_obs += counts.get(key, 0)
            other_exp += e
    if other_exp > 0:
        obs.append(other_obs)
        exp.append(other_exp)
    obs = np.asarray(obs, dtype=np.float64)
    exp = np.asarray(exp, dtype=np.float64)
    exp *= obs.sum() / exp.sum()
    if len(obs) < 2:
        return ChiSquareResult(0.0, 1.0, 0, impossible, impossible == 0)
    res = stats.chisquare(obs, exp)
    passed = bool(impossible == 0 and res.pvalue >= alpha)
    return ChiSquareResult(float(res.statistic), float(res.pvalue), len(obs) - 1, impossible, passed)


@dataclass
class LosslessVerdict:
    passed: bool
    chi2: ChiSquareResult
    identity_error: float
    identity_tol: float
    trials: int
    tau: float

    def as_dict(self) -> dict:
        return asdict(self)


def _prefixes(vocab_size: int, eos: int, max_len: int):
    frontier = [()]
    for _ in range(max_len):
        nxt = []
        for seq in frontier:
            yield seq
            nxt.extend(seq + (t,) for t in range(vocab_size) if t != eos)
        frontier = nxt


def lossless_check(target, drafter, ctx, max_len: int, trials: int, rng: RngState,
                   gamma: int = 3, temperature: float = 1.0, prompt: Sequence[int] = (),
                   identity_tol: float = 1e-12, alpha: float = CHI2_ALPHA) -> LosslessVerdict:
    """Statistical sequence-level check plus the exact per-prefix identity."""
    oracle = enumerate_sequence_distribution(target, ctx, max_len, temperature, prompt)
    cfg = SpecConfig(gamma=gamma, temperature=temperature, max_tokens=max_len)
    counts: dict[tuple, int] = {}
    emitted = passes = 0
    for _ in range(trials):
        res = specdec.decode(target, drafter, prompt, ctx, cfg, rng)
        key = tuple(res.tokens)
        counts[key] = counts.get(key, 0) + 1
        emitted += res.trace.emitted
        passes += res.trace.forward_passes
    chi = chi_square_test(counts, oracle, alpha)

    worst = 0.0
    for seq in _prefixes(target.vocab.size, target.vocab.eos, max_len):
        prefix = list(prompt) + list(seq)
        p = temperature_scale(target.next_distribution(prefix, ctx), temperature)
        q = temperature_scale(drafter.next_distribution(prefix, ctx), temperature)
        worst = max(worst, single_step_identity_error(p, q))
    passed = bool(chi.passed and worst < identity_tol)
    return LosslessVerdict(passed, chi, worst, identity_tol, trials, emitted / passes)


REPORT_FIELDS = ("task", "method", "temperature", "gamma", "tau", "emitted", "passes",
                 "sequences", "speedup", "model_speedup", "baseline", "config_hash", "version", "seed")


@dataclass
class BenchmarkReport:
    """Rows of (task, method, temperature) results; speedups are relative to ``baseline``."""

    rows: list[dict] = field(default_factory=list)
    baseline: str = ""
    tau_convention: str = "emitted tokens (accepted + resampled/bonus) per target forward pass"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=REPORT_FIELDS, lineterminator="\n")
        w.writeheader()
        for row in self.rows:
            w.writerow({k: _fmt(row[k]) for k in REPORT_FIELDS})
        return buf.getvalue()

    def to_json(self) -> str:
        payload = {"baseline": self.baseline, "tau_convention": self.tau_convention, "rows": self.rows}
        return json.dumps(payload, indent=2, sort_keys=True)

    def tau(self, method: str, temperature: float, task: str = "overall") -> float:
        for row in self.rows:
            if row["method"] == method and row["temperature"] == temperature and row["task"] == task:
                return row["tau"]
        raise KeyError((method, temperature, task))


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.6f}"
    return v


def build_benchmark_report(results: Mapping[tuple[str, float, str], Sequence[SpeculationTrace]],
                           baseline: str, gamma: int, cost_ratio: float,
                           provenance: Mapping[str, object]) -> BenchmarkReport:
    """``results`` maps (method, temperature, task) to per-sequence traces.

    The overall row pools every task, i.e. the emitted-token-weighted
    harmonic mean of per-task tau.
    """
    rows = []
    tasks = sorted({task for _, _, task in results})
    methods = list(dict.fromkeys(m for m, _, _ in results))
    temps = sorted({t for _, t, _ in results})
    for T in temps:
        for task in tasks + ["overall"]:
            base_tau = None
            for method in [baseline] + [m for m in methods if m != baseline]:
                if task == "overall":
                    traces = [tr for (m, t, _), trs in results.items() if m == method and t == T for tr in trs]
                else:
                    traces = list(results.get((method, T, task), ()))
                if not traces:
                    continue
                tau = mean_accepted_length(traces)
                if method == baseline:
                    base_tau = tau
                speed = speedup_model(tau, gamma, cost_ratio)
                rel = speed / speedup_model(base_tau, gamma, cost_ratio) if base_tau else math.nan
                rows.append({
                    "task": task, "method": method, "temperature": float(T), "gamma": gamma,
                    "tau": tau, "emitted": sum(t.emitted for t in traces),
                    "passes": sum(t.forward_passes for t in traces), "sequences": len(traces),
                    "speedup": rel, "model_speedup": speed, "baseline": baseline, **provenance,
                })
    return BenchmarkReport(rows, baseline)


def histogram_dat(reports: Mapping[str, TvdReport]) -> str:
    """Gnuplot-friendly columns: bin_lo bin_hi then one count column per report."""
    names = list(reports)
    edges = reports[names[0]].edges
    lines = ["# bin_lo bin_hi " + " ".join(names)]
    for i in range(len(edges) - 1):
        counts = " ".join(str(reports[n].counts[i]) for n in names)
        lines.append(f"{edges[i]:.2f} {edges[i + 1]:.2f} {counts}")
    return "\n".join(lines) + "\n"
