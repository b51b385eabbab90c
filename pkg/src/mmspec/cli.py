"""Experiment orchestration and the ``mmspec`` command line.

Verbs: ``train`` (task, datasets, drafter arms, checkpoints), ``bench``
(speculative decoding benchmarks, TVD probes, reports), ``ablate`` (the
SDViT and text-only comparisons), ``verify`` (losslessness suite; exit code
1 on any failure) and ``report`` (rebuild report files from stored traces).
Each verb reuses whatever a previous run left in the output directory when
its config hash matches.
"""
from __future__ import annotations

import argparse
import contextlib
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__, analysis, distill, specdec
from .analysis import BenchmarkReport, TvdReport
from .config import ABLATIONS, ARMS, ConfigError, ExperimentConfig, parse_text
from .core import RngState, Vocabulary
from .models import CompositeVlm, checkpoint, random_tabular
from .models.tabular import TabularModel

log = logging.getLogger("mmspec")

VERSION = f"v{__version__}"
EVAL_TASKS = ("caption", "instruct")
TEXT_ONLY_SUFFIX = "_text_only"


class StageError(RuntimeError):
    """A pipeline stage failed; the message names the stage."""


@contextlib.contextmanager
def stage(name: str):
    log.info("stage %s", name)
    try:
        yield
    except StageError:
        raise
    except Exception as exc:
        raise StageError(f"stage {name!r} failed: {type(exc).__name__}: {exc}") from exc


# ---------------------------------------------------------------- training


@dataclass
class TrainedArms:
    task: distill.SyntheticTask
    models: dict[str, CompositeVlm]
    curves: dict[str, list[float]] = field(default_factory=dict)


def _train_cfg(cfg: ExperimentConfig, section, phase: str) -> distill.TrainConfig:
    return distill.TrainConfig(section.epochs, section.batch_size, section.lr, cfg.seed, phase)


def build_task(cfg: ExperimentConfig) -> distill.SyntheticTask:
    return distill.build_synthetic_task(cfg.seed, cfg.task, ctx_dependent=cfg.data.ctx_dependent)


def train_arms(cfg: ExperimentConfig, out: Path | None = None) -> TrainedArms:
    """Run the drafter pipeline for every configured arm.

    Also returns the phase-1 drafter as ``pre_sdvit``, the common starting
    point of both fine-tuned arms.
    """
    root = RngState(cfg.seed)
    with stage("task"):
        task = build_task(cfg)
    d = cfg.data
    datasets: dict[str, distill.Dataset] = {}
    curves: dict[str, list[float]] = {}
    models: dict[str, CompositeVlm] = {}

    with stage("text.data"):
        prompts = distill.sample_prompts(task, d.n_text, root.child("text.prompts"))
        datasets["text"] = distill.generate_text_corpus(task, prompts, root.child("text.data"))
    with stage("text.train"):
        backbone = distill.new_drafter(task, root.child("drafter.init"))
        _, curves["text"] = distill.pretrain_text_backbone(
            backbone, datasets["text"], _train_cfg(cfg, cfg.train.text, "text_pretrain"))
    models["baseline_text_only"] = backbone

    if any(a != "baseline_text_only" for a in cfg.arms):
        with stage("phase1.data"):
            datasets["pretrain"] = distill.generate_pretrain_data(task, d.n_pretrain, root.child("phase1.data"))
        with stage("phase1.train"):
            pre = distill.attach_projector(backbone, root.child("projector.init"))
            _, curves["phase1"] = distill.pretrain_projector(
                pre, datasets["pretrain"], _train_cfg(cfg, cfg.train.phase1, "projector_pretrain"),
                shared_encoder=task.encoder)
        models["pre_sdvit"] = pre
        prompts = distill.sample_prompts(task, d.n_distill, root.child("phase2.prompts"))
        phase2 = _train_cfg(cfg, cfg.train.phase2, "sdvit")
        if "massv_full" in cfg.arms:
            with stage("phase2.data"):
                datasets["sdvit"] = distill.generate_self_distilled_data(
                    task, prompts, d.grid, root.child("phase2.data"))
            with stage("phase2.train"):
                full = distill.clone(pre)
                _, curves["sdvit"] = distill.sdvit_finetune(full, datasets["sdvit"], phase2)
            models["massv_full"] = full
        if "massv_no_sdvit" in cfg.arms:
            with stage("vanilla.data"):
                datasets["vanilla"] = distill.generate_reference_data(task, prompts, root.child("vanilla.data"))
            with stage("vanilla.train"):
                nos = distill.clone(pre)
                _, curves["vanilla"] = distill.vanilla_finetune(nos, datasets["vanilla"], phase2)
            models["massv_no_sdvit"] = nos

    if out is not None:
        with stage("train.write"):
            (out / "datasets").mkdir(parents=True, exist_ok=True)
            for kind, ds in datasets.items():
                ds.to_jsonl(out / "datasets" / f"{kind}.jsonl")
            ck = out / "checkpoints"
            ck.mkdir(parents=True, exist_ok=True)
            for name, model in models.items():
                checkpoint.save(model, ck / f"{name}.json")
            (out / "curves.json").write_text(json.dumps(curves, indent=2, sort_keys=True) + "\n")
            manifest = {"config_hash": cfg.config_hash(), "models": sorted(models)}
            (ck / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return TrainedArms(task, models, curves)


def load_or_train(cfg: ExperimentConfig, out: Path | None) -> TrainedArms:
    """Reuse checkpoints from ``out`` when they were produced by the same config."""
    needed = set(cfg.arms) | ({"pre_sdvit"} if set(cfg.arms) - {"baseline_text_only"} else set())
    if out is not None:
        manifest = out / "checkpoints" / "manifest.json"
        if manifest.exists():
            meta = json.loads(manifest.read_text())
            if meta.get("config_hash") == cfg.config_hash() and needed <= set(meta["models"]):
                with stage("checkpoints.load"):
                    task = build_task(cfg)
                    models = {n: checkpoint.load(out / "checkpoints" / f"{n}.json", encoder=task.encoder)
                              for n in meta["models"]}
                    curves_path = out / "curves.json"
                    curves = json.loads(curves_path.read_text()) if curves_path.exists() else {}
                log.info("reusing checkpoints in %s", out / "checkpoints")
                return TrainedArms(task, models, curves)
    return train_arms(cfg, out)


# ---------------------------------------------------------------- benchmark


def eval_prompts(task: distill.SyntheticTask, cfg: ExperimentConfig) -> dict[str, list[tuple]]:
    """Caption-style prompts (no instruction) and short-instruction prompts."""
    root = RngState(cfg.seed)
    n = cfg.data.n_eval
    return {
        "caption": distill.sample_prompts(task, n, root.child("eval.caption"), 0, 0),
        "instruct": distill.sample_prompts(task, n, root.child("eval.instruct"), 1, task.dims.max_instruction),
    }


def _methods(arms: TrainedArms, names: Sequence[str]) -> dict[str, tuple[CompositeVlm, bool]]:
    """Method name -> (drafter, text_only)."""
    out = {}
    for name in names:
        if name == "baseline_text_only":
            out[name] = (arms.models[name], True)
        elif name.endswith(TEXT_ONLY_SUFFIX):
            out[name] = (arms.models[name[: -len(TEXT_ONLY_SUFFIX)]], True)
        else:
            out[name] = (arms.models[name], False)
    return out


def _bench_stream(seed: int, temperature: float) -> RngState:
    return RngState(seed).child(f"bench.T{temperature:g}")


def run_benchmarks(cfg: ExperimentConfig, arms: TrainedArms, methods: Sequence[str],
                   prompts: dict[str, list[tuple]]) -> dict[tuple[str, float, str], list[specdec.SpeculationTrace]]:
    """Decode every prompt with every method; all methods share per-sequence streams."""
    target = arms.task.target
    table = _methods(arms, methods)
    results = {}
    pool = ThreadPoolExecutor(cfg.workers) if cfg.workers > 1 else None
    try:
        for T in cfg.eval.temperatures:
            spec = specdec.SpecConfig(cfg.eval.gamma, float(T), cfg.eval.max_tokens)
            stream = _bench_stream(cfg.seed, T)
            for method, (drafter, text_only) in table.items():
                for task_name in EVAL_TASKS:
                    jobs = list(enumerate(prompts[task_name]))

                    def one(job, drafter=drafter, text_only=text_only, task_name=task_name):
                        i, (ctx, instruction) = job
                        rng = stream.child(f"{task_name}.{i}")
                        dec = specdec.text_only_decode if text_only else specdec.decode
                        return dec(target, drafter, instruction, ctx, spec, rng).trace

                    with stage(f"bench.T{T:g}.{method}.{task_name}"):
                        traces = list(pool.map(one, jobs)) if pool else [one(j) for j in jobs]
                    results[(method, float(T), task_name)] = traces
    finally:
        if pool:
            pool.shutdown()
    return results


def _provenance(cfg: ExperimentConfig) -> dict:
    return {"config_hash": cfg.config_hash(), "version": VERSION, "seed": cfg.seed}


def _trace_path(out: Path, method: str, T: float, task: str) -> Path:
    return out / "traces" / f"{method}__T{T:g}__{task}.jsonl"


def write_trace_files(out: Path, results) -> None:
    (out / "traces").mkdir(parents=True, exist_ok=True)
    for (method, T, task), traces in results.items():
        with open(_trace_path(out, method, T, task), "w", encoding="utf-8") as fh:
            specdec.write_traces(fh, traces, method=method, temperature=T, task=task)


def _write_report(out: Path, report: BenchmarkReport, stem: str) -> None:
    (out / f"{stem}.csv").write_text(report.to_csv(), encoding="utf-8")
    (out / f"{stem}.json").write_text(report.to_json() + "\n", encoding="utf-8")


def probe_set(task: distill.SyntheticTask, cfg: ExperimentConfig, prompts) -> list[tuple]:
    chosen = [(ins, ctx) for name in EVAL_TASKS for ctx, ins in prompts[name][: cfg.data.n_probe]]
    return analysis.greedy_rollout_probes(task.target, chosen, cfg.eval.max_tokens)


def tvd_reports(arms: TrainedArms, probes, names: Sequence[str]) -> dict[str, TvdReport]:
    table = _methods(arms, names)
    return {name: analysis.tvd_probe(arms.task.target, m, probes, text_only=t) for name, (m, t) in table.items()}


@dataclass
class ExperimentResult:
    report: BenchmarkReport
    tvd: dict[str, TvdReport]
    arms: TrainedArms
    results: dict = field(default_factory=dict)


def _prepare_out(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved_config.txt").write_text(cfg.to_text(), encoding="utf-8")
    return out


def run_experiment(cfg: ExperimentConfig) -> ExperimentResult:
    """Train (or reload) every arm, benchmark them and write all artifacts."""
    cfg.validate()
    out = _prepare_out(cfg)
    arms = load_or_train(cfg, out)
    prompts = eval_prompts(arms.task, cfg)
    results = run_benchmarks(cfg, arms, cfg.arms, prompts)
    baseline = cfg.arms[0] if "baseline_text_only" not in cfg.arms else "baseline_text_only"
    with stage("report"):
        report = analysis.build_benchmark_report(results, baseline, cfg.eval.gamma, cfg.eval.cost_ratio,
                                                 _provenance(cfg))
        write_trace_files(out, results)
        _write_report(out, report, "report")
    with stage("tvd"):
        probes = probe_set(arms.task, cfg, prompts)
        names = list(cfg.arms) + (["pre_sdvit"] if "pre_sdvit" in arms.models else [])
        tvd = tvd_reports(arms, probes, names)
        (out / "tvd_hist.dat").write_text(analysis.histogram_dat(tvd), encoding="utf-8")
        summary = {n: {"mean": r.mean, "median": r.median, "mass_below_0.2": r.mass_below(0.2),
                       "probes": len(r.values)} for n, r in tvd.items()}
        (out / "tvd_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return ExperimentResult(report, tvd, arms, results)


ABLATION_METHODS = {
    "sdvit": ("baseline_text_only", "massv_no_sdvit", "massv_full"),
    "text_only": ("massv_full" + TEXT_ONLY_SUFFIX, "massv_full"),
}


def run_ablation(cfg: ExperimentConfig, ablation: str) -> BenchmarkReport:
    """Table-shaped comparison: SDViT vs plain fine-tuning, or multimodal vs text-only drafting.

    The first listed method is the speedup baseline. Setting
    ``data.ctx_dependent = false`` runs the same comparison on a control
    task whose target ignores the context.
    """
    if ablation not in ABLATIONS:
        raise ConfigError(f"unknown ablation {ablation!r}; choose from {list(ABLATIONS)}")
    cfg.validate()
    methods = ABLATION_METHODS[ablation]
    arms_needed = tuple(a for a in ARMS if any(m.startswith(a) for m in methods))
    cfg = cfg.override(arms=arms_needed) if set(arms_needed) != set(cfg.arms) else cfg
    out = _prepare_out(cfg)
    arms = load_or_train(cfg, out)
    prompts = eval_prompts(arms.task, cfg)
    results = run_benchmarks(cfg, arms, methods, prompts)
    with stage("report"):
        report = analysis.build_benchmark_report(results, methods[0], cfg.eval.gamma, cfg.eval.cost_ratio,
                                                 _provenance(cfg))
        _write_report(out, report, f"ablation_{ablation}")
    return report


def rebuild_report(cfg: ExperimentConfig) -> BenchmarkReport:
    """Recompute report.csv / report.json from stored traces, without decoding."""
    out = Path(cfg.out)
    results = {}
    for method in cfg.arms:
        for T in cfg.eval.temperatures:
            for task in EVAL_TASKS:
                path = _trace_path(out, method, float(T), task)
                if not path.exists():
                    raise FileNotFoundError(f"missing traces {path}; run 'bench' first")
                results[(method, float(T), task)] = specdec.read_traces(path)
    baseline = cfg.arms[0] if "baseline_text_only" not in cfg.arms else "baseline_text_only"
    report = analysis.build_benchmark_report(results, baseline, cfg.eval.gamma, cfg.eval.cost_ratio,
                                             _provenance(cfg))
    _write_report(out, report, "report")
    return report


# ---------------------------------------------------------------- losslessness suite


def adversarial_drafter(target: TabularModel) -> TabularModel:
    """Drafter that puts almost all mass on the target's least likely token."""
    V = target.vocab.size
    table = {}
    for key, p in target.table.items():
        q = np.full(V, 1e-3)
        q[int(np.argmin(p))] = 1.0
        table[key] = q / q.sum()
    return TabularModel(target.vocab, target.order, table, n_buckets=target.n_buckets)


def suite_pairs(cfg: ExperimentConfig) -> dict[str, tuple]:
    v = cfg.verify
    vocab = Vocabulary(v.vocab, eos=0)
    root = RngState(cfg.seed).child("verify.models")
    target = random_tabular(vocab, 2, root.child("target"))
    return {
        "aligned": (target, target),
        "independent": (target, random_tabular(vocab, 2, root.child("drafter"))),
        "sharpened": (target, random_tabular(vocab, 1, root.child("sharp"), concentration=0.2)),
        "adversarial": (target, adversarial_drafter(target)),
    }


def random_pair(gen: np.random.Generator, V: int) -> tuple[np.ndarray, np.ndarray]:
    """Random (p, q) with occasional exact zeros and near-identical pairs."""
    p = gen.dirichlet(np.full(V, gen.choice([0.1, 1.0, 10.0])))
    q = gen.dirichlet(np.full(V, gen.choice([0.1, 1.0, 10.0])))
    if gen.random() < 0.2:
        p[gen.random(V) < 0.3] = 0.0
    if gen.random() < 0.1:
        q = p + gen.normal(0, 1e-9, V)
    q = np.maximum(q, 0.0)
    if p.sum() == 0:
        p[0] = 1.0
    if q.sum() == 0:
        q[-1] = 1.0
    return p / p.sum(), q / q.sum()


def identity_sweep(n_pairs: int, rng: RngState, vmin: int = 2, vmax: int = 64) -> float:
    gen = rng.numpy()
    worst = 0.0
    for _ in range(n_pairs):
        p, q = random_pair(gen, int(gen.integers(vmin, vmax + 1)))
        worst = max(worst, analysis.single_step_identity_error(p, q))
    return worst


@dataclass
class SuiteVerdict:
    checks: list[dict]

    @property
    def passed(self) -> bool:
        return all(c["passed"] for c in self.checks)

    def to_json(self) -> str:
        return json.dumps({"passed": self.passed, "checks": self.checks}, indent=2, sort_keys=True)


def run_lossless_suite(cfg: ExperimentConfig, write: bool = True) -> SuiteVerdict:
    """Exact identity sweep, greedy exactness and chi-square checks over tabular pairs."""
    cfg.validate()
    v = cfg.verify
    root = RngState(cfg.seed).child("verify")
    checks = []
    with stage("verify.identity"):
        err = identity_sweep(v.identity_pairs, root.child("identity"))
        checks.append({"name": "single_step_identity", "max_error": err, "tol": 1e-12, "passed": err < 1e-12})
    pairs = suite_pairs(cfg)
    for name, (target, drafter) in pairs.items():
        with stage(f"verify.greedy.{name}"):
            spec = specdec.SpecConfig(v.gamma, 0.0, v.max_len)
            got = specdec.decode(target, drafter, [], None, spec, root.child(f"greedy.{name}")).tokens
            want = specdec.generate(target, [], None, v.max_len, temperature=0)
            checks.append({"name": f"greedy.{name}", "passed": got == want})
        for T in v.temperatures:
            with stage(f"verify.chi2.{name}.T{T:g}"):
                res = analysis.lossless_check(target, drafter, None, v.max_len, v.trials,
                                              root.child(f"chi2.{name}.T{T:g}"), gamma=v.gamma, temperature=T)
                checks.append({
                    "name": f"chi2.{name}.T{T:g}", "passed": res.passed, "p_value": res.chi2.p_value,
                    "statistic": res.chi2.statistic, "dof": res.chi2.dof, "impossible": res.chi2.impossible,
                    "identity_error": res.identity_error, "tau": res.tau, "trials": res.trials,
                })
    verdict = SuiteVerdict(checks)
    if write:
        out = _prepare_out(cfg)
        (out / "verify.json").write_text(verdict.to_json() + "\n", encoding="utf-8")
    return verdict


# ---------------------------------------------------------------- command line


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mmspec", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=VERSION)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="key = value config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("--arm", action="append", choices=ARMS, help="arm to run (repeatable)")
    common.add_argument("--gamma", type=int)
    common.add_argument("--temperature", type=float, action="append", help="evaluation temperature (repeatable)")
    common.add_argument("--workers", type=int, help="benchmark threads")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key")
    common.add_argument("-q", "--quiet", action="store_true")
    sub = parser.add_subparsers(dest="verb", required=True)
    sub.add_parser("train", parents=[common], help="build the task, datasets and drafter checkpoints")
    sub.add_parser("bench", parents=[common], help="benchmark every arm and write reports")
    ab = sub.add_parser("ablate", parents=[common], help="SDViT or text-only ablation table")
    ab.add_argument("--ablation", choices=ABLATIONS, default="sdvit")
    sub.add_parser("verify", parents=[common], help="losslessness suite; exit status 1 on failure")
    sub.add_parser("report", parents=[common], help="rebuild report files from stored traces")
    return parser


def config_from_args(args) -> ExperimentConfig:
    cfg = ExperimentConfig()
    if args.config is not None:
        cfg = parse_text(args.config.read_text(encoding="utf-8"), cfg)
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        cfg = cfg.override(**{key.strip(): value.strip()})
    flags = {"seed": args.seed, "out": args.out, "eval.gamma": args.gamma, "workers": args.workers,
             "arms": tuple(args.arm) if args.arm else None,
             "eval.temperatures": tuple(args.temperature) if args.temperature else None}
    cfg = cfg.override(**{k: v for k, v in flags.items() if v is not None})
    return cfg.validate()


def _print_rows(report: BenchmarkReport) -> None:
    for row in report.rows:
        if row["task"] == "overall":
            print(f"T={row['temperature']:g} {row['method']:<28s} tau={row['tau']:.3f} "
                  f"speedup={row['speedup']:.3f} model_speedup={row['model_speedup']:.3f}")


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        cfg = config_from_args(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    try:
        if args.verb == "train":
            out = _prepare_out(cfg)
            arms = load_or_train(cfg, out)
            for name, curve in arms.curves.items():
                print(f"{name}: loss {curve[0]:.4f} -> {curve[-1]:.4f}" if curve else f"{name}: no epochs")
        elif args.verb == "bench":
            _print_rows(run_experiment(cfg).report)
        elif args.verb == "ablate":
            _print_rows(run_ablation(cfg, args.ablation))
        elif args.verb == "verify":
            verdict = run_lossless_suite(cfg)
            for c in verdict.checks:
                print(f"{'PASS' if c['passed'] else 'FAIL'} {c['name']}")
            return 0 if verdict.passed else 1
        elif args.verb == "report":
            _print_rows(rebuild_report(cfg))
    except (StageError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
