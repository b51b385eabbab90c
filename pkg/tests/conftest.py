import time
from dataclasses import dataclass
from pathlib import Path

import pytest

from mmspec.cli import ExperimentResult, run_experiment
from mmspec.config import ExperimentConfig
from mmspec.distill import TaskDims

TINY_DIMS = TaskDims(vocab=8, d_ctx=4, d_vis=4, target_d_emb=8, target_k=2, target_hidden=16,
                     drafter_d_emb=4, drafter_k=1, drafter_hidden=8, max_response=6)

# one line per acceptance criterion, printed in the terminal summary
CRITERIA: dict[int, str] = {}


def record_criterion(number: int, passed: bool, summary: str, seconds: float) -> None:
    CRITERIA[number] = f"[{'PASS' if passed else 'FAIL'}] criterion {number:2d}: {summary} ({seconds:.1f}s)"


def pytest_collection_modifyitems(items):
    for item in items:
        if "default_run" in getattr(item, "fixturenames", ()):
            item.add_marker(pytest.mark.slow)


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(CRITERIA):
            terminalreporter.write_line(CRITERIA[n])


@dataclass
class PipelineRun:
    cfg: ExperimentConfig
    out: Path
    result: ExperimentResult
    seconds: float


def _run(cfg: ExperimentConfig) -> PipelineRun:
    t0 = time.perf_counter()
    result = run_experiment(cfg)
    return PipelineRun(cfg, Path(cfg.out), result, time.perf_counter() - t0)


@pytest.fixture(scope="session")
def default_run(tmp_path_factory) -> PipelineRun:
    """The full default experiment, shared by every test that needs trained arms."""
    return _run(ExperimentConfig(out=str(tmp_path_factory.mktemp("default_run"))))


def tiny_config(out, **overrides) -> ExperimentConfig:
    cfg = ExperimentConfig(out=str(out), task=TINY_DIMS).override(**{
        "data.n_text": 200, "data.n_pretrain": 150, "data.n_distill": 200, "data.n_eval": 12, "data.n_probe": 4,
        "train.text.epochs": 2, "train.phase1.epochs": 2, "train.phase2.epochs": 2,
        "eval.max_tokens": 8, "verify.trials": 3000, "verify.identity_pairs": 100,
    })
    return cfg.override(**overrides).validate()


@pytest.fixture
def tiny_cfg(tmp_path):
    return tiny_config(tmp_path / "run")
