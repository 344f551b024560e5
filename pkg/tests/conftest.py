from pathlib import Path

import numpy as np
import pytest

from gateadd.autodiff import Tensor, finite_difference_grad, relative_error


def gradcheck(loss_fn, params, h=1e-5):
    """Largest relative error between backprop and central differences over ``params``."""
    for p in params:
        p.grad = np.zeros_like(p.data)
    loss_fn().backward()
    worst = 0.0
    for p in params:
        numeric = finite_difference_grad(loss_fn, p, h)
        worst = max(worst, relative_error(p.grad, numeric))
    return worst


def param(rng, *shape, scale=1.0):
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# -- end-to-end CLI pipeline ---------------------------------------------------

SMOKE = str(Path(__file__).resolve().parents[1] / "configs" / "smoke.toml")


def cli_pipeline(root: Path, config: str = SMOKE) -> dict[str, Path]:
    """gen-data, pretrain, add-task, vanilla and single runs, all evaluated."""
    from gateadd.cli import run

    d = {k: root / k for k in ("data", "pre", "add", "van", "single")}
    steps = [
        ["gen-data", "--config", config, "--out", d["data"]],
        ["pretrain", "--config", config, "--data", d["data"], "--out", d["pre"]],
        ["add-task", "--config", config, "--data", d["data"], "--checkpoint", d["pre"], "--out", d["add"]],
        ["train-vanilla", "--config", config, "--data", d["data"], "--out", d["van"]],
        ["train-single", "--config", config, "--data", d["data"], "--out", d["single"]],
        ["evaluate", "--run", d["add"], "--vanilla", d["van"]],
        ["evaluate", "--run", d["single"]],
        ["-q", "report", d["add"], d["single"], "--out", root / "report"],
    ]
    for argv in steps:
        assert run([str(a) for a in argv]) == 0, argv
    return d


# -- acceptance verdicts ---------------------------------------------------------

VERDICTS: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in VERDICTS:
            terminalreporter.write_line(line)
