import time

import numpy as np
import pytest

from woundseg.data_io import SynthConfig, generate_synthetic
from woundseg.model import ModelConfig, TransUNet
from woundseg.tensor import precision
from woundseg.training import DataGenerator, TrainConfig, train

OVERFIT_SEEDS = (0, 1, 2)
OVERFIT_MAX_EPOCHS = 300
OVERFIT_TARGET = 0.95


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def f64():
    """Run the test body in 64-bit mode (gradient checks)."""
    with precision(np.float64):
        yield


@pytest.fixture
def synth_root(tmp_path):
    generate_synthetic(SynthConfig(count=8, image_hw=64, seed=0), tmp_path, "train")
    generate_synthetic(SynthConfig(count=2, image_hw=64, seed=1), tmp_path, "validation")
    return tmp_path


def run_overfit(seed: int, out_dir):
    """Scaled model on 8 synthetic images, validated on the same images.

    Patience is disabled so that the run lasts until the inference-mode
    training Dice reaches the target (or the epoch budget runs out).
    """
    index = generate_synthetic(SynthConfig(count=8, image_hw=64, seed=seed), out_dir / "data", "train")
    cfg = TrainConfig(
        max_epochs=OVERFIT_MAX_EPOCHS, seed=seed, target_hw=64, eval_train=True,
        stop_patience=10_000, plateau_patience=10_000, stop_at_train_dice=OVERFIT_TARGET,
    )
    gen = DataGenerator(index, cfg.batch_size, shuffle=True, seed=seed, target_hw=64)
    val = DataGenerator(index, cfg.batch_size, target_hw=64)
    model = TransUNet(ModelConfig.scaled(), seed=seed)
    result = train(model, gen, val, cfg, out_dir / "run")
    return model, result, index


@pytest.fixture(scope="session")
def overfit_runs(tmp_path_factory):
    """Three overfit runs shared by the training, explain and acceptance tests."""
    runs = {}
    for seed in OVERFIT_SEEDS:
        out = tmp_path_factory.mktemp(f"overfit{seed}")
        t0 = time.perf_counter()
        model, result, index = run_overfit(seed, out)
        runs[seed] = {"model": model, "result": result, "index": index, "seconds": time.perf_counter() - t0}
    return runs


def run_pipeline(root, epochs=3):
    """synth -> train --scaled -> predict through the CLI; returns the output root."""
    from woundseg.cli import cli

    data, run, pred = root / "data", root / "run", root / "pred"
    assert cli(["synth", "--out", str(data), "--count", "8", "--seed", "0"]) == 0
    assert cli(["train", "--data-dir", str(data), "--out", str(run), "--epochs", str(epochs),
                "--batch-size", "4", "--scaled", "--seed", "0"]) == 0
    assert cli(["predict", "--weights", str(run / "best.futw"), "--input", str(data / "train" / "images"),
                "--out", str(pred)]) == 0
    return root


ACCEPTANCE_LINES: list[str] = []


def record_criterion(title: str, ok: bool, detail: str, seconds: float) -> None:
    """Log one acceptance line (shown in the terminal summary) and assert it."""
    line = f"{'PASS' if ok else 'FAIL'}  {title}: {detail} [{seconds:.1f}s]"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
