import time
from pathlib import Path
from types import SimpleNamespace

import pytest
import torch

ROOT = Path(__file__).resolve().parents[1]
TOY_CONFIG = ROOT / "configs" / "toy.yaml"

torch.set_num_threads(1)

_acceptance = {}


@pytest.fixture(scope="session")
def toy_run(tmp_path_factory):
    """The committed toy config trained on a freshly written 20-image fixture."""
    from scaf import config as config_mod
    from scaf.dataio import load_dataset
    from scaf.fixture import write_fixture
    from scaf.metrics import evaluate
    from scaf.trainer import model_from_checkpoint, run_training

    base = tmp_path_factory.mktemp("toy_run")
    cfg = config_mod.load(TOY_CONFIG)
    root = write_fixture(base / "data", 20, seed=cfg.seed, size=cfg.train.image_size,
                         coverage=cfg.data.coverage)
    cfg.data.root = str(root)
    cfg.out_dir = str(base / "run")
    start = time.perf_counter()
    checkpoint = run_training(cfg)
    elapsed = time.perf_counter() - start
    model, md, cfg = model_from_checkpoint(checkpoint)
    samples = load_dataset(root, cfg.data.train_split)
    result = evaluate(model, md, samples, cfg.train.image_size, "toy/train")
    return SimpleNamespace(cfg=cfg, root=root, checkpoint=checkpoint, model=model, md=md,
                           samples=samples, result=result, train_seconds=elapsed)


def pytest_runtest_logreport(report):
    if "test_acceptance.py" not in report.nodeid:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        _acceptance[report.nodeid] = report.outcome


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for nodeid, outcome in sorted(_acceptance.items(), key=lambda kv: kv[0].split("::")[-1]):
        name = nodeid.split("::")[-1].removeprefix("test_")
        terminalreporter.write_line(f"{'PASS' if outcome == 'passed' else 'FAIL'}  {name}")
