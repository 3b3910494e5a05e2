import numpy as np
import pytest

from netscope import fixtures
from netscope import graph as G
from netscope import train as TR
from netscope.data import compute_whiten

# one line per acceptance criterion, printed at the end of the session
CRITERIA: dict[str, str] = {}


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for key in sorted(CRITERIA, key=lambda k: int(k.split()[0])):
            terminalreporter.write_line(f"criterion {key}: {CRITERIA[key]}")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_model(arch="resnet", seed=0, dims=(3, 16, 16), classes=4, blocks=(1, 1), base=4):
    return G.build_scaled(arch, blocks, base, dims, classes, seed=seed)


def randomize_bn(model, rng):
    """Give every BN layer non-trivial eval statistics."""
    for k, v in model.params.items():
        if k.endswith(".gamma"):
            v[...] = rng.uniform(0.5, 1.5, v.shape)
        elif k.endswith(".beta"):
            v[...] = rng.normal(0, 0.2, v.shape)
        elif k.endswith(".running_mean"):
            v[...] = rng.normal(0, 0.2, v.shape)
        elif k.endswith(".running_var"):
            v[...] = rng.uniform(0.5, 2.0, v.shape)
    return model


@pytest.fixture(scope="session")
def desk(tmp_path_factory):
    """Small ResNet trained on synthetic gratings; stands in for a trained checkpoint."""
    out = tmp_path_factory.mktemp("desk")
    tr = fixtures.gratings(384, 32, 4, seed=11)
    va = fixtures.gratings(64, 32, 4, seed=12, split="val")
    whiten = compute_whiten(tr)
    model = G.build_scaled("resnet", [1, 1], 16, (3, 32, 32), 4, seed=3)
    cfg = TR.TrainConfig(lr0=0.05, epochs=6, batch=32, lr_drop_every=4, seed=5)
    result = TR.train(model, tr, va, cfg, whiten, out_dir=out)
    manifest = fixtures.write_ppm_dataset(va, out / "val")
    return {
        "model": result.model, "checkpoint": out / "last.nsck", "train": tr, "val": va,
        "whiten": whiten, "metrics": result.metrics, "ppm_dir": out / "val", "manifest": manifest,
    }
