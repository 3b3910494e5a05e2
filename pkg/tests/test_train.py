import numpy as np
import pytest

from netscope import checkpoint as C
from netscope import fixtures
from netscope import graph as G
from netscope import train as TR
from netscope.data import Dataset
from conftest import tiny_model


def linear_model(in_features=2, classes=2, seed=0):
    b = G.GraphBuilder((in_features, 1, 1), seed=seed)
    b.linear("fc", G.INPUT, classes)
    return b.build()


class TestSchedule:
    def test_step_decay(self):
        cfg = TR.TrainConfig(lr0=0.1)
        assert TR.lr_at(cfg, 0) == 0.1 and TR.lr_at(cfg, 29) == 0.1
        assert TR.lr_at(cfg, 30) == pytest.approx(0.01)
        assert TR.lr_at(cfg, 60) == pytest.approx(0.001)

    def test_default_lr_at_epoch_30(self):
        assert TR.lr_at(TR.TrainConfig(), 30) == pytest.approx(0.001)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            TR.TrainConfig(batch=1)
        with pytest.raises(KeyError):
            TR.TrainConfig.from_dict({"lr": 0.1})


class TestSGD:
    def test_vanilla_step(self, rng):
        m = linear_model()
        w0 = m.params["fc.weight"].copy()
        g = rng.standard_normal(w0.shape).astype(np.float32)
        cfg = TR.TrainConfig(lr0=0.5, momentum=0.0, weight_decay=0.0)
        TR.sgd_step(m, {"fc.weight": g}, {}, cfg, 0)
        assert np.array_equal(m.params["fc.weight"], w0 - np.float32(0.5) * g)

    def test_momentum_accumulates(self):
        m = linear_model()
        m.params["fc.weight"][...] = 0
        g = np.ones_like(m.params["fc.weight"])
        vel = {}
        cfg = TR.TrainConfig(lr0=1.0, momentum=0.9, weight_decay=0.0)
        TR.sgd_step(m, {"fc.weight": g}, vel, cfg, 0)
        TR.sgd_step(m, {"fc.weight": g}, vel, cfg, 0)
        np.testing.assert_allclose(vel["fc.weight"], 1.9, rtol=1e-6)
        np.testing.assert_allclose(m.params["fc.weight"], -2.9, rtol=1e-6)

    def test_weight_decay_term(self):
        m = linear_model()
        m.params["fc.weight"][...] = 2.0
        cfg = TR.TrainConfig(lr0=1.0, momentum=0.0, weight_decay=0.1)
        TR.sgd_step(m, {"fc.weight": np.zeros_like(m.params["fc.weight"]),
                        "fc.bias": np.zeros_like(m.params["fc.bias"])}, {}, cfg, 0)
        np.testing.assert_allclose(m.params["fc.weight"], 1.8, rtol=1e-6)

    def test_decay_grouping(self):
        m = tiny_model()
        assert m.decays("stem.conv.weight")
        assert not m.decays("stem.bn.gamma") and not m.decays("stem.bn.beta")
        assert not m.decays("head.fc.bias")
        assert m.decays("head.fc.weight")

    def test_non_finite_gradient_names_parameter(self):
        m = linear_model()
        g = np.zeros_like(m.params["fc.weight"])
        g[0, 0] = np.nan
        before = m.params["fc.weight"].copy()
        with pytest.raises(FloatingPointError, match="fc.weight"):
            TR.sgd_step(m, {"fc.weight": g}, {}, TR.TrainConfig(), 0)
        assert np.array_equal(m.params["fc.weight"], before)

    def test_separable_toy_converges(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((64, 2, 1, 1)).astype(np.float32)
        y = (x[:, 0, 0, 0] + x[:, 1, 0, 0] > 0).astype(np.int64)
        x[:, :, 0, 0] += np.where(y[:, None] == 1, 0.5, -0.5)
        m = linear_model()
        cfg = TR.TrainConfig(lr0=0.5, momentum=0.9, weight_decay=0.0)
        vel = {}
        for _ in range(200):
            loss, _ = TR.train_step(m, x, y, vel, cfg, 0)
        assert loss < 0.1


class TestEvaluate:
    def _dataset(self, n=20, classes=10):
        x = np.zeros((n, 3, 4, 4), np.float32)
        return Dataset([str(i) for i in range(n)], x, np.arange(n) % classes, "val", classes)

    def test_uniform_logits(self):
        m = tiny_model(dims=(3, 4, 4), classes=10)
        m.params["head.fc.weight"][...] = 0
        m.params["head.fc.bias"][...] = 0
        loss, top1 = TR.evaluate(m, self._dataset(), batch=7)
        assert loss == pytest.approx(np.log(10), rel=1e-6)
        assert top1 == pytest.approx(0.1)

    def test_perfect_logits(self):
        m = linear_model(3, 3)
        m.params["fc.weight"][...] = 100 * np.eye(3, dtype=np.float32)
        m.params["fc.bias"][...] = 0
        x = np.eye(3, dtype=np.float32)[:, :, None, None]
        ds = Dataset(["a", "b", "c"], x, np.arange(3), "val", 3)
        loss, top1 = TR.evaluate(m, ds)
        assert top1 == 1.0 and loss < 1e-6

    def test_repeatable(self):
        ds = fixtures.gratings(12, 16)
        m = tiny_model()
        assert TR.evaluate(m, ds, batch=5) == TR.evaluate(m, ds, batch=5)

    def test_empty(self):
        with pytest.raises(ValueError):
            TR.evaluate(tiny_model(), self._dataset(0))


def _run(tmp, epochs, resume=None, seed=3):
    tr = fixtures.gratings(24, 16, seed=1)
    va = fixtures.gratings(8, 16, seed=2, split="val")
    m = tiny_model(seed=seed)
    cfg = TR.TrainConfig(lr0=0.05, epochs=epochs, batch=8, lr_drop_every=2, seed=4)
    return TR.train(m, tr, va, cfg, out_dir=tmp, resume=resume)


class TestTrainLoop:
    def test_outputs(self, tmp_path):
        res = _run(tmp_path, 2)
        lines = (tmp_path / "metrics.tsv").read_text().splitlines()
        assert lines[0] == "epoch\tsplit\tloss\ttop1"
        assert [l.split("\t")[:2] for l in lines[1:]] == [["1", "train"], ["1", "val"], ["2", "train"], ["2", "val"]]
        assert (tmp_path / "epoch001.nsck").exists() and res.checkpoint == tmp_path / "epoch002.nsck"
        meta = C.read_checkpoint(tmp_path / "last.nsck").metadata
        assert meta["epoch"] == 2 and meta["train_config"]["batch"] == 8

    def test_deterministic(self, tmp_path):
        a = _run(tmp_path / "a", 2)
        b = _run(tmp_path / "b", 2)
        assert a.metrics == b.metrics
        assert (tmp_path / "a" / "last.nsck").read_bytes() == (tmp_path / "b" / "last.nsck").read_bytes()

    def test_resume_matches_uninterrupted(self, tmp_path):
        full = _run(tmp_path / "full", 3)
        _run(tmp_path / "part", 1)
        resumed = _run(tmp_path / "part", 3, resume=tmp_path / "part" / "last.nsck", seed=99)
        for k in full.model.params:
            assert np.array_equal(full.model.params[k], resumed.model.params[k]), k
        assert (tmp_path / "full" / "metrics.tsv").read_text() == (tmp_path / "part" / "metrics.tsv").read_text()

    def test_batches_drop_singletons(self):
        batches = TR.epoch_batches(9, 4, 0, 0)
        assert [len(b) for b in batches] == [4, 4]
        assert sorted(np.concatenate(batches).tolist()) != list(range(9))
