import math

import numpy as np
import pytest

from conftest import TINY_SCHEMA, random_instances, random_params
from rmia.data import split_dataset
from rmia.model import RmiaConfig, RmiaModel
from rmia.train import (
    L2_GRID,
    LR_GRID,
    EpochRecord,
    TrainConfig,
    TrainReport,
    batch_slices,
    compute_batch_loss,
    grid_search,
    train,
)

CFG = RmiaConfig(d=4, heads=2, cross_heads=2, fusion_hidden=6)


def tiny_model(seed=0):
    model = RmiaModel(CFG, TINY_SCHEMA)
    store = random_params(model.init_params(seed, np.float64), 0.3, seed)
    return model, store


def per_instance_loss(model, store, inst):
    """Independent cross-entropy from the eval-mode logits of a lone instance."""
    res, _ = model.forward(store.params, store.buffers, model.encode([inst]), False)
    z0, z1 = (float(v) for v in res.logits[0])
    z = z1 if inst.label == 1 else z0
    m = max(z0, z1)
    return -(z - (m + math.log(math.exp(z0 - m) + math.exp(z1 - m))))


class TestBatchLoss:
    def test_mean_of_per_instance_losses(self):
        model, store = tiny_model(1)
        insts = random_instances(TINY_SCHEMA, 9, 1)
        loss, _, _ = compute_batch_loss(model, store, model.encode(insts), train=False)
        expected = sum(per_instance_loss(model, store, i) for i in insts) / len(insts)
        assert loss == pytest.approx(expected, abs=1e-9)

    @pytest.mark.parametrize("train_mode", [False, True])
    def test_duplication_invariance(self, train_mode):
        model, store = tiny_model(2)
        insts = random_instances(TINY_SCHEMA, 6, 2)
        a, _, _ = compute_batch_loss(model, store, model.encode(insts), train=train_mode)
        b, _, _ = compute_batch_loss(model, store, model.encode(insts + insts), train=train_mode)
        assert a == pytest.approx(b, abs=1e-12)

    def test_saturation(self):
        model, store = tiny_model(3)
        inst = random_instances(TINY_SCHEMA, 2, 3)[1]  # label 1
        store.params["out.W"][:] = 0.0
        store.params["out.b"][:] = [-20.0, 20.0]
        loss, _, _ = compute_batch_loss(model, store, model.encode([inst]), train=False)
        assert loss < 1e-6

    def test_empty_batch(self):
        model, store = tiny_model()
        batch = model.encode(random_instances(TINY_SCHEMA, 3))
        with pytest.raises(ValueError):
            compute_batch_loss(model, store, batch.take(slice(0, 0)))


class TestConfig:
    def test_defaults(self):
        c = TrainConfig()
        assert (c.batch_size, c.epochs, c.lr, c.weight_decay) == (128, 10, 5e-4, 1e-5)
        assert c.lr_grid == LR_GRID and c.l2_grid == L2_GRID

    def test_zero_epochs_rejected(self):
        with pytest.raises(ValueError):
            TrainConfig(epochs=0)

    def test_empty_grid_rejected(self):
        with pytest.raises(ValueError):
            TrainConfig(lr_grid=())

    def test_round_trip(self):
        c = TrainConfig(epochs=3, lr_grid=(1e-3,), seed=7)
        assert TrainConfig.from_dict(c.to_dict()) == c


class TestBatchSlices:
    def test_covers_everything_once(self):
        parts = batch_slices(300, 128, np.random.default_rng(0))
        assert sorted(np.concatenate(parts).tolist()) == list(range(300))

    def test_trailing_singleton_merged(self):
        parts = batch_slices(257, 128, None)
        assert [len(p) for p in parts] == [128, 129]


class TestTrain:
    @pytest.fixture
    def splits(self, tiny_data):
        ds, _ = tiny_data
        return split_dataset(ds, seed=0)

    def _run(self, splits, **kw):
        tr, va, _ = splits
        model = RmiaModel(RmiaConfig(d=8, heads=2, fusion_hidden=16), tr.schema)
        cfg = TrainConfig(batch_size=32, epochs=3, lr=2e-3, **kw)
        return model, *train(model, model.encode(tr.instances), model.encode(va.instances), cfg)

    def test_deterministic(self, splits):
        _, s1, r1 = self._run(splits, seed=4)
        _, s2, r2 = self._run(splits, seed=4)
        for k in s1.params:
            assert s1.params[k].tobytes() == s2.params[k].tobytes()
        assert [e.train_loss for e in r1.epochs] == [e.train_loss for e in r2.epochs]

    def test_report_and_best_epoch(self, splits):
        model, store, rep = self._run(splits, seed=1)
        assert len(rep.epochs) == 3
        assert rep.best_val_auc == max(e.val_auc for e in rep.epochs)
        assert rep.epochs[rep.best_epoch - 1].val_auc == rep.best_val_auc
        assert rep.epochs[-1].train_loss < rep.epochs[0].train_loss
        assert all(np.isfinite(e.train_loss) for e in rep.epochs)

    def test_report_files(self, tmp_path):
        rep = TrainReport([EpochRecord(1, 0.6, 0.7), EpochRecord(2, 0.5, 0.75)], 2, 0.75, 0.75, 5e-4, 1e-5, 0)
        rep.write(tmp_path)
        assert (tmp_path / "train_epochs.csv").read_text().splitlines()[0] == "epoch,train_loss,val_auc"
        assert '"best_epoch": 2' in (tmp_path / "train_report.json").read_text()


class TestGridSearch:
    def _fake(self, table):
        calls = []

        def trainer(model, tb, vb, cfg, *, lr, weight_decay, **kw):
            calls.append((lr, weight_decay))
            auc = table(lr, weight_decay)
            return None, TrainReport([EpochRecord(1, 0.5, auc)], 1, auc, auc, lr, weight_decay, cfg.seed)

        return trainer, calls

    def test_exhaustive_and_best(self):
        trainer, calls = self._fake(lambda lr, l2: 0.5 + lr * 100 - l2 * 1000)
        res = grid_search(None, None, None, TrainConfig(), trainer=trainer)
        assert res.n_runs == 20 and len(set(calls)) == 20
        assert set(calls) == {(a, b) for a in LR_GRID for b in L2_GRID}
        assert res.best_val_auc == max(r["best_val_auc"] for r in res.runs)
        assert (res.best_lr, res.best_l2) == (5e-4, 1e-7)

    def test_tie_break_prefers_higher_lr_then_l2(self):
        trainer, _ = self._fake(lambda lr, l2: 0.8)
        res = grid_search(None, None, None, TrainConfig(), trainer=trainer)
        assert (res.best_lr, res.best_l2) == (max(LR_GRID), max(L2_GRID))

    def test_runs_csv(self):
        trainer, _ = self._fake(lambda lr, l2: 0.6)
        res = grid_search(None, None, None, TrainConfig(lr_grid=(1e-3,), l2_grid=(0.0, 1e-5)), trainer=trainer)
        assert res.runs_csv().splitlines()[0] == "lr,l2,best_val_auc,best_epoch"
        assert len(res.runs_csv().splitlines()) == 3
