import csv
import math

import numpy as np
import pytest
from threadpoolctl import threadpool_limits

from helpers import random_pairs, tiny_train_config
from ursct.checkpoint import load_checkpoint
from ursct.data import ImagePair
from ursct.errors import ConfigError, DataError, NumericError
from ursct.losses import LossWeights
from ursct.model import URSCT
from ursct.tensor import Tensor
from ursct.trainer import LOG_COLUMNS, Adam, TrainConfig, adam_step, lr_schedule, model_from_checkpoint, train


class TestSchedule:
    cfg = TrainConfig(epochs=800, warmup_epochs=3, lr=5e-4, min_lr=1e-6)

    def test_warmup_end_exact(self):
        assert lr_schedule(3, self.cfg) == 5e-4

    def test_final_is_min_lr(self):
        assert abs(lr_schedule(800, self.cfg) - 1e-6) < 1e-12

    def test_decay_midpoint(self):
        mid = 3 + (800 - 3) / 2
        assert abs(lr_schedule(mid, self.cfg) - (5e-4 + 1e-6) / 2) < 1e-12

    def test_warmup_is_linear_from_zero(self):
        assert lr_schedule(0, self.cfg) == 0.0
        assert lr_schedule(1.5, self.cfg) == pytest.approx(2.5e-4, rel=1e-15)

    def test_continuous_and_non_increasing(self):
        eps = 1e-9
        assert abs(lr_schedule(3 - eps, self.cfg) - lr_schedule(3, self.cfg)) < 1e-12
        decay = [lr_schedule(e, self.cfg) for e in np.linspace(3, 800, 2001)]
        assert all(b <= a for a, b in zip(decay, decay[1:]))

    def test_constant(self):
        cfg = TrainConfig(epochs=10, warmup_epochs=3, schedule="constant")
        assert {lr_schedule(e, cfg) for e in range(11)} == {5e-4}

    @pytest.mark.parametrize(
        "kw", [{"warmup_epochs": 10, "epochs": 10}, {"lr": 1e-6, "min_lr": 1e-6}, {"schedule": "step"}, {"betas": (0.9, 1.0)}]
    )
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            TrainConfig(**kw)


class TestAdam:
    def test_first_step_magnitude_is_lr(self):
        for g in (3.0, -0.02, 1e-3):
            p, _, _ = adam_step(np.array(1.0), np.array(g), np.array(0.0), np.array(0.0), 0.01, (0.9, 0.999), 1e-8, 1)
            assert (1.0 - p) == pytest.approx(0.01 * math.copysign(1, g), rel=1e-5)

    def test_two_step_trace(self):
        # constant g = 0.5, lr 0.1: m = 0.05, 0.095; v = 2.5e-4, 4.9975e-4;
        # both bias-corrected ratios are 0.5 / 0.5
        p, m, v = np.array(2.0), np.array(0.0), np.array(0.0)
        for t in (1, 2):
            p, m, v = adam_step(p, np.array(0.5), m, v, 0.1, (0.9, 0.999), 1e-8, t)
        assert m == pytest.approx(0.095, abs=1e-15)
        assert v == pytest.approx(4.9975e-4, abs=1e-15)
        assert p == pytest.approx(2.0 - 2 * 0.1 * 0.5 / (0.5 + 1e-8), abs=1e-14)

    def test_zero_gradient_is_fixed_point(self):
        p0 = np.array([0.3, -1.2])
        m0, v0 = np.array([0.2, -0.1]), np.array([0.04, 0.01])
        p, m, v = adam_step(p0, np.zeros(2), np.zeros(2), np.zeros(2), 0.1, (0.9, 0.999), 1e-8, 5)
        np.testing.assert_array_equal(p, p0)
        _, m, v = adam_step(p0, np.zeros(2), m0, v0, 0.1, (0.9, 0.999), 1e-8, 5)
        np.testing.assert_allclose(m, 0.9 * m0)
        np.testing.assert_allclose(v, 0.999 * v0)

    def test_step_counter_starts_at_one(self):
        with pytest.raises(ConfigError):
            adam_step(np.zeros(1), np.zeros(1), np.zeros(1), np.zeros(1), 0.1, (0.9, 0.999), 1e-8, 0)

    def test_nan_gradient_names_parameter(self):
        w = Tensor(np.ones(3), requires_grad=True)
        w.grad = np.array([0.0, np.nan, 1.0])
        opt = Adam([("layer.weight", w)])
        with pytest.raises(NumericError, match="layer.weight"):
            opt.step(0.1)
        np.testing.assert_array_equal(w.data, 1.0)

    def test_missing_gradient(self):
        opt = Adam([("b", Tensor(np.ones(2), requires_grad=True))])
        with pytest.raises(NumericError, match="b"):
            opt.step(0.1)


class FlakyIndex:
    """Valid for the first ``good`` loads, then returns NaN images."""

    def __init__(self, pairs, good):
        self.pairs, self.good, self.calls = pairs, good, 0

    def __len__(self):
        return len(self.pairs)

    def load(self, i):
        self.calls += 1
        p = self.pairs[i]
        raw = p.raw.copy()
        if self.calls > self.good:
            raw[:] = np.nan
        return ImagePair(raw, p.reference.copy(), p.id)


class TestTrain:
    def test_epochs_zero_is_initialisation(self, tmp_path):
        cfg = tiny_train_config(epochs=0, warmup_epochs=0)
        res = train(cfg, random_pairs(1), out_dir=tmp_path)
        init = URSCT(cfg.model).state_dict()
        assert list(res.checkpoint.params) == list(init)
        for k in init:
            assert res.checkpoint.params[k].tobytes() == init[k].tobytes()
        assert all(not m.any() for m in res.checkpoint.moments.values())
        assert load_checkpoint(tmp_path / "last.ckpt").equals(res.checkpoint)

    def test_outputs_and_log(self, tmp_path):
        cfg = tiny_train_config(epochs=4, warmup_epochs=1, batch_size=2)
        res = train(cfg, random_pairs(3), out_dir=tmp_path)
        assert sorted(p.name for p in tmp_path.iterdir()) == ["epoch_0002.ckpt", "epoch_0004.ckpt", "last.ckpt", "train_log.csv"]
        rows = list(csv.reader(open(tmp_path / "train_log.csv", encoding="utf-8")))
        assert tuple(rows[0]) == LOG_COLUMNS
        assert [int(r[0]) for r in rows[1:]] == [1, 2, 3, 4]
        assert [float(r[1]) for r in rows[1:]] == pytest.approx([lr_schedule(k, cfg) for k in (1, 2, 3, 4)], rel=1e-8)
        assert len(res.step_losses) == 4 * 2
        ck = load_checkpoint(tmp_path / "last.ckpt")
        assert (ck.epoch, ck.step) == (4, 8)
        assert ck.equals(res.checkpoint)
        model = model_from_checkpoint(ck)
        assert not model.training

    def test_iteration_schedule(self):
        cfg = tiny_train_config(epochs=2, warmup_epochs=1, batch_size=1, schedule_step="iteration")
        res = train(cfg, random_pairs(2))
        # the logged lr is the one used for the last step of the epoch
        assert [r["lr"] for r in res.log] == [lr_schedule(1.0, cfg), lr_schedule(2.0, cfg)]

    def test_bitwise_deterministic(self, tmp_path):
        cfg = tiny_train_config()
        with threadpool_limits(1):
            train(cfg, random_pairs(3), out_dir=tmp_path / "a")
            train(cfg, random_pairs(3), out_dir=tmp_path / "b")
        for name in ("epoch_0002.ckpt", "last.ckpt", "train_log.csv"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_resume_matches_uninterrupted(self, tmp_path):
        cfg = tiny_train_config(hflip=True)
        with threadpool_limits(1):
            full = train(cfg, random_pairs(3), out_dir=tmp_path / "full")
            part = train(cfg, random_pairs(3), out_dir=tmp_path / "part", stop_after_epoch=2)
            assert part.checkpoint.epoch == 2
            rest = train(cfg, random_pairs(3), out_dir=tmp_path / "part", resume=tmp_path / "part" / "last.ckpt")
        assert rest.checkpoint.equals(full.checkpoint)
        assert part.step_losses + rest.step_losses == full.step_losses
        assert (tmp_path / "part" / "last.ckpt").read_bytes() == (tmp_path / "full" / "last.ckpt").read_bytes()
        assert (tmp_path / "part" / "train_log.csv").read_bytes() == (tmp_path / "full" / "train_log.csv").read_bytes()

    def test_nan_aborts_and_keeps_last_checkpoint(self, tmp_path):
        cfg = tiny_train_config(epochs=3, batch_size=1, shuffle=False)
        flaky = FlakyIndex(random_pairs(2), good=3)
        with pytest.raises(NumericError, match="epoch 1 step 4.*last checkpoint retained"):
            train(cfg, flaky, out_dir=tmp_path)
        assert load_checkpoint(tmp_path / "last.ckpt").epoch == 1

    def test_errors_before_first_step(self):
        bad_shape = [ImagePair(np.zeros((3, 32, 32), np.float32), np.zeros((3, 32, 32), np.float32), "x")]
        with pytest.raises(DataError):
            train(tiny_train_config(), bad_shape)
        no_ref = [ImagePair(np.zeros((3, 64, 64), np.float32), None, "x")]
        with pytest.raises(DataError):
            train(tiny_train_config(), no_ref)
        with pytest.raises(DataError):
            train(tiny_train_config(), [])
        with pytest.raises(DataError):
            train(tiny_train_config())
        with pytest.raises(ConfigError, match="scales"):
            train(tiny_train_config(loss=LossWeights()), random_pairs(1))
