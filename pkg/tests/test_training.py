"""Batch sampling, loss assembly, optimization, and checkpoint contracts."""

import numpy as np
import pytest
import scipy.stats

from linf.corpus import toy_corpus
from linf.errors import TrainingError
from linf.imaging import Image
from linf.model import Model
from linf.training import (
    TrainConfig,
    load_checkpoint,
    loss_components,
    make_batch,
    train,
)

from .helpers import micro_config


def tiny_train_cfg(**overrides) -> TrainConfig:
    base = dict(
        lr_crop=6, batch=2, pairs_per_image=12, steps=8, steps_per_epoch=4,
        lr_halve_at=(5,), seed=0,
    )
    base.update(overrides)
    return TrainConfig(**base)


class TestMakeBatch:
    def test_scale_one_targets_are_noise_only(self):
        corpus = toy_corpus(4, 32, seed=7)
        cfg = tiny_train_cfg(scale_min=1.0, scale_max=1.0)
        batch = make_batch(corpus, cfg, np.random.default_rng(0))
        for sample in batch:
            assert np.abs(sample.targets).max() <= 0.5 / 255 + 1e-12

    def test_pairs_clamped_to_grid(self):
        corpus = toy_corpus(4, 32, seed=8)
        cfg = tiny_train_cfg(pairs_per_image=10_000, scale_min=1.5, scale_max=1.5)
        batch = make_batch(corpus, cfg, np.random.default_rng(1))
        expected = 9 * 9  # round(1.5 * 6) = 9, n = 1
        for sample in batch:
            assert sample.coords.shape[0] == expected
            # without replacement: all queries distinct
            assert len({tuple(c) for c in map(tuple, sample.coords)}) == expected

    def test_scale_distribution_uniform(self):
        corpus = toy_corpus(2, 24, seed=9)
        cfg = tiny_train_cfg(lr_crop=4, batch=1, pairs_per_image=4)
        rng = np.random.default_rng(2)
        draws = []
        for _ in range(10_000):
            batch = make_batch(corpus, cfg, rng)
            draws.append(batch[0].scale)
        p = scipy.stats.kstest(draws, scipy.stats.uniform(loc=1.0, scale=3.0).cdf).pvalue
        assert p > 0.01

    def test_small_images_skipped_with_warning(self, caplog):
        small = Image(np.full((8, 8, 3), 0.5))
        big = Image(np.full((40, 40, 3), 0.5))
        cfg = tiny_train_cfg(scale_min=4.0, scale_max=4.0)  # crop 24 > 8
        with caplog.at_level("WARNING", logger="linf.training"):
            batch = make_batch([small, big], cfg, np.random.default_rng(3))
        assert len(batch) == cfg.batch
        assert any("skipping" in r.message for r in caplog.records)

    def test_all_images_too_small_raises(self):
        small = Image(np.full((4, 4, 3), 0.5))
        cfg = tiny_train_cfg(scale_min=4.0, scale_max=4.0)
        with pytest.raises(TrainingError):
            make_batch([small], cfg, np.random.default_rng(4))


class TestLoss:
    def test_identity_model_zero_targets_l1_only_is_zero(self):
        # premise of the contract: targets exactly zero, identity flow,
        # zero-initialized conditioner head, L1 term alone
        corpus = [Image(np.full((32, 32, 3), 0.4))] * 2
        cfg = tiny_train_cfg(stage=2, lambda_nll=0.0, lambda_l1=1.0, dequant=0.0)
        model = Model.create(micro_config(flow_init_std=0.0), seed=0)
        batch = make_batch(corpus, cfg, np.random.default_rng(5))
        for sample in batch:
            sample.targets[:] = 0.0
        total, _, l1 = loss_components(batch, model, cfg)
        assert float(total.data) == 0.0
        assert l1 == 0.0

    def test_zero_weights_zero_loss(self):
        corpus = toy_corpus(4, 32, seed=10)
        cfg = tiny_train_cfg(stage=2, lambda_nll=0.0, lambda_l1=0.0)
        model = Model.create(micro_config(), seed=1)
        batch = make_batch(corpus, cfg, np.random.default_rng(6))
        total, nll, l1 = loss_components(batch, model, cfg)
        assert float(total.data) == 0.0
        assert np.isfinite(nll)

    def test_stage1_excludes_l1(self):
        corpus = toy_corpus(4, 32, seed=11)
        cfg = tiny_train_cfg(stage=1)
        model = Model.create(micro_config(), seed=2)
        batch = make_batch(corpus, cfg, np.random.default_rng(7))
        total, nll, l1 = loss_components(batch, model, cfg)
        assert l1 == 0.0
        assert float(total.data) == pytest.approx(cfg.lambda_nll * nll, rel=1e-12)

    def test_loss_finite_at_init_for_toy_batches(self):
        corpus = toy_corpus(8, 32, seed=12)
        cfg = tiny_train_cfg(stage=2)
        model = Model.create(micro_config(), seed=3)
        rng = np.random.default_rng(8)
        for _ in range(5):
            batch = make_batch(corpus, cfg, rng)
            total, nll, l1 = loss_components(batch, model, cfg)
            assert np.isfinite(float(total.data))


class TestTrainLoop:
    def test_nll_decreases_on_toy_corpus(self):
        corpus = toy_corpus(8, 32, seed=13)
        cfg = tiny_train_cfg(steps=60, steps_per_epoch=30, stage=1,
                             lambda_nll=1.0, learning_rate=3e-3)
        res = train(corpus, cfg, micro_config())
        assert res.history[-1][2] < res.history[0][2]

    def test_stage1_median_drop_over_200_steps(self):
        # 5-run median of the stage-1 NLL drop stays >= 20%
        corpus = toy_corpus(16, 64)
        drops = []
        for seed in range(5):
            cfg = TrainConfig(lr_crop=8, batch=4, pairs_per_image=64, steps=200,
                              steps_per_epoch=200, lr_halve_at=(), stage=1, seed=seed)
            res = train(corpus, cfg, micro_config())
            nll = [row[2] for row in res.history]
            first, last = np.mean(nll[:20]), np.mean(nll[-20:])
            drops.append((first - last) / abs(first))
        assert np.median(drops) >= 0.20, drops

    def test_deterministic_replay(self):
        corpus = toy_corpus(4, 32, seed=14)
        cfg = tiny_train_cfg(steps=6)
        a = train(corpus, cfg, micro_config())
        b = train(corpus, cfg, micro_config())
        assert a.history == b.history
        for (k, pa), pb in zip(a.model.parameters().items(), b.model.parameters().values()):
            np.testing.assert_array_equal(pa.data, pb.data)

    def test_checkpoint_bytes_reproducible(self, tmp_path):
        corpus = toy_corpus(4, 32, seed=15)
        cfg = tiny_train_cfg(steps=4, steps_per_epoch=2)
        train(corpus, cfg, micro_config(), out_dir=str(tmp_path / "a"))
        train(corpus, cfg, micro_config(), out_dir=str(tmp_path / "b"))
        a = (tmp_path / "a" / "ckpt_final.linf").read_bytes()
        b = (tmp_path / "b" / "ckpt_final.linf").read_bytes()
        assert a == b

    def test_resume_equals_uninterrupted(self, tmp_path):
        corpus = toy_corpus(4, 32, seed=16)
        cfg = tiny_train_cfg(steps=8, steps_per_epoch=4)
        full = train(corpus, cfg, micro_config(), out_dir=str(tmp_path / "full"))
        half = train(
            corpus, tiny_train_cfg(steps=4, steps_per_epoch=4), micro_config(),
            out_dir=str(tmp_path / "half"),
        )
        resumed = train(corpus, cfg, None, out_dir=str(tmp_path / "resumed"),
                        resume=str(tmp_path / "half" / "ckpt_epoch001.linf"))
        assert resumed.history == full.history[4:]
        for (k, pf), pr in zip(
            full.model.parameters().items(), resumed.model.parameters().values()
        ):
            np.testing.assert_array_equal(pf.data, pr.data, err_msg=k)

    def test_train_log_csv_schema(self, tmp_path):
        corpus = toy_corpus(4, 32, seed=17)
        cfg = tiny_train_cfg(steps=4, steps_per_epoch=2)
        train(corpus, cfg, micro_config(), out_dir=str(tmp_path))
        lines = (tmp_path / "train_log.csv").read_text().strip().splitlines()
        assert lines[0] == "step,epoch,nll,l1,total,lr"
        assert len(lines) == 5

    def test_singular_weight_rejitter(self, caplog):
        corpus = toy_corpus(4, 32, seed=18)
        cfg = tiny_train_cfg(steps=3)
        model = Model.create(micro_config(), seed=0)
        layer = model.flow.layers[0]
        w = layer.weight.data.copy()
        w[0] = w[1]  # exactly singular
        layer.weight.assign_(w)
        batch = make_batch(corpus, cfg, np.random.default_rng(9))
        from linf.errors import SingularMatrixError

        with pytest.raises(SingularMatrixError):
            loss_components(batch, model, cfg)

        # the loop rejects the step, re-jitters W, and keeps going
        with caplog.at_level("WARNING", logger="linf.training"):
            res = train(corpus, cfg, model=model)
        assert any("re-jittered" in r.message for r in caplog.records)
        assert len(res.history) >= 1  # later steps succeeded
        from linf.numerics import lu_factor

        lu_factor(layer.weight.data)  # no longer singular

    def test_learning_rate_halving_schedule(self):
        corpus = toy_corpus(4, 32, seed=21)
        cfg = tiny_train_cfg(steps=8, lr_halve_at=(3, 6), learning_rate=1e-3)
        res = train(corpus, cfg, micro_config())
        lrs = [row[5] for row in res.history]
        assert lrs[:2] == [1e-3, 1e-3]
        assert lrs[2:5] == [5e-4, 5e-4, 5e-4]
        assert lrs[5:] == [2.5e-4, 2.5e-4, 2.5e-4]


class TestCheckpointIO:
    def test_roundtrip_params_and_state(self, tmp_path):
        corpus = toy_corpus(4, 32, seed=19)
        cfg = tiny_train_cfg(steps=3, steps_per_epoch=3)
        res = train(corpus, cfg, micro_config(), out_dir=str(tmp_path))
        ckpt = load_checkpoint(str(tmp_path / "ckpt_final.linf"))
        assert ckpt.step == 3
        assert ckpt.train_cfg.lr_crop == cfg.lr_crop
        for name, p in res.model.parameters().items():
            np.testing.assert_array_equal(ckpt.model.parameters()[name].data, p.data)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.linf"
        path.write_bytes(b"NOPE" + b"\x00" * 32)
        from linf.errors import ConfigError

        with pytest.raises(ConfigError):
            load_checkpoint(str(path))

    def test_header_is_json_with_config_echo(self, tmp_path):
        import json
        import struct

        corpus = toy_corpus(4, 32, seed=20)
        cfg = tiny_train_cfg(steps=2, steps_per_epoch=2)
        train(corpus, cfg, micro_config(), out_dir=str(tmp_path))
        blob = (tmp_path / "ckpt_final.linf").read_bytes()
        assert blob[:4] == b"LINF"
        hlen = struct.unpack_from("<I", blob, 8)[0]
        header = json.loads(blob[12 : 12 + hlen])
        assert header["model_cfg"]["patch_side"] == 1
        assert header["model_cfg"]["layer_order"] == "linear_first"
        assert header["train_cfg"]["lr_crop"] == cfg.lr_crop
        assert "rng_state" in header
