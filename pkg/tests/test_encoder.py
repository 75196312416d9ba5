"""Encoder contracts: shape preservation, zero linearity, differentiability."""

import numpy as np
import pytest

from linf import numerics as nm
from linf.encoder import EncoderConfig, encode, init_encoder_params
from linf.errors import ConfigError
from linf.imaging import Image

from .test_tensor import numeric_grad, rel


def small_cfg():
    return EncoderConfig(channels=8, residual_blocks=2)


class TestEncode:
    def test_zero_params_zero_output(self):
        cfg = small_cfg()
        params = init_encoder_params(cfg, np.random.default_rng(0))
        for t in params.values():
            t.assign_(np.zeros_like(t.data))
        img = Image(np.random.default_rng(1).random((6, 5, 3)))
        fm = encode(img, cfg, params)
        assert np.all(fm.tensor.data == 0.0)

    def test_extents_preserved_random_sizes(self):
        cfg = small_cfg()
        params = init_encoder_params(cfg, np.random.default_rng(2))
        rng = np.random.default_rng(3)
        for _ in range(12):
            h, w = int(rng.integers(1, 33)), int(rng.integers(1, 33))
            fm = encode(Image(rng.random((h, w, 3))), cfg, params)
            assert fm.tensor.shape == (h, w, cfg.channels)

    def test_deterministic(self):
        cfg = small_cfg()
        params = init_encoder_params(cfg, np.random.default_rng(4))
        img = Image(np.random.default_rng(5).random((7, 7, 3)))
        a = encode(img, cfg, params).tensor.data
        b = encode(img, cfg, params).tensor.data
        np.testing.assert_array_equal(a, b)

    def test_param_config_mismatch(self):
        cfg = small_cfg()
        params = init_encoder_params(cfg, np.random.default_rng(6))
        with pytest.raises(ConfigError):
            encode(
                Image(np.zeros((4, 4, 3))),
                EncoderConfig(channels=16, residual_blocks=2),
                params,
            )

    def test_head_kernel_gradient_vs_fd(self):
        cfg = small_cfg()
        params = init_encoder_params(cfg, np.random.default_rng(7))
        img = Image(np.random.default_rng(8).random((5, 4, 3)))
        readout = np.random.default_rng(9).normal(size=(5, 4, cfg.channels))

        with nm.GradTape() as tape:
            fm = encode(img, cfg, params)
            loss = nm.tsum(nm.mul(fm.tensor, nm.tensor(readout)))
        tape.backward(loss)

        def f():
            return float((encode(img, cfg, params).tensor.data * readout).sum())

        fd = numeric_grad(f, params["head.w"].data)
        assert rel(params["head.w"].grad, fd) < 1e-4
