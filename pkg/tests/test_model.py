import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stereodepth.diffcore import NonFiniteError, ShapeError, Tensor, grad_check
from stereodepth.gradsuite import TINY_NET
from stereodepth.loss import LossWeights, total_loss
from stereodepth.model import (
    CheckpointError,
    NetConfig,
    forward,
    init,
    load_checkpoint,
    parameter_count,
    parameter_shapes,
    save_checkpoint,
)
from stereodepth.train import image_pyramid


@pytest.fixture(scope="module")
def default_net():
    return NetConfig()


@pytest.fixture(scope="module")
def default_params(default_net):
    return init(default_net)


def test_default_parameter_count_by_hand(default_net):
    # worked layer by layer: encoder 73608, decoder incl. heads 137624
    assert parameter_count(default_net) == 211232


@pytest.mark.parametrize(
    "cfg",
    [
        NetConfig(),
        NetConfig(input_mode="stereo"),
        NetConfig(encoder_channels=(4, 6, 8, 10, 12), decoder_channels=(3, 5, 7, 9, 11), num_scales=4),
        NetConfig(kernel_size=5),
        NetConfig(**TINY_NET),
    ],
)
def test_closed_form_count_matches_shapes(cfg):
    assert parameter_count(cfg) == sum(int(np.prod(s)) for s in parameter_shapes(cfg).values())


class TestConfig:
    @pytest.mark.parametrize(
        "kwargs",
        [
            {"input_mode": "rgbd"},
            {"encoder_channels": (8, 0, 4, 4)},
            {"num_scales": 5},
            {"kernel_size": 4},
            {"decoder_channels": (8, 8)},
        ],
    )
    def test_invalid(self, kwargs):
        with pytest.raises(ValueError):
            NetConfig(**kwargs)

    def test_dict_round_trip(self):
        cfg = NetConfig(input_mode="stereo", encoder_channels=(2, 3, 4, 5), seed=9)
        assert NetConfig.from_dict(cfg.to_dict()) == cfg


class TestInit:
    def test_same_seed_identical(self):
        a, b = init(NetConfig(seed=3)), init(NetConfig(seed=3))
        for name in a:
            np.testing.assert_array_equal(a[name].data, b[name].data)

    def test_different_seed_differs(self):
        a, b = init(NetConfig(seed=3)), init(NetConfig(seed=4))
        assert not np.array_equal(a["enc1a.weight"].data, b["enc1a.weight"].data)

    def test_fan_in_bounds(self, default_params):
        w = default_params["enc2b.weight"].data
        bound = np.sqrt(3.0 / (16 * 9))
        assert np.abs(w).max() <= bound
        assert np.abs(w).max() > 0.9 * bound
        assert abs(w.std() - bound / np.sqrt(3)) < 0.05 * bound

    def test_biases(self, default_net, default_params):
        assert (default_params["enc1a.bias"].data == 0).all()
        assert (default_params["disp1.bias"].data == default_net.head_bias).all()


class TestForward:
    def test_pyramid_shapes(self, default_net, default_params):
        x = Tensor(np.random.default_rng(0).uniform(size=(2, 3, 32, 64)))
        out = forward(default_net, default_params, x)
        assert [d_l.shape for d_l, _ in out] == [(2, 32, 64), (2, 16, 32), (2, 8, 16), (2, 4, 8)]
        assert all(d_r.shape == d_l.shape for d_l, d_r in out)

    def test_unbatched(self, default_net, default_params):
        x = np.random.default_rng(1).uniform(size=(3, 32, 64))
        single = forward(default_net, default_params, Tensor(x))
        batched = forward(default_net, default_params, Tensor(x[None]))
        np.testing.assert_allclose(single[0][0].data, batched[0][0].data[0], atol=1e-12)

    def test_range(self, default_net, default_params):
        x = Tensor(np.random.default_rng(2).uniform(size=(1, 3, 32, 64)))
        for d_l, d_r in forward(default_net, default_params, x):
            bound = 0.3 * d_l.shape[-1]
            for d in (d_l, d_r):
                assert (d.data > 0).all() and (d.data < bound).all()

    @settings(max_examples=10, deadline=None)
    @given(st.integers(0, 10_000), st.floats(0.1, 20.0))
    def test_range_for_arbitrary_parameters(self, seed, scale):
        cfg = NetConfig(encoder_channels=(2, 2, 2, 2))
        rng = np.random.default_rng(seed)
        params = {n: Tensor(rng.normal(0, scale, s)) for n, s in parameter_shapes(cfg).items()}
        x = Tensor(rng.uniform(size=(3, 16, 32)))
        try:
            out = forward(cfg, params, x)
        except NonFiniteError:  # huge weights may overflow; that is reported, never clipped silently
            return
        for d_l, d_r in out:
            bound = 0.3 * d_l.shape[-1]
            assert (d_l.data >= 0).all() and (d_l.data <= bound).all()
            assert (d_r.data >= 0).all() and (d_r.data <= bound).all()

    def test_deterministic(self, default_net, default_params):
        x = Tensor(np.random.default_rng(3).uniform(size=(1, 3, 32, 64)))
        a = forward(default_net, default_params, x)
        b = forward(default_net, default_params, x)
        for (al, ar), (bl, br) in zip(a, b):
            np.testing.assert_array_equal(al.data, bl.data)
            np.testing.assert_array_equal(ar.data, br.data)

    def test_indivisible_input(self, default_net, default_params):
        with pytest.raises(ShapeError, match="divisible"):
            forward(default_net, default_params, Tensor(np.zeros((3, 30, 64))))

    def test_mono_rejects_right_image(self, default_net, default_params):
        x = Tensor(np.zeros((3, 32, 64)))
        with pytest.raises(ValueError):
            forward(default_net, default_params, x, x)

    def test_stereo_needs_right_image(self):
        cfg = NetConfig(input_mode="stereo", encoder_channels=(2, 2, 2, 2))
        params = init(cfg)
        x = Tensor(np.random.default_rng(4).uniform(size=(3, 16, 32)))
        with pytest.raises(ValueError):
            forward(cfg, params, x)
        out = forward(cfg, params, x, x)
        assert out[0][0].shape == (16, 32)

    def test_end_to_end_gradient(self):
        cfg = NetConfig(seed=5, **TINY_NET)
        params = init(cfg)
        rng = np.random.default_rng(5)
        left = Tensor(rng.uniform(size=(1, 3, 8, 16)))
        right = Tensor(rng.uniform(size=(1, 3, 8, 16)))

        def f():
            disps = forward(cfg, params, left)
            return total_loss(image_pyramid(left, 2), image_pyramid(right, 2), disps, LossWeights())[0]

        assert grad_check(f, list(params.values()), step=1e-6, max_elements=10) <= 1e-3


class TestCheckpoint:
    @pytest.mark.parametrize("dtype,tol", [("float64", 0.0), ("float32", 1e-7)])
    def test_round_trip(self, tmp_path, dtype, tol):
        cfg = NetConfig(encoder_channels=(2, 3, 4, 5), seed=7)
        params = init(cfg)
        path = tmp_path / "m.bin"
        save_checkpoint(path, cfg, params, dtype)
        cfg2, params2 = load_checkpoint(path)
        assert cfg2 == cfg
        assert list(params2) == list(params)
        for name in params:
            np.testing.assert_allclose(params2[name].data, params[name].data, rtol=tol, atol=0)

    def test_layout(self, tmp_path):
        cfg = NetConfig(encoder_channels=(1, 1, 1, 1))
        path = tmp_path / "m.bin"
        save_checkpoint(path, cfg, init(cfg), "float32")
        raw = path.read_bytes()
        assert raw[:16] == b"STEREODEPTH-CKPT"
        n = int.from_bytes(raw[20:24], "little")
        assert int.from_bytes(raw[16:20], "little") == 1
        assert raw[24 + n] == 4
        count = int.from_bytes(raw[25 + n : 33 + n], "little")
        assert count == parameter_count(cfg)
        assert len(raw) == 33 + n + 4 * count

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "m.bin"
        path.write_bytes(b"NOT-A-CHECKPOINT" + b"\0" * 32)
        with pytest.raises(CheckpointError, match="magic"):
            load_checkpoint(path)

    def test_truncated(self, tmp_path):
        cfg = NetConfig(encoder_channels=(1, 1, 1, 1))
        path = tmp_path / "m.bin"
        save_checkpoint(path, cfg, init(cfg))
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_deterministic_bytes(self, tmp_path):
        cfg = NetConfig(encoder_channels=(2, 2, 2, 2), seed=11)
        save_checkpoint(tmp_path / "a.bin", cfg, init(cfg))
        save_checkpoint(tmp_path / "b.bin", cfg, init(cfg))
        assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()
