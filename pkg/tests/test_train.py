import math

import numpy as np
import pytest

from stereodepth.data import generate_dataset
from stereodepth.diffcore import Tensor, no_grad
from stereodepth.loss import LossWeights
from stereodepth.model import NetConfig, forward, init
from stereodepth.rng import Xoshiro256, derive_seed
from stereodepth.train import (
    AdamState,
    AugmentConfig,
    AugmentDraw,
    TrainConfig,
    TrainingDivergedError,
    adam_step,
    apply_augmentation,
    augment,
    batch_iterator,
    compute_loss,
    log_columns,
    read_loss_log,
    schedule,
    train,
    write_loss_log,
)

SMALL_NET = dict(encoder_channels=(4, 4, 4, 4), seed=2)
NO_AUG = AugmentConfig(flip_prob=0.0, color_prob=0.0)


@pytest.fixture(scope="module")
def samples():
    return [s for _, s in generate_dataset(5, 8, 32, 64)]


class TestAdam:
    def test_zero_gradient(self):
        p = {"w": Tensor([1.0, -2.0])}
        adam_step(AdamState(lr=0.1), p, {"w": np.zeros(2)})
        np.testing.assert_array_equal(p["w"].data, [1.0, -2.0])

    def test_first_step_moves_by_lr(self):
        p = {"w": Tensor([1.0, 1.0])}
        adam_step(AdamState(lr=1e-3), p, {"w": np.array([0.3, -7.0])})
        np.testing.assert_allclose(p["w"].data, [1.0 - 1e-3, 1.0 + 1e-3], rtol=0, atol=1e-10)

    def test_quadratic_matches_scalar_recurrence(self):
        p = {"x": Tensor([1.0])}
        state = AdamState(lr=0.1)
        x, m, v = 1.0, 0.0, 0.0
        for t in range(1, 101):
            adam_step(state, p, {"x": p["x"].data.copy()})
            g = x
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            x -= 0.1 * (m / (1 - 0.9 ** t)) / (math.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        assert p["x"].data[0] == pytest.approx(x, abs=1e-12)
        assert abs(x) < 1e-2

    def test_missing_gradient_skipped(self):
        p = {"a": Tensor([1.0]), "b": Tensor([1.0])}
        adam_step(AdamState(lr=0.1), p, {"a": np.array([1.0]), "b": None})
        assert p["b"].data[0] == 1.0 and p["a"].data[0] < 1.0


class TestSchedule:
    @pytest.mark.parametrize(
        "epoch,total,factor",
        [(0, 50, 1.0), (29, 50, 1.0), (30, 50, 0.5), (35, 50, 0.5), (40, 50, 0.25), (45, 50, 0.25), (49, 50, 0.25), (7, 10, 0.5), (5, 10, 1.0), (6, 10, 0.5), (8, 10, 0.25)],
    )
    def test_values(self, epoch, total, factor):
        assert schedule(epoch, 1e-4, total) == 1e-4 * factor

    def test_invalid_total(self):
        with pytest.raises(ValueError):
            schedule(0, 1e-4, 0)


class TestAugment:
    def test_flip_twice_is_identity(self, samples):
        s = samples[0]
        draw = AugmentDraw(flip=True)
        back = apply_augmentation(apply_augmentation(s, draw), draw)
        np.testing.assert_array_equal(back.left, s.left)
        np.testing.assert_array_equal(back.right, s.right)
        np.testing.assert_array_equal(back.gt_disparity_left, s.gt_disparity_left)

    def test_flip_swaps_roles(self, samples):
        s = samples[0]
        f = apply_augmentation(s, AugmentDraw(flip=True))
        np.testing.assert_array_equal(f.left, s.right[..., ::-1])
        np.testing.assert_array_equal(f.right, s.left[..., ::-1])
        np.testing.assert_array_equal(f.gt_disparity_left, s.gt_disparity_right[..., ::-1])

    def test_unit_colour_is_identity(self, samples):
        s = samples[1]
        out = apply_augmentation(s, AugmentDraw(color=True))
        np.testing.assert_array_equal(out.left, s.left)

    def test_gamma_on_constant(self):
        from stereodepth.data import StereoSample

        s = StereoSample(np.full((3, 2, 2), 0.5), np.full((3, 2, 2), 0.5))
        out = apply_augmentation(s, AugmentDraw(color=True, gamma=1.2))
        np.testing.assert_allclose(out.left, 0.5 ** 1.2, rtol=1e-15)
        assert out.left[0, 0, 0] == pytest.approx(0.43528, abs=1e-5)

    def test_colour_clamped_and_shared(self, samples):
        s = samples[2]
        out = apply_augmentation(s, AugmentDraw(color=True, gamma=0.8, brightness=2.0, channel=(1.2, 1.0, 0.8)))
        assert out.left.max() <= 1.0 and out.left.min() >= 0.0
        want = np.clip(s.right ** 0.8 * 2.0 * np.array([1.2, 1.0, 0.8])[:, None, None], 0, 1)
        np.testing.assert_allclose(out.right, want, rtol=1e-15)

    def test_draw_count_is_fixed(self):
        a, b = Xoshiro256(4), Xoshiro256(4)
        augment_cfg = AugmentConfig(flip_prob=1.0, color_prob=0.0)
        from stereodepth.data import StereoSample

        s = StereoSample(np.zeros((3, 2, 2)), np.zeros((3, 2, 2)))
        augment(s, augment_cfg, a)
        augment(s, AugmentConfig(flip_prob=0.0, color_prob=1.0), b)
        assert a.next_u64() == b.next_u64()

    @pytest.mark.parametrize("kwargs", [{"flip_prob": 1.5}, {"gamma": (1.2, 0.8)}])
    def test_invalid(self, kwargs):
        with pytest.raises(ValueError):
            AugmentConfig(**kwargs)


class TestBatches:
    def test_each_epoch_is_a_permutation(self):
        it = batch_iterator(10, 3, seed=7)
        seen = {}
        for _ in range(9):
            epoch, idx = next(it)
            seen.setdefault(epoch, []).extend(list(idx))
        for epoch, items in seen.items():
            assert len(items) == 9 and len(set(items)) == 9

    def test_too_few_samples(self):
        with pytest.raises(ValueError):
            next(batch_iterator(2, 3, seed=0))


class TestTrainLoop:
    def test_deterministic(self, samples):
        cfg = TrainConfig(steps=6, batch_size=2, seed=3)
        a = train(samples, NetConfig(**SMALL_NET), LossWeights(), cfg)
        b = train(samples, NetConfig(**SMALL_NET), LossWeights(), cfg)
        assert a.log == b.log
        for name in a.params:
            np.testing.assert_array_equal(a.params[name].data, b.params[name].data)

    def test_first_step_loss_matches_direct_evaluation(self, samples):
        net = NetConfig(**SMALL_NET)
        cfg = TrainConfig(steps=1, batch_size=2, seed=3, augment=NO_AUG)
        result = train(samples, net, LossWeights(), cfg)
        _, idx = next(batch_iterator(len(samples), 2, derive_seed(3, "batches")))
        left = Tensor(np.stack([samples[i].left for i in idx]))
        right = Tensor(np.stack([samples[i].right for i in idx]))
        with no_grad():
            total, _, _ = compute_loss(net, init(net), left, right, LossWeights())
        assert result.log[0]["c_total"] == pytest.approx(total.item(), rel=1e-12)

    def test_smoothness_only_flattens(self, samples):
        net = NetConfig(**SMALL_NET)
        weights = LossWeights(alpha_ap=0.0, alpha_lr=0.0)
        probe = Tensor(np.stack([s.left for s in samples[:4]]))

        def variance(params):
            with no_grad():
                return float(np.mean([d_l.data.var(axis=(-2, -1)).mean() for d_l, _ in forward(net, params, probe)]))

        before = variance(init(net))
        result = train(samples, net, weights, TrainConfig(steps=100, batch_size=4, learning_rate=1e-3, augment=NO_AUG))
        assert variance(result.params) < before

    @pytest.mark.filterwarnings("ignore:overflow encountered")
    def test_divergence_names_step(self, samples):
        with pytest.raises(TrainingDivergedError) as info:
            train(samples, NetConfig(**SMALL_NET), LossWeights(), TrainConfig(steps=5, batch_size=2, learning_rate=1e300))
        assert info.value.step >= 1

    def test_empty_dataset(self):
        with pytest.raises(ValueError):
            train([], NetConfig(**SMALL_NET), LossWeights(), TrainConfig(steps=1))


class TestLossLog:
    def test_columns(self):
        cols = log_columns(4)
        assert cols[:7] == ["step", "epoch", "lr", "c_total", "c_ap", "c_ds", "c_lr"]
        assert "c_ap_s1" in cols and "c_lr_s4" in cols and "c_ds_s5" not in cols

    def test_round_trip_and_composition(self, samples, tmp_path):
        result = train(samples, NetConfig(**SMALL_NET), LossWeights(), TrainConfig(steps=3, batch_size=2))
        path = tmp_path / "loss.csv"
        write_loss_log(path, result.log, 4)
        rows = read_loss_log(path)
        assert len(rows) == 3
        assert path.read_text().splitlines()[0] == ",".join(log_columns(4))
        for row, orig in zip(rows, result.log):
            assert row["c_total"] == orig["c_total"]
            assert row["c_total"] == pytest.approx(sum(row[f"c_total_s{s}"] for s in range(1, 5)), rel=1e-12)
