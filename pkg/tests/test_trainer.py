"""Training-loop contracts: sampling, refresh, determinism, composed gradients."""

import math

import numpy as np
import pytest

from korol import envs, koopman, trainer
from korol.envs import ObservedTrajectory
from korol.featnet import FeatNetArch, init_params
from korol.lifting import lift, lift_dim


def synthetic_dataset(count=6, T=12, n=2, side=8, channels=1, seed=0):
    """Small smooth trajectories with random images, for plumbing tests."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(count):
        steps = rng.uniform(-0.05, 0.05, (T, n))
        x_r = 0.5 + np.cumsum(steps, axis=0)
        images = rng.uniform(0, 1, (T, channels, side, side))
        out.append(
            ObservedTrajectory(task_id="synthetic", seed=i, x_r=x_r, images=images)
        )
    return out


MINI = dict(
    horizon=6,
    max_epochs=4,
    batch_size=2,
    steps_per_epoch=2,
    use_frequency=False,
    feature_dim=3,
    ridge=1e-6,
    val_fraction=0.2,
)


class TestTrainConfig:
    def test_defaults_match_contract(self):
        cfg = trainer.TrainConfig()
        assert cfg.horizon == 40
        assert cfg.refresh_period == 50
        assert cfg.max_epochs == 300
        assert cfg.batch_size == 8
        assert cfg.learning_rate == 1e-4
        assert cfg.adam_betas == (0.9, 0.999)
        assert cfg.feature_dim == 8

    def test_linear_decay(self):
        cfg = trainer.TrainConfig(max_epochs=100, learning_rate=1e-3)
        assert cfg.learning_rate_at(1) == 1e-3
        assert abs(cfg.learning_rate_at(100) - 1e-5) < 1e-18
        mid = cfg.learning_rate_at(51)
        assert abs(mid - 5e-4) < 1e-12

    def test_invalid_rejected(self):
        with pytest.raises(ValueError):
            trainer.TrainConfig(horizon=0)
        with pytest.raises(ValueError):
            trainer.TrainConfig(refresh_period=0)


class TestSampleWindow:
    def test_exact_length_forces_zero_start(self):
        data = synthetic_dataset(count=1, T=11)
        rng = np.random.default_rng(0)
        for _ in range(50):
            idx, t0 = trainer.sample_window(data, 10, rng)
            assert (idx, t0) == (0, 0)

    def test_seeded_reproducible(self):
        data = synthetic_dataset(count=4, T=20)
        a = [trainer.sample_window(data, 5, np.random.default_rng(9)) for _ in range(1)]
        b = [trainer.sample_window(data, 5, np.random.default_rng(9)) for _ in range(1)]
        assert a == b

    def test_uniform_over_trajectories(self):
        data = synthetic_dataset(count=10, T=20)
        rng = np.random.default_rng(1)
        draws = 10_000
        counts = np.zeros(10)
        for _ in range(draws):
            idx, t0 = trainer.sample_window(data, 8, rng)
            counts[idx] += 1
            assert 0 <= t0 <= 11
        expected = draws / 10
        sigma = math.sqrt(draws * 0.1 * 0.9)
        assert np.all(np.abs(counts - expected) < 3 * sigma)

    def test_empty_dataset_rejected(self):
        with pytest.raises(ValueError):
            trainer.sample_window([], 5, np.random.default_rng(0))


class TestRefreshKoopman:
    def test_idempotent_given_params(self):
        data = synthetic_dataset()
        params = init_params(0, FeatNetArch(in_channels=1, image_side=8, feature_dim=3))
        a = trainer.refresh_koopman(params, data, ridge=1e-7)
        b = trainer.refresh_koopman(params, data, ridge=1e-7)
        assert np.array_equal(a.K, b.K)

    def test_oracle_stub_matches_direct_fit(self):
        task = envs.task_by_name("point_reach")
        full = [envs.gen_demo(task, s) for s in range(4)]
        views = [t.training_view() for t in full]
        gt = {v.seed: f.x_o_gt for v, f in zip(views, full)}

        params = init_params(0, FeatNetArch(in_channels=2, feature_dim=task.m_gt))
        stub = trainer.refresh_koopman(
            params, views, ridge=1e-7,
            feature_fn=lambda traj, t: gt[traj.seed][t],
        )

        spec = lift_dim(task.n, task.m_gt)
        acc = koopman.StatePairAccumulator(spec)
        for f in full:
            koopman.accumulate(acc, f.x_r, f.x_o_gt)
        direct = koopman.fit(acc, ridge=1e-7)
        assert np.array_equal(stub.K, direct.K)

    def test_near_linear_system_residual(self):
        # scalar decay with a constant stand-in feature: the lifted
        # dynamics are exactly linear, so the one-step residual vanishes
        data = []
        for i, x0 in enumerate((1.0, 0.6, -0.8)):
            x_r = (x0 * 0.9 ** np.arange(12)).reshape(-1, 1)
            images = np.zeros((12, 1, 8, 8))
            data.append(ObservedTrajectory("decay", i, x_r, images))
        params = init_params(0, FeatNetArch(in_channels=1, image_side=8, feature_dim=1))
        model = trainer.refresh_koopman(
            params, data, ridge=1e-12, feature_fn=lambda traj, t: np.array([0.5])
        )
        assert model.fit_stats.residual < 1e-6

    def test_empty_dataset_rejected(self):
        params = init_params(0, FeatNetArch(in_channels=1, image_side=8))
        with pytest.raises(ValueError):
            trainer.refresh_koopman(params, [], ridge=1e-7)


class TestTrain:
    def test_metrics_shape_and_refresh_epochs(self):
        data = synthetic_dataset()
        cfg = trainer.TrainConfig(refresh_period=2, seed=1, **MINI)
        params, model, metrics = trainer.train(cfg, data)
        assert metrics.epochs == 4
        assert metrics.refresh_epochs == [2, 4]
        assert all(math.isfinite(v) for v in metrics.train_loss)
        assert all(math.isfinite(v) for v in metrics.val_loss)
        assert params.arch.feature_dim == 3
        assert model.spec.m == 3

    def test_never_refresh(self):
        data = synthetic_dataset()
        cfg = trainer.TrainConfig(refresh_period=None, seed=1, **MINI)
        _, _, metrics = trainer.train(cfg, data)
        assert metrics.refresh_epochs == []

    def test_bitwise_deterministic(self):
        data = synthetic_dataset()
        cfg = trainer.TrainConfig(refresh_period=3, seed=7, **MINI)
        p1, m1, met1 = trainer.train(cfg, data)
        p2, m2, met2 = trainer.train(cfg, data)
        assert np.array_equal(m1.K, m2.K)
        for name in p1.tensors:
            assert np.array_equal(p1.tensors[name], p2.tensors[name])
        assert met1.train_loss == met2.train_loss
        assert met1.val_loss == met2.val_loss

    def test_seed_changes_results(self):
        data = synthetic_dataset()
        a = trainer.train(trainer.TrainConfig(seed=0, **MINI), data)[0]
        b = trainer.train(trainer.TrainConfig(seed=1, **MINI), data)[0]
        assert any(
            not np.array_equal(a.tensors[n], b.tensors[n]) for n in a.tensors
        )

    def test_gt_fields_stripped_from_real_trajectories(self):
        task = envs.task_by_name("point_reach")
        full = [envs.gen_demo(task, s) for s in range(3)]
        cfg = trainer.TrainConfig(
            horizon=8, max_epochs=2, batch_size=2, steps_per_epoch=1,
            use_frequency=False, feature_dim=2, val_fraction=0.0, ridge=1e-6,
        )
        params, model, _ = trainer.train(cfg, full)
        assert model.spec.n == 2

    def test_empty_dataset_rejected(self):
        with pytest.raises(ValueError):
            trainer.train(trainer.TrainConfig(**MINI), [])


class TestComposedGradient:
    def test_window_backward_matches_finite_differences(self):
        # end-to-end image -> feature -> rollout -> loss gradient on a
        # miniature instance, checked against central differences over
        # every network parameter
        data = synthetic_dataset(count=3, T=10)
        arch = FeatNetArch(
            in_channels=1, image_side=8, conv_channels=(2, 3, 3),
            hidden=4, feature_dim=2,
        )
        params = init_params(3, arch)
        model = trainer.refresh_koopman(params, data, ridge=1e-6)
        stack = data[0].images[2]
        x_r = data[0].x_r

        loss, grads = trainer._window_backward(params, model, stack, x_r, 2, 5)

        h = 1e-5
        worst = 0.0
        for name, tensor in params.tensors.items():
            flat = tensor.ravel()
            fd = np.zeros(flat.size)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                hi = trainer._window_backward(params, model, stack, x_r, 2, 5)[0]
                flat[i] = orig - h
                lo = trainer._window_backward(params, model, stack, x_r, 2, 5)[0]
                flat[i] = orig
                fd[i] = (hi - lo) / (2 * h)
            denom = np.maximum(np.abs(fd), 1e-3)
            worst = max(worst, np.max(np.abs(grads[name].ravel() - fd) / denom))
        assert worst < 1e-3, f"composed gradient rel err {worst:.2e}"
