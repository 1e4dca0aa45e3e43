"""Rollout-loss training of the feature extractor with deferred operator refresh.

One training epoch draws `steps_per_epoch` batches of trajectory
windows; for each window the extractor predicts the object feature at
the window start, the current Koopman operator rolls the state forward
over the horizon, and the squared robot-state error is backpropagated
through the rollout into the extractor (the operator itself stays
fixed).  Every `refresh_period` epochs the operator is refit on
features re-predicted across the whole training set, which realigns it
with the drifted feature distribution.

All randomness flows through one seeded generator, so a fixed seed
reproduces parameters, operator, and metrics bitwise.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import featnet, koopman
from .dct import make_input_stack
from .envs import ObservedTrajectory
from .lifting import LiftSpec, lift_dim

_TRAIN_TAG = 0x54524149


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int):
        super().__init__(f"non-finite training loss at epoch {epoch}")
        self.epoch = epoch


@dataclass(frozen=True)
class TrainConfig:
    horizon: int = 40
    refresh_period: int | None = 50      # None: never refresh
    max_epochs: int = 300
    batch_size: int = 8
    learning_rate: float = 1e-4
    adam_betas: tuple[float, float] = (0.9, 0.999)
    ridge: float = 1e-7
    seed: int = 0
    use_frequency: bool = True
    feature_dim: int = 8
    val_fraction: float = 0.1
    steps_per_epoch: int | None = None    # default: one pass over trajectories

    def __post_init__(self):
        if self.horizon < 1 or self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("horizon, batch_size, and max_epochs must be >= 1")
        if self.refresh_period is not None and self.refresh_period < 1:
            raise ValueError("refresh_period must be >= 1 or None")

    def learning_rate_at(self, epoch: int) -> float:
        """Linear decay from the base rate toward zero at max_epochs."""
        return self.learning_rate * (1.0 - (epoch - 1) / self.max_epochs)


@dataclass
class TrainMetrics:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    seconds: list[float] = field(default_factory=list)
    refresh_epochs: list[int] = field(default_factory=list)

    @property
    def epochs(self) -> int:
        return len(self.train_loss)


def sample_window(
    dataset: list, horizon: int, rng: np.random.Generator
) -> tuple[int, int]:
    """Uniform trajectory index and window start for one training item.

    The start is uniform over [0, max(0, T-1-horizon)], so windows near
    a short trajectory's end use a truncated horizon instead of being
    rejected.
    """
    if not dataset:
        raise ValueError("dataset is empty")
    idx = int(rng.integers(len(dataset)))
    T = dataset[idx].x_r.shape[0]
    if T < 2:
        raise ValueError("trajectories must have length >= 2")
    t0 = int(rng.integers(max(0, T - 1 - horizon) + 1))
    return idx, t0


def _as_views(dataset) -> list[ObservedTrajectory]:
    out = []
    for traj in dataset:
        out.append(traj.training_view() if hasattr(traj, "training_view") else traj)
    return out


def _input_stacks(traj: ObservedTrajectory, use_frequency: bool) -> np.ndarray:
    return np.stack(
        [make_input_stack(img, use_frequency).channels for img in traj.images]
    )


def refresh_koopman(
    params: featnet.FeatNetParams,
    dataset: list[ObservedTrajectory],
    ridge: float,
    feature_fn=None,
    stacks: list[np.ndarray] | None = None,
) -> koopman.KoopmanModel:
    """Refit the operator on features re-predicted across the dataset.

    feature_fn(traj, t) overrides the extractor (oracle stubs); input
    stacks may be passed in to skip recomputing the frequency channels.
    """
    if not dataset:
        raise ValueError("dataset is empty")
    use_frequency = params.arch.in_channels == 2 * dataset[0].images.shape[1]
    spec = None
    acc = None
    for i, traj in enumerate(dataset):
        if feature_fn is not None:
            feats = np.stack(
                [feature_fn(traj, t) for t in range(traj.x_r.shape[0])]
            )
        else:
            frames = stacks[i] if stacks is not None else _input_stacks(traj, use_frequency)
            feats = np.stack(
                [featnet.forward(params, frame)[0] for frame in frames]
            )
        if acc is None:
            spec = lift_dim(traj.x_r.shape[1], feats.shape[1])
            acc = koopman.StatePairAccumulator(spec)
        koopman.accumulate(acc, traj.x_r, feats)
    return koopman.fit(acc, ridge)


def _zero_grads(params: featnet.FeatNetParams) -> dict[str, np.ndarray]:
    return {k: np.zeros_like(v) for k, v in params.tensors.items()}


def standardize_features(
    params: featnet.FeatNetParams,
    views: list[ObservedTrajectory],
    stacks: list[np.ndarray],
) -> tuple[featnet.FeatNetParams, list[np.ndarray]]:
    """Fold dataset feature statistics into the output layer.

    Rescales fc2 so features are zero-mean unit-variance over the
    dataset: an exact reparametrization (the network computes the same
    family of functions), but it keeps the lifted feature block of the
    operator fit well conditioned.  Without it the feature mean
    dominates the variance and the refit normal equations collapse
    onto near-duplicate constant directions.

    Returns the reparametrized params and the standardized per-frame
    features for every trajectory.
    """
    feats = [
        np.stack([featnet.forward(params, frame)[0] for frame in frames])
        for frames in stacks
    ]
    flat = np.concatenate(feats, axis=0)
    mean = flat.mean(axis=0)
    std = np.maximum(flat.std(axis=0), 1e-6)

    tensors = {k: v.copy() for k, v in params.tensors.items()}
    tensors["fc2_w"] = tensors["fc2_w"] / std[:, None]
    tensors["fc2_b"] = (tensors["fc2_b"] - mean) / std
    new_params = featnet.FeatNetParams(
        arch=params.arch, tensors=tensors, version=params.version + 1
    )
    return new_params, [(f - mean) / std for f in feats]


def _window_backward(params, model, stack, x_r, t0, horizon):
    """Loss and extractor gradients for one sampled window."""
    T = x_r.shape[0]
    eff = min(horizon, T - 1 - t0)
    gt = x_r[t0 + 1 : t0 + 1 + eff]
    feat, cache = featnet.forward(params, stack)
    d_feat, loss = koopman.rollout_backward(model, x_r[t0], feat, gt)
    grads, _ = featnet.backward(params, cache, d_feat)
    return loss, grads


def _validation_loss(params, model, views, stacks, horizon, windows_per_traj=4):
    if not views:
        return math.nan
    total, count = 0.0, 0
    for traj, frames in zip(views, stacks):
        T = traj.x_r.shape[0]
        starts = sorted({int(t) for t in np.linspace(0, max(0, T - 1 - horizon), windows_per_traj)})
        for t0 in starts:
            eff = min(horizon, T - 1 - t0)
            feat, _ = featnet.forward(params, frames[t0])
            total += koopman.rollout_loss(
                model, traj.x_r[t0], feat, traj.x_r[t0 + 1 : t0 + 1 + eff]
            )
            count += 1
    return total / count


def train(
    config: TrainConfig, dataset
) -> tuple[featnet.FeatNetParams, koopman.KoopmanModel, TrainMetrics]:
    """Full training loop; returns extractor params, operator, and metrics.

    The dataset is a list of trajectories (ground-truth object states,
    if present, are stripped first).  A val_fraction tail of the
    dataset is held out for the validation curve and never used for
    fitting or refreshing the operator.
    """
    views = _as_views(dataset)
    if not views:
        raise ValueError("dataset is empty")
    n_val = int(round(config.val_fraction * len(views)))
    n_val = min(n_val, len(views) - 1)
    train_views = views[: len(views) - n_val]
    val_views = views[len(views) - n_val :]

    channels = views[0].images.shape[1]
    side = views[0].images.shape[2]
    arch = featnet.FeatNetArch(
        in_channels=channels * (2 if config.use_frequency else 1),
        image_side=side,
        feature_dim=config.feature_dim,
    )
    params = featnet.init_params(config.seed, arch)
    adam = featnet.init_adam(params)

    train_stacks = [_input_stacks(v, config.use_frequency) for v in train_views]
    val_stacks = [_input_stacks(v, config.use_frequency) for v in val_views]

    def standardized_refresh(current):
        current, feats = standardize_features(current, train_views, train_stacks)
        spec = lift_dim(train_views[0].x_r.shape[1], config.feature_dim)
        acc = koopman.StatePairAccumulator(spec)
        for view, f in zip(train_views, feats):
            koopman.accumulate(acc, view.x_r, f)
        return current, koopman.fit(acc, config.ridge)

    params, model = standardized_refresh(params)

    steps = config.steps_per_epoch or max(1, math.ceil(len(train_views) / config.batch_size))
    rng = np.random.default_rng(np.random.SeedSequence((config.seed, _TRAIN_TAG)))
    metrics = TrainMetrics()

    for epoch in range(1, config.max_epochs + 1):
        started = time.perf_counter()
        lr = config.learning_rate_at(epoch)
        epoch_loss = 0.0
        for _ in range(steps):
            grads = _zero_grads(params)
            batch_loss = 0.0
            for _ in range(config.batch_size):
                idx, t0 = sample_window(train_views, config.horizon, rng)
                loss, item_grads = _window_backward(
                    params, model, train_stacks[idx][t0], train_views[idx].x_r,
                    t0, config.horizon,
                )
                batch_loss += loss
                for name in grads:
                    grads[name] += item_grads[name]
            inv = 1.0 / config.batch_size
            for name in grads:
                grads[name] *= inv
            params, adam = featnet.adam_step(
                params, grads, adam, lr, config.adam_betas
            )
            epoch_loss += batch_loss * inv
        epoch_loss /= steps
        if not math.isfinite(epoch_loss):
            raise TrainingDiverged(epoch)

        refreshed = (
            config.refresh_period is not None and epoch % config.refresh_period == 0
        )
        if refreshed:
            params, model = standardized_refresh(params)
            metrics.refresh_epochs.append(epoch)

        metrics.train_loss.append(epoch_loss)
        metrics.val_loss.append(
            _validation_loss(params, model, val_views, val_stacks, config.horizon)
        )
        metrics.seconds.append(time.perf_counter() - started)

    return params, model, metrics
