"""Koopman matrix estimation and lift-multiply-unlift rollouts.

The operator K advances observables one step: phi(x(t+1)) ~= K phi(x(t)).
It is fit by ridge-regularized least squares over consecutive lifted
state pairs, using the normal-equation sufficient statistics

    G = sum_t phi(t) phi(t)^T        A = sum_t phi(t+1) phi(t)^T

so trajectories can be accumulated incrementally and pooled across
tasks.  State-space prediction composes unlift . K . lift; rollouts
re-lift from the extracted (x_r, x_o) each step by default.

Gradients: K is treated as a constant during backpropagation.  The
reverse pass in `rollout_backward` chains the squared robot-state
prediction error through every re-lift, returning the exact gradient
with respect to the initial object feature.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .lifting import DimensionError, LiftSpec, lift, lift_batch, lift_jacobian, unlift

DEFAULT_RIDGE = 1e-8

# States whose magnitude exceeds this truncate the rollout; an unstable
# early-training K must not poison the loss with overflow.
DIVERGENCE_LIMIT = 1e6


class RankDeficiencyError(np.linalg.LinAlgError):
    """Normal equations are singular; refit with a positive ridge."""


@dataclass(frozen=True)
class FitStats:
    pairs: int
    residual: float  # mean squared one-step residual in lifted space


@dataclass(frozen=True)
class KoopmanModel:
    K: np.ndarray
    spec: LiftSpec
    ridge: float
    fit_stats: FitStats

    def __post_init__(self):
        if self.K.shape != (self.spec.p, self.spec.p):
            raise DimensionError(
                f"K shape {self.K.shape} does not match spec p={self.spec.p}"
            )
        self.K.flags.writeable = False


class StatePairAccumulator:
    """Running sufficient statistics over lifted consecutive-state pairs."""

    def __init__(self, spec: LiftSpec):
        self.spec = spec
        self.G = np.zeros((spec.p, spec.p))
        self.A = np.zeros((spec.p, spec.p))
        self.sq_next = 0.0  # sum ||phi(t+1)||^2, for the residual
        self.count = 0


def accumulate(
    acc: StatePairAccumulator, x_r: np.ndarray, x_o: np.ndarray
) -> StatePairAccumulator:
    """Add the T-1 consecutive pairs of one state sequence.

    x_r has shape (T, n) and x_o shape (T, m) with T >= 2.  Traversal
    order is fixed, so repeated runs accumulate bitwise-identically.
    """
    x_r = np.atleast_2d(np.asarray(x_r, dtype=np.float64))
    x_o = np.asarray(x_o, dtype=np.float64).reshape(x_r.shape[0], acc.spec.m)
    if x_r.shape[0] < 2:
        raise ValueError("state sequence must contain at least 2 states")
    phi = lift_batch(acc.spec, x_r, x_o)
    prev, nxt = phi[:-1], phi[1:]
    acc.G += prev.T @ prev
    acc.A += nxt.T @ prev
    acc.sq_next += float(np.sum(nxt * nxt))
    acc.count += x_r.shape[0] - 1
    return acc


def fit(acc: StatePairAccumulator, ridge: float = DEFAULT_RIDGE) -> KoopmanModel:
    """Solve the ridge-regularized normal equations for K.

    K minimizes  sum_t ||phi(t+1) - K phi(t)||^2 + lam ||K||_F^2  with
    lam = ridge * trace(G) / p, i.e. K (G + lam I) = A.  The trace
    scaling makes the regularization invariant to data magnitude and
    to duplicating the dataset.
    """
    if acc.count < 1:
        raise ValueError("cannot fit on an empty accumulator")
    if ridge < 0:
        raise ValueError("ridge must be >= 0")
    p = acc.spec.p
    lam = ridge * float(np.trace(acc.G)) / p
    lhs = acc.G + lam * np.eye(p)
    try:
        cho = scipy.linalg.cho_factor(lhs, lower=True, check_finite=False)
    except scipy.linalg.LinAlgError as err:
        raise RankDeficiencyError(
            "lifted-state covariance is rank deficient; refit with a "
            "positive ridge to regularize the normal equations"
        ) from err
    K = scipy.linalg.cho_solve(cho, acc.A.T, check_finite=False).T

    sse = acc.sq_next - 2.0 * float(np.sum(K * acc.A)) + float(np.sum((K @ acc.G) * K))
    stats = FitStats(pairs=acc.count, residual=max(sse / acc.count, 0.0))
    return KoopmanModel(K=K, spec=acc.spec, ridge=ridge, fit_stats=stats)


def fit_multitask(
    datasets: list[list[tuple[np.ndarray, np.ndarray]]],
    spec: LiftSpec,
    ridge: float = DEFAULT_RIDGE,
) -> KoopmanModel:
    """Fit one K on state sequences pooled across tasks.

    `datasets` holds, per task, a list of (x_r, x_o) sequence pairs that
    already share the spec dimensions (robot states zero-padded to a
    common n upstream).  Identical to `fit` on the concatenated pair set.
    """
    acc = StatePairAccumulator(spec)
    for task_sequences in datasets:
        for x_r, x_o in task_sequences:
            accumulate(acc, x_r, x_o)
    return fit(acc, ridge)


# ---------------------------------------------------------------------------
# Prediction
# ---------------------------------------------------------------------------


def step(
    model: KoopmanModel, x_r: np.ndarray, x_o: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """One state-space step: unlift(K @ lift(x_r, x_o))."""
    return unlift(model.spec, model.K @ lift(model.spec, x_r, x_o))


@dataclass
class RolloutResult:
    """Predicted states x(t0+1) .. x(t0+steps); truncated if diverged."""

    x_r: np.ndarray  # (steps, n)
    x_o: np.ndarray  # (steps, m)
    diverged: bool

    @property
    def steps(self) -> int:
        return self.x_r.shape[0]


def _state_ok(x_r: np.ndarray, x_o: np.ndarray) -> bool:
    if not (np.all(np.isfinite(x_r)) and np.all(np.isfinite(x_o))):
        return False
    hi = max(
        np.max(np.abs(x_r), initial=0.0),
        np.max(np.abs(x_o), initial=0.0),
    )
    return hi <= DIVERGENCE_LIMIT


def rollout(
    model: KoopmanModel,
    x_r0: np.ndarray,
    x_o0: np.ndarray,
    n_steps: int,
    lifted_space: bool = False,
) -> RolloutResult:
    """Autoregressive N-step prediction from (x_r0, x_o0).

    Default semantics re-lift from the extracted state each step.  With
    lifted_space=True the observable vector itself is propagated,
    g(t+1) = K g(t), and states are read off without re-lifting.
    """
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    spec = model.spec
    x_r = np.asarray(x_r0, dtype=np.float64)
    x_o = np.asarray(x_o0, dtype=np.float64)
    spec._check_state(x_r, x_o)

    out_r = np.empty((n_steps, spec.n))
    out_o = np.empty((n_steps, spec.m))
    diverged = False
    filled = 0
    g = lift(spec, x_r, x_o)
    for t in range(n_steps):
        g_next = model.K @ g
        x_r, x_o = unlift(spec, g_next)
        if not _state_ok(x_r, x_o):
            diverged = True
            break
        out_r[t], out_o[t] = x_r, x_o
        filled = t + 1
        g = lift(spec, x_r, x_o) if not lifted_space else g_next
    return RolloutResult(x_r=out_r[:filled], x_o=out_o[:filled], diverged=diverged)


def rollout_loss(
    model: KoopmanModel,
    x_r0: np.ndarray,
    x_o0: np.ndarray,
    gt_x_r: np.ndarray,
    lifted_space: bool = False,
) -> float:
    """Squared robot-state prediction error summed over the horizon.

    gt_x_r holds the ground-truth robot states x_r(t0+1 .. t0+N), one
    row per step.  A divergence-truncated rollout contributes the loss
    accumulated over its realized prefix.
    """
    gt_x_r = np.atleast_2d(np.asarray(gt_x_r, dtype=np.float64))
    res = rollout(model, x_r0, x_o0, gt_x_r.shape[0], lifted_space=lifted_space)
    err = res.x_r - gt_x_r[: res.steps]
    return float(np.sum(err * err))


def rollout_backward(
    model: KoopmanModel,
    x_r0: np.ndarray,
    x_o0: np.ndarray,
    gt_x_r: np.ndarray,
    lifted_space: bool = False,
) -> tuple[np.ndarray, float]:
    """Loss and its exact gradient with respect to the initial object feature.

    K is held constant; the reverse pass chains through every re-lift,
    so the returned vector is d(rollout_loss)/d(x_o0) including the
    dependence of all intermediate states on x_o0.
    """
    spec = model.spec
    x_r = np.asarray(x_r0, dtype=np.float64)
    x_o = np.asarray(x_o0, dtype=np.float64)
    spec._check_state(x_r, x_o)
    gt_x_r = np.atleast_2d(np.asarray(gt_x_r, dtype=np.float64))
    if gt_x_r.shape[1] != spec.n:
        raise DimensionError("ground-truth robot states do not match spec n")
    n_steps = gt_x_r.shape[0]
    sel = np.concatenate(
        [np.arange(spec.n), np.arange(spec.object_slice.start, spec.object_slice.stop)]
    )

    # Forward, caching the states each jacobian is evaluated at.
    states = [(x_r, x_o)]
    g = lift(spec, x_r, x_o)
    loss = 0.0
    for _ in range(n_steps):
        g_next = model.K @ g
        x_r, x_o = unlift(spec, g_next)
        if not _state_ok(x_r, x_o):
            break
        states.append((x_r, x_o))
        err = x_r - gt_x_r[len(states) - 2]
        loss += float(err @ err)
        g = lift(spec, x_r, x_o) if not lifted_space else g_next
    realized = len(states) - 1
    if realized == 0:
        return np.zeros(spec.m), 0.0

    if lifted_space:
        # dL/dg(i) recursion; a single jacobian at the initial state.
        mu = np.zeros(spec.p)
        for i in range(realized, 0, -1):
            a = np.zeros(spec.p)
            a[: spec.n] = 2.0 * (states[i][0] - gt_x_r[i - 1])
            mu = model.K.T @ (mu + a)
        grad = lift_jacobian(spec, *states[0]).T @ mu
        return grad[spec.n :], loss

    # Re-lift semantics: adjoint on the (n+m)-dimensional state.
    lam = np.zeros(spec.n + spec.m)
    lam[: spec.n] = 2.0 * (states[realized][0] - gt_x_r[realized - 1])
    for i in range(realized - 1, -1, -1):
        v = np.zeros(spec.p)
        v[sel] = lam
        w = model.K.T @ v
        lam = lift_jacobian(spec, *states[i]).T @ w
        if i > 0:
            lam[: spec.n] += 2.0 * (states[i][0] - gt_x_r[i - 1])
    return lam[spec.n :], loss
