"""Polynomial observable lifting for Koopman dynamics.

The observable vector stacks four blocks:

    phi(x) = [ x_r | psi_r(x_r) | x_o | psi_o(x_o) ]

where psi_r collects robot-state monomials (pair products x_i x_j with
i<j, squares, cubes) and psi_o collects object-feature monomials (pair
products i<j, squares, and all quadratic-linear products (x_i)^2 x_j,
i=j included, so cubes appear inside that enumeration and are not
deduplicated).  Total dimension:

    p = 3n + 2m + m^2 + n(n-1)/2 + m(m-1)/2

Monomial ordering is fixed and is part of the persisted model format;
the tag below is stored alongside any serialized operator so a loaded
matrix is never applied against a different basis order.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# Basis-order version tag persisted with every model file.
ORDER_TAG = "poly3-v1"

# Sentinel factor index pointing at the constant-1 slot of the extended
# state vector [x_r, x_o, 1.0].
_ONE = -1


class DimensionError(ValueError):
    """Raised for invalid or mismatched state dimensions."""


def _psi_r_factors(n: int, offset: int = 0) -> list[tuple[int, int, int]]:
    """Monomial factor triples for the robot lifting block.

    Order: pairs (i<j) lexicographic, squares i=0..n-1, cubes i=0..n-1.
    """
    out = []
    for i in range(n):
        for j in range(i + 1, n):
            out.append((offset + i, offset + j, _ONE))
    for i in range(n):
        out.append((offset + i, offset + i, _ONE))
    for i in range(n):
        out.append((offset + i, offset + i, offset + i))
    return out


def _psi_o_factors(m: int, offset: int) -> list[tuple[int, int, int]]:
    """Monomial factor triples for the object lifting block.

    Order: pairs (i<j) lexicographic, squares, then (x_i)^2 x_j for all
    (i, j) in row-major order.  The i=j entries are cubes and stay in
    place: the m^2 count of the dimension formula includes them.
    """
    out = []
    for i in range(m):
        for j in range(i + 1, m):
            out.append((offset + i, offset + j, _ONE))
    for i in range(m):
        out.append((offset + i, offset + i, _ONE))
    for i in range(m):
        for j in range(m):
            out.append((offset + i, offset + i, offset + j))
    return out


@dataclass(frozen=True)
class LiftSpec:
    """Dimensions and index layout of the observable vector.

    Attributes:
        n: robot-state dimension.
        m: object-feature dimension.
        n_lift: length of the psi_r block, 2n + n(n-1)/2.
        m_lift: length of the psi_o block, m + m^2 + m(m-1)/2.
        p: total observable dimension.
        factors: (p, 3) int array; entry k holds the extended-state
            indices whose product is observable k (index n+m is the
            constant 1.0 slot).
    """

    n: int
    m: int
    n_lift: int
    m_lift: int
    p: int
    factors: np.ndarray = field(repr=False)

    @property
    def robot_slice(self) -> slice:
        return slice(0, self.n)

    @property
    def psi_r_slice(self) -> slice:
        return slice(self.n, self.n + self.n_lift)

    @property
    def object_slice(self) -> slice:
        start = self.n + self.n_lift
        return slice(start, start + self.m)

    @property
    def psi_o_slice(self) -> slice:
        return slice(self.n + self.n_lift + self.m, self.p)

    @property
    def block_offsets(self) -> tuple[int, int, int, int]:
        """Start offsets of the [x_r | psi_r | x_o | psi_o] blocks."""
        return (0, self.n, self.n + self.n_lift, self.n + self.n_lift + self.m)

    def _check_state(self, x_r: np.ndarray, x_o: np.ndarray) -> None:
        if x_r.shape[-1] != self.n or x_o.shape[-1] != self.m:
            raise DimensionError(
                f"state dims ({x_r.shape[-1]}, {x_o.shape[-1]}) do not match "
                f"spec (n={self.n}, m={self.m})"
            )


def lift_dim(n: int, m: int) -> LiftSpec:
    """Build the observable layout for robot dim n and object dim m.

    n must be >= 1 (there is always a robot state); m may be 0.
    """
    if n < 1:
        raise DimensionError("robot-state dimension n must be >= 1")
    if m < 0:
        raise DimensionError("object-feature dimension m must be >= 0")

    n_lift = 2 * n + n * (n - 1) // 2
    m_lift = m + m * m + m * (m - 1) // 2
    p = n + n_lift + m + m_lift

    triples: list[tuple[int, int, int]] = []
    triples += [(i, _ONE, _ONE) for i in range(n)]
    triples += _psi_r_factors(n)
    triples += [(n + i, _ONE, _ONE) for i in range(m)]
    triples += _psi_o_factors(m, offset=n)

    factors = np.asarray(triples, dtype=np.intp).reshape(p, 3)
    # Map the sentinel onto the constant slot of the extended vector.
    factors[factors == _ONE] = n + m
    factors.flags.writeable = False
    return LiftSpec(n=n, m=m, n_lift=n_lift, m_lift=m_lift, p=p, factors=factors)


def lift(spec: LiftSpec, x_r: np.ndarray, x_o: np.ndarray) -> np.ndarray:
    """Evaluate the observable vector phi(x_r, x_o), shape (p,)."""
    x_r = np.asarray(x_r, dtype=np.float64)
    x_o = np.asarray(x_o, dtype=np.float64)
    spec._check_state(x_r, x_o)
    ext = np.concatenate([x_r, x_o, [1.0]])
    f = spec.factors
    return ext[f[:, 0]] * ext[f[:, 1]] * ext[f[:, 2]]


def lift_batch(spec: LiftSpec, x_r: np.ndarray, x_o: np.ndarray) -> np.ndarray:
    """Evaluate phi row-wise over (T, n) and (T, m) state arrays -> (T, p)."""
    x_r = np.asarray(x_r, dtype=np.float64)
    x_o = np.asarray(x_o, dtype=np.float64)
    spec._check_state(x_r, x_o)
    if x_r.shape[0] != x_o.shape[0]:
        raise DimensionError("x_r and x_o row counts differ")
    ones = np.ones((x_r.shape[0], 1))
    ext = np.concatenate([x_r, x_o, ones], axis=1)
    f = spec.factors
    return ext[:, f[:, 0]] * ext[:, f[:, 1]] * ext[:, f[:, 2]]


def unlift(spec: LiftSpec, obs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Select the linear state blocks back out of an observable vector.

    Pure selection, no arithmetic: returns copies of the x_r and x_o
    blocks, so `unlift(spec, lift(spec, a, b)) == (a, b)` bitwise.
    """
    obs = np.asarray(obs, dtype=np.float64)
    if obs.shape[-1] != spec.p:
        raise DimensionError(f"observable length {obs.shape[-1]} != p={spec.p}")
    return obs[..., spec.robot_slice].copy(), obs[..., spec.object_slice].copy()


def lift_jacobian(spec: LiftSpec, x_r: np.ndarray, x_o: np.ndarray) -> np.ndarray:
    """Jacobian d phi / d [x_r, x_o], shape (p, n+m).

    Each observable is a product of at most three state factors; the
    derivative with respect to variable v sums, over the factor slots
    equal to v, the product of the remaining two slots.
    """
    x_r = np.asarray(x_r, dtype=np.float64)
    x_o = np.asarray(x_o, dtype=np.float64)
    spec._check_state(x_r, x_o)
    d = spec.n + spec.m
    ext = np.concatenate([x_r, x_o, [1.0]])
    f = spec.factors
    v0, v1, v2 = ext[f[:, 0]], ext[f[:, 1]], ext[f[:, 2]]
    rows = np.arange(spec.p)

    # Extra column absorbs contributions of the constant slot; dropped below.
    jac = np.zeros((spec.p, d + 1))
    np.add.at(jac, (rows, f[:, 0]), v1 * v2)
    np.add.at(jac, (rows, f[:, 1]), v0 * v2)
    np.add.at(jac, (rows, f[:, 2]), v0 * v1)
    return jac[:, :d]
