"""Convex admissible sets: sign constraints on a node subset plus pinned data.

The constrained gradient norm

    ||g||_K = sup{0, sup_{v in K} -<v - u, g> / ||v - u||}

is evaluated over the closed cone of feasible directions at ``u``.  For a
sign cone intersected with an affine pin that cone is a product, so the
supremum is the weighted norm of the clipped field ``d*``.
"""

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .geometry import Grid, GridKind

CONTACT_RTOL = 1e-12


class ConstraintKind(str, Enum):
    POSITIVE_EVERYWHERE = "PositiveEverywhere"
    POSITIVE_ON_THIN_SET = "PositiveOnThinSet"
    POSITIVE_CONE = "PositiveCone"


@dataclass(frozen=True, eq=False)
class Constraint:
    kind: ConstraintKind
    grid: Grid
    sign_mask: np.ndarray
    pinned_mask: np.ndarray
    pinned_values: np.ndarray  # full-length; only entries on pinned_mask matter
    tolerance: float = 0.0

    def __post_init__(self):
        both = self.sign_mask & self.pinned_mask
        if np.any(self.pinned_values[both] < 0):
            raise ValueError("pinned data must be nonnegative on sign nodes")

    @property
    def free_mask(self) -> np.ndarray:
        return ~self.pinned_mask

    def contact_mask(self, u) -> np.ndarray:
        """Sign nodes where u sits on the constraint (scale-aware threshold)."""
        thresh = CONTACT_RTOL * (1.0 + np.max(np.abs(u), initial=0.0))
        return self.sign_mask & (u <= thresh) & ~self.pinned_mask

    def is_feasible(self, u) -> bool:
        u = np.asarray(u, dtype=float)
        ok_sign = np.all(u[self.sign_mask] >= -self.tolerance)
        ok_pin = np.all(np.abs(u[self.pinned_mask] - self.pinned_values[self.pinned_mask])
                        <= self.tolerance)
        return bool(ok_sign and ok_pin)

    def require_feasible(self, u):
        if not self.is_feasible(u):
            raise ValueError("field is not feasible for the constraint")


def boundary_values(grid: Grid, g) -> np.ndarray:
    """Full-length array carrying Dirichlet data g on the boundary nodes.

    ``g`` may be a scalar, a callable of the (N, dim) coordinate array, or an
    array over all nodes.
    """
    vals = np.zeros(grid.n_nodes)
    b = grid.boundary_mask
    if callable(g):
        vals[b] = np.asarray(g(grid.coords[b]), dtype=float)
    elif np.ndim(g) == 0:
        vals[b] = float(g)
    else:
        g = np.asarray(g, dtype=float)
        if g.shape != (grid.n_nodes,):
            raise ValueError("array boundary data must cover every node")
        vals[b] = g[b]
    return vals


def obstacle_set(grid: Grid, g=0.0) -> Constraint:
    """{u >= 0, u = g on the boundary} on an Interval or Disk grid."""
    if grid.kind not in (GridKind.INTERVAL, GridKind.DISK):
        raise ValueError("obstacle_set needs an Interval or Disk grid")
    pv = boundary_values(grid, g)
    return Constraint(ConstraintKind.POSITIVE_EVERYWHERE, grid,
                      np.ones(grid.n_nodes, bool), grid.boundary_mask.copy(), pv)


def thin_set(grid: Grid, g=0.0) -> Constraint:
    """{u >= 0 on the thin set, u = g on the arc} on a HalfDiskThin grid,
    or {u >= 0 at the equator nodes} on a Circle."""
    if grid.kind == GridKind.HALF_DISK_THIN:
        pv = boundary_values(grid, g)
        return Constraint(ConstraintKind.POSITIVE_ON_THIN_SET, grid, grid.thin_mask.copy(),
                          grid.boundary_mask.copy(), pv)
    if grid.kind == GridKind.CIRCLE:
        return Constraint(ConstraintKind.POSITIVE_ON_THIN_SET, grid, grid.thin_mask.copy(),
                          np.zeros(grid.n_nodes, bool), np.zeros(grid.n_nodes))
    raise ValueError("thin_set needs a HalfDiskThin or Circle grid")


def cone_set(grid: Grid) -> Constraint:
    """{u >= 0 everywhere}, no pinned data (sphere obstacle)."""
    n = grid.n_nodes
    return Constraint(ConstraintKind.POSITIVE_CONE, grid, np.ones(n, bool),
                      np.zeros(n, bool), np.zeros(n))


def free_set(grid: Grid) -> Constraint:
    """No constraint at all; useful for unconstrained reference flows."""
    n = grid.n_nodes
    return Constraint(ConstraintKind.POSITIVE_CONE, grid, np.zeros(n, bool),
                      np.zeros(n, bool), np.zeros(n))


def project(K: Constraint, u) -> np.ndarray:
    """Weighted-L2 projection onto K (pointwise, since the weights are diagonal)."""
    v = np.array(u, dtype=float, copy=True)
    v[K.sign_mask] = np.maximum(v[K.sign_mask], 0.0)
    v[K.pinned_mask] = K.pinned_values[K.pinned_mask]
    return v


def tangent_clip(K: Constraint, u, grad, check: bool = True) -> np.ndarray:
    """Steepest feasible descent direction d* at u."""
    u = np.asarray(u, dtype=float)
    grad = np.asarray(grad, dtype=float)
    if check:
        K.require_feasible(u)
    d = -grad.copy()
    on = K.contact_mask(u)
    d[on] = np.maximum(d[on], 0.0)
    d[K.pinned_mask] = 0.0
    return d


def constrained_grad_norm(K: Constraint, u, grad, check: bool = True) -> float:
    d = tangent_clip(K, u, grad, check=check)
    return float(np.sqrt(np.sum(K.grid.weights * d * d)))
