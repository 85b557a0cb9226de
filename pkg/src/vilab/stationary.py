"""Critical points of F in K: obstacle and thin-obstacle solutions, the
homogeneous quadratics Q_A, and nearest points on the sphere critical sets."""

from dataclasses import dataclass

import numpy as np

from .constraint import (Constraint, constrained_grad_norm, obstacle_set, thin_set)
from .energy import (EnergyKind, EnergySpec, Obstacle, ThinObstacle, eval_energy,
                     eval_gradient, quadratic_form)
from .geometry import Grid, GridKind, inner, norm
from .qp import BoundQP, SolverError


@dataclass
class StationaryReport:
    solution: np.ndarray
    kkt_residual: float
    active_set: np.ndarray
    iterations: int
    energy: float = np.nan
    method: str = ""


def _solve_constrained_min(spec: EnergySpec, K: Constraint, tol, method, x0, maxit):
    grid = K.grid
    A, b = quadratic_form(spec, grid)
    qp = BoundQP(A, K.pinned_mask, K.sign_mask)
    res = qp.solve(b, K.pinned_values, x0=x0, method=method, tol=tol * 1e-3,
                   max_sweeps=maxit)
    u = res.x
    kkt = constrained_grad_norm(K, u, eval_gradient(spec, grid, u))
    if kkt > tol:
        raise SolverError(f"KKT residual {kkt:.3e} above tolerance {tol:.1e}", kkt, u)
    active = K.contact_mask(u)
    return StationaryReport(u, kkt, active, res.iterations, eval_energy(spec, grid, u),
                            res.method)


def solve_obstacle(grid: Grid, g, tol: float = 1e-8, method: str = "pdas", x0=None,
                   maxit: int = 200000) -> StationaryReport:
    """Minimize 1/2 int |grad u|^2 + int u over {u >= 0, u = g on the boundary}."""
    K = obstacle_set(grid, g)
    return _solve_constrained_min(Obstacle(), K, tol, method, x0, maxit)


def solve_thin_obstacle(grid: Grid, g, tol: float = 1e-8, method: str = "pdas", x0=None,
                        maxit: int = 200000) -> StationaryReport:
    """Minimize the Dirichlet energy over {u >= 0 on the diameter, u = g on the arc}."""
    if grid.kind != GridKind.HALF_DISK_THIN:
        raise ValueError("solve_thin_obstacle needs a HalfDiskThin grid")
    K = thin_set(grid, g)
    ends = grid.boundary_mask & (np.abs(grid.coords[:, 1]) < 1e-12)
    if np.any(K.pinned_values[ends] < 0):
        raise ValueError("boundary data must be nonnegative where the arc meets the thin set")
    return _solve_constrained_min(ThinObstacle(), K, tol, method, x0, maxit)


def make_QA(A, grid: Grid) -> np.ndarray:
    """Q_A(x) = x.A.x sampled on a 2D grid (on the circle this is the trace)."""
    A = np.asarray(A, dtype=float)
    if A.shape != (2, 2) or not np.allclose(A, A.T, atol=1e-14):
        raise ValueError("A must be a symmetric 2x2 matrix")
    if abs(np.trace(A) - 0.5) > 1e-12:
        raise ValueError("A must have trace 1/2")
    if np.linalg.eigvalsh(A).min() < -1e-14:
        raise ValueError("A must be nonnegative")
    if grid.coords.shape[1] != 2:
        raise ValueError("make_QA needs a two-dimensional grid")
    x = grid.coords
    return np.einsum("ni,ij,nj->n", x, A, x)


def _mode(spec: EnergySpec) -> int:
    n = int(round(np.sqrt(spec.lam)))
    if n < 1 or abs(n * n - spec.lam) > 1e-9:
        raise ValueError(f"lam = {spec.lam} is not an eigenvalue n^2 of the circle")
    return n


def _project_half_planes(p, E):
    """Euclidean projection of p in R^2 onto {q : E q >= 0} (E has few rows)."""
    if np.all(E @ p >= -1e-15):
        return p
    best, best_d = np.zeros(2), float(p @ p)
    for e in E:
        q = p - (e @ p) / (e @ e) * e
        if np.all(E @ q >= -1e-12) and (p - q) @ (p - q) < best_d:
            best, best_d = q, float((p - q) @ (p - q))
    return best


def nearest_critical(spec: EnergySpec, grid: Grid, u) -> np.ndarray:
    """Closest point (weighted L2) of the nonnegative critical set on the circle.

    SphereObstacle(n^2): {1/lam + a cos n t + b sin n t, sqrt(a^2+b^2) <= 1/lam}.
    SphereThin(m):       {a cos 2m t + b sin 2m t, nonnegative at the equator}.
    Both sets are convex and two-dimensional, so the projection is exact.
    """
    if grid.kind != GridKind.CIRCLE:
        raise ValueError("nearest_critical needs a Circle grid")
    u = grid.check_field(u)
    th = grid.angles
    if spec.kind == EnergyKind.SPHERE_OBSTACLE:
        n = _mode(spec)
    elif spec.kind == EnergyKind.SPHERE_THIN:
        n = 2 * spec.m
    else:
        raise ValueError("nearest_critical needs a sphere energy")
    if 2 * n >= grid.n:
        raise ValueError("eigenmode is not resolved by the grid")
    c, s = np.cos(n * th), np.sin(n * th)
    p = np.array([inner(grid, u, c), inner(grid, u, s)]) / np.pi
    if spec.kind == EnergyKind.SPHERE_OBSTACLE:
        rho = np.hypot(*p)
        if rho > 1.0 / spec.lam:
            p = p * (1.0 / spec.lam) / rho
        return 1.0 / spec.lam + p[0] * c + p[1] * s
    eq = grid.thin_mask
    E = np.column_stack([c[eq], s[eq]])
    q = _project_half_planes(p, E)
    return q[0] * c + q[1] * s


def critical_distance(spec: EnergySpec, grid: Grid, u) -> float:
    return norm(grid, u - nearest_critical(spec, grid, u))


def critical_level(spec: EnergySpec, grid: Grid) -> float:
    """F on the critical set: F(1/lam) for the sphere obstacle, 0 for the thin one."""
    if spec.kind == EnergyKind.SPHERE_OBSTACLE:
        return eval_energy(spec, grid, np.full(grid.n_nodes, 1.0 / spec.lam))
    if spec.kind == EnergyKind.SPHERE_THIN:
        return 0.0
    raise ValueError("critical_level needs a sphere energy")
