"""Quadratic energies, their L2 gradients, Weiss energies, f_gamma, lambda(k).

Every functional here is discretized as F(u) = 1/2 u.A.u + b.u with A
symmetric (Euclidean coefficients).  The L2 gradient is W^{-1}(A u + b):

    Obstacle          1/2 int |grad u|^2 + int u          -> -Lap u + 1
    ThinObstacle      1/2 int_{B+} |grad u|^2             -> -Lap u (+ thin flux)
    SphereObstacle    1/2 int (|grad u|^2 - lam u^2) + int u
    SphereThin        1/2 int (|grad u|^2 - lam u^2),  lam = lambda(2m)
    FiniteDim         1/2 x.Q.x + b.x
"""

from dataclasses import dataclass
from enum import Enum

import numpy as np
import scipy.sparse as sp

from .geometry import Grid, GridKind


class EnergyKind(str, Enum):
    OBSTACLE = "Obstacle"
    THIN_OBSTACLE = "ThinObstacle"
    SPHERE_OBSTACLE = "SphereObstacle"
    SPHERE_THIN = "SphereThin"
    FINITE_DIM = "FiniteDim"


_GRIDS = {
    EnergyKind.OBSTACLE: (GridKind.INTERVAL, GridKind.DISK),
    EnergyKind.THIN_OBSTACLE: (GridKind.HALF_DISK_THIN,),
    EnergyKind.SPHERE_OBSTACLE: (GridKind.CIRCLE,),
    EnergyKind.SPHERE_THIN: (GridKind.CIRCLE,),
    EnergyKind.FINITE_DIM: (GridKind.POINTS,),
}


@dataclass(frozen=True, eq=False)
class EnergySpec:
    kind: EnergyKind
    lam: float = 0.0
    m: int = 0
    Q: np.ndarray = None
    b: np.ndarray = None
    name: str = ""

    @property
    def has_linear_term(self) -> bool:
        return self.kind in (EnergyKind.OBSTACLE, EnergyKind.SPHERE_OBSTACLE)

    @property
    def growth(self) -> float:
        """Constant lam with -w.gradF_lin(w) <= lam ||w||^2 (0 for ball problems)."""
        if self.kind in (EnergyKind.SPHERE_OBSTACLE, EnergyKind.SPHERE_THIN):
            return self.lam
        if self.kind == EnergyKind.FINITE_DIM:
            return max(0.0, -float(np.linalg.eigvalsh(self.Q).min()))
        return 0.0


def Obstacle() -> EnergySpec:
    return EnergySpec(EnergyKind.OBSTACLE, name="obstacle")


def ThinObstacle() -> EnergySpec:
    return EnergySpec(EnergyKind.THIN_OBSTACLE, name="thin-obstacle")


def SphereObstacle(lam: float) -> EnergySpec:
    if lam <= 0:
        raise ValueError("lam must be positive")
    return EnergySpec(EnergyKind.SPHERE_OBSTACLE, lam=float(lam), name="sphere-obstacle")


def SphereThin(m: int, d: int = 2) -> EnergySpec:
    if m < 1:
        raise ValueError("m must be >= 1")
    return EnergySpec(EnergyKind.SPHERE_THIN, lam=lambda_of(2 * m, d), m=m, name="sphere-thin")


_NAMED = {
    # F(x) = |x|^2
    "sum_squares": lambda n: (2.0 * np.eye(n), np.zeros(n)),
}


def FiniteDim(name: str = "sum_squares", n: int = 1, Q=None, b=None) -> EnergySpec:
    if Q is None:
        Q, b = _NAMED[name](n)
    Q = np.asarray(Q, dtype=float)
    b = np.zeros(Q.shape[0]) if b is None else np.asarray(b, dtype=float)
    if not np.allclose(Q, Q.T):
        raise ValueError("Q must be symmetric")
    return EnergySpec(EnergyKind.FINITE_DIM, Q=Q, b=b, name=name)


def check_compatible(spec: EnergySpec, grid: Grid):
    if grid.kind not in _GRIDS[spec.kind]:
        raise ValueError(f"{spec.kind.value} energy cannot live on a {grid.kind.value} grid")
    if spec.kind == EnergyKind.FINITE_DIM and spec.Q.shape[0] != grid.n_nodes:
        raise ValueError("FiniteDim size does not match the grid")


def quadratic_form(spec: EnergySpec, grid: Grid):
    """(A, b) with F(u) = 1/2 u.A.u + b.u."""
    check_compatible(spec, grid)
    w = grid.weights
    if spec.kind == EnergyKind.FINITE_DIM:
        return spec.Q, spec.b
    A = grid.stiffness
    if spec.lam:
        A = A - spec.lam * (sp.diags(w) if sp.issparse(A) else np.diag(w))
    b = w.copy() if spec.has_linear_term else np.zeros_like(w)
    return A, b


def eval_energy(spec: EnergySpec, grid: Grid, u) -> float:
    u = grid.check_field(u)
    A, b = quadratic_form(spec, grid)
    return float(0.5 * u @ (A @ u) + b @ u)


def eval_gradient(spec: EnergySpec, grid: Grid, u) -> np.ndarray:
    u = grid.check_field(u)
    A, b = quadratic_form(spec, grid)
    return (A @ u + b) / grid.weights


def weiss_energy(k: int, grid: Grid, u, convention: str = "keyGk") -> float:
    """Boundary-adjusted energy of a field on a (half-)disk.

    ``keyGk``: int |grad u|^2 - k int_{dB} u^2.
    ``ob``:    1/2 int |grad u|^2 + int u - int_{dB} u^2   (needs k = 2).
    ``th``:    1/2 int |grad u|^2 - (k/2) int_{dB} u^2     (k = 2m).
    """
    if not grid.is_polar:
        raise ValueError("weiss_energy needs a Disk or HalfDiskThin grid")
    u = grid.check_field(u)
    base = float(u @ (grid.stiffness @ u)) - k * float(np.sum(grid.boundary_weights * u * u))
    if convention == "keyGk":
        return base
    if convention == "ob":
        if k != 2:
            raise ValueError("the obstacle Weiss energy is 2-homogeneous")
        return 0.5 * base + float(np.sum(grid.weights * u))
    if convention == "th":
        return 0.5 * base
    raise ValueError(f"unknown convention {convention!r}")


def f_gamma(gamma: float, t):
    """t^(1/2) for t >= 1, t^(1-gamma) on [0, 1], 0 for t <= 0."""
    if not 0 < gamma <= 0.5:
        raise ValueError("gamma must lie in (0, 1/2]")
    t = np.asarray(t, dtype=float)
    tp = np.maximum(t, 0.0)
    out = np.where(t >= 1, np.sqrt(tp), tp ** (1 - gamma))
    out = np.where(t <= 0, 0.0, out)
    return float(out) if out.ndim == 0 else out


def lambda_of(k: int, d: int) -> float:
    """Eigenvalue of k-homogeneous harmonic traces on S^{d-1}: k(k+d-2)."""
    if k < 1 or d < 2:
        raise ValueError("need k >= 1 and d >= 2")
    return float(k * (k + d - 2))
