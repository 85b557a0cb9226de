"""Discrete domains: interval, polar disk, half-disk with a thin set, circle.

Every grid carries nodal quadrature weights ``w`` and a symmetric stiffness
matrix ``S`` such that ``u @ S @ u`` approximates the Dirichlet integral
``int |grad u|^2``.  The discrete Laplacian is ``-W^{-1} S``, which makes it
self-adjoint in the weighted inner product by construction.
"""

from dataclasses import dataclass, field
from enum import Enum

import numpy as np
import scipy.sparse as sp


class GridKind(str, Enum):
    INTERVAL = "Interval"
    DISK = "Disk"
    HALF_DISK_THIN = "HalfDiskThin"
    CIRCLE = "Circle"
    POINTS = "Points"


@dataclass(frozen=True, eq=False)
class Grid:
    """Immutable discrete domain.

    Polar grids (Disk, HalfDiskThin) store node 0 at the centre and ring
    ``i`` (radius ``radii[i]``, i >= 1) at ``1 + (i-1)*n_theta + j``.
    """

    kind: GridKind
    n: int
    coords: np.ndarray
    weights: np.ndarray
    boundary_mask: np.ndarray
    thin_mask: np.ndarray
    spacing: float
    stiffness: object  # scipy.sparse csr matrix, or dense ndarray on the circle
    boundary_weights: np.ndarray  # surface measure carried by boundary nodes
    radii: np.ndarray = field(default=None)
    angles: np.ndarray = field(default=None)

    @property
    def n_nodes(self) -> int:
        return self.weights.shape[0]

    @property
    def n_theta(self) -> int:
        return 0 if self.angles is None else self.angles.shape[0]

    @property
    def is_polar(self) -> bool:
        return self.kind in (GridKind.DISK, GridKind.HALF_DISK_THIN)

    def ring(self, i: int) -> np.ndarray:
        """Node indices of radial ring i (i = 0 is the centre)."""
        if not self.is_polar:
            raise ValueError("rings exist only on polar grids")
        if i == 0:
            return np.array([0])
        start = 1 + (i - 1) * self.n_theta
        return np.arange(start, start + self.n_theta)

    def check_field(self, u) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        if u.shape != (self.n_nodes,):
            raise ValueError(f"field has shape {u.shape}, grid has {self.n_nodes} nodes")
        if not np.all(np.isfinite(u)):
            raise ValueError("field has non-finite values")
        return u


def _edges_to_stiffness(n_nodes, a, b, c):
    """Graph Laplacian sum_e c_e (u_a - u_b)^2 as a symmetric csr matrix."""
    a = np.asarray(a)
    b = np.asarray(b)
    c = np.asarray(c, dtype=float)
    rows = np.concatenate([a, b, a, b])
    cols = np.concatenate([a, b, b, a])
    vals = np.concatenate([c, c, -c, -c])
    return sp.coo_matrix((vals, (rows, cols)), shape=(n_nodes, n_nodes)).tocsr()


def _interval(n):
    x = np.linspace(-1.0, 1.0, n)
    h = 2.0 / (n - 1)
    w = np.full(n, h)
    w[[0, -1]] = h / 2
    idx = np.arange(n - 1)
    S = _edges_to_stiffness(n, idx, idx + 1, np.full(n - 1, 1.0 / h))
    bmask = np.zeros(n, bool)
    bmask[[0, -1]] = True
    return Grid(GridKind.INTERVAL, n, x[:, None], w, bmask, np.zeros(n, bool), h, S,
                np.where(bmask, 1.0, 0.0))


def circle_stiffness(n):
    """Spectral stiffness h * (-d^2/dtheta^2) on n equispaced points."""
    k = np.fft.fftfreq(n, d=1.0 / n)
    col = np.real(np.fft.ifft(k ** 2))  # first column of the circulant -D2
    idx = (np.arange(n)[:, None] - np.arange(n)[None, :]) % n
    K = col[idx]
    K = 0.5 * (K + K.T)
    return (2 * np.pi / n) * K


def _circle(n):
    theta = 2 * np.pi * np.arange(n) / n
    h = 2 * np.pi / n
    w = np.full(n, h)
    coords = np.column_stack([np.cos(theta), np.sin(theta)])
    # equator of S^1 w.r.t. {x_2 = 0}: theta in {0, pi}
    thin = np.abs(np.sin(theta)) < 1e-12
    z = np.zeros(n, bool)
    return Grid(GridKind.CIRCLE, n, coords, w, z, thin, h, circle_stiffness(n),
                np.zeros(n), angles=theta)


def _polar(n, n_theta, half):
    """Finite-volume polar grid on the unit disk or upper half-disk."""
    dr = 1.0 / n
    radii = dr * np.arange(n + 1)
    if half:
        if n_theta < 2:
            raise ValueError("half-disk needs n_theta >= 2")
        dth = np.pi / n_theta
        theta = dth * np.arange(n_theta + 1)
        ext = np.full(n_theta + 1, dth)
        ext[[0, -1]] = dth / 2  # reflecting half-cells on the diameter
    else:
        dth = 2 * np.pi / n_theta
        theta = dth * np.arange(n_theta)
        ext = np.full(n_theta, dth)
    m = theta.shape[0]
    N = 1 + n * m
    ring = lambda i: 1 + (i - 1) * m + np.arange(m)  # noqa: E731

    coords = np.zeros((N, 2))
    w = np.zeros(N)
    w[0] = 0.5 * (dr / 2) ** 2 * ext.sum()
    for i in range(1, n + 1):
        r = radii[i]
        coords[ring(i)] = np.column_stack([r * np.cos(theta), r * np.sin(theta)])
        if i < n:
            w[ring(i)] = r * dr * ext
        else:
            w[ring(i)] = 0.5 * (1.0 - (1.0 - dr / 2) ** 2) * ext

    a, b, c = [], [], []
    # centre to ring 1: face (dr/2)*ext, distance dr
    a.append(np.zeros(m, int)); b.append(ring(1)); c.append(ext / 2)
    for i in range(1, n):
        a.append(ring(i)); b.append(ring(i + 1)); c.append((radii[i] + dr / 2) * ext / dr)
    for i in range(1, n + 1):
        face = dr if i < n else dr / 2
        j = np.arange(m) if not half else np.arange(m - 1)
        jn = (j + 1) % m
        a.append(ring(i)[j]); b.append(ring(i)[jn])
        # chord-corrected: exact on the first angular mode, O(dth^2) beyond
        c.append(np.full(j.shape[0], face * dth / (radii[i] * 4 * np.sin(dth / 2) ** 2)))
    S = _edges_to_stiffness(N, np.concatenate(a), np.concatenate(b), np.concatenate(c))

    bmask = np.zeros(N, bool)
    bmask[ring(n)] = True
    bw = np.zeros(N)
    bw[ring(n)] = ext
    thin = np.zeros(N, bool)
    if half:
        thin[0] = True
        for i in range(1, n):
            thin[ring(i)[[0, -1]]] = True
    kind = GridKind.HALF_DISK_THIN if half else GridKind.DISK
    return Grid(kind, n, coords, w, bmask, thin, dr, S, bw, radii=radii, angles=theta)


def build_grid(kind, n: int, n_theta: int = None) -> Grid:
    """Build a grid of the given kind at resolution n (n >= 8).

    Interval: n nodes on [-1, 1].  Circle: n angular nodes.  Disk and
    HalfDiskThin: n radial intervals; ``n_theta`` angular intervals
    (default 2n for the disk, n for the half-disk).
    """
    kind = GridKind(kind)
    if n < 8:
        raise ValueError("resolution must be at least 8")
    if kind == GridKind.INTERVAL:
        return _interval(n)
    if kind == GridKind.CIRCLE:
        return _circle(n)
    if kind == GridKind.DISK:
        return _polar(n, n_theta or 2 * n, half=False)
    if kind == GridKind.HALF_DISK_THIN:
        return _polar(n, n_theta or n, half=True)
    raise ValueError(f"build_grid does not build {kind.value} grids; use point_grid")


def point_grid(n: int) -> Grid:
    """Euclidean R^n with unit weights and no boundary (finite-dim problems)."""
    z = np.zeros(n, bool)
    return Grid(GridKind.POINTS, n, np.eye(n), np.ones(n), z, z.copy(), 1.0,
                sp.csr_matrix((n, n)), np.zeros(n))


def laplacian(grid: Grid):
    """Discrete Laplacian -W^{-1} S (csr on ball grids, dense on the circle)."""
    S = grid.stiffness
    if sp.issparse(S):
        return -(sp.diags(1.0 / grid.weights) @ S).tocsr()
    return -S / grid.weights[:, None]


def inner(grid: Grid, f, g) -> float:
    return float(np.sum(grid.weights * f * g))


def norm(grid: Grid, f) -> float:
    return float(np.sqrt(inner(grid, f, f)))


def dirichlet(grid: Grid, f, g=None) -> float:
    """Stiffness form f @ S @ g, the discrete int grad f . grad g."""
    g = f if g is None else g
    return float(f @ (grid.stiffness @ g))
