"""Bound-constrained convex QP used by the stationary solves and every flow step.

    minimize 1/2 x.H.x + c.x   s.t.  x_P = p,  x_j >= 0 on sign nodes.

Two backends: a primal-dual active set iteration (finite termination on
M-matrices, exact KKT at exit) and projected SOR.  The active-set backend
caches factorizations keyed by the active set, which is what makes long
flows cheap: the contact set changes rarely from step to step.
"""

from collections import OrderedDict
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla


class SolverError(RuntimeError):
    """Inner solver failed to converge; ``residual`` holds the last KKT residual."""

    def __init__(self, msg, residual=np.nan, x=None):
        super().__init__(msg)
        self.residual = residual
        self.x = x


@dataclass
class QPResult:
    x: np.ndarray
    active: np.ndarray  # boolean over all nodes
    iterations: int
    method: str


class BoundQP:
    def __init__(self, H, pinned_mask, sign_mask, cache_size: int = 16):
        self.sparse = sp.issparse(H)
        self.H = H.tocsr() if self.sparse else np.asarray(H, dtype=float)
        self.n = self.H.shape[0]
        self.pinned = np.asarray(pinned_mask, bool)
        self.free = np.flatnonzero(~self.pinned)
        self.pin = np.flatnonzero(self.pinned)
        self.sign_f = np.asarray(sign_mask, bool)[self.free]
        if self.sparse:
            Hf = self.H[self.free]
            self.H_FF = Hf[:, self.free].tocsc()
            self.H_FP = Hf[:, self.pin].tocsr()
        else:
            self.H_FF = self.H[np.ix_(self.free, self.free)]
            self.H_FP = self.H[np.ix_(self.free, self.pin)]
        self._cache = OrderedDict()
        self._cache_size = cache_size

    def _factor(self, inactive):
        key = inactive.tobytes()
        hit = self._cache.get(key)
        if hit is not None:
            self._cache.move_to_end(key)
            return hit
        idx = np.flatnonzero(inactive)
        if self.sparse:
            M = self.H_FF[idx][:, idx].tocsc()
            lu = spla.splu(M)
            solve = lu.solve
        else:
            M = self.H_FF[np.ix_(idx, idx)]
            try:
                cf = sla.cho_factor(M)
                solve = lambda r, cf=cf: sla.cho_solve(cf, r)  # noqa: E731
            except np.linalg.LinAlgError:
                lf = sla.lu_factor(M)
                solve = lambda r, lf=lf: sla.lu_solve(lf, r)  # noqa: E731
        self._cache[key] = (idx, solve)
        if len(self._cache) > self._cache_size:
            self._cache.popitem(last=False)
        return idx, solve

    def _reduced_c(self, c, pinned_values):
        cf = np.asarray(c, dtype=float)[self.free]
        if self.pin.size:
            cf = cf + self.H_FP @ pinned_values[self.pin]
        return cf

    def _assemble(self, xf, pinned_values):
        x = np.zeros(self.n)
        x[self.free] = xf
        x[self.pin] = pinned_values[self.pin]
        return x

    def solve(self, c, pinned_values, x0=None, method="pdas", maxit=200, tol=1e-10,
              omega=1.5, max_sweeps=200000):
        pinned_values = np.asarray(pinned_values, dtype=float)
        cf = self._reduced_c(c, pinned_values)
        if method == "pdas":
            try:
                return self._pdas(cf, pinned_values, x0, maxit)
            except SolverError:
                # cycling on a non-M-matrix: settle the active set by pSOR, then polish
                r = self._psor(cf, pinned_values, x0, omega, tol, max_sweeps)
                return self._pdas(cf, pinned_values, r.x, maxit)
        if method == "psor":
            return self._psor(cf, pinned_values, x0, omega, tol, max_sweeps)
        raise ValueError(f"unknown method {method!r}")

    def _pdas(self, cf, pinned_values, x0, maxit):
        sign = self.sign_f
        nf = self.free.size
        if x0 is not None:
            active = sign & (np.asarray(x0)[self.free] <= 0)
        else:
            active = np.zeros(nf, bool)
        scale = np.max(np.abs(cf), initial=0.0) + 1e-300
        seen = set()
        for it in range(1, maxit + 1):
            xf = np.zeros(nf)
            inactive = ~active
            if inactive.any():
                idx, solve = self._factor(inactive)
                xf[idx] = solve(-cf[idx])
            mu = self.H_FF @ xf + cf
            xs = np.max(np.abs(xf), initial=0.0)
            new = sign & ((active & (mu > -1e-13 * scale)) | (~active & (xf < -1e-14 * (1 + xs))))
            if np.array_equal(new, active):
                xf[sign] = np.maximum(xf[sign], 0.0)
                full_active = np.zeros(self.n, bool)
                full_active[self.free] = active
                return QPResult(self._assemble(xf, pinned_values), full_active, it, "pdas")
            key = new.tobytes()
            if key in seen:
                raise SolverError("active-set iteration cycled")
            seen.add(key)
            active = new
        raise SolverError("active-set iteration hit its cap")

    def _psor(self, cf, pinned_values, x0, omega, tol, max_sweeps):
        nf = self.free.size
        xf = np.zeros(nf) if x0 is None else np.array(np.asarray(x0)[self.free], dtype=float)
        sign = self.sign_f
        xf[sign] = np.maximum(xf[sign], 0.0)
        if self.sparse:
            Hc = self.H_FF.tocsr()
            indptr, indices, data = Hc.indptr, Hc.indices, Hc.data
            diag = Hc.diagonal()
            rows = [(indices[indptr[i]:indptr[i + 1]], data[indptr[i]:indptr[i + 1]])
                    for i in range(nf)]
            row_dot = lambda i: float(rows[i][1] @ xf[rows[i][0]])  # noqa: E731
            matvec = lambda: Hc @ xf  # noqa: E731
        else:
            Hd = self.H_FF
            diag = np.diag(Hd).copy()
            row_dot = lambda i: float(Hd[i] @ xf)  # noqa: E731
            matvec = lambda: Hd @ xf  # noqa: E731
        lower = np.where(sign, 0.0, -np.inf)
        scale = np.max(np.abs(cf), initial=0.0) + 1e-300
        res = np.inf
        for sweep in range(1, max_sweeps + 1):
            for i in range(nf):
                r = row_dot(i) + cf[i]
                xf[i] = max(lower[i], xf[i] - omega * r / diag[i])
            if sweep % 10 == 0:
                g = matvec() + cf
                # projected-gradient residual, relative to the data scale
                pg = np.where(sign & (xf <= 0), np.minimum(g, 0.0), g)
                res = np.max(np.abs(pg)) / scale
                if res <= tol:
                    break
        else:
            raise SolverError("projected SOR hit its sweep cap", residual=res,
                              x=self._assemble(xf, pinned_values))
        full_active = np.zeros(self.n, bool)
        full_active[self.free] = sign & (xf <= 0)
        return QPResult(self._assemble(xf, pinned_values), full_active, sweep, "psor")
