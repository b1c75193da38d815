"""Dense primal-dual interior point method (Mehrotra predictor-corrector) for small QPs.

Solves::

    minimize    0.5 x'Px + q'x
    subject to  A x  = b      (multipliers y)
                G x <= h      (multipliers z >= 0)

with the Lagrangian ``0.5 x'Px + q'x + y'(Ax - b) + z'(Gx - h)``. Meant for the
desk-scale problems of the enumeration oracle; everything is dense numpy.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np


@dataclass
class IPMResult:
    x: np.ndarray
    y: np.ndarray
    z: np.ndarray
    s: np.ndarray
    status: str  # "optimal" | "max_iter" | "numerical"
    iterations: int
    objective: float


def _max_step(v: np.ndarray, dv: np.ndarray) -> float:
    neg = dv < 0
    if not np.any(neg):
        return 1.0
    return float(min(1.0, np.min(-v[neg] / dv[neg])))


def solve_qp(P, q, A, b, G, h, *, tol: float = 1e-9, max_iter: int = 100) -> IPMResult:
    # infeasible problems drive iterates to overflow; that surfaces as a non-optimal status
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        return _solve_qp(P, q, A, b, G, h, tol, max_iter)


def _solve_qp(P, q, A, b, G, h, tol, max_iter) -> IPMResult:
    P = np.asarray(P, dtype=float)
    q = np.asarray(q, dtype=float)
    n = q.size
    A = np.asarray(A, dtype=float).reshape(-1, n)
    b = np.asarray(b, dtype=float).reshape(-1)
    G = np.asarray(G, dtype=float).reshape(-1, n)
    h = np.asarray(h, dtype=float).reshape(-1)
    p, m = A.shape[0], G.shape[0]

    x = np.zeros(n)
    y = np.zeros(p)
    s = np.maximum(h - G @ x, 1.0)
    z = np.ones(m)

    scale_q = 1.0 + np.max(np.abs(q), initial=0.0)
    scale_b = 1.0 + np.max(np.abs(b), initial=0.0)
    scale_h = 1.0 + np.max(np.abs(h), initial=0.0)
    reg = 1e-11
    # augmented system [[P, A', G'], [A, 0, 0], [G, 0, -S/Z]]; the normal-equation form
    # P + G'WG loses the small-weight directions once active bounds carry weights near 1e16
    kkt = np.zeros((n + p + m, n + p + m))
    kkt[:n, :n] = P + reg * np.eye(n)
    kkt[n:n + p, :n] = A
    kkt[:n, n:n + p] = A.T
    kkt[n:n + p, n:n + p] = -reg * np.eye(p)
    kkt[n + p:, :n] = G
    kkt[:n, n + p:] = G.T
    diag_idx = np.arange(n + p, n + p + m)

    status = "max_iter"
    it = 0
    for it in range(1, max_iter + 1):
        r_d = P @ x + q + A.T @ y + G.T @ z
        r_p = A @ x - b
        r_g = G @ x + s - h
        mu = float(s @ z) / m if m else 0.0
        obj = 0.5 * x @ P @ x + q @ x
        if (np.max(np.abs(r_d), initial=0.0) <= tol * scale_q
                and np.max(np.abs(r_p), initial=0.0) <= tol * scale_b
                and np.max(np.abs(r_g), initial=0.0) <= tol * scale_h
                and mu * m <= tol * (1.0 + abs(obj))):
            status = "optimal"
            break

        kkt[diag_idx, diag_idx] = -s / z
        try:
            lu = _Factor(kkt)
        except np.linalg.LinAlgError:
            status = "numerical"
            break

        def newton(r_sz):
            # Z ds + S dz = -r_sz  =>  G dx - (S/Z) dz = -r_g + r_sz / z
            rhs = np.concatenate([-r_d, -r_p, -r_g + r_sz / z])
            if not np.all(np.isfinite(rhs)):
                raise np.linalg.LinAlgError("non-finite Newton right-hand side")
            sol = lu.solve(rhs)
            for _ in range(2):
                sol = sol + lu.solve(rhs - kkt @ sol)
            dx, dy, dz = sol[:n], sol[n:n + p], sol[n + p:]
            ds = (-r_sz - s * dz) / z
            return dx, dy, ds, dz

        try:
            dx_a, dy_a, ds_a, dz_a = newton(s * z)
            a_aff = min(_max_step(s, ds_a), _max_step(z, dz_a))
            mu_aff = float((s + a_aff * ds_a) @ (z + a_aff * dz_a)) / m if m else 0.0
            sigma = (mu_aff / mu) ** 3 if mu > 0 else 0.0
            dx, dy, ds, dz = newton(s * z + ds_a * dz_a - sigma * mu)
        except np.linalg.LinAlgError:
            status = "numerical"
            break
        alpha = min(1.0, 0.99 * min(_max_step(s, ds), _max_step(z, dz)))
        x = x + alpha * dx
        y = y + alpha * dy
        s = s + alpha * ds
        z = z + alpha * dz
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(z))):
            status = "numerical"
            break

    obj = float(0.5 * x @ P @ x + q @ x)
    return IPMResult(x=x, y=y, z=z, s=s, status=status, iterations=it, objective=obj)


def _ruiz(M: np.ndarray, sweeps: int = 8) -> np.ndarray:
    """Symmetric equilibration: returns d with diag(d) M diag(d) having unit-ish row norms."""
    d = np.ones(M.shape[0])
    for _ in range(sweeps):
        norms = np.max(np.abs(M * d[:, None] * d[None, :]), axis=1)
        norms[norms == 0.0] = 1.0
        d = d / np.sqrt(norms)
    return d


class _Factor:
    # late iterations put weights near 1e16 on active bounds; equilibrate before LU
    def __init__(self, M):
        import scipy.linalg

        self._d = _ruiz(M)
        scaled = M * self._d[:, None] * self._d[None, :]
        if not np.all(np.isfinite(scaled)):
            raise np.linalg.LinAlgError("non-finite KKT matrix")
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", scipy.linalg.LinAlgWarning)
            self._lu = scipy.linalg.lu_factor(scaled, check_finite=False)
        if not np.all(np.isfinite(self._lu[0])) or np.min(np.abs(np.diag(self._lu[0]))) == 0.0:
            raise np.linalg.LinAlgError("singular KKT matrix")

    def solve(self, rhs):
        import scipy.linalg

        b = self._d * rhs
        if not np.all(np.isfinite(b)):
            raise np.linalg.LinAlgError("non-finite right-hand side")
        return self._d * scipy.linalg.lu_solve(self._lu, b, check_finite=False)
