"""Small dense convex QP solvers.

Problems have the form::

    minimize    0.5 * z' H z + f' z
    subject to  G z <= h,   lb <= z <= ub

Two exact methods are provided. Box-only problems with at most four
variables are solved by enumerating every pattern of active bounds. Anything
else goes through a dual active-set method (Goldfarb & Idnani), which starts
from the unconstrained minimum and therefore needs no feasible initial point.
The brute-force grid oracle exists for tests.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular

PSD_TOL = 1e-8
SYMMETRY_TOL = 1e-10
FEAS_TOL = 1e-10


class QpError(RuntimeError):
    """Raised when the solver cannot terminate.

    ``trace`` holds one entry per iteration with the working set size and the
    most violated constraint, which is usually enough to see where it cycled.
    """

    def __init__(self, message: str, trace: list | None = None):
        super().__init__(message)
        self.trace = trace or []


@dataclass
class QpProblem:
    H: np.ndarray
    f: np.ndarray
    G: np.ndarray | None = None
    h: np.ndarray | None = None
    lb: np.ndarray | None = None
    ub: np.ndarray | None = None

    def __post_init__(self):
        self.H = np.atleast_2d(np.asarray(self.H, dtype=float))
        self.f = np.asarray(self.f, dtype=float).reshape(-1)
        n = self.f.size
        if self.H.shape != (n, n):
            raise ValueError(f"H must be {n}x{n}, got {self.H.shape}")
        if np.max(np.abs(self.H - self.H.T), initial=0.0) > SYMMETRY_TOL * max(1.0, np.abs(self.H).max()):
            raise ValueError("H is not symmetric")
        if self.G is not None:
            self.G = np.atleast_2d(np.asarray(self.G, dtype=float))
            self.h = np.asarray(self.h, dtype=float).reshape(-1)
            if self.G.shape[1] != n or self.G.shape[0] != self.h.size:
                raise ValueError("inconsistent G/h dimensions")
        for name in ("lb", "ub"):
            v = getattr(self, name)
            if v is not None:
                v = np.asarray(v, dtype=float).reshape(-1)
                if v.size != n:
                    raise ValueError(f"{name} must have length {n}")
                setattr(self, name, v)
        if self.lb is not None and self.ub is not None and np.any(self.lb > self.ub):
            bad = int(np.argmax(self.lb > self.ub))
            raise ValueError(f"infeasible box: lb[{bad}]={self.lb[bad]} > ub[{bad}]={self.ub[bad]}")

    @property
    def n(self) -> int:
        return self.f.size

    @property
    def box_only(self) -> bool:
        return self.G is None or self.G.shape[0] == 0

    def objective(self, z) -> float:
        z = np.asarray(z, dtype=float)
        return float(0.5 * z @ self.H @ z + self.f @ z)

    def stacked(self) -> tuple[np.ndarray, np.ndarray]:
        """All constraints as rows of ``A z <= b``: G first, then finite lower
        bounds, then finite upper bounds (in variable order)."""
        rows, rhs = [], []
        if self.G is not None:
            rows.append(self.G)
            rhs.append(self.h)
        eye = np.eye(self.n)
        if self.lb is not None:
            m = np.isfinite(self.lb)
            rows.append(-eye[m])
            rhs.append(-self.lb[m])
        if self.ub is not None:
            m = np.isfinite(self.ub)
            rows.append(eye[m])
            rhs.append(self.ub[m])
        if not rows:
            return np.zeros((0, self.n)), np.zeros(0)
        return np.vstack(rows), np.concatenate(rhs)


@dataclass
class QpResult:
    z: np.ndarray
    status: str
    objective: float
    multipliers: np.ndarray
    stationarity: float = math.nan
    primal_violation: float = math.nan
    complementarity: float = math.nan
    iterations: int = 0
    active: tuple = field(default_factory=tuple)

    @property
    def ok(self) -> bool:
        return self.status == "optimal"


def kkt_residuals(problem: QpProblem, z, lam) -> tuple[float, float, float]:
    """Stationarity, primal violation and complementarity for multipliers
    ``lam`` ordered like ``problem.stacked()``."""
    A, b = problem.stacked()
    z = np.asarray(z, dtype=float)
    lam = np.asarray(lam, dtype=float)
    grad = problem.H @ z + problem.f
    if A.shape[0]:
        grad = grad + A.T @ lam
        slack = A @ z - b
        viol = float(max(0.0, slack.max()))
        comp = float(np.max(np.abs(lam * slack)))
    else:
        viol = comp = 0.0
    return float(np.max(np.abs(grad), initial=0.0)), viol, comp


def _regularized_hessian(H: np.ndarray) -> np.ndarray:
    lam_min = float(np.linalg.eigvalsh(H).min()) if H.size else 0.0
    if lam_min < -PSD_TOL * max(1.0, np.abs(H).max()):
        raise ValueError(f"H is not positive semidefinite (min eigenvalue {lam_min:.3e})")
    if lam_min < PSD_TOL:
        return H + (PSD_TOL - lam_min) * np.eye(H.shape[0])
    return H


def solve(problem: QpProblem, method: str = "auto", max_iter: int = 500) -> QpResult:
    """Solve ``problem`` exactly.

    ``method`` is ``"enumerate"``, ``"dual"`` or ``"auto"`` (enumeration for
    box-only problems with n <= 4, dual active set otherwise). An infeasible
    constraint set gives ``status == "infeasible"`` rather than an exception.
    """
    if method == "auto":
        method = "enumerate" if problem.box_only and problem.n <= 4 else "dual"
    if method not in ("enumerate", "dual"):
        raise ValueError(f"unknown method {method!r}")
    H_reg = _regularized_hessian(problem.H)
    if H_reg is not problem.H:
        problem = QpProblem(H_reg, problem.f, problem.G, problem.h, problem.lb, problem.ub)
    if method == "enumerate":
        res = enumerate_active_sets(problem)
    else:
        res = _dual_active_set(problem, max_iter=max_iter)
    if res.ok:
        res.stationarity, res.primal_violation, res.complementarity = kkt_residuals(
            problem, res.z, res.multipliers
        )
    return res


def enumerate_active_sets(problem: QpProblem) -> QpResult:
    """Exhaustive active-set enumeration.

    Every subset of at most n constraint rows is treated as a set of
    equalities; the KKT point of each subset is kept when it is primal
    feasible with nonnegative multipliers. The best such point is returned.
    Exponential in the number of rows, so only meant for tiny problems.
    """
    H = problem.H
    f = problem.f
    A, b = problem.stacked()
    n, m = problem.n, A.shape[0]
    scale = max(1.0, np.abs(H).max(), np.abs(f).max(initial=0.0))
    tol = 1e-9 * scale
    best = None
    count = 0
    for k in range(0, min(n, m) + 1):
        for subset in itertools.combinations(range(m), k):
            count += 1
            idx = list(subset)
            Aw = A[idx]
            if k:
                # lower and upper bound on one variable never both bind
                if np.linalg.matrix_rank(Aw) < k:
                    continue
            kkt = np.zeros((n + k, n + k))
            kkt[:n, :n] = H
            kkt[:n, n:] = Aw.T
            kkt[n:, :n] = Aw
            rhs = np.concatenate([-f, b[idx]])
            sol, *_ = np.linalg.lstsq(kkt, rhs, rcond=None)
            if np.max(np.abs(kkt @ sol - rhs)) > tol:
                continue
            z, lam_w = sol[:n], sol[n:]
            if np.any(lam_w < -tol):
                continue
            if m and np.any(A @ z - b > tol):
                continue
            obj = problem.objective(z)
            if best is None or obj < best[0] - 1e-14 * max(1.0, abs(obj)):
                lam = np.zeros(m)
                lam[idx] = np.maximum(lam_w, 0.0)
                best = (obj, z, lam, tuple(idx))
    if best is None:
        return QpResult(np.full(n, np.nan), "infeasible", math.nan, np.zeros(m), iterations=count)
    obj, z, lam, act = best
    return QpResult(z, "optimal", obj, lam, iterations=count, active=act)


def _dual_active_set(problem: QpProblem, max_iter: int = 500) -> QpResult:
    H = problem.H
    f = problem.f
    A, b = problem.stacked()
    n, m = problem.n, A.shape[0]

    L = np.linalg.cholesky(H)
    Linv = solve_triangular(L, np.eye(n), lower=True)
    z = -(Linv.T @ (Linv @ f))
    # Goldfarb-Idnani works with N z >= c
    N = -A
    c = -b
    row_norm = np.maximum(np.linalg.norm(N, axis=1), 1e-300)
    tol = 1e-12 * max(1.0, np.abs(b).max(initial=0.0))

    active: list[int] = []
    u = np.zeros(0)
    trace = []
    it = 0
    while True:
        s = N @ z - c
        if active:
            s[active] = np.inf
        if m == 0:
            break
        p = int(np.argmin(s / row_norm))
        if s[p] >= -tol:
            break
        n_p = N[p]
        u_plus = np.append(u, 0.0)
        while True:
            it += 1
            trace.append((it, len(active), p, float(n_p @ z - c[p])))
            if it > max_iter:
                raise QpError(f"dual active set did not converge in {max_iter} iterations", trace)
            q = len(active)
            if q:
                Q, R = np.linalg.qr(Linv @ N[active].T, mode="complete")
                R = R[:q, :q]
            else:
                Q = np.eye(n)
                R = np.zeros((0, 0))
            J = Linv.T @ Q
            d = J.T @ n_p
            step_dir = J[:, q:] @ d[q:]
            r = solve_triangular(R, d[:q]) if q else np.zeros(0)

            t1, k = np.inf, -1
            for j in range(q):
                if r[j] > 1e-14:
                    ratio = u_plus[j] / r[j]
                    if ratio < t1:
                        t1, k = ratio, j
            zn = float(step_dir @ n_p)
            if np.linalg.norm(step_dir) > 1e-14 * max(1.0, np.linalg.norm(z)) and zn > 1e-16:
                t2 = -(n_p @ z - c[p]) / zn
            else:
                t2 = np.inf
            t = min(t1, t2)
            if not np.isfinite(t):
                return QpResult(np.full(n, np.nan), "infeasible", math.nan, np.zeros(m),
                                iterations=it, active=tuple(active))
            if not np.isfinite(t2):
                u_plus[:q] -= t * r
                u_plus[q] += t
                active.pop(k)
                u_plus = np.delete(u_plus, k)
                continue
            z = z + t * step_dir
            u_plus[:q] -= t * r
            u_plus[q] += t
            if t2 <= t1:
                active.append(p)
                u = u_plus
                break
            active.pop(k)
            u_plus = np.delete(u_plus, k)

    lam = np.zeros(m)
    if active:
        lam[active] = np.maximum(u, 0.0)
    z, lam = _polish(problem, A, b, z, lam, active)
    return QpResult(z, "optimal", problem.objective(z), lam, iterations=it, active=tuple(active))


def _polish(problem, A, b, z, lam, active):
    """Re-solve the KKT system of the final working set with the unregularized
    Hessian; keep the result only if it is at least as good."""
    n, k = problem.n, len(active)
    kkt = np.zeros((n + k, n + k))
    kkt[:n, :n] = problem.H
    if k:
        Aw = A[active]
        kkt[:n, n:] = Aw.T
        kkt[n:, :n] = Aw
    rhs = np.concatenate([-problem.f, b[active]])
    sol, *_ = np.linalg.lstsq(kkt, rhs, rcond=None)
    z_new = sol[:n]
    lam_new = np.zeros_like(lam)
    if k:
        if np.any(sol[n:] < -1e-9 * max(1.0, np.abs(sol[n:]).max())):
            return z, lam
        lam_new[active] = np.maximum(sol[n:], 0.0)
    before = kkt_residuals(problem, z, lam)
    after = kkt_residuals(problem, z_new, lam_new)
    if max(after) <= max(before):
        return z_new, lam_new
    return z, lam


def brute_force_oracle(problem: QpProblem, resolution: float) -> np.ndarray:
    """Feasible grid point with the lowest objective (first one on ties).

    Needs finite bounds on every variable and n <= 4. Returns NaNs when no
    grid point is feasible.
    """
    n = problem.n
    if n > 4:
        raise ValueError("grid oracle limited to n <= 4")
    if problem.lb is None or problem.ub is None or not (
        np.all(np.isfinite(problem.lb)) and np.all(np.isfinite(problem.ub))
    ):
        raise ValueError("grid oracle needs a finite box")
    axes = []
    for lo, hi in zip(problem.lb, problem.ub):
        k = max(1, int(math.floor((hi - lo) / resolution + 1e-9)))
        ax = lo + resolution * np.arange(k + 1)
        if ax[-1] < hi - 1e-12:
            ax = np.append(ax, hi)
        axes.append(np.minimum(ax, hi))
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, n)
    vals = 0.5 * np.einsum("ij,jk,ik->i", grid, problem.H, grid) + grid @ problem.f
    if not problem.box_only:
        feas = np.all(grid @ problem.G.T <= problem.h + 1e-12, axis=1)
        if not feas.any():
            return np.full(n, np.nan)
        vals = np.where(feas, vals, np.inf)
    return grid[int(np.argmin(vals))]
