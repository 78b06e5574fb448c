"""Linear time-varying MPC for lateral path tracking.

The QP is condensed over the steering increments: z = [du_0 .. du_{Nc-1}, eps].
Increments after the control horizon are zero. The scalar slack ``eps``
softens only the lateral-position bounds; its cost is linear.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from . import qp_core
from .vehicle_model import DiscreteSS, VehicleParams, VehicleState, discretize


@dataclass(frozen=True)
class MpcConfig:
    n_p: int = 20
    n_c: int = 5
    t_s: float = 0.01
    q: tuple = (0.01, 0.001, 0.001)
    r: float = 0.1
    lam: float = 0.15
    u_max: float = 0.2
    du_max: float = 0.015
    psi_max: float = 0.4
    beta_max: float = 0.15
    psi_dot_max: float = 0.8

    def __post_init__(self):
        if not 1 <= self.n_c <= self.n_p:
            raise ValueError("need 1 <= n_c <= n_p")
        if min(*self.q, self.r, self.lam) < 0:
            raise ValueError("weights must be nonnegative")
        if not 0 < self.du_max <= self.u_max:
            raise ValueError("need 0 < du_max <= u_max")
        if self.t_s <= 0:
            raise ValueError("t_s must be positive")


@dataclass(frozen=True)
class OutputBounds:
    """Bounds on (Y, beta, psi_dot); ``emergency`` swaps the lower Y bound
    for the outer edge of the stopping lane."""

    y_min: np.ndarray
    y_max: np.ndarray
    y_esl: float | None = None
    emergency: bool = False

    def __post_init__(self):
        object.__setattr__(self, "y_min", np.asarray(self.y_min, dtype=float))
        object.__setattr__(self, "y_max", np.asarray(self.y_max, dtype=float))
        if np.any(self.lower > self.y_max):
            raise ValueError("output bounds must satisfy y_min <= y_max")

    @classmethod
    def for_road(cls, y_low: float, y_up: float, y_esl: float, cfg: MpcConfig,
                 emergency: bool = False) -> "OutputBounds":
        lo = np.array([y_low, -cfg.beta_max, -cfg.psi_dot_max])
        hi = np.array([y_up, cfg.beta_max, cfg.psi_dot_max])
        return cls(lo, hi, y_esl, emergency)

    @property
    def lower(self) -> np.ndarray:
        lo = self.y_min.copy()
        if self.emergency and self.y_esl is not None:
            lo[0] = self.y_esl
        return lo


def build_reference(path, state: VehicleState, n_p: int, t_s: float) -> np.ndarray:
    """Desired outputs (Y, beta = 0, psi_dot) at the next ``n_p`` stations.

    ``path`` needs ``sample(xs) -> (y, kappa)``; stations advance by V*T_s
    from the current X. The yaw-rate target is curvature times speed.
    """
    xs = state.x + state.v * t_s * np.arange(1, n_p + 1)
    y, kappa = path.sample(xs)
    ref = np.zeros((n_p, 3))
    ref[:, 0] = y
    ref[:, 2] = np.asarray(kappa, dtype=float) * state.v
    return ref


@dataclass(frozen=True)
class ConstantReference:
    y: float
    kappa: float = 0.0

    def sample(self, xs):
        xs = np.asarray(xs, dtype=float)
        return np.full_like(xs, self.y), np.full_like(xs, self.kappa)


@dataclass(frozen=True)
class TableReference:
    """Lateral targets already known at the stations (any ``xs`` of the
    same length is accepted; curvature by finite differences)."""

    y: np.ndarray
    kappa: np.ndarray | None = None

    def sample(self, xs):
        y = np.asarray(self.y, dtype=float)
        k = np.zeros_like(y) if self.kappa is None else np.asarray(self.kappa, dtype=float)
        return y, k


@dataclass
class Prediction:
    """Condensed prediction ``x_k = Px x0 + Pu u_prev + Pd du`` (k = 1..Np)."""

    Px: np.ndarray  # (Np, 4, 4)
    Pu: np.ndarray  # (Np, 4)
    Pd: np.ndarray  # (Np, 4, Nc)


def predict_matrices(model: DiscreteSS, n_p: int, n_c: int) -> Prediction:
    A, B = model.A, model.B[:, 0]
    Px = np.zeros((n_p, 4, 4))
    Pu = np.zeros((n_p, 4))
    Pd = np.zeros((n_p, 4, n_c))
    Xk = np.eye(4)
    Uk = np.zeros(4)
    Dk = np.zeros((4, n_c))
    for k in range(n_p):
        # u(k) = u_prev + sum_{j <= min(k, Nc-1)} du_j
        sel = np.zeros(n_c)
        sel[: min(k, n_c - 1) + 1] = 1.0
        Xk = A @ Xk
        Uk = A @ Uk + B
        Dk = A @ Dk + np.outer(B, sel)
        Px[k], Pu[k], Pd[k] = Xk, Uk, Dk
    return Prediction(Px, Pu, Pd)


def build_qp(state: VehicleState, reference: np.ndarray, model: DiscreteSS, cfg: MpcConfig,
             bounds: OutputBounds, u_prev: float = 0.0, soften_all: bool = False) -> qp_core.QpProblem:
    n_p, n_c = cfg.n_p, cfg.n_c
    nz = n_c + 1
    pred = predict_matrices(model, n_p, n_c)
    x0 = state.lateral
    free = pred.Px @ x0 + pred.Pu * u_prev  # (Np, 4)
    C = model.C
    Y_free = free @ C.T  # (Np, 3)
    Y_du = np.einsum("ij,kjl->kil", C, pred.Pd)  # (Np, 3, Nc)

    q = np.asarray(cfg.q, dtype=float)
    H = np.zeros((nz, nz))
    f = np.zeros(nz)
    err = Y_free - reference
    H[:n_c, :n_c] = 2.0 * np.einsum("kil,i,kim->lm", Y_du, q, Y_du)
    f[:n_c] = 2.0 * np.einsum("kil,i,ki->l", Y_du, q, err)
    H[:n_c, :n_c] += 2.0 * cfg.r * np.eye(n_c)
    f[n_c] = cfg.lam
    # the 1/2 in the QP form absorbs the factor 2 above
    lb = np.concatenate([np.full(n_c, -cfg.du_max), [0.0]])
    ub = np.concatenate([np.full(n_c, cfg.du_max), [np.inf]])

    tril = np.tril(np.ones((n_c, n_c)))
    acc = np.zeros((n_c, nz))
    acc[:, :n_c] = tril
    blocks = [np.stack([acc, -acc], axis=1).reshape(-1, nz)]
    rhs = [np.repeat([[cfg.u_max - u_prev, cfg.u_max + u_prev]], n_c, axis=0).ravel()]

    lo, hi = bounds.lower, bounds.y_max
    soft = np.array([True, soften_all, soften_all])
    up = np.zeros((n_p, 3, nz))
    up[:, :, :n_c] = Y_du
    dn = -up
    up[:, soft, n_c] = -1.0
    dn[:, soft, n_c] = -1.0
    # heading bound from the state prediction
    hu = np.zeros((n_p, 1, nz))
    hu[:, 0, :n_c] = pred.Pd[:, 2]
    hd = -hu
    if soften_all:
        hu[:, 0, n_c] = -1.0
        hd[:, 0, n_c] = -1.0
    rows_k = np.concatenate([np.stack([up, dn], axis=2).reshape(n_p, 6, nz), hu, hd], axis=1)
    rhs_k = np.concatenate([
        np.stack([hi - Y_free, Y_free - lo], axis=2).reshape(n_p, 6),
        (cfg.psi_max - free[:, 2])[:, None],
        (cfg.psi_max + free[:, 2])[:, None],
    ], axis=1)
    blocks.append(rows_k.reshape(-1, nz))
    rhs.append(rhs_k.ravel())

    G = np.concatenate(blocks)
    h = np.concatenate(rhs)
    G, h = _prune_redundant(G, h, lb, ub)
    return qp_core.QpProblem(H, f, G if len(h) else None, h if len(h) else None, lb, ub)


def _prune_redundant(G, h, lb, ub):
    """Drop rows that no point of the box can violate. The slack column only
    ever loosens a row (coefficient <= 0 with eps >= 0), so it is ignored
    when bounding the row maximum."""
    lo = lb.copy()
    hi = ub.copy()
    hi[~np.isfinite(hi)] = 0.0  # eps at its lower bound maximizes a loosened row
    lo[~np.isfinite(lo)] = 0.0
    worst = np.where(G > 0, G * hi, G * lo).sum(axis=1)
    keep = worst > h - 1e-12
    return G[keep], h[keep]


@dataclass
class MpcDiagnostics:
    cost: float
    slack: float
    active: int
    iterations: int
    softened: bool = False


@dataclass
class MpcController:
    params: VehicleParams = field(default_factory=VehicleParams)
    cfg: MpcConfig = field(default_factory=MpcConfig)
    u_prev: float = 0.0

    def solve_step(self, problem: qp_core.QpProblem) -> tuple[float, MpcDiagnostics]:
        res = qp_core.solve(problem, method="dual")
        if not res.ok:
            raise qp_core.QpError(f"MPC QP returned status {res.status}")
        du0 = float(np.clip(res.z[0], -self.cfg.du_max, self.cfg.du_max))
        delta = float(np.clip(self.u_prev + du0, -self.cfg.u_max, self.cfg.u_max))
        # u_prev + du can round so that the recomputed increment exceeds du_max
        while abs(delta - self.u_prev) > self.cfg.du_max:
            delta = float(np.nextafter(delta, self.u_prev))
        diag = MpcDiagnostics(res.objective, float(res.z[-1]), len(res.active), res.iterations)
        return delta, diag

    def control(self, state: VehicleState, reference: np.ndarray, bounds: OutputBounds):
        """One receding-horizon step; updates and returns the steering command."""
        model = discretize(self.params, state.v, self.cfg.t_s)
        prob = build_qp(state, reference, model, self.cfg, bounds, self.u_prev)
        softened = False
        try:
            delta, diag = self.solve_step(prob)
        except qp_core.QpError:
            prob = build_qp(state, reference, model, self.cfg, bounds, self.u_prev, soften_all=True)
            delta, diag = self.solve_step(prob)
            softened = True
        diag.softened = softened
        self.u_prev = delta
        return delta, diag


@dataclass(frozen=True)
class PursuitReference:
    """Straight chain from the current position to a lookahead point on
    ``path``; the controller then tracks a heading instead of an offset,
    which keeps the short prediction horizon stable.

    With ``prev_slope`` and ``max_slope_step`` the chain slope may change by
    at most that much per call, so a jump of the path turns into a ramp.
    """

    path: object
    state: VehicleState
    lookahead_time: float = 1.0
    lookahead_min: float = 5.0
    prev_slope: float | None = None
    max_slope_step: float | None = None

    @property
    def lookahead(self) -> float:
        return max(self.lookahead_min, self.state.v * self.lookahead_time)

    @cached_property
    def slope(self) -> float:
        ld = self.lookahead
        y_t, _ = self.path.sample(np.array([self.state.x + ld]))
        m = (float(y_t[0]) - self.state.y) / ld
        if self.prev_slope is not None and self.max_slope_step is not None:
            m = float(np.clip(m, self.prev_slope - self.max_slope_step,
                              self.prev_slope + self.max_slope_step))
        return m

    def sample(self, xs):
        xs = np.asarray(xs, dtype=float)
        y = self.state.y + self.slope * (np.clip(xs - self.state.x, 0.0, None))
        _, kappa = self.path.sample(xs)
        return y, kappa
