"""Policy iteration on 1-D/2-D grids for stationary and finite-horizon
dynamic-programming equations driven by jump-diffusion generators.

The discrete operator mirrors the continuous one term by term: upwind first
differences keyed to the sign of the total first-order coefficient (drift
net of the jump compensator), central second differences, and the nonlocal
part assembled from measure atoms or quadrature cells through multilinear
interpolation. Values requested outside the box come from per-axis
polynomial tail extensions, the natural boundary treatment for value
functions of polynomial growth; the same extension weights serve both the
matrix assembly and point evaluation, so the solve and the readout agree.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.linalg import lu_factor, lu_solve

from .measures import Action, _support_points, first_moment, validate_Mp

__all__ = [
    "Grid",
    "ValueField",
    "HJBProblem",
    "PolicyTable",
    "ConvergenceReport",
    "FiniteHorizonSolution",
    "SolverError",
    "SchemeWarning",
    "policy_evaluation",
    "policy_improvement",
    "solve_stationary",
    "solve_finite_horizon",
    "dpp_residual",
    "dpp_report",
    "interior_mask",
]

log = logging.getLogger("jumpctl.hjb")

DENSE_NODE_LIMIT = 2048


class SolverError(RuntimeError):
    """Linear system singular, ill conditioned, or iteration stalled."""


class SchemeWarning(UserWarning):
    """The assembled stencil has monotonicity-violating off-diagonal signs."""


# ---------------------------------------------------------------------------
# grid


@dataclass(frozen=True, eq=False)
class Grid:
    """Uniform tensor grid in one or two dimensions."""

    lo: tuple
    hi: tuple
    num: tuple

    def __post_init__(self):
        lo = tuple(float(v) for v in np.atleast_1d(np.asarray(self.lo, float)))
        hi = tuple(float(v) for v in np.atleast_1d(np.asarray(self.hi, float)))
        num = tuple(int(v) for v in np.atleast_1d(np.asarray(self.num)))
        if not len(lo) == len(hi) == len(num):
            raise ValueError("lo/hi/num must agree in length")
        if len(lo) not in (1, 2):
            raise ValueError("only 1-D and 2-D grids are supported")
        for a, b, n in zip(lo, hi, num):
            if not a < b:
                raise ValueError("every axis needs lo < hi")
            if n < 16:
                raise ValueError("every axis needs at least 16 nodes")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)
        object.__setattr__(self, "num", num)
        object.__setattr__(
            self, "axes", tuple(np.linspace(a, b, n) for a, b, n in zip(lo, hi, num))
        )
        object.__setattr__(
            self, "h", tuple((b - a) / (n - 1) for a, b, n in zip(lo, hi, num))
        )

    @classmethod
    def regular(cls, lo, hi, num) -> "Grid":
        return cls(lo=lo, hi=hi, num=num)

    @property
    def dim(self) -> int:
        return len(self.num)

    @property
    def shape(self) -> tuple:
        return self.num

    @property
    def n_nodes(self) -> int:
        return int(np.prod(self.num))

    def nodes(self) -> np.ndarray:
        """All node coordinates, shape (n_nodes, dim), C order."""
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    def contains(self, pts: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(pts)
        ok = np.ones(pts.shape[0], dtype=bool)
        for k in range(self.dim):
            ok &= (pts[:, k] >= self.lo[k]) & (pts[:, k] <= self.hi[k])
        return ok

    def matches(self, other: "Grid") -> bool:
        return self.lo == other.lo and self.hi == other.hi and self.num == other.num


def interior_mask(grid: Grid, pad: int = 1) -> np.ndarray:
    """Boolean mask (flat) of nodes at least ``pad`` layers from the boundary."""
    mask = np.ones(grid.shape, dtype=bool)
    for k in range(grid.dim):
        sl = [slice(None)] * grid.dim
        sl[k] = slice(0, pad)
        mask[tuple(sl)] = False
        sl[k] = slice(grid.num[k] - pad, grid.num[k])
        mask[tuple(sl)] = False
    return mask.ravel()


def _interp_inside(grid: Grid, pts: np.ndarray):
    """Multilinear weights for in-box points: (cols (m, 2^dim), wts)."""
    m = pts.shape[0]
    i0s, fracs = [], []
    for k in range(grid.dim):
        t = (pts[:, k] - grid.lo[k]) / grid.h[k]
        i0 = np.clip(np.floor(t).astype(int), 0, grid.num[k] - 2)
        i0s.append(i0)
        fracs.append(np.clip(t - i0, 0.0, 1.0))
    if grid.dim == 1:
        cols = np.stack([i0s[0], i0s[0] + 1], axis=1)
        wts = np.stack([1.0 - fracs[0], fracs[0]], axis=1)
        return cols, wts
    n1 = grid.num[1]
    cols = np.empty((m, 4), dtype=int)
    wts = np.empty((m, 4))
    c = 0
    for di in (0, 1):
        wi = fracs[0] if di else 1.0 - fracs[0]
        for dj in (0, 1):
            wj = fracs[1] if dj else 1.0 - fracs[1]
            cols[:, c] = (i0s[0] + di) * n1 + (i0s[1] + dj)
            wts[:, c] = wi * wj
            c += 1
    return cols, wts


class _TailBasis:
    """Per-(axis, side) polynomial least-squares extension of the outer bands.

    The band holds max(q_growth + 1, 10% of the axis) nodes; the fit degree
    is capped by q_growth. weights() turns an off-grid coordinate into value
    weights over the band nodes, reused verbatim by assembly ghost rows and
    by ValueField evaluation.
    """

    def __init__(self, grid: Grid, q_growth: int):
        if q_growth < 0:
            raise ValueError("q_growth must be a nonnegative integer")
        self.grid = grid
        self.q_growth = int(q_growth)
        self.band, self.center, self.halfw = {}, {}, {}
        self.pinv, self.vander, self.degree = {}, {}, {}
        self._corner_warned = False
        for axis in range(grid.dim):
            n = grid.num[axis]
            m = min(n, max(self.q_growth + 1, int(np.ceil(0.10 * n))))
            for side in (0, 1):
                key = (axis, side)
                sel = np.arange(m) if side == 0 else np.arange(n - m, n)
                t = grid.axes[axis][sel]
                tc = float(t.mean())
                tw = max(float(t.max() - tc), grid.h[axis])
                d = min(self.q_growth, m - 1)
                V = np.polynomial.polynomial.polyvander((t - tc) / tw, d)
                self.band[key] = sel
                self.center[key], self.halfw[key] = tc, tw
                self.vander[key] = V
                self.pinv[key] = np.linalg.pinv(V)
                self.degree[key] = d

    def weights(self, axis: int, side: int, coords) -> np.ndarray:
        """(k, band) value weights at off-grid axis coordinates."""
        key = (axis, side)
        s = (np.atleast_1d(np.asarray(coords, float)) - self.center[key]) / self.halfw[key]
        V = np.polynomial.polynomial.polyvander(s, self.degree[key])
        return V @ self.pinv[key]

    def residual(self, values: np.ndarray) -> float:
        vals = np.asarray(values, float).reshape(self.grid.shape)
        worst = 0.0
        for key, sel in self.band.items():
            axis, _ = key
            band_vals = np.moveaxis(np.take(vals, sel, axis=axis), axis, 0)
            flat = band_vals.reshape(len(sel), -1)
            fit = self.vander[key] @ (self.pinv[key] @ flat)
            worst = max(worst, float(np.abs(fit - flat).max()))
        return worst

    def exterior_weights(self, pt: np.ndarray):
        """Flat-index value weights for one out-of-box point."""
        grid = self.grid
        pt = np.atleast_1d(np.asarray(pt, float))
        excess = np.zeros(grid.dim)
        for k in range(grid.dim):
            if pt[k] < grid.lo[k]:
                excess[k] = (grid.lo[k] - pt[k]) / grid.h[k]
            elif pt[k] > grid.hi[k]:
                excess[k] = (pt[k] - grid.hi[k]) / grid.h[k]
        if not np.any(excess > 0):
            raise ValueError("point is inside the box")
        axis = int(np.argmax(excess))
        side = 0 if pt[axis] < grid.lo[axis] else 1
        w_axis = self.weights(axis, side, pt[axis])[0]
        sel = self.band[(axis, side)]
        if grid.dim == 1:
            return sel.copy(), w_axis
        tr = 1 - axis
        tz = float(np.clip(pt[tr], grid.lo[tr], grid.hi[tr]))
        if tz != pt[tr] and not self._corner_warned:
            self._corner_warned = True
            warnings.warn(
                "corner extrapolation clamps the transverse coordinate",
                RuntimeWarning,
                stacklevel=3,
            )
        t = (tz - grid.lo[tr]) / grid.h[tr]
        j0 = int(np.clip(np.floor(t), 0, grid.num[tr] - 2))
        th = float(np.clip(t - j0, 0.0, 1.0))
        n1 = grid.num[1]
        m = len(sel)
        cols = np.empty(2 * m, dtype=int)
        wts = np.empty(2 * m)
        for r, (jj, wj) in enumerate(((j0, 1.0 - th), (j0 + 1, th))):
            if axis == 0:
                cols[r * m : (r + 1) * m] = sel * n1 + jj
            else:
                cols[r * m : (r + 1) * m] = jj * n1 + sel
            wts[r * m : (r + 1) * m] = w_axis * wj
        return cols, wts


# ---------------------------------------------------------------------------
# fields


@dataclass(frozen=True, eq=False)
class ValueField:
    """Node values plus a polynomial tail extension of declared degree.

    Evaluation inside the box is multilinear; outside, the per-axis tail
    fit extrapolates. ``tail_residual`` reports how well the outer bands
    are described by the degree-``q_growth`` fit.
    """

    grid: Grid
    values: np.ndarray
    q_growth: int = 2
    nonneg: bool = False

    def __post_init__(self):
        vals = np.asarray(self.values, float).reshape(self.grid.shape)
        if not np.all(np.isfinite(vals)):
            raise ValueError("field values must be finite")
        scale = max(1.0, float(np.abs(vals).max()))
        if self.nonneg and float(vals.min()) < -1e-8 * scale:
            raise ValueError("field flagged nonnegative has negative entries")
        object.__setattr__(self, "values", vals)
        tails = _TailBasis(self.grid, int(self.q_growth))
        object.__setattr__(self, "_tails", tails)
        object.__setattr__(self, "tail_residual", tails.residual(vals))

    @property
    def tail_degree(self) -> int:
        return max(self._tails.degree.values())

    def _as_points(self, x):
        x = np.asarray(x, float)
        if self.grid.dim == 1:
            if x.ndim == 0:
                return x.reshape(1, 1), True
            return x.reshape(-1, 1), False
        if x.ndim == 1:
            return x.reshape(1, 2), True
        return x.reshape(-1, 2), False

    def value(self, x):
        """Evaluate at point(s); scalar in, scalar out."""
        pts, single = self._as_points(x)
        out = np.empty(pts.shape[0])
        flat = self.values.ravel()
        inside = self.grid.contains(pts)
        if inside.any():
            cols, wts = _interp_inside(self.grid, pts[inside])
            out[inside] = np.sum(flat[cols] * wts, axis=1)
        for i in np.nonzero(~inside)[0]:
            cols, wts = self._tails.exterior_weights(pts[i])
            out[i] = flat[cols] @ wts
        return float(out[0]) if single else out


# ---------------------------------------------------------------------------
# problems and policies


@dataclass(frozen=True, eq=False)
class HJBProblem:
    """Discounted control problem over a declared finite action family.

    Exactly one of two action descriptions must be given: ``actions``, a
    list whose entries are Action instances or callables x -> Action, or a
    product family ``sigma_nu_pairs`` x ``mu_lattice`` (per-axis uniform
    drift lattices, refined locally by a quadratic fit during improvement).

    ``f(x, a)`` and ``q(x, a)`` receive x as an (m,) array in 1-D or an
    (m, 2) array in 2-D and must broadcast to (m,); constants are accepted.
    ``delta_q``/``b_q`` are the declared discount bounds, enforced on every
    evaluation.
    """

    f: object
    q: object
    delta_q: float
    b_q: float
    actions: tuple = ()
    sigma_nu_pairs: tuple = ()
    mu_lattice: object = None
    u: object = None
    p: float = 2.0
    q_growth: int = 2

    def __post_init__(self):
        if not 0.0 < self.delta_q <= self.b_q:
            raise ValueError("need 0 < delta_q <= b_q")
        has_list = len(self.actions) > 0
        has_family = len(self.sigma_nu_pairs) > 0 or self.mu_lattice is not None
        if has_list == has_family:
            raise ValueError(
                "provide either an action list or a (sigma, nu) family with a drift lattice"
            )
        if has_family:
            if len(self.sigma_nu_pairs) == 0 or self.mu_lattice is None:
                raise ValueError("product mode needs sigma_nu_pairs and mu_lattice")
            pairs = []
            for sigma, nu in self.sigma_nu_pairs:
                sigma = np.asarray(sigma, float)
                if sigma.ndim == 0:
                    sigma = sigma.reshape(1, 1)
                if not validate_Mp(nu, max(2.0, self.p)):
                    raise ValueError("family measure fails the declared moment order")
                pairs.append((sigma, nu))
            lat = self.mu_lattice
            if isinstance(lat, np.ndarray) or np.isscalar(lat[0]):
                lat = (np.asarray(lat, float),)
            lat = tuple(np.asarray(ax, float) for ax in lat)
            for ax in lat:
                if ax.ndim != 1 or ax.size < 2:
                    raise ValueError("each drift lattice axis needs >= 2 points")
                d = np.diff(ax)
                if not np.allclose(d, d[0], rtol=1e-10, atol=1e-12 * max(1.0, np.abs(ax).max())):
                    raise ValueError("drift lattice axes must be uniformly spaced")
            object.__setattr__(self, "sigma_nu_pairs", tuple(pairs))
            object.__setattr__(self, "mu_lattice", lat)
        else:
            for entry in self.actions:
                if not (isinstance(entry, Action) or callable(entry)):
                    raise TypeError("action entries must be Action instances or callables")
            object.__setattr__(self, "actions", tuple(self.actions))

    @property
    def mode(self) -> str:
        return "list" if len(self.actions) > 0 else "product"

    @property
    def n_candidates(self) -> int:
        if self.mode == "list":
            return len(self.actions)
        return len(self.sigma_nu_pairs)


@dataclass(frozen=True, eq=False)
class PolicyTable:
    """Per-node chosen candidate index, plus the refined drift in product mode."""

    grid: Grid
    action_index: np.ndarray
    mu: np.ndarray = None

    def __post_init__(self):
        idx = np.asarray(self.action_index, dtype=int).reshape(-1)
        if idx.shape[0] != self.grid.n_nodes:
            raise ValueError("action_index length must equal the node count")
        if np.any(idx < 0):
            raise ValueError("action indices must be nonnegative")
        object.__setattr__(self, "action_index", idx)
        if self.mu is not None:
            mu = np.asarray(self.mu, float).reshape(self.grid.n_nodes, self.grid.dim)
            object.__setattr__(self, "mu", mu)

    def same_as(self, other) -> bool:
        if other is None or not np.array_equal(self.action_index, other.action_index):
            return False
        if (self.mu is None) != (other.mu is None):
            return False
        return self.mu is None or bool(np.allclose(self.mu, other.mu, rtol=0.0, atol=1e-13))


@dataclass
class ConvergenceReport:
    iterations: int
    deltas: list
    residual: float
    max_pointwise_increase: float
    converged: bool
    messages: list = field(default_factory=list)


@dataclass(frozen=True, eq=False)
class FiniteHorizonSolution:
    """Backward-in-time value slices; times[0] = 0, times[-1] = T."""

    times: np.ndarray
    values: np.ndarray
    grid: Grid
    q_growth: int

    def field(self, k: int) -> ValueField:
        return ValueField(grid=self.grid, values=self.values[k], q_growth=self.q_growth)

    @property
    def initial(self) -> ValueField:
        return self.field(0)


# ---------------------------------------------------------------------------
# evaluation helpers


def _resolve_u(prob: HJBProblem, dim: int) -> np.ndarray:
    if prob.u is None:
        return np.zeros(dim)
    u = np.atleast_1d(np.asarray(prob.u, float))
    if u.shape != (dim,):
        raise ValueError("u has wrong dimension for this grid")
    return u


def _x_for_eval(grid: Grid, pts: np.ndarray):
    return pts[:, 0] if grid.dim == 1 else pts


def _eval_xa(fn, x_batch, a, m: int) -> np.ndarray:
    if not callable(fn):
        return np.full(m, float(fn))
    out = np.asarray(fn(x_batch, a), float)
    if out.ndim == 0:
        return np.full(m, float(out))
    return out.reshape(m)


def _eval_xa_scalar(fn, grid: Grid, x: np.ndarray, a) -> float:
    if not callable(fn):
        return float(fn)
    xb = np.asarray([x[0]]) if grid.dim == 1 else x.reshape(1, 2)
    return float(np.asarray(fn(xb, a), float).reshape(-1)[0])


def _node_action(prob: HJBProblem, pol: PolicyTable, i: int, x: np.ndarray) -> Action:
    j = int(pol.action_index[i])
    if prob.mode == "list":
        if j >= len(prob.actions):
            raise ValueError("policy index outside the declared action set")
        entry = prob.actions[j]
        if isinstance(entry, Action):
            return entry
        a = entry(float(x[0]) if len(x) == 1 else x.copy())
        if not isinstance(a, Action):
            raise TypeError("action callables must return an Action")
        return a
    if j >= len(prob.sigma_nu_pairs):
        raise ValueError("policy index outside the declared family")
    sigma, nu = prob.sigma_nu_pairs[j]
    return Action(sigma=sigma, nu=nu, mu=pol.mu[i])


def _diffusion_matrix(a: Action) -> np.ndarray:
    D = a.sigma @ a.sigma.T
    small = getattr(a.nu, "small_jump_cov", None)
    if small is not None:
        D = D + np.atleast_2d(np.asarray(small, float))
    return D


def _check_cost_bounds(prob: HJBProblem, qvec: np.ndarray, fvec: np.ndarray):
    if fvec.min() < -1e-12 * max(1.0, np.abs(fvec).max()):
        raise ValueError("running cost must be nonnegative")
    if qvec.min() < prob.delta_q - 1e-9 or qvec.max() > prob.b_q + 1e-9:
        raise ValueError(
            f"discount left its declared bounds: range [{qvec.min():.6g}, "
            f"{qvec.max():.6g}] vs [{prob.delta_q:.6g}, {prob.b_q:.6g}]"
        )


# ---------------------------------------------------------------------------
# assembly


def _assemble_operator(prob: HJBProblem, pol: PolicyTable, grid: Grid, tails: _TailBasis):
    """Discrete generator rows L plus discount/cost vectors for a policy."""
    n = grid.n_nodes
    pts = grid.nodes()
    u = _resolve_u(prob, grid.dim)
    h = grid.h
    shape = grid.shape
    multi = np.unravel_index(np.arange(n), shape)
    rows, cols, vals = [], [], []
    qvec = np.empty(n)
    fvec = np.empty(n)
    nonmono = 0

    def add(i, j, v):
        rows.append(i)
        cols.append(j)
        vals.append(v)

    def add_point(i, pt, coeff):
        if bool(grid.contains(pt.reshape(1, -1))[0]):
            cc, ww = _interp_inside(grid, pt.reshape(1, -1))
            for c, w in zip(cc[0], ww[0]):
                if w != 0.0:
                    add(i, int(c), coeff * w)
        else:
            cc, ww = tails.exterior_weights(pt)
            for c, w in zip(cc, ww):
                if w != 0.0:
                    add(i, int(c), coeff * w)

    def add_axis_neighbor(i, k, step, coeff):
        ik = multi[k][i] + step
        if 0 <= ik < shape[k]:
            if grid.dim == 1:
                add(i, ik, coeff)
            else:
                j = (ik, multi[1][i]) if k == 0 else (multi[0][i], ik)
                add(i, j[0] * shape[1] + j[1], coeff)
        else:
            ghost = pts[i].copy()
            ghost[k] += step * h[k]
            add_point(i, ghost, coeff)

    for i in range(n):
        x = pts[i]
        a = _node_action(prob, pol, i, x)
        D = _diffusion_matrix(a)
        nu_pts, nu_w = _support_points(a.nu)
        mass = float(nu_w.sum())
        m1 = nu_w @ nu_pts if len(nu_w) else np.zeros(grid.dim)
        b = u + a.mu - m1
        diag = 0.0
        for k in range(grid.dim):
            c2 = 0.5 * D[k, k] / h[k] ** 2
            if c2 > 0.0:
                add_axis_neighbor(i, k, +1, c2)
                add_axis_neighbor(i, k, -1, c2)
                diag -= 2.0 * c2
            bk = b[k]
            if bk > 0.0:
                add_axis_neighbor(i, k, +1, bk / h[k])
                diag -= bk / h[k]
            elif bk < 0.0:
                add_axis_neighbor(i, k, -1, -bk / h[k])
                diag -= -bk / h[k]
        if grid.dim == 2 and D[0, 1] != 0.0:
            c12 = D[0, 1] / (4.0 * h[0] * h[1])
            nonmono += 1
            for s0, s1 in ((1, 1), (-1, -1), (1, -1), (-1, 1)):
                pt = x.copy()
                pt[0] += s0 * h[0]
                pt[1] += s1 * h[1]
                add_point(i, pt, c12 if s0 == s1 else -c12)
        if mass > 0.0:
            for y, w in zip(nu_pts, nu_w):
                if w > 0.0:
                    add_point(i, x + y, w)
            diag -= mass
        add(i, i, diag)
        qvec[i] = _eval_xa_scalar(prob.q, grid, x, a)
        fvec[i] = _eval_xa_scalar(prob.f, grid, x, a)

    _check_cost_bounds(prob, qvec, fvec)
    L = sp.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr()
    if nonmono:
        warnings.warn(
            f"{nonmono} rows carry the mixed-sign cross-derivative stencil "
            "(non-monotone discretization)",
            SchemeWarning,
            stacklevel=2,
        )
    return L, qvec, fvec


def _solve_linear(M: sp.csr_matrix, rhs: np.ndarray, tol: float) -> np.ndarray:
    n = rhs.shape[0]
    scale = max(1.0, float(np.abs(rhs).max()))
    if n <= DENSE_NODE_LIMIT:
        Md = M.toarray()
        try:
            phi = np.linalg.solve(Md, rhs)
        except np.linalg.LinAlgError as exc:
            raise SolverError(
                f"singular system ({exc}); condition estimate {np.linalg.cond(Md):.3e}"
            ) from exc
        resid = float(np.abs(Md @ phi - rhs).max())
        if not np.isfinite(resid) or resid > max(tol, 1e-9) * scale:
            raise SolverError(
                f"ill-conditioned system: residual {resid:.3e}, "
                f"condition estimate {np.linalg.cond(Md):.3e}"
            )
        return phi
    # stationary Richardson sweep with the discount-dominant diagonal
    d = M.diagonal()
    if np.any(d <= 0.0):
        raise SolverError("nonpositive diagonal in the implicit system")
    phi = rhs / d
    for _ in range(20000):
        r = rhs - M @ phi
        if np.abs(r).max() <= max(tol, 1e-10) * scale:
            return phi
        phi = phi + r / d
    raise SolverError(
        "Richardson iteration stalled; the action family may break diagonal dominance"
    )


def policy_evaluation(pol: PolicyTable, prob: HJBProblem, grid: Grid, tol: float = 1e-8) -> ValueField:
    """Solve the linear system of the fixed policy: (q - L) phi = f."""
    if not pol.grid.matches(grid):
        raise ValueError("policy and grid do not match")
    tails = _TailBasis(grid, prob.q_growth)
    L, qvec, fvec = _assemble_operator(prob, pol, grid, tails)
    M = (sp.diags(qvec) - L).tocsr()
    phi = _solve_linear(M, fvec, tol)
    resid = float(np.abs(M @ phi - fvec).max())
    log.debug("policy evaluation: %d nodes, linear residual %.3e", len(fvec), resid)
    return ValueField(grid=grid, values=phi.reshape(grid.shape), q_growth=prob.q_growth)


# ---------------------------------------------------------------------------
# improvement


def _stencil_arrays(phi: ValueField):
    """Forward/backward/second differences (and the cross stencil in 2-D),
    with ghost layers taken from the tail extension."""
    grid = phi.grid
    vals = phi.values
    tails = phi._tails
    if grid.dim == 1:
        n = grid.num[0]
        P = np.empty(n + 2)
        P[1:-1] = vals
        P[0] = tails.weights(0, 0, grid.lo[0] - grid.h[0])[0] @ vals[tails.band[(0, 0)]]
        P[-1] = tails.weights(0, 1, grid.hi[0] + grid.h[0])[0] @ vals[tails.band[(0, 1)]]
        h0 = grid.h[0]
        fwd = (P[2:] - P[1:-1]) / h0
        bwd = (P[1:-1] - P[:-2]) / h0
        sec = (P[2:] - 2.0 * P[1:-1] + P[:-2]) / h0**2
        return {"fwd": [fwd], "bwd": [bwd], "sec": [sec], "cross": None}
    n0, n1 = grid.num
    P = np.empty((n0 + 2, n1 + 2))
    P[1:-1, 1:-1] = vals
    for side, row in ((0, 0), (1, n0 + 1)):
        coord = grid.lo[0] - grid.h[0] if side == 0 else grid.hi[0] + grid.h[0]
        w = tails.weights(0, side, coord)[0]
        P[row, 1:-1] = w @ vals[tails.band[(0, side)], :]
    for side, col in ((0, 0), (1, n1 + 1)):
        coord = grid.lo[1] - grid.h[1] if side == 0 else grid.hi[1] + grid.h[1]
        w = tails.weights(1, side, coord)[0]
        # extend whole padded columns so the cross stencil sees corner ghosts
        P[1:-1, col] = vals[:, tails.band[(1, side)]] @ w
        P[0, col] = P[0, 1:-1][tails.band[(1, side)]] @ w
        P[-1, col] = P[-1, 1:-1][tails.band[(1, side)]] @ w
    h0, h1 = grid.h
    C = P[1:-1, 1:-1]
    out = {
        "fwd": [(P[2:, 1:-1] - C) / h0, (P[1:-1, 2:] - C) / h1],
        "bwd": [(C - P[:-2, 1:-1]) / h0, (C - P[1:-1, :-2]) / h1],
        "sec": [
            (P[2:, 1:-1] - 2.0 * C + P[:-2, 1:-1]) / h0**2,
            (P[1:-1, 2:] - 2.0 * C + P[1:-1, :-2]) / h1**2,
        ],
        "cross": (P[2:, 2:] + P[:-2, :-2] - P[2:, :-2] - P[:-2, 2:]) / (4.0 * h0 * h1),
    }
    return out


def _jump_values(phi: ValueField, pts: np.ndarray, nu) -> np.ndarray:
    """(n,) array of integral phi(x + y) - mass * phi(x) ... without the phi(x)
    part; returns sum_k w_k phi(x_i + y_k) and the total mass separately."""
    nu_pts, nu_w = _support_points(nu)
    n = pts.shape[0]
    if len(nu_w) == 0:
        return np.zeros(n), 0.0
    dest = (pts[:, None, :] + nu_pts[None, :, :]).reshape(-1, pts.shape[1])
    vals = phi.value(dest if phi.grid.dim == 2 else dest[:, 0]).reshape(n, len(nu_w))
    return vals @ nu_w, float(nu_w.sum())


def _candidate_integrand_constant(phi, prob, grid, st, pts, phi_flat, a: Action):
    u = _resolve_u(prob, grid.dim)
    D = _diffusion_matrix(a)
    nu_pts, nu_w = _support_points(a.nu)
    m1 = nu_w @ nu_pts if len(nu_w) else np.zeros(grid.dim)
    jump_in, mass = _jump_values(phi, pts, a.nu)
    b = u + a.mu - m1
    total = jump_in - mass * phi_flat
    for k in range(grid.dim):
        total = total + 0.5 * D[k, k] * st["sec"][k].ravel()
        bk = b[k]
        if bk > 0.0:
            total = total + bk * st["fwd"][k].ravel()
        elif bk < 0.0:
            total = total + bk * st["bwd"][k].ravel()
    if grid.dim == 2 and D[0, 1] != 0.0:
        total = total + D[0, 1] * st["cross"].ravel()
    xb = _x_for_eval(grid, pts)
    qv = _eval_xa(prob.q, xb, a, len(pts))
    fv = _eval_xa(prob.f, xb, a, len(pts))
    return total - qv * phi_flat + fv


def _integrand_callable_entry(phi, prob, grid, st, pts, phi_flat, entry):
    n = pts.shape[0]
    u = _resolve_u(prob, grid.dim)
    out = np.empty(n)
    dest_chunks, dest_w, dest_row = [], [], []
    local = np.empty(n)
    sec = [s.ravel() for s in st["sec"]]
    fwd = [s.ravel() for s in st["fwd"]]
    bwd = [s.ravel() for s in st["bwd"]]
    cross = st["cross"].ravel() if st["cross"] is not None else None
    for i in range(n):
        x = pts[i]
        a = entry(float(x[0]) if grid.dim == 1 else x.copy())
        D = _diffusion_matrix(a)
        nu_pts, nu_w = _support_points(a.nu)
        mass = float(nu_w.sum())
        m1 = nu_w @ nu_pts if len(nu_w) else np.zeros(grid.dim)
        b = u + a.mu - m1
        acc = -mass * phi_flat[i]
        for k in range(grid.dim):
            acc += 0.5 * D[k, k] * sec[k][i]
            bk = b[k]
            if bk > 0.0:
                acc += bk * fwd[k][i]
            elif bk < 0.0:
                acc += bk * bwd[k][i]
        if grid.dim == 2 and D[0, 1] != 0.0:
            acc += D[0, 1] * cross[i]
        if len(nu_w):
            dest_chunks.append(x[None, :] + nu_pts)
            dest_w.append(nu_w)
            dest_row.append(np.full(len(nu_w), i))
        local[i] = acc
        out[i] = -_eval_xa_scalar(prob.q, grid, x, a) * phi_flat[i] + _eval_xa_scalar(
            prob.f, grid, x, a
        )
    if dest_chunks:
        dest = np.concatenate(dest_chunks, axis=0)
        wts = np.concatenate(dest_w)
        rows = np.concatenate(dest_row)
        vals = phi.value(dest if grid.dim == 2 else dest[:, 0])
        local += np.bincount(rows, weights=wts * vals, minlength=n)
    return local + out


def _lattice_combos(lat: tuple):
    mesh = np.meshgrid(*lat, indexing="ij")
    combos = np.stack([m.ravel() for m in mesh], axis=1)
    shape = tuple(len(ax) for ax in lat)
    return combos, shape


def _refine_mu(prob, grid, st, pts, phi_flat, base, sigma, nu, m1, Iall, lat, best_flat):
    """One per-axis quadratic pass around the per-node lattice argmin."""
    combos, lshape = _lattice_combos(lat)
    n = pts.shape[0]
    u = _resolve_u(prob, grid.dim)
    cmulti = np.unravel_index(best_flat, lshape)
    strides = np.array([int(np.prod(lshape[r + 1 :])) for r in range(len(lshape))])
    mu_ref = combos[best_flat].copy()
    I_best = Iall[np.arange(n), best_flat]
    moved = np.zeros(n, dtype=bool)
    for r, ax in enumerate(lat):
        j = cmulti[r]
        inner = (j > 0) & (j < len(ax) - 1)
        if not inner.any():
            continue
        rows = np.nonzero(inner)[0]
        flat0 = best_flat[rows]
        I_m = Iall[rows, flat0 - strides[r]]
        I_0 = Iall[rows, flat0]
        I_p = Iall[rows, flat0 + strides[r]]
        denom = I_p - 2.0 * I_0 + I_m
        step = ax[1] - ax[0]
        ok = denom > 1e-300
        off = np.zeros(len(rows))
        off[ok] = np.clip(0.5 * (I_m[ok] - I_p[ok]) / denom[ok] * step, -step, step)
        use = ok & (off != 0.0)
        mu_ref[rows[use], r] += off[use]
        moved[rows[use]] = True
    # accept the vertex only where the exact integrand agrees it is better
    fwd = [s.ravel() for s in st["fwd"]]
    bwd = [s.ravel() for s in st["bwd"]]
    for i in np.nonzero(moved)[0]:
        x = pts[i]
        mu_i = mu_ref[i]
        a = Action(sigma=sigma, nu=nu, mu=mu_i)
        b = u + mu_i - m1
        acc = base[i]
        for k in range(grid.dim):
            bk = b[k]
            if bk > 0.0:
                acc += bk * fwd[k][i]
            elif bk < 0.0:
                acc += bk * bwd[k][i]
        val = (
            acc
            - _eval_xa_scalar(prob.q, grid, x, a) * phi_flat[i]
            + _eval_xa_scalar(prob.f, grid, x, a)
        )
        if val <= I_best[i]:
            I_best[i] = val
        else:
            mu_ref[i] = combos[best_flat[i]]
    return mu_ref, I_best


def _best_candidates(phi: ValueField, prob: HJBProblem, grid: Grid):
    """Per-node argmin of the discrete integrand over the declared family.

    Returns (best integrand values, PolicyTable).
    """
    if prob.mode == "list" and len(prob.actions) == 0:
        raise ValueError("empty action set")
    if not phi.grid.matches(grid):
        raise ValueError("field and grid do not match")
    st = _stencil_arrays(phi)
    pts = grid.nodes()
    phi_flat = phi.values.ravel()
    n = grid.n_nodes

    if prob.mode == "list":
        best = np.full(n, np.inf)
        best_idx = np.zeros(n, dtype=int)
        for j, entry in enumerate(prob.actions):
            if isinstance(entry, Action):
                I = _candidate_integrand_constant(phi, prob, grid, st, pts, phi_flat, entry)
            else:
                I = _integrand_callable_entry(phi, prob, grid, st, pts, phi_flat, entry)
            upd = I < best
            best[upd] = I[upd]
            best_idx[upd] = j
        return best, PolicyTable(grid=grid, action_index=best_idx)

    lat = prob.mu_lattice
    combos, _ = _lattice_combos(lat)
    u = _resolve_u(prob, grid.dim)
    best = np.full(n, np.inf)
    best_idx = np.zeros(n, dtype=int)
    best_mu = np.zeros((n, grid.dim))
    xb = _x_for_eval(grid, pts)
    for s, (sigma, nu) in enumerate(prob.sigma_nu_pairs):
        a_probe = Action(sigma=sigma, nu=nu, mu=combos[0])
        D = _diffusion_matrix(a_probe)
        nu_pts, nu_w = _support_points(nu)
        m1 = nu_w @ nu_pts if len(nu_w) else np.zeros(grid.dim)
        jump_in, mass = _jump_values(phi, pts, nu)
        base = jump_in - mass * phi_flat
        for k in range(grid.dim):
            base = base + 0.5 * D[k, k] * st["sec"][k].ravel()
        if grid.dim == 2 and D[0, 1] != 0.0:
            base = base + D[0, 1] * st["cross"].ravel()
        Iall = np.empty((n, combos.shape[0]))
        for c in range(combos.shape[0]):
            mu = combos[c]
            a = Action(sigma=sigma, nu=nu, mu=mu)
            b = u + mu - m1
            drift = np.zeros(n)
            for k in range(grid.dim):
                bk = b[k]
                if bk > 0.0:
                    drift = drift + bk * st["fwd"][k].ravel()
                elif bk < 0.0:
                    drift = drift + bk * st["bwd"][k].ravel()
            qv = _eval_xa(prob.q, xb, a, n)
            fv = _eval_xa(prob.f, xb, a, n)
            Iall[:, c] = base + drift - qv * phi_flat + fv
        lat_best = np.argmin(Iall, axis=1)
        mu_ref, I_ref = _refine_mu(
            prob, grid, st, pts, phi_flat, base, sigma, nu, m1, Iall, lat, lat_best
        )
        upd = I_ref < best
        best[upd] = I_ref[upd]
        best_idx[upd] = s
        best_mu[upd] = mu_ref[upd]
    return best, PolicyTable(grid=grid, action_index=best_idx, mu=best_mu)


def policy_improvement(phi: ValueField, prob: HJBProblem, grid: Grid) -> PolicyTable:
    """Pointwise argmin of the discrete integrand; ties go to the lowest index."""
    _, pol = _best_candidates(phi, prob, grid)
    return pol


# ---------------------------------------------------------------------------
# solvers


def solve_stationary(prob: HJBProblem, grid: Grid, tol: float = 1e-8, max_iters: int = 60):
    """Policy iteration until the value update or the policy stalls.

    Returns (ValueField, PolicyTable, ConvergenceReport); non-convergence is
    reported, not raised, so partial results stay inspectable.
    """
    if prob.mode == "list":
        pol = PolicyTable(grid=grid, action_index=np.zeros(grid.n_nodes, dtype=int))
    else:
        combos, _ = _lattice_combos(prob.mu_lattice)
        j0 = int(np.argmin(np.linalg.norm(combos, axis=1)))
        pol = PolicyTable(
            grid=grid,
            action_index=np.zeros(grid.n_nodes, dtype=int),
            mu=np.tile(combos[j0], (grid.n_nodes, 1)),
        )
    deltas = []
    max_increase = 0.0
    phi_prev = None
    converged = False
    messages = []
    it = 0
    phi = None
    for it in range(1, max_iters + 1):
        phi = policy_evaluation(pol, prob, grid, tol=min(tol, 1e-8))
        if phi_prev is not None:
            diff = phi.values - phi_prev.values
            deltas.append(float(np.abs(diff).max()))
            max_increase = max(max_increase, float(diff.max()))
            if deltas[-1] <= tol:
                converged = True
                break
        best, pol_new = _best_candidates(phi, prob, grid)
        if pol_new.same_as(pol):
            converged = True
            break
        pol = pol_new
        phi_prev = phi
    if not converged:
        messages.append(f"policy iteration did not converge in {max_iters} sweeps")
        log.warning("%s", messages[-1])
    best, pol = _best_candidates(phi, prob, grid)
    inner = interior_mask(grid)
    residual = float(np.abs(best[inner]).max()) if inner.any() else float(np.abs(best).max())
    report = ConvergenceReport(
        iterations=it,
        deltas=deltas,
        residual=residual,
        max_pointwise_increase=max_increase,
        converged=converged,
        messages=messages,
    )
    log.info(
        "stationary solve: %d sweeps, interior residual %.3e, converged=%s",
        it,
        residual,
        converged,
    )
    return phi, pol, report


def _terminal_values(h, grid: Grid) -> np.ndarray:
    if isinstance(h, ValueField):
        if not h.grid.matches(grid):
            raise ValueError("terminal field lives on a different grid")
        vals = h.values.copy()
    elif callable(h):
        vals = np.asarray(h(_x_for_eval(grid, grid.nodes())), float).reshape(grid.shape)
    else:
        arr = np.asarray(h, float)
        vals = np.full(grid.shape, float(arr)) if arr.ndim == 0 else arr.reshape(grid.shape)
    if not np.all(np.isfinite(vals)):
        raise ValueError("terminal payoff must be finite")
    if vals.min() < -1e-12 * max(1.0, float(np.abs(vals).max())):
        raise ValueError("terminal payoff must be nonnegative")
    return vals


def solve_finite_horizon(
    prob: HJBProblem, h, T: float, n_steps: int, grid: Grid, tol: float = 1e-10
) -> FiniteHorizonSolution:
    """Backward steps of the discounted implicit scheme.

    Each step improves the policy on the next slice, then solves
    (I - dt L) phi_m = e^{-q dt} phi_{m+1} + (1 - e^{-q dt})/q f, which
    resolves the discount factor exactly (constants and pure discounting
    are reproduced to solver precision, uniformly in dt).
    """
    if T <= 0.0 or n_steps < 1:
        raise ValueError("need T > 0 and n_steps >= 1")
    dt = T / n_steps
    n = grid.n_nodes
    values = np.empty((n_steps + 1,) + grid.shape)
    values[n_steps] = _terminal_values(h, grid)
    tails = _TailBasis(grid, prob.q_growth)
    pol_prev = None
    lu = None
    M_iter = None
    E = W = fvec = None
    for m in range(n_steps - 1, -1, -1):
        phi_next = ValueField(grid=grid, values=values[m + 1], q_growth=prob.q_growth)
        pol = policy_improvement(phi_next, prob, grid)
        if pol_prev is None or not pol.same_as(pol_prev):
            L, qvec, fvec = _assemble_operator(prob, pol, grid, tails)
            M = (sp.identity(n, format="csr") - dt * L).tocsr()
            E = np.exp(-qvec * dt)
            W = (1.0 - E) / qvec
            if n <= DENSE_NODE_LIMIT:
                lu = lu_factor(M.toarray())
                M_iter = None
            else:
                lu = None
                M_iter = M
            pol_prev = pol
        rhs = E * values[m + 1].ravel() + W * fvec
        if lu is not None:
            sol = lu_solve(lu, rhs)
        else:
            sol = _solve_linear(M_iter, rhs, tol)
        if not np.all(np.isfinite(sol)):
            raise SolverError("finite-horizon step produced non-finite values")
        values[m] = sol.reshape(grid.shape)
    times = np.linspace(0.0, T, n_steps + 1)
    return FiniteHorizonSolution(times=times, values=values, grid=grid, q_growth=prob.q_growth)


# ---------------------------------------------------------------------------
# dynamic-programming residual (Monte Carlo)


@dataclass
class DppReport:
    residual: float
    t: float
    per_probe: list = field(default_factory=list)


def _default_probes(grid: Grid):
    qs = (0.25, 0.5, 0.75)
    if grid.dim == 1:
        w = grid.hi[0] - grid.lo[0]
        return [np.array([grid.lo[0] + f * w]) for f in qs]
    w0 = grid.hi[0] - grid.lo[0]
    w1 = grid.hi[1] - grid.lo[1]
    return [np.array([grid.lo[0] + f * w0, grid.lo[1] + f * w1]) for f in qs]


def _policy_specs(prob: HJBProblem, dyn):
    specs = []
    if prob.mode == "list":
        for entry in prob.actions:
            if isinstance(entry, Action):
                specs.append(dyn.PolicyFieldSpec.constant(entry))
            else:
                specs.append(dyn.PolicyFieldSpec.from_action_callable(entry))
        return specs
    combos, _ = _lattice_combos(prob.mu_lattice)
    j0 = int(np.argmin(np.linalg.norm(combos, axis=1)))
    for sigma, nu in prob.sigma_nu_pairs:
        specs.append(dyn.PolicyFieldSpec.constant(Action(sigma=sigma, nu=nu, mu=combos[j0])))
    return specs


def _cost_adapters(prob: HJBProblem, spec, grid: Grid):
    """State-only cost/discount callables for a fixed policy spec."""

    def resolve(X):
        return spec.action_at(X)

    def f_fn(X):
        acts = resolve(X)
        if isinstance(acts, Action):
            return _eval_xa(prob.f, X[:, 0] if grid.dim == 1 else X, acts, len(X))
        return np.array(
            [
                _eval_xa_scalar(prob.f, grid, X[i], acts[i])
                for i in range(len(X))
            ]
        )

    def q_fn(X):
        acts = resolve(X)
        if isinstance(acts, Action):
            return _eval_xa(prob.q, X[:, 0] if grid.dim == 1 else X, acts, len(X))
        return np.array(
            [
                _eval_xa_scalar(prob.q, grid, X[i], acts[i])
                for i in range(len(X))
            ]
        )

    return f_fn, q_fn


def dpp_report(
    phi: ValueField,
    prob: HJBProblem,
    t: float,
    n_paths: int,
    seed: int,
    policies=None,
    probe_states=None,
    dt: float = 1e-2,
) -> DppReport:
    """Monte Carlo check of the programming principle at horizon t.

    For each probe state the best trial policy's estimate of
    E[int_0^t e^{-gamma} f ds + e^{-gamma_t} phi(X_t)] is compared with
    phi(x); the report aggregates the worst (sup) probe.
    """
    if t < 0.0:
        raise ValueError("t must be nonnegative")
    grid = phi.grid
    probes = probe_states if probe_states is not None else _default_probes(grid)
    probes = [np.atleast_1d(np.asarray(p, float)) for p in probes]
    if t == 0.0:
        per = [
            {"probe": p, "estimate": phi.value(p if grid.dim == 2 else p[0]), "se": 0.0,
             "policy": None, "gap": 0.0}
            for p in probes
        ]
        return DppReport(residual=0.0, t=0.0, per_probe=per)
    from . import dynamics as dyn

    specs = policies if policies is not None else _policy_specs(prob, dyn)
    if len(specs) == 0:
        raise ValueError("no trial policies")
    per = []
    worst = -np.inf
    for pi, p in enumerate(probes):
        phi_here = phi.value(p if grid.dim == 2 else p[0])
        best = None
        for si, spec in enumerate(specs):
            f_fn, q_fn = _cost_adapters(prob, spec, grid)
            cfg = dyn.SimConfig(
                x0=p,
                T=t,
                dt=dt,
                n_paths=n_paths,
                seed=seed + 7919 * pi + 104729 * si,
            )
            bundle = dyn.simulate(spec, cfg, f=f_fn, q=q_fn)
            disc = np.exp(-bundle.gamma[:, -1])
            xT = bundle.states[:, -1, :]
            samples = bundle.cost_disc + disc * phi.value(xT if grid.dim == 2 else xT[:, 0])
            est = float(samples.mean())
            se = float(samples.std(ddof=1) / np.sqrt(len(samples)))
            if best is None or est < best[0]:
                best = (est, se, si)
        gap = best[0] - phi_here
        per.append(
            {"probe": p, "estimate": best[0], "se": best[1], "policy": best[2], "gap": gap}
        )
        worst = max(worst, gap)
    return DppReport(residual=float(worst), t=float(t), per_probe=per)


def dpp_residual(phi, prob, t, n_paths, seed, policies=None, probe_states=None, dt=1e-2) -> float:
    """Sup over probe states of the best-trial-policy gap; see dpp_report."""
    return dpp_report(
        phi, prob, t, n_paths, seed, policies=policies, probe_states=probe_states, dt=dt
    ).residual
