"""Statistical verifiers for simulated control policies.

Four families of checks, all reporting through :class:`TestReport` with
3-standard-error decision thresholds:

* sub/martingale structure of an accumulated-cost-plus-value series,
  binned by the starting state so drift cannot hide in conditioning;
* transversality: the discounted value along paths must eventually
  decrease and fit a decaying exponential whose rate confidence band
  excludes zero (a sufficient surrogate for the limit condition, not an
  equivalent one; reports say so);
* pathwise integrability of Q_s = |mu_s| + ||sigma_s||^2 +
  int |y|^2 v |y|^p nu_s(dy), the quantity whose finiteness admissibility
  requires;
* static growth-certificate audits of a policy field over a probe box.

There is also a Dynkin-formula battery for constant policies (compensated
test functions must be centered) and a moment-bound ratio report that
tracks E[sup |X^d|^q] against its predicted bound across horizons.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .dynamics import PathBundle, PolicyFieldSpec, SimConfig, simulate
from .measures import (
    ZeroMeasure,
    _support_points,
    moment_functional,
    tail_moment,
)

__all__ = [
    "TestReport",
    "submartingale_test",
    "transversality_test",
    "h2_integrability_check",
    "growth_certificate_check",
    "dynkin_test",
    "moment_bound_report",
]

log = logging.getLogger(__name__)

Z_THRESHOLD = 3.0
MIN_ENSEMBLE = 1000
# a decay-rate certificate is refused when one path carries more than this
# share of the estimator mass somewhere in the fit window: the plug-in SE
# of a mean that is dominated by single draws is anti-conservative
MAX_PATH_SHARE = 0.05


@dataclass
class TestReport:
    """Outcome of one verifier run.

    ``passed`` is always a pure function of ``statistics`` and
    ``thresholds``, so a report can be re-audited without re-running the
    simulation that produced it.
    """

    name: str
    passed: bool
    statistics: dict
    thresholds: dict
    n_samples: int
    messages: tuple = ()

    def to_json(self, indent=None) -> str:
        return json.dumps(
            {
                "name": self.name,
                "passed": bool(self.passed),
                "statistics": _jsonable(self.statistics),
                "thresholds": _jsonable(self.thresholds),
                "n_samples": int(self.n_samples),
                "messages": list(self.messages),
            },
            indent=indent,
        )


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, float) and not np.isfinite(obj):
        return repr(obj)
    return obj


def _nearest_index(times: np.ndarray, t: float) -> int:
    return int(np.argmin(np.abs(times - t)))


def _phi_values(phi, X2d: np.ndarray) -> np.ndarray:
    if hasattr(phi, "value"):
        out = phi.value(X2d[:, 0] if X2d.shape[1] == 1 else X2d)
    else:
        out = phi(X2d)
    return np.asarray(out, dtype=float)


# ---------------------------------------------------------------------------
# sub/martingale structure


def submartingale_test(
    S: np.ndarray,
    bundle: PathBundle,
    pairs: Sequence,
    n_bins: int = 8,
    mode: str = "sub",
    min_bin_count: int = 50,
) -> TestReport:
    """Binned conditional-increment sign test of an ensemble series.

    ``S`` has one row per path on the bundle's snapshot lattice; ``pairs``
    lists (s, t) times with s < t.  Paths are bucketed by the state at s
    (quantile bins), and within each sufficiently populated bin the mean
    of S_t - S_s must be >= -3 SE ("sub" mode) or within 3 SE of zero
    ("martingale" mode).  Undersampled bins are flagged and excluded.
    """
    S = np.asarray(S, dtype=float)
    n, K = S.shape
    if n < MIN_ENSEMBLE:
        raise ValueError(f"ensemble of {n} paths is below the minimum {MIN_ENSEMBLE}")
    if S.shape[1] != bundle.times.size:
        raise ValueError("series does not match the bundle's snapshot lattice")
    if mode not in ("sub", "martingale"):
        raise ValueError("mode must be 'sub' or 'martingale'")

    messages = []
    pair_stats = []
    all_ok = True
    any_included = False
    for s, t in pairs:
        si, ti = _nearest_index(bundle.times, s), _nearest_index(bundle.times, t)
        if si >= ti:
            raise ValueError(f"pair ({s}, {t}) does not resolve to increasing indices")
        xs = (
            bundle.states[:, si, 0]
            if bundle.dim == 1
            else np.linalg.norm(bundle.states[:, si, :], axis=1)
        )
        inc = S[:, ti] - S[:, si]
        edges = np.unique(np.quantile(xs, np.linspace(0.0, 1.0, n_bins + 1)))
        if edges.size < 2:
            assign = np.zeros(n, dtype=int)
            n_eff = 1
        else:
            assign = np.clip(np.searchsorted(edges, xs, side="right") - 1, 0, edges.size - 2)
            n_eff = edges.size - 1
        bins = []
        for b in range(n_eff):
            sel = assign == b
            m = int(sel.sum())
            if m < min_bin_count:
                bins.append({"bin": b, "count": m, "excluded": True})
                continue
            any_included = True
            mean = float(inc[sel].mean())
            se = float(inc[sel].std(ddof=1) / np.sqrt(m)) if m > 1 else 0.0
            if mode == "sub":
                ok = mean >= -Z_THRESHOLD * se
            else:
                ok = abs(mean) <= Z_THRESHOLD * se
            all_ok &= ok
            bins.append(
                {
                    "bin": b, "count": m, "mean": mean, "se": se,
                    "z": mean / se if se > 0 else 0.0, "ok": ok, "excluded": False,
                }
            )
        n_excl = sum(1 for b in bins if b["excluded"])
        if n_excl:
            messages.append(
                f"pair ({s:g}, {t:g}): {n_excl} undersampled bin(s) excluded"
            )
        pair_stats.append(
            {"s": float(bundle.times[si]), "t": float(bundle.times[ti]), "bins": bins}
        )
    if not any_included:
        all_ok = False
        messages.append("no bin reached the minimum population; nothing was tested")
    return TestReport(
        name="submartingale-binned" if mode == "sub" else "martingale-binned",
        passed=bool(all_ok),
        statistics={"pairs": pair_stats},
        thresholds={"z": Z_THRESHOLD, "min_bin_count": min_bin_count},
        n_samples=n,
        messages=tuple(messages),
    )


# ---------------------------------------------------------------------------
# transversality


def _wls_line(t: np.ndarray, y: np.ndarray, var: np.ndarray):
    """Weighted least squares fit y ~ a + b t; returns (b, var_b)."""
    w = 1.0 / np.maximum(var, 1e-30)
    tw = float((w * t).sum() / w.sum())
    yw = float((w * y).sum() / w.sum())
    s_tt = float((w * (t - tw) ** 2).sum())
    if s_tt <= 0.0:
        raise ValueError("degenerate time lattice for the rate fit")
    b = float((w * (t - tw) * (y - yw)).sum() / s_tt)
    return b, 1.0 / s_tt


def transversality_test(
    policy: PolicyFieldSpec,
    phi,
    cfg: SimConfig,
    q,
    t_lattice: Optional[np.ndarray] = None,
    window: float = 0.5,
) -> TestReport:
    """Decay test for m(t) = E[e^{-gamma_t} phi(X_t)] under a policy.

    Over the trailing ``window`` fraction of the lattice the test requires
    (a) no consecutive increment significantly positive and (b) a weighted
    log-linear fit m ~ A e^{-rt} whose rate is positive with the 3-SE band
    excluding zero.  This pair of checks is sufficient for the discounted
    value to vanish along the lattice, but not equivalent to the liminf
    statement it stands in for; the report says so.
    """
    bundle = simulate(policy, cfg, q=q)
    times = bundle.times
    if t_lattice is not None:
        idx = sorted({_nearest_index(times, t) for t in np.asarray(t_lattice, float)})
        if len(idx) < 4:
            raise ValueError("time lattice resolves to fewer than 4 snapshot points")
    else:
        idx = list(range(times.size))
    tsel = times[idx]
    n = bundle.n_paths

    Y = np.empty((n, len(idx)))
    for j, k in enumerate(idx):
        vals = _phi_values(phi, bundle.states[:, k, :])
        Y[:, j] = np.exp(-bundle.gamma[:, k]) * vals
    m = Y.mean(axis=0)
    se = Y.std(axis=0, ddof=1) / np.sqrt(n)

    w0 = np.searchsorted(tsel, (1.0 - window) * tsel[-1])
    w0 = min(max(w0, 0), len(tsel) - 3)
    win = slice(w0, len(tsel))
    messages = [
        "eventual-decay + positive-rate fit is sufficient for the limit "
        "condition, not equivalent",
        "rate CI treats lattice points as independent although paths are shared",
    ]

    dec_ok = True
    for j in range(w0, len(tsel) - 1):
        d = Y[:, j + 1] - Y[:, j]
        d_se = d.std(ddof=1) / np.sqrt(n)
        if d.mean() > Z_THRESHOLD * d_se:
            dec_ok = False
            messages.append(
                f"significant increase of m between t={tsel[j]:g} and t={tsel[j + 1]:g}"
            )
            break

    scale = float(np.max(np.abs(m))) if np.max(np.abs(m)) > 0 else 1.0
    mw, sew, tw = m[win], se[win], tsel[win]
    absY = np.abs(Y[:, win])
    mass = absY.sum(axis=0)
    share = float(np.max(absY.max(axis=0) / np.maximum(mass, 1e-300)))
    r_hat, r_se = np.nan, np.nan
    if np.all(np.abs(mw) <= 1e-12 * scale):
        rate_ok = True
        messages.append("tail is numerically zero; rate fit skipped")
    elif share > MAX_PATH_SHARE:
        rate_ok = False
        messages.append(
            f"a single path carries {share:.1%} of the estimator mass in the "
            "fit window; the rate CI is untrustworthy and no decay is certified"
        )
    elif np.any(mw <= 0.0):
        rate_ok = False
        messages.append("m(t) is not positive on the window; no exponential fit")
    else:
        y = np.log(mw)
        var_y = (np.maximum(sew, 1e-12 * np.abs(mw)) / mw) ** 2
        slope, var_b = _wls_line(tw, y, var_y)
        r_hat, r_se = -slope, float(np.sqrt(var_b))
        rate_ok = r_hat - Z_THRESHOLD * r_se > 0.0

    passed = bool(dec_ok and rate_ok)
    return TestReport(
        name="transversality",
        passed=passed,
        statistics={
            "times": tsel, "m": m, "se": se,
            "window_start": float(tsel[w0]), "rate": r_hat, "rate_se": r_se,
            "eventually_decreasing": dec_ok, "max_path_share": share,
        },
        thresholds={"z": Z_THRESHOLD},
        n_samples=n,
        messages=tuple(messages),
    )


# ---------------------------------------------------------------------------
# pathwise integrability


def _q_components(policy: PolicyFieldSpec, X: np.ndarray, p: float):
    """(|mu|, ||sigma||_F^2, int |y|^2 v |y|^p nu) on a state batch."""
    m = len(X)
    if policy.kind == "constant":
        a = policy.action
        jump = 0.0 if isinstance(a.nu, ZeroMeasure) else moment_functional(a.nu, p)
        return (
            np.full(m, float(np.linalg.norm(a.mu))),
            np.full(m, float(np.linalg.norm(a.sigma)) ** 2),
            np.full(m, jump),
        )
    if policy.kind == "linear":
        mus = policy.offset - X @ policy.gain.T
        jump = 0.0 if isinstance(policy.nu, ZeroMeasure) else moment_functional(policy.nu, p)
        return (
            np.linalg.norm(mus, axis=1),
            np.full(m, float(np.linalg.norm(policy.sigma)) ** 2),
            np.full(m, jump),
        )
    if policy.kind == "jump_origin":
        r = np.linalg.norm(X, axis=1)
        return (
            policy.rate * r,
            np.full(m, float(np.linalg.norm(policy.sigma)) ** 2),
            policy.rate * np.maximum(r**2, r**p),
        )
    acts = policy.action_at(X)
    drift = np.array([float(np.linalg.norm(a.mu)) for a in acts])
    diff = np.array([float(np.linalg.norm(a.sigma)) ** 2 for a in acts])
    jump = np.array(
        [
            0.0 if isinstance(a.nu, ZeroMeasure) else moment_functional(a.nu, p)
            for a in acts
        ]
    )
    return drift, diff, jump


def h2_integrability_check(bundle: PathBundle, p: float) -> TestReport:
    """Pathwise integral of Q_s on the snapshot lattice, plus its moment.

    PASS needs the integral finite on every path, its empirical p/2-moment
    finite, and (when the policy declares a growth certificate) no
    violation of that certificate on any visited snapshot state.
    """
    if p < 2.0:
        raise ValueError("the moment order p must be at least 2")
    times = bundle.times
    n, K, dim = bundle.states.shape
    drift = np.empty((n, K))
    diff = np.empty((n, K))
    jump = np.empty((n, K))
    for j in range(K):
        d, s2, jm = _q_components(bundle.policy, bundle.states[:, j, :], p)
        drift[:, j], diff[:, j], jump[:, j] = d, s2, jm
    Q = drift + diff + jump
    dts = np.diff(times)
    integral = np.sum(0.5 * (Q[:, :-1] + Q[:, 1:]) * dts[None, :], axis=1)

    finite_ok = bool(np.all(np.isfinite(integral)))
    moment = float(np.mean(integral ** (p / 2.0))) if finite_ok else float("inf")
    moment_ok = bool(np.isfinite(moment))

    messages = []
    cert_ok = True
    if bundle.policy.growth_K is not None and bundle.policy.growth_p is not None:
        flat = bundle.states.reshape(n * K, dim)
        if len(flat) > 100_000:
            flat = flat[:: int(np.ceil(len(flat) / 100_000))]
        lhs = bundle.policy.growth_left(flat, bundle.policy.growth_p)
        rhs = bundle.policy.growth_K * (
            1.0 + np.linalg.norm(flat, axis=1) ** bundle.policy.growth_p
        )
        if np.any(lhs > rhs * (1.0 + 1e-9)):
            cert_ok = False
            messages.append("growth certificate violated on visited states")

    return TestReport(
        name="pathwise-integrability",
        passed=finite_ok and moment_ok and cert_ok,
        statistics={
            "integral_max": float(np.max(integral)),
            "integral_mean": float(np.mean(integral)),
            "moment_p_half": moment,
            "mean_drift_part": float(np.mean(np.sum(0.5 * (drift[:, :-1] + drift[:, 1:]) * dts, axis=1))),
            "mean_diffusion_part": float(np.mean(np.sum(0.5 * (diff[:, :-1] + diff[:, 1:]) * dts, axis=1))),
            "mean_jump_part": float(np.mean(np.sum(0.5 * (jump[:, :-1] + jump[:, 1:]) * dts, axis=1))),
        },
        thresholds={"p": p},
        n_samples=n,
        messages=tuple(messages),
    )


# ---------------------------------------------------------------------------
# growth certificate


def growth_certificate_check(
    policy: PolicyFieldSpec,
    box,
    K: float,
    p: float,
    n_per_axis: int = 41,
) -> TestReport:
    """Audit |mu|^p + ||sigma||^p + int |z|^2 v |z|^p nu <= K (1 + |x|^p).

    Evaluates the left side on a tensor lattice over ``box`` ((lo, hi)
    per axis, or scalars in one dimension) and reports the worst ratio.
    """
    lo, hi = box
    lo = np.atleast_1d(np.asarray(lo, dtype=float))
    hi = np.atleast_1d(np.asarray(hi, dtype=float))
    if lo.shape != hi.shape or np.any(hi <= lo):
        raise ValueError("box must satisfy lo < hi per axis")
    axes = [np.linspace(a, b, n_per_axis) for a, b in zip(lo, hi)]
    mesh = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([m.ravel() for m in mesh], axis=-1)

    lhs = policy.growth_left(pts, p)
    rhs = K * (1.0 + np.linalg.norm(pts, axis=1) ** p)
    ratio = lhs / rhs
    worst = int(np.argmax(ratio))
    passed = bool(np.all(lhs <= rhs * (1.0 + 1e-12)))
    return TestReport(
        name="growth-certificate",
        passed=passed,
        statistics={
            "worst_ratio": float(ratio[worst]),
            "worst_point": pts[worst],
            "K": float(K),
            "p": float(p),
        },
        thresholds={"ratio": 1.0},
        n_samples=len(pts),
        messages=(),
    )


# ---------------------------------------------------------------------------
# Dynkin battery (constant policies)


def _generator_on_batch(action, g, X: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Vectorized L g over a state batch for one constant action.

    Needs ``g`` to expose batch-capable fn/grad/hess (shape conventions of
    the analytic field type).
    """
    grad = np.asarray(g.grad(X), dtype=float)
    hess = np.asarray(g.hess(X), dtype=float)
    vals = np.asarray(g.fn(X), dtype=float)
    sigma = np.asarray(action.sigma, dtype=float)
    A = sigma @ sigma.T
    out = grad @ (u + np.asarray(action.mu, dtype=float))
    out = out + 0.5 * np.einsum("nij,ij->n", hess, A)
    pts, w = _support_points(action.nu)
    for y, wt in zip(pts, w):
        out = out + wt * (np.asarray(g.fn(X + y), dtype=float) - vals - grad @ y)
    return out


def dynkin_test(bundle: PathBundle, fields, t_points) -> TestReport:
    """Mean-zero check of g(X_t) - g(x0) - int_0^t L g(X_s) ds.

    Constant policies only (the generator is frozen along paths).  For
    each test function and requested time the compensated value must be
    within 3 SE of zero.  ``fields`` entries need vectorized fn/grad/hess.
    """
    if bundle.policy.kind != "constant":
        raise ValueError("the compensated-value battery needs a constant policy")
    a = bundle.policy.action
    n, K, dim = bundle.states.shape
    times = bundle.times
    dts = np.diff(times)

    results = []
    all_ok = True
    for gi, g in enumerate(fields):
        vals = np.empty((n, K))
        gen = np.empty((n, K))
        for j in range(K):
            X = bundle.states[:, j, :]
            vals[:, j] = np.asarray(g.fn(X), dtype=float)
            gen[:, j] = _generator_on_batch(a, g, X, bundle.u)
        integral = np.zeros((n, K))
        integral[:, 1:] = np.cumsum(0.5 * (gen[:, :-1] + gen[:, 1:]) * dts, axis=1)
        M = vals - vals[:, :1] - integral
        for t in t_points:
            j = _nearest_index(times, t)
            if j == 0:
                continue
            mean = float(M[:, j].mean())
            se = float(M[:, j].std(ddof=1) / np.sqrt(n))
            ok = abs(mean) <= Z_THRESHOLD * se if se > 0 else mean == 0.0
            all_ok &= ok
            results.append(
                {
                    "field": getattr(g, "name", f"g{gi}"),
                    "t": float(times[j]), "mean": mean, "se": se,
                    "z": mean / se if se > 0 else 0.0, "ok": ok,
                }
            )
    return TestReport(
        name="compensated-value",
        passed=bool(all_ok),
        statistics={"checks": results},
        thresholds={"z": Z_THRESHOLD},
        n_samples=n,
        messages=(),
    )


# ---------------------------------------------------------------------------
# jump moment bound across horizons


def moment_bound_report(bundles: Sequence[PathBundle], q: float) -> TestReport:
    """Ratio of E[sup |X^d|^q] to its predicted bound across horizons.

    Every bundle must use a constant action so that the quadratic and
    big-jump functionals have closed forms.  The bound's denominator is
    E[G_T^{q/2}] + E[H_T]; the test checks the ratio stays within a factor
    2 of the first bundle's value.
    """
    if q < 2.0:
        raise ValueError("the moment order q must be at least 2")
    rows = []
    ratios = []
    for b in bundles:
        if b.policy.kind != "constant":
            raise ValueError("moment-bound tracking needs constant policies")
        nu = b.policy.action.nu
        T = float(b.times[-1])
        h_term = (0.0 if isinstance(nu, ZeroMeasure) else tail_moment(nu, q)) * T
        num = float(np.mean(b.sup_xd**q))
        den = float(np.mean(b.G_int ** (q / 2.0))) + h_term
        if den <= 0.0:
            raise ValueError("bound denominator vanished; no jump activity at all")
        ratios.append(num / den)
        rows.append({"T": T, "numerator": num, "denominator": den, "ratio": num / den})
    base = ratios[0]
    rel = [r / base for r in ratios]
    passed = bool(all(0.5 <= x <= 2.0 for x in rel))
    return TestReport(
        name="jump-moment-bound",
        passed=passed,
        statistics={"rows": rows, "relative_to_first": rel},
        thresholds={"factor": 2.0},
        n_samples=sum(b.n_paths for b in bundles),
        messages=(),
    )
