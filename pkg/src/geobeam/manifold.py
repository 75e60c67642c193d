"""Planar-chart Riemannian manifolds: metrics, geodesic flow, influx sampling.

The manifold M is a closed disk of radius ``radius`` in a single global
chart, embedded in a concentric extension M1 of radius ``radius1``.  All
geodesic integration uses classical fixed-step RK4 with boundary crossings
resolved by bisection, so results are deterministic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

__all__ = [
    "MetricField",
    "GeodesicPath",
    "InfluxGrid",
    "DomainError",
    "TrappingError",
    "NonSimplicityError",
    "euclidean_metric",
    "conformal_metric",
    "hyperbolic_metric",
    "make_metric",
    "christoffel",
    "geodesic_flow",
    "exp_map",
    "polar_coords",
    "sample_influx",
    "santalo_check",
]


class DomainError(ValueError):
    """Point queried outside the chart domain."""


class TrappingError(RuntimeError):
    """Geodesic exceeded the nontrapping time cap."""


class NonSimplicityError(RuntimeError):
    """Inverse exponential map (polar coordinates) failed to converge."""


# ---------------------------------------------------------------------------
# Metric fields


@dataclass(frozen=True)
class MetricField:
    """A smooth 2x2 SPD metric on the disk chart, with derivatives.

    ``g``/``dg``/``curvature`` are vectorized closures taking points of
    shape (..., 2); ``dg`` returns (..., 2, 2, 2) indexed [k, i, j] for
    the partial d_k g_ij.
    """

    name: str
    radius: float
    g: Callable[[np.ndarray], np.ndarray]
    dg: Callable[[np.ndarray], np.ndarray]
    curvature: Callable[[np.ndarray], np.ndarray]
    ext_factor: float = 0.2
    params: dict = field(default_factory=dict)

    @property
    def radius1(self) -> float:
        return self.radius * (1.0 + self.ext_factor)

    def detg(self, x: np.ndarray) -> np.ndarray:
        G = self.g(np.asarray(x, dtype=float))
        return G[..., 0, 0] * G[..., 1, 1] - G[..., 0, 1] * G[..., 1, 0]

    def ginv(self, x: np.ndarray) -> np.ndarray:
        G = self.g(np.asarray(x, dtype=float))
        det = G[..., 0, 0] * G[..., 1, 1] - G[..., 0, 1] * G[..., 1, 0]
        inv = np.empty_like(G)
        inv[..., 0, 0] = G[..., 1, 1]
        inv[..., 1, 1] = G[..., 0, 0]
        inv[..., 0, 1] = -G[..., 0, 1]
        inv[..., 1, 0] = -G[..., 1, 0]
        return inv / det[..., None, None]

    def norm_g(self, x: np.ndarray, v: np.ndarray) -> np.ndarray:
        G = self.g(np.asarray(x, dtype=float))
        return np.sqrt(np.einsum("...i,...ij,...j->...", v, G, v))

    def unit(self, x: np.ndarray, v: np.ndarray) -> np.ndarray:
        """Normalize v to unit g-length at x."""
        return v / self.norm_g(x, v)[..., None]

    def inside(self, x: np.ndarray, extended: bool = False, tol: float = 0.0) -> np.ndarray:
        r = self.radius1 if extended else self.radius
        return np.hypot(np.asarray(x)[..., 0], np.asarray(x)[..., 1]) <= r + tol

    # -- boundary geometry (circle of chart radius r) ----------------------

    def boundary_point(self, beta: np.ndarray, r: Optional[float] = None) -> np.ndarray:
        r = self.radius if r is None else r
        beta = np.asarray(beta, dtype=float)
        return np.stack([r * np.cos(beta), r * np.sin(beta)], axis=-1)

    def boundary_frame(self, beta: np.ndarray, r: Optional[float] = None):
        """(point, inward g-unit normal, g-unit tangent) at chart angle beta.

        The tangent is the g-normalized velocity of the boundary curve; the
        inward normal is g-orthogonal to it, pointing into the disk.
        """
        r = self.radius if r is None else r
        beta = np.asarray(beta, dtype=float)
        x = self.boundary_point(beta, r)
        tang = np.stack([-np.sin(beta), np.cos(beta)], axis=-1)
        e_t = self.unit(x, tang)
        # g-orthogonal complement of e_t, oriented inward
        G = self.g(x)
        gt = np.einsum("...ij,...j->...i", G, e_t)
        # candidate orthogonal direction: rotate covector gt by 90 degrees
        n = np.stack([-gt[..., 1], gt[..., 0]], axis=-1)
        n = self.unit(x, n)
        inward = -x / np.linalg.norm(x, axis=-1, keepdims=True)
        sgn = np.sign(np.einsum("...i,...i->...", n, inward))
        e_n = n * sgn[..., None]
        return x, e_n, e_t

    def boundary_jacobian(self, beta: np.ndarray, r: Optional[float] = None) -> np.ndarray:
        """g-arclength element |dx/dbeta|_g of the boundary circle."""
        r = self.radius if r is None else r
        beta = np.asarray(beta, dtype=float)
        x = self.boundary_point(beta, r)
        tang = np.stack([-r * np.sin(beta), r * np.cos(beta)], axis=-1)
        return self.norm_g(x, tang)

    def boundary_length(self, r: Optional[float] = None, n: int = 2048) -> float:
        beta = np.linspace(0.0, 2.0 * math.pi, n, endpoint=False)
        return float(np.mean(self.boundary_jacobian(beta, r)) * 2.0 * math.pi)


def _fd_dg(gfun: Callable, h: float) -> Callable:
    """Fourth-order central differences of a metric closure."""

    def dg(x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        out = np.empty(x.shape[:-1] + (2, 2, 2))
        for k in range(2):
            e = np.zeros(2)
            e[k] = h
            out[..., k, :, :] = (
                -gfun(x + 2 * e) + 8 * gfun(x + e) - 8 * gfun(x - e) + gfun(x - 2 * e)
            ) / (12 * h)
        return out

    return dg


def euclidean_metric(radius: float = 1.0, ext_factor: float = 0.2) -> MetricField:
    def g(x):
        x = np.asarray(x, dtype=float)
        out = np.zeros(x.shape[:-1] + (2, 2))
        out[..., 0, 0] = 1.0
        out[..., 1, 1] = 1.0
        return out

    def dg(x):
        x = np.asarray(x, dtype=float)
        return np.zeros(x.shape[:-1] + (2, 2, 2))

    def curv(x):
        x = np.asarray(x, dtype=float)
        return np.zeros(x.shape[:-1])

    return MetricField("euclidean", radius, g, dg, curv, ext_factor)


def conformal_metric(
    phi: Callable[[np.ndarray], np.ndarray],
    radius: float = 1.0,
    dphi: Optional[Callable] = None,
    lap_phi: Optional[Callable] = None,
    ext_factor: float = 0.2,
    name: str = "conformal",
) -> MetricField:
    """Metric exp(2*phi(x)) * I.  Derivatives fall back to finite differences."""
    h_fd = 1e-4 * radius

    def g(x):
        x = np.asarray(x, dtype=float)
        e2 = np.exp(2.0 * phi(x))
        out = np.zeros(x.shape[:-1] + (2, 2))
        out[..., 0, 0] = e2
        out[..., 1, 1] = e2
        return out

    if dphi is not None:

        def dg(x):
            x = np.asarray(x, dtype=float)
            e2 = np.exp(2.0 * phi(x))
            dp = dphi(x)  # (..., 2)
            out = np.zeros(x.shape[:-1] + (2, 2, 2))
            for k in range(2):
                out[..., k, 0, 0] = 2.0 * dp[..., k] * e2
                out[..., k, 1, 1] = 2.0 * dp[..., k] * e2
            return out

    else:
        dg = _fd_dg(g, h_fd)

    if lap_phi is not None:

        def curv(x):
            x = np.asarray(x, dtype=float)
            return -np.exp(-2.0 * phi(x)) * lap_phi(x)

    else:

        def curv(x):
            x = np.asarray(x, dtype=float)
            lap = np.zeros(x.shape[:-1])
            for k in range(2):
                e = np.zeros(2)
                e[k] = h_fd
                lap += (phi(x + e) - 2.0 * phi(x) + phi(x - e)) / h_fd**2
            return -np.exp(-2.0 * phi(x)) * lap

    return MetricField(name, radius, g, dg, curv, ext_factor)


def hyperbolic_metric(radius: float = 0.5, ext_factor: float = 0.2) -> MetricField:
    """Poincare-disk metric 4/(1-|x|^2)^2 * I on a sub-disk (radius1 < 1)."""
    if radius * (1.0 + ext_factor) >= 1.0:
        raise ValueError("hyperbolic chart requires radius*(1+ext_factor) < 1")

    def phi(x):
        x = np.asarray(x, dtype=float)
        r2 = x[..., 0] ** 2 + x[..., 1] ** 2
        return np.log(2.0) - np.log1p(-r2)

    def dphi(x):
        x = np.asarray(x, dtype=float)
        r2 = x[..., 0] ** 2 + x[..., 1] ** 2
        return 2.0 * x / (1.0 - r2)[..., None]

    def lap_phi(x):
        # Delta log(2/(1-r^2)) = 4/(1-r^2)^2, so K = -1 exactly
        x = np.asarray(x, dtype=float)
        r2 = x[..., 0] ** 2 + x[..., 1] ** 2
        return 4.0 / (1.0 - r2) ** 2

    m = conformal_metric(phi, radius, dphi, lap_phi, ext_factor, name="hyperbolic")
    return m


_SHIPPED = {
    "euclidean": euclidean_metric,
    "hyperbolic": hyperbolic_metric,
}


def make_metric(name: str, radius: Optional[float] = None, ext_factor: float = 0.2) -> MetricField:
    """Metric library lookup used by configs.

    ``gauss-bump`` is a mildly curved conformal metric useful for tests.
    """
    if name == "euclidean":
        return euclidean_metric(1.0 if radius is None else radius, ext_factor)
    if name == "hyperbolic":
        return hyperbolic_metric(0.5 if radius is None else radius, ext_factor)
    if name == "gauss-bump":
        rho = 1.0 if radius is None else radius
        amp, sig = 0.1, 0.5 * rho

        def phi(x):
            x = np.asarray(x, dtype=float)
            r2 = x[..., 0] ** 2 + x[..., 1] ** 2
            return amp * np.exp(-r2 / (2 * sig**2))

        def dphi(x):
            x = np.asarray(x, dtype=float)
            r2 = x[..., 0] ** 2 + x[..., 1] ** 2
            return (-amp / sig**2) * np.exp(-r2 / (2 * sig**2))[..., None] * x

        def lap_phi(x):
            x = np.asarray(x, dtype=float)
            r2 = x[..., 0] ** 2 + x[..., 1] ** 2
            return (amp / sig**2) * np.exp(-r2 / (2 * sig**2)) * (r2 / sig**2 - 2.0)

        return conformal_metric(phi, rho, dphi, lap_phi, ext_factor, name="gauss-bump")
    raise ValueError(f"unknown metric id: {name!r}")


# ---------------------------------------------------------------------------
# Christoffel symbols and geodesic flow


def christoffel(m: MetricField, x: np.ndarray) -> np.ndarray:
    """Gamma^i_{jk} at x, shape (..., 2, 2, 2) indexed [i, j, k]."""
    x = np.asarray(x, dtype=float)
    if not np.all(np.hypot(x[..., 0], x[..., 1]) <= m.radius1 + 1e-12):
        raise DomainError("christoffel: point outside extended chart domain")
    return _christoffel_raw(m, x)


def _christoffel_raw(m: MetricField, x: np.ndarray) -> np.ndarray:
    dg = m.dg(x)  # [k, i, j] = d_k g_ij
    ginv = m.ginv(x)
    # Gamma^i_jk = 1/2 g^il (d_j g_lk + d_k g_lj - d_l g_jk)
    term = dg.transpose(*range(dg.ndim - 3), -2, -3, -1)  # [l, j, k] -> d_j g_lk
    sym = term + term.transpose(*range(dg.ndim - 3), -3, -1, -2)  # + d_k g_lj
    sym = sym - dg  # - d_l g_jk
    return 0.5 * np.einsum("...il,...ljk->...ijk", ginv, sym)


def _acc(m: MetricField, x: np.ndarray, v: np.ndarray) -> np.ndarray:
    Gam = _christoffel_raw(m, x)
    return -np.einsum("...ijk,...j,...k->...i", Gam, v, v)


def _rk4_step(m: MetricField, x, v, h):
    k1x, k1v = v, _acc(m, x, v)
    k2x, k2v = v + 0.5 * h * k1v, _acc(m, x + 0.5 * h * k1x, v + 0.5 * h * k1v)
    k3x, k3v = v + 0.5 * h * k2v, _acc(m, x + 0.5 * h * k2x, v + 0.5 * h * k2v)
    k4x, k4v = v + h * k3v, _acc(m, x + h * k3x, v + h * k3v)
    xn = x + (h / 6.0) * (k1x + 2 * k2x + 2 * k3x + k4x)
    vn = v + (h / 6.0) * (k1v + 2 * k2v + 2 * k3v + k4v)
    return xn, vn


@dataclass
class GeodesicPath:
    """Sampled unit-speed geodesic from entry to exit of the (sub)domain."""

    t: np.ndarray          # (ns,)
    x: np.ndarray          # (ns, 2)
    v: np.ndarray          # (ns, 2)
    tau: float             # exit time
    radius: float          # disk radius the path terminates on
    self_intersections: list = field(default_factory=list)

    def interp(self, t: np.ndarray):
        """Linear interpolation of (x, v) at times t."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        xi = np.stack([np.interp(t, self.t, self.x[:, k]) for k in range(2)], axis=-1)
        vi = np.stack([np.interp(t, self.t, self.v[:, k]) for k in range(2)], axis=-1)
        return xi, vi

    def to_csv(self, path) -> None:
        rows = np.column_stack([self.t, self.x, self.v])
        np.savetxt(path, rows, delimiter=",", header="t,x1,x2,v1,v2", comments="")


def _bisect_exit(m, x_prev, v_prev, h, radius, tol=1e-10, iters=60):
    """Fraction of the last RK4 step at which |x| = radius."""
    lo = np.zeros(x_prev.shape[0])
    hi = np.ones(x_prev.shape[0])
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        xm, _ = _rk4_step(m, x_prev, v_prev, (mid * h)[:, None])
        out = np.hypot(xm[:, 0], xm[:, 1]) > radius
        hi = np.where(out, mid, hi)
        lo = np.where(out, lo, mid)
        if np.all((hi - lo) * h < tol):
            break
    frac = 0.5 * (lo + hi)
    xe, ve = _rk4_step(m, x_prev, v_prev, (frac * h)[:, None])
    # snap exactly onto the circle
    nrm = np.hypot(xe[:, 0], xe[:, 1])
    xe = xe * (radius / nrm)[:, None]
    return frac * h, xe, ve


def flow_to_boundary(
    m: MetricField,
    x0: np.ndarray,
    v0: np.ndarray,
    step: Optional[float] = None,
    radius: Optional[float] = None,
    t_max: Optional[float] = None,
):
    """Batched geodesic flow until exit from the disk of given radius.

    Returns (tau, x_exit, v_exit).  Raises TrappingError if any geodesic
    exceeds the nontrapping cap.
    """
    radius = m.radius if radius is None else radius
    step = m.radius / 400.0 if step is None else step
    if step <= 0:
        raise ValueError("step must be positive")
    if t_max is None:
        t_max = 50.0 * 2.0 * m.radius1
    x = np.atleast_2d(np.asarray(x0, dtype=float)).copy()
    v = np.atleast_2d(np.asarray(v0, dtype=float)).copy()
    n = x.shape[0]
    tau = np.zeros(n)
    xe = x.copy()
    ve = v.copy()
    active = np.ones(n, dtype=bool)
    # nudge starting points on the circle inward-in-time
    t = 0.0
    while np.any(active):
        if t > t_max:
            raise TrappingError(f"geodesic exceeded nontrapping cap t_max={t_max:g}")
        xa, va = x[active], v[active]
        xn, vn = _rk4_step(m, xa, va, step)
        out = np.hypot(xn[:, 0], xn[:, 1]) > radius
        if np.any(out):
            dt, xb, vb = _bisect_exit(m, xa[out], va[out], step, radius)
            idx = np.flatnonzero(active)[out]
            tau[idx] = t + dt
            xe[idx] = xb
            ve[idx] = vb
        keep = ~out
        idx_keep = np.flatnonzero(active)[keep]
        x[idx_keep] = xn[keep]
        v[idx_keep] = vn[keep]
        active[np.flatnonzero(active)[out]] = False
        t += step
    return tau, xe, ve


def geodesic_flow(
    m: MetricField,
    x0,
    v0,
    step: Optional[float] = None,
    radius: Optional[float] = None,
    t_max: Optional[float] = None,
    detect_self_intersections: bool = False,
) -> GeodesicPath:
    """Integrate one unit-speed geodesic, recording samples until exit."""
    radius = m.radius if radius is None else radius
    step = m.radius / 400.0 if step is None else step
    if step <= 0:
        raise ValueError("step must be positive")
    if t_max is None:
        t_max = 50.0 * 2.0 * m.radius1
    x = np.asarray(x0, dtype=float).reshape(2)
    v = np.asarray(v0, dtype=float).reshape(2)
    nv = float(m.norm_g(x, v))
    if abs(nv - 1.0) > 1e-10:
        raise ValueError(f"initial velocity not g-unit: |v|_g = {nv:.12g}")
    ts, xs, vs = [0.0], [x.copy()], [v.copy()]
    t = 0.0
    while True:
        if t > t_max:
            raise TrappingError(f"geodesic exceeded nontrapping cap t_max={t_max:g}")
        xn, vn = _rk4_step(m, x[None], v[None], step)
        xn, vn = xn[0], vn[0]
        if np.hypot(xn[0], xn[1]) > radius:
            dt, xb, vb = _bisect_exit(m, x[None], v[None], step, radius)
            t += dt[0]
            ts.append(t)
            xs.append(xb[0])
            vs.append(vb[0])
            break
        t += step
        x, v = xn, vn
        ts.append(t)
        xs.append(x.copy())
        vs.append(v.copy())
    path = GeodesicPath(
        t=np.array(ts), x=np.array(xs), v=np.array(vs), tau=float(ts[-1]), radius=radius
    )
    if detect_self_intersections:
        path.self_intersections = _find_self_intersections(m, path)
    return path


def _find_self_intersections(m: MetricField, path: GeodesicPath, sep: Optional[float] = None):
    """Transversal self-crossings: pairwise sample-distance minima below tol."""
    tol = 1e-3 * m.radius
    sep = 10.0 * (path.t[1] - path.t[0]) if len(path.t) > 1 else 0.0
    hits = []
    X = path.x
    n = len(X)
    stride = max(1, n // 400)
    idx = np.arange(0, n, stride)
    P = X[idx]
    d2 = np.sum((P[:, None, :] - P[None, :, :]) ** 2, axis=-1)
    ti = path.t[idx]
    cand = np.argwhere(d2 < (20 * tol) ** 2)
    for a, b in cand:
        if ti[b] - ti[a] < sep:
            continue
        # refine on the fine samples around the candidate pair
        ia = slice(max(0, idx[a] - stride), min(n, idx[a] + stride + 1))
        ib = slice(max(0, idx[b] - stride), min(n, idx[b] + stride + 1))
        da = X[ia][:, None, :] - X[ib][None, :, :]
        dd = np.sum(da**2, axis=-1)
        k = np.unravel_index(np.argmin(dd), dd.shape)
        if math.sqrt(dd[k]) < tol:
            t_i = path.t[ia][k[0]]
            t_j = path.t[ib][k[1]]
            vi = path.v[ia][k[0]]
            vj = path.v[ib][k[1]]
            cross = abs(vi[0] * vj[1] - vi[1] * vj[0])
            if cross > 1e-6 and not any(abs(t_i - h[0]) < 5 * sep for h in hits):
                hits.append((float(t_i), float(t_j), X[ia][k[0]].copy()))
    return hits


# ---------------------------------------------------------------------------
# Exponential map and polar normal coordinates


def exp_map(m: MetricField, y, r: float, theta: float, step: Optional[float] = None) -> np.ndarray:
    """Point at geodesic time r from y in the chart-angle direction theta.

    y must lie on the boundary of the extended disk M1; the geodesic must
    stay inside M1 for the whole time r.
    """
    y = np.asarray(y, dtype=float).reshape(2)
    if r < 0:
        raise ValueError("r must be nonnegative")
    if r == 0:
        return y.copy()
    step = m.radius / 400.0 if step is None else step
    v = m.unit(y, np.array([math.cos(theta), math.sin(theta)]))
    n = max(2, int(math.ceil(r / step)))
    h = r / n
    x, vv = y[None].copy(), v[None].copy()
    for _ in range(n):
        x, vv = _rk4_step(m, x, vv, h)
        if np.hypot(x[0, 0], x[0, 1]) > m.radius1 * (1.0 + 1e-9) + 1e-12:
            raise DomainError("exp_map: geodesic left the extended manifold")
    return x[0]


def _exp_batch(m: MetricField, y, r: np.ndarray, theta: np.ndarray, n_steps: int = 64):
    """exp_map vectorized over (r, theta) pairs from a single center y."""
    y = np.asarray(y, dtype=float).reshape(2)
    r = np.asarray(r, dtype=float)
    theta = np.asarray(theta, dtype=float)
    v0 = np.stack([np.cos(theta), np.sin(theta)], axis=-1)
    x = np.broadcast_to(y, v0.shape).copy()
    v = m.unit(x, v0)
    h = (r / n_steps)[..., None]
    for _ in range(n_steps):
        x, v = _rk4_step(m, x, v, h)
    return x


def polar_coords(m: MetricField, y, x, tol: float = 1e-10, max_iter: int = 50):
    """Invert the exponential map: (r, theta) with exp_map(y, r, theta) = x.

    Newton iteration with finite-difference Jacobian; failure to converge is
    reported as a non-simplicity diagnostic.
    """
    y = np.asarray(y, dtype=float).reshape(2)
    x = np.asarray(x, dtype=float).reshape(2)
    d = x - y
    r = float(np.hypot(d[0], d[1]))
    if r < 1e-14:
        return 0.0, 0.0
    th = float(math.atan2(d[1], d[0]))
    # rough metric scaling of the initial radial guess
    r *= float(m.norm_g(0.5 * (x + y), d / np.hypot(d[0], d[1])))
    for _ in range(max_iter):
        hr = max(1e-7, 1e-7 * r)
        ht = 1e-7
        pts = _exp_batch(
            m,
            y,
            np.array([r, r + hr, r, r]),
            np.array([th, th, th + ht, th - ht]),
        )
        F = pts[0] - x
        err = float(np.hypot(F[0], F[1]))
        if err < tol:
            return float(r), float(_wrap_angle(th))
        J = np.column_stack([(pts[1] - pts[0]) / hr, (pts[2] - pts[3]) / (2 * ht)])
        try:
            dlt = np.linalg.solve(J, -F)
        except np.linalg.LinAlgError as e:
            raise NonSimplicityError(f"polar_coords: singular Jacobian at r={r:g}") from e
        # damped update to stay in the chart
        sc = 1.0
        if r + dlt[0] <= 0:
            sc = 0.5 * r / max(1e-30, -dlt[0])
        r += sc * dlt[0]
        th += sc * dlt[1]
    raise NonSimplicityError(
        f"polar_coords: no convergence in {max_iter} iterations (residual {err:.3g})"
    )


def _wrap_angle(a: float) -> float:
    return (a + math.pi) % (2.0 * math.pi) - math.pi


def distance(m: MetricField, y, x) -> float:
    """Geodesic distance via polar coordinates (simple metrics)."""
    r, _ = polar_coords(m, y, x)
    return r


# ---------------------------------------------------------------------------
# Influx grid and Santalo formula


@dataclass
class InfluxGrid:
    """Tensor sampling of the inward boundary sphere bundle.

    Nodes are (s_i, alpha_j): boundary g-arclength x angle from the inward
    g-normal.  ``w`` are product quadrature weights (arclength x angle), and
    ``mu = cos(alpha)`` is the Santalo weight.
    """

    metric: MetricField
    radius: float
    beta: np.ndarray       # (n_s,) chart angles of boundary nodes
    s: np.ndarray          # (n_s,) g-arclength values
    alpha: np.ndarray      # (n_t,)
    w_s: np.ndarray        # (n_s,)
    w_a: np.ndarray        # (n_t,)
    mu: np.ndarray         # (n_s, n_t)
    w: np.ndarray          # (n_s, n_t)

    @property
    def n_s(self) -> int:
        return len(self.beta)

    @property
    def n_theta(self) -> int:
        return len(self.alpha)

    @property
    def shape(self):
        return (self.n_s, self.n_theta)

    def node_states(self):
        """Initial (x, v) for all nodes, flattened to (n_s*n_t, 2)."""
        x, e_n, e_t = self.metric.boundary_frame(self.beta, self.radius)
        ca, sa = np.cos(self.alpha), np.sin(self.alpha)
        v = (
            e_n[:, None, :] * ca[None, :, None]
            + e_t[:, None, :] * sa[None, :, None]
        )
        X = np.broadcast_to(x[:, None, :], v.shape)
        return X.reshape(-1, 2), v.reshape(-1, 2)

    def total_arclength(self) -> float:
        return float(np.sum(self.w_s))

    def key(self):
        return (self.metric.name, round(self.radius, 12), self.n_s, self.n_theta)


def sample_influx(
    m: MetricField, n_s: int, n_theta: int, radius: Optional[float] = None
) -> InfluxGrid:
    """Boundary-arclength x inward-angle tensor grid with Santalo weights.

    Angles span [-pi/2, pi/2] inclusive (tangential end nodes carry mu = 0
    and zero trapezoid weight contribution is avoided by the composite rule's
    half weights).
    """
    if n_s < 4 or n_theta < 4:
        raise ValueError("n_s and n_theta must both be at least 4")
    radius = m.radius if radius is None else radius
    beta = np.linspace(0.0, 2.0 * math.pi, n_s, endpoint=False)
    jac = m.boundary_jacobian(beta, radius)
    dbeta = 2.0 * math.pi / n_s
    w_s = jac * dbeta
    s = np.concatenate([[0.0], np.cumsum(0.5 * (jac[1:] + jac[:-1]) * dbeta)])
    alpha = np.linspace(-0.5 * math.pi, 0.5 * math.pi, n_theta)
    w_a = np.full(n_theta, math.pi / (n_theta - 1))
    w_a[0] *= 0.5
    w_a[-1] *= 0.5
    mu = np.broadcast_to(np.cos(alpha)[None, :], (n_s, n_theta)).copy()
    mu[mu < 0] = 0.0
    w = w_s[:, None] * w_a[None, :]
    return InfluxGrid(m, radius, beta, s, alpha, w_s, w_a, mu, w)


def _disk_quadrature(m: MetricField, radius: float, nr: int = 48, nb: int = 96):
    """Gauss-Legendre x trapezoid quadrature of the disk with dV_g weights."""
    u, wu = np.polynomial.legendre.leggauss(nr)
    r = 0.5 * radius * (u + 1.0)
    wr = 0.5 * radius * wu
    beta = np.linspace(0.0, 2.0 * math.pi, nb, endpoint=False)
    db = 2.0 * math.pi / nb
    R, B = np.meshgrid(r, beta, indexing="ij")
    X = np.stack([R * np.cos(B), R * np.sin(B)], axis=-1)
    vol = np.sqrt(m.detg(X)) * R
    W = wr[:, None] * db * vol
    return X.reshape(-1, 2), W.reshape(-1)


def santalo_check(
    m: MetricField,
    F: Callable[[np.ndarray, np.ndarray], np.ndarray],
    grid: InfluxGrid,
    n_psi: int = 64,
    step: Optional[float] = None,
):
    """Compare the phase-volume integral of F with the influx fan integral.

    F(x, v) must be vectorized over leading axes.  Returns (lhs, rhs,
    rel_err); both sides use independent quadratures.
    """
    radius = grid.radius
    # volume side: disk quadrature x g-angle directions
    X, W = _disk_quadrature(m, radius)
    psi = np.linspace(0.0, 2.0 * math.pi, n_psi, endpoint=False)
    dpsi = 2.0 * math.pi / n_psi
    # g-orthonormal frame by Gram-Schmidt of the chart basis
    e1, e2 = _orthonormal_frame(m, X)
    lhs = 0.0
    for p in psi:
        V = math.cos(p) * e1 + math.sin(p) * e2
        lhs += float(np.sum(W * F(X, V))) * dpsi

    # fan side: flow every influx node, trapezoid in t
    step = m.radius / 400.0 if step is None else step
    X0, V0 = grid.node_states()
    mu = grid.mu.reshape(-1)
    wq = grid.w.reshape(-1)
    live = mu > 1e-13
    rhs = 0.0
    if np.any(live):
        vals = _flow_line_integrals(m, X0[live], V0[live], F, step, radius)
        rhs = float(np.sum(wq[live] * mu[live] * vals))
    denom = max(abs(lhs), abs(rhs), 1e-300)
    rel = abs(lhs - rhs) / denom if (lhs != 0.0 or rhs != 0.0) else 0.0
    return lhs, rhs, rel


def _orthonormal_frame(m: MetricField, X: np.ndarray):
    G = m.g(X)
    e1 = np.zeros_like(X)
    e1[..., 0] = 1.0 / np.sqrt(G[..., 0, 0])
    # Gram-Schmidt on the second chart direction
    b = np.zeros_like(X)
    b[..., 1] = 1.0
    ip = np.einsum("...i,...ij,...j->...", e1, G, b)
    e2 = b - ip[..., None] * e1
    e2 = e2 / m.norm_g(X, e2)[..., None]
    return e1, e2


def _flow_line_integrals(m, X0, V0, F, step, radius):
    """Trapezoid of F along each geodesic from entry to exit."""
    x = X0.copy()
    v = V0.copy()
    n = x.shape[0]
    acc = np.zeros(n)
    prev = F(x, v)
    active = np.ones(n, dtype=bool)
    t = 0.0
    t_max = 50.0 * 2.0 * m.radius1
    while np.any(active):
        if t > t_max:
            raise TrappingError("santalo fan integral: trapping cap exceeded")
        ia = np.flatnonzero(active)
        xa, va = x[ia], v[ia]
        xn, vn = _rk4_step(m, xa, va, step)
        out = np.hypot(xn[:, 0], xn[:, 1]) > radius
        if np.any(out):
            dt, xb, vb = _bisect_exit(m, xa[out], va[out], step, radius)
            fb = F(xb, vb)
            acc[ia[out]] += 0.5 * dt * (prev[ia[out]] + fb)
        keep = ~out
        fn = F(xn[keep], vn[keep])
        acc[ia[keep]] += 0.5 * step * (prev[ia[keep]] + fn)
        x[ia[keep]] = xn[keep]
        v[ia[keep]] = vn[keep]
        pr = prev.copy()
        pr[ia[keep]] = fn
        prev = pr
        active[ia[out]] = False
        t += step
    return acc
