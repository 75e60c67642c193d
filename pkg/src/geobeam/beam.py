"""Gaussian-beam quasimodes and geometrical-optics solutions.

Two solution families of the Helmholtz operator -Delta_g + q - lambda^2:

* GO branch (simple manifolds): u = e^{i lam r} |g|^{-1/4} b(theta) in polar
  normal coordinates centered at a boundary point of the extended disk.
* Beam branch (any nontrapping geodesic): quasimodes
  v = 2^{1/4} lam^{1/4} e^{i lam Phi} a00(t) chi(|y|/delta) in Fermi charts,
  with the complex phase Hessian H solving the Riccati equation
  Hdot + H^2 = F, F = -K (Gaussian curvature), and a00 solving the on-axis
  transport equation.

The 2^{1/4} field normalization makes the transverse cross-section mass equal
to one, so that integrals of phi |v|^2 converge to the ray transform of phi
with constant exactly 1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .manifold import (
    GeodesicPath,
    MetricField,
    NonSimplicityError,
    _christoffel_raw,
    _rk4_step,
    geodesic_flow,
    polar_coords,
)
from .ray import GridFunction

__all__ = [
    "GOSolution",
    "FermiChart",
    "Quasimode",
    "RiccatiBlowupError",
    "ChartInjectivityError",
    "chi_cut",
    "chi1_cut",
    "build_go_solution",
    "extend_geodesic",
    "parallel_transport",
    "fermi_chart_cover",
    "riccati_solve",
    "curvature_forcing",
    "amplitude_solve",
    "assemble_quasimode",
    "pde_residual",
    "concentration_test",
    "cross_term_test",
]


class RiccatiBlowupError(RuntimeError):
    """Im H lost positivity along the Riccati solve."""


class ChartInjectivityError(RuntimeError):
    """Fermi map not injective at the requested tube width."""


# ---------------------------------------------------------------------------
# C2 cutoff functions (quintic smoothstep ramps)


def _smoothstep(u):
    u = np.clip(u, 0.0, 1.0)
    return u**3 * (10.0 - 15.0 * u + 6.0 * u**2)


def _dsmoothstep(u):
    inside = (u > 0.0) & (u < 1.0)
    u = np.clip(u, 0.0, 1.0)
    return np.where(inside, 30.0 * u**2 - 60.0 * u**3 + 30.0 * u**4, 0.0)


def _d2smoothstep(u):
    inside = (u > 0.0) & (u < 1.0)
    u = np.clip(u, 0.0, 1.0)
    return np.where(inside, 60.0 * u - 180.0 * u**2 + 120.0 * u**3, 0.0)


def chi_cut(s, deriv: int = 0):
    """Transverse cutoff: 1 on |s| <= 1/4, 0 on |s| >= 1/2, C2 in between."""
    s = np.asarray(s, dtype=float)
    u = (np.abs(s) - 0.25) / 0.25
    if deriv == 0:
        return 1.0 - _smoothstep(u)
    if deriv == 1:
        return -_dsmoothstep(u) / 0.25 * np.sign(s)
    if deriv == 2:
        return -_d2smoothstep(u) / 0.0625
    raise ValueError("deriv must be 0, 1 or 2")


def chi1_cut(s):
    """Ring cutoff: 1 on 1/4 <= |s| <= 1/2, 0 off [1/5, 2/3]."""
    s = np.abs(np.asarray(s, dtype=float))
    up = _smoothstep((s - 0.2) / 0.05)
    down = 1.0 - _smoothstep((s - 0.5) / (1.0 / 6.0))
    return up * down


# ---------------------------------------------------------------------------
# Geometrical-optics branch (simple manifolds, polar normal coordinates)


@dataclass
class GOSolution:
    """u = e^{+-i lam r(x)} |g(x)|^{-1/4} b(theta(x)) from a center y on the
    boundary of the extended disk."""

    metric: MetricField
    y: np.ndarray
    b: Callable[[np.ndarray], np.ndarray]
    lam: float
    sign: int = +1

    def polar(self, pts: np.ndarray):
        """(r, theta) of each point; Newton inversion of the exponential map."""
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        r = np.empty(len(pts))
        th = np.empty(len(pts))
        for k, x in enumerate(pts):
            r[k], th[k] = polar_coords(self.metric, self.y, x)
        return r, th

    def phase(self, pts: np.ndarray) -> np.ndarray:
        r, _ = self.polar(pts)
        return self.sign * r

    def _polar_density(self, r, th, h: float = 1e-5) -> np.ndarray:
        """sqrt(det g) in polar normal coordinates: |det D exp| sqrt(det g(x))."""
        from .manifold import exp_map

        out = np.empty(len(r))
        for k in range(len(r)):
            xrp = exp_map(self.metric, self.y, r[k] + h, th[k])
            xrm = exp_map(self.metric, self.y, r[k] - h, th[k])
            xtp = exp_map(self.metric, self.y, r[k], th[k] + h)
            xtm = exp_map(self.metric, self.y, r[k], th[k] - h)
            dr = (xrp - xrm) / (2 * h)
            dt = (xtp - xtm) / (2 * h)
            det = abs(dr[0] * dt[1] - dr[1] * dt[0])
            out[k] = det * math.sqrt(float(self.metric.detg(xrp)))
        return out

    def amplitude(self, pts: np.ndarray) -> np.ndarray:
        """|g|^{-1/4} b(theta) with the determinant taken in polar normal
        coordinates (Euclidean case: r^{-1/2} b)."""
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        r, th = self.polar(pts)
        return self._polar_density(r, th) ** (-0.5) * self.b(th)

    def field(self, pts: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        r, th = self.polar(pts)
        amp = self._polar_density(r, th) ** (-0.5) * self.b(th)
        return np.exp(1j * self.sign * self.lam * r) * amp

    def eikonal_residual(self, pts: np.ndarray, h: float = 1e-5) -> np.ndarray:
        """| |dr|_g^2 - 1 | at each point, gradient by central differences."""
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        ex = np.array([h, 0.0])
        ey = np.array([0.0, h])
        rxp, _ = self.polar(pts + ex)
        rxm, _ = self.polar(pts - ex)
        ryp, _ = self.polar(pts + ey)
        rym, _ = self.polar(pts - ey)
        dr = np.stack([(rxp - rxm) / (2 * h), (ryp - rym) / (2 * h)], axis=-1)
        gi = self.metric.ginv(pts)
        return np.abs(np.einsum("...i,...ij,...j->...", dr, gi, dr) - 1.0)

    def transport_residual(self, pts: np.ndarray, h: float = 1e-4) -> np.ndarray:
        """|T_{g,r} a| with T = 2i<dr, d.>_g + i Delta_g r, all by differences."""
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        m = self.metric

        def r_of(x):
            rr, _ = self.polar(x)
            return rr

        def a_of(x):
            return self.amplitude(x)

        dr = _fd_gradient(r_of, pts, h)
        da = _fd_gradient(a_of, pts, h)
        lap_r = _fd_laplace_beltrami(m, r_of, pts, h)
        gi = m.ginv(pts)
        pair = np.einsum("...i,...ij,...j->...", dr, gi, da)
        a = a_of(pts)
        return np.abs(2j * pair + 1j * lap_r * a)


def _fd_gradient(fn, pts, h):
    ex = np.array([h, 0.0])
    ey = np.array([0.0, h])
    gx = (fn(pts + ex) - fn(pts - ex)) / (2 * h)
    gy = (fn(pts + ey) - fn(pts - ey)) / (2 * h)
    return np.stack([gx, gy], axis=-1)


def _fd_laplace_beltrami(m, fn, pts, h):
    """Delta_g f = |g|^{-1/2} d_i(|g|^{1/2} g^{ij} d_j f) by nested differences."""

    def flux(x, i):
        gi = m.ginv(x)
        dg = np.sqrt(m.detg(x))
        df = _fd_gradient(fn, x, h)
        return dg * (gi[..., i, 0] * df[..., 0] + gi[..., i, 1] * df[..., 1])

    ex = np.array([h, 0.0])
    ey = np.array([0.0, h])
    div = (flux(pts + ex, 0) - flux(pts - ex, 0)) / (2 * h)
    div += (flux(pts + ey, 1) - flux(pts - ey, 1)) / (2 * h)
    return div / np.sqrt(m.detg(pts))


def build_go_solution(
    m: MetricField, y, b: Callable, lam: float, sign: int = +1
) -> GOSolution:
    """GO solution centered at a boundary point of the extended disk.

    Raises NonSimplicityError via polar_coords if the exponential map from y
    cannot be inverted.
    """
    y = np.asarray(y, dtype=float).reshape(2)
    ry = np.hypot(y[0], y[1])
    if abs(ry - m.radius1) > 1e-9 * m.radius1:
        raise ValueError("GO center must lie on the boundary of the extended disk")
    if sign not in (+1, -1):
        raise ValueError("sign must be +1 or -1")
    # probe simplicity once at the center of M
    polar_coords(m, y, np.zeros(2))
    return GOSolution(m, y, b, float(lam), sign)


# ---------------------------------------------------------------------------
# Extended geodesics and parallel transport


def extend_geodesic(m: MetricField, x0, v0, step: Optional[float] = None) -> GeodesicPath:
    """Unit-speed geodesic through (x0, v0) extended to the boundary of the
    extended disk in both directions.  Time 0 is at (x0, v0)."""
    step = m.radius / 400.0 if step is None else step
    x0 = np.asarray(x0, dtype=float).reshape(2)
    v0 = m.unit(x0, np.asarray(v0, dtype=float).reshape(2))
    back = geodesic_flow(m, x0, -v0, step=step, radius=m.radius1)
    v_start = m.unit(back.x[-1], -back.v[-1])
    fwd = geodesic_flow(
        m, back.x[-1], v_start, step=step, radius=m.radius1,
        detect_self_intersections=True,
    )
    return GeodesicPath(
        t=fwd.t - back.tau,
        x=fwd.x,
        v=fwd.v,
        tau=fwd.tau - back.tau,
        radius=m.radius1,
        self_intersections=[
            (ti - back.tau, tj - back.tau, xp) for ti, tj, xp in fwd.self_intersections
        ],
    )


def parallel_transport(m: MetricField, path: GeodesicPath) -> np.ndarray:
    """Parallel-transported g-unit normal E2(t) along the path (RK4).

    E2(t_ref) is the +90-degree g-orthonormal rotation of the velocity at the
    first sample.
    """
    x, v, t = path.x, path.v, path.t
    e0 = np.array([-v[0, 1], v[0, 0]])
    G = m.g(x[0])
    # g-orthonormalize against the (unit) velocity
    ip = e0 @ G @ v[0]
    e0 = e0 - ip * v[0]
    e0 = e0 / m.norm_g(x[0], e0)
    E = np.empty_like(x)
    E[0] = e0
    for k in range(len(t) - 1):
        h = t[k + 1] - t[k]

        def rhs(e, xx, vv):
            Gam = _christoffel_raw(m, xx)
            return -np.einsum("ijk,j,k->i", Gam, vv, e)

        xm = 0.5 * (x[k] + x[k + 1])
        vm = 0.5 * (v[k] + v[k + 1])
        k1 = rhs(E[k], x[k], v[k])
        k2 = rhs(E[k] + 0.5 * h * k1, xm, vm)
        k3 = rhs(E[k] + 0.5 * h * k2, xm, vm)
        k4 = rhs(E[k] + h * k3, x[k + 1], v[k + 1])
        E[k + 1] = E[k] + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
    return E


# ---------------------------------------------------------------------------
# Fermi charts


@dataclass
class FermiChart:
    """One Fermi coordinate chart (t, y) along a section of a geodesic."""

    metric: MetricField
    interval: tuple               # (t_lo, t_hi)
    t: np.ndarray                 # samples within the interval
    x: np.ndarray                 # gamma(t)
    v: np.ndarray                 # gamma'(t)
    E2: np.ndarray                # transported unit normal
    delta: float
    H: Optional[np.ndarray] = None
    a00: Optional[np.ndarray] = None
    a_corr: list = field(default_factory=list)   # on-axis corrections a_k, k>=1
    _splines: dict = field(default_factory=dict, repr=False)

    def interp_state(self, tq: np.ndarray):
        tq = np.asarray(tq, dtype=float)
        cols = []
        for arr in (self.x, self.v, self.E2):
            cols.append(
                np.stack([np.interp(tq, self.t, arr[:, k]) for k in range(2)], axis=-1)
            )
        return cols[0], cols[1], cols[2]

    def point(self, tq: np.ndarray, yq: np.ndarray, n_steps: int = 16) -> np.ndarray:
        """Chart map (t, y) -> exp_{gamma(t)}(y E2(t)), batched."""
        tq = np.asarray(tq, dtype=float)
        yq = np.asarray(yq, dtype=float)
        x0, _, e2 = self.interp_state(tq)
        v = e2 * np.sign(yq)[..., None]
        r = np.abs(yq)
        h = (r / n_steps)[..., None]
        x = x0.copy()
        vv = v.copy()
        for _ in range(n_steps):
            x, vv = _rk4_step(self.metric, x, vv, h)
        return np.where(r[..., None] > 0, x, x0)

    def interp_complex(self, arr: np.ndarray, tq: np.ndarray) -> np.ndarray:
        """Cubic interpolation along the axis (linear interpolation leaves
        O(dt^2) noise that second differences of the field would amplify)."""
        from scipy.interpolate import CubicSpline

        key = id(arr)
        spl = self._splines.get(key)
        if spl is None:
            spl = CubicSpline(self.t, arr)
            self._splines[key] = spl
        return spl(np.clip(tq, self.t[0], self.t[-1]))

    def check_injectivity(self, n_probe: int = 24) -> None:
        """Jacobian of the chart map must stay nonsingular across the tube."""
        ht, hy = 1e-5, 1e-5
        tp = np.linspace(self.t[0] + ht, self.t[-1] - ht, n_probe)
        yp = np.linspace(-self.delta / 2, self.delta / 2, 7)
        T, Y = np.meshgrid(tp, yp, indexing="ij")
        Jt = (self.point(T.ravel() + ht, Y.ravel()) - self.point(T.ravel() - ht, Y.ravel())) / (2 * ht)
        Jy = (self.point(T.ravel(), Y.ravel() + hy) - self.point(T.ravel(), Y.ravel() - hy)) / (2 * hy)
        det = Jt[:, 0] * Jy[:, 1] - Jt[:, 1] * Jy[:, 0]
        if not np.all(det > 1e-6):
            raise ChartInjectivityError(
                f"Fermi map degenerate on interval {self.interval} at "
                f"tube width delta={self.delta:g}"
            )


def fermi_chart_cover(
    m: MetricField,
    path: GeodesicPath,
    delta: float,
    split_times: Optional[list] = None,
    overlap: Optional[float] = None,
    E2: Optional[np.ndarray] = None,
) -> list:
    """Cover the geodesic with Fermi charts.

    Without self-intersections a single chart covers the whole path; detected
    (or forced, via split_times) intersection times produce the overlapping
    interval scheme.  Charts share the globally transported frame, so on
    overlaps their maps agree identically.
    """
    E2 = parallel_transport(m, path) if E2 is None else E2
    cuts = sorted(split_times or [t for t, _, _ in path.self_intersections])
    t_lo, t_hi = float(path.t[0]), float(path.t[-1])
    if not cuts:
        intervals = [(t_lo, t_hi)]
    else:
        overlap = overlap if overlap is not None else 0.1 * (t_hi - t_lo)
        edges = [t_lo] + [float(c) for c in cuts] + [t_hi]
        intervals = []
        for a, b in zip(edges[:-1], edges[1:]):
            intervals.append((max(t_lo, a - overlap), min(t_hi, b + overlap)))
    charts = []
    for (a, b) in intervals:
        sel = (path.t >= a - 1e-12) & (path.t <= b + 1e-12)
        ch = FermiChart(
            metric=m,
            interval=(a, b),
            t=path.t[sel],
            x=path.x[sel],
            v=path.v[sel],
            E2=E2[sel],
            delta=delta,
        )
        ch.check_injectivity()
        charts.append(ch)
    return charts


# ---------------------------------------------------------------------------
# Riccati and transport ODEs


def riccati_solve(F: np.ndarray, H0: complex, t: np.ndarray) -> np.ndarray:
    """Solve Hdot + H^2 = F(t) (scalar, n=2) by RK4 on the sample grid.

    F may be sampled on t or a callable.  Im H must stay positive.
    """
    t = np.asarray(t, dtype=float)
    if callable(F):
        Fs = np.asarray(F(t), dtype=float)
    else:
        Fs = np.asarray(F, dtype=float)
        if Fs.shape != t.shape:
            raise ValueError("F samples must match the t grid")
    H0 = complex(H0)
    if H0.imag <= 0:
        raise ValueError("Riccati seed requires Im H0 > 0")
    H = np.empty(len(t), dtype=complex)
    H[0] = H0
    # support both orientations of the grid (the seed may sit mid-path)
    if len(t) > 1 and t[1] < t[0]:
        ts, Fss = t[::-1], Fs[::-1]
    else:
        ts, Fss = t, Fs
    Fi = lambda tt: np.interp(tt, ts, Fss)
    for k in range(len(t) - 1):
        h = t[k + 1] - t[k]
        tk = t[k]

        def f(Hv, tt):
            return Fi(tt) - Hv * Hv

        with np.errstate(over="ignore", invalid="ignore"):
            k1 = f(H[k], tk)
            k2 = f(H[k] + 0.5 * h * k1, tk + 0.5 * h)
            k3 = f(H[k] + 0.5 * h * k2, tk + 0.5 * h)
            k4 = f(H[k] + h * k3, tk + h)
            H[k + 1] = H[k] + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        if not np.isfinite(H[k + 1]) or H[k + 1].imag <= 0:
            raise RiccatiBlowupError(
                f"solution blew up or Im H became nonpositive at t={t[k + 1]:.6g} "
                "(focal point reached, bad seed, or step too large)"
            )
    return H


def det_imh_identity(H: np.ndarray, t: np.ndarray) -> float:
    """Max relative residual of det Im H(t) = det Im H(t0) e^{-2 int tr Re H}."""
    from scipy.integrate import cumulative_simpson

    integ = cumulative_simpson(H.real, x=t, initial=0.0)
    rhs = H[0].imag * np.exp(-2.0 * integ)
    return float(np.max(np.abs(H.imag - rhs) / np.abs(rhs)))


def curvature_forcing(m: MetricField, path_or_chart) -> np.ndarray:
    """F(t) = -K(gamma(t)): the n=2 Jacobi-equation forcing of the Riccati
    equation (ydotdot + K y = 0 with H = ydot/y)."""
    x = path_or_chart.x
    return -np.asarray(m.curvature(x))


def amplitude_solve(H: np.ndarray, t: np.ndarray, t0_index: int, n: int = 2):
    """a00(t) = c2 exp(-1/2 int_{t0}^t tr H), c2 = (2 pi)^{(1-n)/4} |det Im H(t0)|^{1/4}.

    Returns the samples; the weight identity |a00|^2 |det Im H|^{-1/2} =
    (2 pi)^{(1-n)/2} then holds identically in t.
    """
    from scipy.integrate import cumulative_simpson

    H = np.asarray(H)
    t = np.asarray(t, dtype=float)
    c2 = (2.0 * math.pi) ** ((1 - n) / 4.0) * abs(H[t0_index].imag) ** 0.25
    integ = cumulative_simpson(H.real, x=t, initial=0.0) + 1j * cumulative_simpson(
        H.imag, x=t, initial=0.0
    )
    integ = integ - integ[t0_index]
    return c2 * np.exp(-0.5 * integ)


def _solve_correction(H, t, a_prev, q_on_axis):
    """On-axis transport hierarchy: 2i a_{k+1}' + i (tr H) a_{k+1} = (Delta_g - q) a_k,
    with the on-axis reduction (Delta_g - q) a_k ~ a_k'' - q a_k and zero initial data."""
    ap = np.gradient(a_prev, t)
    app = np.gradient(ap, t)
    src = -0.5j * (app - q_on_axis * a_prev)
    a = np.zeros(len(t), dtype=complex)
    for k in range(len(t) - 1):
        h = t[k + 1] - t[k]

        def f(av, idx_frac):
            Hm = H[k] if idx_frac == 0 else 0.5 * (H[k] + H[k + 1]) if idx_frac == 1 else H[k + 1]
            sm = src[k] if idx_frac == 0 else 0.5 * (src[k] + src[k + 1]) if idx_frac == 1 else src[k + 1]
            return -0.5 * Hm * av + sm

        k1 = f(a[k], 0)
        k2 = f(a[k] + 0.5 * h * k1, 1)
        k3 = f(a[k] + 0.5 * h * k2, 1)
        k4 = f(a[k] + h * k3, 2)
        a[k + 1] = a[k] + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
    return a


# ---------------------------------------------------------------------------
# Quasimode assembly


@dataclass
class Quasimode:
    metric: MetricField
    path: GeodesicPath
    charts: list
    lam: float
    a_exp: float
    delta: float
    c_delta: float
    n_corr: int = 0
    q_on_axis: Optional[np.ndarray] = None
    # single chart over the full path carrying the global phase/amplitude data;
    # quadrature-based measurements integrate on it (tube coordinates)
    global_chart: Optional[FermiChart] = None
    # field samples when assembled on a mesh (filled by helmholtz workflows)
    mesh_values: Optional[np.ndarray] = None

    # field normalization: lam^{(n-1)/4} with the cross-section unit-mass factor
    @property
    def norm_factor(self) -> float:
        return 2.0**0.25 * self.lam**0.25

    def partition(self, tq: np.ndarray) -> list:
        """eta_j(t) samples per chart with sum eta_j = 1 on the path, so the
        glued field reproduces the single-chart field exactly (the charts
        restrict the same global phase and amplitude data)."""
        tq = np.asarray(tq, dtype=float)
        n = len(self.charts)
        if n == 1:
            return [np.ones_like(tq)]
        etas2 = []
        for j, ch in enumerate(self.charts):
            a, b = ch.interval
            w = np.ones_like(tq)
            if j > 0:
                pa, pb = self.charts[j - 1].interval
                lo, hi = a, pb          # overlap with previous chart
                s = np.clip((tq - lo) / max(hi - lo, 1e-300), 0.0, 1.0)
                w = w * np.sin(0.5 * math.pi * s) ** 2
            if j < n - 1:
                na, nb = self.charts[j + 1].interval
                lo, hi = na, b          # overlap with next chart
                s = np.clip((tq - lo) / max(hi - lo, 1e-300), 0.0, 1.0)
                w = w * np.cos(0.5 * math.pi * s) ** 2
            w[(tq < a) | (tq > b)] = 0.0
            etas2.append(w)
        tot = np.sum(etas2, axis=0)
        return [e / np.where(tot > 0, tot, 1.0) for e in etas2]

    def amplitude_total(self, ch: FermiChart, tq: np.ndarray) -> np.ndarray:
        a = ch.interp_complex(ch.a00, tq)
        for k, ak in enumerate(ch.a_corr, start=1):
            a = a + self.lam ** (-k) * ch.interp_complex(ak, tq)
        return a

    def eval_chart_coords(self, ch: FermiChart, T: np.ndarray, Y: np.ndarray):
        """v restricted to one chart, given its Fermi coordinates directly."""
        H = ch.interp_complex(ch.H, T)
        a = self.amplitude_total(ch, T)
        Phi = T + 0.5 * H * Y**2
        cut = chi_cut(Y / self.delta)
        return self.norm_factor * np.exp(1j * self.lam * Phi) * a * cut

    def eval(self, pts: np.ndarray, newton_iters: int = 4) -> np.ndarray:
        """Evaluate the assembled field at arbitrary chart-domain points."""
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        out = np.zeros(len(pts), dtype=complex)
        etas_needed = len(self.charts) > 1
        for j, ch in enumerate(self.charts):
            T, Y, ok = _fermi_invert(ch, pts, self.delta, newton_iters)
            if not np.any(ok):
                continue
            vals = np.zeros(len(pts), dtype=complex)
            vals[ok] = self.eval_chart_coords(ch, T[ok], Y[ok])
            if etas_needed:
                eta = self.partition(T)[j]
                vals[ok] *= eta[ok]
            out += vals
        return out

    def export_csv(self, path, pts: np.ndarray) -> None:
        vals = self.eval(pts)
        rows = np.column_stack([pts, vals.real, vals.imag])
        np.savetxt(path, rows, delimiter=",", header="x1,x2,re_v,im_v", comments="")


def _fermi_invert(ch: FermiChart, pts: np.ndarray, delta: float, iters: int = 4):
    """Fermi coordinates (t, y) of points near the tube; vectorized Newton.

    Returns (T, Y, ok) where ok marks points that landed inside the chart's
    (t, y) rectangle with |y| below the cutoff support.
    """
    m = ch.metric
    # initial guess: nearest path sample, normal component in the frame
    # (strided + chunked distance search keeps memory bounded for large
    # point sets; Newton refines away the coarser seed)
    stride = max(1, len(ch.t) // 256)
    xs = ch.x[::stride]
    base = np.arange(0, len(ch.t), stride)
    npts = len(pts)
    k = np.empty(npts, dtype=int)
    for i0 in range(0, npts, 65536):
        sl = slice(i0, min(i0 + 65536, npts))
        d = pts[sl, None, :] - xs[None, :, :]
        k[sl] = base[np.argmin(np.einsum("pki,pki->pk", d, d), axis=1)]
    T = ch.t[k]
    dx = pts - ch.x[k]
    G = m.g(ch.x[k])
    Y = np.einsum("pi,pij,pj->p", dx, G, ch.E2[k])
    T = T + np.einsum("pi,pij,pj->p", dx, G, ch.v[k])
    ht, hy = 1e-6, 1e-6
    for _ in range(iters):
        T = np.clip(T, ch.t[0], ch.t[-1])
        P0 = ch.point(T, Y)
        F = P0 - pts
        # Jacobian at a clipped interior point (interp clamps at the ends)
        Tc = np.clip(T, ch.t[0] + ht, ch.t[-1] - ht)
        Jt = (ch.point(Tc + ht, Y) - ch.point(Tc - ht, Y)) / (2 * ht)
        Jy = (ch.point(T, Y + hy) - ch.point(T, Y - hy)) / (2 * hy)
        det = Jt[:, 0] * Jy[:, 1] - Jt[:, 1] * Jy[:, 0]
        det = np.where(np.abs(det) < 1e-14, 1e-14, det)
        dT = (-F[:, 0] * Jy[:, 1] + F[:, 1] * Jy[:, 0]) / det
        dY = (-Jt[:, 0] * F[:, 1] + Jt[:, 1] * F[:, 0]) / det
        T = T + dT
        Y = Y + dY
    T = np.clip(T, ch.t[0] - 1e-9, ch.t[-1] + 1e-9)
    res = ch.point(T, Y) - pts
    ok = (
        (np.abs(Y) <= 0.5 * delta)
        & (T >= ch.t[0] - 1e-9)
        & (T <= ch.t[-1] + 1e-9)
        & (np.hypot(res[:, 0], res[:, 1]) < 1e-7 * m.radius)
    )
    return T, Y, ok


def assemble_quasimode(
    m: MetricField,
    path: GeodesicPath,
    lam: float,
    a: float = 0.4,
    q_terms: int = 0,
    q: Optional[Callable] = None,
    c_delta: float = 3.0,
    split_times: Optional[list] = None,
    mesh=None,
) -> Quasimode:
    """Build the Gaussian-beam quasimode along an extended geodesic.

    The Riccati seed H(t_mid) = i is placed at the middle of the path; the
    tube width is delta = c_delta * lam^{-a}.
    """
    if not (1.0 / 3.0 < a < 0.5):
        raise ValueError("decay exponent a must lie in (1/3, 1/2)")
    if lam <= 0:
        raise ValueError("lambda must be positive")
    delta = c_delta * lam ** (-a)
    E2 = parallel_transport(m, path)
    charts = fermi_chart_cover(m, path, delta, split_times=split_times, E2=E2)
    # phase and amplitude data are global along the geodesic; charts restrict
    # them, so overlapping charts agree identically
    F = -np.asarray(m.curvature(path.x))
    mid = len(path.t) // 2
    H_fwd = riccati_solve(F[mid:], 1j, path.t[mid:])
    H_bwd = riccati_solve(F[mid::-1], 1j, path.t[mid::-1])
    Hg = np.concatenate([H_bwd[::-1], H_fwd[1:]])
    a00g = amplitude_solve(Hg, path.t, mid)
    q_axis = (
        None if q is None else np.asarray(q(path.x), dtype=float)
    )
    corr = []
    prev = a00g
    for _ in range(q_terms):
        prev = _solve_correction(
            Hg, path.t, prev, np.zeros(len(path.t)) if q_axis is None else q_axis
        )
        corr.append(prev)
    for ch in charts:
        sel = np.searchsorted(path.t, ch.t)
        ch.H = Hg[sel]
        ch.a00 = a00g[sel]
        ch.a_corr = [c[sel] for c in corr]
    gch = FermiChart(
        metric=m,
        interval=(float(path.t[0]), float(path.t[-1])),
        t=path.t,
        x=path.x,
        v=path.v,
        E2=E2,
        delta=delta,
        H=Hg,
        a00=a00g,
        a_corr=corr,
    )
    qm = Quasimode(
        metric=m,
        path=path,
        charts=charts,
        lam=float(lam),
        a_exp=a,
        delta=delta,
        c_delta=c_delta,
        n_corr=q_terms,
        q_on_axis=q_axis,
        global_chart=gch,
    )
    if mesh is not None:
        qm.mesh_values = qm.eval(mesh.vertices)
    return qm


# ---------------------------------------------------------------------------
# Chart-space quadrature helpers


def _chart_grid(qm: Quasimode, ch: FermiChart, nt: int, ny: int):
    ny = ny + 1 - (ny % 2)        # odd count so that y = 0 is a grid line
    t = np.linspace(ch.t[0], ch.t[-1], nt)
    y = np.linspace(-0.5 * qm.delta, 0.5 * qm.delta, ny)
    T, Y = np.meshgrid(t, y, indexing="ij")
    return t, y, T, Y


def _chart_points_grid(ch: FermiChart, t: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Chart-map images on a tensor grid, marching the normal geodesics
    outward from the axis one y-step at a time (one RK4 batch per row)."""
    m = ch.metric
    x0, _, e2 = ch.interp_state(t)
    nt, ny = len(t), len(y)
    k0 = int(np.argmin(np.abs(y)))
    P = np.empty((nt, ny, 2))
    P[:, k0] = x0
    for sgn, rng in ((+1, range(k0 + 1, ny)), (-1, range(k0 - 1, -1, -1))):
        x, v = x0.copy(), sgn * e2.copy()
        y_prev = y[k0]
        for k in rng:
            h = sgn * (y[k] - y_prev)
            x, v = _rk4_step(m, x, v, h)
            P[:, k] = x
            y_prev = y[k]
    return P


def _chart_metric_fields(qm: Quasimode, ch: FermiChart, t, y):
    """Pullback metric on the grid: inverse G^{ij}, sqrt(det G), and the
    images P of the chart map; derivatives by differences of the point grid."""
    m = ch.metric
    P = _chart_points_grid(ch, t, y)
    Jt = np.gradient(P, t, axis=0, edge_order=2)
    Jy = np.gradient(P, y, axis=1, edge_order=2)
    gx = m.g(P.reshape(-1, 2)).reshape(P.shape[:2] + (2, 2))
    J = np.stack([Jt, Jy], axis=-1)          # dx^i / d(t,y)^j
    G = np.einsum("pqia,pqij,pqjb->pqab", J, gx, J)
    det = G[..., 0, 0] * G[..., 1, 1] - G[..., 0, 1] * G[..., 1, 0]
    Gi = np.empty_like(G)
    Gi[..., 0, 0] = G[..., 1, 1]
    Gi[..., 1, 1] = G[..., 0, 0]
    Gi[..., 0, 1] = -G[..., 0, 1]
    Gi[..., 1, 0] = -G[..., 1, 0]
    Gi = Gi / det[..., None, None]
    return P, Gi, np.sqrt(det)


def _first_order_coeffs(Gi, sq, t, y):
    """b^j = |G|^{-1/2} d_i(|G|^{1/2} G^{ij}) on the grid (FD in chart coords)."""
    bt = np.gradient(sq * Gi[..., 0, 0], t, axis=0) + np.gradient(
        sq * Gi[..., 1, 0], y, axis=1
    )
    by = np.gradient(sq * Gi[..., 0, 1], t, axis=0) + np.gradient(
        sq * Gi[..., 1, 1], y, axis=1
    )
    return bt / sq, by / sq


def pde_residual(
    m: MetricField,
    q: Optional[Callable],
    qm: Quasimode,
    lam: Optional[float] = None,
    nt: int = 600,
    ny: int = 400,
    method: str = "chart",
    mesh=None,
):
    """Residual field and L2(M) norm of (-Delta_g + q - lam^2) v.

    method="chart" evaluates the factored-phase identity
        L(e^{i lam Phi} w) = e^{i lam Phi} [lam^2(|dPhi|^2-1)w
                              - i lam (2<dPhi,dw> + (Delta Phi) w) - Delta w + q w]
    on the Fermi chart, where every factor is smooth and free of lam-scale
    oscillation; this measures the true continuum residual without the mesh
    dispersion error that dominates any affordable discrete application.
    method="mesh" applies the discrete FEM operator instead.
    """
    lam = qm.lam if lam is None else lam
    if method == "mesh":
        from . import helmholtz as hz

        if mesh is None:
            raise ValueError("method='mesh' requires a mesh")
        hz.check_resolution(mesh, lam)
        vals = qm.mesh_values
        if vals is None:
            vals = qm.eval(mesh.vertices)
        res = hz.apply_operator(mesh, m, q, lam, vals)
        return res, hz.l2_norm(mesh, res)
    if method != "chart":
        raise ValueError("method must be 'chart' or 'mesh'")

    total = 0.0
    fields = []
    for ch in [qm.global_chart]:
        t, y, T, Y = _chart_grid(qm, ch, nt, ny)
        P, Gi, sq = _chart_metric_fields(qm, ch, t, y)
        bt, by = _first_order_coeffs(Gi, sq, t, y)

        H = ch.interp_complex(ch.H, T)
        F = np.interp(T, ch.t, curvature_forcing(m, ch))
        Hd = F - H * H
        Hdd_t = np.gradient(Hd, t, axis=0)

        a = qm.amplitude_total(ch, T)
        cut = chi_cut(Y / qm.delta)
        dcut = chi_cut(Y / qm.delta, 1) / qm.delta
        d2cut = chi_cut(Y / qm.delta, 2) / qm.delta**2

        ae = a
        ae_t = np.gradient(ae, t, axis=0)
        ae_tt = np.gradient(ae_t, t, axis=0)
        w = ae * cut
        wt = ae_t * cut
        wy = ae * dcut
        wtt = ae_tt * cut
        wyy = ae * d2cut
        wty = ae_t * dcut

        Phi_t = 1.0 + 0.5 * Hd * Y**2
        Phi_y = H * Y
        Phi_tt = 0.5 * Hdd_t * Y**2
        Phi_yy = H
        Phi_ty = Hd * Y

        def pair(u1, u2, v1, v2):
            return (
                Gi[..., 0, 0] * u1 * v1
                + Gi[..., 0, 1] * (u1 * v2 + u2 * v1)
                + Gi[..., 1, 1] * u2 * v2
            )

        eik = pair(Phi_t, Phi_y, Phi_t, Phi_y) - 1.0
        lapPhi = (
            Gi[..., 0, 0] * Phi_tt
            + 2 * Gi[..., 0, 1] * Phi_ty
            + Gi[..., 1, 1] * Phi_yy
            + bt * Phi_t
            + by * Phi_y
        )
        lapw = (
            Gi[..., 0, 0] * wtt
            + 2 * Gi[..., 0, 1] * wty
            + Gi[..., 1, 1] * wyy
            + bt * wt
            + by * wy
        )
        qv = 0.0 if q is None else np.asarray(q(P), dtype=float)
        R = (
            lam**2 * eik * w
            - 1j * lam * (2.0 * pair(Phi_t, Phi_y, wt, wy) + lapPhi * w)
            - lapw
            + qv * w
        )
        gauss = np.exp(-lam * H.imag * Y**2)
        inM = np.hypot(P[..., 0], P[..., 1]) <= m.radius
        dt = t[1] - t[0]
        dy = y[1] - y[0]
        total += float(
            np.sum(np.abs(R) ** 2 * gauss * sq * inM) * dt * dy
        ) * qm.norm_factor**2
        fields.append((T, Y, qm.norm_factor * R))
    return fields, math.sqrt(total)


def concentration_test(
    m: MetricField,
    qm: Quasimode,
    phi: Callable,
    nt: int = 1200,
    ny: int = 801,
):
    """(integral of phi |v|^2 dV_g, I phi(gamma intersect M), gap).

    Both sides by independent quadratures: chart-space product rule for the
    field (the integrand |v|^2 is oscillation-free), path trapezoid for the
    ray transform.
    """
    lhs = 0.0
    for ch in [qm.global_chart]:
        t, y, T, Y = _chart_grid(qm, ch, nt, ny)
        P, _, sq = _chart_metric_fields(qm, ch, t, y)
        H = ch.interp_complex(ch.H, T)
        a = qm.amplitude_total(ch, T)
        cut = chi_cut(Y / qm.delta)
        dens = (
            qm.norm_factor**2
            * np.asarray(phi(P), dtype=float)
            * np.abs(a) ** 2
            * cut**2
            * np.exp(-qm.lam * H.imag * Y**2)
        )
        inM = np.hypot(P[..., 0], P[..., 1]) <= m.radius
        lhs += float(np.sum(dens * sq * inM) * (t[1] - t[0]) * (y[1] - y[0]))
    # ray transform of phi along the portion of the path inside M, with the
    # boundary crossing times recovered by interpolation
    r = np.hypot(qm.path.x[:, 0], qm.path.x[:, 1])
    inside = r <= m.radius
    tt = list(qm.path.t[inside])
    xx = list(qm.path.x[inside])
    for k in range(len(r) - 1):
        if inside[k] != inside[k + 1]:
            frac = (m.radius - r[k]) / (r[k + 1] - r[k])
            tc = qm.path.t[k] + frac * (qm.path.t[k + 1] - qm.path.t[k])
            tt.append(tc)
            xx.append(qm.path.x[k] + frac * (qm.path.x[k + 1] - qm.path.x[k]))
    order = np.argsort(tt)
    tt = np.asarray(tt)[order]
    xx = np.asarray(xx)[order]
    vals = np.asarray(phi(xx), dtype=float)
    rhs = float(np.trapezoid(vals, tt))
    return lhs, rhs, lhs - rhs


def cross_term_test(
    m: MetricField,
    qm1: Quasimode,
    qm2: Quasimode,
    phi: Callable,
    ppw: int = 8,
):
    """| integral of phi v1 conj(v2) dV_g | over the tube intersection.

    Refuses identical geodesics; warns (via returned flag) when the crossing
    is nearly tangential.
    """
    p1, p2 = qm1.path, qm2.path
    if p1 is p2 or (
        p1.x.shape == p2.x.shape
        and np.allclose(p1.x, p2.x)
        and np.allclose(p1.v, p2.v)
    ):
        raise ValueError("cross_term_test requires two distinct geodesics")
    # locate the transversal crossing from the sampled paths
    d2 = np.sum((p1.x[:, None, :] - p2.x[None, :, :]) ** 2, axis=-1)
    i1, i2 = np.unravel_index(np.argmin(d2), d2.shape)
    if math.sqrt(d2[i1, i2]) > 0.5 * (qm1.delta + qm2.delta):
        return 0.0, {"intersects": False, "angle": None}
    v1, v2 = p1.v[i1], p2.v[i2]
    G = m.g(p1.x[i1])
    ca = abs(v1 @ G @ v2) / (m.norm_g(p1.x[i1], v1) * m.norm_g(p2.x[i2], v2))
    angle = math.degrees(math.acos(min(1.0, ca)))
    info = {"intersects": True, "angle": angle, "tangential_warning": angle < 10.0}
    # quadrature box around the crossing, resolving the 2 lam oscillation
    c = 0.5 * (p1.x[i1] + p2.x[i2])
    half = 0.5 * max(qm1.delta, qm2.delta) + 2.0 / max(qm1.lam, qm2.lam)
    lam = max(qm1.lam, qm2.lam)
    h = 2.0 * math.pi / (2.0 * lam * ppw)
    n = int(math.ceil(2 * half / h)) + 1
    n = min(n, 1400)
    ax = np.linspace(c[0] - half, c[0] + half, n)
    ay = np.linspace(c[1] - half, c[1] + half, n)
    X, Yg = np.meshgrid(ax, ay, indexing="ij")
    pts = np.stack([X, Yg], axis=-1).reshape(-1, 2)
    inM = np.hypot(pts[:, 0], pts[:, 1]) <= m.radius
    vals = np.zeros(len(pts), dtype=complex)
    if np.any(inM):
        va = qm1.eval(pts[inM])
        vb = qm2.eval(pts[inM])
        pv = np.asarray(phi(pts[inM]), dtype=float)
        vol = np.sqrt(m.detg(pts[inM]))
        vals[inM] = pv * va * np.conj(vb) * vol
    dx = ax[1] - ax[0]
    dy = ay[1] - ay[0]
    return abs(complex(np.sum(vals) * dx * dy)), info
