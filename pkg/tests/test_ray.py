import json
import math

import numpy as np
import pytest
from scipy.special import erf

from geobeam import ray as R
from geobeam.manifold import sample_influx

from conftest import smooth_phantom


@pytest.fixture(scope="module")
def gaussian_f(m_euc):
    sig = 0.25
    return R.GridFunction.from_function(
        lambda P: np.exp(-(P[..., 0] ** 2 + P[..., 1] ** 2) / (2 * sig**2)),
        m_euc.radius1,
        64,
    )


# ---------------------------------------------------------------------------
# GridFunction basics


def test_grid_function_geometry(m_euc):
    f = R.GridFunction(np.ones((33, 33)), 1.2)
    assert f.spacing == pytest.approx(2 * 1.2 / 32)
    # values outside the disk are masked to zero
    assert f.values[0, 0] == 0.0
    assert f.values[16, 16] == 1.0


def test_grid_function_interp_exact_on_linear():
    f = R.GridFunction.from_function(lambda P: P[..., 0] + 2 * P[..., 1], 1.0, 41)
    pts = np.array([[0.11, 0.23], [-0.4, 0.05]])
    assert np.allclose(f.interp(pts), pts[:, 0] + 2 * pts[:, 1], atol=1e-12)


def test_grid_inner_euclidean_area(m_euc):
    f = R.GridFunction.from_function(lambda P: np.ones(P.shape[:-1]), 1.0, 201)
    # Riemann sum of the indicator of the unit disk
    assert R.grid_inner(f, f, m_euc) == pytest.approx(math.pi, rel=2e-2)


def test_serialization_roundtrip(tmp_path, m_euc):
    f = R.GridFunction.from_function(lambda P: P[..., 0], 1.2, 17, "euclidean")
    f.save(str(tmp_path / "f"))
    hdr = json.loads((tmp_path / "f.json").read_text())
    assert hdr["n"] == 17 and hdr["kind"] == "grid"
    rows = np.loadtxt(tmp_path / "f.csv", delimiter=",", skiprows=1)
    assert rows.shape == (17 * 17, 3)

    grid = sample_influx(m_euc, 8, 8)
    d = R.RayData(np.ones(grid.shape), grid)
    d.save(str(tmp_path / "d"))
    hdr = json.loads((tmp_path / "d.json").read_text())
    assert hdr["n_s"] == 8


# ---------------------------------------------------------------------------
# Forward transform


def test_forward_gaussian_closed_form(m_euc, fan64, gaussian_f):
    """Chords of the unit disk against the analytic line integral of a
    centered Gaussian."""
    If = R.forward_transform(m_euc, gaussian_f, fan64)
    X0, V0 = fan64.node_states()
    sig = 0.25
    d = np.abs(X0[:, 0] * V0[:, 1] - X0[:, 1] * V0[:, 0])
    L = np.sqrt(np.maximum(1 - d**2, 0.0))
    exact = (
        np.exp(-(d**2) / (2 * sig**2))
        * sig
        * math.sqrt(2 * math.pi)
        * erf(L / (sig * math.sqrt(2)))
    ).reshape(fan64.shape)
    mask = fan64.mu > 1e-6
    err = np.max(np.abs(If.values - exact)[mask]) / np.max(np.abs(exact))
    assert err < 5e-3


def test_forward_linearity(m_euc, fan64, gaussian_f):
    f2 = R.GridFunction.from_function(smooth_phantom, m_euc.radius1, 64)
    a = R.forward_transform(m_euc, gaussian_f, fan64).values
    b = R.forward_transform(m_euc, f2, fan64).values
    comb = R.GridFunction(2.0 * gaussian_f.values - 0.5 * f2.values, m_euc.radius1)
    c = R.forward_transform(m_euc, comb, fan64).values
    assert np.allclose(c, 2.0 * a - 0.5 * b, atol=1e-12)


def test_forward_zero(m_euc, fan64):
    z = R.GridFunction(np.zeros((64, 64)), m_euc.radius1)
    assert np.all(R.forward_transform(m_euc, z, fan64).values == 0.0)


def test_forward_rotation_equivariance(m_euc, fan64, gaussian_f):
    """Rotating f by 90 degrees shifts the boundary coordinate by a quarter
    period; grid and fan are both invariant under that rotation."""
    f_rot = R.GridFunction(np.rot90(gaussian_f.values, -1), m_euc.radius1)
    a = R.forward_transform(m_euc, gaussian_f, fan64).values
    b = R.forward_transform(m_euc, f_rot, fan64).values
    assert np.allclose(b, np.roll(a, 16, axis=0), atol=1e-8)


# ---------------------------------------------------------------------------
# Adjoint


def test_adjoint_of_constant_is_2pi(m_euc, fan64):
    h = R.RayData(np.ones(fan64.shape), fan64)
    Ah = R.adjoint_transform(m_euc, h, 64)
    P = Ah.points()
    inner = np.hypot(P[..., 0], P[..., 1]) < 1.0 - 1e-9
    assert np.allclose(Ah.values[inner], 2 * math.pi, atol=1e-9)


def test_adjoint_identity_flat(m_euc, fan64):
    f = R.GridFunction.from_function(smooth_phantom, m_euc.radius1, 64)
    If = R.forward_transform(m_euc, f, fan64)
    h = R.RayData(
        np.cos(fan64.s)[:, None] * np.cos(fan64.alpha)[None, :] ** 2, fan64
    )
    Ah = R.adjoint_transform(m_euc, h, 64)
    lhs = If.l2_mu_inner(h)
    rhs = R.grid_inner(f, Ah, m_euc)
    assert abs(lhs - rhs) / abs(lhs) < 1e-3


def test_adjoint_identity_curved(m_bump, fan32_bump):
    f = R.GridFunction.from_function(smooth_phantom, m_bump.radius1, 48)
    If = R.forward_transform(m_bump, f, fan32_bump)
    g = fan32_bump
    h = R.RayData(1.0 + np.sin(2 * g.s)[:, None] * np.cos(g.alpha)[None, :] ** 2, g)
    Ah = R.adjoint_transform(m_bump, h, 48)
    lhs = If.l2_mu_inner(h)
    rhs = R.grid_inner(f, Ah, m_bump)
    assert abs(lhs - rhs) / abs(lhs) < 2e-3


# ---------------------------------------------------------------------------
# Normal operator and inversion


def test_normal_operator_matches_composition(m_euc, fan64, gaussian_f):
    Nf = R.normal_operator(m_euc, gaussian_f, fan64)
    If = R.forward_transform(m_euc, gaussian_f, fan64)
    Ah = R.adjoint_transform(m_euc, If, 64)
    assert np.allclose(Nf.values, Ah.values, atol=1e-12)


def test_invert_ray_recovers_phantom(m_euc, fan64):
    f = R.GridFunction.from_function(smooth_phantom, m_euc.radius1, 64)
    d = R.forward_transform(m_euc, f, fan64)
    rec, info = R.invert_ray(m_euc, d, n=64)
    diff = R.GridFunction(rec.values - f.values, f.radius)
    assert diff.l2_norm(m_euc) / f.l2_norm(m_euc) < 0.05
    assert info["iterations"] > 0
    assert info["residuals"][-1] < 1e-2


def test_invert_ray_stagnation_raises(m_euc, fan64):
    f = R.GridFunction.from_function(smooth_phantom, m_euc.radius1, 64)
    d = R.forward_transform(m_euc, f, fan64)
    with pytest.raises(R.ConvergenceError) as ei:
        R.invert_ray(m_euc, d, n=64, max_iter=1)
    assert len(ei.value.history) >= 1


# ---------------------------------------------------------------------------
# Stability probe


def test_stability_probe_constants(m_euc):
    phantoms = [
        R.GridFunction.from_function(smooth_phantom, m_euc.radius1, 48),
        R.GridFunction.from_function(
            lambda P: np.exp(-((P[..., 0] - 0.2) ** 2 + P[..., 1] ** 2) / 0.08),
            m_euc.radius1,
            48,
        ),
        R.GridFunction(np.zeros((48, 48)), m_euc.radius1),
    ]
    rep = R.stability_probe(m_euc, phantoms, n_s=32, n_theta=32)
    assert len(rep.rows) == 2  # the zero phantom is excluded
    assert rep.C1 > 0 and np.isfinite(rep.C1)
    assert rep.C2 > 0 and np.isfinite(rep.C2)
    for l2f, h1, r1, h2, h2f, r2 in rep.rows:
        assert h2 >= h1 >= 0 and r1 == pytest.approx(l2f / h1)
