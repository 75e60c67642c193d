import json
import math

import numpy as np
import pytest
from scipy.special import j0

from geobeam import helmholtz as H


@pytest.fixture(scope="module")
def mesh64(m_euc):
    return H.build_mesh(m_euc, 1.0 / 64.0)


@pytest.fixture(scope="module")
def mass64(m_euc, mesh64):
    _, M = H._assemble(m_euc, mesh64, np.zeros(mesh64.n_vertices))
    return M


def boundary_angles(mesh):
    b = mesh.vertices[mesh.boundary]
    return np.arctan2(b[:, 1], b[:, 0])


# ---------------------------------------------------------------------------
# Mesh


def test_mesh_deterministic(m_euc, mesh64):
    again = H.build_mesh(m_euc, 1.0 / 64.0)
    assert mesh64.hash() == again.hash()
    assert np.array_equal(mesh64.vertices, again.vertices)


def test_mesh_area_and_circumference(m_euc, mesh64):
    p = mesh64.vertices[mesh64.triangles]
    area = 0.5 * (
        (p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1])
        - (p[:, 1, 1] - p[:, 0, 1]) * (p[:, 2, 0] - p[:, 0, 0])
    )
    assert np.all(area > 0)  # positive orientation
    assert area.sum() == pytest.approx(math.pi, abs=5 * mesh64.h_mesh**2)
    b = mesh64.vertices[mesh64.boundary]
    ln = np.sum(np.hypot(*(np.roll(b, -1, axis=0) - b).T))
    assert ln == pytest.approx(2 * math.pi, abs=5 * mesh64.h_mesh**2)


def test_mesh_quality(mesh64):
    assert H._min_angles(mesh64) >= math.radians(20.0)


def test_resolution_guard(mesh64):
    with pytest.raises(H.ResolutionError):
        H.check_resolution(mesh64, 100.0)
    H.check_resolution(mesh64, 30.0)


# ---------------------------------------------------------------------------
# Dirichlet solves


def test_harmonic_extension_oracle(m_euc, mesh64, mass64):
    th = boundary_angles(mesh64)
    z = mesh64.vertices[:, 0] + 1j * mesh64.vertices[:, 1]
    for k in (1, 2, 3):
        u = H.solve_dirichlet(m_euc, mesh64, None, 0.0, np.cos(k * th))
        uex = np.real(z**k)
        err = H.l2_norm(mesh64, u - uex, M=mass64) / H.l2_norm(mesh64, uex, M=mass64)
        assert err < 10 * mesh64.h_mesh**2


def test_zero_data_zero_solution(m_euc, mesh64):
    u = H.solve_dirichlet(m_euc, mesh64, None, 0.0, np.zeros(len(mesh64.boundary)))
    assert np.all(u == 0.0)


def test_bessel_oracle(m_euc, mesh64, mass64):
    lam = 10.0
    u = H.solve_dirichlet(m_euc, mesh64, None, lam, np.ones(len(mesh64.boundary)))
    r = np.hypot(*mesh64.vertices.T)
    uex = j0(lam * r) / j0(lam)
    err = H.l2_norm(mesh64, u - uex, M=mass64) / H.l2_norm(mesh64, uex, M=mass64)
    assert err < 3 * (lam * mesh64.h_mesh) ** 2


def test_galerkin_convergence_order(m_euc):
    errs, hs = [], []
    for n in (16, 32, 64):
        mesh = H.build_mesh(m_euc, 1.0 / n)
        _, M = H._assemble(m_euc, mesh, np.zeros(mesh.n_vertices))
        th = boundary_angles(mesh)
        u = H.solve_dirichlet(m_euc, mesh, None, 0.0, np.cos(2 * th))
        z = mesh.vertices[:, 0] + 1j * mesh.vertices[:, 1]
        uex = np.real(z**2)
        errs.append(H.l2_norm(mesh, u - uex, M=M) / H.l2_norm(mesh, uex, M=M))
        hs.append(mesh.h_mesh)
    order = np.polyfit(np.log(hs), np.log(errs), 1)[0]
    assert order >= 1.8


# ---------------------------------------------------------------------------
# DN maps


def test_dn_symbol_oracle(m_euc, mesh64):
    dn = H.dn_map(m_euc, mesh64, None, 0.0)
    th = boundary_angles(mesh64)
    for k in (1, 2, 3):
        fk = np.exp(1j * k * th)
        sym = np.real(
            np.conj(fk) @ (dn.mass @ dn.apply(fk)) / (np.conj(fk) @ (dn.mass @ fk))
        )
        assert abs(sym - k) / k < 0.02


def test_dn_symmetry_and_reciprocity(m_euc, mesh64):
    r = np.hypot(*mesh64.vertices.T)
    dn = H.dn_map(m_euc, mesh64, 0.4 * np.exp(-(r**2)), 3.0)
    assert dn.symmetry_defect() <= 5 * mesh64.h_mesh
    th = boundary_angles(mesh64)
    f1, f2 = np.cos(th), np.sin(2 * th) + 0.3
    assert dn.pairing(f1, f2) == pytest.approx(dn.pairing(f2, f1), rel=1e-8)


def test_dn_determinism_and_shift_identity(m_euc, mesh64):
    r = np.hypot(*mesh64.vertices.T)
    qn = 0.3 * np.exp(-(r**2))
    lam = 5.0
    d1 = H.dn_map(m_euc, mesh64, qn, lam)
    d2 = H.dn_map(m_euc, mesh64, qn, lam)
    assert np.array_equal(d1.matrix, d2.matrix)  # bit-for-bit determinism
    d3 = H.dn_map(m_euc, mesh64, qn - lam**2, 0.0)
    assert np.array_equal(d1.matrix, d3.matrix)  # frequency-shift identity
    assert np.array_equal(d1.schur, d3.schur)


def test_dn_serialization(tmp_path, m_euc):
    mesh = H.build_mesh(m_euc, 1.0 / 8.0)
    dn = H.dn_map(m_euc, mesh, None, 0.0)
    dn.save(str(tmp_path / "dn"))
    hdr = json.loads((tmp_path / "dn.json").read_text())
    assert hdr["mesh_hash"] == mesh.hash()
    rows = np.loadtxt(tmp_path / "dn.csv", delimiter=",", skiprows=1)
    n = len(mesh.boundary)
    assert rows.shape == (n * n, 3)
    back = rows[:, 2].reshape(n, n)
    assert np.array_equal(back, dn.matrix)


def test_dn_curved_metric_runs(m_bump):
    mesh = H.build_mesh(m_bump, 1.0 / 24.0)
    dn = H.dn_map(m_bump, mesh, None, 0.0)
    # constant Dirichlet data maps near zero (harmonic constants)
    c = np.ones(len(mesh.boundary))
    assert np.max(np.abs(dn.apply(c))) < 1e-8


# ---------------------------------------------------------------------------
# Resolvent probe


def test_resolvent_zero_source(m_euc, mesh64):
    rows, _ = H.resolvent_probe(m_euc, mesh64, None, [21.0], np.zeros(mesh64.n_vertices))
    lam, lnu, du, hs, tot = rows[0]
    assert lnu == 0.0 and du == 0.0 and hs == 0.0


def test_resolvent_linearity(m_euc, mesh64):
    f = lambda P: np.exp(-((P[..., 0] - 0.1) ** 2 + P[..., 1] ** 2) / (2 * 0.2**2))
    f1 = H._nodal(f, mesh64)
    r1, _ = H.resolvent_probe(m_euc, mesh64, None, [21.0], f1)
    r2, _ = H.resolvent_probe(m_euc, mesh64, None, [21.0], 2.0 * f1)
    assert r2[0][1] == pytest.approx(2 * r1[0][1], rel=1e-10)
    assert r2[0][2] == pytest.approx(2 * r1[0][2], rel=1e-10)


def test_resolvent_bounded_at_moderate_frequency(m_euc, mesh64):
    f = lambda P: np.exp(-((P[..., 0] - 0.1) ** 2 + P[..., 1] ** 2) / (2 * 0.2**2))
    rows, notes = H.resolvent_probe(m_euc, mesh64, None, [20.0, 30.0], f)
    assert len(rows) == 2
    for lam, lnu, du, hs, tot in rows:
        assert np.isfinite(tot) and tot < 10.0


# ---------------------------------------------------------------------------
# Operator application


def test_apply_operator_plane_wave(m_euc):
    """(-lap - lam^2) e^{i lam x} = 0: the discrete residual is small away
    from the boundary ring."""
    lam = 8.0
    mesh = H.build_mesh(m_euc, 1.0 / 48.0)
    v = np.exp(1j * lam * mesh.vertices[:, 0])
    res = H.apply_operator(mesh, m_euc, None, lam, v)
    r = np.hypot(*mesh.vertices.T)
    w = np.where(r < 0.9, res, 0.0)
    # FEM dispersion leaves O(lam^2 (lam h)^2) relative error
    bound = 0.3 * lam**2 * (lam * mesh.h_mesh) ** 2 * H.l2_norm(mesh, v, m=m_euc)
    assert H.l2_norm(mesh, w, m=m_euc) < bound
