"""P1 finite elements for (-Delta_g + q - lambda^2) on the disk.

Structured concentric-ring triangulations, Dirichlet solves with a direct
sparse factorization, variational (flux-consistent) discrete DN maps, and the
empirical resolvent-scaling probe.  The frequency-shift identity
Lambda_q^lam = Lambda_{q - lam^2}^0 holds bit-for-bit because every assembly
path reduces (q, lambda) to the single effective potential q - lambda^2.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from typing import Callable, Optional, Union

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import splu

from .manifold import MetricField

__all__ = [
    "Mesh",
    "DNMatrix",
    "MeshQualityError",
    "NearEigenvalueError",
    "ResolutionError",
    "build_mesh",
    "check_resolution",
    "solve_dirichlet",
    "dn_map",
    "resolvent_probe",
    "apply_operator",
    "l2_norm",
    "h1_seminorm",
]


class MeshQualityError(RuntimeError):
    """Triangle quality guard (minimum angle) violated."""


class NearEigenvalueError(RuntimeError):
    """Factorization pivot ratio collapsed: lambda^2 sits too close to a
    Dirichlet eigenvalue; perturb lambda and retry."""


class ResolutionError(RuntimeError):
    """Mesh too coarse for the requested frequency (lambda * h > 0.6)."""


# ---------------------------------------------------------------------------
# Mesh


@dataclass
class Mesh:
    vertices: np.ndarray       # (nv, 2) chart coordinates
    triangles: np.ndarray      # (ne, 3) vertex indices, positively oriented
    boundary: np.ndarray       # ordered counterclockwise boundary ring
    h_mesh: float

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def interior(self) -> np.ndarray:
        mask = np.ones(self.n_vertices, dtype=bool)
        mask[self.boundary] = False
        return np.nonzero(mask)[0]

    def hash(self) -> str:
        h = hashlib.sha256()
        h.update(self.vertices.tobytes())
        h.update(self.triangles.tobytes())
        return h.hexdigest()[:16]


def _ring_merge(inner: np.ndarray, outer: np.ndarray) -> list:
    """Triangulate the annulus strip between two rings of node indices by a
    two-pointer angular merge (node order is angular on both rings)."""
    n1, n2 = len(inner), len(outer)
    tris = []
    i = j = 0
    while i < n1 or j < n2:
        ai = (i + 0.5) / n1 if i < n1 else 2.0
        aj = (j + 0.5) / n2 if j < n2 else 2.0
        if aj <= ai:
            tris.append((inner[i % n1], outer[j % n2], outer[(j + 1) % n2]))
            j += 1
        else:
            tris.append((inner[i % n1], outer[j % n2], inner[(i + 1) % n1]))
            i += 1
    return tris


def build_mesh(m: MetricField, h_mesh: float, radius: Optional[float] = None) -> Mesh:
    """Deterministic structured disk triangulation: ring r has 6r nodes."""
    if h_mesh <= 0:
        raise ValueError("h_mesh must be positive")
    radius = m.radius if radius is None else radius
    n_rings = max(2, int(math.ceil(radius / h_mesh)))
    verts = [np.zeros(2)]
    rings = [np.array([0])]
    for r in range(1, n_rings + 1):
        n = 6 * r
        th = 2.0 * math.pi * np.arange(n) / n
        rad = radius * r / n_rings
        start = len(verts)
        verts.extend(np.column_stack([rad * np.cos(th), rad * np.sin(th)]))
        rings.append(np.arange(start, start + n))
    verts = np.asarray(verts)
    tris = []
    for r in range(n_rings):
        if r == 0:
            ring1 = rings[1]
            for j in range(6):
                tris.append((0, ring1[j], ring1[(j + 1) % 6]))
        else:
            tris.extend(_ring_merge(rings[r], rings[r + 1]))
    tris = np.asarray(tris, dtype=np.int64)
    # enforce positive orientation
    p = verts[tris]
    cross = (p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1]) - (
        p[:, 1, 1] - p[:, 0, 1]
    ) * (p[:, 2, 0] - p[:, 0, 0])
    flip = cross < 0
    tris[flip] = tris[flip][:, [0, 2, 1]]
    mesh = Mesh(verts, tris, rings[-1].copy(), radius / n_rings)
    ang = _min_angles(mesh)
    if ang < math.radians(20.0):
        raise MeshQualityError(
            f"minimum triangle angle {math.degrees(ang):.2f} deg below 20 deg"
        )
    return mesh


def _min_angles(mesh: Mesh) -> float:
    p = mesh.vertices[mesh.triangles]
    worst = math.inf
    for a in range(3):
        u = p[:, (a + 1) % 3] - p[:, a]
        v = p[:, (a + 2) % 3] - p[:, a]
        cos = np.einsum("ei,ei->e", u, v) / (
            np.linalg.norm(u, axis=1) * np.linalg.norm(v, axis=1)
        )
        worst = min(worst, float(np.min(np.arccos(np.clip(cos, -1, 1)))))
    return worst


def check_resolution(mesh: Mesh, lam: float) -> None:
    """Refuse under-resolved Helmholtz solves (>= 10 points per wavelength)."""
    if lam * mesh.h_mesh > 0.6:
        raise ResolutionError(
            f"lambda*h = {lam * mesh.h_mesh:.3f} > 0.6: refine the mesh "
            f"(h = {mesh.h_mesh:.4g}) or lower lambda = {lam:g}"
        )


# ---------------------------------------------------------------------------
# Assembly


def _nodal(q, mesh: Mesh) -> np.ndarray:
    if q is None:
        return np.zeros(mesh.n_vertices)
    if callable(q):
        return np.asarray(q(mesh.vertices), dtype=float)
    q = np.asarray(q, dtype=float)
    if q.shape != (mesh.n_vertices,):
        raise ValueError("nodal potential length does not match the mesh")
    return q


def _element_geometry(m: MetricField, mesh: Mesh):
    """Chart areas, P1 gradients, and edge-midpoint metric samples."""
    p = mesh.vertices[mesh.triangles]           # (ne, 3, 2)
    d1 = p[:, 1] - p[:, 0]
    d2 = p[:, 2] - p[:, 0]
    area2 = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
    area = 0.5 * area2
    # grad of hat a: rotated opposite edge / (2 area)
    grads = np.empty_like(p)
    for a in range(3):
        e = p[:, (a + 2) % 3] - p[:, (a + 1) % 3]
        grads[:, a, 0] = -e[:, 1] / area2
        grads[:, a, 1] = e[:, 0] / area2
    mids = 0.5 * (p + np.roll(p, -1, axis=1))   # edge midpoints (quadrature)
    return p, area, grads, mids


def _assemble(m: MetricField, mesh: Mesh, qeff: np.ndarray):
    """Sparse matrices of the weak form: A = K + M_qeff, plus the plain mass
    matrix M (for L2 norms and right-hand sides).

    Coefficients are sampled at the three edge midpoints (exact for affine
    data in the flat case, second order in general).
    """
    ne = len(mesh.triangles)
    _, area, grads, mids = _element_geometry(m, mesh)
    flat = mids.reshape(-1, 2)
    gi = m.ginv(flat).reshape(ne, 3, 2, 2)
    sq = np.sqrt(m.detg(flat)).reshape(ne, 3)
    # stiffness: grads constant per element, coefficient averaged over midpoints
    coeff = np.einsum("eq,eqij->eij", sq, gi) / 3.0
    Ke = np.einsum("eai,eij,ebj,e->eab", grads, coeff, grads, area)
    # local P1 mass with weight w: edge-midpoint rule, phi_a(mid_q) in {1/2, 0}
    # phi values at midpoints: mid q joins nodes q and q+1
    phi = np.zeros((3, 3))
    for qq in range(3):
        phi[qq, qq] = 0.5
        phi[qq, (qq + 1) % 3] = 0.5
    qn = qeff[mesh.triangles]                   # nodal potential per element
    qmid = np.einsum("qa,ea->eq", phi, qn)
    wq = sq * (area / 3.0)[:, None]
    Me_q = np.einsum("eq,qa,qb->eab", wq * qmid, phi, phi)
    Me = np.einsum("eq,qa,qb->eab", wq, phi, phi)
    rows = np.repeat(mesh.triangles, 3, axis=1).reshape(ne, 3, 3)
    cols = rows.transpose(0, 2, 1)
    nv = mesh.n_vertices
    A = sparse.coo_matrix(
        ((Ke + Me_q).ravel(), (rows.ravel(), cols.ravel())), shape=(nv, nv)
    ).tocsr()
    M = sparse.coo_matrix(
        (Me.ravel(), (rows.ravel(), cols.ravel())), shape=(nv, nv)
    ).tocsr()
    return A, M


def _boundary_mass(m: MetricField, mesh: Mesh) -> sparse.csr_matrix:
    """Cyclic P1 mass matrix on the boundary ring with metric arclength."""
    b = mesh.boundary
    nb = len(b)
    p = mesh.vertices[b]
    pn = np.roll(p, -1, axis=0)
    mid = 0.5 * (p + pn)
    e = pn - p
    G = m.g(mid)
    ell = np.sqrt(np.einsum("ki,kij,kj->k", e, G, e))
    rows, cols, vals = [], [], []
    idx = np.arange(nb)
    nxt = (idx + 1) % nb
    rows += [idx, idx, nxt, nxt]
    cols += [idx, nxt, idx, nxt]
    vals += [ell / 3.0, ell / 6.0, ell / 6.0, ell / 3.0]
    Mb = sparse.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(nb, nb),
    ).tocsr()
    return Mb


def _factorize(A_II: sparse.csr_matrix):
    lu = splu(A_II.tocsc())
    d = np.abs(lu.U.diagonal())
    if d.min() / d.max() < 1e-12:
        raise NearEigenvalueError(
            "pivot ratio below 1e-12: lambda^2 is numerically a Dirichlet "
            "eigenvalue; retry with lambda*(1+2**-10)"
        )
    return lu


# ---------------------------------------------------------------------------
# Dirichlet solves and DN maps


def solve_dirichlet(
    m: MetricField,
    mesh: Mesh,
    q,
    lam: float,
    f: np.ndarray,
) -> np.ndarray:
    """FEM solution of (-Delta_g + q - lam^2) u = 0, u = f on the boundary.

    f gives the boundary nodal values in boundary-ring order; the returned
    array holds all nodal values.
    """
    if lam != 0.0:
        check_resolution(mesh, lam)
    qeff = _nodal(q, mesh) - lam**2
    A, _ = _assemble(m, mesh, qeff)
    bi = mesh.boundary
    ii = mesh.interior
    f = np.asarray(f)
    if f.shape != (len(bi),):
        raise ValueError("boundary data length does not match the boundary ring")
    lu = _factorize(A[ii][:, ii])
    rhs = -A[ii][:, bi] @ f
    u = np.zeros(mesh.n_vertices, dtype=np.result_type(f, float))
    u[bi] = f
    if np.iscomplexobj(f):
        u[ii] = lu.solve(rhs.real) + 1j * lu.solve(rhs.imag)
    else:
        u[ii] = lu.solve(rhs)
    return u


@dataclass
class DNMatrix:
    """Discrete DN map in the boundary hat basis.

    matrix maps Dirichlet coefficients to Neumann coefficients; schur is the
    underlying symmetric weak-flux (Schur complement) matrix with
    <Lambda f, w>_{L2(boundary)} = w^T schur f; mass is the boundary mass
    matrix realizing that pairing.
    """

    lam: float
    q_id: str
    matrix: np.ndarray
    schur: np.ndarray
    mass: sparse.csr_matrix
    mesh_hash: str

    def apply(self, f: np.ndarray) -> np.ndarray:
        return self.matrix @ f

    def pairing(self, f1: np.ndarray, f2: np.ndarray) -> complex:
        """(Lambda f1, f2) in the boundary L2 inner product."""
        return complex(np.conj(f2) @ (self.schur @ f1))

    def symmetry_defect(self) -> float:
        d = np.linalg.norm(self.matrix - self.matrix.T)
        return float(d / np.linalg.norm(self.matrix))

    def save(self, prefix: str) -> None:
        n = self.matrix.shape[0]
        rows, cols = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
        np.savetxt(
            prefix + ".csv",
            np.column_stack([rows.ravel(), cols.ravel(), self.matrix.ravel()]),
            delimiter=",",
            header="row,col,value",
            comments="",
            fmt=["%d", "%d", "%.17g"],
        )
        with open(prefix + ".json", "w") as fh:
            json.dump(
                {
                    "kind": "dn_matrix",
                    "lam": self.lam,
                    "q_id": self.q_id,
                    "n_boundary": n,
                    "mesh_hash": self.mesh_hash,
                },
                fh,
                indent=2,
            )


def _q_id(qeff: np.ndarray) -> str:
    return hashlib.sha256(qeff.tobytes()).hexdigest()[:16]


def dn_map(
    m: MetricField,
    mesh: Mesh,
    q,
    lam: float,
    chunk: int = 256,
) -> DNMatrix:
    """Discrete DN map: Schur complement of the weak operator onto the
    boundary (variational flux; one factorization reused for all columns)."""
    if lam != 0.0:
        check_resolution(mesh, lam)
    qeff = _nodal(q, mesh) - lam**2
    A, _ = _assemble(m, mesh, qeff)
    bi = mesh.boundary
    ii = mesh.interior
    A_II = A[ii][:, ii]
    A_IB = A[ii][:, bi]
    A_BI = A[bi][:, ii]
    A_BB = A[bi][:, bi].toarray()
    lu = _factorize(A_II)
    nb = len(bi)
    S = A_BB.copy()
    for s in range(0, nb, chunk):
        cols = np.arange(s, min(s + chunk, nb))
        X = lu.solve(A_IB[:, cols].toarray())
        S[:, cols] -= A_BI @ X
    Mb = _boundary_mass(m, mesh)
    from scipy.sparse.linalg import spsolve

    matrix = spsolve(Mb.tocsc(), sparse.csc_matrix(S)).toarray()
    return DNMatrix(
        lam=float(lam),
        q_id=_q_id(qeff),
        matrix=matrix,
        schur=S,
        mass=Mb,
        mesh_hash=mesh.hash(),
    )


# ---------------------------------------------------------------------------
# Norms and operator application on the mesh


def l2_norm(mesh: Mesh, v: np.ndarray, m: Optional[MetricField] = None, M=None) -> float:
    if M is None:
        from .manifold import euclidean_metric

        m = m if m is not None else euclidean_metric(1.0)
        _, M = _assemble(m, mesh, np.zeros(mesh.n_vertices))
    return float(math.sqrt(abs(np.real(np.conj(v) @ (M @ v)))))


def apply_operator(mesh: Mesh, m: MetricField, q, lam: float, v: np.ndarray) -> np.ndarray:
    """Nodal residual field of (-Delta_g + q - lam^2) v: mass-lumped inverse
    of the weak application (boundary rows excluded from the claim)."""
    qeff = _nodal(q, mesh) - lam**2
    A, M = _assemble(m, mesh, qeff)
    lump = np.asarray(M.sum(axis=1)).ravel()
    return (A @ v) / lump


def h1_seminorm(mesh: Mesh, m: MetricField, v: np.ndarray) -> float:
    A, _ = _assemble(m, mesh, np.zeros(mesh.n_vertices))
    return float(math.sqrt(abs(np.real(np.conj(v) @ (A @ v)))))


# ---------------------------------------------------------------------------
# Resolvent probe


def _recovered_hessian_norm(m: MetricField, mesh: Mesh, u: np.ndarray) -> float:
    """L2 norm of the covariant Hessian by gradient recovery: element
    gradients -> area-averaged nodal gradients -> element gradients of those,
    minus the Christoffel correction."""
    from .manifold import christoffel

    p, area, grads, _ = _element_geometry(m, mesh)
    ue = u[mesh.triangles]
    ge = np.einsum("ea,eai->ei", ue, grads)       # element gradient (chart)
    # recover nodal gradients by area weighting
    nv = mesh.n_vertices
    gn = np.zeros((nv, 2), dtype=ge.dtype)
    wn = np.zeros(nv)
    for a in range(3):
        np.add.at(gn, mesh.triangles[:, a], ge * area[:, None])
        np.add.at(wn, mesh.triangles[:, a], area)
    gn /= wn[:, None]
    # Hessian per element: gradients of the recovered components
    H = np.empty((len(mesh.triangles), 2, 2), dtype=ge.dtype)
    for c in range(2):
        H[:, c, :] = np.einsum("ea,eai->ei", gn[mesh.triangles][:, :, c], grads)
    cent = p.mean(axis=1)
    Gam = christoffel(m, cent)
    gc = gn[mesh.triangles].mean(axis=1)
    H = H - np.einsum("ekij,ek->eij", Gam, gc)
    sq = np.sqrt(m.detg(cent))
    dens = np.sum(np.abs(H) ** 2, axis=(1, 2))
    return float(math.sqrt(np.sum(dens * sq * area)))


def resolvent_probe(
    m: MetricField,
    mesh: Mesh,
    q,
    lam_grid,
    f,
    max_nudges: int = 8,
):
    """Table of (lam_used, lam*||u||, ||du||, lam^{-1}*||hess u||, sum/||f||)
    for zero-Dirichlet solutions of (-Delta_g + q - lam^2) u = f.

    Near-eigenvalue factorizations are retried at lam*(1+2^-10), up to
    max_nudges times; the shifts are recorded in the returned notes.
    """
    f_nodal = _nodal(f, mesh)
    q_nodal = _nodal(q, mesh)
    K, M = _assemble(m, mesh, np.zeros(mesh.n_vertices))
    nf = l2_norm(mesh, f_nodal, M=M)
    ii = mesh.interior
    rows, notes = [], []
    for lam0 in lam_grid:
        lam = float(lam0)
        for attempt in range(max_nudges + 1):
            check_resolution(mesh, lam)
            A, _ = _assemble(m, mesh, q_nodal - lam**2)
            try:
                lu = _factorize(A[ii][:, ii])
                break
            except NearEigenvalueError:
                if attempt == max_nudges:
                    notes.append(f"lambda={lam0:g}: skipped (near eigenvalue)")
                    lu = None
                    break
                lam *= 1.0 + 2.0**-10
                notes.append(f"lambda={lam0:g}: nudged to {lam:.6g}")
        if lu is None:
            continue
        rhs = (M @ f_nodal)[ii]
        u = np.zeros(mesh.n_vertices)
        u[ii] = lu.solve(rhs)
        nu = l2_norm(mesh, u, M=M)
        du = float(math.sqrt(abs(u @ (K @ u))))
        hess = _recovered_hessian_norm(m, mesh, u)
        total = (lam * nu + du + hess / lam) / nf if nf > 0 else 0.0
        rows.append((lam, lam * nu, du, hess / lam, total))
    return rows, notes
