"""P1 finite elements on a structured criss-cross triangulation of the chart.

Each grid cell is split into four triangles meeting at a center node, so
all elements are congruent: per-orientation reference gradients make the
assembly a single einsum over cells.  The weak form is Riemannian,

    int <A grad u, grad phi>_g sqrt(det G) dx = int f phi sqrt(det G) dx,

which in chart components uses the conductivity matrix
K(x) = sqrt(det G) A_chart(x) G^{-1}(x); K is symmetric wherever A is
self-adjoint with respect to g.  Domains are either the unit square with
zero Dirichlet data on its outer boundary, or the full periodic chart with
a removed geodesic disk (nodes inside the disk are the Dirichlet set).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import NoConvergence, NotElliptic, SingularAssembly

MAX_NODES = 8_000_000


class CrissCrossMesh:
    """Structured criss-cross mesh with m cells per axis on [0,1]^2."""

    def __init__(self, m, periodic=False):
        self.m = int(m)
        self.periodic = bool(periodic)
        m = self.m
        if periodic:
            self.n_corner = m * m
        else:
            self.n_corner = (m + 1) * (m + 1)
        self.n_center = m * m
        self.n_nodes = self.n_corner + self.n_center
        if self.n_nodes > MAX_NODES:
            raise MemoryError(
                f"mesh with {self.n_nodes} nodes exceeds the guard "
                f"({MAX_NODES}); reduce the resolution or raise MAX_NODES")
        self.h = 1.0 / m
        self.nodes = self._node_coordinates()
        self.n_triangles = 4 * m * m

    def _corner_index(self, i, j):
        m = self.m
        if self.periodic:
            return (i % m) * m + (j % m)
        return i * (m + 1) + j

    def _node_coordinates(self):
        m, h = self.m, self.h
        if self.periodic:
            ii, jj = np.meshgrid(np.arange(m), np.arange(m), indexing="ij")
        else:
            ii, jj = np.meshgrid(np.arange(m + 1), np.arange(m + 1), indexing="ij")
        corners = np.stack([ii.ravel() * h, jj.ravel() * h], axis=-1)
        ci, cj = np.meshgrid(np.arange(m), np.arange(m), indexing="ij")
        centers = np.stack([(ci.ravel() + 0.5) * h, (cj.ravel() + 0.5) * h], axis=-1)
        return np.concatenate([corners, centers], axis=0)

    def orientation_batches(self):
        """Per-orientation (node triples, centroids, reference gradients).

        Orientation t has corner pair (c_t, c_{t+1}) and the cell center;
        the reference hat gradients are exact for the congruent triangles.
        """
        m, h = self.m, self.h
        ci, cj = np.meshgrid(np.arange(m), np.arange(m), indexing="ij")
        ci, cj = ci.ravel(), cj.ravel()
        corner_sets = [
            self._corner_index(ci, cj),
            self._corner_index(ci + 1, cj),
            self._corner_index(ci + 1, cj + 1),
            self._corner_index(ci, cj + 1),
        ]
        center = self.n_corner + ci * m + cj
        # corner offsets within the cell, in chart units of h
        offs = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])
        cell_origin = np.stack([ci * h, cj * h], axis=-1)
        batches = []
        for t in range(4):
            tri = np.stack([corner_sets[t], corner_sets[(t + 1) % 4], center], axis=-1)
            p1 = offs[t] * h
            p2 = offs[(t + 1) % 4] * h
            p3 = np.array([0.5, 0.5]) * h
            verts = np.stack([p1, p2, p3])
            area = 0.5 * abs(np.cross(verts[1] - verts[0], verts[2] - verts[0]))
            # hat gradients: grad phi_i = rot90(opposite edge) / (2 area)
            grads = np.empty((2, 3))
            for i in range(3):
                e = verts[(i + 2) % 3] - verts[(i + 1) % 3]
                g = np.array([-e[1], e[0]]) / (2 * area)
                # orient towards vertex i
                if g @ (verts[i] - verts[(i + 1) % 3]) < 0:
                    g = -g
                grads[:, i] = g
            centroid = cell_origin + (p1 + p2 + p3) / 3.0
            batches.append({"tri": tri.astype(np.int64), "area": float(area),
                            "grads": grads, "centroids": centroid,
                            "quad_pts": _midedge_points(cell_origin, p1, p2, p3)})
        return batches


def _midedge_points(origin, p1, p2, p3):
    return [origin + 0.5 * (p1 + p2), origin + 0.5 * (p2 + p3),
            origin + 0.5 * (p3 + p1)]


@dataclass
class Domain:
    """Mesh plus Dirichlet node set; interior dofs carry the unknowns."""

    mesh: CrissCrossMesh
    model: object
    boundary_mask: np.ndarray
    name: str = "domain"

    @property
    def interior(self):
        return np.nonzero(~self.boundary_mask)[0]

    def check_connected(self):
        """Flood fill over cells; the non-Dirichlet region must be connected."""
        m = self.mesh.m
        centers = self.mesh.n_corner + np.arange(m * m)
        alive = ~self.boundary_mask[centers]
        grid = alive.reshape(m, m)
        seen = np.zeros_like(grid, dtype=bool)
        seeds = np.argwhere(grid)
        if len(seeds) == 0:
            raise ValueError("domain has no interior cells")
        stack = [tuple(seeds[0])]
        seen[tuple(seeds[0])] = True
        while stack:
            i, j = stack.pop()
            for di, dj in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                if self.mesh.periodic:
                    ni, nj = (i + di) % m, (j + dj) % m
                else:
                    ni, nj = i + di, j + dj
                    if not (0 <= ni < m and 0 <= nj < m):
                        continue
                if grid[ni, nj] and not seen[ni, nj]:
                    seen[ni, nj] = True
                    stack.append((ni, nj))
        if not bool((seen == grid).all()):
            raise ValueError("domain interior is not connected")
        return True


def square_domain(model, m):
    """Unit square (0,1)^2 with zero Dirichlet data on the outer boundary."""
    mesh = CrissCrossMesh(m, periodic=False)
    x = mesh.nodes
    onb = ((x[:, 0] <= 0) | (x[:, 0] >= 1 - 1e-14)
           | (x[:, 1] <= 0) | (x[:, 1] >= 1 - 1e-14))
    return Domain(mesh=mesh, model=model, boundary_mask=onb, name="square")


def torus_minus_disk(model, m, center=(0.5, 0.5), radius=0.2):
    """Full periodic chart with a removed geodesic disk (u = 0 inside)."""
    mesh = CrissCrossMesh(m, periodic=True)
    c = np.asarray(center, dtype=float)
    d = model.distance(np.broadcast_to(c, mesh.nodes.shape), mesh.nodes)
    mask = d < radius
    if not mask.any():
        raise ValueError("removed disk contains no mesh nodes; enlarge it")
    dom = Domain(mesh=mesh, model=model, boundary_mask=mask, name="torus-minus-disk")
    dom.check_connected()
    return dom


@dataclass
class DiscreteField:
    """Nodal P1 field with zero Dirichlet data."""

    domain: Domain
    values: np.ndarray

    def __post_init__(self):
        bad = np.abs(self.values[self.domain.boundary_mask])
        if bad.size and bad.max() > 0:
            raise ValueError("Dirichlet nodes must carry zero values")


def _conductivity(model, coef_fn, points):
    """K = sqrt(det G) A_chart G^{-1}; raises if not elliptic at the points."""
    A = np.asarray(coef_fn(points), dtype=float)
    G = model.metric(points)
    sqrtg = np.sqrt(np.linalg.det(G))
    if np.any(sqrtg <= 0):
        raise SingularAssembly("nonpositive metric determinant at quadrature point")
    K = sqrtg[:, None, None] * (A @ np.linalg.inv(G))
    sym = 0.5 * (K + np.swapaxes(K, -1, -2))
    tr = sym[..., 0, 0] + sym[..., 1, 1]
    det = sym[..., 0, 0] * sym[..., 1, 1] - sym[..., 0, 1] * sym[..., 1, 0]
    if np.any(tr <= 0) or np.any(det <= 0):
        raise NotElliptic("coefficient loses ellipticity at a quadrature point")
    return K


def assemble(model, coef_fn, domain, quadrature="centroid"):
    """Stiffness matrix on all nodes (CSR, symmetric for self-adjoint A).

    ``coef_fn(points) -> (..., 2, 2)`` returns chart-component endomorphism
    matrices of the coefficient tensor.  ``quadrature`` is "centroid"
    (one point, for oscillating coefficients on meshes with h <= eps/8) or
    "midedge" (three points, exact for quadratic coefficient variation).
    """
    mesh = domain.mesh
    n = mesh.n_nodes
    mats = []
    for batch in mesh.orientation_batches():
        tri, area, B = batch["tri"], batch["area"], batch["grads"]
        if quadrature == "centroid":
            C = _conductivity(model, coef_fn, batch["centroids"])
        elif quadrature == "midedge":
            C = sum(_conductivity(model, coef_fn, q) for q in batch["quad_pts"]) / 3.0
        else:
            raise ValueError(f"unknown quadrature {quadrature!r}")
        kloc = area * np.einsum("ai,cab,bj->cij", B, C, B)
        tri32 = tri.astype(np.int32)
        rows = np.repeat(tri32, 3, axis=1).ravel()
        cols = np.tile(tri32, (1, 3)).ravel()
        mats.append(sp.coo_matrix((kloc.ravel(), (rows, cols)), shape=(n, n)).tocsr())
    K = mats[0]
    for M in mats[1:]:
        K = K + M
    K = 0.5 * (K + K.T)
    return K.tocsr()


def load_vector(model, f_fn, domain):
    """Consistent P1 load with centroid quadrature and metric volume weight."""
    mesh = domain.mesh
    b = np.zeros(mesh.n_nodes)
    for batch in mesh.orientation_batches():
        tri, area = batch["tri"], batch["area"]
        pts = batch["centroids"]
        w = model.sqrt_det_metric(pts) * f_fn(pts) * (area / 3.0)
        for i in range(3):
            b += np.bincount(tri[:, i], weights=w, minlength=mesh.n_nodes)
    return b


def solve_dirichlet(model, coef_fn, f_fn, domain, rtol=1e-10,
                    quadrature="centroid", stiffness=None, load=None):
    """CG solution of the zero-Dirichlet problem; pyamg-preconditioned.

    Returns (DiscreteField, info dict).
    """
    K = assemble(model, coef_fn, domain, quadrature) if stiffness is None else stiffness
    b = load_vector(model, f_fn, domain) if load is None else load
    interior = domain.interior
    Kii = K[interior][:, interior].tocsr()
    bi = b[interior]
    x, info = _cg_spd(Kii, bi, rtol)
    values = np.zeros(domain.mesh.n_nodes)
    values[interior] = x
    return DiscreteField(domain=domain, values=values), info


def _cg_spd(K, b, rtol):
    bnorm = float(np.linalg.norm(b))
    if bnorm == 0.0:
        return np.zeros_like(b), {"iterations": 0, "rel_residual": 0.0,
                                  "preconditioner": "none"}
    if K.shape[0] > 5000:
        import pyamg

        ml = pyamg.smoothed_aggregation_solver(K, max_coarse=500)
        M = ml.aspreconditioner(cycle="V")
        pc_name = "pyamg"
    else:
        d = K.diagonal()
        M = spla.LinearOperator(K.shape, matvec=lambda x: x / d)
        pc_name = "jacobi"
    iters = [0]

    def cb(_):
        iters[0] += 1

    x, flag = spla.cg(K, b, rtol=rtol, atol=0.0, M=M, maxiter=2000, callback=cb)
    if flag != 0:
        raise NoConvergence(f"CG failed to reach rtol={rtol} (flag {flag})")
    rel = float(np.linalg.norm(b - K @ x)) / bnorm
    return x, {"iterations": iters[0], "rel_residual": rel, "preconditioner": pc_name}


def norms(field):
    """(L2, H1) norms with the Riemannian volume weight."""
    domain, u = field.domain, field.values
    model = domain.model
    mesh = domain.mesh
    l2_sq = 0.0
    h1_sq = 0.0
    for batch in mesh.orientation_batches():
        tri, area, B = batch["tri"], batch["area"], batch["grads"]
        pts = batch["centroids"]
        sqrtg = model.sqrt_det_metric(pts)
        Ginv = model.metric_inv(pts)
        uloc = u[tri]                      # (cells, 3)
        # midedge quadrature is exact for squares of P1 functions
        vals = 0.5 * (uloc + np.roll(uloc, -1, axis=1))
        l2_sq += float(np.sum(area * sqrtg * np.mean(vals ** 2, axis=1)))
        du = np.einsum("ai,ci->ca", B, uloc)
        h1_sq += float(np.sum(area * sqrtg * np.einsum("ca,cab,cb->c", du, Ginv, du)))
    return float(np.sqrt(l2_sq)), float(np.sqrt(l2_sq + h1_sq))


def weak_pairing(field, phi_fn):
    """int u phi dV_M by midedge quadrature with P1 interpolation of u."""
    domain, u = field.domain, field.values
    model = domain.model
    mesh = domain.mesh
    total = 0.0
    for batch in mesh.orientation_batches():
        tri, area = batch["tri"], batch["area"]
        uloc = u[tri]
        uq = 0.5 * (uloc + np.roll(uloc, -1, axis=1))   # values at midedges
        acc = 0.0
        for s, q in enumerate(batch["quad_pts"]):
            acc = acc + model.sqrt_det_metric(q) * phi_fn(q) * uq[:, s]
        total += float(np.sum(area / 3.0 * acc))
    return total


def l2_gap(field_a, field_b):
    """L2 norm of the difference of two fields on the same domain."""
    diff = DiscreteField(domain=field_a.domain,
                         values=field_a.values - field_b.values)
    return norms(diff)[0]


def galerkin_residual(K, b, field):
    """Max residual of the weak form against all interior nodal hats."""
    interior = field.domain.interior
    r = b - K @ field.values
    return float(np.max(np.abs(r[interior])))