"""Separated nets and Voronoi decompositions on chart manifolds.

Nets are built by greedy farthest-point insertion over a structured sample
grid; the construction stops once the covering radius drops to the target
separation, which realizes a maximal separated set on the grid samples.
All distances beyond a local window are never needed: separation checks,
covering radii, adjacency and the boundary diagnostics are all decided at
the scale of a few cell diameters, below the injectivity floor.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import SeparationTooLarge
from .geometry import wrap01, wrap_centered


class ChartGrid:
    """Uniform periodic sample grid on the chart [0,1)^n (cell midpoints)."""

    def __init__(self, model, m):
        self.model = model
        self.m = int(m)
        self.dim = model.dim
        axes = [(np.arange(self.m) + 0.5) / self.m] * self.dim
        mesh = np.meshgrid(*axes, indexing="ij")
        self.points = np.stack(mesh, axis=-1).reshape(-1, self.dim)
        self.spacing = 1.0 / self.m
        self.size = self.m ** self.dim
        self._weights = None

    def window(self, center, chart_radius):
        """Flat indices of grid points within the periodic chart box of halfwidth r."""
        center = np.asarray(center, dtype=float)
        r = chart_radius + 0.5 * self.spacing
        if 2 * r >= 1.0:
            return np.arange(self.size)
        idx_axes = []
        for k in range(self.dim):
            lo = int(np.floor((center[k] - r) * self.m - 0.5))
            hi = int(np.ceil((center[k] + r) * self.m - 0.5))
            idx_axes.append(np.arange(lo, hi + 1) % self.m)
        mesh = np.meshgrid(*idx_axes, indexing="ij")
        flat = mesh[0]
        for k in range(1, self.dim):
            flat = flat * self.m + mesh[k]
        return flat.reshape(-1)

    def volume_weights(self):
        """Riemannian volume of each grid cell (midpoint rule)."""
        if self._weights is None:
            self._weights = self.model.sqrt_det_metric(self.points) * self.spacing ** self.dim
        return self._weights


def _distances_from(model, p, pts, chunk=200_000):
    """Geodesic distances from a single point p to an array of points."""
    out = np.empty(len(pts))
    for s in range(0, len(pts), chunk):
        out[s:s + chunk] = model.distance(p, pts[s:s + chunk])
    return out


def _capped_distances(model, p, pts, cap):
    """Distances from p, +inf beyond cap; never queries past the injectivity floor.

    The chart-line norm |v0|_g is a first-order distance proxy: points whose
    proxy already exceeds 1.2*cap (or the floor) are reported as +inf without
    running the shooting iteration.
    """
    v0 = model.nearest_representative(p, pts)
    n0 = model.norm_g(wrap01(np.broadcast_to(p, pts.shape)), v0)
    if model.is_flat:
        limit = 1.2 * cap  # nearest-representative distance is exact globally
    else:
        limit = min(1.2 * cap, 0.95 * model.injectivity_floor)
    out = np.full(len(pts), np.inf)
    ok = n0 <= limit
    if ok.any():
        d = _distances_from(model, p, pts[ok])
        out[ok] = np.where(d <= cap, d, np.inf)
    return out


@dataclass
class Net:
    """Maximal separated point set with its construction parameters."""

    model: object
    points: np.ndarray
    separation: float
    seed: int = 0
    epsilon: float = None
    beta: float = None
    covering_radius: float = None

    def __len__(self):
        return len(self.points)

    def pairwise_check(self):
        """Smallest pairwise geodesic distance (exact, windowed candidates)."""
        pts = self.points
        best = np.inf
        for j in range(len(pts)):
            later = pts[j + 1:]
            if len(later) == 0:
                continue
            d = _capped_distances(self.model, pts[j], later, 2.2 * self.separation)
            if np.isfinite(d).any():
                best = min(best, float(np.nanmin(np.where(np.isfinite(d), d, np.nan))))
        return best


def build_net(model, separation, seed=0, grid_m=None, lloyd_iterations=4):
    """Maximal separated net: seeded greedy insertion plus Lloyd smoothing.

    Candidates are a jittered sample cloud of spacing at most separation/8,
    visited in a seeded random permutation; a candidate is inserted whenever
    its distance to the current net is at least the separation.  At
    saturation no candidate is left at distance >= separation, which is the
    defining maximality property.  A few Lloyd passes (move each point to
    its cell's chart centroid when that keeps the separation, then
    re-saturate) push the covering radius well below the separation, which
    makes the adjacency-distance and finite-overlap diagnostics robust.

    Farthest-point-first insertion was rejected: it saturates at
    covering-optimal (sparse) density and locks onto lattice configurations
    with degenerate 4-valent Voronoi vertices.  Deterministic given the seed.
    """
    separation = float(separation)
    # Curved models need unique short geodesics out to ~3x the separation;
    # the flat chart is exact at any scale below the floor itself.
    limit = model.injectivity_floor if model.is_flat else model.injectivity_floor / 3
    if separation >= limit:
        raise SeparationTooLarge(
            f"separation {separation} must be below {limit:.4g} "
            f"for model {model.name!r}")
    if grid_m is None:
        grid_m = int(np.ceil(8.0 / separation))
    grid = ChartGrid(model, grid_m)
    rng = np.random.default_rng(seed)
    # Jitter breaks grid commensurability; separation and covering are
    # certified with true distances to the jittered samples, so the jitter
    # does not weaken either invariant.
    candidates = wrap01(grid.points
                        + (rng.random(grid.points.shape) - 0.5) * (grid.spacing / 2))

    cap = 1.3 * separation
    chart_r = model.chart_radius(cap) + grid.spacing

    def saturate(points, mindist):
        order = rng.permutation(grid.size)
        for idx in order:
            if mindist[idx] >= separation:
                p = candidates[idx]
                points.append(p)
                win = grid.window(p, chart_r)
                d = _capped_distances(model, p, candidates[win], cap)
                mindist[win] = np.minimum(mindist[win], d)
        return points, mindist

    def field_of(points):
        mindist = np.full(grid.size, np.inf)
        labels = np.full(grid.size, -1, dtype=np.int64)
        for j, p in enumerate(points):
            win = grid.window(p, chart_r)
            d = _capped_distances(model, p, candidates[win], cap)
            upd = d < mindist[win]
            sub = win[upd]
            mindist[sub] = d[upd]
            labels[sub] = j
        return mindist, labels

    points, mindist = saturate([], np.full(grid.size, np.inf))
    pts = np.array(points)

    for _ in range(lloyd_iterations):
        _, labels = field_of(pts)
        moved = pts.copy()
        for j in range(len(pts)):
            mask = labels == j
            if not mask.any():
                continue
            rel = wrap_centered(candidates[mask] - pts[j])
            cand = wrap01(pts[j] + rel.mean(axis=0))
            others = np.delete(moved, j, axis=0)
            d = _capped_distances(model, cand, others, cap)
            if np.all(~np.isfinite(d) | (d >= separation)):
                moved[j] = cand
        pts = moved
        mindist, _ = field_of(pts)
        points, mindist = saturate(list(pts), mindist)
        pts = np.array(points)

    return Net(model=model, points=pts, separation=separation,
               seed=seed, covering_radius=float(mindist.max()))


def net_from_points(model, points, separation, epsilon=None, beta=None):
    """Wrap an explicit point list (e.g. a lattice-aligned net) as a Net."""
    return Net(model=model, points=wrap01(np.asarray(points, dtype=float)),
               separation=float(separation), epsilon=epsilon, beta=beta)


@dataclass
class VoronoiDecomposition:
    """Nearest-net-point labels on a structured grid, with adjacency."""

    net: Net
    grid: ChartGrid
    labels: np.ndarray
    min_dist: np.ndarray
    adjacency_pairs: set = field(default_factory=set)

    def neighbors(self, i):
        out = sorted({b for a, b in self.adjacency_pairs if a == i}
                     | {a for a, b in self.adjacency_pairs if b == i})
        return out

    def cell_indices(self, i):
        return np.nonzero(self.labels == i)[0]


def build_voronoi(net, grid_m=None):
    """Label a sample grid by nearest net point (ties to the lowest index)."""
    model = net.model
    if grid_m is None:
        grid_m = int(np.ceil(8.0 / net.separation))
    grid = ChartGrid(model, grid_m)
    labels = np.full(grid.size, -1, dtype=np.int64)
    best = np.full(grid.size, np.inf)
    cap = 1.3 * net.separation
    while True:
        chart_r = model.chart_radius(cap) + 2 * grid.spacing
        for j, p in enumerate(net.points):
            win = grid.window(p, chart_r)
            d = _capped_distances(model, p, grid.points[win], cap)
            upd = d < best[win]
            sub = win[upd]
            best[sub] = d[upd]
            labels[sub] = j
        if (labels >= 0).all():
            break
        if not model.is_flat and cap >= 0.8 * model.injectivity_floor:
            raise RuntimeError(
                "unlabeled grid points beyond the injectivity floor; "
                "the net does not cover the manifold at a resolvable scale")
        cap *= 2.0
        labels.fill(-1)
        best.fill(np.inf)
    dec = VoronoiDecomposition(net=net, grid=grid, labels=labels, min_dist=best)
    dec.adjacency_pairs = adjacency(net, dec)
    return dec


def voronoi_assign(net, q):
    """Index of the nearest net point to q (lowest index on ties)."""
    model = net.model
    q = np.asarray(q, dtype=float)
    d = _capped_distances(model, q, net.points, 1.5 * net.separation)
    if not np.isfinite(d).any():
        d = _distances_from(model, q, net.points)
    return int(np.argmin(d))


def adjacency(net, decomposition, min_contacts=2):
    """Adjacent cell pairs: different labels across shared grid-cell faces.

    A pair must be seen across at least ``min_contacts`` grid faces; a
    single contact is indistinguishable from two cells touching at a
    Voronoi vertex, which is not a shared (n-1)-dimensional interface.
    """
    grid = decomposition.grid
    m, n = grid.m, grid.dim
    lab = decomposition.labels.reshape((m,) * n)
    counts = {}
    a = lab.reshape(-1)
    for axis in range(n):
        b = np.roll(lab, -1, axis=axis).reshape(-1)
        diff = a != b
        if diff.any():
            lo = np.minimum(a[diff], b[diff])
            hi = np.maximum(a[diff], b[diff])
            for key in zip(lo.tolist(), hi.tolist()):
                counts[key] = counts.get(key, 0) + 1
    return {key for key, c in counts.items() if c >= min_contacts}


def overlap_constant(net, grid_m=None):
    """Max over grid samples of the number of net balls B(p_i, sep) containing it."""
    model = net.model
    if grid_m is None:
        grid_m = int(np.ceil(8.0 / net.separation))
    grid = ChartGrid(model, grid_m)
    counts = np.zeros(grid.size, dtype=np.int64)
    chart_r = model.chart_radius(net.separation) + 2 * grid.spacing
    for p in net.points:
        win = grid.window(p, chart_r)
        d = _capped_distances(model, p, grid.points[win], 1.05 * net.separation)
        counts[win] += d <= net.separation
    return int(counts.max())


def min_adjacent_angle(net, decomposition):
    """Smallest angle at p_i between directions to two cells adjacent to D_i.

    Angles are measured in the g(p_i) inner product on log-map directions.
    Returns pi when no net point has two adjacent neighbors.
    """
    model = net.model
    best = np.pi
    for i in range(len(net.points)):
        nbrs = decomposition.neighbors(i)
        if len(nbrs) < 2:
            continue
        p = net.points[i]
        vecs = np.stack([model.log_map(p, net.points[k]) for k in nbrs])
        G = model.metric(p[None])[0]
        norms = np.sqrt(np.einsum("ai,ij,aj->a", vecs, G, vecs))
        unit = vecs / norms[:, None]
        gram = np.einsum("ai,ij,bj->ab", unit, G, unit)
        cosang = np.clip(gram, -1.0, 1.0)
        iu = np.triu_indices(len(nbrs), k=1)
        best = min(best, float(np.min(np.arccos(cosang[iu]))))
    return best


def boundary_tube_volume(decomposition, cell, delta):
    """Riemannian volume of {q : d(q, boundary of D_cell) < delta} (grid count).

    Boundary samples are midpoints of grid edges whose endpoints carry
    different labels, one side being `cell`; distances at tube scale are
    evaluated with the local metric (exact on flat models).
    """
    net = decomposition.net
    model = net.model
    grid = decomposition.grid
    m, n = grid.m, grid.dim
    lab = decomposition.labels.reshape((m,) * n)
    pts = grid.points.reshape((m,) * n + (n,))
    boundary = []
    for k in range(n):
        rolled = np.roll(lab, -1, axis=k)
        mask = (lab != rolled) & ((lab == cell) | (rolled == cell))
        if mask.any():
            a = pts[mask]
            step = np.zeros(n)
            step[k] = 0.5 * grid.spacing
            boundary.append(wrap01(a + step))
    if not boundary:
        return 0.0
    boundary = np.concatenate(boundary, axis=0)
    # local-metric distance from every nearby grid point to the boundary set
    diff = wrap_centered(grid.points[:, None, :] - boundary[None, :, :])
    chart_d = np.linalg.norm(diff, axis=-1)
    keep = chart_d.min(axis=1) <= model.chart_radius(delta) + grid.spacing
    sub = np.nonzero(keep)[0]
    G = model.metric(grid.points[sub])
    dsub = diff[sub]
    dist2 = np.einsum("psi,pij,psj->ps", dsub, G, dsub)
    dmin = np.sqrt(dist2.min(axis=1))
    inside = dmin < delta
    return float(np.sum(grid.volume_weights()[sub[inside]]))


def net_diagnostics(net, decomposition=None):
    """Summary dict for CLI output: J, K, min angle, covering, adjacency range."""
    if decomposition is None:
        decomposition = build_voronoi(net)
    model = net.model
    pairs = decomposition.adjacency_pairs
    if pairs:
        dists = [float(model.distance(net.points[a], net.points[b])) for a, b in pairs]
        adj_lo, adj_hi = min(dists), max(dists)
    else:
        adj_lo = adj_hi = float("nan")
    return {
        "J": len(net),
        "separation": net.separation,
        "covering_radius": net.covering_radius,
        "overlap_K": overlap_constant(net),
        "min_adjacent_angle": min_adjacent_angle(net, decomposition),
        "adjacent_distance_min": adj_lo,
        "adjacent_distance_max": adj_hi,
        "pairwise_min": net.pairwise_check(),
    }
