"""Refined partitions of unity subordinate to Voronoi cells.

Each net point p_j carries phi_j(q) = prod_k H_delta(d(p_k,q) - d(p_j,q))
over an index set of nearby net points, and psi_j = phi_j / sum_k phi_k.
The transition width is delta = eps^alpha against a net separation eps^beta
with 1/2 < beta < alpha < 1.

The index set is every net point within 2*sep + 4*delta (a superset of the
adjacent cells); with that radius the truncated product agrees with the
product over the full net everywhere it is nonzero, so the hard support
cutoff at sep + 2*delta is exact and smooth.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import ExponentOrderViolated, PartitionGap
from .geometry import wrap01, wrap_centered
from .nets import _capped_distances


class SmoothStep:
    """Transition profile H_delta: 0 below -delta, 1 above +delta.

    The default quintic profile has sup H' = 15/(16 delta) and vanishing
    slope at the seams, so supports of derived bump functions are exact.
    A C-infinity bump-quotient profile is available as ``kind="mollified"``.
    """

    def __init__(self, delta, kind="quintic"):
        if delta <= 0:
            raise ValueError("delta must be positive")
        self.delta = float(delta)
        self.kind = kind
        if kind not in ("quintic", "mollified"):
            raise ValueError(f"unknown profile {kind!r}")

    def __call__(self, t):
        u = np.clip((np.asarray(t, dtype=float) + self.delta) / (2 * self.delta), 0.0, 1.0)
        if self.kind == "quintic":
            return u * u * u * (u * (6 * u - 15) + 10)
        return _mollified(u)

    def deriv(self, t):
        t = np.asarray(t, dtype=float)
        u = (t + self.delta) / (2 * self.delta)
        inside = (u > 0) & (u < 1)
        u = np.clip(u, 0.0, 1.0)
        if self.kind == "quintic":
            s = 30.0 * u * u * (u - 1.0) * (u - 1.0)
        else:
            s = _mollified_deriv(u)
        return np.where(inside, s / (2 * self.delta), 0.0)


def _mollified(u):
    def f(x):
        out = np.zeros_like(x)
        pos = x > 0
        out[pos] = np.exp(-1.0 / x[pos])
        return out

    fu, fv = f(u), f(1.0 - u)
    return fu / (fu + fv)


def _mollified_deriv(u):
    h = 1e-7
    return (_mollified(np.clip(u + h, 0, 1)) - _mollified(np.clip(u - h, 0, 1))) / (2 * h)


class PointBuckets:
    """Periodic bucket index over an arbitrary point cloud in [0,1)^n."""

    def __init__(self, points, cell_size):
        self.points = points
        self.n = points.shape[-1]
        self.nb = max(1, int(math.floor(1.0 / max(cell_size, 1e-9))))
        ids = np.floor(wrap01(points) * self.nb).astype(np.int64)
        ids = np.clip(ids, 0, self.nb - 1)
        flat = ids[:, 0]
        for k in range(1, self.n):
            flat = flat * self.nb + ids[:, k]
        self.order = np.argsort(flat, kind="stable")
        self.sorted_ids = flat[self.order]

    def query(self, center, radius):
        """Indices of points within chart radius of center (superset)."""
        if 2 * radius * self.nb >= self.nb:
            return np.arange(len(self.points))
        axes = []
        for k in range(self.n):
            lo = int(math.floor((center[k] - radius) * self.nb))
            hi = int(math.floor((center[k] + radius) * self.nb))
            axes.append(np.arange(lo, hi + 1) % self.nb)
        mesh = np.meshgrid(*axes, indexing="ij")
        flat = mesh[0]
        for k in range(1, self.n):
            flat = flat * self.nb + mesh[k]
        flat = np.unique(flat.reshape(-1))
        lo = np.searchsorted(self.sorted_ids, flat, side="left")
        hi = np.searchsorted(self.sorted_ids, flat, side="right")
        if len(flat) == 0:
            return np.empty(0, dtype=np.int64)
        return np.concatenate([self.order[a:b] for a, b in zip(lo, hi)
                               if b > a] or [np.empty(0, dtype=np.int64)])


def _dist_and_direction(model, p, pts, want_dir):
    """d(p, q) for q in pts and, optionally, grad_q d(p, .) as chart vectors."""
    if model.is_flat:
        delta = model.nearest_representative(p, pts)
        G0 = model.constant_metric()
        if np.array_equal(G0, np.eye(model.dim)):
            d = np.sqrt(np.sum(delta * delta, axis=-1))
        else:
            d = np.sqrt(np.einsum("...i,ij,...j->...", delta, G0, delta))
        if not want_dir:
            return d, None
        dirs = delta / np.maximum(d, 1e-300)[..., None]
        return d, dirs
    v = model.log_map(pts, np.broadcast_to(p, pts.shape))
    d = model.norm_g(pts, v)
    if not want_dir:
        return d, None
    dirs = -v / np.maximum(d, 1e-300)[..., None]
    return d, dirs


class PartitionOfUnity:
    """Evaluable psi_j family with cached index sets and support data."""

    def __init__(self, net, alpha, epsilon, profile="quintic", beta=None):
        model = net.model
        self.net = net
        self.model = model
        self.alpha = float(alpha)
        self.epsilon = float(epsilon)
        sep = net.separation
        if beta is None:
            beta = net.beta if net.beta is not None else math.log(sep) / math.log(epsilon)
        self.beta = float(beta)
        if not (0.5 < self.beta < self.alpha < 1.0):
            raise ExponentOrderViolated(
                f"need 1/2 < beta < alpha < 1, got beta={self.beta:.4g}, "
                f"alpha={self.alpha:.4g}")
        self.delta = self.epsilon ** self.alpha
        self.step = SmoothStep(self.delta, kind=profile)
        self.support_radius = sep + 2 * self.delta
        self.index_radius = 2 * sep + 4 * self.delta
        self._index_sets = self._build_index_sets()

    def _build_index_sets(self):
        pts = self.net.points
        sets = []
        for j in range(len(pts)):
            d = _capped_distances(self.model, pts[j], pts, self.index_radius)
            members = np.nonzero(np.isfinite(d) & (np.arange(len(pts)) != j))[0]
            sets.append(members)
        return sets

    @property
    def index_sets(self):
        return self._index_sets

    # -- streaming evaluation ------------------------------------------------

    def phi_terms(self, points, buckets=None, want_grad=False):
        """Yield (j, idx, phi_j, grad_phi_j) over net points with nonempty support.

        ``idx`` indexes into ``points``; gradients are Riemannian chart
        vectors and are only returned when requested.
        """
        points = np.asarray(points, dtype=float)
        if buckets is None:
            buckets = PointBuckets(points, self.support_radius)
        chart_r = self.model.chart_radius(self.support_radius)
        for j in range(len(self.net.points)):
            p_j = self.net.points[j]
            idx = buckets.query(p_j, chart_r + 1e-12)
            if len(idx) == 0:
                continue
            pts = points[idx]
            dj, dirj = _dist_and_direction(self.model, p_j, pts, want_grad)
            keep = dj <= self.support_radius
            if not keep.any():
                continue
            idx, pts, dj = idx[keep], pts[keep], dj[keep]
            if want_grad:
                dirj = dirj[keep]
            members = self._index_sets[j]
            K = len(members)
            if K == 0:
                phi = np.ones(len(idx))
                grad = np.zeros((len(idx), self.model.dim)) if want_grad else None
                yield j, idx, phi, grad
                continue
            h = np.empty((K, len(idx)))
            tvals = np.empty((K, len(idx)))
            dirs = np.empty((K, len(idx), self.model.dim)) if want_grad else None
            for a, k in enumerate(members):
                dk, dirk = _dist_and_direction(self.model, self.net.points[k],
                                               pts, want_grad)
                t = dk - dj
                tvals[a] = t
                h[a] = self.step(t)
                if want_grad:
                    dirs[a] = dirk - dirj
            phi = np.prod(h, axis=0)
            grad = None
            if want_grad:
                prefix = np.ones_like(h)
                suffix = np.ones_like(h)
                for a in range(1, K):
                    prefix[a] = prefix[a - 1] * h[a - 1]
                for a in range(K - 2, -1, -1):
                    suffix[a] = suffix[a + 1] * h[a + 1]
                hprime = self.step.deriv(tvals)
                coeff = prefix * suffix * hprime
                grad = np.einsum("kq,kqi->qi", coeff, dirs)
            yield j, idx, phi, grad

    def sum_phi(self, points, buckets=None, want_grad=False):
        """Denominator field S = sum_k phi_k (and its gradient) at the points."""
        points = np.asarray(points, dtype=float)
        S = np.zeros(len(points))
        V = np.zeros((len(points), self.model.dim)) if want_grad else None
        for j, idx, phi, grad in self.phi_terms(points, buckets, want_grad):
            S[idx] += phi
            if want_grad:
                V[idx] += grad
        # At an r-fold near-degenerate Voronoi vertex the denominator dips to
        # about r * 2^-(r-1) (3/4 at triple points, 1/2 at 4-fold, 5/16 at
        # 5-fold vertices), so a floor of 1/2 would reject valid nets; the
        # guard only has to catch a genuine collapse towards zero.
        bad = S < 0.1
        if bad.any():
            raise PartitionGap(
                f"partition denominator dropped to {S[bad].min():.4g} at "
                f"{int(bad.sum())} sample points")
        return (S, V) if want_grad else S

    def psi_terms(self, points, buckets=None, want_grad=False):
        """Yield (j, idx, psi_j[, grad psi_j]) with the quotient rule applied."""
        points = np.asarray(points, dtype=float)
        if buckets is None:
            buckets = PointBuckets(points, self.support_radius)
        if want_grad:
            S, V = self.sum_phi(points, buckets, want_grad=True)
        else:
            S = self.sum_phi(points, buckets)
            V = None
        for j, idx, phi, grad in self.phi_terms(points, buckets, want_grad):
            psi = phi / S[idx]
            if want_grad:
                gpsi = grad / S[idx, None] - (phi / S[idx] ** 2)[:, None] * V[idx]
                yield j, idx, psi, gpsi
            else:
                yield j, idx, psi, None

    # -- pointwise API ---------------------------------------------------------

    def evaluate(self, j, points):
        """psi_j at the given points (dense array)."""
        points = np.atleast_2d(np.asarray(points, dtype=float))
        out = np.zeros(len(points))
        for jj, idx, psi, _ in self.psi_terms(points):
            if jj == j:
                out[idx] = psi
        return out

    def gradient(self, j, points):
        """Riemannian gradient of psi_j, chart components (dense array)."""
        points = np.atleast_2d(np.asarray(points, dtype=float))
        out = np.zeros((len(points), self.model.dim))
        for jj, idx, _, gpsi in self.psi_terms(points, want_grad=True):
            if jj == j:
                out[idx] = gpsi
        return out

    def grad_norm_g(self, points, grads):
        G = self.model.metric(np.asarray(points, dtype=float))
        return np.sqrt(np.einsum("...i,...ij,...j->...", grads, G, grads))


def build_partition(net, alpha, epsilon, profile="quintic", beta=None):
    """Construct the partition of unity for a net at oscillation scale epsilon."""
    return PartitionOfUnity(net, alpha, epsilon, profile=profile, beta=beta)


def partition_diagnostics(pou, grid_m=None):
    """Measured support volumes, gradient bounds and structure checks.

    Returns a dict with vol{grad psi_j != 0} per j, the volume of the union
    of gradient supports, sup |grad psi_j|_g, the maximal number of indices
    active at a sample point, and violation counts for the inclusion of
    {psi_j not in {0,1}} in {grad psi_j != 0} (which covers both the
    psi_j*psi_l and the psi_j - psi_j^2 statements).
    """
    from .nets import ChartGrid

    model = pou.model
    if grid_m is None:
        grid_m = int(np.ceil(8.0 / pou.net.separation))
    grid = ChartGrid(model, grid_m)
    pts = grid.points
    w = grid.volume_weights()

    vol_grad = np.zeros(len(pou.net.points))
    sup_grad = np.zeros(len(pou.net.points))
    union_mask = np.zeros(len(pts), dtype=bool)
    active = np.zeros(len(pts), dtype=np.int64)
    sum_psi = np.zeros(len(pts))
    violations = 0

    for j, idx, psi, gpsi in pou.psi_terms(pts, want_grad=True):
        gnorm = pou.grad_norm_g(pts[idx], gpsi)
        nz = gnorm > 0
        vol_grad[j] = float(np.sum(w[idx][nz]))
        if nz.any():
            sup_grad[j] = float(gnorm.max())
        union_mask[idx[nz]] = True
        frac = (psi > 0) & (psi < 1)
        active[idx[frac]] += 1
        sum_psi[idx] += psi
        violations += int(np.count_nonzero(frac & ~nz))

    return {
        "grid_m": grid_m,
        "vol_grad_support": vol_grad,
        "vol_union_grad_support": float(np.sum(w[union_mask])),
        "sup_grad_norm": sup_grad,
        "max_active": int(active.max()) if len(active) else 0,
        "normalization_defect": float(np.max(np.abs(sum_psi - 1.0))),
        "structure_violations": violations,
        "delta": pou.delta,
        "epsilon": pou.epsilon,
        "alpha": pou.alpha,
        "beta": pou.beta,
    }
