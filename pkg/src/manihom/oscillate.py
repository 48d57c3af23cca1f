"""Oscillating fields and tensors on M, and the two-scale diagnostics.

The microlocalization maps send a point q in the support of psi_j to the
fiber coordinate v_j(q) = E(p_j)^{-1} exp_{p_j}^{-1}(q) / eps, reduced
mod 1 exactly.  From fiber data f[p, v] this builds

    f_eps(q) = sum_j psi_j(q) f[p_j, v_j(q)],

and for vertical (1,1)-tensors the coordinate-pullback variant (components
in the frame e_i) or the full pullback variant (components in the pushed
frames e_i-down).  Every diagnostic reports rows over a ladder of eps
values; convergence assertions live in the test suite.
"""

from __future__ import annotations

import numpy as np

from .errors import ScaleOrderViolated
from .geometry import wrap01
from .nets import ChartGrid, build_net
from .partition import PointBuckets, build_partition


def check_scale_order(epsilon, alpha, beta):
    """Require visible gaps between the oscillation, seam, and cell scales.

    Enforces eps <= eps^beta / 4 (cells hold at least four oscillation
    periods) and eps^alpha <= eps^beta / 2 (seams at most half a cell).
    (A literal eps <= (eps^beta)^2/10 test is unsatisfiable for any
    1/2 < beta < 1 and eps < 1, since eps^{2 beta} < eps.)
    """
    epsilon = float(epsilon)
    if not 0 < epsilon < 1:
        raise ScaleOrderViolated(f"epsilon must lie in (0,1), got {epsilon}")
    sep = epsilon ** beta
    if epsilon > sep / 4 or epsilon ** alpha > sep / 2:
        raise ScaleOrderViolated(
            f"scales not separated: eps={epsilon}, eps^alpha={epsilon**alpha:.4g}, "
            f"eps^beta={sep:.4g} (need eps <= eps^beta/4 and eps^alpha <= eps^beta/2)")


_setup_cache = {}


def scale_setup(model, epsilon, alpha=0.8, beta=0.6, seed=0, lloyd_iterations=4,
                aligned=False):
    """Net plus partition at the canonical scales sep = eps^beta, delta = eps^alpha.

    With ``aligned`` the net points are drawn from the eps-lattice, so all
    microlocalization phases agree; on the flat torus with identity frame
    this recovers the classical test functions f(q, q/eps) exactly.
    """
    check_scale_order(epsilon, alpha, beta)
    key = (id(model), float(epsilon), float(alpha), float(beta), int(seed),
           int(lloyd_iterations), bool(aligned))
    if key not in _setup_cache:
        if aligned:
            net = _aligned_net(model, epsilon, beta, seed)
        else:
            net = build_net(model, epsilon ** beta, seed=seed,
                            lloyd_iterations=lloyd_iterations)
        net.epsilon = float(epsilon)
        net.beta = float(beta)
        pou = build_partition(net, alpha, epsilon, beta=beta)
        _setup_cache[key] = (net, pou)
    return _setup_cache[key]


def _aligned_net(model, epsilon, beta, seed):
    """Maximal separated net with points on the eps-lattice.

    Requires 1/eps to be an integer so the lattice closes up on the torus.
    Candidates are the eps-lattice points; random-order insertion keeps the
    cell geometry generic while every p_j / eps stays integral.
    """
    from .nets import ChartGrid, Net, _capped_distances

    m_c = round(1.0 / epsilon)
    if abs(m_c * epsilon - 1.0) > 1e-12:
        raise ScaleOrderViolated(
            f"aligned nets need 1/eps integral, got eps={epsilon}")
    separation = epsilon ** beta
    grid = ChartGrid(model, m_c)
    candidates = grid.points - 0.5 / m_c  # exact lattice multiples of eps
    rng = np.random.default_rng(seed)
    order = rng.permutation(grid.size)
    cap = 1.3 * separation
    chart_r = model.chart_radius(cap) + grid.spacing
    mindist = np.full(grid.size, np.inf)
    points = []
    for idx in order:
        if mindist[idx] >= separation:
            p = candidates[idx]
            points.append(p)
            win = grid.window(p, chart_r)
            d = _capped_distances(model, p, candidates[win], cap)
            mindist[win] = np.minimum(mindist[win], d)
    return Net(model=model, points=wrap01(np.array(points)), separation=separation,
               seed=seed, covering_radius=float(mindist.max()))


def quad_grid(model, m):
    """Midpoint quadrature grid with Riemannian weights."""
    grid = ChartGrid(model, m)
    return grid.points, grid.volume_weights()


def default_quad_m(epsilon, floor=256, cap=1024):
    """Midpoint resolution resolving oscillations at scale eps (h <= eps/4)."""
    return int(min(cap, max(floor, np.ceil(4.0 / epsilon))))


class OscillatingField:
    """f_eps built from fiber data, a partition of unity, and a scale eps."""

    def __init__(self, source, pou, epsilon):
        check_scale_order(epsilon, pou.alpha, pou.beta)
        self.source = source
        self.pou = pou
        self.epsilon = float(epsilon)
        self.model = pou.model
        self.net = pou.net

    def fiber_coordinates(self, j, points):
        """v_j(q): frame components of the log map, scaled and reduced mod 1."""
        p = self.net.points[j]
        v_chart = self.model.log_map(np.broadcast_to(p, points.shape), points)
        a = self.model.frame_components(p[None], v_chart)
        return np.mod(a / self.epsilon, 1.0)

    def evaluate(self, points, buckets=None):
        points = np.asarray(points, dtype=float)
        if buckets is None:
            buckets = PointBuckets(points, self.pou.support_radius)
        out = np.zeros(len(points))
        for j, idx, psi, _ in self.pou.psi_terms(points, buckets):
            vals = self.source(self.net.points[j], self.fiber_coordinates(j, points[idx]))
            out[idx] += psi * vals
        return out

    def gradient(self, points, buckets=None):
        """Riemannian gradient of f_eps, chart components.

        Differentiates the exact formula: the partition term carries
        grad psi_j, the fiber term carries (1/eps) (d_v f) (E_down_j)^{-1}
        lowered with the chart metric.
        """
        points = np.asarray(points, dtype=float)
        if buckets is None:
            buckets = PointBuckets(points, self.pou.support_radius)
        Ginv = self.model.metric_inv(points)
        out = np.zeros((len(points), self.model.dim))
        for j, idx, psi, gpsi in self.pou.psi_terms(points, buckets, want_grad=True):
            pts = points[idx]
            V = self.fiber_coordinates(j, pts)
            p = self.net.points[j]
            vals = self.source(p, V)
            dvals = _fiber_derivative(self.source, p, V)
            Edown = self.model.down_frame(np.broadcast_to(p, pts.shape), pts)
            codiff = np.linalg.solve(np.swapaxes(Edown, -1, -2),
                                     dvals[..., None])[..., 0] / self.epsilon
            out[idx] += vals[:, None] * gpsi
            out[idx] += psi[:, None] * np.einsum("...ij,...j->...i", Ginv[idx], codiff)
        return out


def _fiber_derivative(source, p, V, h=1e-6):
    """d f / d v_i at scattered fiber points, analytic if provided else central FD."""
    dfn = getattr(source, "dfn", None)
    if dfn is not None:
        return np.asarray(dfn(p, V), dtype=float)
    dim = V.shape[-1]
    out = np.empty(V.shape)
    for i in range(dim):
        e = np.zeros(dim)
        e[i] = 1.0
        out[..., i] = (source(p, V + h * e) - source(p, V - h * e)) / (2 * h)
    return out


def oscillating_function(source, pou, epsilon):
    """Build f_eps; raises ScaleOrderViolated when eps is coarse vs the net."""
    return OscillatingField(source, pou, epsilon)


class PushedVerticalField:
    """X_eps for a vertical field with frame components comp(p, V) -> (..., n).

    Pullback mode: chart vector sum_j psi_j E_down_j(q) comp[p_j, v_j(q)].
    """

    def __init__(self, components, pou, epsilon):
        check_scale_order(epsilon, pou.alpha, pou.beta)
        self.components = components
        self.pou = pou
        self.epsilon = float(epsilon)
        self.model = pou.model
        self.net = pou.net
        self._osc = OscillatingField(lambda p, V: np.zeros(V.shape[:-1]), pou, epsilon)

    def evaluate(self, points, buckets=None):
        points = np.asarray(points, dtype=float)
        if buckets is None:
            buckets = PointBuckets(points, self.pou.support_radius)
        out = np.zeros((len(points), self.model.dim))
        for j, idx, psi, _ in self.pou.psi_terms(points, buckets):
            pts = points[idx]
            V = self._osc.fiber_coordinates(j, pts)
            comp = np.asarray(self.components(self.net.points[j], V), dtype=float)
            p = self.net.points[j]
            Edown = self.model.down_frame(np.broadcast_to(p, pts.shape), pts)
            out[idx] += psi[:, None] * np.einsum("...ij,...j->...i", Edown, comp)
        return out


class OscillatingTensor:
    """A_eps as chart-component endomorphism matrices over M.

    mode="coords" oscillates the frame components and keeps the frame e_i;
    mode="pullback" expresses them in the pushed frames e_i-down.  With
    ``symmetrized`` the metric adjoint is averaged in, which restores exact
    self-adjointness at every point.
    """

    def __init__(self, source, pou, epsilon, mode="pullback", symmetrized=True):
        check_scale_order(epsilon, pou.alpha, pou.beta)
        if mode not in ("coords", "pullback"):
            raise ValueError(f"unknown oscillating-tensor mode {mode!r}")
        self.source = source
        self.pou = pou
        self.epsilon = float(epsilon)
        self.mode = mode
        self.symmetrized = symmetrized
        self.model = pou.model
        self.net = pou.net
        self._osc = OscillatingField(lambda p, V: np.zeros(V.shape[:-1]), pou, epsilon)

    def chart_matrices(self, points, buckets=None):
        points = np.asarray(points, dtype=float)
        if buckets is None:
            buckets = PointBuckets(points, self.pou.support_radius)
        n = self.model.dim
        out = np.zeros((len(points), n, n))
        for j, idx, psi, _ in self.pou.psi_terms(points, buckets):
            pts = points[idx]
            V = self._osc.fiber_coordinates(j, pts)
            A = self.source(self.net.points[j], V)
            p = self.net.points[j]
            if self.mode == "coords":
                B = np.broadcast_to(self.model.frame(p[None])[0], (len(pts), n, n))
            else:
                B = self.model.down_frame(np.broadcast_to(p, pts.shape), pts)
            Binv = np.linalg.inv(B)
            out[idx] += psi[:, None, None] * (B @ A @ Binv)
        if self.symmetrized:
            G = self.model.metric(points)
            Ginv = np.linalg.inv(G)
            adj = Ginv @ np.swapaxes(out, -1, -2) @ G
            out = 0.5 * (out + adj)
        return out

    def coefficient_field(self):
        """Callable points -> chart matrices, for the elliptic assembler."""
        return lambda points: self.chart_matrices(points)


def oscillating_tensor(source, pou, epsilon, mode="pullback", symmetrized=True):
    return OscillatingTensor(source, pou, epsilon, mode=mode, symmetrized=symmetrized)


def tensor_l1_gap(tensor_a, tensor_b, base_m=128):
    """Integral of the Frobenius gap between two tensor fields on M."""
    pts, w = quad_grid(tensor_a.model, base_m)
    A = tensor_a.chart_matrices(pts)
    B = tensor_b.chart_matrices(pts)
    gap = np.sqrt(np.sum((A - B) ** 2, axis=(-2, -1)))
    return float(np.sum(gap * w))


# -- diagnostics -------------------------------------------------------------


def fiber_mean_on_base(model, source, base_points, n_modes=16):
    """Normalized fiber average of f[p, .] at each base point."""
    from .fiber import fiber_grid

    V = fiber_grid(n_modes, model.dim)
    if getattr(source, "depends_on_base", False):
        return np.array([float(np.mean(source(p, V))) for p in base_points])
    val = float(np.mean(source(base_points[0], V)))
    return np.full(len(base_points), val)


def two_scale_pairing(u_fn, source, pou, epsilon, base_m=None):
    """Quadrature of u * f_eps over M with a Richardson error estimate."""
    model = pou.model
    if base_m is None:
        base_m = default_quad_m(epsilon)
    field = OscillatingField(source, pou, epsilon)
    vals = {}
    for m in (base_m, base_m // 2):
        pts, w = quad_grid(model, m)
        vals[m] = float(np.sum(u_fn(pts) * field.evaluate(pts) * w))
    return {"value": vals[base_m], "richardson_error": abs(vals[base_m] - vals[base_m // 2]),
            "quad_m": base_m}


def riemann_lebesgue_check(model, source, eps_list, alpha=0.8, beta=0.6, seed=0,
                           quad_m=None):
    """Rows (eps, measured, target, error) for int f_eps -> normalized integral."""
    rows = []
    for eps in eps_list:
        net, pou = scale_setup(model, eps, alpha, beta, seed)
        m = quad_m or default_quad_m(eps)
        pts, w = quad_grid(model, m)
        field = OscillatingField(source, pou, eps)
        measured = float(np.sum(field.evaluate(pts) * w))
        target = float(np.sum(fiber_mean_on_base(model, source, pts) * w))
        rows.append({"eps": eps, "measured": measured, "target": target,
                     "error": abs(measured - target), "quad_m": m})
    return rows


def admissibility_check(model, source, eps_list, alpha=0.8, beta=0.6, seed=0,
                        quad_m=None, n_modes=16):
    """Uniform bound and convergence of int |f_eps|^2 to the fiber L2 mass."""
    from .fiber import fiber_grid

    rows = []
    V = fiber_grid(n_modes, model.dim)
    for eps in eps_list:
        net, pou = scale_setup(model, eps, alpha, beta, seed)
        m = quad_m or default_quad_m(eps)
        pts, w = quad_grid(model, m)
        field = OscillatingField(source, pou, eps)
        measured = float(np.sum(field.evaluate(pts) ** 2 * w))
        if getattr(source, "depends_on_base", False):
            coarse = pts[:: max(1, len(pts) // 512)]
            sq_mean = np.array([float(np.mean(source(p, V) ** 2)) for p in coarse])
            sup_mass = float(sq_mean.max())
            target = float(np.sum(np.array(
                [float(np.mean(source(p, V) ** 2)) for p in pts]) * w))
        else:
            mass = float(np.mean(source(pts[0], V) ** 2))
            sup_mass = mass
            target = mass * float(np.sum(w))
        rows.append({"eps": eps, "measured": measured, "target": target,
                     "error": abs(measured - target),
                     "rel_error": abs(measured - target) / max(abs(target), 1e-300),
                     "bound_ratio": measured / max(sup_mass, 1e-300), "quad_m": m})
    return rows


def algebra_check(model, source_f, source_g, eps_list, alpha=0.8, beta=0.6,
                  seed=0, quad_m=None):
    """Discrepancy d(eps) = |int f_eps g_eps - int (fg)_eps|."""
    from .fiber import PeriodicFiberField

    fg = PeriodicFiberField(
        lambda p, V: source_f(p, V) * source_g(p, V), dim=model.dim,
        depends_on_base=(getattr(source_f, "depends_on_base", False)
                         or getattr(source_g, "depends_on_base", False)),
        name="product")
    rows = []
    for eps in eps_list:
        net, pou = scale_setup(model, eps, alpha, beta, seed)
        m = quad_m or default_quad_m(eps)
        pts, w = quad_grid(model, m)
        buckets = PointBuckets(pts, pou.support_radius)
        f_vals = OscillatingField(source_f, pou, eps).evaluate(pts, buckets)
        g_vals = OscillatingField(source_g, pou, eps).evaluate(pts, buckets)
        fg_vals = OscillatingField(fg, pou, eps).evaluate(pts, buckets)
        d = float(np.sum((f_vals * g_vals - fg_vals) * w))
        rows.append({"eps": eps, "discrepancy": abs(d), "quad_m": m})
    return rows


def gradient_commutator_check(model, source, eps_list, alpha=0.8, beta=0.6,
                              seed=0, sample_m=None):
    """Sup-norm of eps * grad(f_eps) - (grad_v f)_eps over a sample grid."""
    rows = []
    for eps in eps_list:
        net, pou = scale_setup(model, eps, alpha, beta, seed)
        m = sample_m or int(min(512, max(128, np.ceil(2.0 / eps))))
        pts, _ = quad_grid(model, m)
        buckets = PointBuckets(pts, pou.support_radius)
        field = OscillatingField(source, pou, eps)
        lhs = eps * field.gradient(pts, buckets)

        def grad_components(p, V, _src=source, _model=model):
            from .fiber import FiberMetric
            gram = FiberMetric.of(_model, p)
            d = _fiber_derivative(_src, p, V)
            return np.einsum("ij,...j->...i", gram.inv, d)

        rhs = PushedVerticalField(grad_components, pou, eps).evaluate(pts, buckets)
        err = model.norm_g(pts, lhs - rhs)
        rows.append({"eps": eps, "sup_error": float(err.max()), "sample_m": m})
    return rows


def by_parts_residual(model, u_fn, grad_u_fn, components, eps, pou=None,
                      alpha=0.8, beta=0.6, seed=0, quad_m=None, n_modes=16):
    """Residual of the oscillatory integration-by-parts identity.

    R = | int <grad u, X_eps> + (1/eps) int u h_eps + int u div X_tilde |,
    h = div_v X; all three integrals by midpoint quadrature.
    """
    from .fiber import PeriodicFiberField, fiber_grid

    if pou is None:
        net, pou = scale_setup(model, eps, alpha, beta, seed)
    m = quad_m or default_quad_m(eps)
    pts, w = quad_grid(model, m)
    buckets = PointBuckets(pts, pou.support_radius)

    X_eps = PushedVerticalField(components, pou, eps).evaluate(pts, buckets)
    term1 = float(np.sum(model.inner_g(pts, grad_u_fn(pts), X_eps) * w))

    def h_fn(p, V, _c=components, _h=1e-6):
        dim = V.shape[-1]
        out = np.zeros(V.shape[:-1])
        for i in range(dim):
            e = np.zeros(dim)
            e[i] = 1.0
            out += (np.asarray(_c(p, V + _h * e))[..., i]
                    - np.asarray(_c(p, V - _h * e))[..., i]) / (2 * _h)
        return out

    h_src = PeriodicFiberField(h_fn, dim=model.dim,
                               depends_on_base=getattr(components, "depends_on_base", False),
                               name="div_v X")
    u_vals = u_fn(pts)
    h_vals = OscillatingField(h_src, pou, eps).evaluate(pts, buckets)
    term2 = float(np.sum(u_vals * h_vals * w)) / eps

    div_avg = _divergence_of_average(model, components, pts, m, n_modes)
    term3 = float(np.sum(u_vals * div_avg * w))
    return {"eps": eps, "residual": abs(term1 + term2 + term3),
            "terms": (term1, term2, term3), "quad_m": m}


def _divergence_of_average(model, components, pts, m, n_modes):
    """div_g of the fiber-averaged vector field, central differences on the grid."""
    from .fiber import fiber_grid

    V = fiber_grid(n_modes, model.dim)
    dim = model.dim

    def avg_chart(points):
        if getattr(components, "depends_on_base", False):
            comp = np.array([np.asarray(components(p, V)).reshape(-1, dim).mean(axis=0)
                             for p in points])
        else:
            c0 = np.asarray(components(points[0], V)).reshape(-1, dim).mean(axis=0)
            comp = np.broadcast_to(c0, (len(points), dim))
        return np.einsum("...ij,...j->...i", model.frame(points), comp)

    sqrtg = model.sqrt_det_metric(pts)
    out = np.zeros(len(pts))
    h = 1.0 / m
    for i in range(dim):
        e = np.zeros(dim)
        e[i] = h
        fp = model.sqrt_det_metric(wrap01(pts + e)) * avg_chart(wrap01(pts + e))[:, i]
        fm = model.sqrt_det_metric(wrap01(pts - e)) * avg_chart(wrap01(pts - e))[:, i]
        out += (fp - fm) / (2 * h)
    return out / sqrtg


def compensated_pairing(model, source_u, source_v, phi_fn, eps_list, alpha=0.8,
                        beta=0.6, seed=0, quad_m=None, n_modes=16,
                        shift_v=None):
    """Pairings int phi u_eps v_eps against the fiber-averaged product target.

    ``shift_v``, when set to a chart vector c, builds v_eps on the net
    translated by eps*c, so its two-scale limit is the fiber-shifted
    source_v(. - c).
    """
    from .fiber import fiber_grid
    from .nets import Net
    from .partition import build_partition as _bp

    V = fiber_grid(n_modes, model.dim)
    rows = []
    for eps in eps_list:
        net, pou = scale_setup(model, eps, alpha, beta, seed)
        m = quad_m or default_quad_m(eps)
        pts, w = quad_grid(model, m)
        buckets = PointBuckets(pts, pou.support_radius)
        u_vals = OscillatingField(source_u, pou, eps).evaluate(pts, buckets)
        if shift_v is not None:
            shifted = Net(model=model,
                          points=wrap01(net.points + eps * np.asarray(shift_v)),
                          separation=net.separation, seed=net.seed,
                          epsilon=eps, beta=beta,
                          covering_radius=net.covering_radius)
            pou_v = _bp(shifted, alpha, eps, beta=beta)
            v_vals = OscillatingField(source_v, pou_v, eps).evaluate(pts)

            def v_limit(p, W):
                return source_v(p, W - np.asarray(shift_v))
        else:
            v_vals = OscillatingField(source_v, pou, eps).evaluate(pts, buckets)
            v_limit = source_v
        phi_vals = phi_fn(pts)
        measured = float(np.sum(phi_vals * u_vals * v_vals * w))
        base_dep = (getattr(source_u, "depends_on_base", False)
                    or getattr(source_v, "depends_on_base", False))
        if base_dep:
            cpts, cw = quad_grid(model, 64)
            means = np.array([float(np.mean(source_u(p, V) * v_limit(p, V)))
                              for p in cpts])
            target = float(np.sum(phi_fn(cpts) * means * cw))
        else:
            target_fiber = float(np.mean(source_u(pts[0], V) * v_limit(pts[0], V)))
            target = target_fiber * float(np.sum(phi_vals * w))
        rows.append({"eps": eps, "measured": measured, "target": target,
                     "error": abs(measured - target), "quad_m": m})
    return rows
