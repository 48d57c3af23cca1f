"""Manifold models on a single periodic chart.

A manifold is presented on the chart [0,1)^n with a periodic metric field
G(x) and a periodic frame field E(x) whose columns span every tangent
space.  Geodesics, exponential/log maps, distances and the pushed-forward
("down") frames are all computed here; every operation accepts batched
inputs with points stored in the trailing axis.

Matrix conventions used throughout the package: a (1,1)-tensor A is the
matrix M with (M v)^l = sum_i M[l, i] v^i, so the adjoint with respect to
an inner-product matrix G is G^{-1} M^T G.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import NewtonDivergence, RadiusExceeded, StepSizeUnderflow

_SAFE_NAMES = {
    "sin": np.sin, "cos": np.cos, "tan": np.tan, "exp": np.exp,
    "sqrt": np.sqrt, "abs": np.abs, "pi": np.pi, "log": np.log,
}


def wrap01(x):
    """Reduce chart coordinates mod 1 into [0, 1)."""
    return np.mod(x, 1.0)


def wrap_centered(d):
    """Reduce a chart displacement to its representative in [-1/2, 1/2)."""
    return d - np.round(d)


def _as_points(x, dim):
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != dim:
        raise ValueError(f"expected trailing axis of length {dim}, got shape {x.shape}")
    return x


class ManifoldModel:
    """Closed parallelizable manifold in one periodic chart.

    Parameters
    ----------
    dim : int
        Chart dimension (2 or 3).
    metric : callable
        ``metric(x)`` maps points ``(..., n)`` to SPD matrices ``(..., n, n)``,
        1-periodic in each coordinate.
    frame : callable
        ``frame(x)`` maps points to nondegenerate matrices whose columns are
        the frame vectors in chart coordinates.
    metric_kind : {"flat", "warped", "general"}
        "flat" asserts that geodesics are straight chart lines (constant G);
        it short-circuits the integrators to exact arithmetic.
    injectivity_floor : float
        Declared lower bound on the injectivity radius.  All exp/log calls
        are restricted to this scale.
    """

    def __init__(self, dim, metric, frame, metric_kind="general",
                 injectivity_floor=0.5, name="custom",
                 steps_per_unit=64, min_steps=16, chr_step=1e-4,
                 geodesic_tol=1e-8, metric_derivative=None):
        if dim not in (2, 3):
            raise ValueError("only dim 2 and 3 are supported")
        if metric_kind not in ("flat", "warped", "general"):
            raise ValueError(f"unknown metric_kind {metric_kind!r}")
        self.dim = dim
        self._metric = metric
        self._frame = frame
        self.metric_kind = metric_kind
        self.injectivity_floor = float(injectivity_floor)
        self.name = name
        self.steps_per_unit = steps_per_unit
        self.min_steps = min_steps
        self.chr_step = chr_step
        self.geodesic_tol = geodesic_tol
        self._metric_derivative = metric_derivative
        self._metric_bounds = None
        self._diag_metric = None
        self._G0 = None  # constant chart metric, flat models only

    # -- fields -----------------------------------------------------------

    @property
    def is_flat(self):
        return self.metric_kind == "flat"

    def metric(self, x):
        x = _as_points(x, self.dim)
        G = np.asarray(self._metric(x), dtype=float)
        return np.broadcast_to(G, x.shape[:-1] + (self.dim, self.dim))

    def metric_inv(self, x):
        return np.linalg.inv(self.metric(x))

    def sqrt_det_metric(self, x):
        return np.sqrt(np.linalg.det(self.metric(x)))

    def frame(self, x):
        x = _as_points(x, self.dim)
        E = np.asarray(self._frame(x), dtype=float)
        return np.broadcast_to(E, x.shape[:-1] + (self.dim, self.dim))

    def frame_inv(self, x):
        return np.linalg.inv(self.frame(x))

    def fiber_gram(self, x):
        """Gram matrix g_ij = g(e_i, e_j) of the frame, constant per fiber."""
        E = self.frame(x)
        G = self.metric(x)
        return np.einsum("...ki,...kl,...lj->...ij", E, G, E)

    def constant_metric(self):
        """The constant chart metric of a flat model (None otherwise)."""
        if not self.is_flat:
            return None
        if self._G0 is None:
            self._G0 = self.metric(np.zeros((1, self.dim)))[0]
        return self._G0

    def has_diagonal_metric(self):
        if self._diag_metric is None:
            ax = (np.arange(17) + 0.31) / 17
            grid = np.stack(np.meshgrid(*([ax] * self.dim), indexing="ij"),
                            axis=-1).reshape(-1, self.dim)
            G = self.metric(grid)
            off = G * (1 - np.eye(self.dim))
            self._diag_metric = bool(np.max(np.abs(off)) < 1e-13)
        return self._diag_metric

    def norm_g(self, x, v):
        """Riemannian norm of chart vectors v at points x."""
        G0 = self.constant_metric()
        if G0 is not None:
            return np.sqrt(np.einsum("...i,ij,...j->...", v, G0, v))
        G = self.metric(x)
        return np.sqrt(np.einsum("...i,...ij,...j->...", v, G, v))

    def inner_g(self, x, v, w):
        G0 = self.constant_metric()
        if G0 is not None:
            return np.einsum("...i,ij,...j->...", v, G0, w)
        G = self.metric(x)
        return np.einsum("...i,...ij,...j->...", v, G, w)

    def metric_bounds(self, samples_per_axis=64):
        """(min, max) metric eigenvalue and min |det E| over a sample grid."""
        if self._metric_bounds is None:
            ax = (np.arange(samples_per_axis) + 0.5) / samples_per_axis
            grid = np.stack(np.meshgrid(*([ax] * self.dim), indexing="ij"),
                            axis=-1).reshape(-1, self.dim)
            eig = np.linalg.eigvalsh(self.metric(grid))
            detE = np.abs(np.linalg.det(self.frame(grid)))
            self._metric_bounds = (float(eig.min()), float(eig.max()),
                                   float(detE.min()))
        return self._metric_bounds

    def chart_radius(self, r):
        """Chart-coordinate radius that contains the geodesic ball of radius r."""
        lam_min, _, _ = self.metric_bounds()
        return r / math.sqrt(lam_min)

    # -- frame/chart coordinate conversion --------------------------------

    def frame_components(self, x, v):
        """Components of chart vectors v in the frame at x (solves E a = v)."""
        return np.linalg.solve(self.frame(x), np.asarray(v, dtype=float)[..., None])[..., 0]

    def chart_components(self, x, a):
        """Chart vector of frame components a at x (computes E a)."""
        return np.einsum("...ij,...j->...i", self.frame(x), np.asarray(a, dtype=float))

    # -- Christoffel symbols ----------------------------------------------

    def metric_derivative(self, x):
        """dG[..., k, i, j] = d g_ij / d x_k.

        Uses a closed-form derivative when the model supplies one, otherwise
        4th-order central differences with step chr_step.
        """
        x = _as_points(x, self.dim)
        if self._metric_derivative is not None:
            dG = np.asarray(self._metric_derivative(x), dtype=float)
            return np.broadcast_to(dG, x.shape[:-1] + (self.dim,) * 3)
        h = self.chr_step
        dG = np.empty(x.shape[:-1] + (self.dim, self.dim, self.dim))
        for k in range(self.dim):
            e = np.zeros(self.dim)
            e[k] = 1.0
            gp2 = self.metric(x + 2 * h * e)
            gp1 = self.metric(x + h * e)
            gm1 = self.metric(x - h * e)
            gm2 = self.metric(x - 2 * h * e)
            dG[..., k, :, :] = (-gp2 + 8 * gp1 - 8 * gm1 + gm2) / (12 * h)
        return dG

    def christoffel(self, x):
        """Gamma[..., k, i, j] of the chart metric."""
        x = _as_points(x, self.dim)
        if self.is_flat:
            return np.zeros(x.shape[:-1] + (self.dim,) * 3)
        dG = self.metric_derivative(x)
        Ginv = self.metric_inv(x)
        # Gamma^k_ij = 1/2 g^{kl} (d_i g_jl + d_j g_il - d_l g_ij)
        d_i_gjl = np.einsum("...ijl->...lij", dG)
        d_j_gil = np.einsum("...jil->...lij", dG)
        d_l_gij = np.einsum("...lij->...lij", dG)
        bracket = d_i_gjl + d_j_gil - d_l_gij
        return 0.5 * np.einsum("...kl,...lij->...kij", Ginv, bracket)

    # -- geodesics ----------------------------------------------------------

    def _geodesic_rhs(self, x, u):
        Gam = self.christoffel(wrap01(x))
        acc = -np.einsum("...kij,...i,...j->...k", Gam, u, u)
        return u, acc

    def _integrate_geodesic(self, p, v, n_steps, return_velocity=False):
        """RK4 on the geodesic ODE from (p, v) over t in [0, 1]."""
        x = np.array(p, dtype=float, copy=True)
        u = np.array(v, dtype=float, copy=True)
        h = 1.0 / n_steps
        for _ in range(n_steps):
            k1x, k1u = self._geodesic_rhs(x, u)
            k2x, k2u = self._geodesic_rhs(x + 0.5 * h * k1x, u + 0.5 * h * k1u)
            k3x, k3u = self._geodesic_rhs(x + 0.5 * h * k2x, u + 0.5 * h * k2u)
            k4x, k4u = self._geodesic_rhs(x + h * k3x, u + h * k3u)
            x = x + (h / 6.0) * (k1x + 2 * k2x + 2 * k3x + k4x)
            u = u + (h / 6.0) * (k1u + 2 * k2u + 2 * k3u + k4u)
        if return_velocity:
            return x, u
        return x

    def _steps_for(self, length):
        return max(self.min_steps, int(math.ceil(self.steps_per_unit * length)))

    def exp_map(self, p, v, check_radius=True, n_steps=None):
        """Endpoint of the geodesic with initial point p and velocity v.

        Raises RadiusExceeded when |v|_g exceeds the injectivity floor and
        StepSizeUnderflow when the integrator's energy drift exceeds the
        geodesic tolerance.
        """
        p = _as_points(p, self.dim)
        v = _as_points(v, self.dim)
        p, v = np.broadcast_arrays(p, v)
        if self.is_flat:
            # geodesics are complete straight chart lines; exact for any v
            return wrap01(p + v)
        lengths = self.norm_g(wrap01(p), v)
        if check_radius and np.any(lengths > self.injectivity_floor * (1 + 1e-12)):
            raise RadiusExceeded(
                f"|v|_g up to {lengths.max():.3g} exceeds injectivity floor "
                f"{self.injectivity_floor}")
        if n_steps is None:
            n_steps = self._steps_for(float(np.max(lengths, initial=0.0)))
        x, u = self._integrate_geodesic(p, v, n_steps, return_velocity=True)
        end_lengths = self.norm_g(wrap01(x), u)
        drift = np.abs(end_lengths - lengths) / np.maximum(lengths, 1e-300)
        mask = lengths > 1e-14
        if np.any(drift[mask] > 100 * self.geodesic_tol):
            raise StepSizeUnderflow(
                f"geodesic energy drift {drift[mask].max():.3g} exceeds tolerance")
        return wrap01(x)

    def nearest_representative(self, p, q):
        """Chart displacement from p to q minimizing the g(p)-norm over lattice shifts."""
        p = _as_points(p, self.dim)
        q = _as_points(q, self.dim)
        d0 = wrap_centered(q - p)
        if self.has_diagonal_metric():
            # componentwise wrap is optimal for diagonal metrics
            return d0
        shifts = np.stack(np.meshgrid(*([np.array([-1.0, 0.0, 1.0])] * self.dim),
                                      indexing="ij"), axis=-1).reshape(-1, self.dim)
        cands = d0[..., None, :] + shifts
        G = self.metric(wrap01(p))
        norms = np.einsum("...si,...ij,...sj->...s", cands, G, cands)
        best = np.argmin(norms, axis=-1)
        return np.take_along_axis(cands, best[..., None, None], axis=-2)[..., 0, :]

    def log_map(self, p, q, max_iter=50, tol=1e-12):
        """Tangent vector v at p with exp_p(v) = q (shooting iteration).

        Initialized with the nearest lattice representative of q - p; within
        the injectivity floor the exponential map is a small perturbation of
        the identity, so the residual update contracts.  A finite-difference
        Newton step is used on stragglers.
        """
        p = _as_points(p, self.dim)
        q = _as_points(q, self.dim)
        p, q = np.broadcast_arrays(p, q)
        v = self.nearest_representative(p, q)
        if self.is_flat:
            return v
        if np.any(self.norm_g(wrap01(p), v) > self.injectivity_floor * 1.05):
            raise RadiusExceeded("log_map query beyond the injectivity floor")
        for it in range(max_iter):
            r = wrap_centered(q - self.exp_map(p, v, check_radius=False))
            err = np.max(np.abs(r))
            if err < tol:
                return v
            if it < 10:
                v = v + r
            else:
                v = v + self._newton_correction(p, v, r)
        raise NewtonDivergence(
            f"log_map failed to converge below {tol} in {max_iter} iterations "
            f"(residual {err:.3g})")

    def _newton_correction(self, p, v, r):
        J = self.dexp(p, v)
        return np.linalg.solve(J, r[..., None])[..., 0]

    def dexp(self, p, v, h=1e-6):
        """Differential of exp_p at v, columns by central differences."""
        p = _as_points(p, self.dim)
        v = _as_points(v, self.dim)
        p, v = np.broadcast_arrays(p, v)
        if self.is_flat:
            return np.broadcast_to(np.eye(self.dim), p.shape[:-1] + (self.dim, self.dim)).copy()
        n_steps = self._steps_for(
            float(np.max(self.norm_g(wrap01(p), v), initial=0.0)) + h)
        cols = []
        for i in range(self.dim):
            e = np.zeros(self.dim)
            e[i] = 1.0
            qp = self._integrate_geodesic(p, v + h * e, n_steps)
            qm = self._integrate_geodesic(p, v - h * e, n_steps)
            cols.append(wrap_centered(qp - qm) / (2 * h))
        return np.stack(cols, axis=-1)

    def distance(self, p, q):
        """Geodesic distance |log_p q|_g; valid below the injectivity floor."""
        v = self.log_map(p, q)
        return self.norm_g(wrap01(_as_points(p, self.dim)), v)

    def down_frame(self, p, q):
        """Matrix with columns e_i^down(p; q) = (d exp_p)_v (e_i(p)), v = log_p q."""
        p = _as_points(p, self.dim)
        q = _as_points(q, self.dim)
        p, q = np.broadcast_arrays(p, q)
        E = self.frame(wrap01(p))
        if self.is_flat:
            return E.copy() if E.base is None else np.array(E)
        v = self.log_map(p, q)
        J = self.dexp(p, v)
        return J @ E

    def conjugate_point_check(self, n_points=8, n_dirs=8, seed=0):
        """Smallest |det d exp| along geodesics of injectivity_floor length.

        A nonpositive value signals a conjugate point inside the declared
        radius (Jacobi-field sign change); callers should reduce the floor.
        """
        rng = np.random.default_rng(seed)
        p = rng.random((n_points, 1, self.dim))
        theta = 2 * np.pi * np.arange(n_dirs) / n_dirs
        if self.dim == 2:
            dirs = np.stack([np.cos(theta), np.sin(theta)], axis=-1)
        else:
            dirs = rng.normal(size=(n_dirs, self.dim))
            dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
        v = np.broadcast_to(dirs, (n_points, n_dirs, self.dim)).copy()
        scale = self.injectivity_floor / self.norm_g(p, v)
        v = v * scale[..., None]
        J = self.dexp(p, v)
        return float(np.min(np.linalg.det(J)))


# -- presets and configuration -------------------------------------------


def _constant_field(M):
    M = np.asarray(M, dtype=float)

    def field(x):
        return np.broadcast_to(M, x.shape[:-1] + M.shape)

    return field


def _identity_field(n):
    return _constant_field(np.eye(n))


def flat_model(dim=2):
    """Flat torus with the identity metric and frame."""
    return ManifoldModel(dim, _identity_field(dim), _identity_field(dim),
                         metric_kind="flat", injectivity_floor=0.5, name="flat")


def warped_model(a=0.5, dim=2, injectivity_floor=0.25):
    """Warped torus G = diag(1, 1 + a sin(2 pi x1), [1]) with identity frame."""
    if not 0 <= a < 1:
        raise ValueError("warp amplitude must lie in [0, 1)")

    def metric(x):
        n = x.shape[-1]
        G = np.zeros(x.shape[:-1] + (n, n))
        G[..., 0, 0] = 1.0
        G[..., 1, 1] = 1.0 + a * np.sin(2 * np.pi * x[..., 0])
        if n == 3:
            G[..., 2, 2] = 1.0
        return G

    def metric_derivative(x):
        n = x.shape[-1]
        dG = np.zeros(x.shape[:-1] + (n, n, n))
        dG[..., 0, 1, 1] = 2 * np.pi * a * np.cos(2 * np.pi * x[..., 0])
        return dG

    return ManifoldModel(dim, metric, _identity_field(dim),
                         metric_kind="warped", injectivity_floor=injectivity_floor,
                         name=f"warped-sin({a})", metric_derivative=metric_derivative)


def skew_frame_model(b=0.3, dim=2):
    """Flat torus with a constant skew (non-orthonormal) frame."""
    E = np.eye(dim)
    E[0, 1] = b
    return ManifoldModel(dim, _identity_field(dim), _constant_field(E),
                         metric_kind="flat", injectivity_floor=0.5,
                         name=f"skew-frame({b})")


def _compile_matrix_field(rows, dim):
    """Compile a nested list of coordinate expression strings to a field."""
    compiled = [[compile(str(entry), "<config>", "eval") for entry in row]
                for row in rows]

    def field(x):
        names = dict(_SAFE_NAMES)
        for i in range(dim):
            names[f"x{i + 1}"] = x[..., i]
        out = np.zeros(x.shape[:-1] + (dim, dim))
        for i, row in enumerate(compiled):
            for j, code in enumerate(row):
                out[..., i, j] = eval(code, {"__builtins__": {}}, names)
        return out

    return field


def model_from_config(cfg):
    """Build a model from a configuration mapping.

    Either ``{"preset": "flat" | "warped-sin(a)" | "skew-frame(b)", "dim": n}``
    or explicit expression strings for the metric and frame entries, e.g.
    ``{"dim": 2, "metric_kind": "general", "metric": [["1", "0"], ["0", "1+0.2*sin(2*pi*x1)"]],
    "frame": [["1", "0"], ["0", "1"]], "injectivity_floor": 0.25}``.
    """
    if isinstance(cfg, str):
        cfg = {"preset": cfg}
    cfg = dict(cfg)
    preset = cfg.get("preset")
    if preset is not None:
        dim = int(cfg.get("dim", 2))
        if preset == "flat":
            model = flat_model(dim)
        elif preset.startswith("warped-sin(") and preset.endswith(")"):
            model = warped_model(float(preset[len("warped-sin("):-1]), dim)
        elif preset.startswith("skew-frame(") and preset.endswith(")"):
            model = skew_frame_model(float(preset[len("skew-frame("):-1]), dim)
        else:
            raise ValueError(f"unknown model preset {preset!r}")
        if "injectivity_floor" in cfg:
            model.injectivity_floor = float(cfg["injectivity_floor"])
        return model
    dim = int(cfg["dim"])
    metric = _compile_matrix_field(cfg["metric"], dim)
    frame = (_compile_matrix_field(cfg["frame"], dim)
             if "frame" in cfg else _identity_field(dim))
    return ManifoldModel(dim, metric, frame,
                         metric_kind=cfg.get("metric_kind", "general"),
                         injectivity_floor=float(cfg.get("injectivity_floor", 0.2)),
                         name=cfg.get("name", "custom"))


def validate_model(model, samples_per_axis=64):
    """Check the declared invariants on a dense sample grid.

    Returns a dict with the measured metric eigenvalue range, the minimal
    frame determinant and the maximal periodicity defect.
    """
    ax = (np.arange(samples_per_axis) + 0.5) / samples_per_axis
    grid = np.stack(np.meshgrid(*([ax] * model.dim), indexing="ij"),
                    axis=-1).reshape(-1, model.dim)
    G = model.metric(grid)
    sym_defect = float(np.max(np.abs(G - np.swapaxes(G, -1, -2))))
    eig = np.linalg.eigvalsh(G)
    detE = np.linalg.det(model.frame(grid))
    shift = np.eye(model.dim)
    per_defect = 0.0
    for k in range(model.dim):
        per_defect = max(
            per_defect,
            float(np.max(np.abs(model.metric(grid + shift[k]) - G))),
            float(np.max(np.abs(model.frame(grid + shift[k]) - model.frame(grid)))),
        )
    report = {
        "metric_symmetric_defect": sym_defect,
        "metric_eig_min": float(eig.min()),
        "metric_eig_max": float(eig.max()),
        "frame_det_min_abs": float(np.min(np.abs(detE))),
        "periodicity_defect": per_defect,
    }
    if eig.min() <= 0:
        raise ValueError("metric is not positive definite on the sample grid")
    if report["frame_det_min_abs"] < 1e-10:
        raise ValueError("frame degenerates on the sample grid")
    if per_defect > 1e-10:
        raise ValueError("metric/frame are not 1-periodic to machine precision")
    return report
