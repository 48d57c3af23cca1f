"""Periodic fields on torus fibers and the vertical calculus.

The fiber over a base point p is the torus of frame coordinates
v in [0,1)^n; the inner product of the lifted frame is the constant Gram
matrix  g_ij(p) = g(e_i, e_j).  All fiber fields are handled spectrally:
band-limited data is exact, smooth closed-form data is sampled on a
2N-per-dimension grid (default N=32) and transformed.

Conventions.  A scalar field is an array over the fiber grid; a vertical
vector field is an array (..., n) of frame components; a vertical (1,1)
tensor is an array (..., n, n) acting on frame components.  The vertical
gradient carries the inverse Gram matrix, grad_v f = G^{-1} df; the
vertical divergence is the plain frame-coordinate contraction
div_v X = sum_i d X^i / d v_i, so that div_v(grad_v) has Fourier symbol
-4 pi^2 |k|_p^2 with |k|_p^2 = k^T G^{-1} k.
"""

from __future__ import annotations

import numpy as np

from .errors import NotElliptic, ZeroMode


def fiber_grid(n_modes, dim):
    """Uniform fiber sample grid with 2*n_modes points per dimension."""
    m = 2 * n_modes
    ax = np.arange(m) / m
    mesh = np.meshgrid(*([ax] * dim), indexing="ij")
    return np.stack(mesh, axis=-1)


def mode_vectors(n_modes, dim):
    """Integer mode array k[..., i] matching numpy's fftn layout."""
    m = 2 * n_modes
    freqs = np.fft.fftfreq(m, d=1.0 / m)
    mesh = np.meshgrid(*([freqs] * dim), indexing="ij")
    return np.stack(mesh, axis=-1)


class PeriodicFiberField:
    """Scalar field on the torus bundle, 1-periodic in each frame coordinate.

    Wraps either a closed-form callable ``fn(p, V)`` (vectorized over fiber
    points ``V`` of shape (..., n)) or a table of Fourier coefficients.
    """

    def __init__(self, fn, dim=2, depends_on_base=False, name="field"):
        self.fn = fn
        self.dim = dim
        self.depends_on_base = depends_on_base
        self.name = name

    @classmethod
    def from_callable(cls, fn, dim=2, depends_on_base=False, name="field",
                      check_periodicity=True):
        field = cls(fn, dim=dim, depends_on_base=depends_on_base, name=name)
        if check_periodicity:
            field.check_periodic()
        return field

    @classmethod
    def from_modes(cls, coeffs, dim=2, name="modes"):
        """Field from a dict {k-tuple: complex coefficient} (real part taken)."""
        items = [(np.array(k, dtype=float), complex(c)) for k, c in coeffs.items()]

        def fn(p, V):
            out = np.zeros(V.shape[:-1])
            for k, c in items:
                phase = 2 * np.pi * np.einsum("...i,i->...", V, k)
                out = out + (c.real * np.cos(phase) - c.imag * np.sin(phase))
            return out

        return cls(fn, dim=dim, depends_on_base=False, name=name)

    @classmethod
    def constant(cls, value, dim=2):
        return cls(lambda p, V: np.full(V.shape[:-1], float(value)), dim=dim,
                   name=f"const({value})")

    def __call__(self, p, V):
        return np.asarray(self.fn(p, np.asarray(V, dtype=float)), dtype=float)

    def check_periodic(self, p=None, tol=1e-12, n_samples=64, seed=0):
        rng = np.random.default_rng(seed)
        V = rng.random((n_samples, self.dim))
        base = self(p, V)
        for axis in range(self.dim):
            shift = np.zeros(self.dim)
            shift[axis] = 1.0
            defect = np.max(np.abs(self(p, V + shift) - base))
            if defect > tol:
                raise ValueError(
                    f"field {self.name!r} is not 1-periodic in v_{axis + 1} "
                    f"(defect {defect:.3g})")

    def grid_values(self, p, n_modes):
        return self(p, fiber_grid(n_modes, self.dim))


class VerticalTensorField:
    """Vertical (1,1)-tensor with frame-component matrices A[p, v].

    ``fn(p, V) -> (..., n, n)``.  The ellipticity constant bounds the
    symmetric part: K^{-1} <w,w> <= <A w, w> <= K <w,w> in the fiber Gram
    inner product.
    """

    def __init__(self, fn, dim=2, K=None, depends_on_base=False,
                 fiber_constant=False, name="tensor"):
        self.fn = fn
        self.dim = dim
        self.K = K
        self.depends_on_base = depends_on_base
        self.fiber_constant = fiber_constant
        self.name = name

    def __call__(self, p, V):
        return np.asarray(self.fn(p, np.asarray(V, dtype=float)), dtype=float)

    @classmethod
    def constant(cls, matrix, dim=None):
        matrix = np.asarray(matrix, dtype=float)
        dim = dim or matrix.shape[0]

        def fn(p, V):
            return np.broadcast_to(matrix, V.shape[:-1] + matrix.shape)

        eig = np.linalg.eigvalsh(0.5 * (matrix + matrix.T))
        K = max(eig.max(), 1.0 / eig.min()) if eig.min() > 0 else None
        return cls(fn, dim=dim, K=K, fiber_constant=True,
                   name="const-tensor")

    @classmethod
    def isotropic(cls, a_fn, dim=2, K=None, name="isotropic",
                  depends_on_base=False):
        """A[p,v] = a(p,v) * Id for a positive scalar profile."""

        def fn(p, V):
            a = np.asarray(a_fn(p, V), dtype=float)
            return a[..., None, None] * np.eye(dim)

        return cls(fn, dim=dim, K=K, depends_on_base=depends_on_base, name=name)

    def grid_values(self, p, n_modes):
        return self(p, fiber_grid(n_modes, self.dim))

    def check_elliptic(self, p, gram, n_modes=8, K=None):
        """Sampled ellipticity of the symmetric part in the Gram inner product."""
        K = K or self.K
        A = self(p, fiber_grid(n_modes, self.dim))
        # symmetric part as an endomorphism: (A + G^{-1} A^T G) / 2, whose
        # Gram-weighted quadratic form has a symmetric matrix G A_sym
        G = np.asarray(gram, dtype=float)
        GA = 0.5 * (G @ A + np.swapaxes(G @ A, -1, -2))
        # generalized eigenvalues of (GA, G) equal those of A_sym
        L = np.linalg.cholesky(G)
        Linv = np.linalg.inv(L)
        sym = Linv @ GA @ Linv.T
        eig = np.linalg.eigvalsh(sym)
        lo, hi = float(eig.min()), float(eig.max())
        if lo <= 0:
            raise NotElliptic(f"tensor {self.name!r} loses positivity (min eig {lo:.3g})")
        if K is not None and (hi > K * (1 + 1e-9) or lo < 1.0 / K * (1 - 1e-9)):
            raise NotElliptic(
                f"tensor {self.name!r} violates its ellipticity constant "
                f"K={K}: spectrum [{lo:.4g}, {hi:.4g}]")
        return lo, hi


class FiberMetric:
    """Constant-per-fiber Gram data: G(p), its inverse, sqrt-determinant."""

    def __init__(self, gram):
        self.gram = np.asarray(gram, dtype=float)
        if not np.allclose(self.gram, self.gram.T, atol=1e-12):
            raise ValueError("fiber Gram matrix must be symmetric")
        eig = np.linalg.eigvalsh(self.gram)
        if eig.min() <= 0:
            raise ValueError("fiber Gram matrix must be positive definite")
        self.inv = np.linalg.inv(self.gram)
        self.sqrt_det = float(np.sqrt(np.linalg.det(self.gram)))
        self.dim = self.gram.shape[0]

    @classmethod
    def of(cls, model, p):
        return cls(model.fiber_gram(np.asarray(p, dtype=float)[None])[0])

    def mode_norm_sq(self, k):
        """|k|_p^2 = k_i k_j g^{ij}(p) for integer mode arrays (..., n)."""
        return np.einsum("...i,ij,...j->...", k, self.inv, k)


# -- spectral operators on fiber grids --------------------------------------


def _fft(values):
    return np.fft.fftn(values, axes=tuple(range(values.ndim)))


def _partial_derivatives(values, n_modes):
    """df/dv_i on the grid, spectral differentiation; shape (..., n).

    Real input gives real output; complex input is differentiated as is.
    """
    values = np.asarray(values)
    is_real = not np.iscomplexobj(values)
    dim = values.ndim
    k = mode_vectors(n_modes, dim)
    vhat = np.fft.fftn(values, axes=tuple(range(dim)))
    outs = []
    for i in range(dim):
        der = np.fft.ifftn(2j * np.pi * k[..., i] * vhat, axes=tuple(range(dim)))
        outs.append(np.real(der) if is_real else der)
    return np.stack(outs, axis=-1)


def vertical_gradient(values, gram, n_modes):
    """Frame components of grad_v f = G^{-1} df for grid values of f."""
    metric = gram if isinstance(gram, FiberMetric) else FiberMetric(gram)
    partial = _partial_derivatives(np.asarray(values, dtype=float), n_modes)
    return np.einsum("ij,...j->...i", metric.inv, partial)


def vertical_divergence(components, n_modes):
    """div_v X = sum_i dX^i/dv_i for frame components X (..., n)."""
    components = np.asarray(components, dtype=float)
    dim = components.shape[-1]
    k = mode_vectors(n_modes, dim)
    out = np.zeros(components.shape[:-1])
    for i in range(dim):
        vhat = np.fft.fftn(components[..., i], axes=tuple(range(dim)))
        out = out + np.real(np.fft.ifftn(2j * np.pi * k[..., i] * vhat,
                                         axes=tuple(range(dim))))
    return out


def fiber_average(values):
    """Normalized fiber average: the zero-mode coefficient (plain grid mean).

    In frame coordinates the fiber volume element is sqrt(det G) dv, so the
    normalized average over the fiber is the coordinate mean over [0,1)^n.
    """
    values = np.asarray(values)
    return values.mean(axis=tuple(range(values.ndim)))


def fiber_inner(X, Y, gram):
    """Pointwise Gram inner product of two frame-component fields."""
    metric = gram if isinstance(gram, FiberMetric) else FiberMetric(gram)
    return np.einsum("...i,ij,...j->...", X, metric.gram, Y)


def normalized_integral(model, field, base_m=64, n_modes=8):
    """Integral of a fiber field over the torus bundle, fiber part normalized.

    Equals int_M (fiber average of f)(p) dV_M(p): the base integral carries
    the Riemannian volume weight, the fiber integral the 1/vol(fiber)
    normalization.
    """
    ax = (np.arange(base_m) + 0.5) / base_m
    mesh = np.meshgrid(*([ax] * model.dim), indexing="ij")
    base = np.stack(mesh, axis=-1).reshape(-1, model.dim)
    w = model.sqrt_det_metric(base) * (1.0 / base_m) ** model.dim
    total = 0.0
    for p, wp in zip(base, w):
        total += wp * float(fiber_average(field(p, fiber_grid(n_modes, model.dim))))
    return total


def vertical_leray(components, gram, n_modes=None):
    """Split X = grad_v u + Y with div_v Y = 0 and u of zero fiber mean.

    Mode-wise: u_hat(k) = <k, X_hat(k)> / (2 pi i |k|_p^2) for k != 0.  The
    decomposition is exact for band-limited fields and Gram-orthogonal:
    int <grad_v u, Y> dv = 0 mode by mode.
    """
    X = np.asarray(components, dtype=float)
    dim = X.shape[-1]
    if n_modes is None:
        n_modes = X.shape[0] // 2
    metric = gram if isinstance(gram, FiberMetric) else FiberMetric(gram)
    k = mode_vectors(n_modes, dim)
    ksq = metric.mode_norm_sq(k)
    Xhat = np.stack([np.fft.fftn(X[..., i], axes=tuple(range(dim)))
                     for i in range(dim)], axis=-1)
    kdotX = np.einsum("...i,...i->...", k, Xhat)
    with np.errstate(divide="ignore", invalid="ignore"):
        uhat = np.where(ksq > 0, kdotX / (2j * np.pi * np.where(ksq > 0, ksq, 1.0)), 0.0)
    u = np.real(np.fft.ifftn(uhat, axes=tuple(range(dim))))
    gradu_hat = 2j * np.pi * np.einsum("ij,...j,...->...i", metric.inv, k, uhat)
    Yhat = Xhat - gradu_hat
    Y = np.stack([np.real(np.fft.ifftn(Yhat[..., i], axes=tuple(range(dim))))
                  for i in range(dim)], axis=-1)
    return u, Y


def p_k_operator(values, k, n_modes):
    """P_k f = <k, grad f> / (2 pi i |k|^2) on fiber grid values.

    The plain Euclidean mode norm is used; |P_k f| <= |grad f| / (2 pi |k|)
    pointwise.  Returns a complex field.
    """
    k = np.asarray(k, dtype=float)
    if np.all(k == 0):
        raise ZeroMode("P_k requires a nonzero mode")
    partial = _partial_derivatives(values, n_modes)
    return np.einsum("i,...i->...", k, partial) / (2j * np.pi * float(k @ k))


def grid_l2_norm(values):
    """L^2 norm over the unit fiber cube (coordinate measure)."""
    values = np.asarray(values)
    return float(np.sqrt(np.mean(np.abs(values) ** 2)))
