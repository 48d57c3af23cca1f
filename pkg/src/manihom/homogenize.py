"""Cell problems, the homogenized tensor, and the corrector machinery.

Each base point p carries periodic cell problems on its torus fiber,

    -div_v( A[p,v] (grad_v w_i + o_i) ) = 0,

for an orthonormal basis {o_i} of T_pM.  Everything is expressed in
o-coordinates (Gram-Schmidt of the frame in g(p), i.e. O = L^{-T} for the
Cholesky factor G = L L^T of the fiber Gram matrix): there the fiber inner
product is Euclidean, the derivative along o_l acts on Fourier mode k as
2 pi i (O^T k)_l, and the Laplacian symbol is -4 pi^2 |k|_p^2 with
|k|_p^2 = k^T G^{-1} k.  The homogenized tensor is the corrector sandwich

    A*(p) = avg_v (I + D_vw)^T A_o (I + D_vw),

which by the weak cell equation also equals avg_v A_o (I + D_vw).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NoConvergence, NotElliptic
from .fiber import FiberMetric, fiber_grid, mode_vectors


def orthonormal_directions(gram):
    """Frame-component columns of the Gram-Schmidt orthonormal basis.

    O = L^{-T} with G = L L^T, so O^T G O = I and O is upper triangular;
    the result is continuous in p for smooth metrics.
    """
    G = gram.gram if isinstance(gram, FiberMetric) else np.asarray(gram, dtype=float)
    L = np.linalg.cholesky(G)
    return np.linalg.inv(L).T


@dataclass
class CellSolution:
    """Correctors at one base point: fields w_i and their o-gradients."""

    p: np.ndarray
    gram: FiberMetric
    directions: np.ndarray          # columns o_i in frame components
    w: np.ndarray                   # (n, M, M[, M]) corrector grids
    grad_w: np.ndarray              # (n, M.., n): o-components of grad_v w_i
    A_o: np.ndarray                 # tensor in o-coordinates on the grid
    n_modes: int
    iterations: list = field(default_factory=list)
    residuals: list = field(default_factory=list)

    @property
    def dim(self):
        return self.directions.shape[0]

    def corrector_matrix(self):
        """D_vw on the grid: columns are the o-gradients of the w_i."""
        # grad_w[i] has shape (M.., n); stack as (..., n(row), n(col=i))
        return np.stack([self.grad_w[i] for i in range(self.dim)], axis=-1)


class CellProblem:
    """Fourier-Galerkin cell solver with the constant-symbol preconditioner."""

    def __init__(self, model, tensor, p, n_modes=32, rtol=1e-12, max_iter=400):
        self.model = model
        self.tensor = tensor
        self.p = np.asarray(p, dtype=float)
        self.n_modes = int(n_modes)
        self.rtol = rtol
        self.max_iter = max_iter
        self.gram = FiberMetric.of(model, self.p)
        self.O = orthonormal_directions(self.gram)
        self.dim = model.dim
        V = fiber_grid(self.n_modes, self.dim)
        A_frame = tensor(self.p, V)
        Oinv = np.linalg.inv(self.O)
        self.A_o = np.einsum("ij,...jk,kl->...il", Oinv, A_frame, self.O)
        tensor.check_elliptic(self.p, self.gram.gram, n_modes=8)
        k = mode_vectors(self.n_modes, self.dim)
        self.kappa = 2j * np.pi * np.einsum("ji,...j->...i", self.O, k)
        self.symbol = np.einsum("...i,...i->...", self.kappa, np.conj(self.kappa)).real
        GA = self.gram.gram @ A_frame
        self.self_adjoint = float(np.max(np.abs(GA - np.swapaxes(GA, -1, -2)))) < 1e-10

    def _axes(self):
        return tuple(range(self.dim))

    def _grad_o(self, w):
        what = np.fft.fftn(w, axes=self._axes())
        return np.stack([np.real(np.fft.ifftn(self.kappa[..., l] * what,
                                              axes=self._axes()))
                         for l in range(self.dim)], axis=-1)

    def _div_o(self, Z):
        out = 0.0
        for l in range(self.dim):
            zhat = np.fft.fftn(Z[..., l], axes=self._axes())
            out = out + np.fft.ifftn(self.kappa[..., l] * zhat, axes=self._axes())
        return np.real(out)

    def _apply(self, w):
        """w -> -div_o( A_o grad_o w )."""
        Z = np.einsum("...ij,...j->...i", self.A_o, self._grad_o(w))
        return -self._div_o(Z)

    def _precondition(self, r):
        rhat = np.fft.fftn(r, axes=self._axes())
        with np.errstate(divide="ignore", invalid="ignore"):
            rhat = np.where(self.symbol > 0, rhat / np.where(self.symbol > 0,
                                                             self.symbol, 1.0), 0.0)
        return np.real(np.fft.ifftn(rhat, axes=self._axes()))

    def solve(self, direction_index):
        """Corrector for the o-basis direction with the given index."""
        x = np.zeros(self.dim)
        x[direction_index] = 1.0
        rhs = self._div_o(np.einsum("...ij,j->...i", self.A_o, x))
        w = np.zeros_like(rhs)
        rhs_norm = float(np.sqrt(np.mean(rhs ** 2)))
        if rhs_norm == 0.0:
            return w, 0, 0.0
        if not self.self_adjoint:
            return self._solve_bicgstab(rhs, rhs_norm)
        r = rhs.copy()
        z = self._precondition(r)
        d = z.copy()
        rz = float(np.sum(r * z))
        for it in range(1, self.max_iter + 1):
            Ad = self._apply(d)
            alpha = rz / float(np.sum(d * Ad))
            w += alpha * d
            r -= alpha * Ad
            res = float(np.sqrt(np.mean(r ** 2)))
            if res <= self.rtol * rhs_norm:
                w -= w.mean()
                return w, it, res / rhs_norm
            z = self._precondition(r)
            rz_new = float(np.sum(r * z))
            d = z + (rz_new / rz) * d
            rz = rz_new
        raise NoConvergence(
            f"cell solver stalled at relative residual {res / rhs_norm:.3g} "
            f"after {self.max_iter} iterations")

    def _solve_bicgstab(self, rhs, rhs_norm):
        from scipy.sparse.linalg import LinearOperator, bicgstab

        shape = rhs.shape
        n = rhs.size

        def mv(x):
            return self._apply(x.reshape(shape)).ravel()

        def pc(x):
            return self._precondition(x.reshape(shape)).ravel()

        op = LinearOperator((n, n), matvec=mv)
        M = LinearOperator((n, n), matvec=pc)
        w, info = bicgstab(op, rhs.ravel(), rtol=self.rtol, atol=0.0, M=M,
                           maxiter=self.max_iter)
        if info != 0:
            raise NoConvergence(f"bicgstab failed with info={info}")
        w = w.reshape(shape)
        w -= w.mean()
        res = float(np.sqrt(np.mean((self._apply(w) - rhs) ** 2)))
        return w, -1, res / rhs_norm

    def solve_all(self):
        n = self.dim
        w_list, grads, iters, residuals = [], [], [], []
        for i in range(n):
            w, it, res = self.solve(i)
            w_list.append(w)
            grads.append(self._grad_o(w))
            iters.append(it)
            residuals.append(res)
        return CellSolution(p=self.p, gram=self.gram, directions=self.O,
                            w=np.array(w_list), grad_w=np.array(grads),
                            A_o=self.A_o, n_modes=self.n_modes,
                            iterations=iters, residuals=residuals)

    def weak_residual(self, w, direction_index, max_mode=4):
        """Max weak-form residual of the cell equation against Fourier modes."""
        x = np.zeros(self.dim)
        x[direction_index] = 1.0
        Z = np.einsum("...ij,...j->...i", self.A_o, self._grad_o(w) + x)
        rho = self._div_o(Z)
        rho_hat = np.fft.fftn(rho, axes=self._axes()) / rho.size
        k = mode_vectors(self.n_modes, self.dim)
        mask = np.max(np.abs(k), axis=-1) <= max_mode
        return float(np.max(np.abs(rho_hat[mask])))


def solve_cell(model, tensor, p, direction_index, n_modes=32, rtol=1e-12):
    """Single corrector w_i; see CellProblem for conventions."""
    prob = CellProblem(model, tensor, p, n_modes=n_modes, rtol=rtol)
    w, it, res = prob.solve(direction_index)
    return w, prob


def solve_cell_all(model, tensor, p, n_modes=32, rtol=1e-12):
    return CellProblem(model, tensor, p, n_modes=n_modes, rtol=rtol).solve_all()


def assemble_Astar_frame(model, tensor, p, n_modes=32, cell=None):
    """Homogenized matrix via the direct bilinear cell formula.

    Requires the frame to be g-orthonormal at p (fiber Gram close to the
    identity); entries are fiber averages of
    <A (grad w_i + e_i), grad w_j + e_j>.
    """
    p = np.asarray(p, dtype=float)
    gram = FiberMetric.of(model, p)
    if not np.allclose(gram.gram, np.eye(model.dim), atol=1e-10):
        raise ValueError("assemble_Astar_frame requires a g-orthonormal frame")
    if cell is None:
        cell = solve_cell_all(model, tensor, p, n_modes=n_modes)
    n = model.dim
    A = cell.A_o
    out = np.empty((n, n))
    eye = np.eye(n)
    fields = [cell.grad_w[i] + eye[i] for i in range(n)]
    for i in range(n):
        Zi = np.einsum("...ij,...j->...i", A, fields[i])
        for j in range(n):
            out[i, j] = float(np.mean(np.einsum("...i,...i->...", Zi, fields[j])))
    return out


@dataclass
class HomogenizedTensor:
    """A*(p): o-basis matrix plus frame-endomorphism and bilinear views."""

    p: np.ndarray
    o_matrix: np.ndarray
    directions: np.ndarray
    gram: FiberMetric
    cell: CellSolution = None

    @property
    def frame_endomorphism(self):
        """Matrix of A* acting on frame components: O A*_o O^{-1}."""
        O = self.directions
        return O @ self.o_matrix @ np.linalg.inv(O)

    def bilinear_frame(self):
        """Matrix of the form A*[e_i, e_j] = <A* e_i, e_j>_g."""
        Oinv = np.linalg.inv(self.directions)
        return Oinv.T @ self.o_matrix @ Oinv

    def chart_endomorphism(self, model):
        """Chart-component matrix E (O A*_o O^{-1}) E^{-1} at p."""
        E = model.frame(self.p[None])[0]
        M = self.frame_endomorphism
        return E @ M @ np.linalg.inv(E)

    def spectrum(self):
        return np.linalg.eigvalsh(0.5 * (self.o_matrix + self.o_matrix.T))


def assemble_Astar_general(model, tensor, p, n_modes=32, cell=None):
    """Homogenized tensor by the corrector-sandwich formula (general metric)."""
    p = np.asarray(p, dtype=float)
    if cell is None:
        cell = solve_cell_all(model, tensor, p, n_modes=n_modes)
    n = model.dim
    Dw = cell.corrector_matrix()          # (..., n, n), columns grad_o w_i
    eye = np.eye(n)
    sandwich = np.einsum("...ji,...jk,...kl->...il", Dw + eye, cell.A_o, Dw + eye)
    o_matrix = sandwich.reshape(-1, n, n).mean(axis=0)
    return HomogenizedTensor(p=p, o_matrix=o_matrix, directions=cell.directions,
                             gram=cell.gram, cell=cell)


def corrector_energy(cell):
    """Diagonal energies avg <A(grad w_i + o_i), grad w_i + o_i> (o-basis)."""
    n = cell.dim
    eye = np.eye(n)
    out = np.empty(n)
    for i in range(n):
        f = cell.grad_w[i] + eye[i]
        Z = np.einsum("...ij,...j->...i", cell.A_o, f)
        out[i] = float(np.mean(np.einsum("...i,...i->...", Z, f)))
    return out


def build_corrector_u1(cell, grad_u_o):
    """u1[p, v] = sum_i c_i w_i(v) for o-coordinates c of the base gradient.

    Returns the fiber grid of u1 and of grad_v u1; the latter is also
    D_vw c, and both evaluations agree to spectral accuracy.
    """
    c = np.asarray(grad_u_o, dtype=float)
    u1 = np.einsum("i,i...->...", c, cell.w)
    grad_u1 = np.einsum("...ij,j->...i", cell.corrector_matrix(), c)
    return u1, grad_u1


def decoupling_residual(cell, max_mode=4):
    """Fourier residuals of div_v(A(grad w_i + o_i)) per direction."""
    n = cell.dim
    out = []
    prob_axes = tuple(range(n))
    k = mode_vectors(cell.n_modes, n)
    kappa = 2j * np.pi * np.einsum("ji,...j->...i", cell.directions, k)
    eye = np.eye(n)
    for i in range(n):
        Z = np.einsum("...ij,...j->...i", cell.A_o, cell.grad_w[i] + eye[i])
        div = 0.0
        for l in range(n):
            div = div + kappa[..., l] * np.fft.fftn(Z[..., l], axes=prob_axes)
        div = div / Z[..., 0].size
        mask = np.max(np.abs(k), axis=-1) <= max_mode
        out.append(float(np.max(np.abs(div[mask]))))
    return out
