"""Mask recovery from a time-resolved measurement.

The measurement is linear in the mask: ``b ~ A v`` where column ``i`` of
``A`` is the unit-norm prediction for a single open pixel ``i``. Because the
columns are normalized, ``v_i`` equals the physical transmission ``T_i``
times the column norm ``n_i`` (up to one global scale), and
:meth:`SystemMatrix.to_mask` undoes that weighting.

Solvers: ADMM for ``1/2 ||A v - b||^2 + lambda1 ||G v||_1`` with the stacked
prior ``G = [I; s Dx; s Dy]``, ``s = lambda2 / lambda1``, and a Tikhonov
solve of ``(A^T A + lambda I) v = A^T b``.
"""

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.fft
import scipy.linalg
import scipy.sparse as sp
from scipy.sparse.linalg import LinearOperator, aslinearoperator, cg

from .forward import _Convolver, source_response
from .tensor import Image2D, vec

__all__ = [
    "SystemMatrix",
    "build_system_matrix",
    "PriorOperator",
    "AdmmConfig",
    "AdmmResult",
    "soft_threshold",
    "admm_objective",
    "admm_solve",
    "tikhonov_solve",
    "total_variation",
]


class NumericalFailure(ArithmeticError):
    """A linear solve failed or produced non-finite values."""


class SystemMatrix(LinearOperator):
    """Matrix-free ``A`` with unit-norm columns, one per mask pixel.

    Rows follow x-fastest vectorization of the ``(nx, ny, nt)`` measurement
    and columns x-fastest vectorization of the ``(nx, ny)`` mask. Pixels whose
    unnormalized column vanishes keep a zero column.
    """

    def __init__(self, scene):
        geo = scene.geometry
        self.geometry = geo
        self.vol_shape = geo.shape
        self.mask_shape = (geo.nx, geo.ny)
        k1, k2 = scene.kernels()
        self._conv = _Convolver(geo.shape)
        self._g = np.maximum(source_response(self._conv, scene.illumination.data, k1), 0.0)
        self._k2 = k2
        self._k2_hat = self._conv.spectrum(k2)
        self._k2_hat_conj = np.conj(self._k2_hat)
        raw = self._column_norms()
        self.column_norms = raw
        self.zero_columns = np.flatnonzero(raw == 0.0)
        if self.zero_columns.size:
            warnings.warn(
                f"{self.zero_columns.size} pixel(s) have an identically zero column; kept as zero",
                RuntimeWarning,
                stacklevel=2,
            )
        with np.errstate(divide="ignore"):
            self._inv_norms = np.where(raw > 0, 1.0 / np.where(raw > 0, raw, 1.0), 0.0)
        n_rows = int(np.prod(geo.shape))
        super().__init__(dtype=np.float64, shape=(n_rows, geo.nx * geo.ny))

    def _unnormalized(self, mask_flat):
        mask = mask_flat.reshape(self.mask_shape, order="F")
        vol = self._g * mask[:, :, None]
        return self._conv.apply(self._conv.spectrum(vol) * self._k2_hat)

    def _matvec(self, v):
        v = np.asarray(v, dtype=float).ravel()
        return vec(self._unnormalized(v * self._inv_norms))

    def _rmatvec(self, r):
        r = np.asarray(r, dtype=float).ravel().reshape(self.vol_shape, order="F")
        full = _correlate(self._conv, r, self._k2_hat_conj)
        return vec(np.sum(full * self._g, axis=2)) * self._inv_norms

    def _column_norms(self):
        """Exact column norms without forming the columns.

        Column ``i`` restricted to a kernel offset ``p`` is ``Tg_i k_p`` with
        ``Tg_i`` the causal Toeplitz matrix of ``g_i`` and ``k_p`` the K2
        time series, so ``||col_i||^2 = <Tg_i^T Tg_i, sum_p k_p k_p^T>`` with
        ``p`` ranging over the offsets that stay on the grid. Along each axis
        that range touches one end of the grid, so the sum is a cumulative sum
        taken from that end; no differences of partial sums are formed, which
        keeps weak columns accurate to rounding.
        """
        nx, ny, nt = self.vol_shape
        ox, oy, _ = self._conv.origin
        k = self._k2
        outer = np.einsum("xya,xyb->xyab", k, k)
        g = self._g.reshape(nx * ny, nt, order="F")
        lag = np.arange(nt)[:, None] - np.arange(nt)[None, :]
        toeplitz = np.where(lag >= 0, g[:, np.clip(lag, 0, None)], 0.0)
        gram = np.einsum("ita,itb->iab", toeplitz, toeplitz)
        # per pixel: (from_low, cut) along x and y; from_low sums [0, cut), else [cut, n)
        ranges = []
        for i0, n, o in ((0, nx, ox), (1, ny, oy)):
            idx = np.arange(n)
            lo, hi = np.maximum(0, o - idx), np.minimum(n, o - idx + n)
            ranges.append((lo == 0, np.where(lo == 0, hi, lo)))
        norms2 = np.zeros(nx * ny)
        for low_x in (True, False):
            for low_y in (True, False):
                sel_x = np.flatnonzero(ranges[0][0] == low_x)
                sel_y = np.flatnonzero(ranges[1][0] == low_y)
                if not (sel_x.size and sel_y.size):
                    continue
                cum = _cumulative(outer, low_x, low_y)
                for iy in sel_y:
                    cy = ranges[1][1][iy]
                    for ix in sel_x:
                        cx = ranges[0][1][ix]
                        norms2[ix + nx * iy] = np.vdot(gram[ix + nx * iy], cum[cx, cy])
                del cum
        return np.sqrt(np.maximum(norms2, 0.0))

    def column(self, i):
        e = np.zeros(self.shape[1])
        e[i] = 1.0
        return self.matvec(e)

    def dense(self):
        """Materialize ``A`` (small grids only)."""
        return np.column_stack([self.column(i) for i in range(self.shape[1])])

    def to_mask(self, v, clamp=True, min_relative_norm=1e-2):
        """Physical transmission from solver coordinates, scaled to peak 1.

        Pixels whose column norm is below ``min_relative_norm`` times the
        largest are effectively unlit; dividing by their norm would amplify
        solver noise, so they are reported as 0.
        """
        n = self.column_norms
        lit = n >= min_relative_norm * n.max()
        t = np.where(lit, np.asarray(v, dtype=float) * self._inv_norms, 0.0)
        peak = t.max()
        if peak > 0:
            t = t / peak
        if clamp:
            t = np.clip(t, 0.0, 1.0)
        return Image2D(t.reshape(self.mask_shape, order="F"), self.geometry.pixel_size)

    def from_mask(self, mask):
        """Solver coordinates ``v`` whose prediction ``A v`` has unit norm."""
        data = mask.data if isinstance(mask, Image2D) else np.asarray(mask, dtype=float)
        v = vec(data) * self.column_norms
        norm = np.linalg.norm(self.matvec(v))
        return v / norm if norm > 0 else v


def _cumulative(a, low_x, low_y):
    """2D cumulative sums over the leading axes, padded so index ``c`` means
    ``[0, c)`` when summing from the low end and ``[c, n)`` from the high end."""
    nx, ny = a.shape[:2]
    out = np.zeros((nx + 1, ny + 1) + a.shape[2:])
    if low_x and low_y:
        out[1:, 1:] = a.cumsum(axis=0).cumsum(axis=1)
    elif low_x:
        out[1:, :-1] = a[:, ::-1].cumsum(axis=0).cumsum(axis=1)[:, ::-1]
    elif low_y:
        out[:-1, 1:] = a[::-1].cumsum(axis=0).cumsum(axis=1)[::-1]
    else:
        out[:-1, :-1] = a[::-1, ::-1].cumsum(axis=0).cumsum(axis=1)[::-1, ::-1]
    return out


def _correlate(conv, r, k_hat_conj):
    # adjoint of the cropped convolution
    full = scipy.fft.irfftn(scipy.fft.rfftn(r, conv.fshape) * k_hat_conj, conv.fshape)
    idx = [(np.arange(n) - o) % s for n, o, s in zip(r.shape, conv.origin, conv.fshape)]
    return full[np.ix_(*idx)]


def build_system_matrix(scene):
    """System matrix for the scene's illumination, geometry and optics (mask ignored)."""
    return SystemMatrix(scene)


def _diff_1d(n):
    # forward difference; the last row is zero (reflective boundary)
    if n == 1:
        return sp.csr_matrix((1, 1))
    main = -np.ones(n)
    main[-1] = 0.0
    return sp.diags([main, np.ones(n - 1)], [0, 1], shape=(n, n), format="csr")


class PriorOperator:
    """Stacked sparse prior ``G = [I; s Dx; s Dy]`` on an ``(nx, ny)`` image."""

    def __init__(self, nx, ny, tv_weight):
        if tv_weight < 0:
            raise ValueError("tv_weight must be >= 0")
        self.nx, self.ny, self.tv_weight = nx, ny, float(tv_weight)
        self.Dx = sp.kron(sp.identity(ny), _diff_1d(nx), format="csr")
        self.Dy = sp.kron(_diff_1d(ny), sp.identity(nx), format="csr")
        n = nx * ny
        self.matrix = sp.vstack([sp.identity(n), tv_weight * self.Dx, tv_weight * self.Dy], format="csr")
        self.gram = (self.matrix.T @ self.matrix).tocsr()

    @classmethod
    def identity(cls, n):
        return cls(n, 1, 0.0)

    @classmethod
    def from_lambdas(cls, nx, ny, lambda1, lambda2):
        return cls(nx, ny, lambda2 / lambda1 if lambda1 > 0 else 0.0)

    @property
    def shape(self):
        return self.matrix.shape

    def __matmul__(self, v):
        return self.matrix @ v

    def T(self, w):
        return self.matrix.T @ w


@dataclass(frozen=True)
class AdmmConfig:
    rho: float = 1.0
    lambda1: float = 1e-4
    lambda2: float = None
    max_iter: int = 50
    abstol: float = 1e-7
    reltol: float = 1e-5
    cg_tol: float = 1e-8
    cg_maxiter: int = 500

    def __post_init__(self):
        if self.lambda2 is None:
            object.__setattr__(self, "lambda2", 1e-3 * self.lambda1)
        if not self.rho > 0:
            raise ValueError("rho must be positive")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("lambda1 and lambda2 must be >= 0")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if self.abstol < 0 or self.reltol < 0 or self.cg_tol <= 0:
            raise ValueError("tolerances must be nonnegative (cg_tol positive)")

    @classmethod
    def simulation(cls, **kw):
        return cls(lambda1=1e-4, **kw)

    @classmethod
    def experimental(cls, **kw):
        return cls(lambda1=8e-4, **kw)

    def prior(self, nx, ny):
        return PriorOperator.from_lambdas(nx, ny, self.lambda1, self.lambda2)


@dataclass(frozen=True, eq=False)
class AdmmResult:
    v: np.ndarray
    v_raw: np.ndarray
    z: np.ndarray
    u: np.ndarray
    iterations: int
    converged: bool
    objective: list = field(default_factory=list)
    primal_residual: list = field(default_factory=list)
    dual_residual: list = field(default_factory=list)


def soft_threshold(v, kappa):
    """Elementwise ``sign(v) * max(|v| - kappa, 0)``."""
    if kappa < 0:
        raise ValueError("kappa must be >= 0")
    v = np.asarray(v, dtype=float)
    return np.sign(v) * np.maximum(np.abs(v) - kappa, 0.0)


def admm_objective(A, b, G, lambda1, v):
    r = A @ v - b
    return 0.5 * float(r @ r) + lambda1 * float(np.abs(G @ v).sum())


def _prior_matrix(G):
    if isinstance(G, PriorOperator):
        return G.matrix, G.gram
    M = sp.csr_matrix(G)
    return M, (M.T @ M).tocsr()


def _normal_solver(A, Gmat, gram, rho, cfg):
    n = A.shape[1]
    if isinstance(A, np.ndarray):
        H = A.T @ A + rho * gram.toarray()
        try:
            factor = scipy.linalg.cho_factor(H)
        except np.linalg.LinAlgError as exc:
            cond = np.linalg.cond(H)
            raise NumericalFailure(f"ADMM normal equations are singular (condition number {cond:.3g})") from exc
        return lambda rhs, x0: scipy.linalg.cho_solve(factor, rhs)
    op = aslinearoperator(A)
    H = LinearOperator((n, n), matvec=lambda x: op.rmatvec(op.matvec(x)) + rho * (gram @ x), dtype=float)

    def solve(rhs, x0):
        x, info = cg(H, rhs, x0=x0, rtol=cfg.cg_tol, atol=0.0, maxiter=cfg.cg_maxiter)
        if info < 0 or not np.all(np.isfinite(x)):
            raise NumericalFailure(f"conjugate gradient broke down (info={info}); normal equations ill-conditioned")
        return x

    return solve


def admm_solve(A, b, G, config, init=None, clamp=True, return_info=False):
    """Scaled-dual ADMM for ``1/2 ||A v - b||^2 + lambda1 ||G v||_1``.

    The split is ``z = G v``; ``rho`` weights the augmented term and the
    shrinkage level is ``lambda1 / rho``. Stops on Boyd's primal/dual
    residual tolerances or after ``max_iter`` iterations. ``clamp`` limits
    the returned ``v`` to ``[0, 1]``.
    """
    cfg = config
    b = np.asarray(b, dtype=float).ravel()
    Gmat, gram = _prior_matrix(G)
    n = A.shape[1]
    if Gmat.shape[1] != n:
        raise ValueError(f"prior acts on {Gmat.shape[1]} unknowns, A has {n} columns")
    v = np.zeros(n) if init is None else np.asarray(init, dtype=float).ravel().copy()
    z = Gmat @ v
    u = np.zeros_like(z)
    Atb = A.T @ b if isinstance(A, np.ndarray) else aslinearoperator(A).rmatvec(b)
    solve = _normal_solver(A, Gmat, gram, cfg.rho, cfg)
    kappa = cfg.lambda1 / cfg.rho
    objective, r_hist, s_hist = [], [], []
    converged = False
    it = 0
    for it in range(1, cfg.max_iter + 1):
        v = solve(Atb + cfg.rho * (Gmat.T @ (z - u)), v)
        Gv = Gmat @ v
        z_old = z
        z = soft_threshold(Gv + u, kappa)
        u = u + Gv - z
        r = float(np.linalg.norm(Gv - z))
        s = float(cfg.rho * np.linalg.norm(Gmat.T @ (z - z_old)))
        objective.append(admm_objective(A if isinstance(A, np.ndarray) else aslinearoperator(A), b, Gmat,
                                        cfg.lambda1, v))
        r_hist.append(r)
        s_hist.append(s)
        if not np.isfinite(objective[-1]):
            raise NumericalFailure(f"ADMM objective became non-finite at iteration {it}")
        eps_pri = np.sqrt(z.size) * cfg.abstol + cfg.reltol * max(np.linalg.norm(Gv), np.linalg.norm(z))
        eps_dual = np.sqrt(n) * cfg.abstol + cfg.reltol * cfg.rho * np.linalg.norm(Gmat.T @ u)
        if r <= eps_pri and s <= eps_dual:
            converged = True
            break
    out = np.clip(v, 0.0, 1.0) if clamp else v.copy()
    if return_info:
        return AdmmResult(out, v, z, u, it, converged, objective, r_hist, s_hist)
    return out


def tikhonov_solve(A, b, lam=0.1, clamp=True, tol=1e-12, maxiter=2000):
    """``(A^T A + lam I)^{-1} A^T b``; dense solve for arrays, CG otherwise."""
    if not lam > 0:
        raise ValueError("lambda must be positive")
    b = np.asarray(b, dtype=float).ravel()
    if isinstance(A, np.ndarray) or sp.issparse(A):
        A = A.toarray() if sp.issparse(A) else A
        H = A.T @ A + lam * np.eye(A.shape[1])
        x = scipy.linalg.solve(H, A.T @ b, assume_a="pos")
    else:
        op = aslinearoperator(A)
        n = A.shape[1]
        H = LinearOperator((n, n), matvec=lambda v: op.rmatvec(op.matvec(v)) + lam * v, dtype=float)
        x, info = cg(H, op.rmatvec(b), rtol=tol, atol=0.0, maxiter=maxiter)
        if info < 0:
            raise NumericalFailure(f"conjugate gradient failed in Tikhonov solve (info={info})")
    return np.clip(x, 0.0, 1.0) if clamp else x


def total_variation(image):
    """Anisotropic TV with forward differences: sum of |dx| + |dy|."""
    a = image.data if isinstance(image, Image2D) else np.asarray(image, dtype=float)
    return float(np.abs(np.diff(a, axis=0)).sum() + np.abs(np.diff(a, axis=1)).sum())
