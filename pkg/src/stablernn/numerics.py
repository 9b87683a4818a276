"""Dense linear algebra helpers and the seeded random stream.

Matrices and vectors are plain float64 numpy arrays. The SVD is a one-sided
(Hestenes) Jacobi iteration compiled with numba; it is accurate to a few ulps
at the sizes used here (up to a few hundred rows) and has no LAPACK
dependency, so singular values are reproducible bit-for-bit on a given
platform.
"""
import math

import numba
import numpy as np

from .errors import ConfigError, NumericError, SvdConvergenceError

JACOBI_TOL = 1e-12
JACOBI_MAX_SWEEPS = 60


def as_matrix(m, name="matrix"):
    a = np.array(m, dtype=np.float64)
    if a.ndim != 2:
        raise ConfigError(f"{name} must be 2-d, got shape {a.shape}")
    return a


def check_finite(a, what="array", step=None):
    if not np.all(np.isfinite(a)):
        raise NumericError(f"non-finite entries in {what}", step=step)
    return a


# ---------------------------------------------------------------------------
# Random numbers
# ---------------------------------------------------------------------------

class Rng:
    """Seeded random stream.

    Uniform doubles come from numpy's PCG64 bit generator (53-bit mantissa
    from one 64-bit output). Gaussians are produced here by the Box-Muller
    transform of pairs of those uniforms, so the normal stream depends only
    on PCG64 and libm ``log``/``cos``/``sin``, not on numpy's ziggurat tables.

    One generator per run; use :meth:`spawn` for independent child streams.
    """

    def __init__(self, seed):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def __repr__(self):
        return f"Rng(seed={self.seed})"

    def uniform(self, size=None, low=0.0, high=1.0):
        u = self._gen.random(size)
        return low + (high - low) * u

    def normal(self, size=None, loc=0.0, scale=1.0):
        """Gaussian samples via Box-Muller.

        ``scale`` is the standard deviation.
        """
        shape = () if size is None else (size,) if np.isscalar(size) else tuple(size)
        n = int(np.prod(shape, dtype=np.int64))
        pairs = (n + 1) // 2
        u = self._gen.random(2 * pairs).reshape(pairs, 2)
        r = np.sqrt(-2.0 * np.log1p(-u[:, 0]))  # 1 - u in (0, 1]
        theta = 2.0 * np.pi * u[:, 1]
        z = np.empty((pairs, 2))
        z[:, 0] = r * np.cos(theta)
        z[:, 1] = r * np.sin(theta)
        z = z.ravel()[:n].reshape(shape)
        out = loc + scale * z
        return float(out) if size is None else out

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size=size)

    def spawn(self, key):
        """Child stream that depends only on (seed, key)."""
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=(int(key),))
        return Rng(int(ss.generate_state(1, dtype=np.uint64)[0]))


# ---------------------------------------------------------------------------
# SVD
# ---------------------------------------------------------------------------

@numba.njit(cache=True)
def _one_sided_jacobi(a, tol, max_sweeps, negligible):
    # columns with squared norm below ``negligible`` are rounding noise of a
    # rank-deficient input; rotating them against each other never settles
    m, n = a.shape
    u = a.copy()
    v = np.eye(n)
    for sweep in range(max_sweeps):
        rotated = False
        for p in range(n - 1):
            for q in range(p + 1, n):
                alpha = 0.0
                beta = 0.0
                gamma = 0.0
                for i in range(m):
                    alpha += u[i, p] * u[i, p]
                    beta += u[i, q] * u[i, q]
                    gamma += u[i, p] * u[i, q]
                if alpha <= negligible or beta <= negligible:
                    continue
                if gamma == 0.0 or abs(gamma) <= tol * math.sqrt(alpha * beta):
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                if zeta >= 0.0:
                    t = 1.0 / (zeta + math.sqrt(1.0 + zeta * zeta))
                else:
                    t = -1.0 / (-zeta + math.sqrt(1.0 + zeta * zeta))
                c = 1.0 / math.sqrt(1.0 + t * t)
                s = c * t
                for i in range(m):
                    up = u[i, p]
                    uq = u[i, q]
                    u[i, p] = c * up - s * uq
                    u[i, q] = s * up + c * uq
                for i in range(n):
                    vp = v[i, p]
                    vq = v[i, q]
                    v[i, p] = c * vp - s * vq
                    v[i, q] = s * vp + c * vq
        if not rotated:
            return u, v, sweep + 1
    return u, v, -1


def _complete_columns(u, keep):
    """Replace columns not in ``keep`` by an orthonormal completion."""
    m, k = u.shape
    basis = [u[:, j] for j in range(k) if keep[j]]
    out = u.copy()
    candidates = iter(np.eye(m))
    for j in range(k):
        if keep[j]:
            continue
        for e in candidates:
            w = e.copy()
            for _ in range(2):  # re-orthogonalize once for accuracy
                for b in basis:
                    w -= (b @ w) * b
            nw = np.linalg.norm(w)
            if nw > 1e-8:
                w /= nw
                basis.append(w)
                out[:, j] = w
                break
    return out


def svd(m, tol=JACOBI_TOL, max_sweeps=JACOBI_MAX_SWEEPS):
    """Thin singular value decomposition ``m = U @ diag(S) @ V.T``.

    Parameters
    ----------
    m : array_like, shape (rows, cols)
    tol : float
        A column pair is rotated while ``|<u_p, u_q>| > tol * |u_p| |u_q|``.
        Columns whose norm falls below ``max(rows, cols) * eps * ||m||_F``
        count as zero and are never rotated.
    max_sweeps : int
        Hard cap on cyclic sweeps.

    Returns
    -------
    U : ndarray, shape (rows, r)
    S : ndarray, shape (r,)
        Nonincreasing, nonnegative.
    V : ndarray, shape (cols, r)
        ``r = min(rows, cols)``; ``U`` and ``V`` have orthonormal columns.

    Raises
    ------
    SvdConvergenceError
        If the sweeps do not converge within ``max_sweeps``.
    """
    a = as_matrix(m)
    rows, cols = a.shape
    if rows == 0 or cols == 0:
        raise ConfigError("svd needs at least one row and one column")
    check_finite(a, "svd input")
    if rows < cols:
        V, S, U = svd(a.T, tol, max_sweeps)
        return U, S, V

    negligible = (max(rows, cols) * np.finfo(float).eps * np.linalg.norm(a)) ** 2
    work, V, sweeps = _one_sided_jacobi(np.ascontiguousarray(a), tol, max_sweeps, negligible)
    if sweeps < 0:
        raise SvdConvergenceError(f"Jacobi SVD did not converge in {max_sweeps} sweeps")
    S = np.sqrt(np.einsum("ij,ij->j", work, work))
    order = np.argsort(-S, kind="stable")
    S = S[order]
    work = work[:, order]
    V = V[:, order]
    smax = S[0] if S.size else 0.0
    keep = S > max(rows, cols) * np.finfo(float).eps * smax
    if smax == 0.0:
        keep[:] = False
    U = np.zeros_like(work)
    U[:, keep] = work[:, keep] / S[keep]
    if not keep.all():
        U = _complete_columns(U, keep)
    return U, S, V


def singular_values(m):
    return svd(m)[1]


def spectral_norm(m):
    """Largest singular value (induced 2-norm)."""
    return float(singular_values(m)[0])


def inf_induced_norm(m):
    """Induced infinity norm: the maximum absolute row sum."""
    a = as_matrix(m)
    if a.size == 0:
        return 0.0
    return float(np.abs(a).sum(axis=1).max())


def frobenius_norm(m):
    return float(np.sqrt(np.sum(np.square(m))))


def random_orthogonal(n, rng):
    """Haar-ish orthogonal matrix from the Jacobi SVD of a Gaussian matrix."""
    U, _, V = svd(rng.normal((n, n)))
    return U @ V.T


def matrix_with_singular_values(sigmas, rng):
    """Random square matrix with exactly the given singular values."""
    sigmas = np.asarray(sigmas, dtype=float)
    n = sigmas.size
    return random_orthogonal(n, rng) @ np.diag(sigmas) @ random_orthogonal(n, rng).T
