"""Chain and approximation quality metrics."""

from dataclasses import dataclass, field

import numpy as np


class DiagnosticError(ValueError):
    pass


def autocorr(x, lag):
    """Sample autocorrelation at ``lag`` with biased (1/B) normalisation."""
    x = np.asarray(x, dtype=float)
    xc = x - x.mean()
    var = xc @ xc
    if lag == 0:
        return 1.0
    return float(xc[:-lag] @ xc[lag:] / var)


def _autocorr_all(xc):
    # biased autocovariances at every lag via one zero-padded FFT
    B = xc.size
    n = 1 << (2 * B - 1).bit_length()
    f = np.fft.rfft(xc, n)
    acov = np.fft.irfft(f * np.conj(f), n)[:B]
    return acov / acov[0]


def ess(chain):
    """Effective sample size ``B / (1 + 2 sum_k rho_k)``.

    The sum is truncated by Geyer's initial positive sequence rule: lags are
    taken in pairs ``(2m, 2m+1)`` and summation stops at the first pair whose
    sum is not positive. Autocorrelations use the biased (1/B) estimator,
    computed for all lags at once by FFT. For a 2-d chain the per-column ESS
    values are averaged.
    """
    chain = np.asarray(chain, dtype=float)
    if chain.ndim == 2:
        return float(np.mean([ess(col) for col in chain.T]))
    B = chain.size
    if B < 10:
        raise DiagnosticError("need at least 10 samples, got %d" % B)
    xc = chain - chain.mean()
    var = xc @ xc
    if var <= 0 or not np.isfinite(var):
        raise DiagnosticError("chain has zero variance; ESS is undefined")
    rho = _autocorr_all(xc)
    # 1 + 2 sum_{k>=1} rho_k = -1 + 2 sum_m (rho_2m + rho_2m+1)
    P = B // 2
    pairs = rho[0:2 * P:2] + rho[1:2 * P:2]
    stop = np.flatnonzero(pairs <= 0)
    m = stop[0] if stop.size else P
    return float(B / (-1.0 + 2.0 * pairs[:m].sum()))


@dataclass
class GroundTruth:
    """Reference moments or parameters a run is scored against."""

    mean: np.ndarray = None
    cov: np.ndarray = None
    params: np.ndarray = None
    provenance: dict = field(default_factory=dict)

    @classmethod
    def from_samples(cls, samples, **provenance):
        samples = np.asarray(samples, dtype=float)
        return cls(samples.mean(axis=0), np.cov(samples.T, bias=True).reshape(
            samples.shape[1], samples.shape[1]), provenance=provenance)


def running_moments(samples):
    """Running mean and 1/t covariance after each sample.

    Returns
    -------
    means : ndarray (T, d)
    covs : ndarray (T, d, d)
    """
    samples = np.asarray(samples, dtype=float)
    T = samples.shape[0]
    counts = np.arange(1, T + 1)[:, None]
    means = np.cumsum(samples, axis=0) / counts
    second = np.cumsum(samples[:, :, None] * samples[:, None, :], axis=0) / counts[:, :, None]
    covs = second - means[:, :, None] * means[:, None, :]
    return means, covs


def rem_rec(samples, truth, at=None):
    """Relative l1 errors of the running mean and covariance.

    ``REM_t = sum_i |mean_t,i - mean_i| / sum_i |mean_i|`` and likewise for
    the covariance entries, where the running covariance uses the running
    mean and 1/t normalisation.

    Parameters
    ----------
    samples : ndarray (T, d)
    truth : GroundTruth
    at : sequence of int, optional
        1-based sample counts at which to report; every t by default.
    """
    samples = np.asarray(samples, dtype=float)
    if samples.ndim == 1:
        samples = samples[:, None]
    T, d = samples.shape
    if T < 2:
        raise DiagnosticError("need at least two samples")
    mean0 = np.asarray(truth.mean, dtype=float).reshape(d)
    cov0 = np.asarray(truth.cov, dtype=float).reshape(d, d)
    den_m, den_c = np.abs(mean0).sum(), np.abs(cov0).sum()
    if den_m == 0 or den_c == 0:
        raise DiagnosticError("reference mean or covariance is identically zero")
    at = np.arange(1, T + 1) if at is None else np.asarray(at, dtype=int)
    s1 = np.cumsum(samples, axis=0)
    rem = np.empty(at.size)
    rec = np.empty(at.size)
    S2 = np.zeros((d, d))
    done = 0
    for j, t in enumerate(at):
        block = samples[done:t]
        S2 += block.T @ block
        done = t
        m = s1[t - 1] / t
        C = S2 / t - np.outer(m, m)
        rem[j] = np.abs(m - mean0).sum() / den_m
        rec[j] = np.abs(C - cov0).sum() / den_c
    return rem, rec


def rmse_to_truth(estimate, truth):
    estimate = np.asarray(estimate, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if estimate.shape != truth.shape:
        raise ValueError("shape mismatch %s vs %s" % (estimate.shape, truth.shape))
    return float(np.sqrt(np.mean((estimate - truth) ** 2)))


def amari_distance(W_est, W_ref):
    """Amari distance between unmixing matrices, normalised by 2d.

    Zero exactly when ``W_est @ inv(W_ref)`` is a scaled permutation.
    """
    W_est = np.asarray(W_est, dtype=float)
    W_ref = np.asarray(W_ref, dtype=float)
    d = W_ref.shape[0]
    if np.linalg.matrix_rank(W_ref) < d:
        raise DiagnosticError("reference unmixing matrix is singular")
    R = np.abs(W_est @ np.linalg.inv(W_ref))
    rows = (R.sum(axis=1) / R.max(axis=1) - 1.0).sum()
    cols = (R.sum(axis=0) / R.max(axis=0) - 1.0).sum()
    return float((rows + cols) / (2.0 * d))


# ---------------------------------------------------------------------------
# Grid quadrature
# ---------------------------------------------------------------------------


class Grid:
    """Rectangular lattice given by one coordinate array per axis."""

    def __init__(self, *axes):
        self.axes = [np.asarray(a, dtype=float) for a in axes]
        self.shape = tuple(a.size for a in self.axes)
        weights = np.ones(())
        for a in self.axes:
            w = np.empty(a.size)
            dx = np.diff(a)
            w[0], w[-1] = dx[0] / 2, dx[-1] / 2
            w[1:-1] = (dx[:-1] + dx[1:]) / 2
            weights = np.multiply.outer(weights, w)
        self.weights = weights

    @classmethod
    def regular(cls, bounds, n):
        """``bounds`` is a list of ``(lo, hi)`` pairs, ``n`` points per axis."""
        return cls(*[np.linspace(lo, hi, n) for lo, hi in bounds])

    @property
    def ndim(self):
        return len(self.axes)

    @property
    def bounds(self):
        return [(a[0], a[-1]) for a in self.axes]

    def points(self):
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    def evaluate(self, fn, vectorized=False):
        pts = self.points()
        vals = fn(pts) if vectorized else np.array([fn(p) for p in pts])
        return np.asarray(vals, dtype=float).reshape(self.shape)

    def integrate(self, values):
        return float(np.sum(self.weights * values))

    def gradient(self, values):
        """Central differences along each axis, stacked as ``(ndim,) + shape``."""
        grads = np.gradient(values, *self.axes, edge_order=2)
        if self.ndim == 1:
            grads = [grads]
        return np.stack(grads, axis=0)


def boundary_ratio(log_density):
    """Largest boundary density relative to the peak density."""
    log_density = np.asarray(log_density, dtype=float)
    peak = log_density.max()
    edge = -np.inf
    for ax in range(log_density.ndim):
        for idx in (0, -1):
            edge = max(edge, np.take(log_density, idx, axis=ax).max())
    return float(np.exp(edge - peak))


def _normalise(log_density, grid):
    log_density = np.asarray(log_density, dtype=float)
    shifted = log_density - log_density.max()
    log_z = np.log(grid.integrate(np.exp(shifted)))
    return shifted - log_z


def _check_boundary(log_density, tol, name):
    ratio = boundary_ratio(log_density)
    if ratio >= tol:
        raise DiagnosticError(
            "%s has boundary density %.2g of its peak (limit %.0e); widen the grid"
            % (name, ratio, tol)
        )


def grid_kl(log_p, log_q, grid, boundary_tol=1e-8):
    """``KL(p || q)`` of two unnormalised log densities tabulated on ``grid``.

    Both are normalised by trapezoidal quadrature on the same grid. The
    reference density ``p`` must be negligible on the grid boundary.
    """
    _check_boundary(log_p, boundary_tol, "reference density")
    lp = _normalise(log_p, grid)
    lq = _normalise(log_q, grid)
    p = np.exp(lp)
    integrand = np.where(p > 0, p * (lp - lq), 0.0)
    return grid.integrate(integrand)


def grid_sm(log_p, log_q, grid, boundary_tol=1e-8):
    """Score distance ``0.5 * int q |grad log q - grad log p|^2``.

    Gradients are central differences on the grid; the weight ``q`` is the
    normalised approximating density. The reference density ``p`` must be
    negligible on the grid boundary.
    """
    _check_boundary(log_p, boundary_tol, "reference density")
    gp = grid.gradient(np.asarray(log_p, dtype=float))
    gq = grid.gradient(np.asarray(log_q, dtype=float))
    q = np.exp(_normalise(log_q, grid))
    return 0.5 * grid.integrate(q * np.sum((gq - gp) ** 2, axis=0))


def fit_grid(log_density, bounds, n, tol=1e-8, grow=0.5, max_rounds=30):
    """Widen a regular grid until ``log_density`` is negligible on its edges.

    Each side whose boundary density exceeds ``tol`` times the peak is pushed
    out by ``grow`` times the current width of that axis; points are added so
    the spacing stays fixed.

    Parameters
    ----------
    log_density : callable
        Vectorised over an (m, ndim) array of points.
    bounds : list of (lo, hi)
    n : int
        Points per axis of the starting grid.

    Returns
    -------
    grid : Grid
    values : ndarray
        ``log_density`` tabulated on the returned grid.
    """
    bounds = [list(map(float, b)) for b in bounds]
    counts = [int(n)] * len(bounds)
    for _ in range(max_rounds):
        grid = Grid(*[np.linspace(lo, hi, c) for (lo, hi), c in zip(bounds, counts)])
        values = grid.evaluate(log_density, vectorized=True)
        peak = values.max()
        moved = False
        for ax, (lo, hi) in enumerate(bounds):
            step = (hi - lo) / (counts[ax] - 1)
            extra = max(1, int(round(grow * (counts[ax] - 1))))
            for side, idx in ((0, 0), (1, -1)):
                if np.exp(np.take(values, idx, axis=ax).max() - peak) >= tol:
                    bounds[ax][side] += (-1 if side == 0 else 1) * extra * step
                    counts[ax] += extra
                    moved = True
        if not moved:
            return grid, values
    raise DiagnosticError("density still not negligible on the grid edge after %d rounds"
                          % max_rounds)
