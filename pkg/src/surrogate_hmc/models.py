"""Posterior targets: potential energy, gradients and Laplace approximations.

Every model exposes the negative log unnormalized posterior ``potential``
and its analytic gradient ``grad``. Models backed by a dataset also expose
``minibatch_grad``, an unbiased estimate of ``grad`` from a subset of the
observations.
"""

from dataclasses import dataclass
import logging

import numpy as np
from scipy import linalg
from scipy.special import betaln, digamma, erfcx, expit, gammaln

logger = logging.getLogger(__name__)

LOG_2PI = np.log(2.0 * np.pi)


class DomainError(ValueError):
    """Raised when a parameter lies outside the support of a model."""


class ConvergenceError(RuntimeError):
    """Raised when MAP optimisation stops short of the requested tolerance.

    The best iterate found so far is kept on ``best`` so callers can decide
    whether it is good enough.
    """

    def __init__(self, message, best, grad_norm):
        super().__init__(message)
        self.best = best
        self.grad_norm = grad_norm


class TargetModel:
    """Base class for a posterior target over a flat parameter vector.

    Subclasses implement ``potential`` and ``grad``. Data-backed models also
    implement ``_loglik_grad(theta, idx)``, the summed gradient of the
    log-likelihood over observations ``idx``, and ``_logprior_grad``.
    """

    dim = None
    n_data = 0

    def potential(self, theta):
        raise NotImplementedError

    def grad(self, theta):
        raise NotImplementedError

    def default_init(self):
        """Starting point for optimisation when none is given."""
        return np.zeros(self.dim)

    def _check(self, theta):
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.dim,):
            raise ValueError(
                "expected parameter of shape (%d,), got %s" % (self.dim, theta.shape)
            )
        return theta

    def _loglik_grad(self, theta, idx):
        raise NotImplementedError("%s has no per-datum gradient" % type(self).__name__)

    def _logprior_grad(self, theta):
        raise NotImplementedError

    def minibatch_grad(self, theta, batch):
        """Unbiased estimate of ``grad`` from the observations in ``batch``.

        The likelihood part is rescaled by ``n_data / len(batch)``; the prior
        part is always exact.
        """
        theta = self._check(theta)
        batch = np.asarray(batch, dtype=np.intp)
        if batch.size == 0:
            raise ValueError("minibatch must be nonempty")
        if batch.min() < 0 or batch.max() >= self.n_data:
            raise IndexError("minibatch index out of range [0, %d)" % self.n_data)
        scale = self.n_data / batch.size
        return -scale * self._loglik_grad(theta, batch) - self._logprior_grad(theta)


class GaussianTarget(TargetModel):
    """Multivariate normal test target with potential ``0.5 (x-m)' P (x-m)``.

    The potential is exactly zero at the mean.
    """

    def __init__(self, mean=None, cov=None, dim=None):
        if mean is None:
            if dim is None:
                raise ValueError("need either mean or dim")
            mean = np.zeros(dim)
        self.mean = np.asarray(mean, dtype=float)
        self.dim = self.mean.size
        if cov is None:
            self.precision = np.eye(self.dim)
        else:
            self.precision = np.linalg.inv(np.asarray(cov, dtype=float))
        self.cov = np.linalg.inv(self.precision)

    def potential(self, theta):
        diff = self._check(theta) - self.mean
        return 0.5 * float(diff @ self.precision @ diff)

    def grad(self, theta):
        return self.precision @ (self._check(theta) - self.mean)


def log_ndtr(u):
    """Logarithm of the standard normal CDF, finite for any real input.

    Uses ``Phi(u) = erfcx(-u/sqrt2) * exp(-u^2/2) / 2`` on the left tail so
    nothing underflows.
    """
    u = np.asarray(u, dtype=float)
    out = np.empty_like(u)
    neg = u < 0
    out[neg] = np.log(0.5 * erfcx(-u[neg] / np.sqrt(2.0))) - 0.5 * u[neg] ** 2
    pos = ~neg
    # log(1 - Phi(-u)) for u >= 0
    out[pos] = np.log1p(-0.5 * erfcx(u[pos] / np.sqrt(2.0)) * np.exp(-0.5 * u[pos] ** 2))
    return out


def mills_ratio(u):
    """``phi(u) / Phi(u)``, the derivative of ``log_ndtr``."""
    u = np.asarray(u, dtype=float)
    out = np.empty_like(u)
    neg = u < 0
    out[neg] = np.sqrt(2.0 / np.pi) / erfcx(-u[neg] / np.sqrt(2.0))
    pos = ~neg
    out[pos] = np.exp(-0.5 * u[pos] ** 2 - 0.5 * LOG_2PI - log_ndtr(u[pos]))
    return out


class _GlmModel(TargetModel):
    """Shared pieces of the binary regression models with ``N(0, var)`` prior."""

    def __init__(self, X, y, prior_var=100.0):
        X = np.asarray(X, dtype=float)
        y = np.asarray(y, dtype=float)
        if X.ndim != 2 or y.shape != (X.shape[0],):
            raise ValueError("X must be N x d and y of length N")
        if not np.all((y == 0) | (y == 1)):
            raise ValueError("labels must be 0 or 1")
        self.X = X
        self.y = y
        self.prior_var = float(prior_var)
        self.n_data, self.dim = X.shape

    def _logprior(self, theta):
        return -0.5 * float(theta @ theta) / self.prior_var

    def _logprior_grad(self, theta):
        return -theta / self.prior_var

    def potential(self, theta):
        theta = self._check(theta)
        return -self._loglik(theta, slice(None)) - self._logprior(theta)

    def grad(self, theta):
        theta = self._check(theta)
        return -self._loglik_grad(theta, slice(None)) - self._logprior_grad(theta)


class LogisticModel(_GlmModel):
    """Bayesian logistic regression, ``p(y=1|x, b) = 1 / (1 + exp(-x'b))``."""

    def _loglik(self, theta, idx):
        a = self.X[idx] @ theta
        return float(np.sum(self.y[idx] * a - np.logaddexp(0.0, a)))

    def _loglik_grad(self, theta, idx):
        X = self.X[idx]
        return X.T @ (self.y[idx] - expit(X @ theta))


class ProbitModel(_GlmModel):
    """Bayesian probit regression, ``p(y=1|x, b) = Phi(x'b)``."""

    def __init__(self, X, y, prior_var=100.0):
        super().__init__(X, y, prior_var)
        self._sign = 2.0 * self.y - 1.0

    def _loglik(self, theta, idx):
        return float(np.sum(log_ndtr(self._sign[idx] * (self.X[idx] @ theta))))

    def _loglik_grad(self, theta, idx):
        X = self.X[idx]
        s = self._sign[idx]
        return X.T @ (s * mills_ratio(s * (X @ theta)))


# Stirling-series tails of lgamma(z) - [(z - 1/2) log z - z] and of
# digamma(z) - log z, accurate to ~1e-15 for z >= 15.
_LGAMMA_TAIL = (1 / 12, -1 / 360, 1 / 1260, -1 / 1680, 1 / 1188)
_DIGAMMA_TAIL = (-1 / 12, 1 / 120, -1 / 252, 1 / 240, -1 / 132)
_ASYMPTOTIC_FROM = 15.0


def _lgamma_tail(z):
    zi2 = 1.0 / (z * z)
    acc = np.zeros_like(z)
    for c in reversed(_LGAMMA_TAIL):
        acc = acc * zi2 + c
    return acc / z


def _digamma_tail(z):
    zi2 = 1.0 / (z * z)
    acc = np.zeros_like(z)
    for c in reversed(_DIGAMMA_TAIL):
        acc = acc * zi2 + c
    return -0.5 / z + acc * zi2


def log_rising(x, k):
    """``lgamma(x + k) - lgamma(x)`` without cancellation when x >> k."""
    x, k = np.broadcast_arrays(np.asarray(x, dtype=float), np.asarray(k, dtype=float))
    out = np.empty(x.shape)
    big = x >= _ASYMPTOTIC_FROM
    xb, kb = x[big], k[big]
    out[big] = ((xb - 0.5) * np.log1p(kb / xb) + kb * np.log(xb + kb) - kb
                + _lgamma_tail(xb + kb) - _lgamma_tail(xb))
    small = ~big
    out[small] = gammaln(x[small] + k[small]) - gammaln(x[small])
    return out


def digamma_diff(x, k):
    """``digamma(x + k) - digamma(x)`` without cancellation when x >> k."""
    x, k = np.broadcast_arrays(np.asarray(x, dtype=float), np.asarray(k, dtype=float))
    out = np.empty(x.shape)
    big = x >= _ASYMPTOTIC_FROM
    xb, kb = x[big], k[big]
    out[big] = np.log1p(kb / xb) + _digamma_tail(xb + kb) - _digamma_tail(xb)
    small = ~big
    out[small] = digamma(x[small] + k[small]) - digamma(x[small])
    return out


class BetaBinomialModel(TargetModel):
    """Beta-binomial model for overdispersed counts with mean m and precision K.

    Prior ``p(m, K) ~ 1 / (m (1-m)) / (1+K)^2``. With ``transformed=True``
    (default) the parameter is ``(logit m, log K)`` and the potential
    includes the log-Jacobian ``log m(1-m) + log K``, so it is finite on all
    of R^2.
    """

    dim = 2

    def __init__(self, n, y, transformed=True):
        n = np.asarray(n, dtype=float)
        y = np.asarray(y, dtype=float)
        if n.shape != y.shape or np.any(y < 0) or np.any(y > n):
            raise ValueError("need 0 <= y_j <= n_j with matching shapes")
        self.n = n
        self.y = y
        self.n_data = n.size
        self.transformed = transformed
        # log binomial coefficients; constant in the parameters
        self._log_binom = float(np.sum(-np.log(n + 1.0) - betaln(y + 1.0, n - y + 1.0)))

    def _logs(self, theta):
        """``log a, log b, log K`` with ``a = Km`` and ``b = K(1-m)``."""
        theta = np.asarray(theta, dtype=float)
        if self.transformed:
            x1, x2 = theta[..., 0], theta[..., 1]
            return x2 - np.logaddexp(0.0, -x1), x2 - np.logaddexp(0.0, x1), x2
        m, K = theta[..., 0], theta[..., 1]
        if np.any((m <= 0) | (m >= 1) | (K <= 0)):
            raise DomainError("need 0 < m < 1 and K > 0")
        return np.log(m) + np.log(K), np.log1p(-m) + np.log(K), np.log(K)

    @staticmethod
    def _rising(logx, k):
        # log (x)_k and x * d/dx log (x)_k, written via (x)_k = x (x+1)_{k-1}
        # so that both stay finite as x -> 0
        x = np.exp(logx)
        pos = k > 0
        km1 = np.maximum(k - 1.0, 0.0)
        with np.errstate(over="ignore"):
            log_r = np.where(pos, logx + log_rising(x + 1.0, km1), 0.0)
            score = np.where(pos, 1.0 + x * digamma_diff(x + 1.0, km1), 0.0)
        return log_r, score

    def _terms(self, theta):
        la, lb, lk = (np.asarray(v)[..., None] for v in self._logs(theta))
        n, y = self.n, self.y
        ra, sa = self._rising(la, y)
        rb, sb = self._rising(lb, n - y)
        rk, sk = self._rising(lk, n)
        loglik = np.sum(ra + rb - rk, axis=-1)
        return loglik, np.sum(sa, axis=-1), np.sum(sb, axis=-1), np.sum(sk, axis=-1)

    def _logprior(self, theta):
        theta = np.asarray(theta, dtype=float)
        x1, x2 = theta[..., 0], theta[..., 1]
        if self.transformed:
            # prior x Jacobian: m(1-m) cancels, K / (1+K)^2 remains
            return x2 - 2.0 * np.logaddexp(0.0, x2)
        return -np.log(x1) - np.log1p(-x1) - 2.0 * np.log1p(x2)

    # beyond this log-precision the beta-binomial equals the binomial to
    # machine precision and exp(x2) would overflow
    _BINOMIAL_LIMIT = 600.0

    def _split(self, thetas):
        if not self.transformed:
            return np.zeros(thetas.shape[:-1], dtype=bool)
        return thetas[..., 1] > self._BINOMIAL_LIMIT

    def potential_many(self, thetas):
        """Vectorised potential over an (n, 2) array of points."""
        thetas = np.asarray(thetas, dtype=float)
        out = np.empty(thetas.shape[:-1])
        far = self._split(thetas)
        near = ~far
        th = thetas[near]
        out[near] = -(self._terms(th)[0] + self._log_binom + self._logprior(th))
        if np.any(far):
            th = thetas[far]
            x1 = th[..., 0]
            ll = (np.sum(self.y) * -np.logaddexp(0.0, -x1)
                  + np.sum(self.n - self.y) * -np.logaddexp(0.0, x1) + self._log_binom)
            out[far] = -(ll + self._logprior(th))
        return out

    def potential(self, theta):
        return float(self.potential_many(self._check(theta)))

    def grad(self, theta):
        theta = self._check(theta)
        x1, x2 = theta
        if self._split(theta):
            g1 = np.sum(self.y) - np.sum(self.n) * expit(x1)
            return -np.array([g1, 1.0 - 2.0 * expit(x2)])
        _, sa, sb, sk = self._terms(theta)
        if self.transformed:
            m, m1 = expit(x1), expit(-x1)
            g1 = m1 * sa - m * sb
            g2 = sa + sb - sk + 1.0 - 2.0 * expit(x2)
        else:
            m, K = x1, x2
            a, b = K * m, K * (1.0 - m)
            ga, gb = sa / a - sk / K, sb / b - sk / K
            g1 = K * (ga - gb) - 1.0 / m + 1.0 / (1.0 - m)
            g2 = m * ga + (1.0 - m) * gb - 2.0 / (1.0 + K)
        return -np.array([g1, g2], dtype=float)


def _log_cosh(u):
    a = np.abs(u)
    return a + np.log1p(np.exp(-2.0 * a)) - np.log(2.0)


class IcaModel(TargetModel):
    """Posterior over the ICA unmixing matrix W with sech-type sources.

    Source density ``p(y) = 1 / (4 cosh(y/2))``, independent ``N(0, prior_var)``
    prior on each entry. The parameter is W flattened row-major.
    """

    def __init__(self, X, prior_var=100.0):
        X = np.asarray(X, dtype=float)
        if X.ndim != 2:
            raise ValueError("X must be N x d")
        self.X = X
        self.n_data, self.d = X.shape
        self.dim = self.d * self.d
        self.prior_var = float(prior_var)

    def default_init(self):
        return np.eye(self.d).ravel()

    def unflatten(self, theta):
        return np.asarray(theta, dtype=float).reshape(self.d, self.d)

    def _logdet(self, W):
        sign, logdet = np.linalg.slogdet(W)
        if sign == 0 or not np.isfinite(logdet):
            raise DomainError("unmixing matrix is singular")
        return logdet

    def potential(self, theta):
        W = self.unflatten(self._check(theta))
        logdet = self._logdet(W)
        Y = self.X @ W.T
        nll = -self.n_data * logdet + np.sum(_log_cosh(0.5 * Y)) + self.X.size * np.log(4.0)
        return float(nll + 0.5 * np.sum(W * W) / self.prior_var)

    def _loglik_grad(self, theta, idx):
        W = self.unflatten(theta)
        try:
            Winv_T = np.linalg.inv(W).T
        except np.linalg.LinAlgError:
            raise DomainError("unmixing matrix is singular") from None
        X = self.X[idx]
        count = X.shape[0]
        Y = X @ W.T
        G = count * Winv_T - 0.5 * np.tanh(0.5 * Y).T @ X
        return G.ravel()

    def _logprior_grad(self, theta):
        return -np.asarray(theta) / self.prior_var

    def grad(self, theta):
        theta = self._check(theta)
        self._logdet(self.unflatten(theta))
        return -self._loglik_grad(theta, slice(None)) - self._logprior_grad(theta)


# ---------------------------------------------------------------------------
# MAP and Laplace approximation
# ---------------------------------------------------------------------------


@dataclass
class LaplaceApprox:
    """Quadratic expansion of the potential at its minimum.

    ``hessian`` is the (jittered) positive definite curvature and
    ``chol`` its lower Cholesky factor, ``hessian = chol @ chol.T``.
    """

    theta_map: np.ndarray
    hessian: np.ndarray
    chol: np.ndarray
    jitter: float = 0.0
    grad_norm: float = 0.0

    @property
    def dim(self):
        return self.theta_map.size

    @property
    def cov(self):
        return linalg.cho_solve((self.chol, True), np.eye(self.dim))

    @classmethod
    def from_hessian(cls, theta_map, hessian):
        """Build from a symmetric matrix, jittering until it is positive definite."""
        hessian = 0.5 * (hessian + hessian.T)
        chol, jitter = _jittered_cholesky(hessian)
        if jitter:
            hessian = hessian + jitter * np.eye(hessian.shape[0])
        return cls(np.asarray(theta_map, dtype=float), hessian, chol, jitter)


def _jittered_cholesky(H):
    try:
        return np.linalg.cholesky(H), 0.0
    except np.linalg.LinAlgError:
        pass
    dim = H.shape[0]
    scale = abs(np.trace(H)) / dim
    delta = 1e-8 * (scale if scale > 0 else 1.0)
    for _ in range(200):
        try:
            return np.linalg.cholesky(H + delta * np.eye(dim)), delta
        except np.linalg.LinAlgError:
            delta *= 2.0
    raise np.linalg.LinAlgError("could not make Hessian positive definite")


def fd_hessian(grad, theta, rel_step=1e-5):
    """Symmetrised central-difference Hessian from an analytic gradient."""
    theta = np.asarray(theta, dtype=float)
    dim = theta.size
    H = np.empty((dim, dim))
    for i in range(dim):
        h = rel_step * (1.0 + abs(theta[i]))
        e = np.zeros(dim)
        e[i] = h
        H[:, i] = (grad(theta + e) - grad(theta - e)) / (2.0 * h)
    return 0.5 * (H + H.T)


def find_map(model, init=None, tol=None, max_iter=100000, memory=10):
    """Minimise the potential and return the Laplace approximation there.

    Gradient descent with an Armijo backtracking line search (sufficient
    decrease 1e-4, shrink 0.5). Trial steps start from the Barzilai-Borwein
    length and the decrease is measured against the worst of the last
    ``memory`` values, which keeps iteration counts low on ill-conditioned
    posteriors.

    Parameters
    ----------
    model : TargetModel
    init : array_like, optional
        Starting point; ``model.default_init()`` by default.
    tol : float, optional
        Required gradient norm at the returned point; ``1e-6 * dim`` by default.

    Raises
    ------
    ConvergenceError
        If ``tol`` is not reached within ``max_iter`` iterations.
    """
    dim = model.dim
    tol = 1e-6 * dim if tol is None else tol
    x = model.default_init() if init is None else np.array(init, dtype=float)
    f = model.potential(x)
    g = model.grad(x)
    gnorm = np.linalg.norm(g)
    best = (gnorm, x)
    history = [f]
    step = 1.0 / max(gnorm, 1.0)
    x_prev = g_prev = None
    for it in range(max_iter):
        if gnorm <= tol:
            break
        if x_prev is not None:
            s, yv = x - x_prev, g - g_prev
            sy = s @ yv
            step = (s @ s) / sy if sy > 0 else 1.0 / max(gnorm, 1.0)
        t = step
        f_ref = max(history[-memory:])
        slack = 64 * np.finfo(float).eps * max(abs(f_ref), 1.0)
        while True:
            x_new = x - t * g
            try:
                f_new = model.potential(x_new)
            except DomainError:
                f_new = np.inf
            # slack absorbs rounding in f once the decrease is below resolution
            if np.isfinite(f_new) and f_new <= f_ref - 1e-4 * t * gnorm**2 + slack:
                break
            t *= 0.5
            if t * gnorm < 1e-16 * (1.0 + np.linalg.norm(x)):
                raise ConvergenceError("line search failed at iteration %d" % it, best[1], best[0])
        x_prev, g_prev = x, g
        x, f = x_new, f_new
        history.append(f)
        g = model.grad(x)
        gnorm = np.linalg.norm(g)
        if gnorm < best[0]:
            best = (gnorm, x)
    else:
        raise ConvergenceError(
            "gradient norm %.3g above tolerance %.3g after %d iterations" % (best[0], tol, max_iter),
            best[1],
            best[0],
        )
    logger.debug("MAP found after %d iterations, |grad| = %.3g", it, gnorm)
    lap = LaplaceApprox.from_hessian(x, fd_hessian(model.grad, x))
    lap.grad_norm = float(gnorm)
    return lap
