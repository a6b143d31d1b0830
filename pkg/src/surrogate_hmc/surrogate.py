"""Random-basis surrogate of the potential and its score-matching trainers.

The surrogate is a single hidden layer of frozen softplus nodes,

    z(theta) = sum_i v_i softplus(w_i . u + b_i),   u = L'(theta - theta_map),

where ``L`` is the Cholesky factor of the Laplace Hessian, so ``u`` is
approximately standard normal under the posterior. Only the output weights
``v`` are learned, by ridge regression of the surrogate gradient onto the
true gradient (score matching), either in batch or one point at a time.
"""

from dataclasses import dataclass, field
import json

import numpy as np
from scipy import linalg
from scipy.linalg import blas
from scipy.special import expit

FORMAT_TAG = "surrogate-hmc/v1"


def softplus(u):
    """``log(1 + exp(u))`` without overflow."""
    return np.maximum(u, 0.0) + np.log1p(np.exp(-np.abs(u)))


class RandomBasis:
    """Frozen softplus nodes acting on Laplace-whitened inputs.

    Parameters
    ----------
    weights : ndarray (s, dim)
        Node directions in whitened coordinates.
    biases : ndarray (s,)
    shift : ndarray (dim,)
        Centre of the whitening, the MAP point.
    chol : ndarray (dim, dim)
        Lower Cholesky factor ``L`` of the Hessian; inputs are mapped to
        ``L'(theta - shift)``.
    """

    def __init__(self, weights, biases, shift=None, chol=None):
        self.weights = np.array(weights, dtype=float)
        self.biases = np.array(biases, dtype=float)
        self.s, self.dim = self.weights.shape
        if self.biases.shape != (self.s,):
            raise ValueError("need one bias per node")
        self.shift = np.zeros(self.dim) if shift is None else np.array(shift, dtype=float)
        self.chol = np.eye(self.dim) if chol is None else np.array(chol, dtype=float)
        # w_i . L'(theta - shift) = (L w_i) . (theta - shift)
        self._eff = self.weights @ self.chol.T
        for arr in (self.weights, self.biases, self.shift, self.chol, self._eff):
            arr.flags.writeable = False

    def whiten(self, theta):
        return (np.asarray(theta, dtype=float) - self.shift) @ self.chol

    def preactivation(self, theta):
        """Node arguments; ``theta`` may be a single point or an (n, dim) batch."""
        return (np.asarray(theta, dtype=float) - self.shift) @ self._eff.T + self.biases

    def features(self, theta):
        return softplus(self.preactivation(theta))

    def jacobian(self, theta):
        """The dim x s matrix A(theta) with ``grad z(theta) = A(theta) @ v``."""
        return self._eff.T * expit(self.preactivation(theta))

    def __eq__(self, other):
        return (
            isinstance(other, RandomBasis)
            and np.array_equal(self.weights, other.weights)
            and np.array_equal(self.biases, other.biases)
            and np.array_equal(self.shift, other.shift)
            and np.array_equal(self.chol, other.chol)
        )


def sample_basis(s, dim, laplace=None, seed=None):
    """Draw ``s`` nodes: standard normal weights, Uniform(-2, 2) biases.

    ``laplace`` supplies the whitening (MAP point and Cholesky factor); with
    ``None`` the identity map is used.
    """
    if s < 1:
        raise ValueError("need at least one node")
    rng = np.random.default_rng(seed)
    weights = rng.standard_normal((s, dim))
    biases = rng.uniform(-2.0, 2.0, size=s)
    if laplace is None:
        return RandomBasis(weights, biases)
    return RandomBasis(weights, biases, laplace.theta_map, laplace.chol)


class Surrogate:
    """``z(theta) = sum_i v_i softplus(node_i(theta))`` for a fixed basis."""

    def __init__(self, basis, v=None):
        self.basis = basis
        self.v = np.zeros(basis.s) if v is None else np.asarray(v, dtype=float)

    @property
    def dim(self):
        return self.basis.dim

    def value(self, theta):
        return self.basis.features(theta) @ self.v

    def grad(self, theta):
        u = self.basis.preactivation(theta)
        return self.basis._eff.T @ (expit(u) * self.v)

    def grad_batch(self, thetas):
        u = self.basis.preactivation(thetas)
        return (expit(u) * self.v) @ self.basis._eff

    def to_dict(self, lam=None, t=None):
        b = self.basis
        return {
            "format": FORMAT_TAG,
            "s": b.s,
            "dim": b.dim,
            "W": b.weights.tolist(),
            "b": b.biases.tolist(),
            "v": self.v.tolist(),
            "theta_L": b.shift.tolist(),
            "L": b.chol.tolist(),
            "lambda": lam,
            "t": t,
        }

    @classmethod
    def from_dict(cls, record):
        if record.get("format") != FORMAT_TAG:
            raise ValueError("unsupported surrogate format %r" % record.get("format"))
        basis = RandomBasis(record["W"], record["b"], record["theta_L"], record["L"])
        if basis.s != record["s"] or basis.dim != record["dim"]:
            raise ValueError("surrogate record has inconsistent shapes")
        return cls(basis, np.array(record["v"], dtype=float))

    def save(self, path, **meta):
        with open(path, "w") as fh:
            json.dump(self.to_dict(**meta), fh)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


class TrainerState:
    """Online ridge score-matching state.

    ``v`` is the current output-weight estimate and ``C`` the inverse of the
    regularised Gram matrix ``sum_n A_n'A_n + lam I`` over all points seen.
    Only the lower triangle of ``C`` is stored and updated, so the matrix is
    exactly symmetric by construction; the ``C`` property fills in the rest.
    """

    def __init__(self, v, C, lam, t=0, t0=np.inf):
        self.v = np.array(v, dtype=float)
        self._lower = np.asfortranarray(np.tril(np.asarray(C, dtype=float)))
        self.lam = float(lam)
        self.t = t
        self.t0 = t0

    @classmethod
    def init(cls, s, lam, t0=np.inf):
        if lam <= 0:
            raise ValueError("ridge coefficient must be positive, got %r" % lam)
        return cls(np.zeros(s), np.eye(s) / lam, lam, 0, t0)

    @property
    def s(self):
        return self.v.size

    @property
    def C(self):
        low = self._lower
        return np.tril(low) + np.tril(low, -1).T

    def update(self, A, grad_u):
        """Absorb one point given its Jacobian ``A`` (dim x s) and true gradient.

        Woodbury update of the inverse Gram matrix; costs O(dim s^2).
        With ``S = I + A C A' = R R'`` and ``B = C A' R^-T`` the update is
        ``v += B R^-1 (grad_u - A v)`` and ``C -= B B'``.
        """
        A = np.asarray(A, dtype=float)
        CAt = blas.dsymm(1.0, self._lower, A.T, side=0, lower=1)
        S = np.eye(A.shape[0]) + A @ CAt
        try:
            R = np.linalg.cholesky(S)
        except np.linalg.LinAlgError as exc:
            raise np.linalg.LinAlgError("innovation matrix is not positive definite") from exc
        B = linalg.solve_triangular(R, CAt.T, lower=True).T
        resid = np.asarray(grad_u, dtype=float) - A @ self.v
        self.v = self.v + B @ linalg.solve_triangular(R, resid, lower=True)
        self._lower = blas.dsyrk(-1.0, B, beta=1.0, c=self._lower, trans=0, lower=1,
                                 overwrite_c=1)
        self.t += 1
        return self

    def __repr__(self):
        return "TrainerState(s=%d, lam=%g, t=%d, t0=%s)" % (self.s, self.lam, self.t, self.t0)


def trainer_init(s, lam, t0=np.inf):
    return TrainerState.init(s, lam, t0)


def trainer_update(state, basis, theta, grad_u):
    return state.update(basis.jacobian(theta), np.asarray(grad_u, dtype=float))


def batch_solve(points, basis, lam):
    """Ridge score-matching solution over a list of ``(theta, grad_u)`` pairs.

    Solves ``(sum A'A + lam I) v = sum A' grad_u`` by Cholesky.
    """
    points = list(points)
    if not points:
        raise ValueError("need at least one training point")
    G = lam * np.eye(basis.s)
    rhs = np.zeros(basis.s)
    for theta, g in points:
        A = basis.jacobian(theta)
        G += A.T @ A
        rhs += A.T @ g
    return linalg.cho_solve(linalg.cho_factor(G, lower=True), rhs)


def transition_mu(t, n_s):
    """Laplace-to-surrogate blending weight ``1 - exp(-t / n_s)``."""
    if n_s <= 0:
        raise ValueError("n_s must be positive")
    return -np.expm1(-t / n_s)


@dataclass
class RegularizedSurrogate:
    """Blend of the surrogate with the Laplace quadratic.

    ``V_t(theta) = mu_t z(theta) + 0.5 (1 - mu_t) (theta - theta_map)' H (theta - theta_map)``

    ``mu`` overrides the exponential schedule with a fixed weight or a
    callable of ``t``; ``n_s=inf`` keeps the chain on the Laplace Gaussian.
    """

    surrogate: object
    laplace: object
    n_s: float = 200.0
    t: int = 0
    mu: object = field(default=None, repr=False)

    @property
    def mu_t(self):
        if self.mu is None:
            return 0.0 if np.isinf(self.n_s) else transition_mu(self.t, self.n_s)
        if callable(self.mu):
            return self.mu(self.t)
        return self.mu

    def value(self, theta):
        mu = self.mu_t
        d = np.asarray(theta, dtype=float) - self.laplace.theta_map
        quad = 0.5 * float(d @ self.laplace.hessian @ d)
        return mu * self.surrogate.value(theta) + (1.0 - mu) * quad

    def grad(self, theta):
        mu = self.mu_t
        d = np.asarray(theta, dtype=float) - self.laplace.theta_map
        return mu * self.surrogate.grad(theta) + (1.0 - mu) * (self.laplace.hessian @ d)


def empirical_score_distance(surrogate, model, samples):
    """``(1/2T) sum_t |grad z(theta_t) - grad U(theta_t)|^2`` over samples."""
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    if samples.shape[0] == 0:
        raise ValueError("need at least one sample")
    gz = surrogate.grad_batch(samples)
    gu = np.array([model.grad(th) for th in samples])
    return 0.5 * float(np.mean(np.sum((gz - gu) ** 2, axis=1)))
