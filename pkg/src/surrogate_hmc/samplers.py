"""HMC, surrogate-accelerated HMC (VHMC) and SGLD samplers.

All samplers take an explicit ``numpy.random.Generator``; given the same
generator state they produce identical chains.
"""

from collections import deque
from dataclasses import dataclass, field
import csv
import logging
import time

import numpy as np

from .models import DomainError

logger = logging.getLogger(__name__)


@dataclass
class HmcConfig:
    """Leapfrog and adaptation settings. The mass matrix is always identity."""

    epsilon: float = 0.1
    L: int = 10
    target_accept: float = 0.8
    warmup: int = 0
    adapt_window: int = 10
    adapt_rate: float = 0.1
    max_delta_h: float = 1000.0

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if int(self.L) != self.L or self.L < 1:
            raise ValueError("L must be a positive integer")
        if not 0 < self.target_accept < 1:
            raise ValueError("target_accept must lie in (0, 1)")
        if self.warmup < 0 or self.adapt_window < 1:
            raise ValueError("warmup must be >= 0 and adapt_window >= 1")
        self.L = int(self.L)


class Divergence(Exception):
    pass


def _leapfrog(grad, theta, r, epsilon, L, g):
    r = r - 0.5 * epsilon * g
    for step in range(L):
        theta = theta + epsilon * r
        g = grad(theta)
        if not np.all(np.isfinite(g)):
            raise Divergence
        r = r - (epsilon if step < L - 1 else 0.5 * epsilon) * g
    return theta, r, g


def leapfrog(grad, theta, r, epsilon, L):
    """Integrate Hamiltonian dynamics with unit mass for ``L`` leapfrog steps.

    Each step is half-kick, drift, half-kick; consecutive half-kicks are
    fused. Returns the end point ``(theta, r)``; a non-finite gradient along
    the way returns NaN arrays.
    """
    theta = np.asarray(theta, dtype=float)
    r = np.asarray(r, dtype=float)
    try:
        with np.errstate(over="ignore", invalid="ignore"):
            theta, r, _ = _leapfrog(grad, theta, r, epsilon, L, grad(theta))
    except (Divergence, DomainError, FloatingPointError):
        return np.full_like(theta, np.nan), np.full_like(r, np.nan)
    return theta, r


@dataclass
class HmcStep:
    theta: np.ndarray
    accepted: bool
    delta_h: float
    accept_prob: float
    potential: float
    grad: np.ndarray


def _transition(potential, grad, theta, u0, g0, epsilon, L, rng, max_delta_h):
    # draws exactly one normal vector and one uniform per call
    r0 = rng.standard_normal(theta.size)
    u = rng.uniform()
    h0 = u0 + 0.5 * (r0 @ r0)
    try:
        with np.errstate(over="ignore", invalid="ignore"):
            th, r, g = _leapfrog(grad, theta, r0, epsilon, L, g0)
            u1 = potential(th)
    except (Divergence, DomainError, FloatingPointError):
        return HmcStep(theta, False, np.inf, 0.0, u0, g0)
    delta_h = u1 + 0.5 * (r @ r) - h0
    if not np.isfinite(delta_h) or abs(delta_h) > max_delta_h:
        return HmcStep(theta, False, delta_h, 0.0, u0, g0)
    accept_prob = 1.0 if delta_h <= 0 else float(np.exp(-delta_h))
    if u < accept_prob:
        return HmcStep(th, True, delta_h, accept_prob, u1, g)
    return HmcStep(theta, False, delta_h, accept_prob, u0, g0)


def hmc_step(potential, grad, theta, config, rng):
    """One HMC transition: fresh momentum, leapfrog proposal, MH correction.

    Divergent trajectories (non-finite energies or ``|dH| > max_delta_h``)
    are rejected.
    """
    theta = np.asarray(theta, dtype=float)
    return _transition(
        potential, grad, theta, potential(theta), grad(theta),
        config.epsilon, config.L, rng, config.max_delta_h,
    )


def adapt_stepsize(epsilon, accept_rate, window_index, target, rate=0.1):
    """Robbins-Monro update ``eps * exp(kappa (accept_rate - target))``.

    ``kappa = rate / sqrt(window_index)`` with ``window_index`` starting at 1.
    """
    kappa = rate / np.sqrt(window_index)
    return epsilon * float(np.exp(kappa * (accept_rate - target)))


class _StepSizeAdapter:
    def __init__(self, config):
        self.config = config
        self.epsilon = config.epsilon
        self.window = []
        self.index = 0

    def observe(self, t, accept_prob):
        cfg = self.config
        if t >= cfg.warmup:
            return
        self.window.append(accept_prob)
        if len(self.window) == cfg.adapt_window:
            self.index += 1
            self.epsilon = adapt_stepsize(
                self.epsilon, float(np.mean(self.window)), self.index,
                cfg.target_accept, cfg.adapt_rate,
            )
            self.window = []


@dataclass
class Trace:
    """Recorded chain. One row per stored step (every ``thin`` iterations).

    ``grad_evals`` is the cumulative number of true-gradient evaluations in
    full-data units (an SGLD minibatch of size B out of N counts as B/N).
    ``elapsed`` is cumulative wall-clock seconds.
    """

    samples: np.ndarray
    step: np.ndarray
    accepted: np.ndarray
    delta_h: np.ndarray
    accept_prob: np.ndarray
    grad_evals: np.ndarray
    elapsed: np.ndarray
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return self.samples.shape[0]

    @property
    def acceptance_rate(self):
        return float(np.mean(self.accepted)) if len(self) else float("nan")

    def after(self, step):
        """Rows recorded at or after iteration ``step``."""
        keep = self.step >= step
        return Trace(
            self.samples[keep], self.step[keep], self.accepted[keep], self.delta_h[keep],
            self.accept_prob[keep], self.grad_evals[keep], self.elapsed[keep], dict(self.meta),
        )

    def to_csv(self, path, timing=True):
        """Write ``step, theta_0..theta_{d-1}, accepted, delta_H, grad_evals_cum, wall_ms``.

        With ``timing=False`` the wall-clock column is zeroed so the file is
        a deterministic function of the run configuration.
        """
        dim = self.samples.shape[1]
        wall_ms = np.diff(self.elapsed, prepend=0.0) * 1e3 if timing else np.zeros(len(self))
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step"] + ["theta_%d" % i for i in range(dim)]
                       + ["accepted", "delta_H", "grad_evals_cum", "wall_ms"])
            for i in range(len(self)):
                w.writerow(
                    [int(self.step[i])] + [repr(float(x)) for x in self.samples[i]]
                    + [int(self.accepted[i]), repr(float(self.delta_h[i])),
                       repr(float(self.grad_evals[i])), repr(float(wall_ms[i]))]
                )

    @classmethod
    def from_csv(cls, path):
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        header, data = rows[0], np.array(rows[1:], dtype=float).reshape(-1, len(rows[0]))
        dim = len(header) - 5
        elapsed = np.cumsum(data[:, -1]) / 1e3
        return cls(data[:, 1:1 + dim], data[:, 0].astype(int), data[:, 1 + dim] > 0,
                   data[:, 2 + dim], np.full(len(data), np.nan), data[:, 3 + dim], elapsed)


class _Recorder:
    def __init__(self, dim, thin):
        self.thin = thin
        self.rows = []
        self.start = time.perf_counter()

    def record(self, t, theta, accepted, delta_h, accept_prob, grad_evals):
        if (t + 1) % self.thin == 0:
            self.rows.append((t, theta, accepted, delta_h, accept_prob, grad_evals,
                              time.perf_counter() - self.start))

    def elapsed(self):
        return time.perf_counter() - self.start

    def trace(self, dim, meta):
        if not self.rows:
            empty = np.empty(0)
            return Trace(np.empty((0, dim)), empty.astype(int), empty.astype(bool),
                         empty, empty, empty, empty, meta)
        t, th, acc, dh, ap, ge, el = zip(*self.rows)
        return Trace(np.array(th), np.array(t), np.array(acc), np.array(dh, dtype=float),
                     np.array(ap, dtype=float), np.array(ge, dtype=float), np.array(el), meta)


def hmc_run(model, config, theta0, rng, T, thin=1, time_budget=None):
    """Standard HMC on the model's true potential.

    Every leapfrog step costs one true-gradient evaluation; the gradient at
    the current state is cached between iterations.
    """
    theta = np.array(theta0, dtype=float)
    u0, g0 = model.potential(theta), model.grad(theta)
    evals = 1
    adapter = _StepSizeAdapter(config)
    rec = _Recorder(model.dim, thin)
    for t in range(T):
        st = _transition(model.potential, model.grad, theta, u0, g0,
                         adapter.epsilon, config.L, rng, config.max_delta_h)
        evals += config.L
        theta, u0, g0 = st.theta, st.potential, st.grad
        adapter.observe(t, st.accept_prob)
        rec.record(t, theta, st.accepted, st.delta_h, st.accept_prob, evals)
        if time_budget is not None and rec.elapsed() >= time_budget:
            break
    return rec.trace(model.dim, {"sampler": "hmc", "epsilon": adapter.epsilon, "L": config.L})


def vhmc_run(model, reg, trainer, config, rng, T, theta0=None, t0=None, t0_max=None,
             mu_stop=0.99, v_tol=1e-3, v_lag=100, thin=1, time_budget=None):
    """Variational HMC: HMC on the regularised surrogate with online training.

    Each iteration proposes with leapfrog on ``V_t`` and accepts with the MH
    ratio of ``V_t``; the true potential is never evaluated. When the
    proposal is accepted and training is still active, the true gradient is
    evaluated once at the new state and absorbed by the trainer.

    Parameters
    ----------
    model : TargetModel
        Supplies the true gradient for training points.
    reg : RegularizedSurrogate
        Its ``surrogate.v`` is kept in sync with ``trainer.v``.
    trainer : TrainerState or None
        ``None`` samples the frozen surrogate without training.
    t0 : int, optional
        Iteration at which training stops. By default training stops at the
        first accepted step with ``mu_t >= mu_stop`` whose relative change
        in ``v`` over the last ``v_lag`` updates is below ``v_tol``, or at
        ``t0_max``.

    Returns
    -------
    trace : Trace
        ``meta['t0']`` holds the iteration at which training stopped.
    surrogate : Surrogate
    """
    sur = reg.surrogate
    basis = getattr(sur, "basis", None)
    theta = np.array(reg.laplace.theta_map if theta0 is None else theta0, dtype=float)
    training = trainer is not None and (t0 is None or t0 > 0)
    stop = 0 if not training else None
    history = deque(maxlen=v_lag + 1)
    if training:
        history.append(trainer.v.copy())
    evals = 0
    adapter = _StepSizeAdapter(config)
    rec = _Recorder(theta.size, thin)
    for t in range(T):
        if training and (t0 is not None and t >= t0 or t0_max is not None and t >= t0_max):
            training, stop = False, t
        reg.t = t
        st = _transition(reg.value, reg.grad, theta, reg.value(theta), reg.grad(theta),
                         adapter.epsilon, config.L, rng, config.max_delta_h)
        theta = st.theta
        if st.accepted and training:
            try:
                g = model.grad(theta)
            except DomainError:
                g = None
            evals += 1
            if g is None or not np.all(np.isfinite(g)):
                logger.warning("skipping training point with non-finite gradient at step %d", t)
                g = None
        if st.accepted and training and g is not None:
            trainer.update(basis.jacobian(theta), g)
            sur.v = trainer.v
            history.append(trainer.v)
            if t0 is None and reg.mu_t >= mu_stop and len(history) == history.maxlen:
                change = np.linalg.norm(history[-1] - history[0])
                if change <= v_tol * np.linalg.norm(history[-1]):
                    training, stop = False, t + 1
        adapter.observe(t, st.accept_prob)
        rec.record(t, theta, st.accepted, st.delta_h, st.accept_prob, evals)
        if time_budget is not None and rec.elapsed() >= time_budget:
            break
    if stop is None:
        stop = T if t0 is None else min(t0, T)
    if trainer is not None:
        trainer.t0 = stop
    meta = {"sampler": "vhmc", "epsilon": adapter.epsilon, "L": config.L, "t0": stop,
            "training_points": trainer.t if trainer is not None else 0}
    return rec.trace(theta.size, meta), sur


# ---------------------------------------------------------------------------
# SGLD
# ---------------------------------------------------------------------------


@dataclass
class FixedStep:
    epsilon: float

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("stepsize must be positive")

    def __call__(self, t):
        return self.epsilon


@dataclass
class PolynomialStep:
    """Annealed stepsize ``a (b + t)^(-delta)``."""

    a: float = 5e-3
    b: float = 1e4
    delta: float = 0.5

    def __post_init__(self):
        if not (self.a > 0 and self.b > 0 and self.delta >= 0):
            raise ValueError("need a > 0, b > 0, delta >= 0")

    def __call__(self, t):
        return self.a * (self.b + t) ** (-self.delta)


@dataclass
class SgldConfig:
    batch_size: int = 500
    schedule: object = field(default_factory=lambda: FixedStep(1e-4))
    natural_gradient: bool = False
    # multiplies the injected noise; 0 turns SGLD into stochastic gradient descent
    noise_scale: float = 1.0


def sgld_natural_gradient(model, W, raw_grad):
    """Right-precondition an ICA gradient by ``W'W``.

    ``W`` and ``raw_grad`` may be flat or d x d; the result is flat.
    """
    d = model.d
    W = np.asarray(W, dtype=float).reshape(d, d)
    if np.linalg.matrix_rank(W) < d:
        raise DomainError("unmixing matrix is singular")
    G = np.asarray(raw_grad, dtype=float).reshape(d, d)
    return (G @ W.T @ W).ravel()


def sgld_run(model, config, theta0, rng, T, thin=1, time_budget=None):
    """Stochastic gradient Langevin dynamics, no MH correction.

    ``theta <- theta - (eps_t / 2) g_hat + N(0, eps_t I)`` with ``g_hat`` a
    minibatch estimate of the potential gradient, batches drawn uniformly
    without replacement each step. With ``natural_gradient`` the drift and
    noise are preconditioned by ``W'W`` row-wise, plus the divergence term
    ``(eps_t / 2)(d + 1) W`` that this position-dependent metric requires.
    """
    N = model.n_data
    B = config.batch_size
    if not 1 <= B <= N:
        raise ValueError("batch size must lie in [1, %d]" % N)
    theta = np.array(theta0, dtype=float)
    evals = 0.0
    rec = _Recorder(model.dim, thin)
    for t in range(T):
        eps = config.schedule(t)
        batch = rng.choice(N, size=B, replace=False) if B < N else np.arange(N)
        try:
            g = model.minibatch_grad(theta, batch)
        except DomainError:
            logger.warning("SGLD left the model domain at step %d", t)
            break
        evals += B / N
        noise = config.noise_scale * rng.standard_normal(theta.size)
        if config.natural_gradient:
            d = model.d
            W = theta.reshape(d, d)
            drift = -0.5 * eps * sgld_natural_gradient(model, W, g) + 0.5 * eps * (d + 1) * theta
            theta = theta + drift + np.sqrt(eps) * (noise.reshape(d, d) @ W).ravel()
        else:
            theta = theta - 0.5 * eps * g + np.sqrt(eps) * noise
        if not np.all(np.isfinite(theta)):
            logger.warning("SGLD diverged at step %d", t)
            break
        rec.record(t, theta, True, np.nan, 1.0, evals)
        if time_budget is not None and rec.elapsed() >= time_budget:
            break
    return rec.trace(model.dim, {"sampler": "sgld", "batch_size": B})
