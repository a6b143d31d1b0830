"""Run configuration, experiment orchestration and reproducible outputs.

A run is fully described by a :class:`RunConfig`. ``execute`` turns one into
a trace (and, for VHMC, a trained surrogate); ``run_sample`` additionally
writes the trace CSV, the surrogate and a manifest JSON to disk. The
``experiment_*`` functions reproduce the four experiment protocols at desk
or full scale and write a metrics CSV.
"""

from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
import csv
import hashlib
import json
import logging
import math
import os
from pathlib import Path
import platform
import time

import numpy as np
from filelock import FileLock

from . import __version__
from .datasets import (
    add_bias_column, load_cancer_mortality, load_libsvm, load_matrix, random_project,
    synth_adult_like, synth_meg_like, synth_probit,
)
from .diagnostics import (
    Grid, GroundTruth, amari_distance, ess, fit_grid, grid_kl, grid_sm, rem_rec, rmse_to_truth,
)
from .models import (
    BetaBinomialModel, GaussianTarget, IcaModel, LogisticModel, ProbitModel, find_map,
)
from .samplers import (
    FixedStep, HmcConfig, PolynomialStep, SgldConfig, hmc_run, sgld_run, vhmc_run,
)
from .surrogate import RegularizedSurrogate, Surrogate, TrainerState, sample_basis

logger = logging.getLogger(__name__)

MANIFEST_FORMAT = "surrogate-hmc-manifest/v1"
SAMPLERS = ("hmc", "vhmc", "sgld")

# model parameter defaults; data sizes are before the scale factor
MODEL_DEFAULTS = {
    "gaussian": {"dim": 2, "mean": None, "cov": None},
    "betabin": {"transformed": True},
    "probit": {"N": 10000, "d": 5, "prior_var": 100.0, "data_seed": 0},
    "logistic": {"data": None, "synthetic": False, "N": None, "project": 50,
                 "prior_var": 100.0, "data_seed": 0},
    "ica": {"data": None, "synthetic": False, "N": None, "channels": 5,
            "prior_var": 100.0, "data_seed": 0},
}

# sizes of the full benchmark datasets, used for synthetic stand-ins
A9A_ROWS = 32561
MEG_ROWS = 17730


class ConfigError(ValueError):
    """Invalid run configuration; ``field`` names the offending entry."""

    def __init__(self, field_name, message):
        super().__init__("%s: %s" % (field_name, message))
        self.field = field_name


class DataMissing(FileNotFoundError):
    """A required data file is absent."""

    def __init__(self, path, hint=""):
        super().__init__("data file not found: %s%s" % (path, hint))
        self.path = path


def cache_dir():
    """Ground-truth cache directory, ``$SURROGATE_HMC_CACHE`` if set."""
    root = os.environ.get("SURROGATE_HMC_CACHE")
    if root is None:
        root = Path.home() / ".cache" / "surrogate_hmc"
    return Path(root)


@dataclass
class RunConfig:
    """Everything that determines a run.

    ``lam=None`` means ``1e-4 * s``; ``epsilon=None`` means ``1/sqrt`` of the
    largest Laplace Hessian eigenvalue. ``init`` is ``"map"``, ``"default"``
    (the model's own starting point, e.g. zeros) or an explicit vector.
    ``scale`` multiplies the number of observations used from the dataset.
    """

    model: str = "gaussian"
    model_params: dict = field(default_factory=dict)
    sampler: str = "hmc"
    T: int = 1000
    seed: int = 0
    epsilon: float = 0.1
    L: int = 10
    target_accept: float = 0.8
    warmup: int = 0
    s: int = 100
    lam: float = None
    n_s: float = 200.0
    t0: int = None
    t0_max: int = None
    batch_size: int = 500
    schedule: dict = field(default_factory=lambda: {"kind": "fixed", "epsilon": 1e-4})
    natural_gradient: bool = False
    thin: int = 1
    init: object = "map"
    scale: float = 1.0
    time_budget: float = None

    @classmethod
    def from_dict(cls, record):
        if not isinstance(record, dict):
            raise ConfigError("<root>", "config must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(record) - known)
        if unknown:
            raise ConfigError(unknown[0], "unknown field")
        cfg = cls(**record)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path):
        try:
            with open(path) as fh:
                record = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError("<file>", "not valid JSON: %s" % exc) from None
        return cls.from_dict(record)

    def to_dict(self):
        return asdict(self)

    def resolved_model_params(self):
        if self.model not in MODEL_DEFAULTS:
            raise ConfigError("model", "unknown model %r (choose from %s)"
                              % (self.model, ", ".join(MODEL_DEFAULTS)))
        params = dict(MODEL_DEFAULTS[self.model])
        unknown = sorted(set(self.model_params) - set(params))
        if unknown:
            raise ConfigError("model_params.%s" % unknown[0], "unknown parameter")
        params.update(self.model_params)
        return params

    def validate(self):
        def check(name, ok, msg):
            if not ok:
                raise ConfigError(name, msg)

        self.resolved_model_params()
        check("sampler", self.sampler in SAMPLERS, "must be one of %s" % ", ".join(SAMPLERS))
        for name in ("T", "L", "s", "batch_size", "thin"):
            value = getattr(self, name)
            check(name, isinstance(value, int) and not isinstance(value, bool) and value >= 1,
                  "must be a positive integer")
        check("seed", isinstance(self.seed, int) and self.seed >= 0,
              "must be a non-negative integer")
        check("warmup", isinstance(self.warmup, int) and self.warmup >= 0,
              "must be a non-negative integer")
        check("epsilon", self.epsilon is None or _positive(self.epsilon), "must be positive")
        check("target_accept", _number(self.target_accept) and 0 < self.target_accept < 1,
              "must lie in (0, 1)")
        check("lam", self.lam is None or _positive(self.lam), "must be positive")
        check("n_s", _positive(self.n_s), "must be positive")
        for name in ("t0", "t0_max"):
            value = getattr(self, name)
            check(name, value is None or isinstance(value, int) and value >= 0,
                  "must be a non-negative integer")
        check("scale", _positive(self.scale) and self.scale <= 1, "must lie in (0, 1]")
        check("time_budget", self.time_budget is None or _positive(self.time_budget),
              "must be positive")
        check("init", isinstance(self.init, (list, tuple)) or self.init in ("map", "default"),
              "must be 'map', 'default' or a list of numbers")
        try:
            make_schedule(self.schedule)
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError("schedule", str(exc)) from None


def _number(x):
    return isinstance(x, (int, float)) and not isinstance(x, bool) and math.isfinite(x)


def _positive(x):
    return _number(x) and x > 0


def make_schedule(spec):
    kind = spec.get("kind")
    args = {k: v for k, v in spec.items() if k != "kind"}
    if kind == "fixed":
        return FixedStep(**args)
    if kind == "polynomial":
        return PolynomialStep(**args)
    raise ValueError("schedule kind must be 'fixed' or 'polynomial', got %r" % kind)


def _subsample(n_avail, scale, n_wanted, seed):
    n = n_avail if n_wanted is None else min(int(n_wanted), n_avail)
    n = max(1, int(round(scale * n)))
    if n >= n_avail:
        return np.arange(n_avail)
    return np.sort(np.random.default_rng(seed).choice(n_avail, size=n, replace=False))


def build_model(cfg):
    """Instantiate the target named in ``cfg`` and describe its data.

    Raises
    ------
    DataMissing
        If a data file is named but absent, or none is named and synthetic
        data was not requested.
    """
    p = cfg.resolved_model_params()
    info = {"model": cfg.model, "params": p, "scale": cfg.scale}
    if cfg.model == "gaussian":
        model = GaussianTarget(p["mean"], p["cov"], dim=p["dim"])
    elif cfg.model == "betabin":
        y, n = load_cancer_mortality()
        model = BetaBinomialModel(n, y, transformed=p["transformed"])
        info["source"] = "vendored cancer mortality table (20 cities)"
    elif cfg.model == "probit":
        N = max(1, int(round(cfg.scale * p["N"])))
        X, y, beta = synth_probit(N, p["d"], p["data_seed"], p["prior_var"])
        model = ProbitModel(X, y, p["prior_var"])
        info.update(source="simulated from the model", N=N, beta_true=beta.tolist())
    elif cfg.model == "logistic":
        if p["data"] is not None:
            if not Path(p["data"]).is_file():
                raise DataMissing(p["data"])
            X, y = load_libsvm(p["data"], n_features=123)
            info["source"] = str(p["data"])
        elif p["synthetic"]:
            X, y = synth_adult_like(A9A_ROWS, p["data_seed"])
            info["source"] = "synthetic a9a-like (123 one-hot features)"
        else:
            raise DataMissing("a9a", " (set model_params.data or model_params.synthetic)")
        idx = _subsample(len(y), cfg.scale, p["N"], p["data_seed"] + 1)
        X = add_bias_column(random_project(X[idx], p["project"], p["data_seed"] + 2))
        model = LogisticModel(X, y[idx], p["prior_var"])
        info.update(N=len(idx), dim=model.dim)
    elif cfg.model == "ica":
        if p["data"] is not None:
            if not Path(p["data"]).is_file():
                raise DataMissing(p["data"])
            X = load_matrix(p["data"], center=False)[:, :p["channels"]]
            info["source"] = str(p["data"])
        elif p["synthetic"]:
            X, A = synth_meg_like(MEG_ROWS, p["channels"], p["data_seed"])
            info.update(source="synthetic MEG-like logistic mixture", mixing=A.tolist())
        else:
            raise DataMissing("MEG matrix", " (set model_params.data or model_params.synthetic)")
        idx = _subsample(X.shape[0], cfg.scale, p["N"], p["data_seed"] + 1)
        X = X[idx] - X[idx].mean(axis=0)
        model = IcaModel(X, p["prior_var"])
        info.update(N=len(idx), preprocessing="channels centred, not whitened")
    else:  # pragma: no cover - guarded by validate
        raise ConfigError("model", "unknown model %r" % cfg.model)
    return model, info


def _initial_point(cfg, model, laplace):
    if isinstance(cfg.init, (list, tuple)):
        theta = np.asarray(cfg.init, dtype=float)
        if theta.shape != (model.dim,):
            raise ConfigError("init", "expected %d values, got %d" % (model.dim, theta.size))
        return theta
    if cfg.init == "map":
        return laplace.theta_map.copy()
    return model.default_init()


def execute(cfg, model=None, info=None):
    """Run the configured sampler in memory.

    Returns
    -------
    trace : Trace
    surrogate : Surrogate or None
    details : dict
        Seeds, Laplace summary and sampler metadata for the manifest.
    """
    cfg.validate()
    if model is None:
        model, info = build_model(cfg)
    root = np.random.SeedSequence(cfg.seed)
    basis_seq, chain_seq = root.spawn(2)
    t_start = time.perf_counter()
    laplace = None
    if cfg.sampler == "vhmc" or cfg.init == "map" or cfg.epsilon is None:
        laplace = find_map(model)
    theta0 = _initial_point(cfg, model, laplace)
    epsilon = cfg.epsilon
    if epsilon is None:
        epsilon = 1.0 / math.sqrt(float(np.linalg.eigvalsh(laplace.hessian)[-1]))
    rng = np.random.default_rng(chain_seq)
    hmc = HmcConfig(epsilon=epsilon, L=cfg.L, target_accept=cfg.target_accept,
                    warmup=cfg.warmup)
    surrogate = None
    details = {"seeds": {"master": cfg.seed, "basis_spawn_key": list(basis_seq.spawn_key),
                         "chain_spawn_key": list(chain_seq.spawn_key)},
               "epsilon_initial": epsilon}
    if cfg.sampler == "hmc":
        trace = hmc_run(model, hmc, theta0, rng, cfg.T, thin=cfg.thin,
                        time_budget=cfg.time_budget)
    elif cfg.sampler == "vhmc":
        lam = 1e-4 * cfg.s if cfg.lam is None else cfg.lam
        basis = sample_basis(cfg.s, model.dim, laplace, seed=basis_seq)
        reg = RegularizedSurrogate(Surrogate(basis), laplace, n_s=cfg.n_s)
        trainer = TrainerState.init(cfg.s, lam)
        trace, surrogate = vhmc_run(model, reg, trainer, hmc, rng, cfg.T, theta0=theta0,
                                    t0=cfg.t0, t0_max=cfg.t0_max, thin=cfg.thin,
                                    time_budget=cfg.time_budget)
        details.update(lam=lam, schedule="mu_t = 1 - exp(-t/%g)" % cfg.n_s,
                       n_s=cfg.n_s, t0=trace.meta["t0"])
    else:
        sgld = SgldConfig(batch_size=min(cfg.batch_size, model.n_data),
                          schedule=make_schedule(cfg.schedule),
                          natural_gradient=cfg.natural_gradient)
        trace = sgld_run(model, sgld, theta0, rng, cfg.T, thin=cfg.thin,
                         time_budget=cfg.time_budget)
    details["wall_seconds"] = time.perf_counter() - t_start
    details["sampler_meta"] = _jsonable(trace.meta)
    details["acceptance_rate"] = trace.acceptance_rate
    if laplace is not None:
        details["laplace"] = {"theta_map": laplace.theta_map.tolist(),
                              "jitter": laplace.jitter, "grad_norm": laplace.grad_norm}
    details["data"] = _jsonable(info)
    return trace, surrogate, details


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, float) and not math.isfinite(obj):
        return str(obj)
    return obj


def _sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _environment():
    import scipy

    return {"package": __version__, "python": platform.python_version(),
            "numpy": np.__version__, "scipy": scipy.__version__,
            "platform": platform.platform()}


def run_sample(cfg, out, timing=False):
    """Execute ``cfg`` and write ``trace.csv``, ``manifest.json`` and, for VHMC,
    ``surrogate.json`` under ``out``.

    With ``timing=False`` the trace's ``wall_ms`` column is zero, so repeated
    runs of the same configuration give byte-identical trace files.
    """
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    trace, surrogate, details = execute(cfg)
    trace_path = out / "trace.csv"
    trace.to_csv(trace_path, timing=timing)
    outputs = {"trace": {"file": trace_path.name, "sha256": _sha256(trace_path),
                         "rows": len(trace)}}
    if surrogate is not None:
        sur_path = out / "surrogate.json"
        surrogate.save(sur_path, lam=details["lam"], t=int(trace.meta["training_points"]))
        outputs["surrogate"] = {"file": sur_path.name, "sha256": _sha256(sur_path)}
    manifest = {"format": MANIFEST_FORMAT, "kind": "sample", "config": cfg.to_dict(),
                "run": details, "outputs": outputs, "environment": _environment()}
    write_json(out / "manifest.json", manifest)
    return trace, surrogate, manifest


def write_json(path, record):
    with open(path, "w") as fh:
        json.dump(_jsonable(record), fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# Ground truth
# ---------------------------------------------------------------------------


def reference_truth(cfg, burn=None):
    """Long HMC reference run for ``cfg`` summarised as a :class:`GroundTruth`.

    Results are cached under :func:`cache_dir`, keyed by a hash of the model
    configuration, seed and run length, with a file lock so concurrent
    experiments compute each reference once.
    """
    burn = cfg.warmup if burn is None else burn
    key_src = json.dumps({"model": cfg.model, "params": cfg.resolved_model_params(),
                          "scale": cfg.scale, "seed": cfg.seed, "T": cfg.T, "L": cfg.L,
                          "epsilon": cfg.epsilon, "warmup": cfg.warmup,
                          "target_accept": cfg.target_accept, "burn": burn,
                          "version": 1}, sort_keys=True)
    key = hashlib.sha256(key_src.encode()).hexdigest()[:24]
    root = cache_dir()
    root.mkdir(parents=True, exist_ok=True)
    path = root / ("truth-%s.npz" % key)
    with FileLock(str(path) + ".lock"):
        if path.exists():
            with np.load(path) as data:
                prov = json.loads(str(data["provenance"]))
                return GroundTruth(data["mean"], data["cov"], provenance=prov)
        trace, _, details = execute(cfg)
        samples = trace.after(burn).samples
        truth = GroundTruth.from_samples(samples)
        prov = {"key": key, "config": cfg.to_dict(), "samples": len(samples),
                "ess": ess(samples), "acceptance": trace.after(burn).acceptance_rate,
                "wall_seconds": details["wall_seconds"]}
        truth.provenance = prov
        np.savez(path, mean=truth.mean, cov=truth.cov, provenance=json.dumps(_jsonable(prov)))
        return truth


# ---------------------------------------------------------------------------
# Experiments
# ---------------------------------------------------------------------------

METRIC_FIELDS = ("metric", "t_or_s", "value", "seed", "method", "setting")


def write_metrics(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRIC_FIELDS)
        for r in rows:
            w.writerow([r[k] for k in METRIC_FIELDS])


def _row(metric, t_or_s, value, seed, method, setting=""):
    return {"metric": metric, "t_or_s": t_or_s, "value": float(value), "seed": seed,
            "method": method, "setting": setting}


def _map_jobs(fn, jobs, workers):
    if workers <= 1:
        return [fn(*job) for job in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, *zip(*jobs)))


def _finish(out, name, rows, settings, extra=None):
    if out is not None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        write_metrics(out / "metrics.csv", rows)
        manifest = {"format": MANIFEST_FORMAT, "kind": "experiment", "experiment": name,
                    "settings": settings, "environment": _environment(),
                    "ess_truncation": "Geyer initial positive sequence"}
        manifest.update(extra or {})
        manifest["outputs"] = {"metrics": {"file": "metrics.csv",
                                           "sha256": _sha256(out / "metrics.csv")}}
        write_json(out / "manifest.json", manifest)
    return rows


BETABIN_GRID = ([(-8.5, -5.5), (4.0, 12.0)], 301)


def betabin_config(s, seed, T=3000, lam=1.0):
    """VHMC settings used for the beta-binomial surrogate-quality sweep."""
    return RunConfig(model="betabin", sampler="vhmc", T=T, seed=seed, epsilon=0.25, L=8,
                     target_accept=0.85, warmup=min(1000, T // 3), s=s, lam=lam, n_s=200.0)


def betabin_grid():
    model, _ = build_model(RunConfig(model="betabin"))
    bounds, n = BETABIN_GRID
    grid, log_p = fit_grid(lambda pts: -model.potential_many(pts), bounds, n)
    return grid, log_p


def _betabin_job(s, seed, T, lam, grid_bounds, grid_shape, log_p):
    cfg = betabin_config(s, seed, T, lam)
    trace, surrogate, details = execute(cfg)
    grid = Grid(*[np.linspace(lo, hi, n) for (lo, hi), n in zip(grid_bounds, grid_shape)])
    log_q = -surrogate.value(grid.points()).reshape(grid.shape)
    kl = grid_kl(log_p, log_q, grid)
    sm = grid_sm(log_p, log_q, grid)
    warm = trace.after(cfg.warmup)
    return s, seed, kl, sm, warm.acceptance_rate, details["t0"]


def experiment_betabin(out=None, seed=0, scale=1.0, s_values=(3, 5, 10, 20), n_seeds=5,
                       T=3000, lam=1.0, workers=1):
    """Surrogate quality versus number of hidden nodes (KL and score distance).

    The exact posterior is tabulated on an automatically widened grid; each
    (s, seed) pair trains a VHMC surrogate and is scored against it.
    """
    T = max(10, int(round(scale * T)))
    grid, log_p = betabin_grid()
    jobs = [(s, seed + k, T, lam, grid.bounds, grid.shape, log_p)
            for s in s_values for k in range(n_seeds)]
    rows = []
    for s, sd, kl, sm, acc, t0 in _map_jobs(_betabin_job, jobs, workers):
        rows += [_row("kl", s, kl, sd, "vhmc", "lam=%g" % lam),
                 _row("sm", s, sm, sd, "vhmc", "lam=%g" % lam),
                 _row("acceptance", s, acc, sd, "vhmc", "lam=%g" % lam),
                 _row("t0", s, t0, sd, "vhmc", "lam=%g" % lam)]
    settings = {"s_values": list(s_values), "seeds": [seed + k for k in range(n_seeds)],
                "T": T, "lam": lam, "grid_bounds": grid.bounds, "grid_shape": grid.shape,
                "config_template": betabin_config(s_values[0], seed, T, lam).to_dict()}
    return _finish(out, "betabin", rows, settings)


def summarize(rows, metric, key="t_or_s", method=None):
    """Median of ``metric`` over seeds, grouped by ``key``."""
    groups = {}
    for r in rows:
        if r["metric"] == metric and (method is None or r["method"] == method):
            groups.setdefault(r[key], []).append(r["value"])
    return {k: float(np.median(v)) for k, v in groups.items()}


def probit_configs(seed, scale=1.0, T=3000):
    # lam = 100: with the fast ramp the surrogate takes over after ~20 training
    # points, and a weak ridge lets it extrapolate badly enough to stall the chain
    vhmc = RunConfig(model="probit", sampler="vhmc", T=T, seed=seed, epsilon=0.05, L=10,
                     target_accept=0.7, warmup=min(500, T // 3), s=100, lam=100.0,
                     n_s=5.0, init="default", scale=scale)
    hmc = RunConfig(**{**vhmc.to_dict(), "sampler": "hmc"})
    return {"vhmc": vhmc, "hmc": hmc}


def experiment_probit(out=None, seed=0, scale=1.0, T=3000, n_seeds=1, checkpoints=30):
    """RMSE of the running posterior mean against the generating parameter,
    as a function of the number of full-data gradient evaluations."""
    rows = []
    for k in range(n_seeds):
        for method, cfg in probit_configs(seed + k, scale, T).items():
            model, info = build_model(cfg)
            beta = np.asarray(info["beta_true"])
            trace, _, details = execute(cfg, model, info)
            means = np.cumsum(trace.samples, axis=0) / np.arange(1, len(trace) + 1)[:, None]
            marks = np.unique(np.linspace(0, len(trace) - 1, checkpoints).astype(int))
            for i in marks:
                rows.append(_row("rmse", float(trace.grad_evals[i]),
                                 rmse_to_truth(means[i], beta), cfg.seed, method))
            warm = trace.after(cfg.warmup)
            rows.append(_row("acceptance", len(trace), warm.acceptance_rate, cfg.seed, method))
    settings = {"configs": {m: c.to_dict() for m, c in probit_configs(seed, scale, T).items()},
                "n_seeds": n_seeds}
    return _finish(out, "probit", rows, settings)


LOGISTIC_L_HMC = (50, 40, 30, 20, 10, 5, 1)
LOGISTIC_L_VHMC = (50, 40, 30, 20, 10, 5)
LOGISTIC_SGLD_EPS = (2e-3, 1e-3, 5e-4, 1e-4, 5e-5, 1e-5)
LOGISTIC_DESK_N = 5000


def logistic_configs(seed, data=None, synthetic=False, scale=None, budget=120.0,
                     ref_T=50000):
    """Base, reference and per-method configurations for the logistic study.

    ``scale=None`` selects the desk-scale subsample of 5000 observations.
    """
    params = {"data": data, "synthetic": synthetic}
    if scale is None:
        params["N"] = LOGISTIC_DESK_N
        scale = 1.0
    hmc = RunConfig(model="logistic", model_params=params, sampler="hmc", T=10**9, seed=seed,
                    epsilon=0.02, L=40, target_accept=0.7, warmup=500, scale=scale,
                    time_budget=budget)
    ref = RunConfig(**{**hmc.to_dict(), "T": ref_T + 1000, "warmup": 1000,
                       "time_budget": None, "seed": 10**6 + seed})
    vhmc = RunConfig(**{**hmc.to_dict(), "sampler": "vhmc", "s": 2000, "n_s": 500.0})
    sgld = RunConfig(**{**hmc.to_dict(), "sampler": "sgld", "batch_size": 500})
    return {"reference": ref, "hmc": hmc, "vhmc": vhmc, "sgld": sgld}


def _rem_rows(trace, truth, seed, method, setting, budget):
    rows = []
    samples = trace.samples
    if len(samples) < 2 or not np.all(np.isfinite(samples)):
        return [_row("rem", budget, np.inf, seed, method, setting),
                _row("rec", budget, np.inf, seed, method, setting)]
    rem, rec = rem_rec(samples, truth, at=[len(samples)])
    rows.append(_row("rem", budget, rem[0], seed, method, setting))
    rows.append(_row("rec", budget, rec[0], seed, method, setting))
    try:
        rows.append(_row("ess_per_second", budget, ess(samples) / trace.elapsed[-1],
                         seed, method, setting))
    except ValueError:
        rows.append(_row("ess_per_second", budget, 0.0, seed, method, setting))
    rows.append(_row("samples", budget, len(samples), seed, method, setting))
    return rows


def experiment_logistic(out=None, seed=0, data=None, synthetic=False, scale=None,
                        budget=120.0, ref_T=50000, hmc_L=LOGISTIC_L_HMC,
                        vhmc_L=LOGISTIC_L_VHMC, sgld_eps=LOGISTIC_SGLD_EPS):
    """Relative error of mean and covariance after a fixed wall-clock budget.

    Every method starts at the MAP. The reference moments come from a long
    HMC run (cached).
    """
    cfgs = logistic_configs(seed, data, synthetic, scale, budget, ref_T)
    build_model(cfgs["reference"])  # fail fast on missing data
    truth = reference_truth(cfgs["reference"])
    rows = []
    for L in hmc_L:
        cfg = RunConfig(**{**cfgs["hmc"].to_dict(), "L": L})
        trace, _, _ = execute(cfg)
        rows += _rem_rows(trace, truth, seed, "hmc", "L=%d" % L, budget)
    for L in vhmc_L:
        cfg = RunConfig(**{**cfgs["vhmc"].to_dict(), "L": L})
        trace, _, details = execute(cfg)
        rows += _rem_rows(trace, truth, seed, "vhmc", "L=%d" % L, budget)
        rows.append(_row("t0", budget, details["t0"], seed, "vhmc", "L=%d" % L))
    for eps in sgld_eps:
        cfg = RunConfig(**{**cfgs["sgld"].to_dict(),
                           "schedule": {"kind": "fixed", "epsilon": eps}})
        trace, _, _ = execute(cfg)
        rows += _rem_rows(trace, truth, seed, "sgld", "eps=%g" % eps, budget)
    settings = {"configs": {m: c.to_dict() for m, c in cfgs.items()},
                "hmc_L": list(hmc_L), "vhmc_L": list(vhmc_L), "sgld_eps": list(sgld_eps),
                "reference": truth.provenance}
    return _finish(out, "logistic", rows, settings)


ICA_DESK_N = 2000


def ica_configs(seed, data=None, synthetic=False, scale=None, budget=60.0, ref_T=10000):
    params = {"data": data, "synthetic": synthetic}
    if scale is None:
        params["N"] = ICA_DESK_N
        scale = 1.0
    hmc = RunConfig(model="ica", model_params=params, sampler="hmc", T=10**9, seed=seed,
                    epsilon=None, L=40, target_accept=0.7, warmup=200, scale=scale,
                    time_budget=budget)
    ref = RunConfig(**{**hmc.to_dict(), "T": ref_T + 1000, "warmup": 1000,
                       "time_budget": None, "seed": 10**6})
    vhmc = RunConfig(**{**hmc.to_dict(), "sampler": "vhmc", "s": 1000, "n_s": 2000.0})
    sgld = RunConfig(**{**hmc.to_dict(), "sampler": "sgld", "batch_size": 500,
                        "natural_gradient": True,
                        "schedule": {"kind": "polynomial", "a": 5e-3, "b": 1e4,
                                     "delta": 0.5}})
    return {"reference": ref, "hmc": hmc, "vhmc": vhmc, "sgld": sgld}


def amari_curve(trace, W0, d, times):
    """Amari distance of the running mean at each wall-clock time in ``times``."""
    out = []
    if len(trace) == 0:
        return [np.inf] * len(times)
    means = np.cumsum(trace.samples, axis=0) / np.arange(1, len(trace) + 1)[:, None]
    for t in times:
        i = np.searchsorted(trace.elapsed, t, side="right") - 1
        if i < 0 or not np.all(np.isfinite(means[i])):
            out.append(np.inf)
        else:
            out.append(amari_distance(means[i].reshape(d, d), W0))
    return out


def experiment_ica(out=None, seed=0, n_seeds=3, data=None, synthetic=False, scale=None,
                   budget=60.0, ref_T=10000, methods=("hmc", "sgld", "vhmc"),
                   checkpoints=12):
    """Amari distance of the running posterior mean versus runtime."""
    cfgs = ica_configs(seed, data, synthetic, scale, budget, ref_T)
    model, _ = build_model(cfgs["reference"])
    d = model.d
    truth = reference_truth(cfgs["reference"])
    W0 = truth.mean.reshape(d, d)
    times = np.linspace(budget / checkpoints, budget, checkpoints)
    rows = []
    for k in range(n_seeds):
        for method in methods:
            cfg = RunConfig(**{**cfgs[method].to_dict(), "seed": seed + k})
            trace, _, details = execute(cfg, model)
            # checkpoints are on the run's own clock, which starts after setup
            for t, a in zip(times, amari_curve(trace, W0, d, times)):
                rows.append(_row("amari", float(t), a, seed + k, method))
            if method == "vhmc":
                rows.append(_row("t0", budget, details["t0"], seed + k, method))
    settings = {"configs": {m: c.to_dict() for m, c in cfgs.items()}, "n_seeds": n_seeds,
                "reference": truth.provenance}
    return _finish(out, "ica", rows, settings)


EXPERIMENTS = {
    "betabin": experiment_betabin,
    "probit": experiment_probit,
    "logistic": experiment_logistic,
    "ica": experiment_ica,
}
