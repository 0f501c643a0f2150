"""The VEM driver: joint maximization of the summed ELBO over theta and every
subject's variational parameters, followed by finishing log-likelihood
evaluations.

Three variants are available:

``deterministic``
    fixed (whitened) draws, L-BFGS.
``stochastic``
    fresh draws every iteration, Adam.
``stochastic_minibatch``
    as ``stochastic`` but each iteration sees ``s`` percent of the subjects,
    with the objective scaled by ``100/s``.  Use the result as the starting
    point of a deterministic fit (:func:`warm_start`).
"""

from __future__ import annotations

import copy
import json
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Optional

import numpy as np

from . import __version__
from .data import check_subjects
from .elbo import DETERMINISTIC, STOCHASTIC, ElboConfig, ElboProblem, _merge_steps
from .errors import ConfigError
from .marginal import JointBatch, LoglikReport, find_modes, is_population, laplace_population
from .optim import AdamConfig, IterationTrace, LbfgsConfig, maximize_adam, maximize_lbfgs
from .subject import make_batches
from .variational import VariationalState, lower_pairs

VARIANTS = ("deterministic", "stochastic", "stochastic_minibatch")
KAPPA_INIT_METHODS = ("prior", "laplace")


@dataclass
class FinishConfig:
    """Post-fit log-likelihood evaluations."""

    elbo: bool = True
    importance_sampling: bool = True
    laplace: bool = True
    is_samples: int = 1000

    def __post_init__(self):
        if self.is_samples < 1:
            raise ConfigError("is_samples must be >= 1")


@dataclass
class FitConfig:
    variant: str = "deterministic"
    elbo: ElboConfig = field(default_factory=ElboConfig)
    lbfgs: LbfgsConfig = field(default_factory=LbfgsConfig)
    adam: AdamConfig = field(default_factory=AdamConfig)
    finish: FinishConfig = field(default_factory=FinishConfig)
    theta_init: Optional[list] = None
    kappa_init: Optional[list] = None  # list of VariationalState
    kappa_init_method: str = "laplace"
    ad_mode: str = "auto"
    threads: Optional[int] = None

    def __post_init__(self):
        if self.kappa_init_method not in KAPPA_INIT_METHODS:
            raise ConfigError(f"kappa_init_method must be one of {KAPPA_INIT_METHODS}, got {self.kappa_init_method!r}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.ad_mode not in ("auto", "forward", "reverse"):
            raise ConfigError(f"ad_mode must be auto, forward or reverse, got {self.ad_mode!r}")
        if self.variant == "deterministic":
            if self.elbo.mode != DETERMINISTIC:
                raise ConfigError("the deterministic variant requires deterministic_presampled draws")
            if self.elbo.minibatch_percent != 100:
                raise ConfigError("mini-batching requires the stochastic_minibatch variant")
        else:
            if self.elbo.mode != STOCHASTIC:
                raise ConfigError(f"the {self.variant} variant requires stochastic_resample draws")
            if self.variant == "stochastic" and self.elbo.minibatch_percent != 100:
                raise ConfigError("mini-batching requires the stochastic_minibatch variant")
        if self.threads is not None and self.threads < 1:
            raise ConfigError("threads must be >= 1")

    @property
    def seed(self):
        return self.elbo.seed

    @classmethod
    def for_variant(cls, variant="deterministic", **kwargs):
        """Config with the draw mode matching ``variant``; ``elbo`` options may be given as a dict."""
        elbo = kwargs.pop("elbo", {})
        if isinstance(elbo, dict):
            elbo = dict(elbo)
            elbo.setdefault("mode", DETERMINISTIC if variant == "deterministic" else STOCHASTIC)
            elbo = ElboConfig(**elbo)
        return cls(variant=variant, elbo=elbo, **kwargs)

    def to_dict(self):
        d = {
            "variant": self.variant,
            "elbo": asdict(self.elbo),
            "lbfgs": asdict(self.lbfgs),
            "adam": asdict(self.adam),
            "finish": asdict(self.finish),
            "theta_init": None if self.theta_init is None else [float(v) for v in self.theta_init],
            "kappa_init": None if self.kappa_init is None else [s.to_dict() for s in self.kappa_init],
            "kappa_init_method": self.kappa_init_method,
            "ad_mode": self.ad_mode,
        }
        return d


@dataclass
class FitResult:
    model_name: str
    model_options: dict
    theta_names: list
    theta: np.ndarray
    states: list
    subject_ids: list
    trace: IterationTrace
    termination: str
    loglik: dict
    meta: dict

    @property
    def theta_dict(self):
        return {k: float(v) for k, v in zip(self.theta_names, self.theta)}

    @property
    def elbo(self):
        rep = self.loglik.get("elbo")
        return None if rep is None else rep.total

    def to_dict(self):
        return {
            "theta": self.theta_dict,
            "subjects": [
                {"id": sid, **st.to_dict()} for sid, st in zip(self.subject_ids, self.states)
            ],
            "trace": {k: v for k, v in self.trace.to_dict().items() if k != "wall_time"},
            "loglik": {k: v.to_dict() for k, v in self.loglik.items()},
            "meta": {**self.meta, "model": {"name": self.model_name, "options": self.model_options},
                     "termination": self.termination},  # fmt: skip
        }

    def to_json(self, **kwargs):
        return json.dumps(self.to_dict(), indent=2, **kwargs)

    @classmethod
    def from_dict(cls, d):
        try:
            meta = dict(d["meta"])
            model = meta.pop("model")
            termination = meta.pop("termination", "")
            loglik = {}
            for k, v in d.get("loglik", {}).items():
                loglik[k] = LoglikReport(v["method"], v["per_subject"], v.get("settings", {}), v.get("mc_se"),
                                         v.get("subject_ids"))  # fmt: skip
            return cls(
                model_name=model["name"],
                model_options=model.get("options", {}),
                theta_names=list(d["theta"]),
                theta=np.array([float(v) for v in d["theta"].values()]),
                states=[VariationalState.from_dict(s) for s in d["subjects"]],
                subject_ids=[str(s["id"]) for s in d["subjects"]],
                trace=IterationTrace.from_dict(
                    {**d.get("trace", {}), "wall_time": meta.get("timing", {}).get("iteration_wall_time", [])}
                ),
                termination=termination,
                loglik=loglik,
                meta=meta,
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"malformed fit result: {exc}") from None

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


def _objective(problem, config):
    """Callbacks for the configured optimizer."""
    if config.variant == "deterministic":
        return lambda x: problem.value_and_grad(x)
    if config.variant == "stochastic":
        return lambda x, k: problem.value_and_grad(x, iteration=k)
    per_epoch = problem.batches_per_epoch

    def f(x, k):
        subset = problem.minibatch(k // per_epoch, k % per_epoch)
        return problem.value_and_grad(x, subset=subset, iteration=k)

    return f


def _prior_frame(model, theta):
    m, _ = model.prior_moments(theta)
    C = np.array([[float(v) for v in row] for row in model.prior_chol(theta)])
    return np.array([float(v) for v in m]), C


def _kappa_for_frame(model, theta, z_means, z_chols, dense):
    """Standardized-space kappa of effects fixed at ``z_means``/``z_chols`` in the prior's frame."""
    m, C = _prior_frame(model, theta)
    r = len(m)
    out = []
    for zm, Lz in zip(z_means, z_chols):
        mu = np.linalg.solve(C, zm - m)
        Lu = np.linalg.solve(C, Lz)
        raw = list(np.log(np.abs(np.diag(Lu))))
        if dense:
            raw += [Lu[a, c] for a, c in lower_pairs(r)]
        out.append(np.concatenate([mu, raw]))
    return np.array(out)


class LaplaceFrame:
    """Linear change of variables ``x = x0 + P z`` used as an optimizer preconditioner.

    For a subject whose starting state has Cholesky factor ``L0`` the
    ``mu`` block of ``P`` is ``L0`` and each strict-lower scale entry
    ``(i, j)`` is scaled by ``L0[i, i]``; log-diagonal entries are left
    alone.  With ``L0`` taken from the Laplace approximation the optimizer
    sees curvature of order one in ``kappa`` instead of the posterior
    precision (which can exceed 1e6 when residual errors are small).

    The theta columns of ``P`` also move every ``kappa`` so that the
    approximations stay put on the unstandardized scale to first order.
    Without this a change in a prior mean or variance drags all subject
    means along, which couples theta to every ``kappa``.  Finally
    :meth:`scale_theta` whitens the theta block with its own curvature.
    Objective values are unchanged; only the coordinates move.
    """

    def __init__(self, problem, x0, states, h=1e-6):
        self.n = problem.n_theta
        self.x0 = np.array(x0, dtype=float)
        r, dk, N = problem.r, problem.dk, problem.N
        blocks = np.zeros((N, dk, dk))
        for i, st in enumerate(states):
            L0 = st.chol()
            blocks[i, :r, :r] = L0
            for k in range(r):
                blocks[i, r + k, r + k] = 1.0
            if st.dense:
                for q, (a, _) in enumerate(lower_pairs(r)):
                    blocks[i, 2 * r + q, 2 * r + q] = L0[a, a]
        self.blocks = blocks
        self.theta_scale = np.eye(self.n)

        model, dense = problem.model, problem.config.dense
        theta0, _ = problem.unpack(self.x0)
        m, C = _prior_frame(model, theta0)
        z_means = [m + C @ st.mu for st in states]
        z_chols = [C @ st.chol() for st in states]
        tu0 = self.x0[: self.n]
        tmap = model.theta_map
        J = np.zeros((N, dk, self.n))
        for j in range(self.n):
            cols = []
            for sgn in (1.0, -1.0):
                tu = tu0.copy()
                tu[j] += sgn * h
                theta = np.asarray(tmap.to_constrained(tu), dtype=float)
                cols.append(_kappa_for_frame(model, theta, z_means, z_chols, dense))
            J[:, :, j] = (cols[0] - cols[1]) / (2 * h)
        self.coupling = J

    def scale_theta(self, fun, h=1e-4, floor=1.0):
        """Set the theta block to ``A^(-1/2)`` with ``A`` the negated theta-theta
        Hessian of ``fun`` in the current frame (central differences of the
        gradient; eigenvalues below ``floor`` are raised to it)."""
        n = self.n
        H = np.zeros((n, n))
        for j in range(n):
            z = np.zeros(self.x0.size)
            gs = []
            for sgn in (1.0, -1.0):
                z[j] = sgn * h
                _, g = fun(self.to_x(z))
                if g is None:
                    return
                gs.append(self.pull_grad(g)[:n])
            H[:, j] = (gs[0] - gs[1]) / (2 * h)
        A = -0.5 * (H + H.T)
        lam, V = np.linalg.eigh(A)
        lam = np.maximum(np.abs(lam), floor)
        self.theta_scale = self.theta_scale @ (V / np.sqrt(lam)) @ V.T

    def to_x(self, z):
        z = np.asarray(z, dtype=float)
        zt = self.theta_scale @ z[: self.n]
        kz = z[self.n :].reshape(self.blocks.shape[0], -1)
        dx = np.einsum("nij,nj->ni", self.blocks, kz) + self.coupling @ zt
        return self.x0 + np.concatenate([zt, dx.ravel()])

    def pull_grad(self, g):
        if g is None:
            return None
        g = np.asarray(g, dtype=float)
        kg = g[self.n :].reshape(self.blocks.shape[0], -1)
        gt = self.theta_scale.T @ (g[: self.n] + np.einsum("nkj,nk->j", self.coupling, kg))
        return np.concatenate([gt, np.einsum("nji,nj->ni", self.blocks, kg).ravel()])

    def wrap(self, fun, stochastic):
        if stochastic:
            def f(z, k):
                v, g = fun(self.to_x(z), k)
                return v, self.pull_grad(g)
        else:
            def f(z):
                v, g = fun(self.to_x(z))
                return v, self.pull_grad(g)
        return f


def fit(model, subjects, config: FitConfig | None = None, verbose=None):
    """Fit ``model`` to ``subjects``.

    ``verbose`` is an optional callable receiving one summary line per
    iteration.
    """
    config = config or FitConfig()
    subjects = list(subjects)
    if not subjects:
        raise ConfigError("at least one subject is required")
    check_subjects(model, subjects)
    t_start = time.perf_counter()
    theta0 = model.theta_init if config.theta_init is None else np.asarray(config.theta_init, dtype=float)
    if len(theta0) != model.n_theta:
        raise ConfigError(f"theta_init has {len(theta0)} entries; model {model.name} has {model.n_theta}")
    problem = ElboProblem(model, subjects, config.elbo, theta_init=theta0, ad_mode=config.ad_mode,
                          threads=config.threads)  # fmt: skip
    if config.kappa_init is not None and len(config.kappa_init) != len(subjects):
        raise ConfigError("kappa_init must hold one state per subject")
    kappa0 = config.kappa_init
    if kappa0 is None and config.kappa_init_method == "laplace":
        kappa0 = laplace_kappa(model, subjects, theta0, config.elbo.dense, problem.subject_steps)
    x0 = problem.initial_point(theta0, kappa0)
    frame = None
    if config.kappa_init is None and config.kappa_init_method == "laplace":
        frame = LaplaceFrame(problem, x0, kappa0)
        frame.scale_theta(problem.value_and_grad)
    t_setup = time.perf_counter() - t_start

    cb = None
    if verbose is not None:
        def cb(k, x, f, gnorm):
            verbose(f"iter {k:5d}  objective {f:.10g}  |grad| {gnorm:.3e}  time {time.perf_counter() - t_start:.2f}s")

    fun = _objective(problem, config)
    stochastic = config.variant != "deterministic"
    start = x0
    if frame is not None:
        fun = frame.wrap(fun, stochastic)
        start = np.zeros_like(x0)
    t0 = time.perf_counter()
    if not stochastic:
        x, trace, reason = maximize_lbfgs(fun, start, config.lbfgs, callback=cb)
    else:
        x, trace = maximize_adam(fun, start, config.adam, callback=cb)
        reason = "max_iter"
    if frame is not None:
        x = frame.to_x(x)
    t_opt = time.perf_counter() - t0
    theta, states = problem.unpack(x)

    # finishing evaluations
    t0 = time.perf_counter()
    loglik = finishing_logliks(model, subjects, theta, states, config, problem)
    t_finish = time.perf_counter() - t0

    meta = {
        "version": __version__,
        "variant": config.variant,
        "config": config.to_dict(),
        "ad_mode": problem.ad_mode,
        "seed": config.elbo.seed,
        "draws": {
            "M": config.elbo.M,
            "mode": config.elbo.mode,
            "whiten": bool(config.elbo.whiten and config.elbo.mode == DETERMINISTIC),
            "stream": "Philox keyed by (seed, subject index, iteration)",
        },
        "minibatch": {
            "percent": config.elbo.minibatch_percent,
            "size": problem.minibatch_size,
            "sampling": "without replacement within an epoch, remainder dropped",
        },
        "step_schedules": [s if isinstance(s, int) or s is None else list(s) for s in problem.subject_steps],
        "theta_init": [float(v) for v in theta0],
        # gradient norms in the trace are measured in the optimizer's coordinates
        "preconditioner": None if frame is None else "laplace",
        "iterations": max(0, len(trace) - 1) if config.variant == "deterministic" else len(trace),
        # everything that varies between identical runs lives under "timing"
        "timing": {"setup_s": t_setup, "optimize_s": t_opt, "finish_s": t_finish,
                   "total_s": time.perf_counter() - t_start, "threads": problem.threads,
                   "iteration_wall_time": list(trace.wall_time)},  # fmt: skip
    }
    return FitResult(model.name, model.options, list(model.theta_names), theta, states,
                     [s.id for s in subjects], trace, reason, loglik, meta)  # fmt: skip


def elbo_report(problem, theta, states, ids):
    """Per-subject ELBO at the problem's iteration-0 draws (the draws used by a deterministic fit)."""
    x = problem.pack(theta, states)
    vals = problem.subject_values(x, iteration=0)
    cfg = problem.config
    settings = {"M": cfg.M, "seed": cfg.seed, "whiten": bool(cfg.whiten), "iteration": 0}
    return LoglikReport("elbo", vals, settings, subject_ids=list(ids))


def finishing_logliks(model, subjects, theta, states, config: FitConfig, problem=None):
    """ELBO, importance-sampling and Laplace log-likelihoods at ``theta``."""
    fin = config.finish
    ids = [s.id for s in subjects]
    out = {}
    if fin.elbo:
        if problem is None or problem.config.mode != DETERMINISTIC:
            ecfg = copy.copy(config.elbo)
            ecfg.mode = DETERMINISTIC
            ecfg.minibatch_percent = 100.0
            steps = None if problem is None else problem.subject_steps
            problem = ElboProblem(model, subjects, ecfg, theta_init=theta, ad_mode="forward",
                                  threads=config.threads, steps=steps)  # fmt: skip
        out["elbo"] = elbo_report(problem, theta, states, ids)
    steps = None if problem is None else problem.subject_steps
    if fin.importance_sampling:
        vals, ses = is_population(model, subjects, theta, states, fin.is_samples, config.elbo.seed, steps)
        out["is"] = LoglikReport("is", vals, {"samples": fin.is_samples, "seed": config.elbo.seed,
                                              "proposal": "fitted variational distribution"},
                                 mc_se=list(ses), subject_ids=ids)  # fmt: skip
    if fin.laplace:
        init = np.array([s.mu for s in states])
        vals, _, conv = laplace_population(model, subjects, theta, init, steps=steps)
        out["laplace"] = LoglikReport("laplace", vals, {"init": "variational modes",
                                                        "converged": [bool(c) for c in conv]},
                                      subject_ids=ids)  # fmt: skip
    return out


def laplace_kappa(model, subjects, theta, dense=False, steps=None, max_batch=64):
    """Variational states matching each subject's Laplace approximation.

    ``mu`` is the posterior mode in standardized space.  Dense states take
    the Cholesky factor of ``(-H)^-1``; diagonal ones take the KL-optimal
    diagonal variances ``1 / diag(-H)``.  A subject whose Hessian cannot be
    made positive definite keeps the prior state.
    """
    theta = np.asarray(theta, dtype=float)
    r = model.n_eta
    out = [None] * len(subjects)
    for b in make_batches(subjects, 1, max_batch):
        idx = list(b.indices)
        st = None if steps is None else _merge_steps([steps[i] for i in idx])
        joint = JointBatch(model, [subjects[i] for i in idx], theta, st)
        mode = find_modes(joint)
        for j, i in enumerate(idx):
            negH = -mode.hess[j]
            state = VariationalState.initial(r, dense)
            if np.isfinite(mode.value[j]) and np.all(np.isfinite(negH)):
                try:
                    if dense:
                        L = np.linalg.cholesky(np.linalg.inv(negH))
                        raw = [np.log(L[k, k]) for k in range(r)]
                        raw += [L[a, c] for a in range(1, r) for c in range(a)]
                    else:
                        np.linalg.cholesky(negH)
                        raw = -0.5 * np.log(np.diag(negH))
                    state = VariationalState(mode.u[j], raw, dense)
                except (np.linalg.LinAlgError, ValueError):
                    pass
            out[i] = state
    return out


def warm_start(result: FitResult, base: FitConfig | None = None) -> FitConfig:
    """Deterministic finishing config initialised at ``result``'s estimates."""
    if result is None or len(result.trace) == 0:
        raise ConfigError("warm start needs a completed fit with a non-empty trace")
    base = base or FitConfig()
    if base.variant != "deterministic":
        raise ConfigError(f"warm starts produce deterministic fits, base config has variant {base.variant!r}")
    states = [VariationalState(s.mu.copy(), s.scale_raw.copy(), s.dense) for s in result.states]
    if any(s.dense != base.elbo.dense for s in states):
        raise ConfigError("variational family (diagonal/dense) differs between source result and base config")
    cfg = copy.deepcopy(base)
    cfg.theta_init = [float(v) for v in result.theta]
    cfg.kappa_init = states
    return cfg


@dataclass
class EbeResult:
    eta: np.ndarray  # (N, r) constrained scale
    u: np.ndarray  # (N, r) standardized scale
    converged: np.ndarray
    iterations: np.ndarray


def compute_ebes(model, subjects, theta, states=None, max_batch=64, steps=None):
    """Empirical Bayes estimates: per-subject modes of ``p(y_i, eta_i | theta)``.

    Newton iterations in the standardized space start at each subject's
    variational mean (the prior mean when ``states`` is None) and the
    maximizers are returned on the constrained scale.
    """
    theta = np.asarray(theta, dtype=float)
    N, r = len(subjects), model.n_eta
    u = np.zeros((N, r))
    conv = np.zeros(N, dtype=bool)
    iters = np.zeros(N, dtype=int)
    init = np.zeros((N, r)) if states is None else np.array([s.mu for s in states])
    for b in make_batches(subjects, 1, max_batch):
        idx = list(b.indices)
        st = None if steps is None else _merge_steps([steps[i] for i in idx])
        joint = JointBatch(model, [subjects[i] for i in idx], theta, st)
        # no Newton-decrement stop: the location matters here, not just the value
        mode = find_modes(joint, init[idx], dtol=0.0)
        u[idx] = mode.u
        conv[idx] = mode.converged
        iters[idx] = mode.iterations
    eta = model.transform_eta([u[:, k] for k in range(r)], theta)
    eta = np.stack([np.asarray(e, dtype=float) * np.ones(N) for e in eta], axis=1)
    return EbeResult(eta, u, conv, iters)


def config_fields():
    """Names of the configurable sections (used by the CLI validator)."""
    return {f.name for f in fields(FitConfig)}


__all__ = [
    "VARIANTS",
    "EbeResult",
    "FinishConfig",
    "FitConfig",
    "FitResult",
    "compute_ebes",
    "finishing_logliks",
    "fit",
    "warm_start",
]
