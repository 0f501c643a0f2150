"""Command-line interface: ``nlmevem {fit,simulate,loglik,ebe}``.

Exit codes: 0 on success, 2 on usage or data errors, 3 on numerical
failures.  ``NLMEVEM_SEED`` supplies the seed when neither ``--seed`` nor
the config file sets one.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import fields

import numpy as np

from .data import check_subjects, read_csv, simulate_population, write_csv
from .elbo import DETERMINISTIC, ElboConfig, ElboProblem
from .errors import (
    CatalogError,
    ConfigError,
    DataError,
    ModelShapeError,
    NlmeError,
    UnsupportedDimensionError,
)
from .fit import FinishConfig, FitConfig, FitResult, compute_ebes, fit
from .marginal import LoglikReport, is_population, laplace_population, loglik_gh
from .models import catalog_lookup
from .optim import AdamConfig, LbfgsConfig

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3

_SECTIONS = {"elbo": ElboConfig, "lbfgs": LbfgsConfig, "adam": AdamConfig, "finish": FinishConfig}
_TOP = {"model", "model_options", "variant", "theta_init", "kappa_init_method", "ad_mode", "threads"}


class UsageError(NlmeError):
    pass


def _check_keys(cfg):
    if not isinstance(cfg, dict):
        raise ConfigError("config: top level must be a JSON object")
    for key, value in cfg.items():
        if key in _SECTIONS:
            if not isinstance(value, dict):
                raise ConfigError(f"config.{key}: must be an object")
            allowed = {f.name for f in fields(_SECTIONS[key])}
            for sub in value:
                if sub not in allowed:
                    raise ConfigError(f"config.{key}.{sub}: unknown key (allowed: {', '.join(sorted(allowed))})")
        elif key not in _TOP:
            raise ConfigError(f"config.{key}: unknown key")


def resolve_seed(cli_seed, cfg_seed=None):
    """``--seed`` wins, then the config file, then ``NLMEVEM_SEED``, then 0."""
    if cli_seed is not None:
        return int(cli_seed)
    if cfg_seed is not None:
        return int(cfg_seed)
    env = os.environ.get("NLMEVEM_SEED")
    if env not in (None, ""):
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"NLMEVEM_SEED must be an integer, got {env!r}") from None
    return 0


def _theta_vector(model, spec, what):
    """Theta from a dict (name -> value, missing names keep their defaults) or a full list."""
    theta = np.array(model.theta_init, dtype=float)
    if spec is None:
        return theta
    if isinstance(spec, dict) and "theta" in spec and isinstance(spec["theta"], dict):
        spec = spec["theta"]
    if isinstance(spec, dict):
        for k, v in spec.items():
            if k not in model.ix:
                raise ConfigError(f"{what}.{k}: unknown parameter of model {model.name}")
            theta[model.ix[k]] = float(v)
        return theta
    if isinstance(spec, list):
        if len(spec) != model.n_theta:
            raise ConfigError(f"{what}: expected {model.n_theta} values, got {len(spec)}")
        return np.array(spec, dtype=float)
    raise ConfigError(f"{what}: must be an object or a list")


def build_fit_config(model, cfg, args):
    """Merge the JSON config with command-line overrides."""
    elbo = dict(cfg.get("elbo", {}))
    lbfgs = dict(cfg.get("lbfgs", {}))
    adam = dict(cfg.get("adam", {}))
    finish = dict(cfg.get("finish", {}))
    variant = args.variant or cfg.get("variant", "deterministic")
    elbo["seed"] = resolve_seed(args.seed, elbo.get("seed"))
    elbo.setdefault("mode", DETERMINISTIC if variant == "deterministic" else "stochastic_resample")
    for flag, section, key in (
        ("samples", elbo, "M"), ("minibatch_percent", elbo, "minibatch_percent"),
        ("grad_tol", lbfgs, "grad_tol"), ("rel_obj_tol", lbfgs, "rel_obj_tol"), ("max_iter", lbfgs, "max_iter"),
        ("lr", adam, "lr"), ("decay", adam, "decay"), ("clip_norm", adam, "clip_norm"),
        ("adam_iters", adam, "max_iter"), ("is_samples", finish, "is_samples"),
    ):  # fmt: skip
        v = getattr(args, flag, None)
        if v is not None:
            section[key] = v
    if args.dense:
        elbo["dense"] = True
    try:
        return FitConfig(
            variant=variant,
            elbo=ElboConfig(**elbo),
            lbfgs=LbfgsConfig(**lbfgs),
            adam=AdamConfig(**adam),
            finish=FinishConfig(**finish),
            theta_init=list(_theta_vector(model, cfg.get("theta_init"), "config.theta_init")),
            kappa_init_method=getattr(args, "kappa_init", None) or cfg.get("kappa_init_method", "laplace"),
            ad_mode=args.ad_mode or cfg.get("ad_mode", "auto"),
            threads=args.threads or cfg.get("threads"),
        )
    except TypeError as exc:
        raise ConfigError(f"config: {exc}") from None


def _load_json(path, what):
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise UsageError(f"{what} file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{what} {path}: invalid JSON at line {exc.lineno}: {exc.msg}") from None


def _read_data(path, model):
    if not os.path.exists(path):
        raise UsageError(f"data file not found: {path}")
    subjects = read_csv(path, responses=model.responses)
    check_subjects(model, subjects)
    return subjects


def _write_text(path, text):
    with open(path, "w") as fh:
        fh.write(text)


def _emit(msg):
    print(msg, file=sys.stderr)


# commands ---------------------------------------------------------------------------------
def cmd_fit(args):
    cfg = _load_json(args.config, "config") if args.config else {}
    _check_keys(cfg)
    name = args.model or cfg.get("model")
    if not name:
        raise UsageError("--model is required (or set 'model' in the config)")
    model = catalog_lookup(name, **cfg.get("model_options", {}))
    subjects = _read_data(args.data, model)
    config = build_fit_config(model, cfg, args)
    verbose = (lambda line: print(line, flush=True)) if args.verbose else None
    result = fit(model, subjects, config, verbose=verbose)
    _write_text(args.out, result.to_json() + "\n")
    el = result.elbo
    print(f"{result.termination}: ELBO {el:.10g} after {result.meta['iterations']} iterations "
          f"({result.meta['timing']['total_s']:.2f}s)")  # fmt: skip
    return EXIT_OK


def cmd_simulate(args):
    model = catalog_lookup(args.model, **(json.loads(args.model_options) if args.model_options else {}))
    theta = _theta_vector(model, _load_json(args.theta, "theta") if args.theta else None, "theta")
    if not os.path.exists(args.design):
        raise UsageError(f"design file not found: {args.design}")
    design_subjects = read_csv(args.design)
    if not design_subjects:
        raise DataError("design file contains no subjects")
    design = design_subjects[0]
    if args.n < 0:
        raise UsageError("--n must be >= 0")
    seed = resolve_seed(args.seed)
    subjects = simulate_population(model, args.n, design, theta, seed)
    write_csv(subjects, args.out, responses=list(model.responses), covariates=sorted(model.covariate_names))
    return EXIT_OK


def _load_result(args):
    if not os.path.exists(args.result):
        raise UsageError(f"result file not found: {args.result}")
    with open(args.result) as fh:
        try:
            result = FitResult.from_json(fh.read())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"result {args.result}: invalid JSON: {exc.msg}") from None
    model = catalog_lookup(result.model_name, **result.model_options)
    subjects = _read_data(args.data, model)
    if [s.id for s in subjects] != result.subject_ids:
        raise DataError("subjects in the data file do not match the fit result")
    return result, model, subjects


def _recorded_steps(result):
    steps = result.meta.get("step_schedules")
    if steps is None or all(s is None for s in steps):
        return None
    return steps


def cmd_loglik(args):
    result, model, subjects = _load_result(args)
    theta = result.theta
    ids = result.subject_ids
    steps = _recorded_steps(result)
    if args.method == "elbo":
        ecfg = dict(result.meta["config"]["elbo"])
        ecfg.update(mode=DETERMINISTIC, minibatch_percent=100.0)
        problem = ElboProblem(model, subjects, ElboConfig(**ecfg), theta_init=theta, ad_mode="forward",
                              threads=args.threads, steps=steps)  # fmt: skip
        vals = problem.subject_values(problem.pack(theta, result.states))
        report = LoglikReport("elbo", vals, {"M": ecfg["M"], "seed": ecfg["seed"], "whiten": ecfg["whiten"]},
                              subject_ids=ids)  # fmt: skip
    elif args.method == "is":
        M = args.samples or 1000
        seed = resolve_seed(args.seed, result.meta.get("seed"))
        vals, ses = is_population(model, subjects, theta, result.states, M, seed, steps)
        report = LoglikReport("is", vals, {"samples": M, "seed": seed}, mc_se=list(ses), subject_ids=ids)
    elif args.method == "laplace":
        init = np.array([s.mu for s in result.states])
        vals, _, conv = laplace_population(model, subjects, theta, init, steps=steps)
        report = LoglikReport("laplace", vals, {"init": "variational modes", "converged": [bool(c) for c in conv]},
                              subject_ids=ids)  # fmt: skip
    else:
        if model.n_eta > 2:
            raise UnsupportedDimensionError(
                f"gh quadrature supports at most 2 random effects; model {model.name} has {model.n_eta}"
            )
        from .marginal import JointBatch, SubjectJoint, _merge_steps  # noqa: F401

        vals = []
        for i, s in enumerate(subjects):
            joint = SubjectJoint(model, s, theta, None if steps is None else steps[i])
            vals.append(loglik_gh(model, s, theta, args.nodes, joint=joint))
        report = LoglikReport("gh", vals, {"nodes": args.nodes or (64 if model.n_eta == 1 else 32),
                                           "adaptive": True}, subject_ids=ids)  # fmt: skip
    print(json.dumps(report.to_dict(), indent=2))
    return EXIT_OK


def cmd_ebe(args):
    result, model, subjects = _load_result(args)
    ebe = compute_ebes(model, subjects, result.theta, result.states, steps=_recorded_steps(result))
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id"] + [f"eta.{k + 1}" for k in range(model.n_eta)] + ["converged"])
        for sid, row, ok in zip(result.subject_ids, ebe.eta, ebe.converged):
            w.writerow([sid] + [format(float(v), ".17g") for v in row] + ["true" if ok else "false"])
    return EXIT_OK


# parser ------------------------------------------------------------------------------------
def build_parser():
    p = argparse.ArgumentParser(
        prog="nlmevem",
        description="Variational EM for nonlinear mixed-effects models.",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    sub = p.add_subparsers(dest="command", required=True)
    fmt = argparse.ArgumentDefaultsHelpFormatter

    f = sub.add_parser("fit", help="fit a catalog model to a dataset", formatter_class=fmt,
                       description="Fit a model. Unset flags fall back to the JSON config, then to the defaults "
                                   "shown (ELBO M=15, L-BFGS memory 10, Adam lr 1e-2 / decay 0.999 / clip 1e3, "
                                   "1000 importance samples).")  # fmt: skip
    f.add_argument("--model", help="catalog model name (or 'model' in the config)")
    f.add_argument("--data", required=True, help="dataset CSV")
    f.add_argument("--config", help="JSON config with sections elbo, lbfgs, adam, finish")
    f.add_argument("--out", required=True, help="output FitResult JSON")
    f.add_argument("--seed", type=int, help="random seed (fallback: NLMEVEM_SEED, then 0)")
    f.add_argument("--variant", choices=["deterministic", "stochastic", "stochastic_minibatch"],
                   help="VEM variant (default deterministic)")  # fmt: skip
    f.add_argument("--ad-mode", dest="ad_mode", choices=["auto", "forward", "reverse"],
                   help="gradient mode; auto picks reverse above 512 inputs (default auto)")  # fmt: skip
    f.add_argument("--samples", type=int, help="draws per subject M (default 15)")
    f.add_argument("--dense", action="store_true", help="dense Cholesky variational family")
    f.add_argument("--kappa-init", dest="kappa_init", choices=["prior", "laplace"],
                   help="variational starting point: each subject's Laplace approximation (default) or the prior")
    f.add_argument("--minibatch-percent", dest="minibatch_percent", type=float,
                   help="percent of subjects per mini-batch (default 100)")  # fmt: skip
    f.add_argument("--grad-tol", dest="grad_tol", type=float, help="L-BFGS gradient-norm tolerance (default 1e-3)")
    f.add_argument("--rel-obj-tol", dest="rel_obj_tol", type=float,
                   help="L-BFGS relative objective tolerance (default 1e-5)")  # fmt: skip
    f.add_argument("--max-iter", dest="max_iter", type=int, help="L-BFGS iteration cap (default 1000)")
    f.add_argument("--lr", type=float, help="Adam learning rate (default 1e-2)")
    f.add_argument("--decay", type=float, help="Adam per-iteration learning-rate factor (default 0.999)")
    f.add_argument("--clip-norm", dest="clip_norm", type=float, help="Adam gradient clip norm (default 1e3)")
    f.add_argument("--adam-iters", dest="adam_iters", type=int, help="Adam iterations (default 1000)")
    f.add_argument("--is-samples", dest="is_samples", type=int,
                   help="importance samples of the finishing estimate (default 1000)")  # fmt: skip
    f.add_argument("--threads", type=int, help="subject-level threads (default: all cores)")
    f.add_argument("--verbose", action="store_true", help="print one line per iteration")
    f.set_defaults(func=cmd_fit)

    s = sub.add_parser("simulate", help="simulate a dataset from a model", formatter_class=fmt)
    s.add_argument("--model", required=True)
    s.add_argument("--model-options", dest="model_options", help="JSON object of model constructor options")
    s.add_argument("--n", type=int, required=True, help="number of subjects")
    s.add_argument("--theta", help="JSON with parameter values (defaults: the model's initial values)")
    s.add_argument("--design", required=True, help="CSV whose first subject is the design template")
    s.add_argument("--seed", type=int, help="random seed (fallback: NLMEVEM_SEED, then 0)")
    s.add_argument("--out", required=True, help="output CSV")
    s.set_defaults(func=cmd_simulate)

    ll = sub.add_parser("loglik", help="evaluate the log-likelihood of a fit", formatter_class=fmt)
    ll.add_argument("--method", choices=["elbo", "is", "laplace", "gh"], required=True)
    ll.add_argument("--result", required=True, help="FitResult JSON")
    ll.add_argument("--data", required=True, help="dataset CSV used for the fit")
    ll.add_argument("--samples", type=int, help="importance samples (default 1000)")
    ll.add_argument("--nodes", type=int, help="Gauss-Hermite nodes per dimension (default 64 for r=1, 32 for r=2)")
    ll.add_argument("--seed", type=int, help="importance-sampling seed (default: the fit's seed)")
    ll.add_argument("--threads", type=int, help="subject-level threads (default: all cores)")
    ll.set_defaults(func=cmd_loglik)

    e = sub.add_parser("ebe", help="empirical Bayes estimates of a fit", formatter_class=fmt)
    e.add_argument("--result", required=True, help="FitResult JSON")
    e.add_argument("--data", required=True, help="dataset CSV used for the fit")
    e.add_argument("--out", required=True, help="output CSV (id, eta.1..eta.r, converged)")
    e.add_argument("--threads", type=int, help="accepted for symmetry; EBEs run single-threaded")
    e.set_defaults(func=cmd_ebe)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)  # argparse exits with status 2 on usage errors
    try:
        return args.func(args)
    except (UsageError, ConfigError, DataError, ModelShapeError, CatalogError, UnsupportedDimensionError) as exc:
        _emit(f"nlmevem {args.command}: error: {exc}")
        return EXIT_USAGE
    except OSError as exc:
        _emit(f"nlmevem {args.command}: error: {exc}")
        return EXIT_USAGE
    except (NlmeError, ArithmeticError, np.linalg.LinAlgError) as exc:
        _emit(f"nlmevem {args.command}: numerical failure: {type(exc).__name__}: {exc}")
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
