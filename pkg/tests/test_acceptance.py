"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -s``; the lines are also
collected in the terminal summary of any run that includes this file.
"""

import contextlib
import csv
import importlib.util
import io
import itertools
import json
import math
import time
from pathlib import Path

import numpy as np
import pytest

from nlmevem.cli import main
from nlmevem.data import write_csv
from nlmevem.elbo import ElboConfig, ElboProblem, elbo_population
from nlmevem.fit import FitConfig, fit
from nlmevem.marginal import (
    is_log_weights,
    loglik_closed_form,
    loglik_gh,
    loglik_is,
    loglik_laplace,
    ppca_posterior,
    standardized_posterior,
)
from nlmevem.models import catalog_lookup
from nlmevem.models.simple import LinearGaussian
from nlmevem.optim import AdamConfig, LbfgsConfig, maximize_adam, maximize_lbfgs
from nlmevem.subject import DoseEvent
from nlmevem.variational import VariationalState

from conftest import WARFARIN_TIMES, design, simulated

ROOT = Path(__file__).resolve().parents[1]
# default stopping rule is loose for exact-oracle comparisons; see the README
TIGHT = LbfgsConfig(grad_tol=1e-6, rel_obj_tol=1e-12)
WARFARIN_DOSE = (DoseEvent(0.0, 100.0, 0),)


def timed_fit(model, subjects, cfg):
    t0 = time.perf_counter()
    res = fit(model, subjects, cfg)
    return res, time.perf_counter() - t0


def random_intercept_mle(subjects):
    Y = np.array([s.observations["y"] for s in subjects])
    N, n = Y.shape
    ybar = Y.mean(axis=1)
    s2 = ((Y - ybar[:, None]) ** 2).sum() / (N * (n - 1))
    om2 = (n * np.mean((ybar - ybar.mean()) ** 2) - s2) / n
    return np.array([ybar.mean(), np.sqrt(om2), np.sqrt(s2)])


# fits shared between their own criterion and the monotone-trace check -----------------
@pytest.fixture(scope="module")
def lg_fit():
    model, subjects = simulated("linear_gaussian", 50, [1, 2, 3, 4, 5], theta=[0.5, 1.2, 0.8], seed=101)
    cfg = FitConfig.for_variant("deterministic", elbo={"dense": True}, lbfgs=TIGHT)
    return (model, subjects, *timed_fit(model, subjects, cfg))


@pytest.fixture(scope="module")
def ppca_fit():
    model, subjects = simulated("ppca", 100, [0.0], seed=3, p=5, q=2)
    cfg = FitConfig.for_variant("deterministic", elbo={"dense": True}, lbfgs=TIGHT)
    return (model, subjects, *timed_fit(model, subjects, cfg))


@pytest.fixture(scope="module")
def warfarin_fit():
    model, subjects = simulated("warfarin_pkpd", 31, WARFARIN_TIMES, seed=7, doses=WARFARIN_DOSE)
    cfg = FitConfig.for_variant("deterministic", elbo={"M": 15, "dense": True})
    return (model, subjects, *timed_fit(model, subjects, cfg))


def cli_pipeline(root, threads):
    """simulate -> fit -> loglik (every method) -> ebe; returns the numerical outputs."""
    root.mkdir()
    model = catalog_lookup("one_cmt_pk")
    write_csv([design(model, [0.5, 1, 2, 4, 8, 12], WARFARIN_DOSE)], root / "design.csv")
    t = str(threads)
    assert main(["simulate", "--model", "one_cmt_pk", "--n", "12", "--design", str(root / "design.csv"),
                 "--seed", "23", "--out", str(root / "data.csv")]) == 0  # fmt: skip
    assert main(["fit", "--model", "one_cmt_pk", "--data", str(root / "data.csv"), "--out", str(root / "fit.json"),
                 "--seed", "23", "--samples", "8", "--threads", t]) == 0  # fmt: skip
    reports = {}
    for method in ("elbo", "laplace", "is"):
        out = io.StringIO()
        with contextlib.redirect_stdout(out):
            assert main(["loglik", "--method", method, "--result", str(root / "fit.json"), "--data",
                         str(root / "data.csv"), "--samples", "500", "--seed", "5", "--threads", t]) == 0  # fmt: skip
        reports[method] = json.loads(out.getvalue())
    assert main(["ebe", "--result", str(root / "fit.json"), "--data", str(root / "data.csv"),
                 "--out", str(root / "ebe.csv"), "--threads", t]) == 0  # fmt: skip
    result = json.loads((root / "fit.json").read_text())
    result["meta"].pop("timing")
    return {
        "data": (root / "data.csv").read_bytes(),
        "fit": result,
        "reports": reports,
        "ebe": (root / "ebe.csv").read_bytes(),
    }


@pytest.fixture(scope="module")
def pipelines(tmp_path_factory):
    base = tmp_path_factory.mktemp("pipeline")
    return [cli_pipeline(base / f"run{k}", threads) for k, threads in enumerate((1, 8, 1))]


# criteria -------------------------------------------------------------------------------
def test_criterion_01_conjugate_exactness(criterion, lg_fit):
    model, subjects, res, seconds = lg_fit
    with criterion(1, "linear_gaussian: ELBO vs closed form, MLE, runtime") as note:
        exact = sum(loglik_closed_form(model, s, res.theta) for s in subjects)
        gap = abs(res.elbo - exact)
        err = np.max(np.abs(res.theta - random_intercept_mle(subjects)))
        note(f"|ELBO-exact|={gap:.2e}, max|theta-MLE|={err:.2e}, {seconds:.1f}s")
        assert gap < 0.05
        assert err < 1e-3
        assert seconds < 10


def test_criterion_02_ppca_posterior(criterion, ppca_fit):
    model, subjects, res, seconds = ppca_fit
    with criterion(2, "PPCA q=2, N=100: variational vs exact posterior") as note:
        dm = dc = 0.0
        for s, q in zip(subjects, res.states):
            mean, cov = ppca_posterior(model, s, res.theta)
            dm = max(dm, np.max(np.abs(q.mu - mean)))
            dc = max(dc, np.linalg.norm(q.covariance() - cov))
        note(f"mean err={dm:.2e}, cov Frobenius err={dc:.2e}, {seconds:.1f}s")
        assert dm < 1e-3
        assert dc < 1e-3
        assert seconds < 30


def test_criterion_03_laplace(criterion):
    with criterion(3, "Laplace exact on linear-Gaussian; logistic n_i=200 vs GH64") as note:
        model, subjects = simulated("linear_gaussian", 20, [1, 2, 3, 4, 5], theta=[0.5, 1.2, 0.8], seed=4)
        theta = np.array([0.4, 1.1, 0.7])
        lin = max(abs(loglik_laplace(model, s, theta) - loglik_closed_form(model, s, theta)) for s in subjects)
        model, subjects = simulated("logistic_1d", 10, np.linspace(0, 6, 200), theta=[-3.0, 1.0, 0.8, 0.1], seed=8)
        theta = model.theta_init
        logi = max(abs(loglik_laplace(model, s, theta) - loglik_gh(model, s, theta, nodes=64)) for s in subjects)
        note(f"linear max err={lin:.2e}, logistic max |Laplace-GH|={logi:.2e}")
        assert lin < 1e-10
        assert logi < 0.02


def gradient_errors(model, subjects, M=4, h=1e-5):
    """Worst relative error of forward and reverse gradients against central differences."""
    fw = ElboProblem(model, subjects, ElboConfig(M=M, dense=True), ad_mode="forward", threads=1)
    rv = ElboProblem(model, subjects, ElboConfig(M=M, dense=True), ad_mode="reverse", threads=1)
    x = fw.initial_point()
    x[fw.n_theta :] += np.random.default_rng(0).normal(0, 0.2, x.size - fw.n_theta)
    gf = fw.value_and_grad(x)[1]
    gr = rv.value_and_grad(x)[1]
    fd = np.empty_like(x)
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = h
        fd[j] = (fw.value(x + e) - fw.value(x - e)) / (2 * h)
    scale = np.maximum(np.abs(fd), np.finfo(float).tiny)
    return (np.max(np.abs(gf - fd) / scale), np.max(np.abs(gr - fd) / scale),
            np.max(np.abs(gf - gr) / np.maximum(np.abs(gf), np.finfo(float).tiny)))  # fmt: skip


def test_criterion_04_gradients(criterion):
    cases = {
        "linear_gaussian": simulated("linear_gaussian", 5, [1, 2, 3, 4, 5], seed=1),
        "logistic_1d": simulated("logistic_1d", 5, np.linspace(0, 6, 12), theta=[-3.0, 1.0, 0.8, 0.1], seed=1),
        "warfarin_pkpd": simulated("warfarin_pkpd", 5, WARFARIN_TIMES, seed=1, doses=WARFARIN_DOSE),
    }
    with criterion(4, "forward/reverse gradients vs central differences") as note:
        worst = {}
        for name, (model, subjects) in cases.items():
            worst[name] = gradient_errors(model, subjects)
            note(f"{name}: fd {max(worst[name][:2]):.1e}, fw/rv {worst[name][2]:.1e}")
        for f_err, r_err, fr_err in worst.values():
            assert f_err < 1e-4 and r_err < 1e-4
            assert fr_err < 1e-9


def test_criterion_05_importance_sampling(criterion):
    model, subjects = simulated("linear_gaussian", 3, [1, 2, 3, 4], theta=[0.3, 1.1, 0.7], seed=12)
    theta = np.array([0.2, 0.9, 0.8])
    s = subjects[0]
    exact = loglik_closed_form(model, s, theta)
    with criterion(5, "IS: zero variance at the posterior; prior proposal covers") as note:
        logw = is_log_weights(model, s, theta, standardized_posterior(model, s, theta), 1000)
        var, dev = np.var(logw), np.max(np.abs(logw - exact))
        prior = VariationalState.initial(1)
        hits = 0
        for seed in range(100):
            value, se = loglik_is(model, s, theta, prior, M=10_000, seed=seed)
            hits += abs(value - exact) < 3 * se
        note(f"var={var:.1e}, |logw-exact|={dev:.1e}, covered {hits}/100")
        assert var < 1e-20
        assert dev < 1e-10
        assert hits >= 95


def test_criterion_06_minibatch_identity(criterion):
    class WithPrior(LinearGaussian):
        def theta_log_prior(self, theta):
            return -0.5 * theta[0] ** 2 - 0.5 * math.log(2 * math.pi)

    model = WithPrior()
    _, subjects = simulated("linear_gaussian", 4, [1, 2, 3], theta=[0.2, 0.9, 0.6], seed=2)
    theta = np.array([0.1, 1.1, 0.7])
    rng = np.random.default_rng(0)
    states = [VariationalState(rng.normal(0, 0.7, 1), rng.normal(-0.5, 0.4, 1), False) for _ in subjects]
    with criterion(6, "mini-batch average over all 6 batches equals the full objective") as note:
        full = elbo_population(model, subjects, theta, states, ElboConfig(M=6))
        half = ElboConfig(M=6, minibatch_percent=50)
        batches = list(itertools.combinations(range(4), 2))
        avg = math.fsum(elbo_population(model, subjects, theta, states, half, batch=b) for b in batches) / 6
        # the prior term enters once whatever the batch size
        prior = theta[0] ** 2 / -2 - 0.5 * math.log(2 * math.pi)
        shifts = [elbo_population(model, subjects, theta, states, ElboConfig(M=6, map_prior=True, **kw), batch=b)
                  - elbo_population(model, subjects, theta, states, ElboConfig(M=6, **kw), batch=b)
                  for kw, b in (({}, None), ({"minibatch_percent": 25}, [1]), ({"minibatch_percent": 50}, [0, 3]))]  # fmt: skip
        rel = abs(avg - full) / abs(full)
        note(f"batches={len(batches)}, rel diff={rel:.1e}, prior shifts={[f'{v:.6f}' for v in shifts]}")
        assert len(batches) == 6
        assert rel < 1e-12
        np.testing.assert_allclose(shifts, prior, atol=1e-12)


def test_criterion_07_warfarin(criterion, warfarin_fit):
    model, subjects, res, seconds = warfarin_fit
    with criterion(7, "warfarin N=31: ELBO vs Laplace gap, pop_CL/pop_V recovery") as note:
        lap = res.loglik["laplace"]
        gap = abs(res.elbo - lap.total)
        truth = dict(zip(model.theta_names, model.theta_init))
        got = res.theta_dict
        rel = {k: abs(got[k] / truth[k] - 1) for k in ("pop_CL", "pop_V")}
        note(f"ELBO={res.elbo:.3f}, Laplace={lap.total:.3f}, gap={gap:.3f}, "
             f"pop_CL err={rel['pop_CL']:.1%}, pop_V err={rel['pop_V']:.1%}, {seconds:.0f}s")  # fmt: skip
        assert lap.settings.get("init") == "variational modes"
        assert gap < 2
        assert max(rel.values()) < 0.15
        assert seconds < 600


def test_criterion_08_reverse_mode_scaling(criterion):
    spec = importlib.util.spec_from_file_location("ad_scaling", ROOT / "benchmarks" / "ad_scaling.py")
    bench = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(bench)
    with criterion(8, "mini_neural_ode gradient time, n_theta 100 -> 1600") as note:
        rows = bench.run()
        r = bench.ratios(rows)
        sizes = sorted({row["n_theta"] for row in rows})
        note(f"n_theta={sizes}, reverse x{r['reverse']:.2f}, forward x{r['forward']:.1f}")
        assert r["reverse"] < 6
        assert r["forward"] >= 8


def test_criterion_09_optimizers(criterion, lg_fit, ppca_fit, warfarin_fit, pipelines):
    def neg_rosenbrock(x):
        a, b = x
        f = (1 - a) ** 2 + 100 * (b - a * a) ** 2
        return -f, -np.array([-2 * (1 - a) - 400 * a * (b - a * a), 200 * (b - a * a)])

    with criterion(9, "Rosenbrock, Adam first step, monotone L-BFGS traces") as note:
        x, trace, _ = maximize_lbfgs(neg_rosenbrock, np.array([-1.2, 1.0]),
                                     LbfgsConfig(grad_tol=1e-10, rel_obj_tol=0.0, max_iter=500))  # fmt: skip
        ros = np.max(np.abs(x - 1.0))
        # bias-corrected first step: lr * g / (|g| + eps)
        g = np.array([0.7, -2.5, 1e-4, 30.0])
        cfg = AdamConfig(lr=0.05, max_iter=1)
        x1, _ = maximize_adam(lambda x, k: (0.0, g), np.zeros(4), cfg)
        adam = np.max(np.abs(x1 - cfg.lr * g / (np.abs(g) + cfg.eps)))
        traces = {"rosenbrock": trace.objective, "linear_gaussian": lg_fit[2].trace.objective,
                  "ppca": ppca_fit[2].trace.objective, "warfarin": warfarin_fit[2].trace.objective}  # fmt: skip
        for k, p in enumerate(pipelines):
            traces[f"cli run {k}"] = p["fit"]["trace"]["objective"]
        bad = [k for k, obj in traces.items() if np.any(np.diff(obj) < 0)]
        note(f"Rosenbrock err={ros:.1e}, Adam err={adam:.1e}, {len(traces)} traces, non-monotone={bad}")
        assert ros < 1e-5
        assert adam < 1e-6
        assert not bad


def test_criterion_10_cli_determinism(criterion, pipelines):
    with criterion(10, "CLI simulate -> fit -> loglik -> ebe, --threads 1 vs 8, rerun") as note:
        first = pipelines[0]
        same = [p == first for p in pipelines[1:]]
        rows = list(csv.DictReader(io.StringIO(first["ebe"].decode())))
        note(f"{len(rows)} subjects, {len(first['reports'])} loglik reports, identical={same}")
        assert all(same)
