"""Acceptance criteria 1-9, one PASS/FAIL line each (see the terminal summary).

Criteria 5-8 train real models and take several minutes; criterion 9 reruns
them into a fresh directory and compares every CSV byte for byte.
"""
import os

import numpy as np
import pytest

from flowuq.diffcore import grad_check
from flowuq.flows import PinnedFlow, init_cond_flow, init_flow
from flowuq.harness import ExperimentConfig, image_preset, pipeline
from flowuq.objectives import FlowPrior, GaussianPrior, forward_kl_loss, make_log_posterior, reverse_kl_loss
from flowuq.problems import (
    analytic_posterior,
    grid_oracle,
    log_evidence,
    make_shifted_problem,
    make_supervised_gaussian,
    sample_joint,
)
from flowuq.transfer import make_preconditioned

import helpers
from helpers import (
    fd_logdet,
    posterior_box,
    random_small_problem,
    randomize,
    rel_err,
    unnormalised_log_posterior,
)

MEAN_TOL, COV_TOL = 0.1, 0.15


def verdict(n, title, checks):
    """Record and print the criterion line; ``checks`` is ``[(label, ok)]``."""
    failed = [label for label, ok in checks if not ok]
    status = "FAIL" if failed else "PASS"
    detail = "; ".join(label for label, _ in checks)
    line = f"criterion {n} {status}: {title} | {detail}"
    helpers.VERDICTS[n] = line
    print(line)
    assert not failed, "failed: " + "; ".join(failed)


# -- experiment stages (criteria 5-8), each writing under ``root`` ------------

def gaussian_config(root):
    return ExperimentConfig(out=os.path.join(root, "gaussian"))


def stage_supervised(root):
    return pipeline.run_supervised(gaussian_config(root))


def stage_correctness(root, sup):
    cfg = gaussian_config(root).with_overrides(
        out=os.path.join(root, "gaussian-correctness"), unsup_iterations=5000, unsup_batch=128,
        unsup_schedule="cosine", modes=("warm",), seeds=(0, 1, 2))
    return [pipeline.run_unsupervised(cfg, sup, "warm", k) for k in cfg.seeds]


def stage_speedup(root, sup):
    _, results, comparison = pipeline.run_experiment(gaussian_config(root), sup)
    return results, comparison


def stage_image(root):
    cfg = image_preset(out=os.path.join(root, "image"))
    return pipeline.run_experiment(cfg)


def run_all(root):
    sup = stage_supervised(root)
    return sup, stage_correctness(root, sup), stage_speedup(root, sup), stage_image(root)


def csv_files(root):
    found = {}
    for dirpath, _, names in os.walk(root):
        for name in names:
            if name.endswith(".csv"):
                path = os.path.join(dirpath, name)
                found[os.path.relpath(path, root)] = path
    return found


@pytest.fixture(scope="session")
def root(tmp_path_factory):
    return str(tmp_path_factory.mktemp("acceptance-a"))


@pytest.fixture(scope="session")
def supervised(root):
    return stage_supervised(root)


@pytest.fixture(scope="session")
def correctness(root, supervised):
    return stage_correctness(root, supervised)


@pytest.fixture(scope="session")
def speedup(root, supervised):
    return stage_speedup(root, supervised)


@pytest.fixture(scope="session")
def image(root):
    return stage_image(root)


# -- criteria -----------------------------------------------------------------

def test_criterion_1_invertibility():
    worst = 0.0
    for k in range(500):
        rng = np.random.default_rng(k)
        n_layers = int(rng.choice([2, 4, 6, 8]))
        widths = tuple(int(w) for w in rng.integers(4, 17, size=rng.integers(1, 3)))
        if k % 2 == 0:
            dim, cond_dim = 2 + (k // 2) % 11, int(rng.integers(0, 4))
            flow = init_flow(dim, cond_dim, n_layers, widths, seed=k)
            randomize(flow.params, k)
            v = rng.normal(size=(1, dim)) * 3.0
            c = rng.normal(size=(1, cond_dim)) if cond_dim else None
            back = flow.inverse(flow.forward(v, c)[0], c)[0]
        else:
            nx, ny = 2 + (k // 2) % 11, int(rng.integers(1, 5))
            T = init_cond_flow(nx, ny, n_layers, widths, seed=k)
            randomize(T.params, k)
            v, y = rng.normal(size=(1, nx)) * 3.0, rng.normal(size=(1, ny))
            back = T.sample(y, T.forward(v, y).z_x)
        worst = max(worst, float(np.max(np.abs(back - v))))
    verdict(1, "flow round trips, 500 cases, dims 2-12", [(f"max error {worst:.2e} < 1e-10", worst < 1e-10)])


def test_criterion_2_logdet_oracle():
    worst = 0.0
    for k in range(50):
        rng = np.random.default_rng(1000 + k)
        if k % 2 == 0:
            dim, cond_dim = int(rng.integers(2, 7)), int(rng.integers(0, 3))
            flow = init_flow(dim, cond_dim, 4, (8,), seed=k)
            randomize(flow.params, k)
            v = rng.normal(size=dim)
            c = rng.normal(size=(1, cond_dim)) if cond_dim else None
            ld = flow.forward(v[None, :], c)[1][0]
            oracle = fd_logdet(lambda u: flow.forward(u[None, :], c)[0][0], v)
        else:
            nx = int(rng.integers(1, 5))
            ny = int(rng.integers(1, 7 - nx))
            T = init_cond_flow(nx, ny, 4, (8,), seed=k)
            randomize(T.params, k)
            v = rng.normal(size=nx + ny)

            def joint(u):
                pair = T.forward(u[None, :nx], u[None, nx:])
                return np.concatenate([pair.z_x[0], pair.z_y[0]])

            ld = T.forward(v[None, :nx], v[None, nx:]).logdet[0]
            oracle = fd_logdet(joint, v)
        worst = max(worst, rel_err(ld, oracle))
    verdict(2, "log-det vs finite-difference Jacobian, 50 cases, dims <= 6",
            [(f"max relative error {worst:.2e} < 1e-5", worst < 1e-5)])


def test_criterion_3_gradients():
    fwd = []
    for k, (nx, ny) in enumerate([(2, 1), (3, 2), (4, 3), (5, 1)]):
        T = init_cond_flow(nx, ny, 2, (6,), seed=k)
        randomize(T.params, 10 + k)
        rng = np.random.default_rng(20 + k)
        x, y = rng.normal(size=(5, nx)), rng.normal(size=(5, ny))
        fwd.append(grad_check(lambda p: forward_kl_loss(T, x, y), T.params, 1e-5))

    base = make_supervised_gaussian(0)
    law, problem = make_shifted_problem(base)
    _, Y = sample_joint(problem, law, 2, 7)
    rev = []
    for k in range(2):
        target = make_log_posterior(problem, GaussianPrior(problem.prior_mean, problem.prior_cov), Y[k])
        flow = init_flow(12, 6, 2, (6,), seed=k)
        randomize(flow.params, 30 + k, 0.3)
        S = PinnedFlow(flow, Y[k] * 0.1)
        z = np.random.default_rng(40 + k).normal(size=(6, 12))
        rev.append(grad_check(lambda p: reverse_kl_loss(S, target, z), S.params, 1e-5))

    # reverse KL through a flow prior and a preconditioned sampler
    sup_T = init_cond_flow(4, 3, 2, (6,), seed=6)
    randomize(sup_T.params, 51, 0.3)
    pre = make_preconditioned(sup_T, np.array([0.3, -0.2, 0.5]), seed=4)
    randomize(pre.params, 52, 0.3)
    prior = FlowPrior(init_cond_flow(4, 3, 2, (6,), seed=7), np.array([0.1, 0.2, 0.3]))
    randomize(prior.T.params, 53, 0.3)
    small = random_small_problem(8, nx=4, ny=2)
    target = make_log_posterior(small, prior, np.array([0.4, -1.0]))
    z = np.random.default_rng(60).normal(size=(6, 4))
    rev.append(grad_check(lambda p: reverse_kl_loss(pre, target, z), pre.params, 1e-5))

    checks = [(f"forward KL max relative error {max(fwd):.2e} < 1e-5", max(fwd) < 1e-5),
              (f"reverse KL max relative error {max(rev):.2e} < 1e-5", max(rev) < 1e-5)]
    verdict(3, "objective gradients vs central differences", checks)


def test_criterion_4_analytic_posterior():
    worst_mean = worst_cov = worst_mass = 0.0
    for k in range(20):
        rng = np.random.default_rng(500 + k)
        nx = 1 + k % 2
        ny = int(rng.integers(1, 4))
        p = random_small_problem(500 + k, nx=nx, ny=ny)
        y = rng.normal(size=ny)
        mean, cov = analytic_posterior(p, y)
        g = grid_oracle(unnormalised_log_posterior(p, y), posterior_box(p, y))
        worst_mean = max(worst_mean, float(np.max(np.abs(g.mean - mean))))
        worst_cov = max(worst_cov, float(np.max(np.abs(g.cov - cov))))
        worst_mass = max(worst_mass, abs(g.mass / np.exp(log_evidence(p, y)) - 1.0))
    verdict(4, "analytic posterior and evidence vs grid quadrature, 20 instances (1-D and 2-D)",
            [(f"mean error {worst_mean:.1e} < 1e-4", worst_mean < 1e-4),
             (f"covariance error {worst_cov:.1e} < 1e-4", worst_cov < 1e-4),
             (f"evidence relative error {worst_mass:.1e} < 1e-4", worst_mass < 1e-4)])


def test_criterion_5_supervised(supervised, root):
    cfg = gaussian_config(root)
    rows = np.loadtxt(os.path.join(cfg.out, "supervised", "heldout.csv"), delimiter=",", skiprows=1, ndmin=2)
    mean_err, cov_err = rows[:, 1].max(), rows[:, 2].max()
    verdict(5, f"amortised posterior at {len(rows)} held-out y, {cfg.n_samples} draws, "
               f"{supervised.trace.iterations} iterations",
            [(f"worst mean error {mean_err:.3f} < {MEAN_TOL}", len(rows) == 5 and mean_err < MEAN_TOL),
             (f"worst covariance error {cov_err:.3f} < {COV_TOL}", cov_err < COV_TOL)])


def test_criterion_6_unsupervised_correctness(correctness):
    m = [r.metrics for r in correctness]
    mean_err = max(x["mean_rel_err"] for x in m)
    cov_err = max(x["cov_rel_err"] for x in m)
    gap = max(abs(x["final_window_loss"] - x["loss_bound"]) for x in m)
    slack = min((x["final_window_loss"] - x["loss_bound"]) / x["final_window_se"] for x in m)
    verdict(6, f"warm-started reverse KL vs analytic posterior, {len(m)} observations",
            [(f"worst mean error {mean_err:.3f} < {MEAN_TOL}", mean_err < MEAN_TOL),
             (f"worst covariance error {cov_err:.3f} < {COV_TOL}", cov_err < COV_TOL),
             (f"worst |final loss - bound| {gap:.3f} < 0.1 nats", gap < 0.1),
             (f"min (final loss - bound)/SE {slack:.2f} >= -3", slack >= -3.0)])


def test_criterion_7_speedup(speedup):
    _, (rows, medians) = speedup
    by = {(r.mode, r.seed): r for r in rows}
    seeds = sorted({r.seed for r in rows})
    lower = sum(by[("warm", s)].initial_loss < by[("scratch", s)].initial_loss for s in seeds)
    precond = [by[("precond", s)].iters_to_threshold for s in seeds]
    verdict(7, f"warm vs scratch iterations-to-threshold over {len(seeds)} seeds",
            [(f"warm median ratio {medians['warm']:.3f} < 0.5", len(seeds) == 5 and medians["warm"] < 0.5),
             (f"warm starts lower in {lower}/{len(seeds)} seeds (need >= 4)", lower >= 4),
             (f"precond reaches threshold in all seeds ({precond})", all(i is not None for i in precond))])


def test_criterion_8_image(image):
    _, results, _ = image
    seeds = sorted({k for _, k in results})
    gaps = [results[("warm", k)].metrics["psnr"] - results[("scratch", k)].metrics["psnr"] for k in seeds]
    std_min = min(r.metrics["std_min"] for r in results.values())
    maps = all(os.path.exists(os.path.join(r.directory, name))
               for r in results.values() for name in ("std.csv", "std.svg"))
    verdict(8, f"image experiment, {len(seeds)} seeds, PSNR gaps {np.round(gaps, 2).tolist()} dB",
            [(f"median PSNR gain {np.median(gaps):.2f} dB >= 1", len(seeds) == 3 and np.median(gaps) >= 1.0),
             (f"std maps emitted, min std {std_min:.2e} > 0", maps and std_min > 0)])


def test_criterion_9_determinism(root, supervised, correctness, speedup, image, tmp_path_factory):
    again = str(tmp_path_factory.mktemp("acceptance-b"))
    run_all(again)
    first, second = csv_files(root), csv_files(again)
    differing = sorted(k for k in first if k not in second or
                       open(first[k], "rb").read() != open(second[k], "rb").read())
    missing = sorted(set(second) - set(first))
    verdict(9, f"rerun of criteria 5-8 compared over {len(first)} CSV files",
            [(f"{len(differing) + len(missing)} files differ", not differing and not missing and len(first) > 0)])
