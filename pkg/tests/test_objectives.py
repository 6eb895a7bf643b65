import numpy as np
import pytest

from flowuq.diffcore import ParamStore, grad_check
from flowuq.errors import ConfigError, NumericError
from flowuq.flows import LOG_2PI, PinnedFlow, init_cond_flow, init_flow
from flowuq.objectives import (
    AdamState,
    FlowPrior,
    GaussianPrior,
    TrainConfig,
    adam_step,
    forward_kl_loss,
    gaussian_log_likelihood,
    make_log_posterior,
    reverse_kl_loss,
    train,
)
from flowuq.problems import (
    LinearGaussianProblem,
    log_evidence,
    make_shifted_problem,
    make_supervised_gaussian,
    sample_joint,
)

from helpers import randomize


class ShiftSampler:
    """``x = z + b`` with trainable ``b``; log-det zero."""

    def __init__(self, dim):
        self.params = ParamStore()
        self.params.add("b", np.zeros(dim))
        self.dim = dim

    def sample(self, z, tape=None):
        return z + self.params["b"], np.zeros(z.shape[0])

    def sample_backward(self, tape, g_x, g_logdet):
        self.params.grad("b")[...] += g_x.sum(axis=0)


def unsupervised_target(seed=0):
    base = make_supervised_gaussian(0)
    law, problem = make_shifted_problem(base)
    _, Y = sample_joint(problem, law, 1, seed)
    y_obs = Y[0]
    return problem, y_obs, make_log_posterior(problem, GaussianPrior(problem.prior_mean, problem.prior_cov), y_obs)


def fd_gradient(fn, x, h=1e-6):
    return np.array([(fn(x + h * e) - fn(x - h * e)) / (2 * h) for e in np.eye(x.size)])


class TestForwardKL:
    def test_identity_chi_square_mean(self):
        T = init_cond_flow(3, 2, 4, (8,), seed=0)
        rng = np.random.default_rng(0)
        n = 100_000
        x, y = rng.standard_normal((n, 3)), rng.standard_normal((n, 2))
        loss = forward_kl_loss(T, x, y, accumulate=False)
        # 0.5 * chi^2_5 has variance 5/2
        assert abs(loss - 2.5) < 3 * np.sqrt(2.5 / n)

    def test_origin_gives_zero(self):
        T = init_cond_flow(3, 2, 4, (8,), seed=0)
        assert forward_kl_loss(T, np.zeros(3), np.zeros(2)) == 0.0

    @pytest.mark.parametrize("dims", [(2, 1), (3, 2)])
    def test_gradients_match_fd(self, dims):
        nx, ny = dims
        T = init_cond_flow(nx, ny, 2, (6,), seed=1)
        randomize(T.params, 2, 0.5)
        rng = np.random.default_rng(3)
        x, y = rng.normal(size=(5, nx)), rng.normal(size=(5, ny))
        assert grad_check(lambda p: forward_kl_loss(T, x, y), T.params, 1e-5) < 1e-5

    def test_deterministic(self):
        T = init_cond_flow(3, 2, 2, (6,), seed=1)
        randomize(T.params, 4)
        x, y = np.ones((4, 3)), np.ones((4, 2))
        a = forward_kl_loss(T, x, y)
        ga = T.params.flat_grad().copy()
        T.params.zero_grad()
        b = forward_kl_loss(T, x, y)
        assert a == b and ga.tobytes() == T.params.flat_grad().tobytes()

    def test_non_finite_reports_sample(self):
        T = init_cond_flow(2, 1, 2, (4,), seed=0)
        x = np.array([[0.0, 0.0], [np.inf, 0.0]])
        with pytest.raises(NumericError, match="sample 1"):
            forward_kl_loss(T, x, np.zeros((2, 1)))

    def test_empty_batch(self):
        T = init_cond_flow(2, 1, 2, (4,), seed=0)
        with pytest.raises(ConfigError):
            forward_kl_loss(T, np.zeros((0, 2)), np.zeros((0, 1)))


class TestLikelihood:
    def test_scalar(self):
        p = LinearGaussianProblem([[1.0]], 0.0, 1.0, [0.0], [1.0])
        value, grad = gaussian_log_likelihood(p, np.zeros(1), np.zeros(1))
        assert value == pytest.approx(-0.5 * np.log(2 * np.pi), abs=1e-15)
        assert value == pytest.approx(-0.918939, abs=1e-6)
        assert grad[0] == 0.0

    def test_gradient_vanishes_at_zero_residual(self):
        p = LinearGaussianProblem(np.eye(3), [0.5, 0.25, -1.0], [0.5, 1.0, 2.0], np.zeros(3), np.ones(3))
        x = np.array([1.0, -2.0, 0.5])
        _, grad = gaussian_log_likelihood(p, x, x + p.noise_mean)
        assert not grad.any()

    def test_dense_quadratic_form(self):
        p = make_supervised_gaussian(3)
        rng = np.random.default_rng(1)
        p = LinearGaussianProblem(p.A, rng.normal(size=6), rng.uniform(0.05, 0.5, 6), p.prior_mean, p.prior_cov)
        x, y = rng.normal(size=12), rng.normal(size=6)
        cov = np.diag(p.noise_var)
        r = y - p.A @ x - p.noise_mean
        expected = -0.5 * r @ np.linalg.solve(cov, r) - 0.5 * np.linalg.slogdet(2 * np.pi * cov)[1]
        value, grad = gaussian_log_likelihood(p, x, y)
        assert abs(value - expected) < 1e-10
        np.testing.assert_allclose(grad, p.A.T @ np.linalg.solve(cov, r), atol=1e-12)


class TestLogPosterior:
    def test_zero_operator_gradient_at_prior_mean(self):
        p = LinearGaussianProblem(np.zeros((2, 3)), 0.0, 1.0, [1.0, 2.0, 3.0], [1.0, 2.0, 3.0])
        target = make_log_posterior(p, GaussianPrior(p.prior_mean, p.prior_cov), np.ones(2))
        _, grad = target(p.prior_mean)
        assert not grad.any()

    def test_identity_flow_prior_is_standard_normal(self):
        T = init_cond_flow(4, 2, 4, (8,), seed=0)
        flow_prior = FlowPrior(T, np.array([0.3, -1.0]))
        gauss = GaussianPrior(np.zeros(4), np.eye(4))
        rng = np.random.default_rng(0)
        a, b = rng.normal(size=4), rng.normal(size=4) * 2
        diff_flow = flow_prior(a)[0] - flow_prior(b)[0]
        diff_gauss = gauss(a)[0] - gauss(b)[0]
        assert abs(diff_flow - diff_gauss) < 1e-10

    def test_full_target_gradient_matches_fd(self):
        p = make_supervised_gaussian(0, nx=4, ny=3)
        T = init_cond_flow(4, 3, 4, (8,), seed=1)
        randomize(T.params, 1, 0.4)
        y_obs = np.array([0.5, -0.2, 1.0])
        target = make_log_posterior(p, FlowPrior(T, y_obs), y_obs)
        rng = np.random.default_rng(5)
        worst = 0.0
        for _ in range(20):
            x = rng.normal(size=4)
            _, grad = target(x)
            fd = fd_gradient(lambda u: target(u)[0], x)
            worst = max(worst, np.max(np.abs(grad - fd) / np.maximum(np.abs(fd), 1e-8)))
        assert worst < 1e-5
        assert not T.params.flat_grad().any()

    def test_batched_flow_prior(self):
        T = init_cond_flow(3, 1, 2, (4,), seed=2)
        randomize(T.params, 2)
        prior = FlowPrior(T, np.array([0.1]))
        xs = np.random.default_rng(0).normal(size=(5, 3))
        values, grads = prior(xs)
        for k in range(5):
            v, g = prior(xs[k])
            assert v == pytest.approx(values[k], abs=1e-13)
            np.testing.assert_allclose(g, grads[k], atol=1e-13)

    def test_dimension_check(self):
        p = make_supervised_gaussian(0)
        with pytest.raises(ConfigError):
            make_log_posterior(p, GaussianPrior(np.zeros(12), np.eye(12)), np.zeros(5))
        T = init_cond_flow(3, 6, 2, (4,), seed=0)
        with pytest.raises(ConfigError):
            make_log_posterior(p, FlowPrior(T, np.zeros(6)), np.zeros(6))


class TestReverseKL:
    def test_identity_standard_normal(self):
        d = 5
        flow = init_flow(d, 0, 2, (4,), seed=0, restore_order=True)
        target = GaussianPrior(np.zeros(d), np.eye(d))
        z = np.random.default_rng(0).normal(size=(64, d))
        expected = np.mean(0.5 * np.sum(z * z, axis=1) + 0.5 * d * LOG_2PI)
        assert abs(reverse_kl_loss(flow, target, z) - expected) < 1e-12

    def test_shift_first_order_condition(self):
        d = 4
        t_star = np.array([1.0, -2.0, 0.5, 3.0])
        S = ShiftSampler(d)
        z = np.random.default_rng(1).normal(size=(32, d))
        S.params["b"][...] = t_star - z.mean(axis=0)
        reverse_kl_loss(S, GaussianPrior(t_star, np.eye(d)), z)
        assert np.max(np.abs(S.params.grad("b"))) < 1e-10

    def test_gradients_match_fd(self):
        problem, y_obs, target = unsupervised_target()
        flow = init_flow(12, 6, 2, (6,), seed=3)
        randomize(flow.params, 3, 0.3)
        S = PinnedFlow(flow, y_obs * 0.1)
        z = np.random.default_rng(2).normal(size=(6, 12))
        assert grad_check(lambda p: reverse_kl_loss(S, target, z), S.params, 1e-5) < 1e-5

    def test_lower_bound(self):
        problem, y_obs, target = unsupervised_target(seed=4)
        d = problem.nx
        bound = -log_evidence(problem, y_obs) + 0.5 * d * (1 + LOG_2PI)
        z = np.random.default_rng(0).normal(size=(20_000, d))
        for seed in range(3):
            flow = init_flow(d, 0, 4, (8,), seed=seed)
            randomize(flow.params, seed, 0.3)
            S = PinnedFlow(flow)
            x, ld = S.sample(z)
            terms = -target(x)[0] - ld
            se = terms.std(ddof=1) / np.sqrt(z.shape[0])
            assert reverse_kl_loss(S, target, z, accumulate=False) >= bound - 3 * se

    def test_standard_error_scaling(self):
        problem, y_obs, target = unsupervised_target()
        flow = init_flow(12, 0, 2, (6,), seed=1)
        randomize(flow.params, 1, 0.2)
        rng = np.random.default_rng(3)

        def estimates(batch):
            return [reverse_kl_loss(flow, target, rng.normal(size=(batch, 12)), accumulate=False)
                    for _ in range(200)]

        ratio = np.std(estimates(4 * 64)) / np.std(estimates(64))
        assert 0.2 <= ratio <= 0.8

    def test_non_finite_reports_sample(self):
        flow = init_flow(2, 0, 2, (4,), seed=0)

        def target(x):
            v = np.zeros(len(x))
            v[2] = np.nan
            return v, np.zeros_like(x)

        with pytest.raises(NumericError, match="sample 2"):
            reverse_kl_loss(flow, target, np.zeros((4, 2)))


class TestAdam:
    def test_zero_gradients_leave_params(self):
        ps = ParamStore()
        ps.add("w", np.array([1.0, -2.0]))
        adam_step(AdamState(), ps)
        np.testing.assert_array_equal(ps["w"], [1.0, -2.0])

    def test_first_step_closed_form(self):
        ps = ParamStore()
        theta0 = np.array([0.5, -1.0, 2.0, 0.0])
        g = np.array([3.0, -1e-4, 1e-9, 0.7])
        ps.add("w", theta0.copy())
        ps.grad("w")[...] = g
        state = adam_step(AdamState(lr=0.01), ps)
        # bias correction makes m_hat = g and sqrt(v_hat) = |g|
        np.testing.assert_allclose(ps["w"] - theta0, -0.01 * g / (np.abs(g) + 1e-8), rtol=1e-12, atol=1e-18)
        assert state.step == 1

    def test_converges_on_quadratic(self):
        rng = np.random.default_rng(0)
        target = rng.normal(size=10)
        ps = ParamStore()
        ps.add("w", rng.normal(size=10))
        state = AdamState(lr=0.05)
        for _ in range(200):
            ps.zero_grad()
            ps.grad("w")[...] = ps["w"] - target
            adam_step(state, ps)
        assert np.max(np.abs(ps["w"] - target)) < 1e-3

    def test_weight_decay_is_decoupled(self):
        ps = ParamStore()
        ps.add("w", np.array([2.0]))
        adam_step(AdamState(lr=0.1), ps, weight_decay=0.5)
        assert ps["w"][0] == pytest.approx(2.0 * (1 - 0.05), abs=1e-15)


class TestTrain:
    def test_zero_iterations(self):
        T = init_cond_flow(2, 1, 2, (4,), seed=0)
        randomize(T.params, 0)
        before = T.params.flat().copy()
        _, trace = train(TrainConfig("forward-kl", 0, 4, 0), T, (np.ones((8, 2)), np.ones((8, 1))))
        assert trace.values == [] and trace.iterations == 0
        assert T.params.flat().tobytes() == before.tobytes()

    def test_forward_kl_deterministic(self):
        problem = make_supervised_gaussian(0, nx=3, ny=2)
        data = sample_joint(problem, None, 200, seed=1)
        runs = []
        for _ in range(2):
            T = init_cond_flow(3, 2, 2, (8,), seed=0)
            _, trace = train(TrainConfig("forward-kl", 30, 16, seed=5), T, data)
            runs.append((np.array(trace.values).tobytes(), T.params.flat().tobytes()))
        assert runs[0] == runs[1]

    def test_reverse_kl_deterministic_and_decreasing(self):
        problem, y_obs, target = unsupervised_target()
        runs = []
        for _ in range(2):
            S = PinnedFlow(init_flow(12, 0, 2, (8,), seed=0))
            _, trace = train(TrainConfig("reverse-kl", 300, 32, seed=2, lr=5e-3, mode="scratch"), S, target)
            runs.append(np.array(trace.values))
        assert runs[0].tobytes() == runs[1].tobytes()
        assert runs[0][-50:].mean() < runs[0][:50].mean()

    def test_numeric_error_keeps_partial_trace(self):
        calls = {"n": 0}

        def target(x):
            calls["n"] += 1
            bad = calls["n"] > 5
            return np.full(len(x), np.nan if bad else 0.0), np.zeros_like(x)

        S = PinnedFlow(init_flow(2, 0, 2, (4,), seed=0))
        with pytest.raises(NumericError) as info:
            train(TrainConfig("reverse-kl", 20, 4, 0), S, target)
        assert info.value.partial.iterations == 5

    def test_cosine_schedule(self):
        cfg = TrainConfig(iterations=11, lr=1.0, schedule="cosine", final_lr_fraction=0.1)
        assert cfg.lr_at(0) == pytest.approx(1.0)
        assert cfg.lr_at(5) == pytest.approx(0.55)
        assert cfg.lr_at(10) == pytest.approx(0.1)

    @pytest.mark.parametrize("bad", [dict(objective="mle"), dict(batch_size=0), dict(lr=0.0),
                                     dict(schedule="step"), dict(weight_decay=-1.0)])
    def test_validation(self, bad):
        with pytest.raises(ConfigError):
            TrainConfig(**bad).validate()

    def test_batch_larger_than_data(self):
        T = init_cond_flow(2, 1, 2, (4,), seed=0)
        with pytest.raises(ConfigError):
            train(TrainConfig("forward-kl", 1, 64, 0), T, (np.ones((8, 2)), np.ones((8, 1))))
