"""Training objectives, log-posterior targets, Adam and the training loop.

Forward KL fits a conditional flow to joint samples (amortised posterior).
Reverse KL fits a sampler to an unnormalised log-posterior for one fixed
observation. Both losses return the batch-mean objective and accumulate
exact gradients into the model's parameter store.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .diffcore import ParamStore
from .errors import ConfigError, NumericError
from .flows import LOG_2PI, ConditionalFlow, Flow, PinnedFlow


def _first_bad(terms) -> int:
    return int(np.flatnonzero(~np.isfinite(terms))[0])


def forward_kl_loss(T: ConditionalFlow, x, y, accumulate: bool = True) -> float:
    """Batch mean of ``0.5 * (|z_x|^2 + |z_y|^2) - log|det J_T(x, y)|``."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    if x.shape[0] == 0 or x.shape[0] != y.shape[0]:
        raise ConfigError("forward-KL batch must be non-empty with matching x/y rows")
    tape_x, tape_y = [], []
    pair = T.forward(x, y, tape_x, tape_y)
    terms = 0.5 * (np.sum(pair.z_x ** 2, axis=1) + np.sum(pair.z_y ** 2, axis=1)) - pair.logdet
    if not np.all(np.isfinite(terms)):
        raise NumericError(f"non-finite forward-KL term at sample {_first_bad(terms)}")
    if accumulate:
        b = x.shape[0]
        g_ld = np.full(b, -1.0 / b)
        T.flow_x.backward(tape_x, pair.z_x / b, g_ld)
        T.flow_y.backward(tape_y, pair.z_y / b, g_ld)
    return float(terms.mean())


def gaussian_log_likelihood(problem, x, y):
    """``log N(y; A x + mu_eps, diag(var_eps))`` and its gradient in ``x``.

    ``x`` may be a vector or a batch; ``y`` is broadcast against it.
    """
    x = np.asarray(x, dtype=np.float64)
    r = np.asarray(y, dtype=np.float64) - problem.forward(x) - problem.noise_mean
    var = problem.noise_var
    value = (-0.5 * np.sum(r * r / var, axis=-1) - 0.5 * np.sum(np.log(var))
             - 0.5 * var.size * LOG_2PI)
    return value, problem.adjoint(r / var)


class GaussianPrior:
    """``N(mean, cov)`` log-density with gradient."""

    def __init__(self, mean, cov):
        self.mean = np.asarray(mean, dtype=np.float64)
        cov = np.asarray(cov, dtype=np.float64)
        cov = np.diag(np.broadcast_to(cov, self.mean.shape)) if cov.ndim < 2 else cov
        self.precision = np.linalg.inv(cov)
        sign, logdet = np.linalg.slogdet(cov)
        if sign <= 0:
            raise ConfigError("prior covariance must be positive definite")
        self._const = -0.5 * logdet - 0.5 * self.mean.size * LOG_2PI

    def __call__(self, x):
        d = np.asarray(x, dtype=np.float64) - self.mean
        pd = d @ self.precision
        return -0.5 * np.sum(pd * d, axis=-1) + self._const, -pd


class FlowPrior:
    """Amortised posterior ``p_T(x | y_cond)`` reused as a prior; the
    gradient in ``x`` runs through ``flow_x`` without touching T's grads."""

    def __init__(self, T: ConditionalFlow, y_cond):
        self.T = T
        self.y_cond = np.asarray(y_cond, dtype=np.float64)

    def __call__(self, x):
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        xb = x[None, :] if single else x
        tape = []
        z, ld = self.T.flow_x.forward(xb, self.y_cond, tape)
        value = -0.5 * np.sum(z * z, axis=1) - 0.5 * self.T.nx * LOG_2PI + ld
        grad, _ = self.T.flow_x.backward(tape, -z, np.ones(xb.shape[0]), accumulate=False)
        return (float(value[0]), grad[0]) if single else (value, grad)


@dataclass
class LogPosteriorTarget:
    """``x -> (log p(y'|x) + log p_prior(x), gradient)``, unnormalised."""
    likelihood: Callable
    prior: Callable
    dim: int

    def __call__(self, x):
        lv, lg = self.likelihood(x)
        pv, pg = self.prior(x)
        return lv + pv, lg + pg


def make_log_posterior(problem, prior, y_obs) -> LogPosteriorTarget:
    """Combine the Gaussian likelihood of ``problem`` at ``y_obs`` with a prior.

    ``prior`` is a :class:`GaussianPrior`, a :class:`FlowPrior`, or any
    callable with the same ``x -> (value, grad)`` contract.
    """
    y_obs = np.asarray(y_obs, dtype=np.float64)
    if y_obs.shape[-1] != problem.ny:
        raise ConfigError(f"observation has {y_obs.shape[-1]} entries, problem expects {problem.ny}")
    if isinstance(prior, FlowPrior) and prior.T.nx != problem.nx:
        raise ConfigError("flow prior dimension does not match the problem")
    return LogPosteriorTarget(lambda x: gaussian_log_likelihood(problem, x, y_obs), prior, problem.nx)


def reverse_kl_loss(S, target, z, accumulate: bool = True) -> float:
    """Batch mean of ``-log p(S(z) | y') - log|det J_S(z)|``.

    ``S`` is any sampler exposing ``sample(z, tape)`` and
    ``sample_backward(tape, g_x, g_logdet)``; a bare unconditional
    :class:`Flow` is used through its inverse direction.
    """
    if isinstance(S, Flow):
        S = PinnedFlow(S)
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    tape = []
    x, ld = S.sample(z, tape)
    logp, grad = target(x)
    terms = -logp - ld
    if not np.all(np.isfinite(terms)):
        raise NumericError(f"non-finite reverse-KL term at sample {_first_bad(terms)}")
    if accumulate:
        b = z.shape[0]
        S.sample_backward(tape, -grad / b, np.full(b, -1.0 / b))
    return float(terms.mean())


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state: AdamState, params: ParamStore, lr: float | None = None,
              weight_decay: float = 0.0) -> AdamState:
    """One bias-corrected Adam update in place (``lr`` overrides the state's).

    ``weight_decay`` applies decoupled shrinkage ``theta -= lr * wd * theta``.
    """
    state.step += 1
    lr = state.lr if lr is None else lr
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    for name, value in params.items():
        g = params.grad(name)
        if name not in state.m:
            state.m[name] = np.zeros_like(value)
            state.v[name] = np.zeros_like(value)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        if weight_decay:
            value *= 1.0 - lr * weight_decay
        value -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return state


@dataclass
class LossTrace:
    values: list = field(default_factory=list)
    seed: int = 0
    mode: str = "scratch"
    batch_size: int = 0
    wall_clock: float = 0.0

    @property
    def iterations(self) -> int:
        return len(self.values)


@dataclass
class TrainConfig:
    objective: str = "reverse-kl"
    iterations: int = 1000
    batch_size: int = 32
    seed: int = 0
    lr: float = 1e-3
    schedule: str = "constant"
    final_lr_fraction: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    mode: str = "scratch"

    def validate(self) -> None:
        if self.objective not in ("forward-kl", "reverse-kl"):
            raise ConfigError(f"unknown objective {self.objective!r}")
        if self.iterations < 0 or self.batch_size < 1:
            raise ConfigError("iterations must be >= 0 and batch size >= 1")
        if self.weight_decay < 0:
            raise ConfigError("weight decay must be non-negative")
        if self.lr <= 0:
            raise ConfigError("learning rate must be positive")
        if self.schedule not in ("constant", "cosine"):
            raise ConfigError(f"unknown lr schedule {self.schedule!r}")

    def lr_at(self, it: int) -> float:
        if self.schedule == "constant" or self.iterations <= 1:
            return self.lr
        frac = it / (self.iterations - 1)
        floor = self.final_lr_fraction
        return self.lr * (floor + (1.0 - floor) * 0.5 * (1.0 + np.cos(np.pi * frac)))


def train(config: TrainConfig, model, source, callback=None):
    """Run ``config.iterations`` Adam steps; returns ``(model, LossTrace)``.

    For ``forward-kl`` the model is a :class:`ConditionalFlow` and ``source``
    is a pair of arrays ``(X, Y)`` from which minibatches are drawn without
    replacement. For ``reverse-kl`` the model is a sampler and ``source`` a
    log-posterior target; fresh standard-normal latents are drawn each step.
    The model is updated in place. On a non-finite loss a
    :class:`NumericError` is raised whose ``partial`` holds the trace so far.
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    trace = LossTrace([], config.seed, config.mode, config.batch_size)
    state = AdamState(config.lr, config.beta1, config.beta2, config.eps)
    params = model.params
    if config.objective == "forward-kl":
        X, Y = (np.asarray(a, dtype=np.float64) for a in source)
        n = X.shape[0]
        if n < config.batch_size:
            raise ConfigError(f"batch size {config.batch_size} exceeds the {n} stored pairs")
    start = time.perf_counter()
    for it in range(config.iterations):
        params.zero_grad()
        try:
            if config.objective == "forward-kl":
                idx = rng.choice(n, size=config.batch_size, replace=False)
                loss = forward_kl_loss(model, X[idx], Y[idx])
            else:
                z = rng.standard_normal((config.batch_size, model.dim))
                loss = reverse_kl_loss(model, source, z)
        except NumericError as err:
            trace.wall_clock = time.perf_counter() - start
            raise NumericError(f"iteration {it}: {err}", partial=trace) from err
        trace.values.append(loss)
        adam_step(state, params, config.lr_at(it), config.weight_decay)
        if callback is not None:
            callback(it, loss)
    params.zero_grad()
    trace.wall_clock = time.perf_counter() - start
    return model, trace
