"""Inverse problems with known ground truth.

* Linear-Gaussian problems ``y = A x + eps`` with closed-form posterior and
  evidence, plus the out-of-distribution shift used for new observations.
* A brute-force trapezoid oracle for 1-D/2-D densities.
* Image problems: a synthetic layered-image generator, identity (denoising)
  and coordinate-subsampling sensing operators.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NumericError, UnsupportedError
from .flows import LOG_2PI, derive_seed


@dataclass
class GaussianLaw:
    """Data-generating law ``N(mean, cov)`` for the unknowns."""
    mean: np.ndarray
    cov: np.ndarray

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        mean = np.asarray(self.mean, dtype=np.float64)
        cov = np.asarray(self.cov, dtype=np.float64)
        if np.count_nonzero(cov - np.diag(np.diag(cov))) == 0:
            return mean + np.sqrt(np.diag(cov)) * rng.standard_normal((n, mean.size))
        chol = np.linalg.cholesky(cov)
        return mean + rng.standard_normal((n, mean.size)) @ chol.T


class LinearGaussianProblem:
    """``y = A x + eps`` with ``eps ~ N(noise_mean, diag(noise_var))`` and a
    Gaussian prior ``x ~ N(prior_mean, prior_cov)``."""

    def __init__(self, A, noise_mean, noise_var, prior_mean, prior_cov):
        self.A = np.atleast_2d(np.asarray(A, dtype=np.float64))
        ny, nx = self.A.shape
        self.noise_mean = np.broadcast_to(np.asarray(noise_mean, dtype=np.float64), (ny,)).copy()
        self.noise_var = np.broadcast_to(np.asarray(noise_var, dtype=np.float64), (ny,)).copy()
        self.prior_mean = np.broadcast_to(np.asarray(prior_mean, dtype=np.float64), (nx,)).copy()
        prior_cov = np.asarray(prior_cov, dtype=np.float64)
        self.prior_cov = np.diag(np.broadcast_to(prior_cov, (nx,))) if prior_cov.ndim < 2 else prior_cov.copy()
        if self.prior_cov.shape != (nx, nx):
            raise ConfigError(f"prior covariance must be {nx}x{nx}")
        if np.any(self.noise_var <= 0) or np.any(np.diag(self.prior_cov) <= 0):
            raise ConfigError("noise and prior variances must be strictly positive")
        for arr in (self.A, self.noise_mean, self.prior_mean, self.prior_cov):
            if not np.all(np.isfinite(arr)):
                raise ConfigError("problem definition contains non-finite entries")

    @property
    def nx(self) -> int:
        return self.A.shape[1]

    @property
    def ny(self) -> int:
        return self.A.shape[0]

    @property
    def prior(self) -> GaussianLaw:
        return GaussianLaw(self.prior_mean, self.prior_cov)

    def forward(self, x):
        return np.asarray(x) @ self.A.T

    def adjoint(self, r):
        return np.asarray(r) @ self.A


def make_supervised_gaussian(seed: int = 0, nx: int = 12, ny: int = 6) -> LinearGaussianProblem:
    """Prior ``N(1, diag(1..nx))``, noise ``N(0, 0.1 I)``, ``a_ij ~ N(0, 1/nx)``."""
    rng = np.random.default_rng(seed)
    A = rng.normal(0.0, np.sqrt(1.0 / nx), size=(ny, nx))
    return LinearGaussianProblem(A, 0.0, 0.1, np.ones(nx), np.arange(1.0, nx + 1.0))


def make_shifted_problem(base: LinearGaussianProblem):
    """Return ``(law of x', inference problem)`` for the new observations.

    New unknowns follow ``N(3 mu_x, 1.96 Sigma_x^0.3)``; the inference
    problem keeps the base operator, noise and prior.
    """
    cov = base.prior_cov
    if np.count_nonzero(cov - np.diag(np.diag(cov))):
        raise ConfigError("shifted law requires a diagonal prior covariance")
    law = GaussianLaw(3.0 * base.prior_mean, np.diag(1.96 * np.diag(cov) ** 0.3))
    problem = LinearGaussianProblem(base.A, base.noise_mean, base.noise_var,
                                    base.prior_mean, base.prior_cov)
    return law, problem


def sample_joint(problem, law: GaussianLaw | None, n: int, seed: int):
    """Draw ``n`` pairs ``x ~ law`` (prior by default), ``y = A x + eps``.

    Returns arrays ``X (n, nx)`` and ``Y (n, ny)``.
    """
    if n < 1:
        raise ConfigError("need at least one sample")
    rng = np.random.default_rng(seed)
    law = problem.prior if law is None else law
    X = law.sample(rng, n)
    eps = problem.noise_mean + np.sqrt(problem.noise_var) * rng.standard_normal((n, problem.noise_var.size))
    return X, problem.forward(X) + eps


def analytic_posterior(problem: LinearGaussianProblem, y):
    """Conjugate posterior ``(mean, cov)`` of ``x`` given ``y``."""
    y = np.asarray(y, dtype=np.float64)
    A = problem.A
    prior_prec = np.linalg.inv(problem.prior_cov)
    precision = prior_prec + (A.T / problem.noise_var) @ A
    if np.linalg.cond(precision) > 1e12:
        raise NumericError("posterior precision is ill-conditioned")
    cov = np.linalg.inv(precision)
    cov = 0.5 * (cov + cov.T)
    mean = cov @ (prior_prec @ problem.prior_mean + A.T @ ((y - problem.noise_mean) / problem.noise_var))
    return mean, cov


def log_evidence(problem: LinearGaussianProblem, y) -> float:
    """``log N(y; A mu_x + mu_eps, A Sigma_x A^T + Sigma_eps)``."""
    y = np.asarray(y, dtype=np.float64)
    A = problem.A
    cov = A @ problem.prior_cov @ A.T + np.diag(problem.noise_var)
    r = y - A @ problem.prior_mean - problem.noise_mean
    chol = np.linalg.cholesky(cov)
    w = np.linalg.solve(chol, r)
    return float(-0.5 * w @ w - np.sum(np.log(np.diag(chol))) - 0.5 * y.size * LOG_2PI)


@dataclass
class GridMoments:
    mass: float
    log_mass: float
    mean: np.ndarray
    cov: np.ndarray


def _trapezoid_weights(lo, hi, m):
    x = np.linspace(lo, hi, m)
    w = np.full(m, (hi - lo) / (m - 1))
    w[[0, -1]] *= 0.5
    return x, w


def grid_oracle(log_density, box, points: int = 401) -> GridMoments:
    """Trapezoid-rule mass, mean and covariance of ``exp(log_density)``.

    ``log_density`` maps an ``(M, d)`` array to ``(M,)`` log values (a
    ``(values, grads)`` tuple is also accepted). ``box`` is a list of
    ``(lo, hi)`` per dimension; ``d <= 2``.
    """
    box = [tuple(map(float, b)) for b in box]
    dim = len(box)
    if dim < 1 or dim > 2:
        raise UnsupportedError("grid oracle supports 1 or 2 dimensions")
    if points < 3 or points > 401:
        raise ConfigError("points per dimension must be in [3, 401]")
    axes = [_trapezoid_weights(lo, hi, points) for lo, hi in box]
    if dim == 1:
        pts = axes[0][0][:, None]
        w = axes[0][1]
    else:
        gx, gy = np.meshgrid(axes[0][0], axes[1][0], indexing="ij")
        pts = np.column_stack([gx.ravel(), gy.ravel()])
        w = np.outer(axes[0][1], axes[1][1]).ravel()
    out = log_density(pts)
    logp = np.asarray(out[0] if isinstance(out, tuple) else out, dtype=np.float64).reshape(-1)
    top = np.max(logp)
    p = w * np.exp(logp - top)
    total = p.sum()
    mean = p @ pts / total
    centred = pts - mean
    cov = (centred * p[:, None]).T @ centred / total
    log_mass = float(np.log(total) + top)
    return GridMoments(float(np.exp(log_mass)), log_mass, mean, cov)


class SensingOperator:
    """Coordinate subsampling ``B`` (selected rows of the identity) and the
    diagonal 0/1 projector ``A = B^T B``."""

    def __init__(self, n: int, indices):
        idx = np.unique(np.asarray(indices, dtype=np.int64))
        if idx.size != np.size(indices) or (idx.size and (idx[0] < 0 or idx[-1] >= n)):
            raise ConfigError("sensing indices must be unique and within range")
        self.n = int(n)
        self.indices = idx
        self.mask = np.zeros(n)
        self.mask[idx] = 1.0

    def select(self, x):
        return np.asarray(x)[..., self.indices]

    def apply(self, x):
        return np.asarray(x) * self.mask

    def matrix(self) -> np.ndarray:
        return np.diag(self.mask)

    @property
    def trace(self) -> int:
        return int(self.indices.size)


def make_sensing_operator(n: int, rate: float, seed: int) -> SensingOperator:
    if not (0.0 < rate <= 1.0):
        raise ConfigError(f"subsampling rate must lie in (0, 1], got {rate}")
    k = int(np.floor(rate * n + 0.5))
    rng = np.random.default_rng(seed)
    return SensingOperator(n, np.sort(rng.choice(n, size=k, replace=False)))


class ImageProblem:
    """``y = A x + eps`` on flattened ``side x side`` images, with ``A`` the
    identity (``operator=None``) or a subsampling projector."""

    def __init__(self, side: int, noise_var: float, operator: SensingOperator | None = None,
                 noise_mean: float = 0.0):
        self.side = int(side)
        n = self.side ** 2
        if operator is not None and operator.n != n:
            raise ConfigError(f"operator acts on {operator.n} pixels, image has {n}")
        if noise_var <= 0:
            raise ConfigError("noise variance must be positive")
        self.operator = operator
        self.noise_mean = np.full(n, float(noise_mean))
        self.noise_var = np.full(n, float(noise_var))

    @property
    def nx(self) -> int:
        return self.side ** 2

    @property
    def ny(self) -> int:
        return self.side ** 2

    def forward(self, x):
        return np.array(x, dtype=np.float64) if self.operator is None else self.operator.apply(x)

    adjoint = forward

    def observe(self, x, seed: int):
        rng = np.random.default_rng(seed)
        x = np.asarray(x, dtype=np.float64)
        return self.forward(x) + self.noise_mean + np.sqrt(self.noise_var) * rng.standard_normal(x.shape)


def ricker(width: float, half_length: int | None = None) -> np.ndarray:
    """Sampled Ricker wavelet whose central lobe spans ``width`` pixels
    between zero crossings."""
    f = np.sqrt(2.0) / (np.pi * width)
    half = half_length if half_length is not None else int(np.ceil(3.0 * width)) + 1
    t = np.arange(-half, half + 1, dtype=np.float64)
    a = (np.pi * f * t) ** 2
    return (1.0 - 2.0 * a) * np.exp(-a)


def synth_layered_image(n: int, seed: int) -> np.ndarray:
    """Layered, laterally coherent synthetic section, flattened to ``n*n``.

    4-8 dipping interfaces separate constant-valued layers; each column is
    convolved with a Ricker wavelet and the image is normalised to zero mean
    and unit peak magnitude.
    """
    if n < 8:
        raise ConfigError("image side must be at least 8")
    rng = np.random.default_rng(seed)
    n_if = int(rng.integers(4, 9))
    depths = np.sort(rng.uniform(0.05 * n, 0.95 * n, size=n_if))
    regional = rng.uniform(-0.15, 0.15)
    dips = regional + rng.uniform(-0.05, 0.05, size=n_if)
    values = rng.normal(0.0, 1.0, size=n_if + 1)

    sub = 8
    rows = (np.arange(n * sub) + 0.5) / sub
    cols = np.arange(n) - 0.5 * (n - 1)
    surfaces = depths[:, None] + dips[:, None] * cols[None, :]            # (n_if, n)
    layer = (rows[None, :, None] > surfaces[:, None, :]).sum(axis=0)      # (n*sub, n)
    model = values[layer].reshape(n, sub, n).mean(axis=1)

    wavelet = ricker(max(n / 16.0, 1.0))
    h = (wavelet.size - 1) // 2
    image = np.empty_like(model)
    for j in range(n):
        # centred slice of the full convolution; wavelet may outlast a short column
        image[:, j] = np.convolve(model[:, j], wavelet)[h:h + n]
    image -= image.mean()
    peak = np.max(np.abs(image))
    if peak == 0.0:
        raise NumericError("degenerate synthetic image")
    image /= peak
    return image.ravel()


def image_corpus(n: int, count: int, seed: int, split: str = "train") -> np.ndarray:
    """``count`` synthetic images; train and test draw from disjoint seed streams."""
    if split not in ("train", "test"):
        raise ConfigError(f"unknown split {split!r}")
    tag = 0 if split == "train" else 1
    return np.stack([synth_layered_image(n, derive_seed(seed, tag, i)) for i in range(count)])


def make_image_problems(n: int = 16, seed: int = 0, rate: float = 0.3):
    """Supervised denoising (noise variance 1.2) and unsupervised subsampled
    problem (rate 0.3, noise variance 0.2) on ``n x n`` images."""
    supervised = ImageProblem(n, 1.2)
    unsupervised = ImageProblem(n, 0.2, make_sensing_operator(n * n, rate, seed))
    return supervised, unsupervised
