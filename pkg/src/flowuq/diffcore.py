"""Dense float64 kernel: parameter storage, tanh MLPs with hand-written
reverse mode, and a central finite-difference gradient checker.

Arrays are plain ``numpy.ndarray`` objects in float64. Every MLP routine
accepts either a single vector ``(in_dim,)`` or a batch ``(B, in_dim)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterator

import numpy as np

from .errors import DimensionError, ConfigError, NumericError


def as_array(values, name: str = "array", finite: bool = True) -> np.ndarray:
    """Convert to a float64 array, rejecting NaN/Inf when ``finite``."""
    arr = np.asarray(values, dtype=np.float64)
    if finite and not np.all(np.isfinite(arr)):
        raise NumericError(f"{name} contains non-finite values")
    return arr


class ParamStore:
    """Ordered named parameters with an index-aligned gradient buffer.

    Gradients are accumulated, never overwritten; callers zero them once per
    optimisation step with :meth:`zero_grad`.
    """

    def __init__(self):
        self._values: dict[str, np.ndarray] = {}
        self._grads: dict[str, np.ndarray] = {}

    def add(self, name: str, value) -> np.ndarray:
        if name in self._values:
            raise ConfigError(f"duplicate parameter name {name!r}")
        arr = np.array(value, dtype=np.float64)
        self._values[name] = arr
        self._grads[name] = np.zeros_like(arr)
        return arr

    def __getitem__(self, name: str) -> np.ndarray:
        return self._values[name]

    def __contains__(self, name: str) -> bool:
        return name in self._values

    def __len__(self) -> int:
        return len(self._values)

    def __iter__(self) -> Iterator[str]:
        return iter(self._values)

    def names(self) -> list[str]:
        return list(self._values)

    def grad(self, name: str) -> np.ndarray:
        return self._grads[name]

    def items(self):
        return self._values.items()

    def zero_grad(self) -> None:
        for g in self._grads.values():
            g.fill(0.0)

    @property
    def size(self) -> int:
        return int(sum(v.size for v in self._values.values()))

    def flat(self) -> np.ndarray:
        if not self._values:
            return np.zeros(0)
        return np.concatenate([v.ravel() for v in self._values.values()])

    def flat_grad(self) -> np.ndarray:
        if not self._grads:
            return np.zeros(0)
        return np.concatenate([g.ravel() for g in self._grads.values()])

    def set_flat(self, vec) -> None:
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.size,):
            raise DimensionError(f"expected {self.size} values, got shape {vec.shape}")
        offset = 0
        for v in self._values.values():
            v[...] = vec[offset:offset + v.size].reshape(v.shape)
            offset += v.size

    def copy(self, rename: Callable[[str], str | None] | None = None) -> "ParamStore":
        """Deep copy; ``rename`` maps old names to new ones or ``None`` to drop."""
        out = ParamStore()
        for name, value in self._values.items():
            new = name if rename is None else rename(name)
            if new is not None:
                out.add(new, value.copy())
        return out


@dataclass(frozen=True)
class MlpSpec:
    in_dim: int
    hidden_widths: tuple[int, ...]
    out_dim: int
    activation: str = "tanh"

    def __post_init__(self):
        object.__setattr__(self, "hidden_widths", tuple(int(w) for w in self.hidden_widths))
        if self.in_dim < 1 or self.out_dim < 1:
            raise ConfigError("MLP input and output dims must be positive")
        if not self.hidden_widths or min(self.hidden_widths) < 1:
            raise ConfigError("MLP needs at least one hidden layer of positive width")
        if self.out_dim % 2:
            raise ConfigError("MLP out_dim must be even (paired scale/shift outputs)")
        if self.activation != "tanh":
            raise ConfigError(f"unsupported activation {self.activation!r}")

    @property
    def sizes(self) -> list[int]:
        return [self.in_dim, *self.hidden_widths, self.out_dim]

    @property
    def n_layers(self) -> int:
        return len(self.hidden_widths) + 1

    def param_count(self) -> int:
        s = self.sizes
        return sum(s[i + 1] * s[i] + s[i + 1] for i in range(len(s) - 1))


def init_mlp(spec: MlpSpec, params: ParamStore, rng: np.random.Generator,
             prefix: str = "", zero_last: bool = True) -> None:
    """Glorot-uniform weights, zero biases; last affine layer zeroed if ``zero_last``."""
    sizes = spec.sizes
    for i in range(spec.n_layers):
        fan_in, fan_out = sizes[i], sizes[i + 1]
        if zero_last and i == spec.n_layers - 1:
            w = np.zeros((fan_out, fan_in))
        else:
            s = np.sqrt(6.0 / (fan_in + fan_out))
            w = rng.uniform(-s, s, size=(fan_out, fan_in))
        params.add(f"{prefix}W{i}", w)
        params.add(f"{prefix}b{i}", np.zeros(fan_out))


def _weights(spec: MlpSpec, params: ParamStore, prefix: str, i: int):
    w = params[f"{prefix}W{i}"]
    b = params[f"{prefix}b{i}"]
    sizes = spec.sizes
    if w.shape != (sizes[i + 1], sizes[i]) or b.shape != (sizes[i + 1],):
        raise DimensionError(
            f"layer {i}: expected W{(sizes[i + 1], sizes[i])} b({sizes[i + 1]},), "
            f"got W{w.shape} b{b.shape}"
        )
    return w, b


def mlp_trace(spec: MlpSpec, params: ParamStore, x: np.ndarray, prefix: str = ""):
    """Forward pass keeping every layer input; returns ``(output, inputs)``.

    ``inputs[i]`` is the input of affine layer ``i`` (post-activation for i > 0).
    """
    h = np.asarray(x, dtype=np.float64)
    if h.shape[-1] != spec.in_dim:
        raise DimensionError(f"layer 0: input has {h.shape[-1]} features, expected {spec.in_dim}")
    inputs = []
    for i in range(spec.n_layers):
        w, b = _weights(spec, params, prefix, i)
        inputs.append(h)
        h = h @ w.T + b
        if i < spec.n_layers - 1:
            h = np.tanh(h)
    return h, inputs


def mlp_forward(spec: MlpSpec, params: ParamStore, x, prefix: str = "") -> np.ndarray:
    return mlp_trace(spec, params, x, prefix)[0]


def mlp_backward(spec: MlpSpec, params: ParamStore, x, out_grad, prefix: str = "",
                 inputs: list[np.ndarray] | None = None,
                 accumulate: bool = True) -> np.ndarray:
    """Reverse pass: accumulate dL/dtheta into ``params`` grads, return dL/dx.

    ``inputs`` is the list returned by :func:`mlp_trace`; when omitted the
    forward pass is recomputed from ``x``. With ``accumulate=False`` only the
    input gradient is produced (used for frozen networks).
    """
    if inputs is None:
        _, inputs = mlp_trace(spec, params, x, prefix)
    g = np.asarray(out_grad, dtype=np.float64)
    if g.shape[-1] != spec.out_dim:
        raise DimensionError(
            f"layer {spec.n_layers - 1}: cotangent has {g.shape[-1]} entries, expected {spec.out_dim}"
        )
    for i in reversed(range(spec.n_layers)):
        w, _ = _weights(spec, params, prefix, i)
        u = inputs[i]
        if accumulate:
            if g.ndim == 1:
                params.grad(f"{prefix}W{i}")[...] += np.outer(g, u)
                params.grad(f"{prefix}b{i}")[...] += g
            else:
                params.grad(f"{prefix}W{i}")[...] += g.T @ u
                params.grad(f"{prefix}b{i}")[...] += g.sum(axis=0)
        g = g @ w
        if i > 0:
            # u = tanh(pre-activation)
            g = g * (1.0 - u * u)
    return g


def central_difference(loss_fn: Callable[[ParamStore], float], params: ParamStore,
                       step: float) -> np.ndarray:
    """Central finite-difference gradient over the flattened parameters."""
    theta0 = params.flat()
    fd = np.zeros_like(theta0)
    theta = theta0.copy()
    try:
        for k in range(theta0.size):
            theta[k] = theta0[k] + step
            params.set_flat(theta)
            f_plus = float(loss_fn(params))
            theta[k] = theta0[k] - step
            params.set_flat(theta)
            f_minus = float(loss_fn(params))
            theta[k] = theta0[k]
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise NumericError(f"non-finite loss while perturbing parameter {k}")
            fd[k] = (f_plus - f_minus) / (2.0 * step)
    finally:
        params.set_flat(theta0)
    return fd


def grad_check(loss_fn: Callable[[ParamStore], float], params: ParamStore,
               step: float = 1e-5, grad_fn: Callable[[ParamStore], None] | None = None) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``loss_fn(params)`` must return the loss; analytic gradients are produced
    by ``grad_fn(params)`` (which accumulates into ``params``' grads) or, if
    omitted, by ``loss_fn`` itself as a side effect. Grads are zeroed first.
    """
    if step <= 0:
        raise ConfigError("finite-difference step must be positive")
    params.zero_grad()
    if grad_fn is not None:
        grad_fn(params)
        analytic = params.flat_grad()
        params.zero_grad()
        value = float(loss_fn(params))
    else:
        value = float(loss_fn(params))
        analytic = params.flat_grad()
    if not np.isfinite(value):
        raise NumericError("loss is not finite at the check point")
    params.zero_grad()
    fd = central_difference(loss_fn, params, step)
    params.zero_grad()
    if analytic.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(fd)), 1e-12)
    return float(np.max(np.abs(analytic - fd) / denom))
