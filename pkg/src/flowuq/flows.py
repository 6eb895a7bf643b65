"""Affine-coupling normalizing flows with exact log-determinants.

A :class:`Flow` alternates coupling layers with fixed coordinate
permutations. Each direction (``forward``: data to latent, ``inverse``:
latent to data) has a matching reverse-mode pass that consumes a tape
recorded during evaluation. All methods are batched: arrays are ``(B, d)``.

:class:`ConditionalFlow` is the triangular pair ``(flow_x, flow_y)`` where
``z_y = flow_y(y)`` and ``z_x = flow_x(x | y)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffcore import MlpSpec, ParamStore, init_mlp, mlp_backward, mlp_trace
from .errors import ConfigError, DimensionError, NumericError

LOG_2PI = float(np.log(2.0 * np.pi))

COUPLING, REVERSE, RANDOM, RESTORE = 0, 1, 2, 3
_KIND_NAMES = {COUPLING: "coupling", REVERSE: "reverse", RANDOM: "random", RESTORE: "restore"}


def derive_seed(*keys: int) -> int:
    """Stable 64-bit seed from a tuple of non-negative integers."""
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1, np.uint64)[0])


@dataclass(frozen=True)
class LayerDescriptor:
    """Serializable description of one layer (what a checkpoint stores)."""
    kind: int
    seed: int = 0
    hidden_widths: tuple[int, ...] = ()

    @property
    def name(self) -> str:
        return _KIND_NAMES[self.kind]


def _split(dim: int) -> tuple[int, int]:
    if dim == 1:
        return 0, 1
    d_a = (dim + 1) // 2
    return d_a, dim - d_a


class CouplingLayer:
    """Affine coupling ``v_b' = v_b * exp(s~) + t`` with ``(s, t) = net(v_a ++ cond)``.

    The raw scale is soft-clamped, ``s~ = clamp * tanh(s / clamp)``. For
    ``dim == 1`` the single coordinate is transformed and the conditioner
    sees only ``cond`` (or a constant zero when there is no ``cond``).
    """

    def __init__(self, dim: int, cond_dim: int, hidden_widths, clamp: float,
                 params: ParamStore, prefix: str, index: int = 0):
        self.dim = dim
        self.cond_dim = cond_dim
        self.d_a, self.d_b = _split(dim)
        self.clamp = float(clamp)
        self.params = params
        self.prefix = prefix
        self.index = index
        self.spec = MlpSpec(max(self.d_a + cond_dim, 1), tuple(hidden_widths), 2 * self.d_b)

    def _net_input(self, v_a, cond, batch):
        parts = [v_a] if self.d_a else []
        if self.cond_dim:
            if cond is None:
                raise DimensionError(f"coupling layer {self.index}: conditioning input required")
            cond = np.asarray(cond, dtype=np.float64)
            if cond.shape[-1] != self.cond_dim:
                raise DimensionError(
                    f"coupling layer {self.index}: cond has {cond.shape[-1]} entries, expected {self.cond_dim}")
            parts.append(np.broadcast_to(cond, (batch, self.cond_dim)))
        if not parts:
            return np.zeros((batch, 1))
        return parts[0] if len(parts) == 1 else np.concatenate(parts, axis=1)

    def _conditioner(self, v_a, cond, batch):
        h = self._net_input(v_a, cond, batch)
        st, inputs = mlp_trace(self.spec, self.params, h, self.prefix)
        if not np.all(np.isfinite(st)):
            raise NumericError(f"coupling layer {self.index}: non-finite conditioner output")
        th = np.tanh(st[:, :self.d_b] / self.clamp)
        return self.clamp * th, st[:, self.d_b:], th, inputs, h

    def forward(self, v, cond=None, tape=None):
        d_a = self.d_a
        v_a, v_b = v[:, :d_a], v[:, d_a:]
        s, t, th, inputs, h = self._conditioner(v_a, cond, v.shape[0])
        es = np.exp(s)
        out = np.concatenate([v_a, v_b * es + t], axis=1)
        if tape is not None:
            tape.append((self, "fwd", (h, inputs, th, es, v_b)))
        return out, s.sum(axis=1)

    def inverse(self, out, cond=None, tape=None):
        d_a = self.d_a
        o_a, o_b = out[:, :d_a], out[:, d_a:]
        s, t, th, inputs, h = self._conditioner(o_a, cond, out.shape[0])
        ens = np.exp(-s)
        v_b = (o_b - t) * ens
        if tape is not None:
            tape.append((self, "inv", (h, inputs, th, ens, v_b)))
        return np.concatenate([o_a, v_b], axis=1), -s.sum(axis=1)

    def _net_backward(self, h, inputs, th, g_s, g_t, accumulate):
        g_raw = g_s * (1.0 - th * th)
        g_h = mlp_backward(self.spec, self.params, h, np.concatenate([g_raw, g_t], axis=1),
                           self.prefix, inputs=inputs, accumulate=accumulate)
        if self.d_a + self.cond_dim == 0:
            return np.zeros((h.shape[0], 0)), None
        g_a = g_h[:, :self.d_a]
        g_c = g_h[:, self.d_a:] if self.cond_dim else None
        return g_a, g_c

    def backward(self, direction, cache, g_out, g_logdet, accumulate=True):
        """Pull back ``(dL/d output, dL/d logdet)`` through one recorded call."""
        h, inputs, th, e, v_b = cache
        d_a = self.d_a
        if direction == "fwd":
            # out_b = v_b * es + t ; logdet = sum(s)
            g_ob = g_out[:, d_a:]
            g_in_b = g_ob * e
            g_s = g_ob * v_b * e + g_logdet[:, None]
            g_t = g_ob
        else:
            # v_b = (o_b - t) * exp(-s) ; logdet = -sum(s)
            g_vb = g_out[:, d_a:]
            g_in_b = g_vb * e
            g_t = -g_in_b
            g_s = -g_vb * v_b - g_logdet[:, None]
        g_a, g_c = self._net_backward(h, inputs, th, g_s, g_t, accumulate)
        g_in = np.concatenate([g_out[:, :d_a] + g_a, g_in_b], axis=1)
        return g_in, g_c


class Permutation:
    """Fixed coordinate permutation ``out = v[:, perm]`` (log-det 0)."""

    def __init__(self, kind: int, perm: np.ndarray, seed: int = 0):
        self.kind = kind
        self.seed = seed
        self.perm = np.asarray(perm, dtype=np.intp)
        self.inv = np.argsort(self.perm)

    def forward(self, v, cond=None, tape=None):
        if tape is not None:
            tape.append((self, "fwd", None))
        return v[:, self.perm], np.zeros(v.shape[0])

    def inverse(self, out, cond=None, tape=None):
        if tape is not None:
            tape.append((self, "inv", None))
        return out[:, self.inv], np.zeros(out.shape[0])

    def backward(self, direction, cache, g_out, g_logdet, accumulate=True):
        idx = self.inv if direction == "fwd" else self.perm
        return g_out[:, idx], None


def default_schedule(dim: int, n_layers: int, hidden_widths, seed: int,
                     restore_order: bool = False) -> list[LayerDescriptor]:
    """Couplings separated by permutations: reversal after even-indexed
    couplings, seeded random permutation after odd ones. ``restore_order``
    appends the inverse of the composite permutation so that a flow with
    zeroed conditioners is exactly the identity."""
    widths = tuple(int(w) for w in hidden_widths)
    out = []
    for i in range(n_layers):
        out.append(LayerDescriptor(COUPLING, 0, widths))
        if i < n_layers - 1:
            if i % 2 == 0:
                out.append(LayerDescriptor(REVERSE))
            else:
                out.append(LayerDescriptor(RANDOM, derive_seed(seed, i)))
    if restore_order:
        out.append(LayerDescriptor(RESTORE))
    return out


class Flow:
    """Composition of coupling layers and permutations on ``dim`` coordinates,
    optionally conditioned on a ``cond_dim`` vector fed to every conditioner."""

    def __init__(self, dim: int, cond_dim: int, clamp: float,
                 schedule: list[LayerDescriptor], params: ParamStore, prefix: str = ""):
        if dim < 1 or cond_dim < 0:
            raise ConfigError(f"invalid flow dims (dim={dim}, cond_dim={cond_dim})")
        if clamp <= 0:
            raise ConfigError("clamp must be positive")
        self.dim = dim
        self.cond_dim = cond_dim
        self.clamp = float(clamp)
        self.schedule = list(schedule)
        self.params = params
        self.prefix = prefix
        self.layers = []
        composite = np.arange(dim)
        n_coupling = 0
        for desc in self.schedule:
            if desc.kind == COUPLING:
                self.layers.append(CouplingLayer(dim, cond_dim, desc.hidden_widths, clamp, params,
                                                 f"{prefix}c{n_coupling}.", n_coupling))
                n_coupling += 1
                continue
            if desc.kind == REVERSE:
                perm = np.arange(dim)[::-1].copy()
            elif desc.kind == RANDOM:
                perm = np.random.default_rng(desc.seed).permutation(dim)
            elif desc.kind == RESTORE:
                perm = np.argsort(composite)
            else:
                raise ConfigError(f"unknown layer kind {desc.kind}")
            composite = composite[perm]
            self.layers.append(Permutation(desc.kind, perm, desc.seed))

    @property
    def couplings(self) -> list[CouplingLayer]:
        return [layer for layer in self.layers if isinstance(layer, CouplingLayer)]

    def copy(self, prefix: str | None = None, params: ParamStore | None = None) -> "Flow":
        """Deep copy with its own parameter store (optionally re-prefixed)."""
        prefix = self.prefix if prefix is None else prefix
        plen = len(self.prefix)
        if params is None:
            params = ParamStore()
        for name, value in self.params.items():
            if name.startswith(self.prefix):
                params.add(prefix + name[plen:], value.copy())
        return Flow(self.dim, self.cond_dim, self.clamp, self.schedule, params, prefix)

    def own_names(self) -> list[str]:
        return [n for n in self.params.names() if n.startswith(self.prefix)]

    def _check(self, v):
        v = np.asarray(v, dtype=np.float64)
        if v.ndim != 2 or v.shape[1] != self.dim:
            raise DimensionError(f"flow expects (B, {self.dim}) input, got {v.shape}")
        return v

    def forward(self, v, cond=None, tape=None):
        """Data to latent. Returns ``(z, logdet)`` with ``logdet`` of shape ``(B,)``."""
        z = self._check(v)
        total = np.zeros(z.shape[0])
        for layer in self.layers:
            z, ld = layer.forward(z, cond, tape)
            total += ld
        return z, total

    def inverse(self, z, cond=None, tape=None):
        """Latent to data. ``logdet`` is that of the inverse map."""
        v = self._check(z)
        total = np.zeros(v.shape[0])
        for layer in reversed(self.layers):
            v, ld = layer.inverse(v, cond, tape)
            total += ld
        return v, total

    def backward(self, tape, g_out, g_logdet, accumulate=True):
        """Reverse pass over a tape recorded by :meth:`forward` or :meth:`inverse`.

        Returns ``(dL/d input, dL/d cond)``; cond gradient is ``None`` when
        the flow is unconditional.
        """
        g = np.asarray(g_out, dtype=np.float64)
        g_logdet = np.broadcast_to(np.asarray(g_logdet, dtype=np.float64), (g.shape[0],))
        g_cond = None
        for layer, direction, cache in reversed(tape):
            g, g_c = layer.backward(direction, cache, g, g_logdet, accumulate)
            if g_c is not None:
                g_cond = g_c if g_cond is None else g_cond + g_c
        return g, g_cond


def build_flow(dim: int, cond_dim: int = 0, n_layers: int = 8, hidden_widths=(64,),
               clamp: float = 2.0, seed: int = 0, restore_order: bool = False,
               params: ParamStore | None = None, prefix: str = "") -> Flow:
    """Assemble and initialise a flow without the even-depth restriction."""
    if n_layers < 1:
        raise ConfigError("a flow needs at least one coupling layer")
    schedule = default_schedule(dim, n_layers, hidden_widths, seed, restore_order)
    params = ParamStore() if params is None else params
    flow = Flow(dim, cond_dim, clamp, schedule, params, prefix)
    rng = np.random.default_rng(derive_seed(seed, 1 << 20))
    for layer in flow.couplings:
        init_mlp(layer.spec, params, rng, layer.prefix, zero_last=True)
    return flow


def init_flow(dim: int, cond_dim: int = 0, n_layers: int = 8, hidden_widths=(64,),
              clamp: float = 2.0, seed: int = 0, restore_order: bool = False) -> Flow:
    """Fresh flow whose conditioners output zero, i.e. a pure permutation."""
    if n_layers < 2 or n_layers % 2:
        raise ConfigError(f"n_layers must be even and >= 2, got {n_layers}")
    if dim < 1 or cond_dim < 0:
        raise ConfigError(f"invalid flow dims (dim={dim}, cond_dim={cond_dim})")
    if not hidden_widths or min(hidden_widths) < 1:
        raise ConfigError("hidden_widths must be a non-empty list of positive widths")
    return build_flow(dim, cond_dim, n_layers, hidden_widths, clamp, seed, restore_order)


@dataclass
class LatentPair:
    z_x: np.ndarray
    z_y: np.ndarray
    logdet: np.ndarray | float


class ConditionalFlow:
    """Triangular map ``T(x, y) = (T_x(x, y), T_y(y))`` sharing one parameter store."""

    def __init__(self, flow_x: Flow, flow_y: Flow):
        if flow_x.cond_dim != flow_y.dim:
            raise ConfigError("flow_x must be conditioned on a vector of flow_y's dimension")
        if flow_x.params is not flow_y.params:
            raise ConfigError("flow_x and flow_y must share a parameter store")
        self.flow_x = flow_x
        self.flow_y = flow_y
        self.params = flow_x.params

    @property
    def nx(self) -> int:
        return self.flow_x.dim

    @property
    def ny(self) -> int:
        return self.flow_y.dim

    def forward(self, x, y, tape_x=None, tape_y=None):
        z_y, ld_y = self.flow_y.forward(y, None, tape_y)
        z_x, ld_x = self.flow_x.forward(x, y, tape_x)
        return LatentPair(z_x, z_y, ld_x + ld_y)

    def sample(self, y, z_x):
        return self.flow_x.inverse(z_x, y)[0]

    def log_density(self, x, y):
        z_x, ld_x = self.flow_x.forward(x, y)
        return -0.5 * np.sum(z_x * z_x, axis=1) - 0.5 * self.nx * LOG_2PI + ld_x

    def copy(self) -> "ConditionalFlow":
        params = ParamStore()
        fy = self.flow_y.copy(params=params)
        fx = self.flow_x.copy(params=params)
        return ConditionalFlow(fx, fy)


def init_cond_flow(nx: int, ny: int, n_layers: int = 8, hidden_widths=(64,),
                   clamp: float = 2.0, seed: int = 0) -> ConditionalFlow:
    if n_layers < 2 or n_layers % 2:
        raise ConfigError(f"n_layers must be even and >= 2, got {n_layers}")
    if nx < 1 or ny < 1:
        raise ConfigError(f"invalid conditional flow dims (nx={nx}, ny={ny})")
    params = ParamStore()
    fy = build_flow(ny, 0, n_layers, hidden_widths, clamp, derive_seed(seed, 0), params=params, prefix="y.")
    fx = build_flow(nx, ny, n_layers, hidden_widths, clamp, derive_seed(seed, 1), params=params, prefix="x.")
    return ConditionalFlow(fx, fy)


# Single-vector convenience wrappers. Each accepts a vector or a batch and
# returns matching shapes (scalar log-det for a vector input).

def _batched(v):
    v = np.asarray(v, dtype=np.float64)
    return (v[None, :], True) if v.ndim == 1 else (v, False)


def _cond(c):
    return None if c is None or np.size(c) == 0 else np.asarray(c, dtype=np.float64)


def coupling_forward(layer: CouplingLayer, v, cond=None):
    vb, single = _batched(v)
    out, ld = layer.forward(vb, _cond(cond))
    return (out[0], float(ld[0])) if single else (out, ld)


def coupling_inverse(layer: CouplingLayer, v_out, cond=None):
    vb, single = _batched(v_out)
    v, _ = layer.inverse(vb, _cond(cond))
    return v[0] if single else v


def flow_forward(f: Flow, v, cond=None):
    vb, single = _batched(v)
    z, ld = f.forward(vb, _cond(cond))
    return (z[0], float(ld[0])) if single else (z, ld)


def flow_inverse(f: Flow, z, cond=None):
    zb, single = _batched(z)
    v, _ = f.inverse(zb, _cond(cond))
    return v[0] if single else v


def cond_flow_forward(T: ConditionalFlow, x, y) -> LatentPair:
    xb, single = _batched(x)
    yb, _ = _batched(y)
    if yb.shape[0] == 1 and xb.shape[0] > 1:
        yb = np.repeat(yb, xb.shape[0], axis=0)
    pair = T.forward(xb, yb)
    if single:
        return LatentPair(pair.z_x[0], pair.z_y[0], float(pair.logdet[0]))
    return pair


def conditional_sample(T: ConditionalFlow, y, z_x):
    """x-component of ``T^{-1}(z_x, T_y(y))``; with the triangular structure
    this is ``flow_x`` inverted at ``cond = y``."""
    zb, single = _batched(z_x)
    x = T.sample(np.asarray(y, dtype=np.float64), zb)
    return x[0] if single else x


def conditional_log_density(T: ConditionalFlow, x, y):
    """``log N(z_x; 0, I) + log|det dz_x/dx|`` at ``cond = y`` (normalised in x)."""
    xb, single = _batched(x)
    val = T.log_density(xb, np.asarray(y, dtype=np.float64))
    return float(val[0]) if single else val



class PinnedFlow:
    """Sampler ``x = flow^{-1}(z; cond)`` with the conditioning input held fixed.

    This is the generator interface consumed by the reverse-KL objective:
    ``sample`` records a tape, ``sample_backward`` accumulates parameter
    gradients from ``(dL/dx, dL/dlogdet)``.
    """

    def __init__(self, flow: Flow, cond=None):
        if flow.cond_dim and (cond is None or np.shape(cond)[-1] != flow.cond_dim):
            raise ConfigError(f"flow needs a pinned conditioning vector of length {flow.cond_dim}")
        if not flow.cond_dim and cond is not None and np.size(cond):
            raise ConfigError("unconditional flow cannot take a pinned conditioning vector")
        self.flow = flow
        self.cond = None if not flow.cond_dim else np.array(cond, dtype=np.float64)

    @property
    def params(self) -> ParamStore:
        return self.flow.params

    @property
    def dim(self) -> int:
        return self.flow.dim

    def sample(self, z, tape=None):
        return self.flow.inverse(z, self.cond, tape)

    def sample_backward(self, tape, g_x, g_logdet):
        self.flow.backward(tape, g_x, g_logdet)
