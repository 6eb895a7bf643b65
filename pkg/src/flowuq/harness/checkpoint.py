"""Binary checkpoints for flows and flow-based samplers.

Layout (all integers little-endian)::

    b"CNF1"  u32 version  u8 kind
    kind 0 Flow:            <flow>
    kind 1 ConditionalFlow: <flow_y> <flow_x>
    kind 2 PinnedFlow:      <flow> <cond>
    kind 3 Preconditioned:  <frozen flow> <cond> <outer flow>
    u64 parameter count, then that many f64 values

    <flow>  = u32 dim, u32 cond_dim, f64 clamp, u32 n_layers, then per layer
              u8 type, u64 seed, u32 n_widths, u32 widths...
    <cond>  = u32 n, then n f64 values

Parameters are written flow by flow in the order listed above, each flow's
coupling nets in layer order (``W0, b0, W1, b1, ...``), which is also the
order in which freshly built models hold them.
"""
from __future__ import annotations

import hashlib
import struct

import numpy as np

from ..diffcore import ParamStore
from ..errors import (
    CheckpointDimError,
    CheckpointError,
    CheckpointMagicError,
    CheckpointTruncatedError,
    CheckpointVersionError,
)
from ..flows import COUPLING, RESTORE, ConditionalFlow, Flow, LayerDescriptor, PinnedFlow
from ..transfer import PreconditionedFlow

MAGIC = b"CNF1"
VERSION = 1
KIND_FLOW, KIND_COND, KIND_PINNED, KIND_PRECOND = 0, 1, 2, 3


def _flow_names(flow: Flow) -> list[str]:
    names = []
    for layer in flow.couplings:
        for i in range(layer.spec.n_layers):
            names += [f"{layer.prefix}W{i}", f"{layer.prefix}b{i}"]
    return names


def _pack_flow(flow: Flow) -> bytes:
    out = [struct.pack("<IIdI", flow.dim, flow.cond_dim, flow.clamp, len(flow.schedule))]
    for desc in flow.schedule:
        widths = desc.hidden_widths
        out.append(struct.pack(f"<BQI{len(widths)}I", desc.kind, desc.seed, len(widths), *widths))
    return b"".join(out)


def _pack_cond(cond) -> bytes:
    cond = np.zeros(0) if cond is None else np.asarray(cond, dtype="<f8")
    return struct.pack("<I", cond.size) + cond.tobytes()


def _structure(model):
    """``(kind, header bytes, [(flow, param store)...])`` for a model."""
    if isinstance(model, ConditionalFlow):
        return KIND_COND, _pack_flow(model.flow_y) + _pack_flow(model.flow_x), [model.flow_y, model.flow_x]
    if isinstance(model, PreconditionedFlow):
        frozen, outer = model.frozen, model.outer.flow
        head = _pack_flow(frozen.flow) + _pack_cond(frozen.cond) + _pack_flow(outer)
        return KIND_PRECOND, head, [frozen.flow, outer]
    if isinstance(model, PinnedFlow):
        return KIND_PINNED, _pack_flow(model.flow) + _pack_cond(model.cond), [model.flow]
    if isinstance(model, Flow):
        return KIND_FLOW, _pack_flow(model), [model]
    raise CheckpointError(f"cannot checkpoint object of type {type(model).__name__}")


def checkpoint_bytes(model) -> bytes:
    kind, head, flows = _structure(model)
    values = [np.ravel(f.params[name]) for f in flows for name in _flow_names(f)]
    payload = np.concatenate(values).astype("<f8") if values else np.zeros(0, "<f8")
    return MAGIC + struct.pack("<IB", VERSION, kind) + head + struct.pack("<Q", payload.size) + payload.tobytes()


def save_checkpoint(model, path) -> str:
    """Write ``model`` to ``path``; returns the file's sha256 hex digest."""
    data = checkpoint_bytes(model)
    with open(path, "wb") as fh:
        fh.write(data)
    return hashlib.sha256(data).hexdigest()


def file_digest(path) -> str:
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.data):
            raise CheckpointTruncatedError(f"checkpoint truncated at byte {len(self.data)}")
        vals = struct.unpack_from(fmt, self.data, self.pos)
        self.pos += size
        return vals

    def flow(self, params: ParamStore, prefix: str) -> Flow:
        dim, cond_dim, clamp, n_layers = self.take("<IIdI")
        if dim < 1:
            raise CheckpointDimError("flow dimension must be positive")
        schedule = []
        for _ in range(n_layers):
            kind, seed, n_w = self.take("<BQI")
            widths = self.take(f"<{n_w}I")
            if kind > RESTORE:
                raise CheckpointError(f"unknown layer type {kind}")
            schedule.append(LayerDescriptor(kind, seed, tuple(widths)))
        if not any(d.kind == COUPLING for d in schedule):
            raise CheckpointError("flow without coupling layers")
        flow = Flow(dim, cond_dim, clamp, schedule, params, prefix)
        for layer in flow.couplings:
            for i in range(layer.spec.n_layers):
                fan_in, fan_out = layer.spec.sizes[i], layer.spec.sizes[i + 1]
                params.add(f"{layer.prefix}W{i}", np.zeros((fan_out, fan_in)))
                params.add(f"{layer.prefix}b{i}", np.zeros(fan_out))
        return flow

    def cond(self, expected: int):
        (n,) = self.take("<I")
        if n != expected:
            raise CheckpointDimError(f"pinned conditioning vector has {n} entries, flow expects {expected}")
        vals = np.array(self.take(f"<{n}d"))
        return vals if n else None


def _fill(flows, reader: _Reader) -> None:
    (count,) = reader.take("<Q")
    expected = sum(f.params[n].size for f in flows for n in _flow_names(f))
    if count != expected:
        raise CheckpointDimError(f"payload holds {count} parameters, architecture needs {expected}")
    end = reader.pos + 8 * count
    if end > len(reader.data):
        raise CheckpointTruncatedError(f"parameter payload truncated ({len(reader.data) - reader.pos} of {8 * count} bytes)")
    if end < len(reader.data):
        raise CheckpointError(f"{len(reader.data) - end} unexpected trailing bytes")
    flat = np.frombuffer(reader.data, dtype="<f8", count=count, offset=reader.pos).astype(np.float64)
    k = 0
    for f in flows:
        for name in _flow_names(f):
            arr = f.params[name]
            arr[...] = flat[k:k + arr.size].reshape(arr.shape)
            k += arr.size


def loads_checkpoint(data: bytes, dims: tuple[int, int] | None = None):
    """Rebuild a model from checkpoint bytes.

    ``dims`` optionally asserts ``(dim, cond_dim)`` for flows and pinned
    samplers, or ``(nx, ny)`` for conditional flows.
    """
    if data[:4] != MAGIC:
        raise CheckpointMagicError("not a flow checkpoint (bad magic)")
    reader = _Reader(data)
    reader.pos = 4
    version, kind = reader.take("<IB")
    if version != VERSION:
        raise CheckpointVersionError(f"checkpoint version {version} unsupported (expected {VERSION})")
    params = ParamStore()
    if kind == KIND_FLOW:
        flow = reader.flow(params, "")
        model, flows, got = flow, [flow], (flow.dim, flow.cond_dim)
    elif kind == KIND_COND:
        fy = reader.flow(params, "y.")
        fx = reader.flow(params, "x.")
        if fx.cond_dim != fy.dim:
            raise CheckpointDimError("flow_x conditioning width does not match flow_y")
        model, flows, got = ConditionalFlow(fx, fy), [fy, fx], (fx.dim, fy.dim)
    elif kind == KIND_PINNED:
        flow = reader.flow(params, "")
        model, flows = PinnedFlow(flow, reader.cond(flow.cond_dim)), [flow]
        got = (flow.dim, flow.cond_dim)
    elif kind == KIND_PRECOND:
        frozen = reader.flow(params, "")
        cond = reader.cond(frozen.cond_dim)
        outer = reader.flow(ParamStore(), "")
        if outer.cond_dim or outer.dim != frozen.dim:
            raise CheckpointDimError("outer flow must be unconditional on the frozen flow's dimension")
        model = PreconditionedFlow(PinnedFlow(frozen, cond), outer)
        flows, got = [frozen, outer], (frozen.dim, frozen.cond_dim)
    else:
        raise CheckpointError(f"unknown model kind {kind}")
    _fill(flows, reader)
    if dims is not None and tuple(dims) != got:
        raise CheckpointDimError(f"checkpoint dims {got} do not match expected {tuple(dims)}")
    return model


def load_checkpoint(path, dims: tuple[int, int] | None = None):
    with open(path, "rb") as fh:
        return loads_checkpoint(fh.read(), dims)
