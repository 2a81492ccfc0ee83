"""Minimal dense-tensor compute kernel with reverse-mode differentiation.

Every trainable network in the repo (denoiser, reward model, style
autoencoder) is an MLP built on this module. The op vocabulary is kept
small on purpose: affine layers, ReLU/tanh, softplus, elementwise
arithmetic, sum/mean reductions, square, log, sqrt, concat and reshape.
That is exactly the set the losses in this repo need, and nothing more,
so the whole kernel stays auditable.

All data is float64. Gradients are computed by walking the graph that the
ops record; a `Tape` ties one forward pass to the `ParamSet` it read from
and can be consumed exactly once.
"""

from __future__ import annotations

import hashlib
import json
import logging
import struct
from dataclasses import dataclass, field

import numpy as np

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"TLCK"
CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    """Raised when tensor dimensions do not line up."""


class TapeError(RuntimeError):
    """Raised when a tape is reused or has gone stale."""


class CheckpointError(RuntimeError):
    """Raised on unreadable, corrupt or incompatible checkpoint files."""


# ---------------------------------------------------------------------------
# Tensor and ops
# ---------------------------------------------------------------------------


class Tensor:
    """A node in the autodiff graph wrapping a float64 ndarray.

    `parents` and `grad_fns` record, per parent, how to push an output
    gradient back through the op that produced this node. Leaf tensors
    (parameters, constants) have no parents.
    """

    __slots__ = ("data", "parents", "grad_fns")

    def __init__(self, data, parents=(), grad_fns=()):
        self.data = np.asarray(data, dtype=np.float64)
        self.parents = parents
        self.grad_fns = grad_fns

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, leaf={not self.parents})"

    # operator sugar; non-Tensor operands become constant leaves
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __neg__(self):
        return mul(self, _as_tensor(-1.0))


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def add(a: Tensor, b: Tensor) -> Tensor:
    out = np.add(a.data, b.data)
    return Tensor(out, (a, b), (
        lambda g: _unbroadcast(g, a.data.shape),
        lambda g: _unbroadcast(g, b.data.shape),
    ))


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = np.subtract(a.data, b.data)
    return Tensor(out, (a, b), (
        lambda g: _unbroadcast(g, a.data.shape),
        lambda g: _unbroadcast(-g, b.data.shape),
    ))


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = np.multiply(a.data, b.data)
    return Tensor(out, (a, b), (
        lambda g: _unbroadcast(g * b.data, a.data.shape),
        lambda g: _unbroadcast(g * a.data, b.data.shape),
    ))


def matmul(x: Tensor, w: Tensor) -> Tensor:
    """x @ w with x of shape (..., n) and w of shape (n, m)."""
    if x.data.shape[-1] != w.data.shape[0]:
        raise ShapeError(
            f"matmul: input last dim {x.data.shape[-1]} != weight rows {w.data.shape[0]} "
            f"(input shape {x.data.shape}, weight shape {w.data.shape})"
        )
    out = x.data @ w.data

    def grad_x(g):
        return g @ w.data.T

    def grad_w(g):
        xd = x.data
        if xd.ndim == 1:
            return np.outer(xd, g)
        # collapse any batch dims
        return xd.reshape(-1, xd.shape[-1]).T @ g.reshape(-1, g.shape[-1])

    return Tensor(out, (x, w), (grad_x, grad_w))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return Tensor(np.where(mask, a.data, 0.0), (a,), (lambda g: g * mask,))


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.data)
    return Tensor(t, (a,), (lambda g: g * (1.0 - t * t),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form is stable for large |x|
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def softplus(a: Tensor) -> Tensor:
    """log(1 + exp(x)), computed stably. Note -softplus(-x) = log(sigmoid(x))."""
    out = np.logaddexp(0.0, a.data)
    return Tensor(out, (a,), (lambda g: g * _sigmoid(a.data),))


def square(a: Tensor) -> Tensor:
    return Tensor(a.data * a.data, (a,), (lambda g: g * 2.0 * a.data,))


def log(a: Tensor) -> Tensor:
    return Tensor(np.log(a.data), (a,), (lambda g: g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return Tensor(out, (a,), (lambda g: g * 0.5 / out,))


def tsum(a: Tensor, axis=None) -> Tensor:
    out = a.data.sum(axis=axis)

    def grad(g):
        if axis is None:
            return np.broadcast_to(g, a.data.shape).copy()
        return np.broadcast_to(np.expand_dims(g, axis), a.data.shape).copy()

    return Tensor(out, (a,), (grad,))


def tmean(a: Tensor, axis=None) -> Tensor:
    n = a.data.size if axis is None else a.data.shape[axis]
    return mul(tsum(a, axis=axis), _as_tensor(1.0 / n))


def concat(tensors, axis=-1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def make_grad(i):
        def grad(g):
            index = [slice(None)] * g.ndim
            index[axis] = slice(offsets[i], offsets[i + 1])
            return g[tuple(index)]

        return grad

    return Tensor(out, tuple(tensors), tuple(make_grad(i) for i in range(len(tensors))))


def reshape(a: Tensor, shape) -> Tensor:
    return Tensor(a.data.reshape(shape), (a,), (lambda g: g.reshape(a.data.shape),))


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------


class ParamSet:
    """Named map of parameter tensors with per-parameter Adam state.

    `version` increments on every mutation (optimizer step, state load),
    which is how tapes detect that the parameters they captured are stale.
    Forward/backward against a fixed version are read-only; mutation must
    not run concurrently with them.
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._adam_m: dict[str, np.ndarray] = {}
        self._adam_v: dict[str, np.ndarray] = {}
        self._adam_step: dict[str, int] = {}
        self.version = 0

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self._params:
            raise ValueError(f"parameter {name!r} already exists")
        t = Tensor(np.array(value, dtype=np.float64))
        self._params[name] = t
        self._adam_m[name] = np.zeros_like(t.data)
        self._adam_v[name] = np.zeros_like(t.data)
        self._adam_step[name] = 0
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self) -> list:
        return list(self._params)

    def shapes(self) -> dict:
        return {k: tuple(v.data.shape) for k, v in self._params.items()}

    def n_params(self) -> int:
        return sum(t.data.size for t in self._params.values())

    def adam_state(self, name: str):
        return self._adam_m[name], self._adam_v[name], self._adam_step[name]

    def copy(self) -> "ParamSet":
        """Deep copy including optimizer state (used to freeze reference nets)."""
        other = ParamSet()
        for name, t in self._params.items():
            other.add(name, t.data.copy())
            other._adam_m[name] = self._adam_m[name].copy()
            other._adam_v[name] = self._adam_v[name].copy()
            other._adam_step[name] = self._adam_step[name]
        return other

    def allclose(self, other: "ParamSet", atol=0.0) -> bool:
        if self.shapes() != other.shapes():
            return False
        return all(
            np.allclose(self._params[n].data, other._params[n].data, rtol=0.0, atol=atol)
            for n in self._params
        )

    def state_hash(self) -> str:
        """Hash of parameter values only (not optimizer state)."""
        h = hashlib.sha256()
        for name in sorted(self._params):
            h.update(name.encode())
            h.update(self._params[name].data.tobytes())
        return h.hexdigest()


# ---------------------------------------------------------------------------
# MLP forward
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MlpSpec:
    """Layer widths (input, hidden..., output) and hidden activation.

    Output activation is the identity.
    """

    widths: tuple
    activation: str = "relu"

    def __post_init__(self):
        if len(self.widths) < 3:
            raise ValueError("MlpSpec needs at least one hidden layer")
        if any(w <= 0 for w in self.widths):
            raise ValueError(f"layer widths must be positive, got {self.widths}")
        if self.activation not in ("relu", "tanh"):
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def in_width(self):
        return self.widths[0]

    @property
    def out_width(self):
        return self.widths[-1]

    def param_names(self):
        return [f"{kind}{i}" for i in range(len(self.widths) - 1) for kind in ("w", "b")]


def init_mlp_params(spec: MlpSpec, rng: np.random.Generator) -> ParamSet:
    """He-style init for ReLU nets, Xavier for tanh. Biases start at zero."""
    params = ParamSet()
    for i, (fan_in, fan_out) in enumerate(zip(spec.widths[:-1], spec.widths[1:])):
        if spec.activation == "relu":
            std = np.sqrt(2.0 / fan_in)
        else:
            std = np.sqrt(1.0 / fan_in)
        params.add(f"w{i}", rng.normal(0.0, std, size=(fan_in, fan_out)))
        params.add(f"b{i}", np.zeros(fan_out))
    return params


class Tape:
    """Ties one forward pass output to the ParamSet version it read.

    Consumable exactly once by `backward`; goes stale if the parameters
    are mutated in between.
    """

    def __init__(self, output: Tensor, params: ParamSet):
        self.output = output
        self.params = params
        self.version = params.version
        self.consumed = False


def mlp_forward(params: ParamSet, spec: MlpSpec, x: Tensor | np.ndarray):
    """Run the MLP; returns (output Tensor, Tape).

    Accepts a single input vector (in,) or a batch (B, in).
    """
    x = _as_tensor(x)
    if x.data.shape[-1] != spec.in_width:
        raise ShapeError(
            f"mlp_forward: input width {x.data.shape[-1]} != spec input width "
            f"{spec.in_width} (input shape {x.data.shape}, widths {spec.widths})"
        )
    act = relu if spec.activation == "relu" else tanh
    h = x
    n_layers = len(spec.widths) - 1
    for i in range(n_layers):
        h = add(matmul(h, params[f"w{i}"]), params[f"b{i}"])
        if i < n_layers - 1:
            h = act(h)
    return h, Tape(h, params)


def mlp_apply(params: ParamSet, spec: MlpSpec, x: np.ndarray) -> np.ndarray:
    """Plain-numpy MLP forward, no graph. For sampling/eval loops where
    gradients are not needed; matches mlp_forward bit for bit."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != spec.in_width:
        raise ShapeError(
            f"mlp_apply: input width {x.shape[-1]} != spec input width {spec.in_width}"
        )
    h = x
    n_layers = len(spec.widths) - 1
    for i in range(n_layers):
        h = h @ params[f"w{i}"].data + params[f"b{i}"].data
        if i < n_layers - 1:
            h = np.maximum(h, 0.0) if spec.activation == "relu" else np.tanh(h)
    return h


# ---------------------------------------------------------------------------
# Backward
# ---------------------------------------------------------------------------


def _toposort(root: Tensor) -> list:
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward_graph(output: Tensor, output_grad: np.ndarray) -> dict:
    """Reverse-mode sweep from `output`; returns {id(node): grad ndarray}."""
    output_grad = np.asarray(output_grad, dtype=np.float64)
    if output_grad.shape != output.data.shape:
        raise ShapeError(
            f"output_grad shape {output_grad.shape} != output shape {output.data.shape}"
        )
    grads = {id(output): output_grad}
    for node in reversed(_toposort(output)):
        g = grads.get(id(node))
        if g is None:
            continue
        for parent, grad_fn in zip(node.parents, node.grad_fns):
            contrib = grad_fn(g)
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + contrib
            else:
                grads[key] = contrib
    return grads


def backward(tape: Tape, output_grad: np.ndarray | float = 1.0) -> dict:
    """Gradients of the tape's output w.r.t. every parameter in its ParamSet.

    Parameters the forward pass never touched get zero gradients. A tape
    can be consumed once; a tape recorded before a parameter mutation is
    rejected as stale.
    """
    if tape.consumed:
        raise TapeError("tape already consumed; rerun the forward pass")
    if tape.version != tape.params.version:
        raise TapeError(
            f"stale tape: parameters are at version {tape.params.version}, "
            f"tape was recorded at version {tape.version}"
        )
    tape.consumed = True
    if np.isscalar(output_grad) or np.ndim(output_grad) == 0:
        output_grad = np.full_like(tape.output.data, float(output_grad))
    node_grads = backward_graph(tape.output, output_grad)
    out = {}
    for name in tape.params.names():
        p = tape.params[name]
        g = node_grads.get(id(p))
        out[name] = np.zeros_like(p.data) if g is None else g
    return out


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


def adam_step(params: ParamSet, grads: dict, lr: float,
              betas=(0.9, 0.999), eps: float = 1e-8) -> bool:
    """Bias-corrected Adam update in place. Returns False (step skipped)
    if any gradient is non-finite."""
    b1, b2 = betas
    for name in params.names():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != params[name].data.shape:
            raise ShapeError(
                f"adam_step: grad shape {g.shape} != param {name!r} shape "
                f"{params[name].data.shape}"
            )
        if not np.all(np.isfinite(g)):
            logger.warning("adam_step: non-finite gradient for %r, step skipped", name)
            return False
    for name in params.names():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(params[name].data)
        m, v, step = params.adam_state(name)
        step += 1
        m[:] = b1 * m + (1.0 - b1) * g
        v[:] = b2 * v + (1.0 - b2) * (g * g)
        m_hat = m / (1.0 - b1 ** step)
        v_hat = v / (1.0 - b2 ** step)
        params[name].data -= lr * m_hat / (np.sqrt(v_hat) + eps)
        params._adam_step[name] = step
    params.version += 1
    return True


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    per_param: dict = field(default_factory=dict)
    max_rel_err: float = 0.0
    tolerance: float = 1e-4

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tolerance


def grad_check(params: ParamSet, loss_fn, tolerance: float = 1e-4,
               h: float = 1e-5) -> GradCheckReport:
    """Compare reverse-mode gradients against central finite differences.

    `loss_fn()` must rebuild a scalar loss Tensor from `params` and be
    deterministic (fix any sampled noise outside). Every entry of every
    parameter is perturbed, so keep the nets small.
    """
    loss = loss_fn()
    tape = Tape(loss, params)
    analytic = backward(tape, 1.0)

    report = GradCheckReport(tolerance=tolerance)
    for name in params.names():
        p = params[name].data
        fd = np.zeros_like(p)
        flat = p.reshape(-1)
        fd_flat = fd.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = float(loss_fn().data)
            flat[i] = orig - h
            down = float(loss_fn().data)
            flat[i] = orig
            fd_flat[i] = (up - down) / (2.0 * h)
        a, b = analytic[name], fd
        denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-6)
        rel = np.abs(a - b) / denom
        report.per_param[name] = float(rel.max()) if rel.size else 0.0
    report.max_rel_err = max(report.per_param.values(), default=0.0)
    return report


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_params(params: ParamSet, path, meta: dict | None = None) -> None:
    """Self-describing binary container: magic, format version, JSON header
    with a name->shape table, then row-major little-endian float64 payloads.

    Adam moments ride along so a reloaded ParamSet equals the saved one
    exactly. `meta` is an arbitrary JSON-safe dict (e.g. a noise-schedule
    block for policy checkpoints).
    """
    entries = []
    payloads = []
    offset = 0

    def push(name, arr):
        nonlocal offset
        raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        entries.append({"name": name, "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(raw)})
        payloads.append(raw)
        offset += len(raw)

    for name in params.names():
        push(name, params[name].data)
        m, v, _ = params.adam_state(name)
        push(name + ".adam_m", m)
        push(name + ".adam_v", v)

    header = {
        "format_version": CHECKPOINT_VERSION,
        "params": params.names(),
        "shapes": {n: list(s) for n, s in params.shapes().items()},
        "adam_steps": {n: params.adam_state(n)[2] for n in params.names()},
        "tensors": entries,
        "meta": meta or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for raw in payloads:
            f.write(raw)


def load_params(path, expected_shapes: dict | None = None):
    """Load a checkpoint; returns (ParamSet, meta dict).

    Raises CheckpointError on bad magic, version mismatch, corrupt payload,
    or (when `expected_shapes` is given) any parameter whose shape differs,
    naming the offending parameter.
    """
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: format version {version} unsupported (expected {CHECKPOINT_VERSION})"
        )
    (header_len,) = struct.unpack_from("<Q", blob, 8)
    header_start = 16
    try:
        header = json.loads(blob[header_start:header_start + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: corrupt header ({e})") from e
    payload_start = header_start + header_len

    tensors = {}
    for entry in header["tensors"]:
        start = payload_start + entry["offset"]
        end = start + entry["nbytes"]
        if end > len(blob):
            raise CheckpointError(
                f"{path}: truncated payload for tensor {entry['name']!r}"
            )
        arr = np.frombuffer(blob[start:end], dtype="<f8").astype(np.float64)
        shape = tuple(entry["shape"])
        expected_size = int(np.prod(shape)) if shape else 1
        if arr.size != expected_size:
            raise CheckpointError(
                f"{path}: payload size mismatch for tensor {entry['name']!r}"
            )
        tensors[entry["name"]] = arr.reshape(shape)

    params = ParamSet()
    for name in header["params"]:
        if name not in tensors:
            raise CheckpointError(f"{path}: missing payload for parameter {name!r}")
        declared = tuple(header["shapes"][name])
        if tensors[name].shape != declared:
            raise CheckpointError(
                f"{path}: shape table mismatch for parameter {name!r}: "
                f"table says {declared}, payload is {tensors[name].shape}"
            )
        if expected_shapes is not None:
            want = tuple(expected_shapes.get(name, ())) or None
            if want is None:
                raise CheckpointError(f"{path}: unexpected parameter {name!r}")
            if want != declared:
                raise CheckpointError(
                    f"{path}: parameter {name!r} has shape {declared}, expected {want}"
                )
        params.add(name, tensors[name])
        params._adam_m[name] = tensors[name + ".adam_m"].copy()
        params._adam_v[name] = tensors[name + ".adam_v"].copy()
        params._adam_step[name] = int(header["adam_steps"][name])
    if expected_shapes is not None:
        missing = set(expected_shapes) - set(header["params"])
        if missing:
            raise CheckpointError(f"{path}: missing parameter {sorted(missing)[0]!r}")
    return params, header.get("meta", {})


def file_hash(path) -> str:
    with open(path, "rb") as f:
        return hashlib.sha256(f.read()).hexdigest()
