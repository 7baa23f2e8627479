"""tensor.py — Dense float64 tensors with a reverse-mode tape, layers, optimizers, gradcheck.

Every op returns a new :class:`Value`.  A Value created from other Values keeps
a reference to its parents plus a closure mapping the upstream gradient to one
gradient per parent; :meth:`Value.backward` walks that record in reverse
topological order.  Only leaves with ``requires_grad`` accumulate into
``.grad``; intermediate gradients live in a local dict for the duration of a
single backward call and never touch another tape.
"""

from __future__ import annotations

import json
from collections.abc import Callable, Iterable, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

_DTYPE = np.float64

CHECKPOINT_FORMAT = "gcm-checkpoint"
CHECKPOINT_VERSION = 1


class DimensionError(ValueError):
    """Raised when operand shapes do not fit an operation."""


class NumericError(ArithmeticError):
    """Raised on NaN inputs or non-finite results that must not propagate."""


# ── Value ──────────────────────────────────────────────────────────────────────

_GradFn = Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Value:
    """A node on the autodiff tape."""

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_grad_fn")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        *,
        op: str = "leaf",
        parents: tuple[Value, ...] = (),
        grad_fn: _GradFn | None = None,
    ) -> None:
        self.data: np.ndarray = np.asarray(data, dtype=_DTYPE)
        self.requires_grad = requires_grad
        self.op = op
        self._parents = parents
        self._grad_fn = grad_fn
        # Leaves that train start with zero grads; everything else has none.
        self.grad: np.ndarray | None = (
            np.zeros_like(self.data) if requires_grad and not parents else None
        )

    # -- introspection ---------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        """Return a copy of the data detached from the tape."""
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Value(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    # -- operators ---------------------------------------------------------------

    def __add__(self, other: Value) -> Value:
        return add(self, other)

    def __matmul__(self, other: Value) -> Value:
        return matmul(self, other)

    def __mul__(self, other: Value | float) -> Value:
        if isinstance(other, Value):
            return mul(self, other)
        return scalar_mul(self, float(other))

    __rmul__ = __mul__

    # -- backward ----------------------------------------------------------------

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every reachable ``requires_grad`` leaf.

        Raises:
            ValueError: *self* is not a scalar.
        """
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            return

        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                if node.grad is None:
                    node.grad = np.zeros_like(node.data)
                node.grad += g
                continue
            assert node._grad_fn is not None
            for parent, pg in zip(node._parents, node._grad_fn(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def _topological_order(root: Value) -> list[Value]:
    """Iterative DFS post-order over the grad-requiring part of the tape."""
    order: list[Value] = []
    seen: set[int] = set()
    stack: list[tuple[Value, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def _make(data: np.ndarray, op: str, parents: tuple[Value, ...], grad_fn: _GradFn) -> Value:
    """Wrap an op result; the tape record is kept only when a parent trains."""
    if any(p.requires_grad for p in parents):
        return Value(data, requires_grad=True, op=op, parents=parents, grad_fn=grad_fn)
    return Value(data, op=op)


def constant(data) -> Value:
    """A Value that never receives gradients."""
    return Value(np.array(data, dtype=_DTYPE))


def parameter(data) -> Value:
    return Value(np.array(data, dtype=_DTYPE), requires_grad=True)


def detach(x: Value) -> Value:
    """Cut the tape: same data, no parents, no gradient."""
    return Value(x.data.copy(), op="detach")


# ── Core ops ───────────────────────────────────────────────────────────────────


def matmul(a: Value, b: Value) -> Value:
    """(m,k) @ (k,n) -> (m,n)."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    out = a.data @ b.data

    def grad_fn(g: np.ndarray):
        return (
            g @ b.data.T if a.requires_grad else None,
            a.data.T @ g if b.requires_grad else None,
        )

    return _make(out, "matmul", (a, b), grad_fn)


def add(a: Value, b: Value) -> Value:
    """Elementwise sum; *b* may also be a row vector added to every row of *a*."""
    if a.shape == b.shape:

        def grad_fn(g: np.ndarray):
            return g, g

        return _make(a.data + b.data, "add", (a, b), grad_fn)
    if b.data.ndim == 1 and a.data.ndim >= 1 and a.shape[-1] == b.shape[0]:
        reduce_axes = tuple(range(a.data.ndim - 1))

        def bias_grad_fn(g: np.ndarray):
            return g, g.sum(axis=reduce_axes)

        return _make(a.data + b.data, "add", (a, b), bias_grad_fn)
    raise DimensionError(f"add: shapes {a.shape} and {b.shape} do not match")


def mul(a: Value, b: Value) -> Value:
    """Elementwise product of equal-shape Values."""
    if a.shape != b.shape:
        raise DimensionError(f"mul: shapes {a.shape} and {b.shape} do not match")

    def grad_fn(g: np.ndarray):
        return g * b.data, g * a.data

    return _make(a.data * b.data, "mul", (a, b), grad_fn)


def scalar_mul(x: Value, c: float) -> Value:
    def grad_fn(g: np.ndarray):
        return (g * c,)

    return _make(x.data * c, "scalar_mul", (x,), grad_fn)


def concat(xs: Sequence[Value]) -> Value:
    """Concatenate along the last axis."""
    if not xs:
        raise ValueError("concat: empty input list")
    lead = xs[0].shape[:-1]
    for x in xs[1:]:
        if x.shape[:-1] != lead:
            raise DimensionError(
                f"concat: leading dims disagree: {[v.shape for v in xs]}"
            )
    widths = [x.shape[-1] for x in xs]
    out = np.concatenate([x.data for x in xs], axis=-1)
    bounds = np.cumsum([0, *widths])

    def grad_fn(g: np.ndarray):
        return [g[..., bounds[i] : bounds[i + 1]] for i in range(len(xs))]

    return _make(out, "concat", tuple(xs), grad_fn)


def reshape(x: Value, shape: tuple[int, ...]) -> Value:
    out = x.data.reshape(shape)
    if out.size != x.size:
        raise DimensionError(f"reshape: {x.shape} -> {shape}")

    def grad_fn(g: np.ndarray):
        return (g.reshape(x.shape),)

    return _make(out, "reshape", (x,), grad_fn)


def expand(x: Value, n: int, axis: int = 1) -> Value:
    """Repeat *x* ``n`` times along a new *axis*."""
    out = np.repeat(np.expand_dims(x.data, axis), n, axis=axis)

    def grad_fn(g: np.ndarray):
        return (g.sum(axis=axis),)

    return _make(out, "expand", (x,), grad_fn)


def take_rows(x: Value, index: np.ndarray) -> Value:
    """Rows *index* of *x* (first axis); gradients scatter back."""
    index = np.asarray(index, dtype=np.int64)

    def grad_fn(g: np.ndarray):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return _make(x.data[index], "take_rows", (x,), grad_fn)


def place_rows(x: Value, index: np.ndarray, n_rows: int) -> Value:
    """Zero array of *n_rows* rows with ``out[index] = x``; *index* must be unique."""
    index = np.asarray(index, dtype=np.int64)
    if index.shape[0] != x.shape[0]:
        raise DimensionError(f"place_rows: {index.shape[0]} indices for {x.shape[0]} rows")
    out = np.zeros((n_rows,) + x.shape[1:])
    out[index] = x.data

    def grad_fn(g: np.ndarray):
        return (g[index],)

    return _make(out, "place_rows", (x,), grad_fn)


def total(x: Value) -> Value:
    """Sum of every element, as a scalar."""

    def grad_fn(g: np.ndarray):
        return (np.full_like(x.data, float(g)),)

    return _make(np.array(x.data.sum()), "total", (x,), grad_fn)


# ── Nonlinearities and reductions ──────────────────────────────────────────────


def relu(x: Value) -> Value:
    on = x.data > 0

    def grad_fn(g: np.ndarray):
        return (g * on,)

    return _make(np.where(on, x.data, 0.0), "relu", (x,), grad_fn)


def _stable_sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x: Value) -> Value:
    s = _stable_sigmoid(x.data)

    def grad_fn(g: np.ndarray):
        return (g * s * (1.0 - s),)

    return _make(s, "sigmoid", (x,), grad_fn)


def softmax(x: Value, mask: np.ndarray | None = None) -> Value:
    """Softmax over the last axis.

    Masked entries (``mask == 0``) get weight exactly 0.  A row whose entries
    are all masked yields all zeros rather than NaN.

    Raises:
        NumericError: *x* contains NaN.
    """
    if np.isnan(x.data).any():
        raise NumericError("softmax: NaN in input")
    z = x.data
    if mask is not None:
        keep = np.asarray(mask, dtype=bool)
        if keep.shape != z.shape:
            raise DimensionError(f"softmax: mask {keep.shape} vs input {z.shape}")
        z = np.where(keep, z, -np.inf)
    top = np.max(z, axis=-1, keepdims=True)
    top = np.where(np.isfinite(top), top, 0.0)
    e = np.exp(z - top)
    denom = e.sum(axis=-1, keepdims=True)
    y = np.divide(e, denom, out=np.zeros_like(e), where=denom > 0)

    def grad_fn(g: np.ndarray):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make(y, "softmax", (x,), grad_fn)


def mean_pool(x: Value, axis: int = -2, mask: np.ndarray | None = None) -> Value:
    """Mean over *axis*; with *mask* only the kept entries count.

    An all-masked slice pools to zeros.
    """
    axis = axis % x.data.ndim
    if mask is None:
        weights = np.full(x.shape[: axis + 1], 1.0 / x.shape[axis])
    else:
        m = np.asarray(mask, dtype=_DTYPE)
        if m.shape != x.shape[: axis + 1]:
            raise DimensionError(f"mean_pool: mask {m.shape} vs input {x.shape}")
        count = m.sum(axis=-1, keepdims=True)
        weights = np.divide(m, count, out=np.zeros_like(m), where=count > 0)
    w = weights.reshape(weights.shape + (1,) * (x.data.ndim - axis - 1))
    out = (x.data * w).sum(axis=axis)

    def grad_fn(g: np.ndarray):
        return (np.expand_dims(g, axis) * w,)

    return _make(out, "mean_pool", (x,), grad_fn)


def weighted_sum(weights: Value, items: Value) -> Value:
    """(B,n) weights over (B,n,d) items -> (B,d)."""
    if items.data.ndim != 3 or weights.shape != items.shape[:2]:
        raise DimensionError(
            f"weighted_sum: weights {weights.shape} vs items {items.shape}"
        )
    out = np.einsum("bn,bnd->bd", weights.data, items.data)

    def grad_fn(g: np.ndarray):
        return (
            np.einsum("bd,bnd->bn", g, items.data) if weights.requires_grad else None,
            weights.data[:, :, None] * g[:, None, :] if items.requires_grad else None,
        )

    return _make(out, "weighted_sum", (weights, items), grad_fn)


def mask_rows(x: Value, mask: np.ndarray, fill: Value) -> Value:
    """Replace rows of (B,n,d) *x* where ``mask == 0`` with the (d,) *fill* row."""
    m = np.asarray(mask, dtype=_DTYPE)
    if m.shape != x.shape[:2] or fill.shape != x.shape[2:]:
        raise DimensionError(
            f"mask_rows: x {x.shape}, mask {m.shape}, fill {fill.shape}"
        )
    keep = m[:, :, None]
    out = x.data * keep + fill.data * (1.0 - keep)

    def grad_fn(g: np.ndarray):
        return g * keep, (g * (1.0 - keep)).sum(axis=(0, 1))

    return _make(out, "mask_rows", (x, fill), grad_fn)


def dropout(
    x: Value, rate: float, training: bool, rng: np.random.Generator | None = None
) -> Value:
    """Inverted dropout; identity in eval mode or at rate 0."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)

    def grad_fn(g: np.ndarray):
        return (g * keep,)

    return _make(x.data * keep, "dropout", (x,), grad_fn)


def bce_multilabel_loss(logits: Value, targets) -> Value:
    """Mean per-class binary cross-entropy on raw logits, in log-sum-exp form."""
    t = np.asarray(targets, dtype=_DTYPE)
    if t.shape != logits.shape:
        raise DimensionError(f"bce: targets {t.shape} vs logits {logits.shape}")
    if not np.isin(t, (0.0, 1.0)).all():
        raise ValueError("bce: targets must be binary")
    z = logits.data
    per = np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z)))
    n = z.size

    def grad_fn(g: np.ndarray):
        return (float(g) * (_stable_sigmoid(z) - t) / n,)

    return _make(np.array(per.mean()), "bce", (logits,), grad_fn)


# ── Layers ─────────────────────────────────────────────────────────────────────


def fan_in_uniform(rng: np.random.Generator, fan_in: int, shape: tuple[int, ...]) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Linear:
    """``x @ w + b``."""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator) -> None:
        self.in_dim, self.out_dim = in_dim, out_dim
        self.w = parameter(fan_in_uniform(rng, in_dim, (in_dim, out_dim)))
        self.b = parameter(np.zeros(out_dim))

    def __call__(self, x: Value) -> Value:
        if x.shape[-1] != self.in_dim:
            raise DimensionError(f"Linear expects last dim {self.in_dim}, got {x.shape}")
        return add(matmul(x, self.w), self.b)

    def parameters(self, prefix: str) -> dict[str, Value]:
        return {f"{prefix}.w": self.w, f"{prefix}.b": self.b}


class Mlp2:
    """Two affine layers with a rectifier in between."""

    def __init__(
        self, in_dim: int, hidden_dim: int, out_dim: int, rng: np.random.Generator
    ) -> None:
        self.in_dim, self.hidden_dim, self.out_dim = in_dim, hidden_dim, out_dim
        self.w1 = parameter(fan_in_uniform(rng, in_dim, (in_dim, hidden_dim)))
        self.b1 = parameter(np.zeros(hidden_dim))
        self.w2 = parameter(fan_in_uniform(rng, hidden_dim, (hidden_dim, out_dim)))
        self.b2 = parameter(np.zeros(out_dim))

    def __call__(self, x: Value) -> Value:
        if x.data.ndim != 2 or x.shape[1] != self.in_dim:
            raise DimensionError(
                f"Mlp2 expects (batch, {self.in_dim}), got {x.shape}"
            )
        h = relu(add(matmul(x, self.w1), self.b1))
        return add(matmul(h, self.w2), self.b2)

    def parameters(self, prefix: str) -> dict[str, Value]:
        return {
            f"{prefix}.w1": self.w1,
            f"{prefix}.b1": self.b1,
            f"{prefix}.w2": self.w2,
            f"{prefix}.b2": self.b2,
        }


# ── Optimizers ─────────────────────────────────────────────────────────────────

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


@dataclass
class OptimizerState:
    """SGD or Adam; moments are keyed by parameter name."""

    kind: str = "adam"
    learning_rate: float = 1e-4
    step_count: int = 0
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")
        if self.learning_rate < 0:
            raise ValueError(f"learning rate must be >= 0, got {self.learning_rate}")


def step(opt: OptimizerState, params: dict[str, Value]) -> None:
    """Apply one update in place.

    Raises:
        RuntimeError: a parameter has no gradient.
    """
    missing = [name for name, p in params.items() if p.grad is None]
    if missing:
        raise RuntimeError(f"step: no gradient for {missing}")
    opt.step_count += 1
    lr = opt.learning_rate
    if opt.kind == "sgd":
        for p in params.values():
            p.data -= lr * p.grad
        return

    b1, b2 = ADAM_BETAS
    t = opt.step_count
    for name, p in params.items():
        g = p.grad
        m = opt.first_moment.get(name)
        v = opt.second_moment.get(name)
        if m is None or v is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        opt.first_moment[name] = m
        opt.second_moment[name] = v
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        p.data -= lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)


def zero_grads(params: Iterable[Value]) -> None:
    for p in params:
        p.zero_grad()


# ── Finite-difference oracle ───────────────────────────────────────────────────


GRAD_SCALE_FLOOR = 1e-5


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = GRAD_SCALE_FLOOR) -> float:
    """Norm-based relative error with the denominator floored at *floor*.

    A gradient that is exactly zero (e.g. a bias feeding a softmax) leaves only
    round-off in both estimates; below the floor the difference is measured
    against *floor* instead of against itself.
    """
    denom = max(float(np.linalg.norm(analytic) + np.linalg.norm(numeric)), floor)
    return float(np.linalg.norm(analytic - numeric) / denom)


def gradcheck(
    loss_fn: Callable[[], Value],
    params: dict[str, Value],
    *,
    h: float = 1e-5,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
) -> dict[str, float]:
    """Compare backprop against central differences for every parameter.

    Args:
        loss_fn:     Rebuilds the scalar loss from current parameter values.
        params:      Named parameters to check.
        h:           Finite-difference step.
        max_entries: Check at most this many randomly chosen entries per
                     parameter (all when None).
        rng:         Entry sampler; required with *max_entries*.

    Returns:
        ``{name: relative error}`` over the checked entries.
    """
    zero_grads(params.values())
    loss_fn().backward()
    analytic = {name: p.grad.copy() for name, p in params.items()}

    errors: dict[str, float] = {}
    for name, p in params.items():
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            if rng is None:
                raise ValueError("gradcheck: max_entries needs an rng")
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        numeric = np.empty(idx.size)
        for k, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + h
            up = loss_fn().item()
            flat[i] = orig - h
            down = loss_fn().item()
            flat[i] = orig
            numeric[k] = (up - down) / (2 * h)
        errors[name] = relative_error(analytic[name].reshape(-1)[idx], numeric)
    zero_grads(params.values())
    return errors


# ── Checkpoints ────────────────────────────────────────────────────────────────


def save_checkpoint(path: Path, params: dict[str, Value], meta: dict | None = None) -> None:
    """Write ``{name: {shape, data}}`` as sorted-key JSON (row-major float64)."""
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "meta": meta or {},
        "params": {
            name: {"shape": list(p.shape), "data": p.data.reshape(-1).tolist()}
            for name, p in params.items()
        },
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, sort_keys=True), encoding="utf-8")


def load_checkpoint(path: Path) -> tuple[dict[str, np.ndarray], dict]:
    """Return ``(arrays, meta)`` from a checkpoint written by :func:`save_checkpoint`."""
    doc = json.loads(path.read_text(encoding="utf-8"))
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a checkpoint file")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {doc.get('version')}")
    arrays: dict[str, np.ndarray] = {}
    for name, entry in doc["params"].items():
        shape = tuple(entry["shape"])
        data = np.asarray(entry["data"], dtype=_DTYPE)
        if data.size != int(np.prod(shape)):
            raise DimensionError(f"{path}: {name} has {data.size} values for shape {shape}")
        arrays[name] = data.reshape(shape)
    return arrays, doc.get("meta", {})


def assign_parameters(params: dict[str, Value], arrays: dict[str, np.ndarray]) -> None:
    """Copy checkpoint arrays into live parameters (names and shapes must match)."""
    if set(params) != set(arrays):
        missing = sorted(set(params) - set(arrays))
        extra = sorted(set(arrays) - set(params))
        raise DimensionError(f"checkpoint mismatch: missing {missing}, unexpected {extra}")
    for name, p in params.items():
        if arrays[name].shape != p.shape:
            raise DimensionError(
                f"checkpoint {name}: shape {arrays[name].shape} vs {p.shape}"
            )
        p.data[...] = arrays[name]
