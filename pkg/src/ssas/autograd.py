"""Reverse-mode automatic differentiation on a per-step tape.

Values are dense float64 arrays in row-major order. A ``Tape`` is rebuilt for
every forward pass (define-by-run); each recorded node stores its operation
kind, input node ids, the forward value, and a closure computing the exact
vector-Jacobian product of the primitive. Raw ``numpy`` arrays play the role
of tensors that are not attached to any tape.

The one non-standard primitive is gradient reversal (``grl``): an identity in
the forward pass whose reverse rule multiplies the upstream gradient by
``-lambda``, turning joint minimization into a min-max game.

Broadcasting is deliberately restricted (row-wise bias addition and row-vector
scaling only) so that every reverse rule stays auditable.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np


class AutogradError(Exception):
    """Base class for tape construction and differentiation errors."""


class ShapeMismatchError(AutogradError):
    """Input shapes invalid for a primitive."""


class DomainError(AutogradError):
    """Input outside a primitive's mathematical domain (e.g. log of x <= 0)."""


class NonFiniteError(AutogradError):
    """A primitive produced NaN/Inf, or a probe value was non-finite."""


@dataclass(frozen=True)
class GrlConfig:
    """Gradient-reversal coefficient; ``lam`` is the lambda of the reverse rule."""

    lam: float = 1.0

    def __post_init__(self):
        if not (self.lam >= 0.0):
            raise ValueError(f"gradient-reversal coefficient must be >= 0, got {self.lam}")


def _as_f64(values) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(values, dtype=np.float64))


class Tensor:
    """A value recorded on a tape.

    ``data`` is the forward value (float64 ndarray), ``tape`` the owning tape
    and ``node`` the id of the node that produced it.
    """

    __slots__ = ("data", "tape", "node")

    def __init__(self, data: np.ndarray, tape: "Tape", node: int):
        self.data = data
        self.tape = tape
        self.node = node

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeMismatchError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.shape}, node={self.node})"

    # Operator sugar; scalars go through `scale`, tensors must share the tape.
    def __add__(self, other):
        return add(self, _lift(other, self.tape))

    def __sub__(self, other):
        return sub(self, _lift(other, self.tape))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, _lift(other, self.tape))

    def __rmul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return NotImplemented

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, _lift(other, self.tape))


class _Node:
    __slots__ = ("kind", "inputs", "value", "vjp")

    def __init__(self, kind, inputs, value, vjp):
        self.kind = kind
        self.inputs = inputs
        self.value = value
        self.vjp = vjp


class Tape:
    """Ordered record of one forward pass.

    Node ids referenced as inputs always precede the referencing node, so the
    reverse sweep is a simple reversed iteration. ``gradients`` is populated
    by :func:`backprop`.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.gradients: dict[int, np.ndarray] | None = None
        self._param_nodes: dict[int, int] = {}

    def leaf(self, values) -> Tensor:
        return self._record("leaf", (), _as_f64(values), None)

    def param_leaf(self, param) -> Tensor:
        """Leaf for a trainable parameter, memoized so repeated forwards of the
        same parameter share one node and fan-out accumulates naturally."""
        key = id(param)
        node_id = self._param_nodes.get(key)
        if node_id is not None:
            return Tensor(self.nodes[node_id].value, self, node_id)
        t = self.leaf(param.value)
        self._param_nodes[key] = t.node
        return t

    def param_grad(self, param) -> np.ndarray:
        """Gradient for a parameter after backprop; zeros if unreachable."""
        if self.gradients is None:
            raise AutogradError("param_grad called before backprop")
        node_id = self._param_nodes.get(id(param))
        if node_id is None or node_id not in self.gradients:
            return np.zeros_like(param.value)
        return self.gradients[node_id]

    def _record(self, kind, input_ids, value, vjp) -> Tensor:
        if not np.all(np.isfinite(value)):
            raise NonFiniteError(f"primitive '{kind}' produced a non-finite value")
        node_id = len(self.nodes)
        self.nodes.append(_Node(kind, tuple(input_ids), value, vjp))
        return Tensor(value, self, node_id)


def _lift(x, tape: Tape) -> Tensor:
    if isinstance(x, Tensor):
        if x.tape is not tape:
            raise AutogradError("tensors from different tapes cannot be combined")
        return x
    return tape.leaf(x)


def _same_shape(kind, a: Tensor, b: Tensor):
    if a.shape != b.shape:
        raise ShapeMismatchError(f"{kind}: shapes {a.shape} and {b.shape} differ")


def _require_2d(kind, x: Tensor):
    if x.data.ndim != 2:
        raise ShapeMismatchError(f"{kind}: expected a 2-d tensor, got shape {x.shape}")


# ---------------------------------------------------------------------------
# Primitives. Each builder validates shapes, computes the forward value and
# records the exact vector-Jacobian product.
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatchError(f"matmul: shapes {a.shape} and {b.shape} incompatible")
    ad, bd = a.data, b.data

    def vjp(g):
        return g @ bd.T, ad.T @ g

    return a.tape._record("matmul", (a.node, b.node), ad @ bd, vjp)


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return a.tape._record("add", (a.node, b.node), a.data + b.data, lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return a.tape._record("sub", (a.node, b.node), a.data - b.data, lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return a.tape._record("mul", (a.node, b.node), ad * bd, lambda g: (g * bd, g * ad))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return a.tape._record("scale", (a.node,), c * a.data, lambda g: (c * g,))


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Row-wise bias addition: x[m,n] + b[n], the only broadcasted add."""
    _require_2d("add_bias", x)
    if b.data.ndim != 1 or b.shape[0] != x.shape[1]:
        raise ShapeMismatchError(f"add_bias: shapes {x.shape} and {b.shape} incompatible")
    return x.tape._record(
        "add_bias", (x.node, b.node), x.data + b.data, lambda g: (g, g.sum(axis=0))
    )


def mul_rowvec(x: Tensor, v: Tensor) -> Tensor:
    """Column-wise scaling: x[m,n] * v[n]."""
    _require_2d("mul_rowvec", x)
    if v.data.ndim != 1 or v.shape[0] != x.shape[1]:
        raise ShapeMismatchError(f"mul_rowvec: shapes {x.shape} and {v.shape} incompatible")
    xd, vd = x.data, v.data

    def vjp(g):
        return g * vd, (g * xd).sum(axis=0)

    return x.tape._record("mul_rowvec", (x.node, v.node), xd * vd, vjp)


def relu(x: Tensor) -> Tensor:
    xd = x.data
    return x.tape._record("relu", (x.node,), np.maximum(xd, 0.0), lambda g: (g * (xd > 0),))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return x.tape._record("exp", (x.node,), out, lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0.0):
        raise DomainError("log: nonpositive input value")
    xd = x.data
    return x.tape._record("log", (x.node,), np.log(xd), lambda g: (g / xd,))


def row_softmax(x: Tensor) -> Tensor:
    _require_2d("row_softmax", x)
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=1, keepdims=True)

    def vjp(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return x.tape._record("row_softmax", (x.node,), s, vjp)


def row_sum(x: Tensor) -> Tensor:
    """Per-row sum: [m,n] -> [m]."""
    _require_2d("row_sum", x)
    n = x.shape[1]
    return x.tape._record(
        "row_sum",
        (x.node,),
        x.data.sum(axis=1),
        lambda g: (np.repeat(g[:, None], n, axis=1),),
    )


def col_mean(x: Tensor) -> Tensor:
    """Per-column mean over rows: [m,n] -> [n]."""
    _require_2d("col_mean", x)
    m = x.shape[0]
    return x.tape._record(
        "col_mean",
        (x.node,),
        x.data.mean(axis=0),
        lambda g: (np.repeat(g[None, :] / m, m, axis=0),),
    )


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return x.tape._record(
        "sum",
        (x.node,),
        np.array([x.data.sum()]),
        lambda g: (np.full(shape, g[0]),),
    )


def mean_all(x: Tensor) -> Tensor:
    shape, n = x.shape, x.size
    return x.tape._record(
        "mean",
        (x.node,),
        np.array([x.data.mean()]),
        lambda g: (np.full(shape, g[0] / n),),
    )


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ShapeMismatchError("concat_rows: empty input list")
    tape = parts[0].tape
    widths = set()
    for p in parts:
        _require_2d("concat_rows", p)
        widths.add(p.shape[1])
    if len(widths) != 1:
        raise ShapeMismatchError(f"concat_rows: column counts differ: {sorted(widths)}")
    counts = [p.shape[0] for p in parts]
    offsets = np.cumsum([0] + counts)

    def vjp(g):
        return tuple(g[offsets[i]:offsets[i + 1]] for i in range(len(counts)))

    value = np.concatenate([p.data for p in parts], axis=0)
    return tape._record("concat_rows", tuple(p.node for p in parts), value, vjp)


def frob_norm_sq(x: Tensor) -> Tensor:
    xd = x.data
    return x.tape._record(
        "squared_frobenius_norm",
        (x.node,),
        np.array([(xd * xd).sum()]),
        lambda g: (2.0 * xd * g[0],),
    )


def absolute(x: Tensor) -> Tensor:
    xd = x.data
    return x.tape._record("abs", (x.node,), np.abs(xd), lambda g: (g * np.sign(xd),))


def transpose(x: Tensor) -> Tensor:
    _require_2d("transpose", x)
    return x.tape._record("transpose", (x.node,), x.data.T.copy(), lambda g: (g.T.copy(),))


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    _require_2d("slice_rows", x)
    if not (0 <= start <= stop <= x.shape[0]):
        raise ShapeMismatchError(f"slice_rows: range [{start}, {stop}) outside {x.shape}")
    shape = x.shape

    def vjp(g):
        out = np.zeros(shape)
        out[start:stop] = g
        return (out,)

    return x.tape._record("slice_rows", (x.node,), x.data[start:stop].copy(), vjp)


def select_rows(x: Tensor, indices) -> Tensor:
    """Gather rows by (possibly repeated) index; reverse rule scatter-adds."""
    _require_2d("select_rows", x)
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1 or (idx.size and (idx.min() < 0 or idx.max() >= x.shape[0])):
        raise ShapeMismatchError(f"select_rows: bad index vector for shape {x.shape}")
    shape = x.shape

    def vjp(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return x.tape._record("select_rows", (x.node,), x.data[idx].copy(), vjp)


def clamp_min(x: Tensor, floor: float) -> Tensor:
    """Elementwise max(x, floor); subgradient 0 at and below the floor."""
    floor = float(floor)
    xd = x.data
    return x.tape._record(
        "clamp_min", (x.node,), np.maximum(xd, floor), lambda g: (g * (xd > floor),)
    )


def batchnorm_train(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Batch normalization with biased batch variance; train-mode reverse rule."""
    _require_2d("batchnorm", x)
    n_features = x.shape[1]
    if gamma.shape != (n_features,) or beta.shape != (n_features,):
        raise ShapeMismatchError(
            f"batchnorm: x {x.shape} with gamma {gamma.shape}, beta {beta.shape}"
        )
    if x.shape[0] < 2:
        raise ShapeMismatchError("batchnorm: train mode requires a batch of at least 2")
    xd, gd = x.data, gamma.data
    mean = xd.mean(axis=0)
    var = xd.var(axis=0)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mean) * inv_std
    out = gd * xhat + beta.data

    def vjp(g):
        dgamma = (g * xhat).sum(axis=0)
        dbeta = g.sum(axis=0)
        dxhat = g * gd
        dx = inv_std * (
            dxhat - dxhat.mean(axis=0) - xhat * (dxhat * xhat).mean(axis=0)
        )
        return dx, dgamma, dbeta

    return x.tape._record("batchnorm", (x.node, gamma.node, beta.node), out, vjp)


def sphere_project(x: Tensor, radius: float) -> Tensor:
    """Rescale each row to Euclidean norm ``radius`` (quotient rule reverse)."""
    _require_2d("sphere_project", x)
    if radius <= 0:
        raise DomainError(f"sphere_project: radius must be positive, got {radius}")
    norms = np.linalg.norm(x.data, axis=1)
    zero = np.flatnonzero(norms == 0.0)
    if zero.size:
        raise DomainError(f"sphere_project: zero-norm row at index {int(zero[0])}")
    xd = x.data
    n = norms[:, None]
    out = radius * xd / n

    def vjp(g):
        dot = (g * xd).sum(axis=1, keepdims=True)
        return ((radius / n) * (g - xd * dot / (n * n)),)

    return x.tape._record("sphere_project", (x.node,), out, vjp)


def grl(x: Tensor, cfg: GrlConfig) -> Tensor:
    """Gradient reversal: forward identity, reverse rule g -> -lam * g."""
    lam = float(cfg.lam)
    return x.tape._record("grl", (x.node,), x.data.copy(), lambda g: (-lam * g,))


_PRIMITIVES: dict[str, Callable] = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "mul": mul,
    "scale": scale,
    "add_bias": add_bias,
    "mul_rowvec": mul_rowvec,
    "relu": relu,
    "exp": exp,
    "log": log,
    "row_softmax": row_softmax,
    "row_sum": row_sum,
    "col_mean": col_mean,
    "sum": sum_all,
    "mean": mean_all,
    "concat_rows": lambda *parts: concat_rows(parts),
    "squared_frobenius_norm": frob_norm_sq,
    "abs": absolute,
    "transpose": transpose,
    "slice_rows": slice_rows,
    "select_rows": select_rows,
    "clamp_min": clamp_min,
    "batchnorm": batchnorm_train,
    "sphere_project": sphere_project,
    "grl": grl,
}


def primitive_kinds() -> tuple[str, ...]:
    return tuple(sorted(_PRIMITIVES))


def eval_primitive(kind: str, inputs: Sequence[Tensor], **attrs) -> Tensor:
    """Evaluate one primitive by kind name, recording its tape node."""
    try:
        builder = _PRIMITIVES[kind]
    except KeyError:
        raise AutogradError(f"unknown primitive kind '{kind}'") from None
    return builder(*inputs, **attrs)


def backprop(loss: Tensor, tape: Tape | None = None) -> dict[int, np.ndarray]:
    """Reverse sweep from a scalar loss.

    Seeds the loss gradient with 1.0, visits nodes in reverse topological
    order (the recording order), and accumulates gradients additively across
    fan-out. Returns node id -> gradient and stores the same map on the tape.
    """
    tape = tape if tape is not None else loss.tape
    if loss.tape is not tape:
        raise AutogradError("loss does not belong to the given tape")
    if loss.data.shape != (1,):
        raise ShapeMismatchError(f"backprop: loss must have shape (1,), got {loss.shape}")
    grads: dict[int, np.ndarray] = {loss.node: np.ones(1)}
    for node_id in range(loss.node, -1, -1):
        g = grads.get(node_id)
        node = tape.nodes[node_id]
        if g is None or node.vjp is None:
            continue
        for input_id, gin in zip(node.inputs, node.vjp(g)):
            acc = grads.get(input_id)
            grads[input_id] = gin if acc is None else acc + gin
    tape.gradients = grads
    return grads


@dataclass
class FdReport:
    """Outcome of an analytic-vs-central-difference comparison."""

    max_rel_err: float
    tolerance: float
    checked: int
    passed: bool


def finite_difference_check(
    f: Callable[[Tensor], Tensor],
    params,
    eps: float = 1e-6,
    tol: float = 1e-5,
    grad_scale: float = 1.0,
) -> FdReport:
    """Compare the tape gradient of ``f`` against central finite differences.

    ``f`` takes a leaf tensor on a fresh tape and returns a scalar tensor on
    that tape. Finite differences see any gradient-reversal node as an
    identity, so when every path from ``params`` to the loss crosses exactly
    one reversal with coefficient lam, pass ``grad_scale=-lam`` to apply the
    reversal rule to the finite-difference estimate before comparing.

    Relative error uses a unit floor in the denominator so near-zero
    gradients are compared absolutely.
    """
    base = _as_f64(params)

    tape = Tape()
    leaf = tape.leaf(base)
    loss = f(leaf)
    if loss.data.shape != (1,):
        raise ShapeMismatchError(f"finite_difference_check: f returned shape {loss.shape}")
    if not np.isfinite(loss.data[0]):
        raise NonFiniteError("finite_difference_check: non-finite value at base point")
    grads = backprop(loss, tape)
    analytic = grads.get(leaf.node, np.zeros_like(base)).reshape(-1)

    def value_at(p: np.ndarray) -> float:
        probe_tape = Tape()
        v = f(probe_tape.leaf(p)).data
        val = float(v[0])
        if not np.isfinite(val):
            raise NonFiniteError("finite_difference_check: non-finite value at probe point")
        return val

    flat = base.reshape(-1)
    fd = np.empty_like(flat)
    for i in range(flat.size):
        bumped = flat.copy()
        bumped[i] = flat[i] + eps
        hi = value_at(bumped.reshape(base.shape))
        bumped[i] = flat[i] - eps
        lo = value_at(bumped.reshape(base.shape))
        fd[i] = (hi - lo) / (2.0 * eps)

    adjusted = grad_scale * fd
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(adjusted)), 1.0)
    max_rel_err = float(np.max(np.abs(analytic - adjusted) / denom)) if flat.size else 0.0
    return FdReport(max_rel_err=max_rel_err, tolerance=tol, checked=flat.size,
                    passed=max_rel_err < tol)
