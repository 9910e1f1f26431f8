"""Dense float64 tensors with reverse-mode automatic differentiation.

A Tensor wraps a numpy array plus the bookkeeping needed to replay the
chain rule: parent references and a vector-Jacobian closure recorded at
construction time. ``backward`` linearizes the graph into a tape
(topological order) and walks it in reverse, summing gradients into the
``grad`` field of every tensor that requires them. Gradients accumulate
across calls; reset with ``zero_grads``.

Only the shapes the model needs are supported: scalars (0-d), vectors
(1-d) and matrices (2-d). Broadcasting is limited to scalar operands and
the row-wise bias add (N,d)+(d,).
"""

from __future__ import annotations

import os

import numpy as np

from .errors import NumericalError, ParameterError, ShapeError

# Opt-in finiteness assertion after every op (debug builds).
CHECK_FINITE = os.environ.get("MMCC_DEBUG_FINITE", "") == "1"

_GRAD_ENABLED = True


class no_grad:
    """Context manager: ops executed inside record no tape edges."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._vjp = None

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def _make(data: np.ndarray, parents: tuple[Tensor, ...], vjp) -> Tensor:
    """Record an op result; the tape edge is dropped when no parent needs grad."""
    if CHECK_FINITE and not np.all(np.isfinite(data)):
        raise NumericalError("non-finite values produced by a tensor op")
    out = Tensor(data, requires_grad=_GRAD_ENABLED
                 and any(p.requires_grad for p in parents))
    if out.requires_grad:
        out._parents = parents
        out._vjp = vjp
    return out


def _check_2d(name: str, t: Tensor) -> None:
    if t.data.ndim != 2:
        raise ShapeError(f"{name} must be 2-d, got shape {t.data.shape}")


# ---------------------------------------------------------------------------
# Arithmetic
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    """a + b. Same shapes, scalar operand, or row-broadcast (N,d)+(d,)."""
    if a.data.shape == b.data.shape:
        return _make(a.data + b.data, (a, b), lambda g: (g, g))
    if b.data.ndim == 0 or a.data.ndim == 0:
        return _make(a.data + b.data,
                     (a, b),
                     lambda g: (np.sum(g) if a.data.ndim == 0 else g,
                                np.sum(g) if b.data.ndim == 0 else g))
    if a.data.ndim == 2 and b.data.ndim == 1 and a.data.shape[1] == b.data.shape[0]:
        return _make(a.data + b.data, (a, b), lambda g: (g, g.sum(axis=0)))
    raise ShapeError(f"add: incompatible shapes {a.data.shape} and {b.data.shape}")


def sub(a: Tensor, b: Tensor) -> Tensor:
    return add(a, neg(b))


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; same shapes or one scalar operand."""
    if a.data.shape == b.data.shape or a.data.ndim == 0 or b.data.ndim == 0:
        return _make(a.data * b.data,
                     (a, b),
                     lambda g: (_unbroadcast(g * b.data, a.data.shape),
                                _unbroadcast(g * a.data, b.data.shape)))
    raise ShapeError(f"mul: incompatible shapes {a.data.shape} and {b.data.shape}")


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    return np.sum(g) if shape == () else g


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a python constant (no gradient to c)."""
    return _make(a.data * c, (a,), lambda g: (g * c,))


def mul_const(a: Tensor, c: np.ndarray) -> Tensor:
    """Elementwise product with a fixed array (no gradient to c)."""
    c = np.asarray(c, dtype=np.float64)
    if c.shape != a.data.shape:
        raise ShapeError(f"mul_const: shapes {a.data.shape} and {c.shape} differ")
    return _make(a.data * c, (a,), lambda g: (g * c,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _check_2d("matmul lhs", a)
    _check_2d("matmul rhs", b)
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(
            f"matmul: inner dimensions disagree, {a.data.shape} x {b.data.shape}")
    return _make(a.data @ b.data,
                 (a, b),
                 lambda g: (g @ b.data.T, a.data.T @ g))


def transpose(a: Tensor) -> Tensor:
    _check_2d("transpose", a)
    return _make(a.data.T.copy(), (a,), lambda g: (g.T,))


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)
    return _make(out_data, (a,), lambda g: (g * out_data,))


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def clamp_min(a: Tensor, floor: float) -> Tensor:
    """max(a, floor); gradient is zero where the floor binds."""
    mask = a.data > floor
    return _make(np.maximum(a.data, floor), (a,), lambda g: (g * mask,))


def sum_all(a: Tensor) -> Tensor:
    shape = a.data.shape
    return _make(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    return scale(sum_all(a), 1.0 / n)


def dot(u: Tensor, v: Tensor) -> Tensor:
    if u.data.shape != v.data.shape or u.data.ndim != 1:
        raise ShapeError(f"dot: need equal 1-d shapes, got {u.data.shape} and {v.data.shape}")
    return sum_all(mul(u, v))


# ---------------------------------------------------------------------------
# Neural-net primitives
# ---------------------------------------------------------------------------

def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(np.maximum(a.data, 0.0), (a,), lambda g: (g * mask,))


def softmax_temp(x: Tensor, tau: float) -> Tensor:
    """Row-wise softmax of x/tau with max subtraction for stability."""
    if tau <= 0:
        raise ParameterError(f"softmax temperature must be positive, got {tau}")
    z = x.data / tau
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        inner = (g * y).sum(axis=-1, keepdims=True)
        return ((g - inner) * y / tau,)

    return _make(y, (x,), vjp)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Row-wise standardization followed by an affine map."""
    n = x.data.shape[-1]
    if n < 2:
        raise ParameterError(f"layer_norm needs at least 2 features, got {n}")
    if gain.data.shape != (n,) or bias.data.shape != (n,):
        raise ShapeError(
            f"layer_norm: gain/bias shapes {gain.data.shape}/{bias.data.shape} "
            f"do not match feature count {n}")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = gain.data * xhat + bias.data

    def vjp(g):
        dgain = (g * xhat).reshape(-1, n).sum(axis=0)
        dbias = g.reshape(-1, n).sum(axis=0)
        dxhat = g * gain.data
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        dx = (dxhat - m1 - xhat * m2) * inv
        return (dx, dgain, dbias)

    return _make(out, (x, gain, bias), vjp)


def l2_normalize(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Scale each row to unit Euclidean norm; rows with norm < eps pass through."""
    norms = np.sqrt((x.data ** 2).sum(axis=-1, keepdims=True))
    safe = norms >= eps
    denom = np.where(safe, norms, 1.0)
    y = x.data / denom

    def vjp(g):
        inner = (g * y).sum(axis=-1, keepdims=True)
        dx = np.where(safe, (g - y * inner) / denom, g)
        return (dx,)

    return _make(y, (x,), vjp)


def concat_features(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate along the feature (last) axis."""
    if a.data.ndim != b.data.ndim or a.data.shape[:-1] != b.data.shape[:-1]:
        raise ShapeError(f"concat_features: shapes {a.data.shape} and {b.data.shape}")
    na = a.data.shape[-1]
    return _make(np.concatenate([a.data, b.data], axis=-1),
                 (a, b),
                 lambda g: (g[..., :na], g[..., na:]))


def max_pool_rows(x: Tensor) -> Tensor:
    """Elementwise maximum over the rows of an (N,d) matrix -> (d,) vector.

    Ties route the gradient to the lowest row index.
    """
    _check_2d("max_pool_rows", x)
    arg = x.data.argmax(axis=0)
    out = x.data[arg, np.arange(x.data.shape[1])]

    def vjp(g):
        dx = np.zeros_like(x.data)
        dx[arg, np.arange(x.data.shape[1])] = g
        return (dx,)

    return _make(out, (x,), vjp)


def logistic_loss(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean log(1 + exp(-y*z)) for labels y in {-1, +1}, computed stably."""
    y = np.asarray(targets, dtype=np.float64)
    if y.shape != logits.data.shape:
        raise ShapeError(f"logistic_loss: logits {logits.data.shape} vs targets {y.shape}")
    margin = -y * logits.data
    value = np.logaddexp(0.0, margin).mean()
    n = y.size

    def vjp(g):
        sig = 1.0 / (1.0 + np.exp(-margin))
        return (g * (-y) * sig / n,)

    return _make(np.asarray(value), (logits,), vjp)


def cosine(u: Tensor, v: Tensor) -> Tensor:
    """cos(u, v) with a 1e-12 denominator guard (zero gradient when it binds)."""
    if u.data.shape != v.data.shape or u.data.ndim != 1:
        raise ShapeError(f"cosine: need equal 1-d shapes, got {u.data.shape} and {v.data.shape}")
    nu = np.sqrt((u.data ** 2).sum())
    nv = np.sqrt((v.data ** 2).sum())
    denom = nu * nv
    guarded = denom < 1e-12
    denom = max(denom, 1e-12)
    c = float(u.data @ v.data) / denom

    def vjp(g):
        if guarded:
            return (np.zeros_like(u.data), np.zeros_like(v.data))
        du = (v.data / denom - c * u.data / (nu * nu)) * g
        dv = (u.data / denom - c * v.data / (nv * nv)) * g
        return (du, dv)

    return _make(np.asarray(c), (u, v), vjp)


# ---------------------------------------------------------------------------
# Indexing / assembly
# ---------------------------------------------------------------------------

def gather_rows(x: Tensor, indices) -> Tensor:
    """Select rows of an (N,d) matrix; duplicate indices sum in the backward."""
    _check_2d("gather_rows", x)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1 or idx.size == 0:
        raise ShapeError("gather_rows: indices must be a nonempty 1-d sequence")
    if idx.min() < 0 or idx.max() >= x.data.shape[0]:
        raise ShapeError(
            f"gather_rows: index out of range for {x.data.shape[0]} rows")

    def vjp(g):
        dx = np.zeros_like(x.data)
        np.add.at(dx, idx, g)
        return (dx,)

    return _make(x.data[idx], (x,), vjp)


def row(x: Tensor, i: int) -> Tensor:
    """Single row of an (N,d) matrix as a (d,) vector."""
    _check_2d("row", x)

    def vjp(g):
        dx = np.zeros_like(x.data)
        dx[i] = g
        return (dx,)

    return _make(x.data[i].copy(), (x,), vjp)


def as_row_matrix(v: Tensor) -> Tensor:
    """View a (d,) vector as a (1,d) matrix."""
    if v.data.ndim != 1:
        raise ShapeError(f"as_row_matrix: need 1-d input, got {v.data.shape}")
    return _make(v.data.reshape(1, -1), (v,), lambda g: (g.reshape(-1),))


def as_vector(m: Tensor) -> Tensor:
    """View a (1,d) or (n,1) matrix as a flat vector."""
    if m.data.ndim != 2 or 1 not in m.data.shape:
        raise ShapeError(f"as_vector: need a (1,d) or (n,1) input, got {m.data.shape}")
    shape = m.data.shape
    return _make(m.data.reshape(-1), (m,), lambda g: (g.reshape(shape),))


def index_element(x: Tensor, i: int) -> Tensor:
    """Scalar element of a 1-d vector."""
    if x.data.ndim != 1:
        raise ShapeError(f"index_element: need 1-d input, got {x.data.shape}")

    def vjp(g):
        dx = np.zeros_like(x.data)
        dx[i] = g
        return (dx,)

    return _make(np.asarray(x.data[i]), (x,), vjp)


def slice_vec(x: Tensor, lo: int, hi: int) -> Tensor:
    """Contiguous slice [lo, hi) of a 1-d vector."""
    if x.data.ndim != 1:
        raise ShapeError(f"slice_vec: need 1-d input, got {x.data.shape}")
    if not 0 <= lo < hi <= x.data.shape[0]:
        raise ShapeError(f"slice_vec: bad range [{lo}, {hi}) for length {x.data.shape[0]}")

    def vjp(g):
        dx = np.zeros_like(x.data)
        dx[lo:hi] = g
        return (dx,)

    return _make(x.data[lo:hi].copy(), (x,), vjp)


def vec_max(x: Tensor) -> Tensor:
    """Maximum element of a 1-d vector; ties route gradient to the lowest index."""
    if x.data.ndim != 1 or x.data.size == 0:
        raise ShapeError(f"vec_max: need a nonempty 1-d input, got {x.data.shape}")
    arg = int(np.argmax(x.data))

    def vjp(g):
        dx = np.zeros_like(x.data)
        dx[arg] = g
        return (dx,)

    return _make(np.asarray(x.data[arg]), (x,), vjp)


def stack_rows(rows: list[Tensor]) -> Tensor:
    """Stack (d,) vectors into an (N,d) matrix."""
    if not rows:
        raise ShapeError("stack_rows: empty input")
    for r in rows:
        if r.data.shape != rows[0].data.shape or r.data.ndim != 1:
            raise ShapeError("stack_rows: all rows must be 1-d with equal length")

    def vjp(g):
        return tuple(g[i] for i in range(len(rows)))

    return _make(np.stack([r.data for r in rows]), tuple(rows), vjp)


def concat_rows(mats: list[Tensor]) -> Tensor:
    """Stack (N_i, d) matrices vertically into a (sum N_i, d) matrix."""
    if not mats:
        raise ShapeError("concat_rows: empty input")
    d = mats[0].data.shape[-1]
    for m in mats:
        if m.data.ndim != 2 or m.data.shape[1] != d:
            raise ShapeError("concat_rows: all inputs must be 2-d with equal width")
    splits = np.cumsum([m.data.shape[0] for m in mats])[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=0))

    return _make(np.concatenate([m.data for m in mats], axis=0), tuple(mats), vjp)


def mean_rows(x: Tensor) -> Tensor:
    """Mean over the rows of an (N,d) matrix -> (d,) vector."""
    _check_2d("mean_rows", x)
    n = x.data.shape[0]
    return _make(x.data.mean(axis=0),
                 (x,),
                 lambda g: (np.broadcast_to(g / n, x.data.shape).copy(),))


# ---------------------------------------------------------------------------
# Backward pass
# ---------------------------------------------------------------------------

def linearize(root: Tensor) -> list[Tensor]:
    """Tape for ``root``: executed ops in topological order (inputs first)."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into t.grad for every requires_grad tensor."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    tape = linearize(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            node.grad = g.copy() if node.grad is None else node.grad + g
        if node._vjp is None:
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = np.asarray(pg, dtype=np.float64)


def zero_grads(params) -> None:
    for p in params:
        p.zero_grad()


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

class AdamState:
    """First/second moment arrays per parameter plus a shared step counter."""

    def __init__(self, params: list[Tensor], beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]


def adam_step(params: list[Tensor], grads: list[np.ndarray | None],
              state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update in place. Missing grads are treated as 0."""
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is not None and not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for parameter block {i}; step aborted")
        if g is not None and g.shape != p.data.shape:
            raise ShapeError(f"adam_step: grad shape {g.shape} != param shape {p.data.shape}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            g = np.zeros_like(p.data)
        state.m[i] = b1 * state.m[i] + (1 - b1) * g
        state.v[i] = b2 * state.v[i] + (1 - b2) * g * g
        mhat = state.m[i] / bc1
        vhat = state.v[i] / bc2
        p.data -= lr * mhat / (np.sqrt(vhat) + state.eps)


class Adam:
    """Optimizer facade: reads gradients off the parameters themselves."""

    def __init__(self, params: list[Tensor], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.state = AdamState(params, beta1, beta2, eps)

    def step(self) -> None:
        adam_step(self.params, [p.grad for p in self.params], self.state, self.lr)

    def zero_grad(self) -> None:
        zero_grads(self.params)


# ---------------------------------------------------------------------------
# Finite-difference gradient checking
# ---------------------------------------------------------------------------

class GradCheckReport:
    """Per-block max relative error between analytic and numeric gradients."""

    def __init__(self, block_errors: dict[str, float]):
        self.block_errors = block_errors
        self.max_error = max(block_errors.values()) if block_errors else 0.0

    def passes(self, tol: float) -> bool:
        return self.max_error < tol

    def __repr__(self):
        return f"GradCheckReport(max_error={self.max_error:.3e})"


def _rel_err(a: float, n: float) -> float:
    scale_ = max(abs(a), abs(n))
    if scale_ < 1e-6:
        return abs(a - n) / 1e-6
    return abs(a - n) / scale_


def grad_check(fn, params: dict[str, Tensor], tol: float = 1e-4,
               h: float = 1e-5, max_entries: int | None = None) -> GradCheckReport:
    """Compare backward() gradients of fn() against central finite differences.

    fn must rebuild its graph from ``params`` on every call and return a
    scalar Tensor. Blocks with requires_grad=False are excluded from the
    report. ``max_entries`` caps the number of probed elements per block
    (evenly strided, deterministic).
    """
    live = {k: p for k, p in params.items() if p.requires_grad}
    zero_grads(live.values())
    backward(fn())
    analytic = {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for k, p in live.items()}
    zero_grads(live.values())

    errors: dict[str, float] = {}
    for name, p in live.items():
        flat = p.data.reshape(-1)
        n = flat.size
        if max_entries is not None and n > max_entries:
            idxs = np.linspace(0, n - 1, max_entries).astype(int)
        else:
            idxs = np.arange(n)
        worst = 0.0
        ana = analytic[name].reshape(-1)
        for j in idxs:
            orig = flat[j]
            flat[j] = orig + h
            up = fn().item()
            flat[j] = orig - h
            dn = fn().item()
            flat[j] = orig
            numeric = (up - dn) / (2 * h)
            worst = max(worst, _rel_err(ana[j], numeric))
        errors[name] = worst
    return GradCheckReport(errors)
