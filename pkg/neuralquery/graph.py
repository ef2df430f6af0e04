"""
Differentiable compute graph for query expressions.

Expressions are built bottom-up as a DAG of ``Expr`` nodes. Node ids grow
monotonically, so children always precede their parents and sorting by id
is a topological order. A ``Tape`` evaluates a DAG (define-by-run, one
memoized value per node per tape) and replays it in reverse to accumulate
gradients into ``Parameter`` objects.

Typed nodes denote batches of weighted multisets and carry the entity type
name; untyped nodes (``type_name is None``) are plain tensors such as
encoder states, gate scalars and losses.
"""

import itertools
import logging
from typing import Any, Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy import special

from . import sparse_linalg as sl
from .exceptions import NQLTypeError, ShapeError, UsageError, ValidationError

logger = logging.getLogger(__name__)

_ids = itertools.count()

TRANSFORMS = ("identity", "softmax", "softplus", "sigmoid", "tanh")


class Expr:
    """A node of the query compute graph (a batch of weighted multisets or a tensor)."""

    __slots__ = ("id", "op", "children", "shape", "type_name", "kb", "context", "attrs")

    def __init__(self, op: str, children: Sequence["Expr"] = (), *, shape: Tuple[int, int],
                 type_name: Optional[str] = None, kb: Any = None, context: Any = None,
                 attrs: Optional[Dict[str, Any]] = None):
        self.id = next(_ids)
        self.op = op
        self.children = tuple(children)
        self.shape = (int(shape[0]), int(shape[1]))
        self.type_name = type_name
        if kb is None or context is None:
            for child in self.children:
                kb = kb if kb is not None else child.kb
                context = context if context is not None else child.context
        self.kb = kb
        self.context = context
        self.attrs = attrs or {}

    @property
    def batch_size(self) -> int:
        return self.shape[0]

    @property
    def width(self) -> int:
        return self.shape[1]

    def __repr__(self) -> str:
        kind = self.type_name or "tensor"
        return f"<Expr #{self.id} {self.op} {kind} {self.shape[0]}x{self.shape[1]}>"

    # -- query operator sugar; the typed checks live in the query module --

    def rel(self, name: str, inverse: bool = False) -> "Expr":
        from . import query
        return query.rel_call(self, name, inverse)

    def follow(self, r, inverse: bool = False) -> "Expr":
        from . import query
        return query.follow(self, r, inverse)

    def if_any(self, t: "Expr") -> "Expr":
        from . import query
        return query.if_any(self, t)

    def __or__(self, other: "Expr") -> "Expr":
        from . import query
        return query.union(self, other)

    def __and__(self, other: "Expr") -> "Expr":
        from . import query
        return query.intersect(self, other)

    def __add__(self, other: "Expr") -> "Expr":
        if isinstance(other, (int, float)):
            return axpb(self, 1.0, float(other))
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other) -> "Expr":
        from . import query
        return query.gate(self, other)

    __rmul__ = __mul__

    def __sub__(self, other: float) -> "Expr":
        return axpb(self, 1.0, -float(other))

    def __rsub__(self, other: float) -> "Expr":
        return axpb(self, -1.0, float(other))

    def __neg__(self) -> "Expr":
        return axpb(self, -1.0, 0.0)

    @property
    def tf(self) -> "Expr":
        """Untyped tensor view of this expression."""
        return untyped(self)

    def eval(self, top_k: Optional[int] = None, min_weight: Optional[float] = None):
        """Evaluate and decode to ``[(entity name, weight), ...]`` per batch row."""
        from . import kb_core
        if self.type_name is None or self.kb is None:
            raise UsageError("only typed expressions can be decoded to entity names")
        return kb_core.decode(self.kb, Tape().forward(self), self.type_name,
                              top_k=top_k, min_weight=min_weight)

    def __getattr__(self, name: str):
        # relation names double as methods: henry8.wife(), henry8.son(-1)
        if name.startswith("_") or name in Expr.__slots__:
            raise AttributeError(name)
        kb = object.__getattribute__(self, "kb")
        if kb is not None and name in kb.relations:
            def method(inverse: int = 1) -> "Expr":
                if inverse not in (1, -1):
                    raise ValidationError(f"{name}() takes -1 for the inverse relation")
                return self.rel(name, inverse == -1)
            return method
        raise AttributeError(f"{type(self).__name__} has no attribute or relation {name!r}")

    def __hash__(self) -> int:
        return self.id

    def __eq__(self, other) -> bool:
        return self is other


class Parameter:
    """A trainable dense array; ``constraint`` is applied before it enters a graph."""

    def __init__(self, name: str, values, constraint: str = "identity"):
        if constraint not in TRANSFORMS:
            raise ValidationError(f"unknown constraint {constraint!r}")
        self.name = name
        self.values = np.array(values, dtype=np.float64)
        if self.values.ndim not in (1, 2):
            raise ShapeError(f"parameter {name!r} must be 1-d or 2-d, got {self.values.shape}")
        self.grad = np.zeros_like(self.values)
        self.constraint = constraint

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.values.shape

    def matrix(self) -> np.ndarray:
        return self.values.reshape(1, -1) if self.values.ndim == 1 else self.values

    def constrained(self) -> np.ndarray:
        return _apply_transform(self.constraint, self.matrix())

    def view(self) -> Expr:
        leaf = Expr("parameter", shape=self.matrix().shape, attrs={"param": self})
        if self.constraint == "identity":
            return leaf
        return transform(leaf, self.constraint)

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}, constraint={self.constraint!r})"


# ---------------------------------------------------------------- constructors

def _batch_of(a: Tuple[int, int], b: Tuple[int, int]) -> int:
    if a[0] == b[0] or b[0] == 1:
        return a[0]
    if a[0] == 1:
        return b[0]
    raise ShapeError(f"batch sizes {a[0]} and {b[0]} cannot broadcast", a, b)


def _same_type(a: Expr, b: Expr, what: str) -> Optional[str]:
    if a.type_name != b.type_name:
        raise NQLTypeError(f"{what} needs operands of one type, got {a.type_name!r} "
                           f"and {b.type_name!r}", expected=a.type_name, actual=b.type_name)
    return a.type_name


def constant(values, type_name: Optional[str] = None, kb: Any = None,
             context: Any = None) -> Expr:
    values = np.array(values, dtype=np.float64, ndmin=2)
    if values.ndim != 2:
        raise ShapeError(f"constants must be 2-d batches, got {values.shape}", values.shape)
    return Expr("constant", shape=values.shape, type_name=type_name, kb=kb, context=context,
                attrs={"value": values})


def typed(child: Expr, type_name: str, kb: Any = None, context: Any = None) -> Expr:
    return Expr("typed", (child,), shape=child.shape, type_name=type_name, kb=kb,
                context=context)


def untyped(child: Expr) -> Expr:
    return Expr("untyped", (child,), shape=child.shape)


def transform(child: Expr, kind: str) -> Expr:
    if kind not in TRANSFORMS:
        raise ValidationError(f"unknown transform {kind!r}")
    return Expr("transform", (child,), shape=child.shape, attrs={"kind": kind})


def matmul(x: Expr, w: Expr) -> Expr:
    if x.width != w.shape[0]:
        raise ShapeError(f"matmul of {x.shape} and {w.shape}", x.shape, w.shape)
    return Expr("matmul", (x, w), shape=(x.batch_size, w.width))


def affine(x: Expr, weight: Parameter, bias: Parameter) -> Expr:
    return add(matmul(x, weight.view()), bias.view())


def add(a: Expr, b: Expr) -> Expr:
    type_name = _same_type(a, b, "union")
    if a.width != b.width:
        raise ShapeError(f"cannot add widths {a.width} and {b.width}", a.shape, b.shape)
    return Expr("add", (a, b), shape=(_batch_of(a.shape, b.shape), a.width),
                type_name=type_name)


def hadamard(a: Expr, b: Expr) -> Expr:
    type_name = _same_type(a, b, "intersection")
    if a.width != b.width:
        raise ShapeError(f"cannot intersect widths {a.width} and {b.width}", a.shape, b.shape)
    return Expr("hadamard", (a, b), shape=(_batch_of(a.shape, b.shape), a.width),
                type_name=type_name)


def scale(s: Expr, factor: float) -> Expr:
    return Expr("scale", (s,), shape=s.shape, type_name=s.type_name,
                attrs={"factor": float(factor)})


def gate(s: Expr, a: Expr) -> Expr:
    """``s * a`` with ``a`` a per-row scalar of shape (B, 1) or (1, 1)."""
    if a.width != 1:
        raise ShapeError(f"gate scalar must have width 1, got {a.shape}", s.shape, a.shape)
    return Expr("gate", (s, a), shape=(_batch_of(s.shape, a.shape), s.width),
                type_name=s.type_name)


def if_any(s: Expr, t: Expr) -> Expr:
    return Expr("if_any", (s, t), shape=(_batch_of(s.shape, t.shape), s.width),
                type_name=s.type_name)


def axpb(x: Expr, a: float, b: float) -> Expr:
    return Expr("axpb", (x,), shape=x.shape, attrs={"a": float(a), "b": float(b)})


def row_sum(x: Expr) -> Expr:
    return Expr("row_sum", (x,), shape=(x.batch_size, 1))


def reduce_sum(x: Expr) -> Expr:
    return Expr("reduce_sum", (x,), shape=(1, 1))


def relation(s: Expr, matrix: sl.SparseMatrix, inverse: bool, result_type: str,
             name: str = "", weights: Optional[Expr] = None) -> Expr:
    op = "rel_inverse" if inverse else "rel_forward"
    width = matrix.n_rows if inverse else matrix.n_cols
    children = (s,) if weights is None else (s, weights)
    return Expr(op, children, shape=(s.batch_size, width), type_name=result_type,
                attrs={"matrix": matrix, "name": name})


def follow(s: Expr, r: Expr, group: Any, inverse: bool, result_type: str,
           strategy: str = "sum", weights: Optional[Sequence[Optional[Expr]]] = None) -> Expr:
    """``s (sum_i r[i] M_i)``; ``weights[i]``, when given, replaces the stored entries of M_i."""
    if strategy not in ("sum", "stacked"):
        raise ValidationError(f"unknown follow strategy {strategy!r}")
    weights = list(weights or [None] * group.k)
    if len(weights) != group.k:
        raise ShapeError(f"expected {group.k} member weights, got {len(weights)}")
    weighted = tuple(i for i, w in enumerate(weights) if w is not None)
    width = group.matrices[0].n_rows if inverse else group.matrices[0].n_cols
    return Expr("follow", (s, r) + tuple(weights[i] for i in weighted),
                shape=(_batch_of(s.shape, r.shape), width), type_name=result_type,
                attrs={"group": group, "inverse": inverse, "strategy": strategy,
                       "weighted": weighted})


def target_mass_nll(y: Expr, mask: np.ndarray, epsilon: float = 1e-8) -> Expr:
    mask = _loss_mask(y, mask)
    return Expr("target_mass_nll", (y,), shape=(1, 1),
                attrs={"mask": mask, "epsilon": float(epsilon)})


def binary_cross_entropy(y: Expr, mask: np.ndarray, epsilon: float = 1e-8) -> Expr:
    mask = _loss_mask(y, mask)
    return Expr("binary_cross_entropy", (y,), shape=(1, 1),
                attrs={"mask": mask, "epsilon": float(epsilon)})


def _loss_mask(y: Expr, mask) -> np.ndarray:
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != y.shape:
        raise ShapeError(f"target mask {mask.shape} does not match prediction {y.shape}",
                         mask.shape, y.shape)
    return mask


def as_expr(kb: Any, raw, type_name: str, context: Any = None) -> Expr:
    """Wrap a tensor node, parameter or array as a typed multiset expression."""
    decl = kb.type(type_name)
    if isinstance(raw, Parameter):
        raw = raw.view()
    elif not isinstance(raw, Expr):
        raw = constant(raw)
    if raw.width != decl.cardinality:
        raise ShapeError(f"tensor of width {raw.width} is not compatible with type "
                         f"{type_name!r} (N={decl.cardinality})", raw.shape,
                         (raw.batch_size, decl.cardinality))
    return typed(raw, type_name, kb, context)


def as_tensor(expr: Expr) -> np.ndarray:
    """Evaluate ``expr`` on a fresh tape and return its raw (B, N) buffer."""
    return Tape().forward(expr)


def forward(root: Expr) -> np.ndarray:
    return Tape().forward(root)


def backward(tape: "Tape", loss: Expr, params: Iterable[Parameter] = ()) -> List[np.ndarray]:
    """Run ``tape.backward(loss)`` and return the gradients of ``params`` in order."""
    grads = tape.backward(loss)
    return [grads.get(p, np.zeros_like(p.values)) for p in params]


# ---------------------------------------------------------------- evaluation

def _apply_transform(kind: str, x: np.ndarray) -> np.ndarray:
    if kind == "identity":
        return x
    if kind == "softmax":
        return special.softmax(x, axis=1)
    if kind == "softplus":
        return np.logaddexp(0.0, x)
    if kind == "sigmoid":
        return special.expit(x)
    return np.tanh(x)


def _transform_grad(kind: str, x: np.ndarray, y: np.ndarray, g: np.ndarray) -> np.ndarray:
    if kind == "identity":
        return g
    if kind == "softmax":
        return y * (g - (g * y).sum(axis=1, keepdims=True))
    if kind == "softplus":
        return g * special.expit(x)
    if kind == "sigmoid":
        return g * y * (1.0 - y)
    return g * (1.0 - y * y)


def _rows(x: np.ndarray, batch: int) -> np.ndarray:
    return x if x.shape[0] == batch else np.broadcast_to(x, (batch, x.shape[1]))


def _unbroadcast(g: np.ndarray, shape: Tuple[int, int]) -> np.ndarray:
    if g.shape[0] != shape[0]:
        g = g.sum(axis=0, keepdims=True)
    if g.shape[1] != shape[1]:
        g = g.sum(axis=1, keepdims=True)
    return g


def _matrix_of(node: Expr, inputs: List[np.ndarray]) -> sl.SparseMatrix:
    matrix = node.attrs["matrix"]
    if len(inputs) > 1:
        return matrix.with_weights(inputs[1])
    return matrix


def _follow_members(node: Expr, inputs: List[np.ndarray]) -> List[sl.SparseMatrix]:
    """Member matrices of a follow node, with any trainable weights applied."""
    members = list(node.attrs["group"].matrices)
    for i, values in zip(node.attrs["weighted"], inputs[2:]):
        members[i] = members[i].with_weights(values)
    return members


class Tape:
    """Records one evaluation of a graph and replays it backwards."""

    def __init__(self):
        self._values: Dict[int, np.ndarray] = {}
        self._nodes: Dict[int, Expr] = {}
        self._saved: Dict[int, Any] = {}
        self._order: List[int] = []

    def __contains__(self, node: Expr) -> bool:
        return node.id in self._values

    def value(self, node: Expr) -> np.ndarray:
        if node.id not in self._values:
            raise UsageError(f"{node!r} has not been evaluated on this tape")
        return self._values[node.id]

    def forward(self, root: Expr) -> np.ndarray:
        pending: Dict[int, Expr] = {}
        stack = [root]
        while stack:
            node = stack.pop()
            if node.id in pending or node.id in self._values:
                continue
            pending[node.id] = node
            stack.extend(node.children)
        for node_id in sorted(pending):
            node = pending[node_id]
            inputs = [self._values[c.id] for c in node.children]
            self._values[node_id] = self._evaluate(node, inputs)
            self._nodes[node_id] = node
            self._order.append(node_id)
        logger.debug("evaluated %d nodes (tape holds %d)", len(pending), len(self._order))
        return self._values[root.id]

    def backward(self, loss: Expr) -> Dict[Parameter, np.ndarray]:
        if loss.id not in self._values:
            raise UsageError("backward() called before forward() on this tape")
        if loss.shape != (1, 1):
            raise UsageError(f"backward() needs a scalar loss, got shape {loss.shape}")
        adjoints: Dict[int, np.ndarray] = {loss.id: np.ones((1, 1))}
        touched: Dict[Parameter, np.ndarray] = {}
        for node_id in reversed(self._order):
            g = adjoints.pop(node_id, None)
            if g is None:
                continue
            node = self._nodes[node_id]
            if node.op == "parameter":
                param = node.attrs["param"]
                param.grad += g.reshape(param.values.shape)
                touched[param] = param.grad
                continue
            inputs = [self._values[c.id] for c in node.children]
            grads = self._gradient(node, g, inputs)
            for child, cg in zip(node.children, grads):
                if cg is None:
                    continue
                cg = _unbroadcast(cg, child.shape)
                if child.id in adjoints:
                    adjoints[child.id] = adjoints[child.id] + cg
                else:
                    adjoints[child.id] = cg
        return touched

    # forward rules, one per op kind
    def _evaluate(self, node: Expr, inputs: List[np.ndarray]) -> np.ndarray:
        op, attrs = node.op, node.attrs
        if op == "constant":
            return attrs["value"]
        if op == "parameter":
            return attrs["param"].matrix()
        if op in ("typed", "untyped"):
            return inputs[0]
        if op == "transform":
            return _apply_transform(attrs["kind"], inputs[0])
        if op == "matmul":
            return inputs[0] @ inputs[1]
        if op == "add":
            return inputs[0] + inputs[1]
        if op == "hadamard":
            return inputs[0] * inputs[1]
        if op == "scale":
            return inputs[0] * attrs["factor"]
        if op == "gate":
            return inputs[0] * inputs[1]
        if op == "if_any":
            return inputs[0] * inputs[1].sum(axis=1, keepdims=True)
        if op == "axpb":
            return attrs["a"] * inputs[0] + attrs["b"]
        if op == "row_sum":
            return inputs[0].sum(axis=1, keepdims=True)
        if op == "reduce_sum":
            return inputs[0].sum().reshape(1, 1)
        if op == "rel_forward":
            return sl.spmm_right(inputs[0], _matrix_of(node, inputs))
        if op == "rel_inverse":
            return sl.spmm_right_transpose(inputs[0], _matrix_of(node, inputs))
        if op == "follow":
            return self._follow_forward(node, inputs)
        if op == "target_mass_nll":
            y, mask, eps = inputs[0], attrs["mask"], attrs["epsilon"]
            target = (y * mask).sum(axis=1) + eps
            total = y.sum(axis=1) + eps * y.shape[1]
            self._saved[node.id] = (target, total)
            return np.mean(np.log(total) - np.log(target)).reshape(1, 1)
        if op == "binary_cross_entropy":
            y, mask, eps = inputs[0], attrs["mask"], attrs["epsilon"]
            p = np.clip(y, eps, 1.0 - eps)
            loss = -(mask * np.log(p) + (1.0 - mask) * np.log1p(-p))
            return np.mean(loss).reshape(1, 1)
        raise UsageError(f"no forward rule for op {op!r}")

    def _follow_forward(self, node: Expr, inputs: List[np.ndarray]) -> np.ndarray:
        group, inverse = node.attrs["group"], node.attrs["inverse"]
        batch = node.batch_size
        s, r = _rows(inputs[0], batch), _rows(inputs[1], batch)
        members = _follow_members(node, inputs)
        if node.attrs["strategy"] == "stacked":
            if node.attrs["weighted"]:
                stacked = sl.stack_members([m.T if inverse else m for m in members])
            else:
                stacked = group.stacked(inverse)
            out, products = sl.stacked_weighted_matvec(s, r, stacked, group.k)
            self._saved[node.id] = products
            return out
        return sl.weighted_sum_matvec(s, r, [m.T if inverse else m for m in members])

    # backward rules; each returns one adjoint (or None) per child
    def _gradient(self, node: Expr, g: np.ndarray,
                  inputs: List[np.ndarray]) -> Tuple[Optional[np.ndarray], ...]:
        op, attrs = node.op, node.attrs
        if op in ("typed", "untyped", "add"):
            return (g,) * len(inputs)
        if op == "constant":
            return ()
        if op == "transform":
            y = self._values[node.id]
            return (_transform_grad(attrs["kind"], inputs[0], y, g),)
        if op == "matmul":
            x, w = inputs
            return g @ w.T, x.T @ g
        if op == "hadamard":
            a, b = inputs
            return g * b, g * a
        if op == "scale":
            return (g * attrs["factor"],)
        if op == "gate":
            s, a = inputs
            return g * a, (g * s).sum(axis=1, keepdims=True)
        if op == "if_any":
            s, t = inputs
            mass = t.sum(axis=1, keepdims=True)
            inner = (g * s).sum(axis=1, keepdims=True)
            return g * mass, np.broadcast_to(inner, (g.shape[0], t.shape[1]))
        if op == "axpb":
            return (g * attrs["a"],)
        if op == "row_sum":
            return (np.broadcast_to(g, inputs[0].shape),)
        if op == "reduce_sum":
            return (np.broadcast_to(g, inputs[0].shape),)
        if op in ("rel_forward", "rel_inverse"):
            return self._relation_backward(node, g, inputs)
        if op == "follow":
            return self._follow_backward(node, g, inputs)
        if op == "target_mass_nll":
            y, mask = inputs[0], attrs["mask"]
            target, total = self._saved[node.id]
            batch = y.shape[0]
            grad = (1.0 / total)[:, None] - mask / target[:, None]
            return (g[0, 0] * grad / batch,)
        if op == "binary_cross_entropy":
            y, mask, eps = inputs[0], attrs["mask"], attrs["epsilon"]
            p = np.clip(y, eps, 1.0 - eps)
            inside = (y > eps) & (y < 1.0 - eps)
            grad = -(mask / p - (1.0 - mask) / (1.0 - p)) * inside
            return (g[0, 0] * grad / y.size,)
        raise UsageError(f"no backward rule for op {op!r}")

    def _relation_backward(self, node: Expr, g: np.ndarray, inputs: List[np.ndarray]):
        matrix = _matrix_of(node, inputs)
        inverse = node.op == "rel_inverse"
        gs = sl.spmm_right(g, matrix) if inverse else sl.spmm_right_transpose(g, matrix)
        if len(inputs) == 1:
            return (gs,)
        gw = sl.entry_gradient(inputs[0], g, matrix, inverse=inverse)
        return gs, gw.reshape(1, -1)

    def _follow_backward(self, node: Expr, g: np.ndarray, inputs: List[np.ndarray]):
        group, inverse = node.attrs["group"], node.attrs["inverse"]
        batch = node.batch_size
        s, r = _rows(inputs[0], batch), _rows(inputs[1], batch)
        members = _follow_members(node, inputs)
        back = members if inverse else [m.T for m in members]
        gs = sl.weighted_sum_matvec(g, r, back)
        if node.attrs["strategy"] == "stacked":
            gr = np.einsum("bn,bkn->bk", g, self._saved[node.id])
        else:
            gr = np.empty((batch, group.k))
            for i, m in enumerate(back):
                # <g, s M_i> = <g M_i^T, s>
                gr[:, i] = (sl.spmm_right(g, m) * s).sum(axis=1)
        # member i sees the input rows scaled by r[:, i]
        gw = tuple(sl.entry_gradient(s * r[:, i:i + 1], g, members[i], inverse=inverse)
                   .reshape(1, -1) for i in node.attrs["weighted"])
        return (gs, gr) + gw


def numeric_gradient(loss_fn: Callable[[], float], param: Parameter,
                     h: float = 1e-5) -> np.ndarray:
    """Central finite differences of ``loss_fn`` wrt every entry of ``param``."""
    grad = np.zeros_like(param.values)
    flat = param.values.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        saved = flat[i]
        flat[i] = saved + h
        up = loss_fn()
        flat[i] = saved - h
        down = loss_fn()
        flat[i] = saved
        out[i] = (up - down) / (2.0 * h)
    return grad
