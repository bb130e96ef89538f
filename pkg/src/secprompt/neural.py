"""A small reverse-mode autodiff kernel over numpy, sized for graph GAN training."""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, asdict
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

LOG_FLOOR = 1e-7


class ShapeMismatch(ValueError):
    pass


class EmptyGraph(ValueError):
    pass


class ZeroVector(ValueError):
    pass


class NonFiniteGradient(FloatingPointError):
    pass


class VersionMismatch(Exception):
    pass


class CorruptCheckpoint(Exception):
    pass


class Mat:
    """Dense 2-D float64 matrix that records how it was computed."""

    __slots__ = ("value", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, value, requires_grad: bool = False, parents=(), backward=None, name: str = ""):
        v = np.asarray(value, dtype=np.float64)
        if v.ndim == 0:
            v = v.reshape(1, 1)
        elif v.ndim == 1:
            v = v.reshape(1, -1)
        elif v.ndim != 2:
            raise ShapeMismatch(f"Mat must be 2-D, got shape {v.shape}")
        self.value = v
        self.grad = np.zeros_like(v)
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self._parents = tuple(parents)
        self._backward = backward
        self.name = name

    # -- construction -----------------------------------------------------------
    @classmethod
    def param(cls, value, name: str = "") -> "Mat":
        return cls(np.array(value, dtype=np.float64), requires_grad=True, name=name)

    @classmethod
    def const(cls, value) -> "Mat":
        return cls(value)

    @property
    def shape(self):
        return self.value.shape

    @property
    def rows(self):
        return self.value.shape[0]

    @property
    def cols(self):
        return self.value.shape[1]

    def item(self) -> float:
        if self.value.size != 1:
            raise ShapeMismatch("item() needs a 1x1 matrix")
        return float(self.value[0, 0])

    def detach(self) -> "Mat":
        return Mat(self.value.copy())

    def zero_grad(self):
        self.grad = np.zeros_like(self.value)

    def __repr__(self):
        return f"Mat({self.rows}x{self.cols}{', grad' if self.requires_grad else ''})"

    # -- backward ---------------------------------------------------------------
    def backward(self):
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``."""
        if self.value.size != 1:
            raise ShapeMismatch("backward() starts from a scalar")
        order, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        upstream = {id(self): np.ones_like(self.value)}
        for node in reversed(order):
            g = upstream.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if parent.requires_grad and pg is not None:
                    key = id(parent)
                    upstream[key] = upstream[key] + pg if key in upstream else pg

    # -- operator sugar -----------------------------------------------------------
    def __add__(self, other):
        return add(self, _lift(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, _lift(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, _lift(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _lift(x) -> Mat:
    return x if isinstance(x, Mat) else Mat(np.array(x, dtype=np.float64))


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape[0] == 1 and g.shape[0] != 1:
        g = g.sum(axis=0, keepdims=True)
    if shape[1] == 1 and g.shape[1] != 1:
        g = g.sum(axis=1, keepdims=True)
    return g


def _check_broadcast(a: Mat, b: Mat):
    for da, db in zip(a.shape, b.shape):
        if da != db and da != 1 and db != 1:
            raise ShapeMismatch(f"cannot broadcast {a.shape} with {b.shape}")


# -- elementary ops ------------------------------------------------------------------

def matmul(a: Mat, b: Mat) -> Mat:
    if a.cols != b.rows:
        raise ShapeMismatch(f"matmul {a.shape} @ {b.shape}")
    return Mat(a.value @ b.value, parents=(a, b),
               backward=lambda g: (g @ b.value.T, a.value.T @ g))


def const_matmul(m: np.ndarray, x: Mat) -> Mat:
    """``m @ x`` for a constant (non-differentiable) left operand."""
    m = np.asarray(m, dtype=np.float64)
    if m.shape[1] != x.rows:
        raise ShapeMismatch(f"matmul {m.shape} @ {x.shape}")
    return Mat(m @ x.value, parents=(x,), backward=lambda g: (m.T @ g,))


def add(a: Mat, b: Mat) -> Mat:
    _check_broadcast(a, b)
    return Mat(a.value + b.value, parents=(a, b),
               backward=lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Mat, b: Mat) -> Mat:
    _check_broadcast(a, b)
    return Mat(a.value - b.value, parents=(a, b),
               backward=lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: Mat, b: Mat) -> Mat:
    _check_broadcast(a, b)
    return Mat(a.value * b.value, parents=(a, b),
               backward=lambda g: (_unbroadcast(g * b.value, a.shape),
                                   _unbroadcast(g * a.value, b.shape)))


def div(a: Mat, b: Mat) -> Mat:
    _check_broadcast(a, b)
    out = a.value / b.value
    return Mat(out, parents=(a, b),
               backward=lambda g: (_unbroadcast(g / b.value, a.shape),
                                   _unbroadcast(-g * out / b.value, b.shape)))


def scale(a: Mat, c: float) -> Mat:
    return Mat(a.value * c, parents=(a,), backward=lambda g: (g * c,))


def transpose(a: Mat) -> Mat:
    return Mat(a.value.T.copy(), parents=(a,), backward=lambda g: (g.T,))


def relu(a: Mat) -> Mat:
    mask = a.value > 0
    return Mat(a.value * mask, parents=(a,), backward=lambda g: (g * mask,))


def identity(a: Mat) -> Mat:
    return a


def sigmoid(a: Mat) -> Mat:
    out = np.where(a.value >= 0, 1.0 / (1.0 + np.exp(-np.abs(a.value))),
                   np.exp(-np.abs(a.value)) / (1.0 + np.exp(-np.abs(a.value))))
    return Mat(out, parents=(a,), backward=lambda g: (g * out * (1.0 - out),))


def log(a: Mat, floor: float = LOG_FLOOR) -> Mat:
    """Natural log with the argument clamped from below at ``floor``."""
    x = np.maximum(a.value, floor)
    live = a.value > floor
    return Mat(np.log(x), parents=(a,), backward=lambda g: (g * live / x,))


def exp(a: Mat) -> Mat:
    out = np.exp(a.value)
    return Mat(out, parents=(a,), backward=lambda g: (g * out,))


def sqrt(a: Mat) -> Mat:
    out = np.sqrt(a.value)
    return Mat(out, parents=(a,), backward=lambda g: (g * 0.5 / out,))


def sum_all(a: Mat) -> Mat:
    return Mat(a.value.sum(), parents=(a,), backward=lambda g: (np.full(a.shape, g[0, 0]),))


def mean_all(a: Mat) -> Mat:
    n = a.value.size
    return Mat(a.value.mean(), parents=(a,), backward=lambda g: (np.full(a.shape, g[0, 0] / n),))


def sum_rows(a: Mat) -> Mat:
    """Column sums as a 1 x cols row."""
    return Mat(a.value.sum(axis=0, keepdims=True), parents=(a,),
               backward=lambda g: (np.broadcast_to(g, a.shape).copy(),))


def concat_cols(parts: Sequence[Mat]) -> Mat:
    rows = {p.rows for p in parts}
    if len(rows) != 1:
        raise ShapeMismatch("concat_cols needs equal row counts")
    widths = [p.cols for p in parts]
    cuts = np.cumsum([0] + widths)

    def back(g):
        return tuple(g[:, cuts[i]:cuts[i + 1]] for i in range(len(parts)))

    return Mat(np.concatenate([p.value for p in parts], axis=1), parents=tuple(parts), backward=back)


def concat_rows(parts: Sequence[Mat]) -> Mat:
    cols = {p.cols for p in parts}
    if len(cols) != 1:
        raise ShapeMismatch("concat_rows needs equal column counts")
    cuts = np.cumsum([0] + [p.rows for p in parts])

    def back(g):
        return tuple(g[cuts[i]:cuts[i + 1]] for i in range(len(parts)))

    return Mat(np.concatenate([p.value for p in parts], axis=0), parents=tuple(parts), backward=back)


def take(a: Mat, rows: np.ndarray, cols: np.ndarray) -> Mat:
    """Column vector of ``a[rows[i], cols[i]]``."""
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)

    def back(g):
        out = np.zeros(a.shape)
        np.add.at(out, (rows, cols), g[:, 0])
        return (out,)

    return Mat(a.value[rows, cols].reshape(-1, 1), parents=(a,), backward=back)


def segment_softmax(z: Mat, segments: np.ndarray) -> Mat:
    """Softmax of a column vector within each segment id (max-shifted)."""
    seg = np.asarray(segments, dtype=np.int64)
    x = z.value[:, 0]
    n_seg = int(seg.max()) + 1 if seg.size else 0
    mx = np.full(n_seg, -np.inf)
    np.maximum.at(mx, seg, x)
    e = np.exp(x - mx[seg])
    tot = np.zeros(n_seg)
    np.add.at(tot, seg, e)
    p = e / tot[seg]

    def back(g):
        gv = g[:, 0]
        dot = np.zeros(n_seg)
        np.add.at(dot, seg, gv * p)
        return ((p * (gv - dot[seg])).reshape(-1, 1),)

    return Mat(p.reshape(-1, 1), parents=(z,), backward=back)


# -- graph batches -----------------------------------------------------------------

@dataclass
class GraphBatch:
    features: Mat
    adjacency: list[list[int]]
    boundaries: list[tuple[int, int]]

    def __post_init__(self):
        n = self.features.rows
        pos = 0
        for start, end in self.boundaries:
            if start != pos or end < start:
                raise ShapeMismatch("boundaries must partition the node range")
            pos = end
        if pos != n or len(self.adjacency) != n:
            raise ShapeMismatch("boundaries/adjacency do not cover every node")
        owner = np.zeros(n, dtype=np.int64)
        for gi, (start, end) in enumerate(self.boundaries):
            owner[start:end] = gi
        for v, nbrs in enumerate(self.adjacency):
            for u in nbrs:
                if not 0 <= u < n or owner[u] != owner[v]:
                    raise ShapeMismatch(f"neighbour {u} of node {v} leaves its graph")

    def adjacency_matrix(self) -> np.ndarray:
        n = len(self.adjacency)
        A = np.zeros((n, n))
        for v, nbrs in enumerate(self.adjacency):
            for u in nbrs:
                A[v, u] += 1.0
        return A

    @classmethod
    def single(cls, features, neighbors) -> "GraphBatch":
        f = features if isinstance(features, Mat) else Mat(features)
        return cls(f, [list(x) for x in neighbors], [(0, f.rows)])


def graph_conv(W_self: Mat, W_neigh: Mat, batch: GraphBatch | None = None, act=relu, *,
               H: Mat | None = None, A: np.ndarray | None = None) -> Mat:
    """``act(H W_self + (A H) W_neigh)``; ``H``/``A`` override the batch contents."""
    H = H if H is not None else batch.features
    A = A if A is not None else batch.adjacency_matrix()
    if H.cols != W_self.rows or H.cols != W_neigh.rows or W_self.cols != W_neigh.cols:
        raise ShapeMismatch(f"features {H.shape} vs weights {W_self.shape}/{W_neigh.shape}")
    return act(add(matmul(H, W_self), matmul(const_matmul(A, H), W_neigh)))


def mean_pool(features: Mat, boundaries) -> Mat:
    n = features.rows
    P = np.zeros((len(boundaries), n))
    for gi, (start, end) in enumerate(boundaries):
        if end <= start:
            raise EmptyGraph(f"graph {gi} has no nodes")
        P[gi, start:end] = 1.0 / (end - start)
    return const_matmul(P, features)


def weighted_mean_pool(features: Mat, weights: Mat) -> Mat:
    """Row vector sum_v w_v h_v / sum_v w_v for a single graph; ``weights`` is n x 1."""
    if weights.rows != features.rows or weights.cols != 1:
        raise ShapeMismatch("weights must be an n x 1 column")
    return div(sum_rows(mul(features, weights)), sum_all(weights))


def cosine(a: Mat, b: Mat) -> Mat:
    na = float(np.linalg.norm(a.value))
    nb = float(np.linalg.norm(b.value))
    if na == 0.0 or nb == 0.0:
        raise ZeroVector("cosine of a zero vector")
    dot = sum_all(mul(a, b))
    return div(dot, mul(sqrt(sum_all(mul(a, a))), sqrt(sum_all(mul(b, b)))))


# -- losses ------------------------------------------------------------------------

def adv_loss(d_fake: Mat) -> Mat:
    return scale(mean_all(log(d_fake)), -1.0)


def disc_loss(d_real: Mat, d_fake: Mat) -> Mat:
    one_minus = sub(Mat(np.ones(d_fake.shape)), d_fake)
    return scale(add(mean_all(log(d_real)), mean_all(log(one_minus))), -1.0)


def contrastive_loss(s_pos: Mat, s_neg: Mat | None = None, sign: float = 1.0) -> Mat:
    """-log softmax of the positive score against the negatives.

    ``sign=-1`` evaluates the exp(-s) variant.
    """
    parts = [s_pos] if s_neg is None or s_neg.value.size == 0 else [s_pos, s_neg]
    z = scale(concat_cols([p if p.rows == 1 else transpose(p) for p in parts]), sign)
    shift = float(z.value.max())
    lse = add(log(sum_all(exp(sub(z, Mat(shift)))), floor=0.0), Mat(shift))
    return sub(lse, take(z, np.array([0]), np.array([0])))


def score(delta_k, S, alpha: float = 1.0, beta: float = 1.0) -> Mat:
    return add(scale(_lift(delta_k), alpha), scale(_lift(S), beta))


def sgd_step(params: Sequence[Mat], lr: float):
    for p in params:
        if not np.all(np.isfinite(p.grad)):
            raise NonFiniteGradient(f"non-finite gradient in {p.name or p}")
    for p in params:
        p.value = p.value - lr * p.grad
        p.zero_grad()
    return params


def grad_check(loss_fn: Callable[[], Mat], params: Sequence[Mat], eps: float = 1e-6,
               floor: float = 1e-4, rows: Sequence | None = None) -> float:
    """Largest relative gap between reverse-mode and central-difference gradients.

    The relative error uses ``max(|analytic|, |numeric|, floor)`` as denominator.
    ``rows`` optionally limits each parameter to the listed row indices (None = all).
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError("eps must lie in [1e-7, 1e-3]")
    for p in params:
        p.zero_grad()
    loss_fn().backward()
    analytic = [p.grad.copy() for p in params]
    worst = 0.0
    for pi, (p, ga) in enumerate(zip(params, analytic)):
        keep = None if rows is None or rows[pi] is None else set(int(r) for r in rows[pi])
        it = np.nditer(p.value, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            if keep is not None and idx[0] not in keep:
                continue
            orig = p.value[idx]
            p.value[idx] = orig + eps
            up = loss_fn().item()
            p.value[idx] = orig - eps
            down = loss_fn().item()
            p.value[idx] = orig
            num = (up - down) / (2 * eps)
            denom = max(abs(ga[idx]), abs(num), floor)
            worst = max(worst, abs(ga[idx] - num) / denom)
    for p in params:
        p.zero_grad()
    return worst


# -- configuration and checkpoints -----------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 8
    lr: float = 0.01
    lam: float = 0.1
    alpha: float = 1.0
    beta: float = 1.0
    seed: int = 7
    hidden: int = 64
    loss_sign: float = 1.0  # -1 selects the exp(-s) contrastive variant

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if self.batch_size < 2:
            raise ValueError("batch size must be at least 2")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.loss_sign not in (1.0, -1.0):
            raise ValueError("loss_sign must be +1 or -1")

    def to_dict(self):
        return asdict(self)


MAGIC = b"SPGN"
VERSION = 1


def save_params(arrays: Sequence[np.ndarray], path) -> None:
    chunks = [MAGIC, struct.pack("<II", VERSION, len(arrays))]
    for a in arrays:
        a = np.asarray(a, dtype="<f8")
        if a.ndim != 2:
            raise ShapeMismatch("checkpoint layers must be 2-D")
        chunks.append(struct.pack("<II", *a.shape))
        chunks.append(np.ascontiguousarray(a).tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_params(path) -> list[np.ndarray]:
    data = Path(path).read_bytes()
    if len(data) < 12 or data[:4] != MAGIC:
        raise CorruptCheckpoint("bad magic or truncated header")
    version, count = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise VersionMismatch(f"checkpoint version {version}, expected {VERSION}")
    pos, out = 12, []
    for _ in range(count):
        if pos + 8 > len(data):
            raise CorruptCheckpoint("truncated layer header")
        rows, cols = struct.unpack_from("<II", data, pos)
        pos += 8
        size = rows * cols * 8
        if pos + size > len(data):
            raise CorruptCheckpoint("truncated layer values")
        out.append(np.frombuffer(data, dtype="<f8", count=rows * cols, offset=pos)
                   .reshape(rows, cols).astype(np.float64))
        pos += size
    if pos != len(data):
        raise CorruptCheckpoint("trailing bytes after last layer")
    return out


def glorot(rng: np.random.Generator, rows: int, cols: int, gain: float = 1.0) -> np.ndarray:
    limit = gain * math.sqrt(6.0 / (rows + cols))
    return rng.uniform(-limit, limit, size=(rows, cols))
