"""Minimal deterministic reverse-mode autodiff over numpy arrays.

Every operation records its parents and a closure computing parent
gradients; `backward` replays the closures in reverse creation order,
which is a valid topological order because inputs always exist before
the outputs built from them. Gradients are accumulated (summed), never
overwritten, and only leaf tensors retain a `.grad` after the pass.

Two precisions are supported: float32 for training (TRAIN32) and
float64 for invariant and finite-difference checks (CHECK64). All
tensors participating in one graph must share a dtype.
"""

import itertools
import threading
from contextlib import contextmanager

import numpy as np
from scipy.special import erf

TRAIN32 = np.float32
CHECK64 = np.float64

_PRECISIONS = {"train32": TRAIN32, "check64": CHECK64}

_NEG_BIG = 1e30  # additive mask constant; exp(-1e30 - anything sane) underflows to exactly 0

_creation_counter = itertools.count()

_local = threading.local()  # graphs are thread-confined; so is the grad switch


def _grad_on():
    return getattr(_local, "grad_enabled", True)


def dtype_for(mode):
    """Map a precision mode name ('train32' or 'check64') to a numpy dtype."""
    try:
        return _PRECISIONS[mode]
    except KeyError:
        raise ValueError(f"unknown precision mode {mode!r}, expected 'train32' or 'check64'")


@contextmanager
def no_grad():
    """Disable graph construction inside the block (inference / evaluation)."""
    prev = _grad_on()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = prev


class ShapeError(ValueError):
    pass


class GraphError(ValueError):
    pass


class Tensor:
    """N-d real array with optional gradient tracking.

    `data` is a row-major numpy array (float32 or float64), immutable by
    convention after creation; `grad` is a same-shape accumulator that
    appears after the first backward pass through this leaf.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_id")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self._id = next(_creation_counter)

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def item(self):
        return self.data.item()

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # operator sugar; second operands may be plain numbers
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __sub__(self, other):
        return add(self, neg(_lift(other, self.dtype)))

    def __truediv__(self, other):
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


def _lift(x, dtype):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _check_same_dtype(*tensors):
    dtypes = {t.data.dtype for t in tensors}
    if len(dtypes) > 1:
        raise GraphError(f"tensors in one graph must share a precision mode, got {sorted(map(str, dtypes))}")


def _make(data, parents, backward_fn):
    """Build an output tensor, attaching the graph node when grads are needed."""
    out = Tensor(data)
    if _grad_on() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(g, shape):
    """Sum gradient over axes that were broadcast in the forward op."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise ops

def add(a, b):
    a = a if isinstance(a, Tensor) else _lift(a, b.dtype)
    b = _lift(b, a.dtype)
    _check_same_dtype(a, b)
    needs = (a.requires_grad, b.requires_grad)

    def backward(g):
        return (
            _unbroadcast(g, a.data.shape) if needs[0] else None,
            _unbroadcast(g, b.data.shape) if needs[1] else None,
        )

    return _make(a.data + b.data, (a, b), backward)


def mul(a, b):
    a = a if isinstance(a, Tensor) else _lift(a, b.dtype)
    b = _lift(b, a.dtype)
    _check_same_dtype(a, b)
    needs = (a.requires_grad, b.requires_grad)

    def backward(g):
        return (
            _unbroadcast(g * b.data, a.data.shape) if needs[0] else None,
            _unbroadcast(g * a.data, b.data.shape) if needs[1] else None,
        )

    return _make(a.data * b.data, (a, b), backward)


def neg(a):
    return _make(-a.data, (a,), lambda g: (-g,))


def div(a, b):
    a = a if isinstance(a, Tensor) else _lift(a, b.dtype)
    b = _lift(b, a.dtype)
    _check_same_dtype(a, b)
    needs = (a.requires_grad, b.requires_grad)

    def backward(g):
        ga = _unbroadcast(g / b.data, a.data.shape) if needs[0] else None
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape) if needs[1] else None
        return ga, gb

    return _make(a.data / b.data, (a, b), backward)


def exp(a):
    out_data = np.exp(a.data)
    return _make(out_data, (a,), lambda g: (g * out_data,))


def log(a):
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a):
    out_data = np.sqrt(a.data)
    return _make(out_data, (a,), lambda g: (g * (0.5 / out_data),))


def absval(a):
    return _make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def gelu(a):
    """Gaussian-error-linear unit, exact erf form."""
    x = a.data
    phi = 0.5 * (1.0 + erf(x * np.sqrt(0.5, dtype=x.dtype)))

    def backward(g):
        pdf = np.exp(-0.5 * x * x) * (1.0 / np.sqrt(2.0 * np.pi))
        return (g * (phi + x * pdf).astype(x.dtype),)

    return _make((x * phi).astype(x.dtype), (a,), backward)


# ---------------------------------------------------------------------------
# reductions

def tsum(a, axis=None, keepdims=False):
    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.data.shape).copy(),)

    return _make(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), backward)


def mean(a, axis=None, keepdims=False):
    if axis is None:
        n = a.data.size
    else:
        n = int(np.prod([a.data.shape[i] for i in np.atleast_1d(axis)]))
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def l1_distance(a, b):
    """Sum of absolute differences, the metric driving inversion."""
    return tsum(absval(a - b))


# ---------------------------------------------------------------------------
# shape ops

def matmul(a, b):
    _check_same_dtype(a, b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.data.shape} @ {b.data.shape}")
    needs = (a.requires_grad, b.requires_grad)

    def backward(g):
        ga = g @ b.data.T if needs[0] else None
        gb = a.data.T @ g if needs[1] else None
        return ga, gb

    return _make(a.data @ b.data, (a, b), backward)


def transpose(a):
    if a.data.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got shape {a.data.shape}")
    return _make(a.data.T.copy(), (a,), lambda g: (g.T.copy(),))


def reshape(a, shape):
    old = a.data.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def narrow(a, axis, start, length):
    """Slice `length` entries from `start` along `axis`."""
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)

    def backward(g):
        ga = np.zeros_like(a.data)
        ga[idx] = g
        return (ga,)

    return _make(a.data[idx].copy(), (a,), backward)


def concat(tensors, axis):
    _check_same_dtype(*tensors)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)
    needs = [t.requires_grad for t in tensors]

    def backward(g):
        out = []
        for i, t in enumerate(tensors):
            if not needs[i]:
                out.append(None)
                continue
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(offsets[i], offsets[i + 1])
            out.append(g[tuple(idx)].copy())
        return tuple(out)

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward)


def shift(a, axis, offset):
    """Shift entries by `offset` along `axis`, filling vacated slots with zeros.

    Positive offset moves content toward higher indices.
    """
    if offset == 0:
        return _make(a.data.copy(), (a,), lambda g: (g,))
    n = a.data.shape[axis]
    k = abs(offset)
    if k >= n:
        return _make(np.zeros_like(a.data), (a,), lambda g: (np.zeros_like(a.data),))

    def sl(start, stop):
        idx = [slice(None)] * a.data.ndim
        idx[axis] = slice(start, stop)
        return tuple(idx)

    if offset > 0:
        dst, src = sl(k, n), sl(0, n - k)
    else:
        dst, src = sl(0, n - k), sl(k, n)

    out_data = np.zeros_like(a.data)
    out_data[dst] = a.data[src]

    def backward(g):
        ga = np.zeros_like(a.data)
        ga[src] = g[dst]
        return (ga,)

    return _make(out_data, (a,), backward)


# ---------------------------------------------------------------------------
# neural-net ops

def softmax(a, axis=-1):
    """Numerically stable softmax; rows along `axis` sum to 1."""
    x = a.data
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / np.sum(e, axis=axis, keepdims=True)

    def backward(g):
        dot = np.sum(g * out_data, axis=axis, keepdims=True)
        return ((g - dot) * out_data,)

    return _make(out_data, (a,), backward)


def layer_norm(x, gain, bias, eps=1e-5):
    """Per-row normalization over the last axis with learned gain and bias."""
    mu = mean(x, axis=-1, keepdims=True)
    centered = x - mu
    var = mean(mul(centered, centered), axis=-1, keepdims=True)
    inv = div(_lift(1.0, x.dtype), sqrt(add(var, _lift(eps, x.dtype))))
    return add(mul(mul(centered, inv), gain), bias)


def embedding_lookup(wte, ids):
    """Rows of embeddings for integer token ids; wte has shape (d_model, vocab)."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 1:
        raise ShapeError(f"embedding ids must be a flat vector, got shape {ids.shape}")
    if ids.min(initial=0) < 0 or (ids.size and ids.max() >= wte.data.shape[1]):
        raise ValueError(f"token id out of range for vocab {wte.data.shape[1]}")
    out_data = wte.data[:, ids].T.copy()

    def backward(g):
        gw = np.zeros_like(wte.data)
        np.add.at(gw.T, ids, g)
        return (gw,)

    return _make(out_data, (wte,), backward)


def cross_entropy(logits, targets, ignore_id=None, reduction="mean"):
    """Negative log-likelihood of `targets` under row-softmax of `logits`.

    Positions whose target equals `ignore_id` contribute nothing; if every
    position is ignored the loss is undefined and an error is raised.
    """
    targets = np.asarray(targets, dtype=np.int64)
    n, v = logits.data.shape
    if targets.shape != (n,):
        raise ShapeError(f"targets shape {targets.shape} does not match logits rows {n}")
    keep = np.ones(n, dtype=bool) if ignore_id is None else targets != ignore_id
    count = int(keep.sum())
    if count == 0:
        raise ValueError("empty loss: every target position is ignored")
    bad = targets[keep]
    if bad.min() < 0 or bad.max() >= v:
        raise ValueError(f"target id out of range for vocab {v}")

    x = logits.data
    shifted = x - np.max(x, axis=1, keepdims=True)
    logsumexp = np.log(np.sum(np.exp(shifted), axis=1))
    logp = shifted[np.arange(n), targets.clip(0, v - 1)] - logsumexp
    total = -np.sum(logp[keep])
    scale = 1.0 / count if reduction == "mean" else 1.0

    def backward(g):
        probs = np.exp(shifted - logsumexp[:, None])
        probs[np.arange(n), targets.clip(0, v - 1)] -= 1.0
        probs[~keep] = 0.0
        return ((g * scale) * probs.astype(x.dtype),)

    return _make(np.asarray(total * scale, dtype=x.dtype), (logits,), backward)


def nonpad_count(targets, ignore_id):
    targets = np.asarray(targets)
    return int((targets != ignore_id).sum())


def masked_conv1d(x, w, mask):
    """Causal token mixing: out[i] sums masked contributions of rows j of x.

    x is (seq, d); w is (out_seq, in_seq, k); mask is a 0/1 array over
    (out_seq, in_seq) multiplied into the weights inside the forward pass,
    so masked taps provably receive zero gradient. Tap t reads the channel
    axis shifted right by t ("same"-style left padding).
    """
    seq, _d = x.data.shape
    out_seq, in_seq, k = w.data.shape
    if in_seq != seq:
        raise ShapeError(f"conv weight in-dim {in_seq} does not match sequence {seq}")
    if k < 1 or k > seq:
        raise ValueError(f"kernel size {k} must lie in [1, seq={seq}]")
    if mask.shape != (out_seq, in_seq):
        raise ShapeError(f"mask shape {mask.shape} does not match weights {(out_seq, in_seq)}")
    m = Tensor(np.asarray(mask, dtype=w.dtype))
    out = None
    for t in range(k):
        tap = reshape(narrow(w, 2, t, 1), (out_seq, in_seq))
        contrib = matmul(mul(tap, m), shift(x, axis=1, offset=t) if t else x)
        out = contrib if out is None else add(out, contrib)
    return out


def softmax_conv_weights(w, mask):
    """Softmax conv weights per output row over the unmasked (source, tap) slots.

    Returns effective weights: non-negative, each row summing to 1 across
    its unmasked entries, zeros elsewhere.
    """
    out_seq, in_seq, k = w.data.shape
    m3 = Tensor(np.asarray(mask, dtype=w.dtype).reshape(out_seq, in_seq, 1))
    stable = exp(add(w, _lift(-float(np.max(w.data)), w.dtype)))
    masked = mul(stable, m3)
    denom = tsum(masked, axis=(1, 2), keepdims=True)
    return div(masked, denom)


# ---------------------------------------------------------------------------
# backward pass

def backward(loss):
    """Accumulate d(loss)/d(leaf) into every requires_grad leaf of the graph.

    Traverses exactly the reverse creation order of reachable nodes.
    Repeated calls without zero_grad keep accumulating into leaves.
    """
    if loss.data.size != 1:
        raise GraphError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    if loss._backward is None and not loss.requires_grad:
        return

    nodes = []
    seen = set()
    stack = [loss]
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        if node._backward is not None:
            nodes.append(node)
            stack.extend(node._parents)
    nodes.sort(key=lambda n: n._id, reverse=True)

    flows = {id(loss): np.ones_like(loss.data)}
    for node in nodes:
        g = flows.pop(id(node), None)
        if g is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None:
                continue
            if parent._backward is None:
                if parent.requires_grad:
                    parent.grad = pg.copy() if parent.grad is None else parent.grad + pg
            else:
                prev = flows.get(id(parent))
                flows[id(parent)] = pg if prev is None else prev + pg
    if loss._backward is None and loss.requires_grad:
        loss.grad = flows[id(loss)] if loss.grad is None else loss.grad + flows[id(loss)]


def zero_grads(tensors):
    for t in tensors:
        t.grad = None


# ---------------------------------------------------------------------------
# validation harness

def grad_check(f, x, h=1e-5):
    """Max relative error between analytic and central-difference gradients.

    `f` maps a Tensor to a scalar Tensor; `x` must be float64 (check64).
    """
    if x.data.dtype != np.float64:
        raise GraphError("grad_check requires check64 (float64) tensors")
    x.grad = None
    loss = f(x)
    backward(loss)
    analytic = x.grad if x.grad is not None else np.zeros_like(x.data)

    numeric = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    num_flat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        with no_grad():
            up = f(x).item()
        flat[i] = orig - h
        with no_grad():
            down = f(x).item()
        flat[i] = orig
        num_flat[i] = (up - down) / (2.0 * h)

    denom = np.abs(analytic) + np.abs(numeric) + 1e-12
    return float(np.max(np.abs(analytic - numeric) / denom))


# ---------------------------------------------------------------------------
# linear algebra and sampling utilities (no graph participation)

def pinv(w, rcond=1e-10):
    """Moore-Penrose pseudoinverse via SVD with singular-value cutoff.

    Singular values below rcond * sigma_max are zeroed, which realizes the
    ridge-regularized inverse in its zero-regularization limit while staying
    rank-deficiency safe.
    """
    a = w.data if isinstance(w, Tensor) else np.asarray(w)
    u, s, vt = np.linalg.svd(a, full_matrices=False)
    cutoff = rcond * (s.max() if s.size else 0.0)
    inv_s = np.where(s > cutoff, 1.0 / np.where(s > cutoff, s, 1.0), 0.0)
    result = (vt.T * inv_s) @ u.T
    return Tensor(result) if isinstance(w, Tensor) else result


def multinomial_sample(weights, count, rng):
    """Sample `count` distinct indices proportional to non-negative weights.

    Zero-weight indices never appear; raises if fewer than `count` strictly
    positive weights exist. Deterministic for a fixed generator state.
    """
    weights = np.asarray(weights, dtype=np.float64)
    if np.any(weights < 0):
        raise ValueError("multinomial weights must be non-negative")
    positive = int((weights > 0).sum())
    if positive < count:
        raise ValueError(f"need {count} strictly positive weights, have {positive}")
    probs = weights / weights.sum()
    return rng.choice(weights.size, size=count, replace=False, p=probs).tolist()
