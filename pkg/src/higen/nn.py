"""Minimal neural substrate: float64 tensors with reverse-mode gradients,
dense layers, scaled dot-product attention, losses, Adam, and a
finite-difference gradient checker.

Every op is hand-differentiated against a fixed vocabulary; there is no
general autodiff beyond what the models in this package need.
"""

from __future__ import annotations

import json

import numpy as np

from .errors import CheckpointError, DimensionError, NormalizationError, NumericError

BCE_EPS = 1e-7
DIST_EPS_SQ = 1e-24


def _f64(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


class Tensor:
    """Node in a reverse-mode graph over float64 numpy arrays.

    Calling backward() on a scalar result accumulates gradients into the
    .grad of every upstream tensor that requires them.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _f64(data)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def backward(self) -> None:
        if self.data.size != 1:
            raise DimensionError("backward() requires a scalar tensor")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not (t.requires_grad or t._parents):
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _node(data: np.ndarray, parents: tuple, backward) -> Tensor:
    out = Tensor(data)
    out._parents = parents
    out._backward = backward
    return out


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# elementary ops


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise add; b may be a 1-D bias broadcast against a's last axis."""
    a, b = _wrap(a), _wrap(b)
    if a.data.shape == b.data.shape:
        def bw(g):
            _accum(a, g)
            _accum(b, g)
    elif b.data.ndim == 1 and a.data.shape[-1] == b.data.shape[0]:
        def bw(g):
            _accum(a, g)
            _accum(b, g.reshape(-1, g.shape[-1]).sum(axis=0))
    else:
        raise DimensionError(f"cannot add shapes {a.data.shape} and {b.data.shape}")
    return _node(a.data + b.data, (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.data.shape != b.data.shape:
        raise DimensionError(f"cannot subtract shapes {a.data.shape} and {b.data.shape}")

    def bw(g):
        _accum(a, g)
        _accum(b, -g)

    return _node(a.data - b.data, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.data.shape != b.data.shape:
        raise DimensionError(f"cannot multiply shapes {a.data.shape} and {b.data.shape}")

    def bw(g):
        _accum(a, g * b.data)
        _accum(b, g * a.data)

    return _node(a.data * b.data, (a, b), bw)


def scale(a: Tensor, s: float) -> Tensor:
    a = _wrap(a)
    s = float(s)

    def bw(g):
        _accum(a, g * s)

    return _node(a.data * s, (a,), bw)


def mul_const(a: Tensor, c) -> Tensor:
    """Multiply by a constant array (no gradient through c)."""
    a = _wrap(a)
    c = _f64(c)

    def bw(g):
        _accum(a, g * c)

    return _node(a.data * c, (a,), bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(f"cannot matmul shapes {a.data.shape} and {b.data.shape}")

    def bw(g):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    return _node(a.data @ b.data, (a, b), bw)


def concat(parts, axis: int = -1) -> Tensor:
    parts = [_wrap(p) for p in parts]
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            _accum(p, g[tuple(idx)])

    return _node(np.concatenate([p.data for p in parts], axis=axis), tuple(parts), bw)


def reshape(a: Tensor, shape) -> Tensor:
    a = _wrap(a)
    orig = a.data.shape

    def bw(g):
        _accum(a, g.reshape(orig))

    return _node(a.data.reshape(shape), (a,), bw)


def relu(a: Tensor) -> Tensor:
    a = _wrap(a)
    mask = a.data > 0

    def bw(g):
        _accum(a, g * mask)

    return _node(np.where(mask, a.data, 0.0), (a,), bw)


def tanh(a: Tensor) -> Tensor:
    a = _wrap(a)
    y = np.tanh(a.data)

    def bw(g):
        _accum(a, g * (1.0 - y * y))

    return _node(y, (a,), bw)


def sigmoid(a: Tensor) -> Tensor:
    a = _wrap(a)
    y = np.where(a.data >= 0, 1.0 / (1.0 + np.exp(-a.data)),
                 np.exp(a.data) / (1.0 + np.exp(a.data)))

    def bw(g):
        _accum(a, g * y * (1.0 - y))

    return _node(y, (a,), bw)


def sum_axis(a: Tensor, axis: int) -> Tensor:
    a = _wrap(a)

    def bw(g):
        _accum(a, np.expand_dims(g, axis) * np.ones_like(a.data))

    return _node(a.data.sum(axis=axis), (a,), bw)


def sum_all(a: Tensor) -> Tensor:
    a = _wrap(a)

    def bw(g):
        _accum(a, np.broadcast_to(g, a.data.shape).copy())

    return _node(np.asarray(a.data.sum()), (a,), bw)


def mean_all(a: Tensor) -> Tensor:
    a = _wrap(a)
    n = a.data.size

    def bw(g):
        _accum(a, np.broadcast_to(g / n, a.data.shape).copy())

    return _node(np.asarray(a.data.mean()), (a,), bw)


def gather(table: Tensor, idx) -> Tensor:
    """Embedding lookup: out[...] = table[idx[...], :] for an int index array."""
    table = _wrap(table)
    idx = np.asarray(idx, dtype=np.intp)
    if np.any(idx < 0) or np.any(idx >= table.data.shape[0]):
        raise DimensionError("gather index out of range")

    def bw(g):
        acc = np.zeros_like(table.data)
        np.add.at(acc, idx, g)
        _accum(table, acc)

    return _node(table.data[idx], (table,), bw)


def take_rows(a: Tensor, idx) -> Tensor:
    """Select rows of a 2-D tensor (duplicates allowed)."""
    return gather(a, np.asarray(idx, dtype=np.intp))


def rowwise_dot(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.data.shape != b.data.shape or a.data.ndim != 2:
        raise DimensionError("rowwise_dot expects two equal-shape 2-D tensors")

    def bw(g):
        _accum(a, g[:, None] * b.data)
        _accum(b, g[:, None] * a.data)

    return _node((a.data * b.data).sum(axis=1), (a, b), bw)


def l2_normalize_rows(a: Tensor, name: str = "vector") -> Tensor:
    a = _wrap(a)
    norms = np.linalg.norm(a.data, axis=1)
    if np.any(norms == 0.0):
        raise NormalizationError(f"zero-norm row in {name}")
    y = a.data / norms[:, None]

    def bw(g):
        dot = (y * g).sum(axis=1, keepdims=True)
        _accum(a, (g - y * dot) / norms[:, None])

    return _node(y, (a,), bw)


def l2_dist_rows(a: Tensor, b: Tensor) -> Tensor:
    """Rowwise Euclidean distance with a tiny floor so the gradient is
    defined at coincident points."""
    a, b = _wrap(a), _wrap(b)
    diff = a.data - b.data
    d = np.sqrt((diff * diff).sum(axis=1) + DIST_EPS_SQ)

    def bw(g):
        gd = (g / d)[:, None] * diff
        _accum(a, gd)
        _accum(b, -gd)

    return _node(d, (a, b), bw)


# ---------------------------------------------------------------------------
# softmax, attention, losses


def softmax_rows(x: np.ndarray) -> np.ndarray:
    """Numerically stable softmax over the last axis (plain numpy)."""
    x = _f64(x)
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax_rows(x: np.ndarray) -> np.ndarray:
    x = _f64(x)
    m = x.max(axis=-1, keepdims=True)
    z = x - m
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def attention(q, k, v, d_k: int):
    """Scaled dot-product attention softmax(q k^T / sqrt(d_k)) v for single
    2-D sequences. Returns an ndarray when every input is plain numpy."""
    plain = not any(isinstance(x, Tensor) for x in (q, k, v))
    q, k, v = _wrap(q), _wrap(k), _wrap(v)
    if q.data.ndim != 2 or k.data.ndim != 2 or v.data.ndim != 2:
        raise DimensionError("attention expects 2-D q, k, v")
    if q.data.shape[1] != d_k:
        raise DimensionError(f"query has {q.data.shape[1]} columns, expected d_k={d_k}")
    if k.data.shape[1] != d_k:
        raise DimensionError(f"keys have {k.data.shape[1]} columns, expected d_k={d_k}")
    if k.data.shape[0] != v.data.shape[0]:
        raise DimensionError("keys and values must have equal row counts")
    inv = 1.0 / np.sqrt(float(d_k))
    attn = softmax_rows(q.data @ k.data.T * inv)
    out_data = attn @ v.data

    def bw(g):
        dv = attn.T @ g
        da = g @ v.data.T
        ds = attn * (da - (da * attn).sum(axis=1, keepdims=True))
        _accum(q, ds @ k.data * inv)
        _accum(k, ds.T @ q.data * inv)
        _accum(v, dv)

    out = _node(out_data, (q, k, v), bw)
    return out.data if plain else out


def attention_batched(q: Tensor, k: Tensor, v: Tensor, d_k: int) -> Tensor:
    """Attention over a batch of sequences: (B, n_q, d_k) x (B, n_k, d_k)
    x (B, n_k, d_v) -> (B, n_q, d_v)."""
    q, k, v = _wrap(q), _wrap(k), _wrap(v)
    if q.data.shape[-1] != d_k or k.data.shape[-1] != d_k:
        raise DimensionError("batched attention d_k mismatch")
    if k.data.shape[1] != v.data.shape[1] or q.data.shape[0] != k.data.shape[0]:
        raise DimensionError("batched attention key/value rows or batch mismatch")
    inv = 1.0 / np.sqrt(float(d_k))
    scores = np.einsum("bqd,bkd->bqk", q.data, k.data) * inv
    attn = softmax_rows(scores)
    out_data = np.einsum("bqk,bkd->bqd", attn, v.data)

    def bw(g):
        dv = np.einsum("bqk,bqd->bkd", attn, g)
        da = np.einsum("bqd,bkd->bqk", g, v.data)
        ds = attn * (da - (da * attn).sum(axis=-1, keepdims=True))
        _accum(q, np.einsum("bqk,bkd->bqd", ds, k.data) * inv)
        _accum(k, np.einsum("bqk,bqd->bkd", ds, q.data) * inv)
        _accum(v, dv)

    return _node(out_data, (q, k, v), bw)


def softmax_cross_entropy(logits: Tensor, targets) -> Tensor:
    """Per-row cross-entropy of integer targets under softmax(logits)."""
    logits = _wrap(logits)
    targets = np.asarray(targets, dtype=np.intp)
    if logits.data.ndim != 2 or targets.shape != (logits.data.shape[0],):
        raise DimensionError("softmax_cross_entropy expects (B,V) logits and (B,) targets")
    lsm = log_softmax_rows(logits.data)
    rows = np.arange(targets.shape[0])
    probs = np.exp(lsm)

    def bw(g):
        d = probs.copy()
        d[rows, targets] -= 1.0
        _accum(logits, d * g[:, None])

    return _node(-lsm[rows, targets], (logits,), bw)


def binary_cross_entropy(prediction: float, label: int) -> float:
    """Scalar BCE -(y log p + (1-y) log(1-p)) with predictions clamped to
    [1e-7, 1 - 1e-7]."""
    p = min(max(float(prediction), BCE_EPS), 1.0 - BCE_EPS)
    y = float(label)
    return -(y * np.log(p) + (1.0 - y) * np.log1p(-p))


def bce_mean(p: Tensor, labels) -> Tensor:
    """Mean BCE over a batch of probabilities (clamped like the scalar form)."""
    p = _wrap(p)
    y = _f64(labels)
    if p.data.shape != y.shape:
        raise DimensionError("bce_mean shape mismatch")
    pc = np.clip(p.data, BCE_EPS, 1.0 - BCE_EPS)
    inside = (p.data > BCE_EPS) & (p.data < 1.0 - BCE_EPS)
    n = y.size
    loss = -(y * np.log(pc) + (1.0 - y) * np.log1p(-pc)).mean()

    def bw(g):
        dp = (-(y / pc) + (1.0 - y) / (1.0 - pc)) / n
        _accum(p, g * dp * inside)

    return _node(np.asarray(loss), (p,), bw)


# ---------------------------------------------------------------------------
# dense networks

_ACTIVATIONS = ("relu", "tanh", "identity")


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    """Uniform init in +-sqrt(6 / (fan_in + fan_out))."""
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    if shape is None:
        shape = (fan_in, fan_out)
    return rng.uniform(-limit, limit, size=shape)


class DenseNet:
    """Stack of affine layers with per-layer activations."""

    def __init__(self, sizes, activations, rng: np.random.Generator, name: str = "net"):
        sizes = [int(s) for s in sizes]
        activations = list(activations)
        if len(sizes) < 2:
            raise DimensionError("DenseNet needs at least input and output sizes")
        if len(activations) != len(sizes) - 1:
            raise DimensionError("one activation per layer required")
        for act in activations:
            if act not in _ACTIVATIONS:
                raise DimensionError(f"unknown activation '{act}'")
        self.name = name
        self.sizes = sizes
        self.activations = activations
        self.weights: list[Tensor] = []
        self.biases: list[Tensor] = []
        for m, n in zip(sizes, sizes[1:]):
            self.weights.append(Tensor(glorot_uniform(rng, m, n), requires_grad=True))
            self.biases.append(Tensor(np.zeros(n), requires_grad=True))

    def forward(self, x: Tensor) -> Tensor:
        x = _wrap(x)
        if x.data.ndim != 2 or x.data.shape[1] != self.sizes[0]:
            raise DimensionError(
                f"{self.name}: input shape {x.data.shape} incompatible with size {self.sizes[0]}")
        for w, b, act in zip(self.weights, self.biases, self.activations):
            x = add(matmul(x, w), b)
            if act == "relu":
                x = relu(x)
            elif act == "tanh":
                x = tanh(x)
        return x

    def params(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"{self.name}.W{i}"] = w
            out[f"{self.name}.b{i}"] = b
        return out


def dense_forward(net: DenseNet, x):
    """Forward pass through a DenseNet; plain ndarray in, plain ndarray out."""
    if isinstance(x, Tensor):
        return net.forward(x)
    return net.forward(Tensor(x)).data


# ---------------------------------------------------------------------------
# optimizer


class Adam:
    """Adam with bias correction (beta1=0.9, beta2=0.999, eps=1e-8)."""

    def __init__(self, params: dict[str, Tensor], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        self.params = dict(params)
        self.lr = float(lr)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(t.data) for k, t in self.params.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in self.params.items()}
        self.t = 0

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self, grads: dict[str, np.ndarray] | None = None) -> None:
        """Apply one Adam update from explicit grads or from each .grad."""
        self.t += 1
        b1t = 1.0 - self.beta1 ** self.t
        b2t = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            g = grads.get(name) if grads is not None else p.grad
            if g is None:
                g = np.zeros_like(p.data)
            if g.shape != p.data.shape:
                raise DimensionError(f"gradient shape mismatch for parameter '{name}'")
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient for parameter '{name}'")
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)


def adam_step(state: Adam, grads: dict[str, np.ndarray] | None = None) -> None:
    state.step(grads)


# ---------------------------------------------------------------------------
# gradient checking


def finite_diff_gradcheck(loss_fn, params: dict[str, Tensor], eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    loss_fn must rebuild its graph from the current parameter data on every
    call and be deterministic.
    """
    for p in params.values():
        p.grad = None
    loss = loss_fn()
    loss.backward()
    analytic = {k: (np.zeros_like(p.data) if p.grad is None else p.grad.copy())
                for k, p in params.items()}
    worst = 0.0
    for name, p in params.items():
        flat = p.data.reshape(-1)
        ref = analytic[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(loss_fn().data)
            flat[i] = orig - eps
            fm = float(loss_fn().data)
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * eps)
            rel = abs(ref[i] - numeric) / max(1e-8, abs(ref[i]) + abs(numeric))
            worst = max(worst, rel)
    return worst


# ---------------------------------------------------------------------------
# checkpoints

CHECKPOINT_VERSION = 1


def save_checkpoint(path, params: dict[str, Tensor | np.ndarray], extra: dict | None = None) -> None:
    """Write named parameters to a versioned JSON container. float64 values
    round-trip losslessly through Python's shortest-repr JSON floats."""
    payload = {"version": CHECKPOINT_VERSION, "params": {}, "extra": extra or {}}
    for name, p in params.items():
        arr = p.data if isinstance(p, Tensor) else _f64(p)
        if not np.all(np.isfinite(arr)):
            raise NumericError(f"non-finite values in parameter '{name}'")
        payload["params"][name] = {"shape": list(arr.shape), "data": arr.reshape(-1).tolist()}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, allow_nan=False)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            payload = json.load(fh)
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"corrupt checkpoint {path}: {exc.msg} at offset {exc.pos}") from exc
    version = payload.get("version")
    if not isinstance(version, int) or version > CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint version {version!r} is newer than supported "
                              f"{CHECKPOINT_VERSION}")
    params = {}
    for name, rec in payload["params"].items():
        arr = _f64(rec["data"]).reshape(rec["shape"])
        params[name] = arr
    return params, payload.get("extra", {})
