"""Minimal differentiable kernel: tensors, MLPs, losses, Adam, grad checks.

Reverse-mode autodiff over a fixed operator set on dense 2-D float64
arrays. There is deliberately no general broadcasting (only bias rows) and
no GPU path; every trainable function in the toolkit (critic encoders and
heads, distillation maps, walk heads, the propagation linear map) is
assembled from these pieces, which keeps finite-difference checks reliable.

Checkpoints use a little-endian binary format: magic ``EDNW``, u64 entry
count, then per parameter a u16 name length, UTF-8 name, u64 rows, u64
cols, and row-major f64 data.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DimensionError, DivergenceError

_EDNW_MAGIC = b"EDNW"


class Tensor:
    """Dense 2-D value in the autodiff graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None):
        self.data = np.atleast_2d(np.asarray(data, dtype=np.float64))
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError("item() expects a scalar tensor")
        return float(self.data.reshape(-1)[0])

    def _accumulate(self, grad: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += grad

    def zero_grad(self) -> None:
        self.grad = None


def _track(*parents: Tensor) -> bool:
    return any(p.requires_grad or p._parents for p in parents)


def _make(data, parents, backward) -> Tensor:
    if _track(*parents):
        return Tensor(data, _parents=parents, _backward=backward)
    return Tensor(data)


def constant(data) -> Tensor:
    return Tensor(data)


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul {a.shape} @ {b.shape}")
    out_data = a.data @ b.data

    def backward(out):
        a._accumulate(out.grad @ b.data.T)
        b._accumulate(a.data.T @ out.grad)

    return _make(out_data, (a, b), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; a 1-row ``b`` broadcasts over the rows of ``a``."""
    if a.shape == b.shape:
        def backward(out):
            a._accumulate(out.grad)
            b._accumulate(out.grad)
    elif b.shape == (1, a.shape[1]):
        def backward(out):
            a._accumulate(out.grad)
            b._accumulate(out.grad.sum(axis=0, keepdims=True))
    else:
        raise DimensionError(f"add {a.shape} + {b.shape}")
    return _make(a.data + b.data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"sub {a.shape} - {b.shape}")

    def backward(out):
        a._accumulate(out.grad)
        b._accumulate(-out.grad)

    return _make(a.data - b.data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"mul {a.shape} * {b.shape}")

    def backward(out):
        a._accumulate(out.grad * b.data)
        b._accumulate(out.grad * a.data)

    return _make(a.data * b.data, (a, b), backward)


def scale(a: Tensor, s: float) -> Tensor:
    def backward(out):
        a._accumulate(out.grad * s)

    return _make(a.data * s, (a,), backward)


def divide_by_scalar(a: Tensor, s: Tensor) -> Tensor:
    """Elementwise a / s where s is a 1x1 tensor."""
    if s.data.size != 1:
        raise ContractError("divide_by_scalar expects a scalar divisor")
    sval = s.data[0, 0]

    def backward(out):
        a._accumulate(out.grad / sval)
        s._accumulate(np.array([[-(out.grad * a.data).sum() / (sval * sval)]]))

    return _make(a.data / sval, (a, s), backward)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def backward(out):
        a._accumulate(out.grad * mask)

    return _make(a.data * mask, (a,), backward)


def sigmoid(a: Tensor) -> Tensor:
    out_data = np.where(a.data >= 0,
                        1.0 / (1.0 + np.exp(-np.clip(a.data, -500, 500))),
                        np.exp(np.clip(a.data, -500, 500))
                        / (1.0 + np.exp(np.clip(a.data, -500, 500))))

    def backward(out):
        a._accumulate(out.grad * out_data * (1.0 - out_data))

    return _make(out_data, (a,), backward)


def log(a: Tensor) -> Tensor:
    def backward(out):
        a._accumulate(out.grad / a.data)

    return _make(np.log(a.data), (a,), backward)


def clip_min(a: Tensor, floor: float) -> Tensor:
    mask = a.data >= floor

    def backward(out):
        a._accumulate(out.grad * mask)

    return _make(np.maximum(a.data, floor), (a,), backward)


def sqrt(a: Tensor) -> Tensor:
    out_data = np.sqrt(a.data)

    def backward(out):
        a._accumulate(out.grad * 0.5 / np.maximum(out_data, 1e-12))

    return _make(out_data, (a,), backward)


def maximum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise max; on ties the gradient goes to ``a``."""
    if a.shape != b.shape:
        raise DimensionError(f"maximum {a.shape} vs {b.shape}")
    take_a = a.data >= b.data

    def backward(out):
        a._accumulate(out.grad * take_a)
        b._accumulate(out.grad * ~take_a)

    return _make(np.where(take_a, a.data, b.data), (a, b), backward)


def transpose(a: Tensor) -> Tensor:
    def backward(out):
        a._accumulate(out.grad.T)

    return _make(a.data.T, (a,), backward)


def mean_all(a: Tensor) -> Tensor:
    def backward(out):
        a._accumulate(np.full_like(a.data, out.grad[0, 0] / a.data.size))

    return _make(np.array([[a.data.mean()]]), (a,), backward)


def sum_all(a: Tensor) -> Tensor:
    def backward(out):
        a._accumulate(np.full_like(a.data, out.grad[0, 0]))

    return _make(np.array([[a.data.sum()]]), (a,), backward)


def sum_rows(a: Tensor) -> Tensor:
    """Column vector of per-row sums."""
    def backward(out):
        a._accumulate(np.repeat(out.grad, a.shape[1], axis=1))

    return _make(a.data.sum(axis=1, keepdims=True), (a,), backward)


def rows(a: Tensor, idx) -> Tensor:
    """Gather rows by index; backward scatter-adds."""
    idx = np.asarray(idx, dtype=np.int64)

    def backward(out):
        grad = np.zeros_like(a.data)
        np.add.at(grad, idx, out.grad)
        a._accumulate(grad)

    return _make(a.data[idx], (a,), backward)


def concat_cols(parts: list[Tensor]) -> Tensor:
    rows_ = parts[0].shape[0]
    for p in parts:
        if p.shape[0] != rows_:
            raise DimensionError("concat_cols expects equal row counts")
    widths = [p.shape[1] for p in parts]
    offsets = np.cumsum([0] + widths)

    def backward(out):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            p._accumulate(out.grad[:, lo:hi])

    return _make(np.concatenate([p.data for p in parts], axis=1),
                 tuple(parts), backward)


def concat_rows(parts: list[Tensor]) -> Tensor:
    cols = parts[0].shape[1]
    for p in parts:
        if p.shape[1] != cols:
            raise DimensionError("concat_rows expects equal column counts")
    heights = [p.shape[0] for p in parts]
    offsets = np.cumsum([0] + heights)

    def backward(out):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            p._accumulate(out.grad[lo:hi, :])

    return _make(np.concatenate([p.data for p in parts], axis=0),
                 tuple(parts), backward)


def softmax(a: Tensor) -> Tensor:
    """Row-wise softmax; rows sum to 1."""
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    ex = np.exp(shifted)
    out_data = ex / ex.sum(axis=1, keepdims=True)

    def backward(out):
        dot = (out.grad * out_data).sum(axis=1, keepdims=True)
        a._accumulate(out_data * (out.grad - dot))

    return _make(out_data, (a,), backward)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood with log-sum-exp stabilization."""
    labels = np.asarray(labels, dtype=np.int64)
    n, c = logits.shape
    if labels.shape[0] != n:
        raise DimensionError("one label per logit row")
    if labels.min() < 0 or labels.max() >= c:
        raise ContractError(f"label outside [0, {c})")
    zmax = logits.data.max(axis=1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.exp(logits.data - zmax).sum(axis=1))
    picked = logits.data[np.arange(n), labels]
    out_data = np.array([[float(np.mean(lse - picked))]])
    probs = np.exp(logits.data - lse[:, None])

    def backward(out):
        grad = probs.copy()
        grad[np.arange(n), labels] -= 1.0
        logits._accumulate(out.grad[0, 0] * grad / n)

    return _make(out_data, (logits,), backward)


def frobenius(a: Tensor) -> Tensor:
    """Frobenius norm; gradient guarded at zero."""
    sq = float((a.data * a.data).sum())
    norm = np.sqrt(sq)

    def backward(out):
        denom = max(norm, 1e-12)
        a._accumulate(out.grad[0, 0] * a.data / denom)

    return _make(np.array([[norm]]), (a,), backward)


def entropy_scalar(p: Tensor) -> Tensor:
    """-sum(p * log p) over a probability row, with 0*log(0) = 0."""
    safe = np.where(p.data > 0, p.data, 1.0)
    logp = np.log(safe)
    out_data = np.array([[-float((p.data * logp).sum())]])

    def backward(out):
        grad = np.where(p.data > 0, -(logp + 1.0), 0.0)
        p._accumulate(out.grad[0, 0] * grad)

    return _make(out_data, (p,), backward)


def backward(loss: Tensor) -> None:
    """Reverse-mode gradients for every tensor reachable from a scalar loss."""
    if loss.data.size != 1:
        raise ContractError("backward expects a scalar loss")
    if not np.isfinite(loss.data[0, 0]):
        raise DivergenceError("non-finite loss")
    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node)


# --------------------------------------------------------------------------
# Layers and optimizer
# --------------------------------------------------------------------------

ACTIVATIONS = {"relu": relu, "sigmoid": sigmoid, "identity": lambda x: x}


def glorot(rng, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


class Mlp:
    """Dense layers with per-layer activation from {relu, sigmoid, identity}."""

    def __init__(self, dims: list[int], rng, activations: list[str] | None = None,
                 name: str = "mlp"):
        if len(dims) < 2:
            raise DimensionError("Mlp needs at least input and output dims")
        n_layers = len(dims) - 1
        if activations is None:
            activations = ["relu"] * (n_layers - 1) + ["identity"]
        if len(activations) != n_layers:
            raise DimensionError("one activation per layer")
        for act in activations:
            if act not in ACTIVATIONS:
                raise ContractError(f"unknown activation {act!r}")
        self.name = name
        self.activations = activations
        self.weights: list[Tensor] = []
        self.biases: list[Tensor] = []
        for i in range(n_layers):
            self.weights.append(parameter(glorot(rng, dims[i], dims[i + 1])))
            self.biases.append(parameter(np.zeros((1, dims[i + 1]))))

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[1]

    def __call__(self, x: Tensor) -> Tensor:
        out = x
        for w, b, act in zip(self.weights, self.biases, self.activations):
            out = ACTIVATIONS[act](add(matmul(out, w), b))
        return out

    def parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out.append((f"{self.name}.{i}.w", w))
            out.append((f"{self.name}.{i}.b", b))
        return out

    def parameter_count(self) -> int:
        return sum(p.data.size for _, p in self.parameters())


def forward(mlp: Mlp, x: Tensor) -> Tensor:
    return mlp(x)


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict[int, np.ndarray] = field(default_factory=dict)
    v: dict[int, np.ndarray] = field(default_factory=dict)


def adam_step(state: AdamState, params: list[Tensor],
              grads: list[np.ndarray] | None = None) -> None:
    """Standard bias-corrected Adam update, in place."""
    if grads is None:
        grads = [p.grad for p in params]
    state.step_count += 1
    bc1 = 1.0 - state.beta1 ** state.step_count
    bc2 = 1.0 - state.beta2 ** state.step_count
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            continue
        m = state.m.setdefault(i, np.zeros_like(p.data))
        v = state.v.setdefault(i, np.zeros_like(p.data))
        m += (1.0 - state.beta1) * (g - m)
        v += (1.0 - state.beta2) * (g * g - v)
        p.data -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


class Adam:
    """Thin convenience wrapper tying an AdamState to a parameter list."""

    def __init__(self, params: list[Tensor], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        adam_step(self.state, self.params)


def grad_check(f, params: list[Tensor], eps: float = 1e-5,
               max_coords: int = 16, seed: int = 0) -> float:
    """Max relative error between backprop and central finite differences.

    ``f`` rebuilds the scalar loss from the current parameter values on
    every call.
    """
    for p in params:
        p.zero_grad()
    loss = f()
    backward(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy()
                for p in params]
    rng = np.random.Generator(np.random.Philox(key=np.array([seed, 0xED], np.uint64)))
    worst = 0.0
    for p, grad in zip(params, analytic):
        flat = p.data.reshape(-1)
        n_coords = min(max_coords, flat.size)
        coords = rng.choice(flat.size, size=n_coords, replace=False)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + eps
            up = f().item()
            flat[c] = orig - eps
            down = f().item()
            flat[c] = orig
            numeric = (up - down) / (2 * eps)
            a = grad.reshape(-1)[c]
            denom = max(abs(a) + abs(numeric), 1e-8)
            worst = max(worst, abs(a - numeric) / denom)
    return worst


# --------------------------------------------------------------------------
# Checkpoints
# --------------------------------------------------------------------------


def save_checkpoint(path, named_params: dict[str, Tensor]) -> None:
    with open(path, "wb") as fh:
        fh.write(_EDNW_MAGIC)
        fh.write(struct.pack("<Q", len(named_params)))
        for name in sorted(named_params):
            data = named_params[name].data
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<QQ", data.shape[0], data.shape[1]))
            fh.write(data.astype("<f8").tobytes(order="C"))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        if fh.read(4) != _EDNW_MAGIC:
            raise ContractError(f"{path}: not an EDNW checkpoint")
        (count,) = struct.unpack("<Q", fh.read(8))
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<H", fh.read(2))
            name = fh.read(nlen).decode("utf-8")
            r, c = struct.unpack("<QQ", fh.read(16))
            data = np.frombuffer(fh.read(r * c * 8), dtype="<f8").reshape(r, c)
            out[name] = data.copy()
    return out


def restore_checkpoint(named_params: dict[str, Tensor], blobs: dict[str, np.ndarray]) -> None:
    for name, tensor in named_params.items():
        if name not in blobs:
            raise ContractError(f"checkpoint missing parameter {name!r}")
        if blobs[name].shape != tensor.data.shape:
            raise DimensionError(f"checkpoint shape mismatch for {name!r}")
        tensor.data[...] = blobs[name]
