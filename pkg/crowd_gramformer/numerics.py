"""
Dense tensor kernel with tape-based reverse-mode differentiation

Every op computes its forward value with numpy and, when a tape is active and
an input requires a gradient, records a backward rule on that tape. Tapes are
per thread, so distinct models may train on distinct threads.
"""
import threading
from contextlib import contextmanager
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit

from .exceptions import ContractError, ShapeError

DTYPE = np.float64
REL_ERROR_FLOOR = 1e-4  # below this, numeric gradients are compared in absolute terms

# op name -> multiplier applied to that op's input gradients (verification hook)
_BACKWARD_FAULTS: Dict[str, float] = {}
_local = threading.local()


class Tensor:
    """Dense float64 array with an optional gradient accumulator"""

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def dims(self) -> List[int]:
        return list(self.data.shape)

    @property
    def size(self) -> int:
        return int(self.data.size)

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single value, tensor has shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        label = f" '{self.name}'" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"


def parameter(data, name: str) -> Tensor:
    """Trainable leaf tensor owning a private copy of its data"""
    tensor = Tensor(np.array(data, dtype=DTYPE), requires_grad=True, name=name)
    tensor.zero_grad()
    return tensor


def constant(data) -> Tensor:
    return Tensor(data)


class TapeRecord:
    """One executed op: inputs, output and the rule mapping output grad to input grads"""

    __slots__ = ("op", "inputs", "output", "backward_fn")

    def __init__(self, op: str, inputs: Sequence[Tensor], output: Tensor,
                 backward_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]):
        self.op = op
        self.inputs = tuple(inputs)
        self.output = output
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of executed ops; use as a context manager to activate"""

    def __init__(self):
        self.records: List[TapeRecord] = []

    def __len__(self):
        return len(self.records)

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        return False

    def ops(self) -> List[str]:
        return [record.op for record in self.records]


def _tape_stack() -> List[Tape]:
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


def active_tape() -> Optional[Tape]:
    stack = _tape_stack()
    return stack[-1] if stack else None


def _emit(op: str, inputs: Sequence[Tensor], value: np.ndarray,
          backward_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]) -> Tensor:
    """Wrap a forward value and record it when gradients are needed"""
    tape = active_tape()
    needs_grad = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(value, requires_grad=needs_grad)
    if needs_grad:
        tape.records.append(TapeRecord(op, inputs, out, backward_fn))
    return out


def _require_same_shape(op: str, a: Tensor, b: Tensor):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not match")


def _require_rank(op: str, t: Tensor, rank: int):
    if t.data.ndim != rank:
        raise ShapeError(f"{op}: expected a rank-{rank} tensor, got shape {t.shape}")


# ---------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """c = a @ b for a [M x K] and b [K x P]"""
    _require_rank("matmul", a, 2)
    _require_rank("matmul", b, 2)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return _emit("matmul", (a, b), a.data @ b.data, backward)


def transpose(a: Tensor) -> Tensor:
    _require_rank("transpose", a, 2)
    return _emit("transpose", (a,), a.data.T, lambda g: (g.T,))


def reshape(a: Tensor, shape: Tuple[int, ...]) -> Tensor:
    if int(np.prod(shape)) != a.size:
        raise ShapeError(f"reshape: cannot view {a.shape} as {tuple(shape)}")
    original = a.shape
    return _emit("reshape", (a,), a.data.reshape(shape), lambda g: (g.reshape(original),))


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    """Join tensors along an existing axis"""
    if not tensors:
        raise ContractError("concat needs at least one tensor")
    try:
        value = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = ", ".join(str(t.shape) for t in tensors)
        raise ShapeError(f"concat: incompatible shapes {shapes} along axis {axis}")
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _emit("concat", tuple(tensors), value, backward)


# ---------------------------------------------------------------- elementwise

def add(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape("add", a, b)
    return _emit("add", (a, b), a.data + b.data, lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape("sub", a, b)
    return _emit("sub", (a, b), a.data - b.data, lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape("mul", a, b)
    return _emit("mul", (a, b), a.data * b.data, lambda g: (g * b.data, g * a.data))


def scale(a: Tensor, factor: float) -> Tensor:
    factor = float(factor)
    return _emit("scale", (a,), a.data * factor, lambda g: (g * factor,))


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """Row-wise bias add: x [N x C] + bias [C]"""
    _require_rank("add_bias", x, 2)
    if bias.shape != (x.shape[1],):
        raise ShapeError(f"add_bias: bias {bias.shape} does not fit rows of {x.shape}")
    return _emit("add_bias", (x, bias), x.data + bias.data, lambda g: (g, g.sum(axis=0)))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _emit("relu", (x,), np.where(mask, x.data, 0.0), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    y = expit(x.data)
    return _emit("sigmoid", (x,), y, lambda g: (g * y * (1.0 - y),))


def absolute(x: Tensor) -> Tensor:
    sign = np.sign(x.data)
    return _emit("abs", (x,), np.abs(x.data), lambda g: (g * sign,))


ELEMENTWISE: Dict[str, Callable[..., Tensor]] = {
    "relu": relu,
    "sigmoid": sigmoid,
    "add": add,
    "mul": mul,
    "scale": scale,
}


def elementwise(kind: str, *operands, **kwargs) -> Tensor:
    """Dispatch one of the named elementwise ops"""
    try:
        op = ELEMENTWISE[kind]
    except KeyError:
        raise ContractError(f"unknown elementwise op '{kind}' (expected one of {', '.join(ELEMENTWISE)})")
    return op(*operands, **kwargs)


# ---------------------------------------------------------------- reductions

def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _emit("sum", (x,), np.array(x.data.sum()), lambda g: (np.full(shape, float(g)),))


def mean_all(x: Tensor) -> Tensor:
    shape = x.shape
    count = x.size
    return _emit("mean", (x,), np.array(x.data.mean()), lambda g: (np.full(shape, float(g) / count),))


def row_variance(x: Tensor) -> Tensor:
    """Mean over all entries of the squared deviation from each row's mean"""
    _require_rank("row_variance", x, 2)
    centered = x.data - x.data.mean(axis=1, keepdims=True)
    count = x.size

    def backward(g):
        return (float(g) * 2.0 * centered / count,)

    return _emit("row_variance", (x,), np.array((centered ** 2).mean()), backward)


# ---------------------------------------------------------------- normalization

def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax of a 2-D tensor"""
    _require_rank("softmax_rows", x, 2)
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    exps = np.exp(shifted)
    y = exps / exps.sum(axis=1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=1, keepdims=True)),)

    return _emit("softmax_rows", (x,), y, backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row normalization followed by an affine map"""
    _require_rank("layer_norm", x, 2)
    channels = x.shape[1]
    if gain.shape != (channels,) or bias.shape != (channels,):
        raise ShapeError(f"layer_norm: gain {gain.shape} / bias {bias.shape} do not fit {x.shape}")
    if eps <= 0:
        raise ContractError(f"layer_norm eps must be > 0, got {eps}")
    centered = x.data - x.data.mean(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt((centered ** 2).mean(axis=1, keepdims=True) + eps)
    normed = centered * inv_std

    def backward(g):
        d_normed = g * gain.data
        d_x = inv_std * (d_normed
                         - d_normed.mean(axis=1, keepdims=True)
                         - normed * (d_normed * normed).mean(axis=1, keepdims=True))
        return d_x, (g * normed).sum(axis=0), g.sum(axis=0)

    return _emit("layer_norm", (x, gain, bias), normed * gain.data + bias.data, backward)


# ---------------------------------------------------------------- convolution

def _im2col(x: np.ndarray) -> np.ndarray:
    channels, height, width = x.shape
    padded = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    cols = np.empty((channels, 9, height, width), dtype=DTYPE)
    for dy in range(3):
        for dx in range(3):
            cols[:, dy * 3 + dx] = padded[:, dy:dy + height, dx:dx + width]
    return cols.reshape(channels * 9, height * width)


def _col2im(cols: np.ndarray, shape: Tuple[int, int, int]) -> np.ndarray:
    channels, height, width = shape
    cols = cols.reshape(channels, 9, height, width)
    padded = np.zeros((channels, height + 2, width + 2), dtype=DTYPE)
    for dy in range(3):
        for dx in range(3):
            padded[:, dy:dy + height, dx:dx + width] += cols[:, dy * 3 + dx]
    return padded[:, 1:height + 1, 1:width + 1]


def conv2d_3x3(x: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    """Zero-padded 3x3 cross-correlation: [C_in x H x W] -> [C_out x H x W]"""
    _require_rank("conv2d_3x3", x, 3)
    _require_rank("conv2d_3x3", kernel, 4)
    out_channels, in_channels = kernel.shape[:2]
    if kernel.shape[2:] != (3, 3):
        raise ShapeError(f"conv2d_3x3: kernel must be C_out x C_in x 3 x 3, got {kernel.shape}")
    if x.shape[0] != in_channels:
        raise ShapeError(f"conv2d_3x3: input {x.shape} has {x.shape[0]} channels, kernel {kernel.shape} expects {in_channels}")
    if bias.shape != (out_channels,):
        raise ShapeError(f"conv2d_3x3: bias {bias.shape} does not fit kernel {kernel.shape}")

    _, height, width = x.shape
    cols = _im2col(x.data)
    weights = kernel.data.reshape(out_channels, in_channels * 9)
    value = (weights @ cols + bias.data[:, None]).reshape(out_channels, height, width)

    def backward(g):
        g2 = g.reshape(out_channels, height * width)
        d_kernel = (g2 @ cols.T).reshape(kernel.shape)
        d_x = _col2im(weights.T @ g2, x.shape)
        return d_x, d_kernel, g2.sum(axis=1)

    return _emit("conv2d_3x3", (x, kernel, bias), value, backward)


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbor 2x upsampling of [C x H x W]"""
    _require_rank("upsample2x", x, 3)
    channels, height, width = x.shape
    value = np.repeat(np.repeat(x.data, 2, axis=1), 2, axis=2)

    def backward(g):
        return (g.reshape(channels, height, 2, width, 2).sum(axis=(2, 4)),)

    return _emit("upsample2x", (x,), value, backward)


# ---------------------------------------------------------------- graph ops

def pairwise_abs_diff(f: Tensor) -> Tensor:
    """E[i, j] = |f[i] - f[j]| for a vector f"""
    _require_rank("pairwise_abs_diff", f, 1)
    diff = f.data[:, None] - f.data[None, :]
    sign = np.sign(diff)

    def backward(g):
        weighted = sign * g
        return (weighted.sum(axis=1) - weighted.sum(axis=0),)

    return _emit("pairwise_abs_diff", (f,), np.abs(diff), backward)


def gather_rows(x: Tensor, index: np.ndarray) -> Tensor:
    _require_rank("gather_rows", x, 2)
    index = np.asarray(index, dtype=np.int64)
    if index.size and (index.min() < 0 or index.max() >= x.shape[0]):
        raise ContractError(f"gather_rows: index out of range for {x.shape[0]} rows")

    def backward(g):
        grad = np.zeros_like(x.data)
        np.add.at(grad, index, g)
        return (grad,)

    return _emit("gather_rows", (x,), x.data[index], backward)


def embed_add(nodes: Tensor, index: np.ndarray, bank: Tensor) -> Tensor:
    """nodes[i] + bank[index[i]]; the bank receives a scatter-add gradient"""
    _require_rank("embed_add", nodes, 2)
    _require_rank("embed_add", bank, 2)
    index = np.asarray(index, dtype=np.int64)
    if index.shape != (nodes.shape[0],):
        raise ShapeError(f"embed_add: {index.shape[0] if index.ndim else 0} indices for {nodes.shape[0]} nodes")
    if bank.shape[1] != nodes.shape[1]:
        raise ShapeError(f"embed_add: bank {bank.shape} does not fit nodes {nodes.shape}")
    if index.size and (index.min() < 0 or index.max() >= bank.shape[0]):
        raise ContractError(f"embed_add: centrality index {int(index.max())} outside bank of {bank.shape[0]} rows")

    def backward(g):
        d_bank = np.zeros_like(bank.data)
        np.add.at(d_bank, index, g)
        return g, d_bank

    return _emit("embed_add", (nodes, bank), nodes.data + bank.data[index], backward)


def scatter_matrix(values: Tensor, rows: np.ndarray, cols: np.ndarray, shape: Tuple[int, int]) -> Tensor:
    """Dense matrix holding values at (rows, cols), zero elsewhere"""
    flat = values.data.reshape(-1)
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    if flat.shape[0] != rows.shape[0] or rows.shape != cols.shape:
        raise ShapeError(f"scatter_matrix: {flat.shape[0]} values for {rows.shape[0]} positions")
    dense = np.zeros(shape, dtype=DTYPE)
    np.add.at(dense, (rows, cols), flat)
    original = values.shape

    def backward(g):
        return (g[rows, cols].reshape(original),)

    return _emit("scatter_matrix", (values,), dense, backward)


# ---------------------------------------------------------------- reverse pass

@contextmanager
def inject_backward_fault(op: str, factor: float = 2.0):
    """Scale one op's backward output; used to prove the gradient checker bites"""
    _BACKWARD_FAULTS[op] = factor
    try:
        yield
    finally:
        _BACKWARD_FAULTS.pop(op, None)


def backward(loss: Tensor, tape: Tape):
    """Accumulate d(loss)/d(leaf) into every leaf tensor that requires a gradient"""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")

    produced = {id(record.output) for record in tape.records}
    pending: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}

    for record in reversed(tape.records):
        g = pending.pop(id(record.output), None)
        if g is None:
            continue
        factor = _BACKWARD_FAULTS.get(record.op)
        for tensor, grad in zip(record.inputs, record.backward_fn(g)):
            if grad is None or not tensor.requires_grad:
                continue
            if factor is not None:
                grad = grad * factor
            key = id(tensor)
            if key in produced:
                pending[key] = pending[key] + grad if key in pending else grad
            else:
                if tensor.grad is None:
                    tensor.grad = np.zeros_like(tensor.data)
                tensor.grad += grad

    # a loss that is itself a leaf
    if id(loss) not in produced and loss.requires_grad:
        if loss.grad is None:
            loss.grad = np.zeros_like(loss.data)
        loss.grad += 1.0


# ---------------------------------------------------------------- optimizer

class AdamState:
    """First/second moment estimates keyed by parameter name"""

    def __init__(self):
        self.step = 0
        self.first: Dict[str, np.ndarray] = {}
        self.second: Dict[str, np.ndarray] = {}


def adam_step(params: Dict[str, Tensor], grads: Dict[str, np.ndarray], state: AdamState,
              lr: float, betas: Tuple[float, float] = (0.9, 0.999), eps: float = 1e-8) -> AdamState:
    """One bias-corrected Adam update, applied in place"""
    beta1, beta2 = betas
    state.step += 1
    correction1 = 1.0 - beta1 ** state.step
    correction2 = 1.0 - beta2 ** state.step

    for name, param in params.items():
        grad = grads.get(name)
        if grad is None:
            continue
        first = state.first.setdefault(name, np.zeros_like(param.data))
        second = state.second.setdefault(name, np.zeros_like(param.data))
        first *= beta1
        first += (1.0 - beta1) * grad
        second *= beta2
        second += (1.0 - beta2) * grad * grad
        param.data -= lr * (first / correction1) / (np.sqrt(second / correction2) + eps)
    return state


class Adam:
    """Adam optimizer reading gradients from the parameter tensors"""

    def __init__(self, lr: float, betas: Tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.state = AdamState()

    def step(self, params: Dict[str, Tensor]):
        grads = {name: p.grad for name, p in params.items() if p.grad is not None}
        adam_step(params, grads, self.state, self.lr, self.betas, self.eps)


# ---------------------------------------------------------------- gradient check

class GradCheckEntry:
    """Worst relative error found in one parameter"""

    def __init__(self, name: str, max_rel_error: float, worst_index: Tuple[int, ...],
                 analytic: float, numeric: float):
        self.name = name
        self.max_rel_error = max_rel_error
        self.worst_index = worst_index
        self.analytic = analytic
        self.numeric = numeric

    def __str__(self):
        return (f"{self.name}: rel_err={self.max_rel_error:.3e} at {self.worst_index} "
                f"(analytic {self.analytic:.6e}, numeric {self.numeric:.6e})")


class GradCheckReport:
    """Per-parameter results sorted worst-first"""

    def __init__(self, entries: List[GradCheckEntry], tolerance: float):
        self.entries = sorted(entries, key=lambda e: e.max_rel_error, reverse=True)
        self.tolerance = tolerance

    @property
    def worst(self) -> float:
        return self.entries[0].max_rel_error if self.entries else 0.0

    @property
    def failures(self) -> List[GradCheckEntry]:
        return [e for e in self.entries if not e.max_rel_error < self.tolerance]

    @property
    def passed(self) -> bool:
        return not self.failures

    def names(self) -> List[str]:
        return [e.name for e in self.entries]


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    """|analytic - numeric| relative to the numeric estimate, floored for near-zero gradients"""
    return np.abs(analytic - numeric) / np.maximum(np.abs(numeric), REL_ERROR_FLOOR)


def grad_check(closure: Callable[[], Tensor], params: Dict[str, Tensor],
               h: float = 1e-5, tol: float = 1e-4) -> GradCheckReport:
    """Compare analytic gradients with central differences (f(x+h) - f(x-h)) / 2h"""
    for param in params.values():
        param.zero_grad()
    with Tape() as tape:
        loss = closure()
    backward(loss, tape)
    analytic = {name: p.grad.copy() for name, p in params.items()}

    baseline = closure().item()
    if closure().item() != baseline:
        raise ContractError("grad_check: closure is not deterministic (two baseline evaluations differ)")

    entries = []
    for name, param in params.items():
        numeric = numeric_gradient(lambda _: closure().item(), param.data, h)
        errors = relative_error(analytic[name], numeric)
        worst = np.unravel_index(int(np.argmax(errors)), errors.shape) if errors.size else ()
        entries.append(GradCheckEntry(
            name,
            float(errors.max()) if errors.size else 0.0,
            tuple(int(i) for i in worst),
            float(analytic[name][worst]) if errors.size else 0.0,
            float(numeric[worst]) if errors.size else 0.0,
        ))
    return GradCheckReport(entries, tol)


def numeric_gradient(fn: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of fn at x; x is perturbed in place and restored entry by entry"""
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    grad_flat = grad.reshape(-1)
    for i in range(flat.shape[0]):
        original = flat[i]
        flat[i] = original + h
        plus = fn(x)
        flat[i] = original - h
        minus = fn(x)
        flat[i] = original
        grad_flat[i] = (plus - minus) / (2.0 * h)
    return grad
