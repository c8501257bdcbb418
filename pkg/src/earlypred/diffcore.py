"""Dense numeric core with hand-derived gradients.

Tensors are plain float64 numpy arrays. Trainable arrays live in
:class:`Parameter`, which also carries the optimizer state slots. Layers follow a
forward/backward pair convention: ``forward`` returns ``(out, cache)`` and
``backward(dout, cache)`` returns the input gradient while accumulating into the
parameters' ``grad`` buffers.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from . import _kernels

EPS = 1e-12
ACTIVATIONS = ("identity", "sigmoid", "tanh", "relu", "softmax")


class DimensionError(ValueError):
    """Raised when operand shapes do not conform."""


class Parameter:
    """A trainable array with its gradient and optimizer state."""

    def __init__(self, value: np.ndarray, name: str = ""):
        self.value = np.array(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)
        self.name = name
        self.velocity = np.zeros_like(self.value)  # SGD momentum buffer
        self.m = np.zeros_like(self.value)  # Adam first moment
        self.v = np.zeros_like(self.value)  # Adam second moment
        self.step = 0

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def size(self) -> int:
        return self.value.size

    def zero_grad(self) -> None:
        self.grad.fill(0.0)

    def reset_state(self) -> None:
        self.velocity.fill(0.0)
        self.m.fill(0.0)
        self.v.fill(0.0)
        self.step = 0

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def _val(p) -> np.ndarray:
    return p.value if isinstance(p, Parameter) else np.asarray(p, dtype=np.float64)


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=(fan_in, fan_out))


# ---------------------------------------------------------------------------
# linear layer
# ---------------------------------------------------------------------------


def linear_forward(x: np.ndarray, W, b) -> np.ndarray:
    """``out[i, j] = sum_k x[i, k] W[k, j] + b[j]``."""
    Wv, bv = _val(W), _val(b)
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or Wv.ndim != 2 or x.shape[1] != Wv.shape[0] or bv.shape != (Wv.shape[1],):
        raise DimensionError(
            f"linear: input {x.shape} does not conform with weight {Wv.shape} / bias {bv.shape}"
        )
    return x @ Wv + bv


def linear_backward(dout: np.ndarray, x: np.ndarray, W: Parameter, b: Parameter | None,
                    need_dx: bool = True) -> np.ndarray | None:
    W.grad += x.T @ dout
    if b is not None:
        b.grad += dout.sum(axis=0)
    return dout @ W.value.T if need_dx else None


class Dense:
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, name: str):
        self.W = Parameter(glorot_uniform(rng, d_in, d_out), f"{name}.W")
        self.b = Parameter(np.zeros(d_out), f"{name}.b")

    @property
    def d_in(self) -> int:
        return self.W.shape[0]

    @property
    def d_out(self) -> int:
        return self.W.shape[1]

    def parameters(self) -> list[Parameter]:
        return [self.W, self.b]

    def forward(self, x):
        return linear_forward(x, self.W, self.b), x

    def backward(self, dout, x, need_dx=True):
        return linear_backward(dout, x, self.W, self.b, need_dx)


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------


def sigmoid(x: np.ndarray) -> np.ndarray:
    return _kernels.sigmoid_np(np.asarray(x, dtype=np.float64))


def softmax_rows(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise DimensionError(f"softmax-rows expects a 2-D array, got shape {x.shape}")
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def activation_forward(x: np.ndarray, kind: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if kind == "identity":
        return x
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "tanh":
        return np.tanh(x)
    if kind == "relu":
        return np.maximum(x, 0.0)
    if kind == "softmax":
        return softmax_rows(x)
    raise ValueError(f"unknown activation {kind!r}")


def activation_backward(dout: np.ndarray, x: np.ndarray, out: np.ndarray, kind: str) -> np.ndarray:
    """Gradient w.r.t. the pre-activation ``x`` given the forward output ``out``."""
    if kind == "identity":
        return dout
    if kind == "sigmoid":
        return dout * out * (1.0 - out)
    if kind == "tanh":
        return dout * (1.0 - out * out)
    if kind == "relu":
        return dout * (x > 0)
    if kind == "softmax":
        return out * (dout - (dout * out).sum(axis=1, keepdims=True))
    raise ValueError(f"unknown activation {kind!r}")


class Mlp:
    """Stack of Dense layers; ``hidden`` activation between them, ``final`` at the end."""

    def __init__(self, dims: Sequence[int], rng: np.random.Generator, name: str,
                 hidden: str = "relu", final: str = "identity"):
        self.layers = [Dense(a, b, rng, f"{name}.{i}") for i, (a, b) in enumerate(zip(dims[:-1], dims[1:]))]
        self.hidden = hidden
        self.final = final

    @property
    def dims(self) -> list[int]:
        return [self.layers[0].d_in] + [layer.d_out for layer in self.layers]

    def parameters(self) -> list[Parameter]:
        return [p for layer in self.layers for p in layer.parameters()]

    def forward(self, x, final: str | None = None):
        final = self.final if final is None else final
        caches = []
        h = np.asarray(x, dtype=np.float64)
        for i, layer in enumerate(self.layers):
            kind = final if i == len(self.layers) - 1 else self.hidden
            a, xc = layer.forward(h)
            h = activation_forward(a, kind)
            caches.append((xc, a, h, kind))
        return h, caches

    def backward(self, dout, caches, need_dx=True):
        g = dout
        for i in range(len(self.layers) - 1, -1, -1):
            xc, a, h, kind = caches[i]
            g = activation_backward(g, a, h, kind)
            g = self.layers[i].backward(g, xc, need_dx=need_dx or i > 0)
        return g


# ---------------------------------------------------------------------------
# LSTM
# ---------------------------------------------------------------------------


@dataclass
class LstmCellParams:
    """Weights of one LSTM layer; gate columns ordered input, forget, output, candidate."""

    Wx: Parameter
    Wh: Parameter
    b: Parameter

    @classmethod
    def init(cls, d_in: int, d_h: int, rng: np.random.Generator, name: str,
             forget_bias: float = 1.0) -> "LstmCellParams":
        b = np.zeros(4 * d_h)
        b[d_h:2 * d_h] = forget_bias
        return cls(
            Parameter(glorot_uniform(rng, d_in, 4 * d_h), f"{name}.Wx"),
            Parameter(glorot_uniform(rng, d_h, 4 * d_h), f"{name}.Wh"),
            Parameter(b, f"{name}.b"),
        )

    @property
    def d_in(self) -> int:
        return self.Wx.shape[0]

    @property
    def d_h(self) -> int:
        return self.Wh.shape[0]

    def parameters(self) -> list[Parameter]:
        return [self.Wx, self.Wh, self.b]


def lstm_cell_forward(x_t, h_prev, c_prev, p: LstmCellParams):
    """One LSTM step for a ``(B, d_in)`` input. Returns ``(h_t, c_t)``."""
    x_t, h_prev, c_prev = (np.atleast_2d(np.asarray(a, dtype=np.float64)) for a in (x_t, h_prev, c_prev))
    d_h = p.d_h
    if (p.Wx.shape != (x_t.shape[1], 4 * d_h) or h_prev.shape != (x_t.shape[0], d_h)
            or c_prev.shape != h_prev.shape or p.b.shape != (4 * d_h,)):
        raise DimensionError(
            f"lstm cell: x {x_t.shape}, h {h_prev.shape}, c {c_prev.shape} do not conform with "
            f"Wx {p.Wx.shape}, Wh {p.Wh.shape}, b {p.b.shape}"
        )
    a = x_t @ p.Wx.value + h_prev @ p.Wh.value + p.b.value
    i = sigmoid(a[:, :d_h])
    f = sigmoid(a[:, d_h:2 * d_h])
    o = sigmoid(a[:, 2 * d_h:3 * d_h])
    g = np.tanh(a[:, 3 * d_h:])
    c = f * c_prev + i * g
    return o * np.tanh(c), c


class LstmStack:
    """Stacked LSTM layers unrolled over a time-major ``(T, B, d_in)`` input."""

    def __init__(self, d_in: int, d_h: int, n_layers: int, rng: np.random.Generator, name: str):
        self.cells = []
        for layer in range(n_layers):
            self.cells.append(LstmCellParams.init(d_in if layer == 0 else d_h, d_h, rng, f"{name}.{layer}"))

    @property
    def d_h(self) -> int:
        return self.cells[-1].d_h

    def parameters(self) -> list[Parameter]:
        return [p for cell in self.cells for p in cell.parameters()]

    def forward(self, X: np.ndarray, active: np.ndarray | None = None):
        """Returns the top layer's hidden states ``(T, B, d_h)`` and a cache.

        ``active[t]`` limits step ``t`` to the leading rows (see ``_kernels.lstm_forward``).
        """
        T, B = X.shape[:2]
        if active is None:
            active = np.full(T, B, dtype=np.int64)
        caches = []
        inp = X
        for cell in self.cells:
            if inp.shape[2] != cell.d_in:
                raise DimensionError(f"lstm: input width {inp.shape[2]} != expected {cell.d_in}")
            z = np.zeros((B, cell.d_h))
            H, C, TC, G = _kernels.lstm_forward(inp, cell.Wx.value, cell.Wh.value, cell.b.value, z, z, active)
            caches.append((inp, H, C, TC, G, active))
            inp = H
        return inp, caches

    def backward(self, dH: np.ndarray, caches, need_dx: bool = True):
        g = dH
        for cell, (inp, H, C, TC, G, active) in zip(reversed(self.cells), reversed(caches)):
            z = np.zeros((inp.shape[1], cell.d_h))
            dX, dWx, dWh, db, _, _ = _kernels.lstm_backward(g, inp, cell.Wx.value, cell.Wh.value, H, C, TC, G,
                                                            z, z, active)
            cell.Wx.grad += dWx
            cell.Wh.grad += dWh
            cell.b.grad += db
            g = dX
        return g if need_dx else None


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def cross_entropy(y: np.ndarray, s: np.ndarray) -> float:
    """``-sum_i y_i log s_i`` with ``s`` clamped below at 1e-12."""
    y = np.asarray(y, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    if y.shape != s.shape:
        raise DimensionError(f"cross_entropy: target {y.shape} vs scores {s.shape}")
    return float(-(y * np.log(np.maximum(s, EPS))).sum())


def cross_entropy_grad(y: np.ndarray, s: np.ndarray) -> np.ndarray:
    return -np.asarray(y, dtype=np.float64) / np.maximum(s, EPS)


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy of softmax(logits) over the batch.

    Returns ``(loss, probs, dlogits)``; the gradient is taken w.r.t. the logits.
    """
    probs = softmax_rows(logits)
    n = logits.shape[0]
    rows = np.arange(n)
    loss = float(-np.log(np.maximum(probs[rows, labels], EPS)).mean())
    dlogits = probs.copy()
    dlogits[rows, labels] -= 1.0
    return loss, probs, dlogits / n


def gan_losses(d_real, d_fake, form: str = "non_saturating") -> tuple[float, float]:
    """Discriminator loss and generator adversarial loss from sigmoid outputs.

    ``loss_D = -mean log D(real) - mean log(1 - D(fake))``. The generator term
    is ``-mean log D(fake)`` (non-saturating) or ``mean log(1 - D(fake))``
    (saturating, the literal minimax objective).
    """
    d_real = np.clip(np.asarray(d_real, dtype=np.float64), EPS, 1.0 - EPS)
    d_fake = np.clip(np.asarray(d_fake, dtype=np.float64), EPS, 1.0 - EPS)
    loss_d = float(-np.log(d_real).mean() - np.log1p(-d_fake).mean())
    return loss_d, generator_adv_loss(d_fake, form)


def generator_adv_loss(d_fake, form: str = "non_saturating") -> float:
    d_fake = np.clip(np.asarray(d_fake, dtype=np.float64), EPS, 1.0 - EPS)
    if form == "non_saturating":
        return float(-np.log(d_fake).mean())
    if form == "saturating":
        return float(np.log1p(-d_fake).mean())
    raise ValueError(f"unknown adversarial form {form!r}")


def generator_adv_grad(d_fake, form: str = "non_saturating") -> np.ndarray:
    """Gradient of :func:`generator_adv_loss` w.r.t. ``d_fake``."""
    d_fake = np.clip(np.asarray(d_fake, dtype=np.float64), EPS, 1.0 - EPS)
    if form == "non_saturating":
        return -1.0 / (d_fake * d_fake.size)
    if form == "saturating":
        return -1.0 / ((1.0 - d_fake) * d_fake.size)
    raise ValueError(f"unknown adversarial form {form!r}")


def gan_loss_grads(d_real, d_fake, form: str = "non_saturating"):
    """Gradients of ``loss_D`` w.r.t. (d_real, d_fake) and of the generator term w.r.t. d_fake."""
    d_real = np.clip(np.asarray(d_real, dtype=np.float64), EPS, 1.0 - EPS)
    d_fake = np.clip(np.asarray(d_fake, dtype=np.float64), EPS, 1.0 - EPS)
    dd_real = -1.0 / (d_real * d_real.size)
    dd_fake = 1.0 / ((1.0 - d_fake) * d_fake.size)
    return dd_real, dd_fake, generator_adv_grad(d_fake, form)


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------


def sgd_step(params: Iterable[Parameter], lr: float, momentum: float = 0.0,
             weight_decay: float = 0.0) -> None:
    """``v <- momentum v + grad + wd value``; ``value <- value - lr v``."""
    for p in params:
        p.velocity *= momentum
        p.velocity += p.grad + weight_decay * p.value
        p.value -= lr * p.velocity
        p.step += 1


def adam_step(params: Iterable[Parameter], lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8, weight_decay: float = 0.0) -> None:
    """Bias-corrected Adam; weight decay enters as an L2 term in the gradient."""
    for p in params:
        g = p.grad + weight_decay * p.value
        p.step += 1
        p.m *= beta1
        p.m += (1.0 - beta1) * g
        p.v *= beta2
        p.v += (1.0 - beta2) * g * g
        m_hat = p.m / (1.0 - beta1 ** p.step)
        v_hat = p.v / (1.0 - beta2 ** p.step)
        p.value -= lr * m_hat / (np.sqrt(v_hat) + eps)


class SGD:
    def __init__(self, params: Sequence[Parameter], lr: float, momentum: float = 0.0,
                 weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay

    def step(self) -> None:
        sgd_step(self.params, self.lr, self.momentum, self.weight_decay)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


class Adam:
    def __init__(self, params: Sequence[Parameter], lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay

    def step(self) -> None:
        adam_step(self.params, self.lr, self.beta1, self.beta2, self.eps, self.weight_decay)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    name: str
    max_rel_error: float
    worst: str
    n_checked: int
    rel_tol: float
    failures: list[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return bool(not self.failures and self.max_rel_error <= self.rel_tol)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        msg = f"{status}  {self.name:<34s} max_rel_err={self.max_rel_error:.3e}  ({self.n_checked} entries, worst {self.worst})"
        if self.failures:
            msg += "  " + "; ".join(self.failures)
        return msg


def grad_check(name: str, loss_fn: Callable[[], float], backward_fn: Callable[[], None],
               params: Sequence[Parameter], inputs: Sequence[Parameter] = (),
               rel_tol: float = 1e-4, h: float = 1e-5, floor: float = 1e-6,
               corrupt: float = 1.0) -> GradCheckReport:
    """Compare analytic gradients against central finite differences.

    ``loss_fn`` evaluates the scalar loss from the current parameter values;
    ``backward_fn`` must populate ``.grad`` on every entry of ``params`` and
    ``inputs`` (grads are zeroed first). Inputs are wrapped as Parameters so
    they can be perturbed the same way. The per-entry relative error is
    ``|a - n| / max(|a|, |n|, floor)``. ``corrupt`` scales the analytic gradient
    (negative-control hook).
    """
    targets = list(params) + list(inputs)
    for p in targets:
        p.zero_grad()
    backward_fn()
    worst, worst_at, n = 0.0, "-", 0
    failures = []
    for p in targets:
        analytic = p.grad.copy() * corrupt
        if not np.all(np.isfinite(analytic)):
            bad = np.argwhere(~np.isfinite(analytic))[0]
            failures.append(f"non-finite analytic gradient at {p.name}{tuple(bad)}")
            continue
        flat = p.value.reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + h
            fp = loss_fn()
            flat[idx] = orig - h
            fm = loss_fn()
            flat[idx] = orig
            num = (fp - fm) / (2.0 * h)
            a = analytic.reshape(-1)[idx]
            if not np.isfinite(num):
                failures.append(f"non-finite numeric gradient at {p.name}[{idx}]")
                continue
            err = abs(a - num) / max(abs(a), abs(num), floor)
            n += 1
            if err > worst:
                worst, worst_at = err, f"{p.name}{tuple(int(i) for i in np.unravel_index(idx, p.shape))}"
    return GradCheckReport(name, worst, worst_at, n, rel_tol, failures)
