"""Finite-difference checks of every hand-written backward pass.

Each check builds a small instance of one component, projects its output onto
a fixed random direction to get a scalar loss, and compares the analytic
gradient of every parameter and input against central differences. Sizes are
kept tiny so the whole suite runs in seconds.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .diffcore import (
    Dense,
    GradCheckReport,
    LstmStack,
    Mlp,
    Parameter,
    activation_backward,
    activation_forward,
    cross_entropy,
    cross_entropy_grad,
    gan_loss_grads,
    gan_losses,
    grad_check,
    lstm_cell_forward,
    LstmCellParams,
    softmax_cross_entropy,
)
from .model import VARIANTS, DiscriminatorNet, GeneratorNet, ModelDims, PerceptualNet, _time_major

TINY = ModelDims(d_raw=5, d_feat=4, d_hidden=3, d_enc=6, n_classes=3, n_segments=10, widths=(6, 5),
                 zero_residual=False)


KINK_MARGIN = 1e-3  # min |pre-activation| at relu units so central differences never straddle the kink


def _zero(params) -> None:
    for p in params:
        p.zero_grad()


def _kink_distance(mlp: Mlp, x: np.ndarray) -> float:
    _, caches = mlp.forward(x.reshape(-1, x.shape[-1]))
    dist = [np.abs(a).min() for _, a, _, kind in caches if kind == "relu"]
    return float(min(dist, default=np.inf))


def _jitter_biases(rng, *mlps: Mlp) -> None:
    # zero biases put a row with an all-dead layer exactly on the next layer's kink
    for mlp in mlps:
        for layer in mlp.layers:
            layer.b.value += rng.normal(scale=0.1, size=layer.b.value.shape)


def _draw_clear(rng, draw, margin_fn, tries: int = 500):
    """Redraw inputs until every relu pre-activation sits at least KINK_MARGIN from zero."""
    for _ in range(tries):
        x = draw()
        if margin_fn(x) >= KINK_MARGIN:
            return x
    raise RuntimeError("could not draw inputs clear of relu kinks")


def _check_linear(rng, **kw) -> GradCheckReport:
    layer = Dense(4, 3, rng, "linear")
    layer.b.value[:] = rng.normal(size=3)
    x = Parameter(rng.normal(size=(5, 4)), "x")
    R = rng.normal(size=(5, 3))

    def loss():
        return float((layer.forward(x.value)[0] * R).sum())

    def back():
        out, xc = layer.forward(x.value)
        x.grad += layer.backward(R, xc)

    return grad_check("linear", loss, back, layer.parameters(), [x], **kw)


def _check_activation(kind: str, rng, **kw) -> GradCheckReport:
    v = rng.normal(size=(4, 5))
    if kind == "relu":
        # keep entries away from the kink
        v = np.where(np.abs(v) < 0.1, v + np.sign(v + 1e-3) * 0.2, v)
    x = Parameter(v, "x")
    R = rng.normal(size=(4, 5))

    def loss():
        return float((activation_forward(x.value, kind) * R).sum())

    def back():
        out = activation_forward(x.value, kind)
        x.grad += activation_backward(R, x.value, out, kind)

    return grad_check(f"activation:{kind}", loss, back, [], [x], **kw)


def _check_lstm_cell(rng, **kw) -> GradCheckReport:
    # one step of a single-layer stack, fed with a nonzero state through a first step
    stack = LstmStack(3, 4, 1, rng, "cell")
    X = Parameter(rng.normal(size=(2, 5, 3)), "x")
    R = rng.normal(size=(5, 4))

    def loss():
        H, _ = stack.forward(X.value)
        return float((H[-1] * R).sum())

    def back():
        H, c = stack.forward(X.value)
        dH = np.zeros_like(H)
        dH[-1] = R
        X.grad += stack.backward(dH, c)

    report = grad_check("lstm-cell", loss, back, stack.parameters(), [X], **kw)
    # the standalone single-step function must agree with the unrolled kernel
    cell: LstmCellParams = stack.cells[0]
    z = np.zeros((5, 4))
    h1, c1 = lstm_cell_forward(X.value[0], z, z, cell)
    h2, _ = lstm_cell_forward(X.value[1], h1, c1, cell)
    H, _ = stack.forward(X.value)
    if not np.allclose(h2, H[-1], rtol=0, atol=1e-12):
        report.failures.append("single-step cell disagrees with unrolled stack")
    return report


def _check_lstm_stack(rng, **kw) -> GradCheckReport:
    stack = LstmStack(3, 4, 2, rng, "lstm")
    T, B = 10, 4
    X = Parameter(rng.normal(size=(T, B, 3)), "x")
    active = np.array([4, 4, 4, 3, 3, 2, 2, 2, 1, 1])
    R = rng.normal(size=(T, B, 4))
    mask = (np.arange(B)[None, :] < active[:, None])[:, :, None]
    R = R * mask

    def loss():
        H, _ = stack.forward(X.value, active)
        return float((H * R).sum())

    def back():
        H, c = stack.forward(X.value, active)
        X.grad += stack.backward(R, c)

    return grad_check("lstm-stack", loss, back, stack.parameters(), [X], **kw)


def _check_mlp(rng, **kw) -> GradCheckReport:
    mlp = Mlp([4, 6, 5, 3], rng, "mlp", hidden="tanh", final="sigmoid")
    x = Parameter(rng.normal(size=(5, 4)), "x")
    R = rng.normal(size=(5, 3))

    def loss():
        return float((mlp.forward(x.value)[0] * R).sum())

    def back():
        _, c = mlp.forward(x.value)
        x.grad += mlp.backward(R, c)

    return grad_check("mlp", loss, back, mlp.parameters(), [x], **kw)


def _check_cross_entropy(rng, **kw) -> GradCheckReport:
    y = np.eye(4)[1]
    s = Parameter(rng.uniform(0.1, 1.0, size=4), "scores")

    def loss():
        return cross_entropy(y, s.value)

    def back():
        s.grad += cross_entropy_grad(y, s.value)

    return grad_check("loss:cross-entropy", loss, back, [], [s], **kw)


def _check_softmax_ce(rng, **kw) -> GradCheckReport:
    logits = Parameter(rng.normal(size=(6, 4)), "logits")
    labels = rng.integers(0, 4, size=6)

    def loss():
        return softmax_cross_entropy(logits.value, labels)[0]

    def back():
        logits.grad += softmax_cross_entropy(logits.value, labels)[2]

    return grad_check("loss:softmax-cross-entropy", loss, back, [], [logits], **kw)


def _check_gan(form: str, rng, **kw) -> GradCheckReport:
    d_real = Parameter(rng.uniform(0.1, 0.9, size=6), "d_real")
    d_fake = Parameter(rng.uniform(0.1, 0.9, size=6), "d_fake")
    w = 0.7  # mixes both losses into one scalar so one check covers both

    def loss():
        loss_d, loss_g = gan_losses(d_real.value, d_fake.value, form)
        return loss_d + w * loss_g

    def back():
        dr, df, dg = gan_loss_grads(d_real.value, d_fake.value, form)
        d_real.grad += dr
        d_fake.grad += df + w * dg

    return grad_check(f"loss:gan-{form}", loss, back, [], [d_real, d_fake], **kw)


def _check_generator(variant: str, rng, **kw) -> GradCheckReport:
    g = GeneratorNet(TINY, variant, rng)
    _jitter_biases(rng, g.encoder)
    K = TINY.n_segments
    raw = _draw_clear(rng, lambda: rng.normal(size=(K, 5, TINY.d_raw)), lambda r: _kink_distance(g.encoder, r))
    k = np.array([3, K, 1, 7, 7])
    R = rng.normal(size=(5, TINY.d_feat))

    def loss():
        return float((g.forward(raw, k)[0] * R).sum())

    def back():
        _, c = g.forward(raw, k)
        g.backward(R.copy(), c)

    return grad_check(f"generator:{variant}", loss, back, g.parameters(), **kw)


def _check_discriminator(rng, **kw) -> GradCheckReport:
    d = DiscriminatorNet(TINY, rng)
    _jitter_biases(rng, d.mlp)
    both = _draw_clear(rng, lambda: rng.normal(size=(10, TINY.d_feat)), lambda x: _kink_distance(d.mlp, x))
    real = Parameter(both[:5], "real")
    fake = Parameter(both[5:], "fake")

    def loss():
        return gan_losses(d.forward(real.value)[0], d.forward(fake.value)[0])[0]

    def back():
        pr, rc = d.forward(real.value)
        pf, fc = d.forward(fake.value)
        dr, df, _ = gan_loss_grads(pr, pf)
        real.grad += d.backward(dr, rc)
        fake.grad += d.backward(df, fc)

    return grad_check("discriminator", loss, back, d.parameters(), [real, fake], **kw)


def _check_perceptual(rng, **kw) -> GradCheckReport:
    p = PerceptualNet(TINY, rng)
    _jitter_biases(rng, p.mlp)
    x = Parameter(_draw_clear(rng, lambda: rng.normal(size=(6, TINY.d_feat)), lambda v: _kink_distance(p.mlp, v)),
                  "feat")
    labels = rng.integers(0, TINY.n_classes, size=6)

    def loss():
        return softmax_cross_entropy(p.logits(x.value)[0], labels)[0]

    def back():
        logits, c = p.logits(x.value)
        x.grad += p.backward_logits(softmax_cross_entropy(logits, labels)[2], c)

    return grad_check("perceptual", loss, back, p.parameters(), [x], **kw)


def _check_generator_objective(form: str, rng, **kw) -> GradCheckReport:
    """Adversarial plus weighted classification loss through D and P into every generator weight."""
    g = GeneratorNet(TINY, "full", rng)
    d = DiscriminatorNet(TINY, rng)
    p = PerceptualNet(TINY, rng)
    _jitter_biases(rng, g.encoder, d.mlp, p.mlp)
    K = TINY.n_segments
    k = np.array([2, K, 5, 1, 8])

    def margin(r):
        feat = g.forward(r, k)[0]
        return min(_kink_distance(g.encoder, r), _kink_distance(d.mlp, feat), _kink_distance(p.mlp, feat))

    raw = _draw_clear(rng, lambda: _time_major(rng.normal(size=(5, K, TINY.d_raw))), margin)
    labels = rng.integers(0, TINY.n_classes, size=5)
    lam = 0.8

    def loss():
        feat, _ = g.forward(raw, k)
        _, loss_g = gan_losses(np.full(5, 0.5), d.forward(feat)[0], form)
        return loss_g + lam * softmax_cross_entropy(p.logits(feat)[0], labels)[0]

    def back():
        _zero(d.parameters())
        feat, gc = g.forward(raw, k)
        pf, dc = d.forward(feat)
        logits, pc = p.logits(feat)
        _, _, dg = gan_loss_grads(np.full(5, 0.5), pf, form)
        dfeat = d.backward(dg, dc) + p.backward_logits(lam * softmax_cross_entropy(logits, labels)[2], pc)
        g.backward(dfeat, gc)

    return grad_check(f"generator-objective:{form}", loss, back, g.parameters() + p.parameters(), **kw)


def _registry() -> dict[str, Callable[..., GradCheckReport]]:
    reg: dict[str, Callable[..., GradCheckReport]] = {
        "linear": _check_linear,
        "mlp": _check_mlp,
    }
    for kind in ("identity", "sigmoid", "tanh", "relu", "softmax"):
        reg[f"activation:{kind}"] = lambda rng, _k=kind, **kw: _check_activation(_k, rng, **kw)
    reg["lstm-cell"] = _check_lstm_cell
    reg["lstm-stack"] = _check_lstm_stack
    reg["loss:cross-entropy"] = _check_cross_entropy
    reg["loss:softmax-cross-entropy"] = _check_softmax_ce
    for form in ("non_saturating", "saturating"):
        reg[f"loss:gan-{form}"] = lambda rng, _f=form, **kw: _check_gan(_f, rng, **kw)
    for v in VARIANTS:
        reg[f"generator:{v}"] = lambda rng, _v=v, **kw: _check_generator(_v, rng, **kw)
    reg["discriminator"] = _check_discriminator
    reg["perceptual"] = _check_perceptual
    for form in ("non_saturating", "saturating"):
        reg[f"generator-objective:{form}"] = lambda rng, _f=form, **kw: _check_generator_objective(_f, rng, **kw)
    return reg


COMPONENTS = tuple(_registry())


def run_gradcheck(components=None, seed: int = 0, rel_tol: float = 1e-4,
                  corrupt: float = 1.0) -> list[GradCheckReport]:
    """Run the named checks (all by default). ``corrupt`` scales every analytic gradient."""
    reg = _registry()
    names = list(reg) if not components else list(components)
    unknown = [n for n in names if n not in reg]
    if unknown:
        raise KeyError(f"unknown gradcheck component(s): {', '.join(unknown)}")
    out = []
    for name in names:
        rng = np.random.default_rng([seed, COMPONENTS.index(name)])
        out.append(reg[name](rng, rel_tol=rel_tol, corrupt=corrupt))
    return out
