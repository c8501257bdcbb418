"""Hot numeric kernels: LSTM recurrence (forward/backward) and prefix-mean pooling.

Every kernel exists twice: a numba ``@njit`` version and a pure-numpy version.
The active backend is chosen at import time from ``EARLYPRED_BACKEND``
(``numba`` or ``numpy``); numba is used when importable unless the variable
says otherwise. ``set_backend`` switches at runtime (tests, benchmarks).

All arrays are time-major, float64, C-contiguous: ``X[t]`` is a ``(B, d)`` block.
LSTM gate columns are laid out ``[input, forget, output, candidate]``.
"""

from __future__ import annotations

import math
import os

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a hard dependency in practice
    HAVE_NUMBA = False

BACKENDS = ("numba", "numpy")


# ---------------------------------------------------------------------------
# numpy reference path
# ---------------------------------------------------------------------------


def sigmoid_np(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def prefix_mean_np(F: np.ndarray) -> np.ndarray:
    T = F.shape[0]
    counts = np.arange(1, T + 1, dtype=np.float64).reshape((T,) + (1,) * (F.ndim - 1))
    return np.cumsum(F, axis=0) / counts


def prefix_mean_backward_np(dM: np.ndarray) -> np.ndarray:
    T = dM.shape[0]
    counts = np.arange(1, T + 1, dtype=np.float64).reshape((T,) + (1,) * (dM.ndim - 1))
    scaled = dM / counts
    return np.cumsum(scaled[::-1], axis=0)[::-1].copy()


def lstm_forward_np(X, Wx, Wh, b, h0, c0, active):
    T, B, _ = X.shape
    dh = Wh.shape[0]
    H = np.zeros((T, B, dh))
    C = np.zeros((T, B, dh))
    TC = np.zeros((T, B, dh))
    G = np.zeros((T, B, 4 * dh))
    h, c = h0, c0
    for t in range(T):
        n = active[t]
        if n == 0:
            break
        a = X[t, :n] @ Wx
        a += h[:n] @ Wh
        a += b
        s = a[:, : 3 * dh]
        # sigmoid(x) = (1 + tanh(x / 2)) / 2
        s *= 0.5
        np.tanh(s, out=s)
        s *= 0.5
        s += 0.5
        np.tanh(a[:, 3 * dh :], out=a[:, 3 * dh :])
        G[t, :n] = a
        c = a[:, dh : 2 * dh] * c[:n] + a[:, :dh] * a[:, 3 * dh :]
        C[t, :n] = c
        tc = np.tanh(c)
        TC[t, :n] = tc
        h = a[:, 2 * dh : 3 * dh] * tc
        H[t, :n] = h
    return H, C, TC, G


def lstm_backward_np(dH, X, Wx, Wh, H, C, TC, G, h0, c0, active):
    T, B, _ = X.shape
    dh = Wh.shape[0]
    dX = np.zeros_like(X)
    dWx = np.zeros_like(Wx)
    dWh = np.zeros_like(Wh)
    db = np.zeros(4 * dh)
    da = np.empty((B, 4 * dh))
    dh_next = np.zeros((B, dh))
    dc_next = np.zeros((B, dh))
    for t in range(T - 1, -1, -1):
        n = active[t]
        if n == 0:
            continue
        i = G[t, :n, :dh]
        f = G[t, :n, dh : 2 * dh]
        o = G[t, :n, 2 * dh : 3 * dh]
        g = G[t, :n, 3 * dh :]
        tc = TC[t, :n]
        c_prev = C[t - 1, :n] if t > 0 else c0[:n]
        h_prev = H[t - 1, :n] if t > 0 else h0[:n]
        dht = dH[t, :n] + dh_next[:n]
        dc = dc_next[:n] + dht * o * (1.0 - tc * tc)
        d = da[:n]
        d[:, :dh] = dc * g * i * (1.0 - i)
        d[:, dh : 2 * dh] = dc * c_prev * f * (1.0 - f)
        d[:, 2 * dh : 3 * dh] = dht * tc * o * (1.0 - o)
        d[:, 3 * dh :] = dc * i * (1.0 - g * g)
        dc_next[:n] = dc * f
        dWx += X[t, :n].T @ d
        dWh += h_prev.T @ d
        db += d.sum(axis=0)
        dX[t, :n] = d @ Wx.T
        dh_next[:n] = d @ Wh.T
    return dX, dWx, dWh, db, dh_next, dc_next


# ---------------------------------------------------------------------------
# numba path
# ---------------------------------------------------------------------------

if HAVE_NUMBA:

    @njit(cache=True)
    def _sig(x):
        if x >= 0.0:
            return 1.0 / (1.0 + math.exp(-x))
        e = math.exp(x)
        return e / (1.0 + e)

    @njit(cache=True)
    def prefix_mean_nb(F):
        T, B, d = F.shape
        out = np.empty_like(F)
        acc = np.zeros((B, d))
        for t in range(T):
            inv = 1.0 / (t + 1.0)
            for n in range(B):
                for j in range(d):
                    acc[n, j] += F[t, n, j]
                    out[t, n, j] = acc[n, j] * inv
        return out

    @njit(cache=True)
    def prefix_mean_backward_nb(dM):
        T, B, d = dM.shape
        out = np.empty_like(dM)
        acc = np.zeros((B, d))
        for t in range(T - 1, -1, -1):
            inv = 1.0 / (t + 1.0)
            for n in range(B):
                for j in range(d):
                    acc[n, j] += dM[t, n, j] * inv
                    out[t, n, j] = acc[n, j]
        return out

    @njit(cache=True)
    def _tanh(x):
        if x >= 0.0:
            e = math.exp(-2.0 * x)
            return (1.0 - e) / (1.0 + e)
        e = math.exp(2.0 * x)
        return (e - 1.0) / (e + 1.0)

    @njit(cache=True)
    def lstm_forward_nb(X, Wx, Wh, b, h0, c0, active):
        T, B, _ = X.shape
        dh = Wh.shape[0]
        H = np.zeros((T, B, dh))
        C = np.zeros((T, B, dh))
        TC = np.zeros((T, B, dh))
        G = np.zeros((T, B, 4 * dh))
        h = h0.copy()
        c = c0.copy()
        for t in range(T):
            n = active[t]
            if n == 0:
                break
            a = np.dot(X[t, :n], Wx) + np.dot(h[:n], Wh)
            for r in range(n):
                for j in range(dh):
                    ig = _sig(a[r, j] + b[j])
                    fg = _sig(a[r, dh + j] + b[dh + j])
                    og = _sig(a[r, 2 * dh + j] + b[2 * dh + j])
                    cg = _tanh(a[r, 3 * dh + j] + b[3 * dh + j])
                    cv = fg * c[r, j] + ig * cg
                    tc = _tanh(cv)
                    hv = og * tc
                    G[t, r, j] = ig
                    G[t, r, dh + j] = fg
                    G[t, r, 2 * dh + j] = og
                    G[t, r, 3 * dh + j] = cg
                    c[r, j] = cv
                    h[r, j] = hv
                    C[t, r, j] = cv
                    TC[t, r, j] = tc
                    H[t, r, j] = hv
        return H, C, TC, G

    @njit(cache=True)
    def lstm_backward_nb(dH, X, Wx, Wh, H, C, TC, G, h0, c0, active):
        T, B, _ = X.shape
        dh = Wh.shape[0]
        dX = np.zeros_like(X)
        dWx = np.zeros_like(Wx)
        dWh = np.zeros_like(Wh)
        db = np.zeros(4 * dh)
        da = np.empty((B, 4 * dh))
        dh_next = np.zeros((B, dh))
        dc_next = np.zeros((B, dh))
        WxT = np.ascontiguousarray(Wx.T)
        WhT = np.ascontiguousarray(Wh.T)
        for t in range(T - 1, -1, -1):
            n = active[t]
            if n == 0:
                continue
            for r in range(n):
                for j in range(dh):
                    i = G[t, r, j]
                    f = G[t, r, dh + j]
                    o = G[t, r, 2 * dh + j]
                    g = G[t, r, 3 * dh + j]
                    tc = TC[t, r, j]
                    c_prev = C[t - 1, r, j] if t > 0 else c0[r, j]
                    dht = dH[t, r, j] + dh_next[r, j]
                    dc = dc_next[r, j] + dht * o * (1.0 - tc * tc)
                    da[r, j] = dc * g * i * (1.0 - i)
                    da[r, dh + j] = dc * c_prev * f * (1.0 - f)
                    da[r, 2 * dh + j] = dht * tc * o * (1.0 - o)
                    da[r, 3 * dh + j] = dc * i * (1.0 - g * g)
                    dc_next[r, j] = dc * f
            d = da[:n]
            h_prev = H[t - 1, :n] if t > 0 else h0[:n]
            dWx += np.dot(np.ascontiguousarray(X[t, :n].T), d)
            dWh += np.dot(np.ascontiguousarray(h_prev.T), d)
            for r in range(n):
                for j in range(4 * dh):
                    db[j] += d[r, j]
            dX[t, :n] = np.dot(d, WxT)
            dh_next[:n] = np.dot(d, WhT)
        return dX, dWx, dWh, db, dh_next, dc_next


_IMPLS = {
    "numpy": {
        "prefix_mean": prefix_mean_np,
        "prefix_mean_backward": prefix_mean_backward_np,
        "lstm_forward": lstm_forward_np,
        "lstm_backward": lstm_backward_np,
    }
}
if HAVE_NUMBA:
    _IMPLS["numba"] = {
        "prefix_mean": prefix_mean_nb,
        "prefix_mean_backward": prefix_mean_backward_nb,
        "lstm_forward": lstm_forward_nb,
        "lstm_backward": lstm_backward_nb,
    }

_active_backend = "numpy"


def set_backend(name: str) -> None:
    """Select the kernel implementation used by the public wrappers."""
    global _active_backend
    if name not in BACKENDS:
        raise ValueError(f"unknown backend {name!r}; expected one of {BACKENDS}")
    if name == "numba" and not HAVE_NUMBA:
        raise RuntimeError("numba backend requested but numba is not importable")
    _active_backend = name


def get_backend() -> str:
    return _active_backend


def _initial_backend() -> str:
    requested = os.environ.get("EARLYPRED_BACKEND", "").strip().lower()
    if requested:
        return requested
    return "numba" if HAVE_NUMBA else "numpy"


set_backend(_initial_backend())


def _c(a: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(a, dtype=np.float64)


def prefix_mean(F: np.ndarray) -> np.ndarray:
    """Running mean along axis 0 of a ``(T, B, d)`` array."""
    return _IMPLS[_active_backend]["prefix_mean"](_c(F))


def prefix_mean_backward(dM: np.ndarray) -> np.ndarray:
    return _IMPLS[_active_backend]["prefix_mean_backward"](_c(dM))


def _active(active, T: int, B: int) -> np.ndarray:
    if active is None:
        return np.full(T, B, dtype=np.int64)
    active = np.ascontiguousarray(active, dtype=np.int64)
    if active.shape != (T,) or np.any(np.diff(active) > 0) or active.max(initial=0) > B:
        raise ValueError("active row counts must be non-increasing and bounded by the batch size")
    return active


def lstm_forward(X, Wx, Wh, b, h0, c0, active=None):
    """Unroll one LSTM layer over ``X`` of shape ``(T, B, d_in)``.

    ``active[t]`` is the number of leading rows still running at step ``t``
    (rows sorted by decreasing length); the remaining rows are left at zero.
    Returns hidden states ``H``, cell states ``C``, ``tanh(C)`` (all
    ``(T, B, d_h)``) and post-activation gates ``G`` of shape ``(T, B, 4 d_h)``.
    """
    X = _c(X)
    act = _active(active, X.shape[0], X.shape[1])
    return _IMPLS[_active_backend]["lstm_forward"](X, _c(Wx), _c(Wh), _c(b), _c(h0), _c(c0), act)


def lstm_backward(dH, X, Wx, Wh, H, C, TC, G, h0, c0, active=None):
    """BPTT for one layer; ``dH`` is the loss gradient w.r.t. every hidden state.

    Returns ``(dX, dWx, dWh, db, dh0, dc0)``.
    """
    X = _c(X)
    act = _active(active, X.shape[0], X.shape[1])
    return _IMPLS[_active_backend]["lstm_backward"](
        _c(dH), X, _c(Wx), _c(Wh), _c(H), _c(C), _c(TC), _c(G), _c(h0), _c(c0), act
    )
