"""Hot numeric kernels with two interchangeable backends.

The transformer forward/backward spends its non-BLAS time in fused
elementwise/reduction ops: layer norm, causal softmax, GELU and
cross-entropy, each with its backward. Every kernel exists twice:

  * ``numba`` — single-threaded ``@njit`` loops (no ``parallel``, no
    ``fastmath``, so results are deterministic run to run)
  * ``numpy`` — vectorized fallback, used when numba is unavailable or
    when the env var ``PRUNESEARCH_NUMBA`` is set to ``0``/``off``/``false``

Matrix products stay in numpy/BLAS on both paths; numba does not beat a
tuned dgemm. All kernels take C-contiguous float64 arrays.

``benchmarks/bench_kernels.py`` times the two backends side by side.
"""

from __future__ import annotations

import math
import os

import numpy as np

GELU_C0 = math.sqrt(2.0 / math.pi)
GELU_C1 = 0.044715


# ---------------------------------------------------------------------------
# numpy backend
# ---------------------------------------------------------------------------


def _np_layernorm_fwd(x, gamma, beta, eps):
    mean = x.mean(axis=1)
    xc = x - mean[:, None]
    rstd = 1.0 / np.sqrt((xc * xc).mean(axis=1) + eps)
    y = xc * rstd[:, None] * gamma + beta
    return y, mean, rstd


def _np_layernorm_bwd(dy, x, gamma, mean, rstd):
    xhat = (x - mean[:, None]) * rstd[:, None]
    dgamma = (dy * xhat).sum(axis=0)
    dbeta = dy.sum(axis=0)
    dxhat = dy * gamma
    m1 = dxhat.mean(axis=1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=1, keepdims=True)
    dx = rstd[:, None] * (dxhat - m1 - xhat * m2)
    return dx, dgamma, dbeta


def _np_gelu_fwd(x):
    inner = GELU_C0 * (x + GELU_C1 * x * x * x)
    return 0.5 * x * (1.0 + np.tanh(inner))


def _np_gelu_bwd(dy, x):
    inner = GELU_C0 * (x + GELU_C1 * x * x * x)
    t = np.tanh(inner)
    sech2 = 1.0 - t * t
    dinner = GELU_C0 * (1.0 + 3.0 * GELU_C1 * x * x)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * sech2 * dinner)


def _np_causal_softmax_fwd(scores):
    m, t, _ = scores.shape
    mask = np.triu(np.ones((t, t), dtype=bool), k=1)
    masked = np.where(mask, -np.inf, scores)
    mx = masked.max(axis=2, keepdims=True)
    e = np.exp(masked - mx)
    return e / e.sum(axis=2, keepdims=True)


def _np_causal_softmax_bwd(dprobs, probs):
    inner = (dprobs * probs).sum(axis=2, keepdims=True)
    return probs * (dprobs - inner)


def _np_cross_entropy_fwd(logits, targets):
    n = logits.shape[0]
    mx = logits.max(axis=1, keepdims=True)
    e = np.exp(logits - mx)
    z = e.sum(axis=1)
    lse = mx[:, 0] + np.log(z)
    nll = lse - logits[np.arange(n), targets]
    probs = e / z[:, None]
    return nll, probs


_NUMPY = {
    "layernorm_fwd": _np_layernorm_fwd,
    "layernorm_bwd": _np_layernorm_bwd,
    "gelu_fwd": _np_gelu_fwd,
    "gelu_bwd": _np_gelu_bwd,
    "causal_softmax_fwd": _np_causal_softmax_fwd,
    "causal_softmax_bwd": _np_causal_softmax_bwd,
    "cross_entropy_fwd": _np_cross_entropy_fwd,
}


# ---------------------------------------------------------------------------
# numba backend
# ---------------------------------------------------------------------------

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    njit = None
    HAVE_NUMBA = False

if HAVE_NUMBA:

    @njit(cache=True)
    def _nb_layernorm_fwd(x, gamma, beta, eps):
        n, d = x.shape
        y = np.empty_like(x)
        mean = np.empty(n)
        rstd = np.empty(n)
        for i in range(n):
            m = 0.0
            for j in range(d):
                m += x[i, j]
            m /= d
            v = 0.0
            for j in range(d):
                c = x[i, j] - m
                v += c * c
            v /= d
            r = 1.0 / math.sqrt(v + eps)
            mean[i] = m
            rstd[i] = r
            for j in range(d):
                y[i, j] = (x[i, j] - m) * r * gamma[j] + beta[j]
        return y, mean, rstd

    @njit(cache=True)
    def _nb_layernorm_bwd(dy, x, gamma, mean, rstd):
        n, d = x.shape
        dx = np.empty_like(x)
        dgamma = np.zeros(d)
        dbeta = np.zeros(d)
        for i in range(n):
            m = mean[i]
            r = rstd[i]
            s1 = 0.0
            s2 = 0.0
            for j in range(d):
                xh = (x[i, j] - m) * r
                dxh = dy[i, j] * gamma[j]
                dgamma[j] += dy[i, j] * xh
                dbeta[j] += dy[i, j]
                s1 += dxh
                s2 += dxh * xh
            s1 /= d
            s2 /= d
            for j in range(d):
                xh = (x[i, j] - m) * r
                dxh = dy[i, j] * gamma[j]
                dx[i, j] = r * (dxh - s1 - xh * s2)
        return dx, dgamma, dbeta

    @njit(cache=True)
    def _nb_gelu_fwd(x):
        flat = x.ravel()
        out = np.empty_like(flat)
        for i in range(flat.shape[0]):
            v = flat[i]
            inner = GELU_C0 * (v + GELU_C1 * v * v * v)
            out[i] = 0.5 * v * (1.0 + math.tanh(inner))
        return out.reshape(x.shape)

    @njit(cache=True)
    def _nb_gelu_bwd(dy, x):
        fx = x.ravel()
        fdy = dy.ravel()
        out = np.empty_like(fx)
        for i in range(fx.shape[0]):
            v = fx[i]
            inner = GELU_C0 * (v + GELU_C1 * v * v * v)
            t = math.tanh(inner)
            sech2 = 1.0 - t * t
            dinner = GELU_C0 * (1.0 + 3.0 * GELU_C1 * v * v)
            out[i] = fdy[i] * (0.5 * (1.0 + t) + 0.5 * v * sech2 * dinner)
        return out.reshape(x.shape)

    @njit(cache=True)
    def _nb_causal_softmax_fwd(scores):
        m, t, _ = scores.shape
        probs = np.zeros_like(scores)
        for b in range(m):
            for i in range(t):
                mx = scores[b, i, 0]
                for j in range(1, i + 1):
                    if scores[b, i, j] > mx:
                        mx = scores[b, i, j]
                z = 0.0
                for j in range(i + 1):
                    e = math.exp(scores[b, i, j] - mx)
                    probs[b, i, j] = e
                    z += e
                for j in range(i + 1):
                    probs[b, i, j] /= z
        return probs

    @njit(cache=True)
    def _nb_causal_softmax_bwd(dprobs, probs):
        m, t, _ = probs.shape
        ds = np.zeros_like(probs)
        for b in range(m):
            for i in range(t):
                inner = 0.0
                for j in range(i + 1):
                    inner += dprobs[b, i, j] * probs[b, i, j]
                for j in range(i + 1):
                    ds[b, i, j] = probs[b, i, j] * (dprobs[b, i, j] - inner)
        return ds

    @njit(cache=True)
    def _nb_cross_entropy_fwd(logits, targets):
        n, v = logits.shape
        nll = np.empty(n)
        probs = np.empty_like(logits)
        for i in range(n):
            mx = logits[i, 0]
            for j in range(1, v):
                if logits[i, j] > mx:
                    mx = logits[i, j]
            z = 0.0
            for j in range(v):
                e = math.exp(logits[i, j] - mx)
                probs[i, j] = e
                z += e
            for j in range(v):
                probs[i, j] /= z
            nll[i] = mx + math.log(z) - logits[i, targets[i]]
        return nll, probs

    _NUMBA = {
        "layernorm_fwd": _nb_layernorm_fwd,
        "layernorm_bwd": _nb_layernorm_bwd,
        "gelu_fwd": _nb_gelu_fwd,
        "gelu_bwd": _nb_gelu_bwd,
        "causal_softmax_fwd": _nb_causal_softmax_fwd,
        "causal_softmax_bwd": _nb_causal_softmax_bwd,
        "cross_entropy_fwd": _nb_cross_entropy_fwd,
    }
else:
    _NUMBA = None

BACKENDS = {"numpy": _NUMPY}
if _NUMBA is not None:
    BACKENDS["numba"] = _NUMBA


def _default_backend() -> str:
    flag = os.environ.get("PRUNESEARCH_NUMBA", "").strip().lower()
    if flag in ("0", "off", "false", "no"):
        return "numpy"
    return "numba" if "numba" in BACKENDS else "numpy"


BACKEND = _default_backend()


def get_backend(name: str) -> dict:
    """Return the kernel table for an explicit backend name."""
    if name not in BACKENDS:
        raise ValueError(f"unknown kernel backend {name!r}; have {sorted(BACKENDS)}")
    return BACKENDS[name]


def set_backend(name: str) -> None:
    """Rebind the module-level kernels to the named backend."""
    global BACKEND, layernorm_fwd, layernorm_bwd, gelu_fwd, gelu_bwd
    global causal_softmax_fwd, causal_softmax_bwd, cross_entropy_fwd
    table = get_backend(name)
    BACKEND = name
    layernorm_fwd = table["layernorm_fwd"]
    layernorm_bwd = table["layernorm_bwd"]
    gelu_fwd = table["gelu_fwd"]
    gelu_bwd = table["gelu_bwd"]
    causal_softmax_fwd = table["causal_softmax_fwd"]
    causal_softmax_bwd = table["causal_softmax_bwd"]
    cross_entropy_fwd = table["cross_entropy_fwd"]


set_backend(BACKEND)
