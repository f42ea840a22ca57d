"""Small reverse-mode engine for residual MLPs, plus Adam and EMA.

Tensors are plain float64 numpy arrays. A network is a chain of dense layers;
layer ``k`` maps ``h_k -> h_{k+1} = act_k(h_k @ W_k.T + b_k)`` and a skip
``(i, j)`` adds ``h_i`` to ``h_{j+1}``, so a residual block is the pair of
layers ``i..j`` plus the skip around them.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NumericError, ShapeError

ACTIVATIONS = ("silu", "relu", "tanh", "square", "identity")


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def activate(name: str, x: np.ndarray) -> np.ndarray:
    if name == "silu":
        return x * _sigmoid(x)
    if name == "relu":
        return np.maximum(x, 0.0)
    if name == "tanh":
        return np.tanh(x)
    if name == "square":
        return x * x
    if name == "identity":
        return x
    raise ValueError(f"unknown activation {name!r}")


def activate_grad(name: str, x: np.ndarray) -> np.ndarray:
    """Elementwise derivative of the activation at pre-activation ``x``."""
    if name == "silu":
        s = _sigmoid(x)
        return s * (1.0 + x * (1.0 - s))
    if name == "relu":
        return (x > 0).astype(x.dtype)
    if name == "tanh":
        return 1.0 - np.tanh(x) ** 2
    if name == "square":
        return 2.0 * x
    if name == "identity":
        return np.ones_like(x)
    raise ValueError(f"unknown activation {name!r}")


@dataclass
class MlpParams:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    acts: list[bool]
    activation: str = "silu"
    skips: list[tuple[int, int]] = field(default_factory=list)

    def __post_init__(self):
        if not (len(self.weights) == len(self.biases) == len(self.acts)):
            raise ShapeError("weights, biases and acts must have equal length")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ShapeError(f"layer {k}: weight {w.shape} / bias {b.shape}")
            if k > 0 and self.weights[k - 1].shape[0] != w.shape[1]:
                raise ShapeError(f"layer {k}: in-dim {w.shape[1]} != previous out-dim {self.weights[k - 1].shape[0]}")
        for i, j in self.skips:
            if not 0 <= i <= j < len(self.weights):
                raise ShapeError(f"bad skip {(i, j)}")
            if self.weights[i].shape[1] != self.weights[j].shape[0]:
                raise ShapeError(f"skip {(i, j)} joins dims {self.weights[i].shape[1]} and {self.weights[j].shape[0]}")

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[0]

    def arrays(self) -> list[np.ndarray]:
        """Flat parameter list ``[W0, b0, W1, b1, ...]`` (views, not copies)."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def copy(self) -> "MlpParams":
        return MlpParams([w.copy() for w in self.weights], [b.copy() for b in self.biases],
                         list(self.acts), self.activation, list(self.skips))

    def zeros_like(self) -> list[np.ndarray]:
        return [np.zeros_like(a) for a in self.arrays()]


def init_mlp(dims, rng, activation="silu", acts=None, skips=()) -> MlpParams:
    """Glorot-uniform weights, zero biases; hidden layers activated, last linear."""
    dims = list(dims)
    n = len(dims) - 1
    if n < 1:
        raise ShapeError("need at least one layer")
    weights, biases = [], []
    for k in range(n):
        fan_in, fan_out = dims[k], dims[k + 1]
        lim = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-lim, lim, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    if acts is None:
        acts = [True] * (n - 1) + [False]
    return MlpParams(weights, biases, list(acts), activation, list(skips))


def init_resmlp(in_dim, out_dim, width, n_blocks, rng, activation="silu") -> MlpParams:
    """Input projection, ``n_blocks`` residual blocks ``h + W2 act(W1 h + b1) + b2``, output projection."""
    dims = [in_dim, width] + [width] * (2 * n_blocks) + [out_dim]
    acts = [True] + [True, False] * n_blocks + [False]
    skips = [(1 + 2 * k, 2 + 2 * k) for k in range(n_blocks)]
    return init_mlp(dims, rng, activation, acts, skips)


def _check_input(params: MlpParams, x: np.ndarray):
    if x.shape[-1] != params.in_dim:
        raise ShapeError(f"input last dim {x.shape[-1]} != network in-dim {params.in_dim}")


def mlp_forward(params: MlpParams, x: np.ndarray, return_cache: bool = False):
    """Evaluate the network on ``x`` of shape ``(in,)`` or ``(batch, in)``."""
    x = np.asarray(x, dtype=np.float64)
    _check_input(params, x)
    skip_into = {j: i for i, j in params.skips}
    hs = [x]
    pres = []
    h = x
    for k, (w, b) in enumerate(zip(params.weights, params.biases)):
        pre = h @ w.T + b
        pres.append(pre)
        h = activate(params.activation, pre) if params.acts[k] else pre
        if k in skip_into:
            h = h + hs[skip_into[k]]
        hs.append(h)
    if return_cache:
        return h, (hs, pres)
    return h


def mlp_backward(params: MlpParams, x: np.ndarray, upstream: np.ndarray, cache=None):
    """Gradients of ``sum(mlp_forward(x) * upstream)``.

    Returns ``(param_grads, input_grad)`` where ``param_grads`` follows the
    ``params.arrays()`` ordering and batch contributions are summed.
    """
    x = np.asarray(x, dtype=np.float64)
    if cache is None:
        out, cache = mlp_forward(params, x, return_cache=True)
    else:
        out = cache[0][-1]
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != out.shape:
        raise ShapeError(f"upstream {upstream.shape} != output {out.shape}")
    hs, pres = cache
    n = len(params.weights)
    # gradient w.r.t. each h_k; skips route extra gradient into their source
    g_h = [None] * (n + 1)
    g_h[n] = upstream
    skip_from = {j: i for i, j in params.skips}
    grads: list[np.ndarray] = [None] * (2 * n)
    for k in range(n - 1, -1, -1):
        g = g_h[k + 1]
        if k in skip_from:
            i = skip_from[k]
            g_h[i] = g if g_h[i] is None else g_h[i] + g
        if params.acts[k]:
            g = g * activate_grad(params.activation, pres[k])
        h_in = hs[k]
        if g.ndim == 1:
            grads[2 * k] = np.outer(g, h_in)
            grads[2 * k + 1] = g.copy()
        else:
            g2 = g.reshape(-1, g.shape[-1])
            grads[2 * k] = g2.T @ h_in.reshape(-1, h_in.shape[-1])
            grads[2 * k + 1] = g2.sum(axis=0)
        back = g @ params.weights[k]
        g_h[k] = back if g_h[k] is None else g_h[k] + back
    return grads, g_h[0]


def finite_diff_check(params: MlpParams, x: np.ndarray, h: float = 1e-5, upstream=None) -> float:
    """Max relative error between analytic and central-difference parameter grads.

    The objective is ``sum(f(x) * upstream)`` (upstream defaults to ones).
    """
    if h <= 0:
        raise ValueError("h must be positive")
    x = np.asarray(x, dtype=np.float64)
    out = mlp_forward(params, x)
    if upstream is None:
        upstream = np.ones_like(out)
    analytic, _ = mlp_backward(params, x, upstream)
    worst = 0.0
    for arr, g in zip(params.arrays(), analytic):
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + h
            fp = float(np.sum(mlp_forward(params, x) * upstream))
            flat[idx] = orig - h
            fm = float(np.sum(mlp_forward(params, x) * upstream))
            flat[idx] = orig
            num = (fp - fm) / (2.0 * h)
            err = abs(gflat[idx] - num) / (abs(gflat[idx]) + 1e-12)
            worst = max(worst, err)
    return worst


@dataclass
class AdamState:
    first_moment: list[np.ndarray]
    second_moment: list[np.ndarray]
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0

    @classmethod
    def for_params(cls, arrays, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8) -> "AdamState":
        return cls([np.zeros_like(a) for a in arrays], [np.zeros_like(a) for a in arrays], lr, beta1, beta2, eps)


def adam_step(state: AdamState, arrays: list[np.ndarray], grads: list[np.ndarray]) -> None:
    """Bias-corrected Adam; updates ``arrays`` and ``state`` in place."""
    if len(arrays) != len(grads) or len(arrays) != len(state.first_moment):
        raise ShapeError("parameter, gradient and moment lists differ in length")
    state.step_count += 1
    t = state.step_count
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for p, g, m, v in zip(arrays, grads, state.first_moment, state.second_moment):
        if p.shape != g.shape:
            raise ShapeError(f"grad shape {g.shape} != param shape {p.shape}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


@dataclass
class EmaState:
    shadow: list[np.ndarray]
    momentum: float = 0.999

    def __post_init__(self):
        if not 0.0 < self.momentum < 1.0:
            raise ValueError("EMA momentum must lie in (0, 1)")

    @classmethod
    def for_params(cls, arrays, momentum=0.999) -> "EmaState":
        return cls([a.copy() for a in arrays], momentum)


def ema_update(ema: EmaState, arrays: list[np.ndarray]) -> EmaState:
    m = ema.momentum
    for s, p in zip(ema.shadow, arrays):
        if s.shape != p.shape:
            raise ShapeError(f"shadow {s.shape} != param {p.shape}")
        # m*s + (1-m)*p, written so that p == s leaves s bit-identical
        s += (1.0 - m) * (p - s)
    return ema


def global_norm(grads) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))


def require_finite(value, what: str):
    if not np.all(np.isfinite(value)):
        raise NumericError(f"non-finite {what}")
    return value
