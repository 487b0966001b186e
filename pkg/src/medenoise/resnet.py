"""Small residual convolutional network that predicts the noise in a patch.

Layer 1 is conv + ReLU, layers 2..t-1 are conv + batch norm + ReLU and layer
t is a single-output-channel conv. The output of every even layer ``l`` is
summed with the input of layer ``l - 1`` (identity when the channel counts
agree, a bias-free 1x1 projection otherwise), so for even ``t`` the last skip
lands on the network output.

All tensors are laid out ``(batch, channels, x, y, z)``; 2D patches simply
have ``z = 1`` and a kernel depth of 1. Convolutions use zero "same" padding
so every layer keeps the patch shape.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from .core import DenoiseError, as_3d, split_rng

BN_EPS = 1e-5
BN_MOMENTUM = 0.9
# untrained nets should predict a near-zero residue
OUTPUT_GAIN = 0.01


class ShapeMismatch(DenoiseError):
    pass


class NonFiniteLoss(DenoiseError):
    pass


@dataclass(frozen=True)
class NetSpec:
    depth: int = 14
    filters: int = 84
    kernel: Tuple[int, int, int] = (3, 3, 1)
    skip_period: int = 2

    def __post_init__(self):
        object.__setattr__(self, "kernel", as_3d(self.kernel))
        if self.depth < 3:
            raise ValueError(f"depth must be >= 3, got {self.depth}")
        if self.filters < 1 or min(self.kernel) < 1:
            raise ValueError("filters and kernel sizes must be positive")
        if self.skip_period != 2:
            raise ValueError("only skips between alternate layers (period 2) are supported")

    def in_channels(self, layer: int) -> int:
        return 1 if layer == 1 else self.filters

    def out_channels(self, layer: int) -> int:
        return 1 if layer == self.depth else self.filters

    def skips(self) -> List[Tuple[int, int, int]]:
        """``(layer, c_in, c_out)``: the input of ``layer - 1`` is added to the output of ``layer``."""
        return [(l, self.in_channels(l - 1), self.out_channels(l))
                for l in range(2, self.depth + 1, 2)]

    def param_shapes(self) -> "OrderedDict[str, tuple]":
        K = self.kernel
        shapes = OrderedDict()
        for l in range(1, self.depth + 1):
            shapes[f"conv{l}.w"] = (self.out_channels(l), self.in_channels(l)) + K
            shapes[f"conv{l}.b"] = (self.out_channels(l),)
            if 1 < l < self.depth:
                shapes[f"bn{l}.gamma"] = (self.filters,)
                shapes[f"bn{l}.beta"] = (self.filters,)
        for l, cin, cout in self.skips():
            if cin != cout:
                shapes[f"skip{l}.w"] = (cout, cin)
        return shapes

    def buffer_shapes(self) -> "OrderedDict[str, tuple]":
        shapes = OrderedDict()
        for l in range(2, self.depth):
            shapes[f"bn{l}.mean"] = (self.filters,)
            shapes[f"bn{l}.var"] = (self.filters,)
        return shapes

    def n_params(self) -> int:
        """Closed-form trainable parameter count."""
        F, t = self.filters, self.depth
        K = int(np.prod(self.kernel))
        n = (F * K + F) + (t - 2) * (F * F * K + F + 2 * F) + (F * K + 1)
        n += F  # 1 -> F projection into layer 2's output
        if t % 2 == 0:
            n += F  # F -> 1 projection onto the output
        return n


@dataclass(eq=False)
class NetParams:
    spec: NetSpec
    params: "OrderedDict[str, np.ndarray]"
    buffers: "OrderedDict[str, np.ndarray]"

    def copy(self) -> "NetParams":
        return NetParams(self.spec, OrderedDict((k, v.copy()) for k, v in self.params.items()),
                         OrderedDict((k, v.copy()) for k, v in self.buffers.items()))

    def flat(self) -> np.ndarray:
        return np.concatenate([v.ravel() for v in self.params.values()])


def init_std(spec: NetSpec, name: str, shape) -> float:
    """Target weight std: ``gain * sqrt(2 / fan_in)``.

    The gain is :data:`OUTPUT_GAIN` for weights that write to the network
    output (last conv, last skip projection) and 1 elsewhere.
    """
    fan_in = int(np.prod(shape[1:]))
    gain = OUTPUT_GAIN if name in (f"conv{spec.depth}.w", f"skip{spec.depth}.w") else 1.0
    return gain * np.sqrt(2.0 / fan_in)


def net_init(spec: NetSpec, seed: int) -> NetParams:
    """Uniform fan-in-scaled weights (see :func:`init_std`), zero biases, unit BN
    scale, zero BN shift, running statistics (0, 1)."""
    rng = split_rng(seed, 0)
    params = OrderedDict()
    for name, shape in spec.param_shapes().items():
        if name.endswith(".w"):
            bound = np.sqrt(3.0) * init_std(spec, name, shape)
            params[name] = rng.uniform(-bound, bound, size=shape)
        elif name.endswith("gamma"):
            params[name] = np.ones(shape)
        else:
            params[name] = np.zeros(shape)
    buffers = OrderedDict((n, np.zeros(s) if n.endswith("mean") else np.ones(s))
                          for n, s in spec.buffer_shapes().items())
    return NetParams(spec, params, buffers)


# --- layer primitives ----------------------------------------------------------------------

def _pads(kernel):
    return [((k - 1) // 2, k - 1 - (k - 1) // 2) for k in kernel]


def im2col(x: np.ndarray, kernel) -> np.ndarray:
    """``(B, C, X, Y, Z)`` -> ``(B*X*Y*Z, C*kx*ky*kz)`` with zero "same" padding."""
    B, C, X, Y, Z = x.shape
    xp = np.pad(x, [(0, 0), (0, 0)] + _pads(kernel))
    win = np.lib.stride_tricks.sliding_window_view(xp, kernel, axis=(2, 3, 4))
    return win.transpose(0, 2, 3, 4, 1, 5, 6, 7).reshape(B * X * Y * Z, -1)


def col2im(cols: np.ndarray, shape, kernel) -> np.ndarray:
    B, C, X, Y, Z = shape
    kx, ky, kz = kernel
    cols = cols.reshape(B, X, Y, Z, C, kx, ky, kz)
    (ax, _), (ay, _), (az, _) = _pads(kernel)
    xp = np.zeros((B, C, X + kx - 1, Y + ky - 1, Z + kz - 1))
    for i in range(kx):
        for j in range(ky):
            for l in range(kz):
                xp[:, :, i:i + X, j:j + Y, l:l + Z] += cols[..., i, j, l].transpose(0, 4, 1, 2, 3)
    return xp[:, :, ax:ax + X, ay:ay + Y, az:az + Z]


def conv_forward(x, w, b):
    B, C, X, Y, Z = x.shape
    F = w.shape[0]
    kernel = w.shape[2:]
    cols = im2col(x, kernel)
    out = cols @ w.reshape(F, -1).T + b
    return out.reshape(B, X, Y, Z, F).transpose(0, 4, 1, 2, 3), cols


def conv_backward(g, x_shape, cols, w):
    F = w.shape[0]
    gf = g.transpose(0, 2, 3, 4, 1).reshape(-1, F)
    dw = (gf.T @ cols).reshape(w.shape)
    db = gf.sum(axis=0)
    dx = col2im(gf @ w.reshape(F, -1), x_shape, w.shape[2:])
    return dx, dw, db


def bn_forward_train(h, gamma, beta):
    axes = (0, 2, 3, 4)
    mean = h.mean(axis=axes)
    var = h.var(axis=axes)
    inv_std = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (h - mean[None, :, None, None, None]) * inv_std[None, :, None, None, None]
    out = gamma[None, :, None, None, None] * xhat + beta[None, :, None, None, None]
    return out, (xhat, inv_std), mean, var


def bn_forward_eval(h, gamma, beta, mean, var):
    inv_std = 1.0 / np.sqrt(var + BN_EPS)
    scale = (gamma * inv_std)[None, :, None, None, None]
    return (h - mean[None, :, None, None, None]) * scale + beta[None, :, None, None, None]


def bn_backward(g, cache, gamma):
    xhat, inv_std = cache
    axes = (0, 2, 3, 4)
    n = g.size // g.shape[1]
    dgamma = np.sum(g * xhat, axis=axes)
    dbeta = np.sum(g, axis=axes)
    dxhat = g * gamma[None, :, None, None, None]
    dx = (n * dxhat - dxhat.sum(axis=axes)[None, :, None, None, None]
          - xhat * np.sum(dxhat * xhat, axis=axes)[None, :, None, None, None])
    dx *= (inv_std / n)[None, :, None, None, None]
    return dx, dgamma, dbeta


def project(x, w):
    return np.einsum("oc,bcxyz->boxyz", w, x)


def project_backward(g, x, w):
    return np.einsum("oc,boxyz->bcxyz", w, g), np.einsum("boxyz,bcxyz->oc", g, x)


# --- network -------------------------------------------------------------------------------

def _as_batch(spec: NetSpec, patches) -> Tuple[np.ndarray, bool]:
    x = np.asarray(patches, dtype=np.float64)
    single = x.ndim == 3
    if single:
        x = x[None]
    if x.ndim != 4:
        raise ShapeMismatch(f"expected (B, X, Y, Z) or (X, Y, Z) patches, got {x.shape}")
    return x[:, None], single


def forward(net: NetParams, patches, mode: str = "eval"):
    """Predict the residue of each patch.

    Returns ``(residue, cache)``; ``cache`` is ``None`` in eval mode. In train
    mode the cache also carries the momentum-updated BN running statistics
    under ``"running"``; ``net`` itself is never modified.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    spec, p = net.spec, net.params
    x, single = _as_batch(spec, patches)
    train = mode == "train"
    z = {1: x}
    layers = {}
    running = {}
    for l in range(1, spec.depth + 1):
        h, cols = conv_forward(z[l], p[f"conv{l}.w"], p[f"conv{l}.b"])
        rec = {"cols": cols, "in_shape": z[l].shape}
        if 1 < l < spec.depth:
            g, b = p[f"bn{l}.gamma"], p[f"bn{l}.beta"]
            if train:
                h, rec["bn"], mean, var = bn_forward_train(h, g, b)
                n = h.size // h.shape[1]
                unbiased = var * n / max(n - 1, 1)
                running[f"bn{l}.mean"] = BN_MOMENTUM * net.buffers[f"bn{l}.mean"] + (1 - BN_MOMENTUM) * mean
                running[f"bn{l}.var"] = BN_MOMENTUM * net.buffers[f"bn{l}.var"] + (1 - BN_MOMENTUM) * unbiased
            else:
                h = bn_forward_eval(h, g, b, net.buffers[f"bn{l}.mean"], net.buffers[f"bn{l}.var"])
        if l < spec.depth:
            rec["mask"] = h > 0
            h = h * rec["mask"]
        if l % 2 == 0:
            src = z[l - 1]
            key = f"skip{l}.w"
            h = h + (project(src, p[key]) if key in p else src)
        z[l + 1] = h
        if train:
            layers[l] = rec
    out = z[spec.depth + 1][:, 0]
    if single:
        out = out[0]
    if not train:
        return out, None
    return out, {"z": z, "layers": layers, "running": running, "single": single}


def backward(net: NetParams, cache, grad_out):
    """Exact gradients of a train-mode :func:`forward`.

    Returns ``(param_grads, input_grad)`` with ``param_grads`` keyed like
    ``net.params``.
    """
    spec, p = net.spec, net.params
    z, layers = cache["z"], cache["layers"]
    g_out = np.asarray(grad_out, dtype=np.float64)
    if cache["single"]:
        g_out = g_out[None]
    gz = {l: np.zeros_like(z[l]) for l in z}
    gz[spec.depth + 1] = g_out[:, None].copy()
    grads = OrderedDict((k, np.zeros_like(v)) for k, v in p.items())
    for l in range(spec.depth, 0, -1):
        g = gz[l + 1]
        if l % 2 == 0:
            key = f"skip{l}.w"
            if key in p:
                dsrc, dw = project_backward(g, z[l - 1], p[key])
                grads[key] += dw
                gz[l - 1] += dsrc
            else:
                gz[l - 1] += g
        rec = layers[l]
        if l < spec.depth:
            g = g * rec["mask"]
        if 1 < l < spec.depth:
            g, dgamma, dbeta = bn_backward(g, rec["bn"], p[f"bn{l}.gamma"])
            grads[f"bn{l}.gamma"] += dgamma
            grads[f"bn{l}.beta"] += dbeta
        dx, dw, db = conv_backward(g, rec["in_shape"], rec["cols"], p[f"conv{l}.w"])
        grads[f"conv{l}.w"] += dw
        grads[f"conv{l}.b"] += db
        gz[l] += dx
    dinput = gz[1][:, 0]
    if cache["single"]:
        dinput = dinput[0]
    return grads, dinput


def predict(net: NetParams, patches, batch: int = 64) -> np.ndarray:
    """Eval-mode forward over many patches in fixed-size chunks."""
    x = np.asarray(patches, dtype=np.float64)
    out = np.empty_like(x)
    for lo in range(0, len(x), batch):
        out[lo:lo + batch] = forward(net, x[lo:lo + batch], "eval")[0]
    return out


# --- training ------------------------------------------------------------------------------

@dataclass
class TrainState:
    """Adam moments, step counter and per-epoch mean losses."""

    lr: float = 1e-3
    batch_size: int = 32
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    step: int = 0
    epoch: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    losses: List[float] = field(default_factory=list)


def mse_loss(pred, target):
    diff = pred - target
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size


def adam_step(net: NetParams, state: TrainState, grads) -> None:
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, g in grads.items():
        m = state.m.setdefault(name, np.zeros_like(g))
        v = state.v.setdefault(name, np.zeros_like(g))
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        net.params[name] -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.adam_eps)


def train_epoch(net: NetParams, state: TrainState, patches, targets, seed: int = 0):
    """One pass of minibatch Adam on the mean squared error.

    Minibatch order comes from ``split_rng(seed, state.epoch)``. ``net`` and
    ``state`` are updated in place and also returned with the epoch-mean loss.
    """
    x = np.asarray(patches, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    if x.shape != y.shape:
        raise ShapeMismatch(f"patches {x.shape} and targets {y.shape} differ")
    order = split_rng(seed, state.epoch).permutation(len(x))
    losses = []
    for lo in range(0, len(x), state.batch_size):
        idx = order[lo:lo + state.batch_size]
        pred, cache = forward(net, x[idx], "train")
        loss, grad = mse_loss(pred, y[idx])
        if not np.isfinite(loss):
            raise NonFiniteLoss(f"loss became {loss} at step {state.step} (epoch {state.epoch})")
        grads, _ = backward(net, cache, grad)
        adam_step(net, state, grads)
        net.buffers.update(cache["running"])
        losses.append((loss, len(idx)))
    mean = float(sum(l * n for l, n in losses) / len(x))
    state.losses.append(mean)
    state.epoch += 1
    return net, state, mean
