"""Reverse-mode gradient engine for sequential layer stacks.

Supports exactly the layers the selection agent, the toy recognizer, and the
denoising autoencoder need: affine, strided 2-D convolution, per-channel
PReLU, sigmoid, flatten, and L2 normalization. Inputs are single examples
(vectors or channel-first maps); batching is done by looping at this scale.
A forward pass returns a one-shot tape; backward consumes it and yields both
parameter gradients and the input gradient, which is what the white-box
attacks differentiate through.
"""

from __future__ import annotations

import hashlib
import warnings
from dataclasses import dataclass, field

import numpy as np

from pinact import linalg

# --- layer and network specs --------------------------------------------------


@dataclass(frozen=True)
class Affine:
    in_dim: int
    out_dim: int
    kind: str = field(default="affine", repr=False)


@dataclass(frozen=True)
class Conv2d:
    in_ch: int
    out_ch: int
    kernel: int
    stride: int
    padding: int = 1
    kind: str = field(default="conv2d", repr=False)


@dataclass(frozen=True)
class PReLU:
    channels: int
    kind: str = field(default="prelu", repr=False)


@dataclass(frozen=True)
class Sigmoid:
    kind: str = field(default="sigmoid", repr=False)


@dataclass(frozen=True)
class Flatten:
    kind: str = field(default="flatten", repr=False)


@dataclass(frozen=True)
class L2Normalize:
    kind: str = field(default="l2_normalize", repr=False)


def _shape_after(layer, shape):
    if isinstance(layer, Affine):
        if shape != (layer.in_dim,):
            raise ValueError(f"affine expects shape ({layer.in_dim},), got {shape}")
        if layer.out_dim < 1:
            raise ValueError("affine needs at least one output unit")
        return (layer.out_dim,)
    if isinstance(layer, Conv2d):
        if layer.in_ch < 1 or layer.out_ch < 1:
            raise ValueError("conv2d needs at least one input and output channel")
        if layer.kernel < 1 or layer.stride < 1 or layer.padding < 0:
            raise ValueError("conv2d kernel/stride/padding out of range")
        if len(shape) != 3 or shape[0] != layer.in_ch:
            raise ValueError(f"conv2d expects ({layer.in_ch}, h, w), got {shape}")
        _, h, w = shape
        h_out = (h + 2 * layer.padding - layer.kernel) // layer.stride + 1
        w_out = (w + 2 * layer.padding - layer.kernel) // layer.stride + 1
        if h_out < 1 or w_out < 1:
            raise ValueError("conv2d output collapses to zero size")
        return (layer.out_ch, h_out, w_out)
    if isinstance(layer, PReLU):
        if layer.channels not in (1, shape[0]):
            raise ValueError(
                f"prelu channels {layer.channels} incompatible with shape {shape}"
            )
        return shape
    if isinstance(layer, Flatten):
        return (int(np.prod(shape)),)
    if isinstance(layer, L2Normalize):
        if len(shape) != 1:
            raise ValueError("l2_normalize expects a vector input")
        return shape
    if isinstance(layer, Sigmoid):
        return shape
    raise TypeError(f"unknown layer {layer!r}")


class NetworkSpec:
    """Ordered layer stack plus input shape; validates shape compatibility."""

    def __init__(self, layers, input_shape):
        layers = tuple(layers)
        if not layers:
            raise ValueError("network needs at least one layer")
        input_shape = tuple(int(s) for s in input_shape)
        shapes = [input_shape]
        for layer in layers:
            shapes.append(_shape_after(layer, shapes[-1]))
        self.layers = layers
        self.input_shape = input_shape
        self.shapes = tuple(shapes)

    @property
    def output_shape(self):
        return self.shapes[-1]

    def describe(self):
        parts = [f"input={self.input_shape}"]
        for layer in self.layers:
            fields = [f"{k}={v}" for k, v in vars(layer).items() if k != "kind"]
            parts.append(f"{layer.kind}({','.join(fields)})")
        return ";".join(parts)

    def spec_hash(self):
        return hashlib.sha256(self.describe().encode()).digest()

    def __repr__(self):
        return f"NetworkSpec({self.describe()})"


# --- parameters ----------------------------------------------------------------


def init_params(spec, rng):
    """He-style init: weights ~ N(0, 2/fan_in), biases zero, PReLU slope 0.25."""
    params = []
    for layer in spec.layers:
        if isinstance(layer, Affine):
            std = np.sqrt(2.0 / layer.in_dim)
            params.append(
                {
                    "w": rng.standard_normal(layer.out_dim * layer.in_dim).reshape(
                        layer.out_dim, layer.in_dim
                    )
                    * std,
                    "b": np.zeros(layer.out_dim),
                }
            )
        elif isinstance(layer, Conv2d):
            fan_in = layer.in_ch * layer.kernel * layer.kernel
            std = np.sqrt(2.0 / fan_in)
            n = layer.out_ch * fan_in
            params.append(
                {
                    "w": rng.standard_normal(n).reshape(
                        layer.out_ch, layer.in_ch, layer.kernel, layer.kernel
                    )
                    * std,
                    "b": np.zeros(layer.out_ch),
                }
            )
        elif isinstance(layer, PReLU):
            params.append({"slope": np.full(layer.channels, 0.25)})
        else:
            params.append({})
    return params


def param_count(params):
    return sum(arr.size for layer in params for arr in layer.values())


def zeros_like_params(params):
    return [{k: np.zeros_like(v) for k, v in layer.items()} for layer in params]


def map_params(fn, *param_sets):
    """Apply fn elementwise across aligned parameter structures."""
    out = []
    for layers in zip(*param_sets):
        out.append({k: fn(*[layer[k] for layer in layers]) for k in layers[0]})
    return out


def accumulate_params(total, delta, scale=1.0):
    """total += scale * delta, in place, in deterministic layer/key order."""
    for t_layer, d_layer in zip(total, delta):
        for key in t_layer:
            t_layer[key] += scale * d_layer[key]
    return total


def params_finite(params):
    return all(np.all(np.isfinite(v)) for layer in params for v in layer.values())


def clip_grad_norm(grads, max_norm):
    """Scale the whole gradient structure so its global L2 norm <= max_norm."""
    total = np.sqrt(
        sum(float(np.sum(v * v)) for layer in grads for v in layer.values())
    )
    if total > max_norm and total > 0:
        scale = max_norm / total
        for layer in grads:
            for key in layer:
                layer[key] *= scale
    return total


def copy_params(params):
    return [{k: v.copy() for k, v in layer.items()} for layer in params]


# --- forward / backward ---------------------------------------------------------

_COL_INDEX_CACHE = {}


def _conv_indices(in_ch, h, w, kernel, stride, padding):
    key = (in_ch, h, w, kernel, stride, padding)
    cached = _COL_INDEX_CACHE.get(key)
    if cached is not None:
        return cached
    hp, wp = h + 2 * padding, w + 2 * padding
    h_out = (hp - kernel) // stride + 1
    w_out = (wp - kernel) // stride + 1
    # flat index into the padded (in_ch, hp, wp) buffer for every column entry
    ci, di, dj = np.meshgrid(
        np.arange(in_ch), np.arange(kernel), np.arange(kernel), indexing="ij"
    )
    patch = (ci * hp * wp + di * wp + dj).ravel()
    i0, j0 = np.meshgrid(
        np.arange(h_out) * stride, np.arange(w_out) * stride, indexing="ij"
    )
    base = (i0 * wp + j0).ravel()
    idx = base[:, None] + patch[None, :]
    _COL_INDEX_CACHE[key] = (idx, (hp, wp), (h_out, w_out))
    return _COL_INDEX_CACHE[key]


def _im2col(x, kernel, stride, padding):
    c, h, w = x.shape
    idx, (hp, wp), (h_out, w_out) = _conv_indices(c, h, w, kernel, stride, padding)
    if padding:
        xp = np.zeros((c, hp, wp))
        xp[:, padding:-padding, padding:-padding] = x
    else:
        xp = x
    cols = xp.reshape(-1)[idx]
    return cols, (h_out, w_out)


def _col2im(gcols, x_shape, kernel, stride, padding):
    c, h, w = x_shape
    idx, (hp, wp), _ = _conv_indices(c, h, w, kernel, stride, padding)
    flat = np.bincount(idx.ravel(), weights=gcols.ravel(), minlength=c * hp * wp)
    gx = flat.reshape(c, hp, wp)
    if padding:
        gx = gx[:, padding:-padding, padding:-padding]
    return gx


def _layer_forward(layer, lp, x):
    """Returns (output, saved) where saved is whatever backward needs."""
    if isinstance(layer, Affine):
        return lp["w"] @ x + lp["b"], x
    if isinstance(layer, Conv2d):
        cols, (h_out, w_out) = _im2col(x, layer.kernel, layer.stride, layer.padding)
        wmat = lp["w"].reshape(layer.out_ch, -1)
        out = cols @ wmat.T + lp["b"]
        return out.T.reshape(layer.out_ch, h_out, w_out), (cols, x.shape)
    if isinstance(layer, PReLU):
        slope = lp["slope"]
        a = slope[:, None, None] if x.ndim == 3 and slope.size > 1 else slope
        return np.where(x > 0, x, a * x), x
    if isinstance(layer, Sigmoid):
        out = np.empty_like(x)
        pos = x >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        out[~pos] = ex / (1.0 + ex)
        return out, out
    if isinstance(layer, Flatten):
        return x.reshape(-1), x.shape
    if isinstance(layer, L2Normalize):
        norm = max(float(np.linalg.norm(x)), 1e-12)
        y = x / norm
        return y, (y, norm)
    raise TypeError(f"unknown layer {layer!r}")


def _layer_backward(layer, lp, saved, g):
    """Returns (param grads dict, input grad)."""
    if isinstance(layer, Affine):
        x = saved
        return {"w": np.outer(g, x), "b": g.copy()}, lp["w"].T @ g
    if isinstance(layer, Conv2d):
        cols, x_shape = saved
        gmat = g.reshape(layer.out_ch, -1).T
        wmat = lp["w"].reshape(layer.out_ch, -1)
        gw = (gmat.T @ cols).reshape(lp["w"].shape)
        gb = gmat.sum(axis=0)
        gcols = gmat @ wmat
        return {"w": gw, "b": gb}, _col2im(
            gcols, x_shape, layer.kernel, layer.stride, layer.padding
        )
    if isinstance(layer, PReLU):
        x = saved
        slope = lp["slope"]
        a = slope[:, None, None] if x.ndim == 3 and slope.size > 1 else slope
        neg = x <= 0
        gx = np.where(neg, a * g, g)
        contrib = np.where(neg, g * x, 0.0)
        if slope.size == 1:
            gslope = np.array([contrib.sum()])
        elif x.ndim == 3:
            gslope = contrib.sum(axis=(1, 2))
        else:
            gslope = contrib
        return {"slope": gslope}, gx
    if isinstance(layer, Sigmoid):
        y = saved
        return {}, g * y * (1.0 - y)
    if isinstance(layer, Flatten):
        return {}, g.reshape(saved)
    if isinstance(layer, L2Normalize):
        y, norm = saved
        return {}, (g - y * float(y @ g)) / norm
    raise TypeError(f"unknown layer {layer!r}")


class Tape:
    """Intermediates of one forward pass; consumed by exactly one backward."""

    def __init__(self, spec, params, saved):
        self.spec = spec
        self.params = params
        self.saved = saved
        self.consumed = False


@dataclass
class GradResult:
    param_grads: list
    input_grad: np.ndarray


def forward(spec, params, x):
    x = np.asarray(x, dtype=np.float64)
    if x.shape != spec.input_shape:
        raise ValueError(f"input shape {x.shape} != spec input {spec.input_shape}")
    saved = []
    for layer, lp in zip(spec.layers, params):
        x, keep = _layer_forward(layer, lp, x)
        saved.append(keep)
    return x, Tape(spec, params, saved)


def backward(tape, upstream):
    if tape.consumed:
        raise RuntimeError("tape already consumed by a previous backward pass")
    tape.consumed = True
    g = np.asarray(upstream, dtype=np.float64)
    if g.shape != tape.spec.output_shape:
        raise ValueError(
            f"upstream shape {g.shape} != output {tape.spec.output_shape}"
        )
    param_grads = [None] * len(tape.spec.layers)
    for i in range(len(tape.spec.layers) - 1, -1, -1):
        layer = tape.spec.layers[i]
        grads, g = _layer_backward(layer, tape.params[i], tape.saved[i], g)
        param_grads[i] = grads
    return GradResult(param_grads, g)


def predict(spec, params, x):
    """Forward without keeping a tape."""
    out, _ = forward(spec, params, x)
    return out


# --- gradient checking ----------------------------------------------------------


def grad_check(spec, params, x, tol=1e-4, rng=None, n_coords=200, step=1e-5):
    """Backward vs. central differences of <u, f(.)> on a coordinate subsample.

    Checks at least n_coords coordinates drawn across all parameters and the
    input. Returns a dict with the max relative error and a pass flag.
    """
    if rng is None:
        rng = linalg.SeededRng(0, 0)
    x = np.asarray(x, dtype=np.float64)
    out, tape = forward(spec, params, x)
    u = rng.standard_normal(out.size).reshape(out.shape)
    res = backward(tape, u)

    slots = []
    for li, layer in enumerate(params):
        for key, arr in layer.items():
            slots.append(("param", li, key, arr, res.param_grads[li][key]))
    slots.append(("input", None, None, x, res.input_grad))

    total = sum(arr.size for _, _, _, arr, _ in slots)
    n_take = min(n_coords, total)
    picks = np.sort(rng.choice(total, size=n_take, replace=False))

    def objective():
        return float(np.sum(u * predict(spec, params, x)))

    max_rel = 0.0
    offsets = np.cumsum([0] + [arr.size for _, _, _, arr, _ in slots])
    for flat_idx in picks:
        slot_i = int(np.searchsorted(offsets, flat_idx, side="right") - 1)
        _, _, _, arr, grads = slots[slot_i]
        local = int(flat_idx - offsets[slot_i])
        orig = arr.flat[local]
        arr.flat[local] = orig + step
        f_plus = objective()
        arr.flat[local] = orig - step
        f_minus = objective()
        arr.flat[local] = orig
        fd = (f_plus - f_minus) / (2.0 * step)
        an = grads.flat[local]
        rel = abs(an - fd) / max(abs(an), abs(fd), 1e-6)
        max_rel = max(max_rel, rel)
    return {"max_rel_err": max_rel, "checked": int(n_take), "passed": max_rel < tol}


# --- optimizer -------------------------------------------------------------------


@dataclass
class OptimizerState:
    velocity: list
    lr: float
    momentum: float
    epoch: int = 0
    decay_epochs: int = 20
    skipped_steps: int = 0

    def current_lr(self):
        return self.lr * 0.5 ** (self.epoch // self.decay_epochs)


def init_optimizer(params, lr, momentum=0.9, decay_epochs=20):
    return OptimizerState(
        velocity=zeros_like_params(params),
        lr=float(lr),
        momentum=float(momentum),
        decay_epochs=int(decay_epochs),
    )


def sgd_momentum_step(params, grads, state):
    """Heavy-ball update: v <- mu v + g, theta <- theta - lr v.

    A non-finite gradient skips the step (params and velocity untouched) and
    bumps state.skipped_steps.
    """
    if not params_finite(grads):
        state.skipped_steps += 1
        warnings.warn("non-finite gradient: optimizer step skipped")
        return params, state
    lr = state.current_lr()
    mu = state.momentum
    for p_layer, g_layer, v_layer in zip(params, grads, state.velocity):
        for key in p_layer:
            v_layer[key] *= mu
            v_layer[key] += g_layer[key]
            p_layer[key] -= lr * v_layer[key]
    return params, state


# --- losses ----------------------------------------------------------------------


def softmax_cross_entropy(logits, label):
    """Returns (loss, grad wrt logits) for one example."""
    z = logits - np.max(logits)
    ez = np.exp(z)
    probs = ez / ez.sum()
    loss = -np.log(max(probs[label], 1e-300))
    grad = probs.copy()
    grad[label] -= 1.0
    return loss, grad


# --- checkpoints -----------------------------------------------------------------

CHECKPOINT_MAGIC = b"IMNN"


def save_params(path, spec, params):
    """Checkpoint: magic, spec hash, per-layer tensors; round-trips bit-exactly."""
    arrays = []
    for layer in params:
        for key in sorted(layer):
            arr = layer[key]
            arrays.append(arr.reshape(arr.shape[0], -1) if arr.ndim > 1 else arr)
    linalg.write_container(path, CHECKPOINT_MAGIC, spec.spec_hash(), arrays)


def load_params(path, spec):
    header_hash, arrays = linalg.read_container(path, CHECKPOINT_MAGIC)
    if header_hash != spec.spec_hash():
        raise ValueError(f"{path}: checkpoint does not match the network spec")
    template = init_params(spec, linalg.SeededRng(0, 0))
    out = []
    i = 0
    for layer in template:
        rebuilt = {}
        for key in sorted(layer):
            target = layer[key]
            rebuilt[key] = arrays[i].reshape(target.shape).astype(np.float64)
            i += 1
        out.append(rebuilt)
    if i != len(arrays):
        raise ValueError(f"{path}: unexpected extra tensors in checkpoint")
    return out


def params_hash(params):
    chunks = []
    for layer in params:
        for key in sorted(layer):
            chunks.append(layer[key])
    return linalg.content_hash(*chunks).hex()
