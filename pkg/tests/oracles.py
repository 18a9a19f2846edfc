"""Independent reference implementations used only as test oracles.

Everything here is written the dumb, obvious way (explicit loops, sweeps)
so it shares no code path with the package implementations it checks.
"""

import numpy as np

from pinact import nn


def naive_conv2d(x, w, b, stride, padding):
    c_in, h, win = x.shape
    out_ch, _, k, _ = w.shape
    xp = np.zeros((c_in, h + 2 * padding, win + 2 * padding))
    xp[:, padding : padding + h, padding : padding + win] = x
    h_out = (h + 2 * padding - k) // stride + 1
    w_out = (win + 2 * padding - k) // stride + 1
    out = np.zeros((out_ch, h_out, w_out))
    for o in range(out_ch):
        for i in range(h_out):
            for j in range(w_out):
                patch = xp[:, i * stride : i * stride + k, j * stride : j * stride + k]
                out[o, i, j] = np.sum(patch * w[o]) + b[o]
    return out


def naive_forward(spec, params, x):
    """Straight-line evaluation of a layer stack, no tape, no im2col."""
    x = np.asarray(x, dtype=np.float64)
    for layer, lp in zip(spec.layers, params):
        if isinstance(layer, nn.Affine):
            x = lp["w"] @ x + lp["b"]
        elif isinstance(layer, nn.Conv2d):
            x = naive_conv2d(x, lp["w"], lp["b"], layer.stride, layer.padding)
        elif isinstance(layer, nn.PReLU):
            slope = lp["slope"]
            a = slope[:, None, None] if x.ndim == 3 and slope.size > 1 else slope
            x = np.where(x > 0, x, a * x)
        elif isinstance(layer, nn.Sigmoid):
            x = 1.0 / (1.0 + np.exp(-x))
        elif isinstance(layer, nn.Flatten):
            x = x.reshape(-1)
        elif isinstance(layer, nn.L2Normalize):
            x = x / max(np.linalg.norm(x), 1e-12)
        else:
            raise TypeError(layer)
    return x


def brute_force_eer(pos, neg, grid_points=20001):
    """EER by dense threshold sweep with predict-positive-if-greater."""
    pos = np.asarray(pos, dtype=np.float64)
    neg = np.asarray(neg, dtype=np.float64)
    lo = min(pos.min(), neg.min()) - 1.0
    hi = max(pos.max(), neg.max()) + 1.0
    taus = np.linspace(lo, hi, grid_points)
    fpr = np.array([(neg > t).mean() for t in taus])
    fnr = np.array([(pos <= t).mean() for t in taus])
    diff = fpr - fnr
    k = int(np.argmax(diff <= 0))
    if k == 0 or diff[k] == 0:
        return float(fpr[k])
    # linear interpolation between the bracketing sweep points
    d0, d1 = diff[k - 1], diff[k]
    t = d0 / (d0 - d1)
    return float(fpr[k - 1] + t * (fpr[k] - fpr[k - 1]))
