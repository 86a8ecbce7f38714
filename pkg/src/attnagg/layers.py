"""Layer vocabulary: convolution, batch norm, activations, spatial softmax,
linear maps and the spatial-collapse convolution, plus Xavier init and a
bit-exact parameter checkpoint format.

Convolution runs through an im2col fast path (plain dgemm); the naive
quadruple-loop formulation is kept as a test oracle, not here.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from attnagg.tensor import (
    Rng,
    ShapeMismatch,
    Tensor,
    dump_tensor,
    load_tensor,
    record_op,
    relu,
    sigmoid,
)


@dataclass
class Conv2dLayer:
    kernel: Tensor  # [out_ch, in_ch, kh, kw]
    bias: Tensor  # [out_ch]
    stride: int = 1
    padding: int = 0


@dataclass
class BatchNormLayer:
    gamma: Tensor  # [ch]
    beta: Tensor  # [ch]
    running_mean: np.ndarray = field(repr=False)
    running_var: np.ndarray = field(repr=False)
    momentum: float = 0.9  # running = momentum * running + (1 - momentum) * batch
    eps: float = 1e-5
    mode: str = "train"


@dataclass
class LinearLayer:
    weight: Tensor  # [out, in]
    bias: Tensor  # [out]


def make_conv(in_ch: int, out_ch: int, kernel, stride: int = 1, padding: int = 0,
              rng: Rng | None = None) -> Conv2dLayer:
    kh, kw = (kernel, kernel) if isinstance(kernel, int) else kernel
    layer = Conv2dLayer(
        kernel=Tensor(np.zeros((out_ch, in_ch, kh, kw)), requires_grad=True),
        bias=Tensor(np.zeros(out_ch), requires_grad=True),
        stride=stride,
        padding=padding,
    )
    if rng is not None:
        init_params(layer, rng)
    return layer


def make_batchnorm(ch: int, eps: float = 1e-5, momentum: float = 0.9) -> BatchNormLayer:
    return BatchNormLayer(
        gamma=Tensor(np.ones(ch), requires_grad=True),
        beta=Tensor(np.zeros(ch), requires_grad=True),
        running_mean=np.zeros(ch),
        running_var=np.ones(ch),
        momentum=momentum,
        eps=eps,
    )


def make_linear(in_dim: int, out_dim: int, rng: Rng | None = None) -> LinearLayer:
    layer = LinearLayer(
        weight=Tensor(np.zeros((out_dim, in_dim)), requires_grad=True),
        bias=Tensor(np.zeros(out_dim), requires_grad=True),
    )
    if rng is not None:
        init_params(layer, rng)
    return layer


def xavier_bound(fan_in: int, fan_out: int) -> float:
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


def init_params(layer, rng: Rng):
    """Xavier-uniform weights, zero biases. Batch norm resets to the identity
    transform (gamma 1, beta 0, running stats 0/1)."""
    if isinstance(layer, Conv2dLayer):
        oc, ic, kh, kw = layer.kernel.shape
        b = xavier_bound(ic * kh * kw, oc * kh * kw)
        layer.kernel.values[...] = rng.uniform(-b, b, layer.kernel.size).reshape(
            layer.kernel.shape)
        layer.bias.values[...] = 0.0
    elif isinstance(layer, LinearLayer):
        od, idim = layer.weight.shape
        b = xavier_bound(idim, od)
        layer.weight.values[...] = rng.uniform(-b, b, layer.weight.size).reshape(
            layer.weight.shape)
        layer.bias.values[...] = 0.0
    elif isinstance(layer, BatchNormLayer):
        layer.gamma.values[...] = 1.0
        layer.beta.values[...] = 0.0
        layer.running_mean[...] = 0.0
        layer.running_var[...] = 1.0
    else:
        raise TypeError(f"unknown layer type {type(layer).__name__}")
    return layer


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def conv2d(layer: Conv2dLayer, x: Tensor) -> Tensor:
    """Direct 2-d convolution (cross-correlation), NCHW layout."""
    if x.ndim != 4:
        raise ShapeMismatch(f"conv2d wants NCHW input, got {x.shape}")
    n, cin, h, w = x.shape
    cout, cin_k, kh, kw = layer.kernel.shape
    if cin != cin_k:
        raise ShapeMismatch(f"conv2d: {cin} input channels vs kernel {cin_k}")
    s, p = layer.stride, layer.padding
    ho = conv_output_size(h, kh, s, p)
    wo = conv_output_size(w, kw, s, p)
    if ho < 1 or wo < 1:
        raise ShapeMismatch(f"conv2d: empty output for input {h}x{w} kernel {kh}x{kw}")

    xp = np.pad(x.values, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.values
    patches = np.empty((n, cin, kh, kw, ho, wo))
    for ki in range(kh):
        for kj in range(kw):
            patches[:, :, ki, kj] = xp[:, :, ki:ki + ho * s:s, kj:kj + wo * s:s]
    cols = patches.reshape(n, cin * kh * kw, ho * wo)
    w2 = layer.kernel.values.reshape(cout, cin * kh * kw)
    out = np.matmul(w2, cols).reshape(n, cout, ho, wo)
    out += layer.bias.values[:, None, None]

    kernel_t, bias_t = layer.kernel, layer.bias

    def bwd(g):
        g2 = g.reshape(n, cout, ho * wo)
        dbias = g.sum(axis=(0, 2, 3)) if bias_t.requires_grad else None
        dkernel = None
        if kernel_t.requires_grad:
            dkernel = np.einsum("nco,nko->ck", g2, cols).reshape(kernel_t.shape)
        dx = None
        if x.requires_grad:
            dpatch = np.matmul(w2.T, g2).reshape(n, cin, kh, kw, ho, wo)
            dxp = np.zeros_like(xp)
            for ki in range(kh):
                for kj in range(kw):
                    dxp[:, :, ki:ki + ho * s:s, kj:kj + wo * s:s] += dpatch[:, :, ki, kj]
            dx = dxp[:, :, p:p + h, p:p + w] if p else dxp
        return dx, dkernel, dbias

    return record_op("conv2d", out, (x, kernel_t, bias_t), bwd)


def batchnorm(layer: BatchNormLayer, x: Tensor) -> Tensor:
    """Per-channel normalization. Train mode normalizes by batch statistics
    (population variance) and updates running stats; eval mode is a fixed
    affine map from the running stats.

    A train-mode batch with a single element per channel has variance 0 and
    normalizes through eps alone.
    """
    ch = x.shape[1] if x.ndim >= 2 else 0
    if x.ndim == 4:
        axes, cshape = (0, 2, 3), (1, ch, 1, 1)
    elif x.ndim == 2:
        axes, cshape = (0,), (1, ch)
    else:
        raise ShapeMismatch(f"batchnorm wants 2-d or 4-d input, got {x.shape}")
    if ch != layer.gamma.size:
        raise ShapeMismatch(f"batchnorm: {ch} channels vs layer {layer.gamma.size}")

    gamma = layer.gamma.reshape(cshape)
    beta = layer.beta.reshape(cshape)
    if layer.mode == "train":
        mu = x.mean(axes=axes, keepdims=True)
        var = ((x - mu) * (x - mu)).mean(axes=axes, keepdims=True)
        xhat = (x - mu) / ((var + layer.eps) ** 0.5)
        m = layer.momentum
        layer.running_mean[...] = m * layer.running_mean + (1 - m) * mu.values.ravel()
        layer.running_var[...] = m * layer.running_var + (1 - m) * var.values.ravel()
    else:
        rm = Tensor(layer.running_mean.reshape(cshape))
        rstd = Tensor(np.sqrt(layer.running_var + layer.eps).reshape(cshape))
        xhat = (x - rm) / rstd
    return xhat * gamma + beta


def activation(kind: str, x: Tensor) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation {kind!r}")


def spatial_softmax(z: Tensor) -> Tensor:
    """Per (sample, channel) softmax over the H*W positions, max-subtracted.

    Every output plane sums to 1, so each channel is a spatial probability
    distribution over locations.
    """
    if z.ndim != 4:
        raise ShapeMismatch(f"spatial_softmax wants NCHW input, got {z.shape}")
    n, c, h, w = z.shape
    v = z.values.reshape(n, c, h * w)
    e = np.exp(v - v.max(axis=2, keepdims=True))
    a = e / e.sum(axis=2, keepdims=True)
    out = a.reshape(n, c, h, w)

    def bwd(g):
        gv = g.reshape(n, c, h * w)
        dz = a * (gv - (gv * a).sum(axis=2, keepdims=True))
        return (dz.reshape(n, c, h, w),)

    return record_op("spatial_softmax", out, (z,), bwd)


def linear(layer: LinearLayer, x: Tensor) -> Tensor:
    if x.ndim != 2 or x.shape[1] != layer.weight.shape[1]:
        raise ShapeMismatch(
            f"linear: input {x.shape} vs weight {layer.weight.shape}")
    return x @ layer.weight.T + layer.bias


def global_collapse_conv(x: Tensor, layer: Conv2dLayer) -> Tensor:
    """Convolution whose kernel spans the full spatial extent: one output
    position per channel, equivalent to a linear map on the flattened planes."""
    if layer.kernel.shape[2:] != x.shape[2:]:
        raise ShapeMismatch(
            f"global_collapse_conv: kernel {layer.kernel.shape[2:]} vs "
            f"input {x.shape[2:]}")
    if layer.stride != 1 or layer.padding != 0:
        raise ShapeMismatch("global_collapse_conv wants stride 1, padding 0")
    return conv2d(layer, x)


# ---------------------------------------------------------------------------
# parameter checkpoints: manifest.json maps entry name -> tensor file


def save_param_files(dir_path, arrays: dict[str, np.ndarray], extra: dict | None = None):
    """Write one dump file per named array plus a manifest. Bit-exact."""
    d = Path(dir_path)
    d.mkdir(parents=True, exist_ok=True)
    entries = {}
    for i, (name, arr) in enumerate(arrays.items()):
        fname = f"t{i:04d}.txt"
        dump_tensor(d / fname, arr)
        entries[name] = fname
    manifest = {"entries": entries}
    if extra:
        manifest.update(extra)
    (d / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))


def load_param_files(dir_path) -> tuple[dict[str, np.ndarray], dict]:
    d = Path(dir_path)
    manifest = json.loads((d / "manifest.json").read_text())
    arrays = {name: load_tensor(d / fname)
              for name, fname in manifest["entries"].items()}
    extra = {k: v for k, v in manifest.items() if k != "entries"}
    return arrays, extra
