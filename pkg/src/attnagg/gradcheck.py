"""Finite-difference gradient verification.

Analytic gradients from the reverse sweep are compared against central
differences (f(x + eps) - f(x - eps)) / (2 eps) for every checked component.
Errors are reported as |a - n| / max(|a|, |n|, floor) with floor = 1e-3, so
the relative threshold 1e-4 doubles as an absolute threshold of 1e-7 for
near-zero gradients.

Inputs are drawn well away from kinks and domain edges (relu at 0, max ties,
log/div near 0); checking a subgradient against central differences at a
kink would test the sampler, not the engine.

``corrupt`` scales one component's analytic gradients by 1.01 before the
comparison; it exists so the failure path of the reporting machinery is
itself testable.
"""

from __future__ import annotations

import numpy as np

from attnagg import layers as L
from attnagg import tensor as T
from attnagg.losses import FocalConfig, PredictionHistory, attention_loss, bce, class_weights, total_loss, weighted_focal
from attnagg.model import BackboneConfig, ConvSpec, ModelConfig, build_model
from attnagg.tensor import Rng, Tensor, backward, no_grad, reset_graph

OP_TOLERANCE = 1e-4
MODEL_TOLERANCE = 1e-3
_FLOOR = 1e-3  # rel 1e-4 against this floor equals abs 1e-7


def max_rel_error(f, leaves, eps: float = 1e-5, corrupt: bool = False) -> float:
    """Worst relative disagreement between backward() and central differences
    of the scalar ``f()`` over every element of every leaf."""
    reset_graph()
    for leaf in leaves:
        leaf.zero_grad()
    backward(f())
    analytic = [leaf.grad.copy() if leaf.grad is not None
                else np.zeros_like(leaf.values) for leaf in leaves]
    if corrupt:
        analytic = [a * 1.01 for a in analytic]
    worst = 0.0
    for leaf, ana in zip(leaves, analytic):
        flat = leaf.values.reshape(-1)
        ana_flat = ana.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            with no_grad():
                fp = f().item()
            flat[i] = orig - eps
            with no_grad():
                fm = f().item()
            flat[i] = orig
            num = (fp - fm) / (2.0 * eps)
            denom = max(abs(ana_flat[i]), abs(num), _FLOOR)
            worst = max(worst, abs(ana_flat[i] - num) / denom)
    return worst


def _scalarized(build, rng: np.random.Generator):
    """Reduce a tensor-valued builder to a scalar through a FIXED random
    weighting (drawn once, so repeated calls are pure)."""
    with no_grad():
        probe = build()
    w = Tensor(rng.uniform(0.5, 1.5, probe.shape))
    return lambda: (build() * w).sum()


def op_components(seed: int):
    """(name, f, leaves) triples covering every differentiable operation,
    layer and loss."""
    rng = np.random.default_rng(seed)
    leaf = lambda shape, lo, hi: Tensor(rng.uniform(lo, hi, shape),
                                        requires_grad=True)
    components = []

    def add(name, build, leaves, scalar=False):
        components.append((name, build if scalar else _scalarized(build, rng),
                           leaves))

    # elementwise and structural ops
    a, b = leaf((2, 3), 0.5, 1.5), leaf((2, 3), 0.5, 1.5)
    row = leaf((3,), 0.5, 1.5)
    add("add", lambda: a + b, [a, b])
    add("sub", lambda: a - b, [a, b])
    add("mul", lambda: a * b, [a, b])
    add("div", lambda: a / b, [a, b])
    add("neg", lambda: -a, [a])
    add("broadcast", lambda: a * row, [a, row])
    add("exp", lambda: T.exp(a), [a])
    add("log", lambda: T.log(a), [a])
    add("pow_scalar", lambda: a ** 1.7, [a])
    add("sigmoid", lambda: T.sigmoid(a), [a])
    add("softplus", lambda: T.softplus(a), [a])
    add("relu", lambda: T.relu(a - 0.9999), [a])  # inputs in (0.5, 1.5)
    add("sum", lambda: a.sum(axes=[1], keepdims=True) * b, [a, b])
    add("mean", lambda: a.mean(axes=[0]), [a])
    mx = Tensor(rng.permutation(12).astype(np.float64).reshape(3, 4) * 0.31,
                requires_grad=True)  # distinct entries: no argmax ties
    add("max", lambda: mx.max(axes=[1]), [mx])
    add("matmul", lambda: a @ b.T, [a, b])
    add("transpose", lambda: a.T * 2.0, [a])
    add("reshape", lambda: a.reshape((3, 2)) * b.reshape((3, 2)), [a, b])

    # layers
    x4 = leaf((2, 2, 5, 5), -1.0, 1.0)
    conv = L.make_conv(2, 3, 3, stride=2, padding=1, rng=Rng(seed + 1))
    add("conv2d", lambda: L.conv2d(conv, x4), [x4, conv.kernel, conv.bias])

    xbn = leaf((4, 3, 2, 2), -1.0, 1.0)
    bn = L.make_batchnorm(3)
    bn.beta.values[...] = rng.uniform(-0.5, 0.5, 3)
    add("batchnorm_train", lambda: L.batchnorm(bn, xbn),
        [xbn, bn.gamma, bn.beta])
    bn_eval = L.make_batchnorm(3)
    bn_eval.mode = "eval"
    bn_eval.running_mean[...] = rng.uniform(-0.3, 0.3, 3)
    bn_eval.running_var[...] = rng.uniform(0.5, 1.5, 3)
    add("batchnorm_eval", lambda: L.batchnorm(bn_eval, xbn),
        [xbn, bn_eval.gamma, bn_eval.beta])

    z = leaf((2, 2, 3, 3), -2.0, 2.0)
    add("spatial_softmax", lambda: L.spatial_softmax(z), [z])

    xg = leaf((2, 2, 4, 4), -1.0, 1.0)
    gcc = L.make_conv(2, 3, (4, 4), rng=Rng(seed + 2))
    add("global_collapse_conv", lambda: L.global_collapse_conv(xg, gcc),
        [xg, gcc.kernel, gcc.bias])

    xl = leaf((3, 4), -1.0, 1.0)
    lin = L.make_linear(4, 2, rng=Rng(seed + 3))
    add("linear", lambda: L.linear(lin, xl), [xl, lin.weight, lin.bias])

    # losses (already scalar)
    ell = leaf((3, 4), -3.0, 3.0)
    y = (np.random.default_rng(seed + 4).uniform(size=(3, 4)) < 0.5).astype(float)
    w = class_weights(np.random.default_rng(seed + 5).uniform(0.05, 0.6, 4))
    add("bce", lambda: bce(ell, y), [ell], scalar=True)
    add("weighted_focal", lambda: weighted_focal(ell, y, w, FocalConfig(0.5)),
        [ell], scalar=True)

    hist = PredictionHistory(window=5, burn_in=0)
    hist_ids = np.arange(3)
    hrng = np.random.default_rng(seed + 6)
    for ep in range(3):
        hist.record_epoch(ep, hrng.uniform(0.2, 0.8, (3, 4)), hist_ids)
    add("attention_loss",
        lambda: attention_loss(ell, y, hist, epoch=5, sample_ids=hist_ids),
        [ell], scalar=True)
    return components


def run_op_checks(seed: int = 0, corrupt: str | None = None) -> dict[str, float]:
    """Max relative error per component. ``corrupt`` fakes a broken gradient
    in the named component (testing hook)."""
    errors = {}
    for name, f, leaves in op_components(seed):
        errors[name] = max_rel_error(f, leaves, corrupt=(name == corrupt))
    return errors


def gradcheck_model_config() -> ModelConfig:
    """2-sample, 3-attribute, 16x16 configuration used by the whole-model
    check; small enough that exhaustive central differences stay fast."""
    return ModelConfig(
        backbone=BackboneConfig(
            input_size=16,
            stage1=(ConvSpec(6, 3, 2, 1), ConvSpec(6, 3, 2, 1)),
            stage2=(ConvSpec(8, 3, 1, 1), ConvSpec(8, 3, 2, 1)),
        ),
        num_attributes=3,
        attention_channels=6,
        classifier_channels=(6, 8, 8),
    )


def run_model_check(seed: int = 0, corrupt: bool = False) -> float:
    """Finite-difference check of d(total loss)/d(theta) for every trainable
    parameter of a full two-scale model, incl. the dispersion-weighted
    attention losses."""
    cfg = gradcheck_model_config()
    model = build_model(cfg, seed=seed)
    rng = np.random.default_rng(seed)
    # nudge biases and trunk output off their symmetric zero init so no
    # pre-activation sits on a relu kink
    for name, p in model.named_parameters().items():
        if name.endswith(".bias") or name.endswith(".beta"):
            p.values[...] = rng.uniform(-0.3, 0.3, p.shape)
        if "trunk_out" in name:
            p.values[...] = rng.uniform(-0.4, 0.4, p.shape)
    x = Tensor(rng.uniform(0.0, 1.0, (2, 3, 16, 16)))
    y = (rng.uniform(size=(2, 3)) < 0.5).astype(float)
    weights = class_weights(np.array([0.5, 0.25, 0.1]))
    hist = PredictionHistory(window=5, burn_in=0)
    ids = np.arange(2)
    for ep in range(3):
        hist.record_epoch(ep, rng.uniform(0.2, 0.8, (2, 3)), ids)

    def f():
        out = model.forward(x, training=True)
        return total_loss(out, y, weights, FocalConfig(0.5), hist, epoch=5,
                          sample_ids=ids).total

    leaves = list(model.named_parameters().values())
    return max_rel_error(f, leaves, corrupt=corrupt)
