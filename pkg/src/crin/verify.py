"""Finite-difference verification suites: one per-primitive battery and one
end-to-end check through a small full model.  Both run in float64 so the
analytic/numeric comparison is meaningful at tight tolerances."""

from __future__ import annotations

import numpy as np

from . import losses
from . import tensor as T
from .autograd import GradientReport, grad_check
from .nn import CrinConfig, CrinModel
from .tensor import ConvSpec, Tensor


def _rand(rng, *shape, dtype=np.float64) -> Tensor:
    return Tensor(rng.standard_normal(shape).astype(dtype), requires_grad=True)


def _merge(report: GradientReport, sub: GradientReport, prefix: str) -> None:
    for e in sub.entries:
        e.name = f"{prefix}.{e.name}"
        report.entries.append(e)


def op_checks(seed: int = 0) -> GradientReport:
    """Check every differentiable primitive against central differences on
    small random float64 operands."""
    rng = np.random.default_rng(seed)
    report = GradientReport()

    def check(name, fn, params, **kw):
        _merge(report, grad_check(fn, params, **kw), name)

    a = _rand(rng, 3, 4)
    b = _rand(rng, 3, 4)
    row = _rand(rng, 4)  # broadcast operand
    check("add", lambda: T.tsum(T.add(a, b)), {"a": a, "b": b})
    check("add_bcast", lambda: T.tsum(T.add(a, row)), {"a": a, "row": row})
    check("sub", lambda: T.tsum(T.sub(a, b)), {"a": a, "b": b})
    check("mul", lambda: T.tsum(T.mul(a, b)), {"a": a, "b": b})
    bp = Tensor(np.abs(b.data) + 1.0, requires_grad=True)
    check("div", lambda: T.tsum(T.div(a, bp)), {"a": a, "b": bp})

    x = _rand(rng, 2, 3, 4, 4)
    xo = Tensor(x.data + 0.3, requires_grad=True)  # keep ReLU away from the kink
    check("relu", lambda: T.tsum(T.relu(xo)), {"x": xo})
    check("sigmoid", lambda: T.tsum(T.sigmoid(x)), {"x": x})
    check("sum_axis", lambda: T.tsum(T.mul(T.tsum(x, axis=(2, 3)),
                                           T.tsum(x, axis=(2, 3)))), {"x": x})
    check("mean", lambda: T.tsum(T.mul(T.tmean(x, axis=1, keepdims=True), x)),
          {"x": x})
    w34 = Tensor(rng.standard_normal((3, 4)), requires_grad=False)
    check("softmax", lambda: T.tsum(T.mul(T.softmax(a, axis=1), w34)), {"a": a})
    check("reshape", lambda: T.tsum(T.mul(T.reshape(a, (4, 3)),
                                          T.reshape(a, (4, 3)))), {"a": a})
    check("narrow", lambda: T.tsum(T.mul(T.narrow(x, 1, 1, 2),
                                         T.narrow(x, 1, 0, 2))), {"x": x})
    c1 = _rand(rng, 2, 2, 3, 3)
    c2 = _rand(rng, 2, 1, 3, 3)
    check("channel_concat",
          lambda: T.tsum(T.mul(T.channel_concat(c1, c2),
                               T.channel_concat(c2, c1))),
          {"c1": c1, "c2": c2})

    xc = _rand(rng, 2, 4, 6, 6)
    wc = _rand(rng, 3, 4, 3, 3)
    bc = _rand(rng, 3)
    spec = ConvSpec.same(4, 3, 3)
    check("conv2d", lambda: T.tsum(T.conv2d(xc, wc, bc, spec)),
          {"x": xc, "w": wc, "b": bc})
    ws = _rand(rng, 3, 4, 3, 3)
    spec_s = ConvSpec.same(4, 3, 3, stride=2)
    check("conv2d_stride2", lambda: T.tsum(T.conv2d(xc, ws, None, spec_s)),
          {"x": xc, "w": ws})
    wg = _rand(rng, 4, 2, 3, 3)
    spec_g = ConvSpec.same(4, 4, 3, groups=2)
    check("conv2d_groups", lambda: T.tsum(T.conv2d(xc, wg, None, spec_g)),
          {"x": xc, "w": wg})
    wd = _rand(rng, 4, 1, 5, 1)
    spec_d = ConvSpec.same(4, 4, 5, 1, groups=4)
    check("conv2d_depthwise_strip", lambda: T.tsum(T.conv2d(xc, wd, None, spec_d)),
          {"x": xc, "w": wd})

    xl = _rand(rng, 3, 5)
    wl = _rand(rng, 2, 5)
    bl = _rand(rng, 2)
    check("linear", lambda: T.tsum(T.mul(T.linear(xl, wl, bl),
                                         T.linear(xl, wl, bl))),
          {"x": xl, "w": wl, "b": bl})

    check("global_avg_pool",
          lambda: T.tsum(T.mul(T.global_avg_pool(x), T.tsum(x, axis=(2, 3),
                                                            keepdims=True))),
          {"x": x})
    wq = Tensor(rng.standard_normal((2, 3, 8, 8)), requires_grad=False)
    check("upsample_nearest",
          lambda: T.tsum(T.mul(T.upsample2x(x, "nearest"), wq)), {"x": x})
    check("upsample_bilinear",
          lambda: T.tsum(T.mul(T.upsample2x(x, "bilinear"), wq)), {"x": x})

    gamma = Tensor(rng.uniform(0.5, 1.5, 3), requires_grad=True)
    beta = _rand(rng, 3)
    rm = Tensor(rng.standard_normal(3), requires_grad=False)
    rv = Tensor(rng.uniform(0.5, 1.5, 3), requires_grad=False)
    wb = Tensor(rng.standard_normal(x.shape), requires_grad=False)

    def bn_train():
        rm2 = Tensor(rm.data.copy())
        rv2 = Tensor(rv.data.copy())
        y = T.batch_norm(x, gamma, beta, rm2, rv2, training=True)
        return T.tsum(T.mul(y, wb))

    check("batch_norm_train", bn_train, {"x": x, "gamma": gamma, "beta": beta})
    check("batch_norm_eval",
          lambda: T.tsum(T.mul(T.batch_norm(x, gamma, beta, rm, rv,
                                            training=False), wb)),
          {"x": x, "gamma": gamma, "beta": beta})

    logit = _rand(rng, 2, 1, 4, 4)
    target = Tensor((rng.random((2, 1, 4, 4)) > 0.5).astype(np.float64))
    check("bce_loss", lambda: losses.bce_loss(logit, target), {"logit": logit})
    prob = Tensor(rng.uniform(0.05, 0.95, (2, 1, 4, 4)), requires_grad=True)
    check("dice_loss", lambda: losses.dice_loss(prob, target), {"prob": prob})
    check("task_loss", lambda: losses.task_loss(logit, target), {"logit": logit})
    return report


def end_to_end_check(stage_widths: tuple[int, ...] = (12, 24),
                     input_hw: tuple[int, int] = (32, 32),
                     max_coords_per_param: int | None = 3,
                     seed: int = 0) -> GradientReport:
    """Differentiate the full training objective of a small two-stage model
    with respect to every learnable parameter, in float64.

    The difference step is small (1e-6) because a deep stack of ReLUs is only
    piecewise smooth: a larger step makes some probes straddle activation
    kinks, which corrupts the numeric derivative.  Float64 keeps the
    cancellation error at that step size far below the comparison tolerance.
    """
    cfg = CrinConfig(stage_widths=stage_widths)
    model = CrinModel(cfg, seed=seed, dtype=np.float64)
    rng = np.random.default_rng(seed + 1)
    h, w = input_hw
    x = Tensor(rng.standard_normal((1, cfg.in_channels, h, w)))
    yb = Tensor((rng.random((1, 1, h, w)) > 0.7).astype(np.float64))
    yr = Tensor((rng.random((1, 1, h, w)) > 0.7).astype(np.float64))

    def fn():
        res = model.forward(x, training=True)
        loss, _ = losses.total_loss(res.building_logits, res.road_logits,
                                    res.aux, model.aux_heads, yb, yr)
        return loss

    params = dict(model.store.learnable_items())
    return grad_check(fn, params, eps=1e-6,
                      max_coords_per_param=max_coords_per_param, seed=seed)
