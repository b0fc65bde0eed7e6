"""Registered finite-difference checks covering every differentiable op.

Each check builds one small random instance and compares reverse-mode
gradients against central differences (rel. tolerance 1e-4). Shapes are
trimmed so the whole registry finite-differences in well under two minutes.

Two recurring care points:

* Kinked ops (relu, abs, max, clip, smooth L1, top-k selection) sample
  inputs with margins far wider than the differencing step, so both sides
  of the difference stay on one branch.
* Module checks perturb parameters by rebinding `param.tensor` to the leaf
  under test inside the check function; modules read `.tensor` at call
  time, so the same function serves the forward pass and every probe.
  Geometry (FPS, grouping, matching) is precomputed or depends only on
  constants, keeping selections fixed while values move.
"""

from __future__ import annotations

import numpy as np

from . import difftensor as dt
from .backbone import (AttentionGate, Backbone, ConvBlock, ScaleAttentiveFusion,
                       ScaleFeatureNet, refine)
from .config import (BackboneConfig, DataConfig, EncoderConfig, GridConfig,
                     MemoryConfig, RunConfig)
from .difftensor import nn
from .difftensor.gradcheck import GradReport, finite_difference_check, register
from .difftensor import tensor as T
from .encoder import (FeaturePropagation, PointStreamEncoder, SetAbstraction,
                      TinyPointNet, aggregate, build_fused_image, correlation,
                      correlate_topk_aggregate, topk_softmax)
from .head import (DetectionHead, combine_losses, direction_loss_sum,
                   focal_loss_sum, regression_loss_sum)
from .memory import MemoryBank, memory_alignment_loss
from .model import Detector
from .pillars import GridSpec, PillarBatch, voxelize
from .scene_io.types import GroundTruthBox


def _signed(rng: np.random.Generator, shape, low=0.2, high=1.5) -> np.ndarray:
    """Values with |x| in [low, high]: a safe margin around zero kinks."""
    return rng.uniform(low, high, size=shape) * rng.choice([-1.0, 1.0], size=shape)


def _separated(rng: np.random.Generator, shape) -> np.ndarray:
    """Distinct values with pairwise gaps far above the differencing step."""
    n = int(np.prod(shape))
    return (rng.permutation(n).astype(np.float64).reshape(shape) * 0.37
            + rng.normal(0.0, 0.01, size=shape))


def _weighted(t: T.Tensor, w: np.ndarray) -> T.Tensor:
    """Scalar readout with informative per-element gradients."""
    return dt.tensor.sum_(dt.tensor.mul(t, w))


def _anchored(score: T.Tensor, inputs: list[T.Tensor], c: float = 0.05) -> T.Tensor:
    """Add c * sum(x^2 + r * x) for every checked input.

    Central differences on a composite of magnitude f resolve gradients only
    down to about 1e-16 * f / eps, so an entry that nearly cancels to ~1e-7
    fails the relative tolerance even when analytically correct. The
    quadratic term shifts each entry by 2c * x, clear of that floor, while a
    wrong backward rule still shows up at full size on top of it. The linear
    probe r (bounded away from zero) covers entries sitting exactly at zero,
    such as a fresh bias whose true gradient vanishes identically under batch
    norm, where x^2 contributes nothing to either side of the quotient.
    """
    total = score
    for t in inputs:
        r = (0.7 + 0.3 * np.cos(np.arange(t.size, dtype=np.float64))).reshape(t.shape)
        probe = dt.tensor.add(dt.tensor.mul(t, t), dt.tensor.mul(t, r))
        total = dt.tensor.add(total, dt.tensor.mul(dt.tensor.sum_(probe), c))
    return total


# -- tensor primitives ---------------------------------------------------------


@register("tensor.add")
def _add(rng) -> GradReport:
    w = rng.normal(size=(3, 4))
    return finite_difference_check(
        "tensor.add", lambda i: _weighted(dt.tensor.add(i[0], i[1]), w),
        [rng.normal(size=(3, 4)), rng.normal(size=(4,))])


@register("tensor.sub")
def _sub(rng) -> GradReport:
    w = rng.normal(size=(3, 4))
    return finite_difference_check(
        "tensor.sub", lambda i: _weighted(dt.tensor.sub(i[0], i[1]), w),
        [rng.normal(size=(3, 4)), rng.normal(size=(1, 4))])


@register("tensor.mul")
def _mul(rng) -> GradReport:
    w = rng.normal(size=(3, 4))
    return finite_difference_check(
        "tensor.mul", lambda i: _weighted(dt.tensor.mul(i[0], i[1]), w),
        [rng.normal(size=(3, 4)), rng.normal(size=(3, 4))])


@register("tensor.div")
def _div(rng) -> GradReport:
    w = rng.normal(size=(3, 4))
    return finite_difference_check(
        "tensor.div", lambda i: _weighted(dt.tensor.div(i[0], i[1]), w),
        [rng.normal(size=(3, 4)), _signed(rng, (3, 4), low=0.5)])


@register("tensor.neg")
def _neg(rng) -> GradReport:
    w = rng.normal(size=5)
    return finite_difference_check(
        "tensor.neg", lambda i: _weighted(dt.tensor.neg(i[0]), w),
        [rng.normal(size=5)])


@register("tensor.pow")
def _pow(rng) -> GradReport:
    w = rng.normal(size=(2, 3))
    return finite_difference_check(
        "tensor.pow", lambda i: _weighted(dt.tensor.pow_(i[0], 1.7), w),
        [rng.uniform(0.3, 2.0, size=(2, 3))])


@register("tensor.abs")
def _abs(rng) -> GradReport:
    w = rng.normal(size=(2, 4))
    return finite_difference_check(
        "tensor.abs", lambda i: _weighted(dt.tensor.abs_(i[0]), w),
        [_signed(rng, (2, 4))])


@register("tensor.exp")
def _exp(rng) -> GradReport:
    w = rng.normal(size=(2, 3))
    return finite_difference_check(
        "tensor.exp", lambda i: _weighted(dt.tensor.exp(i[0]), w),
        [rng.normal(0.0, 0.7, size=(2, 3))])


@register("tensor.log")
def _log(rng) -> GradReport:
    w = rng.normal(size=(2, 3))
    return finite_difference_check(
        "tensor.log", lambda i: _weighted(dt.tensor.log(i[0]), w),
        [rng.uniform(0.3, 3.0, size=(2, 3))])


@register("tensor.sqrt")
def _sqrt(rng) -> GradReport:
    w = rng.normal(size=(2, 3))
    return finite_difference_check(
        "tensor.sqrt", lambda i: _weighted(dt.tensor.sqrt(i[0]), w),
        [rng.uniform(0.3, 3.0, size=(2, 3))])


@register("tensor.relu")
def _relu(rng) -> GradReport:
    w = rng.normal(size=(3, 4))
    return finite_difference_check(
        "tensor.relu", lambda i: _weighted(dt.tensor.relu(i[0]), w),
        [_signed(rng, (3, 4))])


@register("tensor.sigmoid")
def _sigmoid(rng) -> GradReport:
    w = rng.normal(size=(3, 4))
    return finite_difference_check(
        "tensor.sigmoid", lambda i: _weighted(dt.tensor.sigmoid(i[0]), w),
        [rng.normal(size=(3, 4))])


@register("tensor.clip")
def _clip(rng) -> GradReport:
    # strictly inside the clamp band, so no probe crosses a bound
    w = rng.normal(size=(3, 4))
    return finite_difference_check(
        "tensor.clip", lambda i: _weighted(dt.tensor.clip(i[0], -1.0, 1.0), w),
        [rng.uniform(-0.7, 0.7, size=(3, 4))])


@register("tensor.where")
def _where(rng) -> GradReport:
    cond = rng.random((3, 4)) < 0.5
    w = rng.normal(size=(3, 4))
    return finite_difference_check(
        "tensor.where", lambda i: _weighted(dt.tensor.where(cond, i[0], i[1]), w),
        [rng.normal(size=(3, 4)), rng.normal(size=(3, 4))])


@register("tensor.matmul")
def _matmul(rng) -> GradReport:
    w = rng.normal(size=(3, 2))
    return finite_difference_check(
        "tensor.matmul", lambda i: _weighted(dt.tensor.matmul(i[0], i[1]), w),
        [rng.normal(size=(3, 4)), rng.normal(size=(4, 2))])


@register("tensor.sum")
def _sum(rng) -> GradReport:
    w = rng.normal(size=(3, 1))
    return finite_difference_check(
        "tensor.sum",
        lambda i: _weighted(dt.tensor.sum_(i[0], axis=1, keepdims=True), w),
        [rng.normal(size=(3, 4))])


@register("tensor.mean")
def _mean(rng) -> GradReport:
    w = rng.normal(size=4)
    return finite_difference_check(
        "tensor.mean", lambda i: _weighted(dt.tensor.mean_(i[0], axis=0), w),
        [rng.normal(size=(3, 4))])


@register("tensor.max")
def _max(rng) -> GradReport:
    w = rng.normal(size=4)
    return finite_difference_check(
        "tensor.max", lambda i: _weighted(dt.tensor.max_(i[0], axis=0), w),
        [_separated(rng, (3, 4))])


@register("tensor.reshape")
def _reshape(rng) -> GradReport:
    w = rng.normal(size=(2, 6))
    return finite_difference_check(
        "tensor.reshape", lambda i: _weighted(dt.tensor.reshape(i[0], (2, 6)), w),
        [rng.normal(size=(3, 4))])


@register("tensor.transpose")
def _transpose(rng) -> GradReport:
    w = rng.normal(size=(4, 2, 3))
    return finite_difference_check(
        "tensor.transpose",
        lambda i: _weighted(dt.tensor.transpose(i[0], (2, 0, 1)), w),
        [rng.normal(size=(2, 3, 4))])


@register("tensor.concat")
def _concat(rng) -> GradReport:
    w = rng.normal(size=(3, 6))
    return finite_difference_check(
        "tensor.concat", lambda i: _weighted(dt.tensor.concat([i[0], i[1]], axis=1), w),
        [rng.normal(size=(3, 2)), rng.normal(size=(3, 4))])


@register("tensor.slice_axis")
def _slice_axis(rng) -> GradReport:
    w = rng.normal(size=(3, 2))
    return finite_difference_check(
        "tensor.slice_axis",
        lambda i: _weighted(dt.tensor.slice_axis(i[0], 1, 1, 3), w),
        [rng.normal(size=(3, 5))])


@register("tensor.gather_rows")
def _gather_rows(rng) -> GradReport:
    idx = np.array([0, 2, 2, 1])  # repetition exercises gradient accumulation
    w = rng.normal(size=(4, 3))
    return finite_difference_check(
        "tensor.gather_rows", lambda i: _weighted(dt.tensor.gather_rows(i[0], idx), w),
        [rng.normal(size=(5, 3))])


@register("tensor.gather_axis1")
def _gather_axis1(rng) -> GradReport:
    idx = np.array([[0, 3], [3, 1], [2, 2]])
    w = rng.normal(size=(2, 3, 2))
    return finite_difference_check(
        "tensor.gather_axis1",
        lambda i: _weighted(dt.tensor.gather_axis1(i[0], idx), w),
        [rng.normal(size=(2, 4))])


@register("tensor.take_along_axis1")
def _take_along_axis1(rng) -> GradReport:
    idx = np.array([[0, 2], [1, 1], [3, 0]])
    w = rng.normal(size=(3, 2))
    return finite_difference_check(
        "tensor.take_along_axis1",
        lambda i: _weighted(dt.tensor.take_along_axis1(i[0], idx), w),
        [rng.normal(size=(3, 4))])


@register("tensor.masked_max")
def _masked_max(rng) -> GradReport:
    counts = np.array([3, 1, 4])
    w = rng.normal(size=(3, 2))
    return finite_difference_check(
        "tensor.masked_max",
        lambda i: _weighted(dt.tensor.masked_max(i[0], counts), w),
        [_separated(rng, (3, 4, 2))])


@register("tensor.scatter_cols")
def _scatter_cols(rng) -> GradReport:
    coords = np.array([[0, 1], [2, 0], [3, 4], [1, 2]])
    w = rng.normal(size=(3, 4, 5))
    return finite_difference_check(
        "tensor.scatter_cols",
        lambda i: _weighted(dt.tensor.scatter_cols(i[0], coords, (4, 5)), w),
        [rng.normal(size=(3, 4))])


@register("tensor.conv2d")
def _conv2d(rng) -> GradReport:
    w = rng.normal(size=(3, 3, 3))
    return finite_difference_check(
        "tensor.conv2d",
        lambda i: _weighted(dt.tensor.conv2d(i[0], i[1], i[2], stride=2, padding=1), w),
        [rng.normal(size=(2, 6, 6)), rng.normal(size=(3, 2, 3, 3)),
         rng.normal(size=3)])


@register("tensor.conv_transpose2d")
def _conv_transpose2d(rng) -> GradReport:
    w = rng.normal(size=(3, 6, 6))
    return finite_difference_check(
        "tensor.conv_transpose2d",
        lambda i: _weighted(dt.tensor.conv_transpose2d(i[0], i[1], i[2], factor=2), w),
        [rng.normal(size=(2, 3, 3)), rng.normal(size=(2, 3, 2, 2)),
         rng.normal(size=3)])


@register("tensor.softmax")
def _softmax(rng) -> GradReport:
    w = rng.normal(size=(3, 4))
    return finite_difference_check(
        "tensor.softmax", lambda i: _weighted(dt.tensor.softmax(i[0], axis=1), w),
        [rng.normal(size=(3, 4))])


# -- layers --------------------------------------------------------------------


@register("nn.linear")
def _linear(rng) -> GradReport:
    lin = nn.Linear("g", 5, 3, rng)
    w = rng.normal(size=(4, 3))

    def fn(i):
        lin.weight.tensor = i[0]
        lin.bias.tensor = i[1]
        return _anchored(_weighted(lin(i[2]), w), i)

    return finite_difference_check(
        "nn.linear", fn,
        [lin.weight.data.copy(), lin.bias.data.copy(), rng.normal(size=(4, 5))])


@register("nn.batchnorm")
def _batchnorm(rng) -> GradReport:
    bn = nn.BatchNorm("g", 3)
    real = np.array([0, 1, 2, 4])
    w = rng.normal(size=(6, 3))

    def fn(i):
        bn.gamma.tensor = i[0]
        bn.beta.tensor = i[1]
        return _anchored(_weighted(bn(i[2], real_rows=real), w), i)

    return finite_difference_check(
        "nn.batchnorm", fn,
        [rng.uniform(0.5, 1.5, size=3), rng.normal(size=3), rng.normal(size=(6, 3))])


@register("nn.batchnorm2d")
def _batchnorm2d(rng) -> GradReport:
    bn = nn.BatchNorm2d("g", 2)
    w = rng.normal(size=(2, 4, 4))

    def fn(i):
        bn.bn.gamma.tensor = i[0]
        return _anchored(_weighted(bn(i[1]), w), i)

    return finite_difference_check(
        "nn.batchnorm2d", fn,
        [rng.uniform(0.5, 1.5, size=2), rng.normal(size=(2, 4, 4))])


# -- encoders --------------------------------------------------------------------


@register("encoder.tiny_pointnet")
def _tiny_pointnet(rng) -> GradReport:
    counts = np.array([2, 4, 3])
    w = rng.normal(size=(4, 3))
    # redraw until the base point clears both kink families by a wide margin:
    # every valid pre-relu entry away from zero, and the per-pillar top-2 gap
    # of the pooled channel away from a max tie
    margin = 2e-2
    for _ in range(500):
        net = TinyPointNet("g", 5, 4, rng)
        feats = rng.normal(size=(3, 4, 5))
        flat = T.Tensor(feats.reshape(12, 5))
        real = np.flatnonzero((np.arange(4)[None, :] < counts[:, None]).reshape(-1))
        z = net.bn(net.linear(flat), real_rows=real).data.reshape(3, 4, 4)
        if min(abs(z[p, j, c]) for p in range(3) for j in range(counts[p])
               for c in range(4)) < margin:
            continue
        h = np.maximum(z, 0.0)
        ok = True
        for p in range(3):
            if counts[p] < 2:
                continue
            top2 = np.sort(h[p, :counts[p], :], axis=0)[-2:, :]
            # an all-clipped channel (top value exactly 0) is smooth as is
            if not np.all((top2[1] == 0.0) | (top2[1] - top2[0] > margin)):
                ok = False
                break
        if ok:
            break
    else:
        raise AssertionError("no kink-free tiny_pointnet instance found")

    def fn(i):
        net.linear.weight.tensor = i[0]
        net.linear.bias.tensor = i[1]
        return _anchored(_weighted(net(i[2], counts), w), i)

    return finite_difference_check(
        "encoder.tiny_pointnet", fn,
        [net.linear.weight.data.copy(), net.linear.bias.data.copy(), feats])


@register("encoder.set_abstraction")
def _set_abstraction(rng) -> GradReport:
    sa = SetAbstraction("g", 3, 4, radius=0.9, max_samples=6, rng=rng)
    xyz = rng.uniform(0.0, 2.0, size=(10, 3))
    w = rng.normal(size=(4, 4))

    def fn(i):
        sa.net.linear.weight.tensor = i[0]
        _, out = sa(xyz, i[1], 4, start=0)
        return _anchored(_weighted(out, w), i)

    return finite_difference_check(
        "encoder.set_abstraction", fn,
        [sa.net.linear.weight.data.copy(), rng.normal(size=(3, 10))])


@register("encoder.feature_propagation")
def _feature_propagation(rng) -> GradReport:
    fp = FeaturePropagation("g", 3 + 4, 4, rng)
    query = rng.uniform(0.0, 2.0, size=(8, 3))
    src = rng.uniform(0.0, 2.0, size=(4, 3))
    w = rng.normal(size=(4, 8))

    def fn(i):
        fp.linear.weight.tensor = i[0]
        return _anchored(_weighted(fp(query, src, i[1], skip_feats=i[2]), w), i)

    return finite_difference_check(
        "encoder.feature_propagation", fn,
        [fp.linear.weight.data.copy(), rng.normal(size=(4, 4)),
         rng.normal(size=(3, 8))])


@register("encoder.point_stream")
def _point_stream(rng) -> GradReport:
    enc = PointStreamEncoder("g", 4, rng, max_samples=8)
    pts = np.column_stack([rng.uniform(-2.0, 2.0, size=(20, 3)),
                           rng.uniform(0.1, 0.9, size=20)])
    w = rng.normal(size=(4, 20))

    def fn(i):
        enc.sa1.net.linear.weight.tensor = i[0]
        enc.fp2.linear.bias.tensor = i[1]
        return _anchored(_weighted(enc(pts), w), i)

    return finite_difference_check(
        "encoder.point_stream", fn,
        [enc.sa1.net.linear.weight.data.copy(), enc.fp2.linear.bias.data.copy()])


@register("encoder.correlation")
def _correlation(rng) -> GradReport:
    w = rng.normal(size=(4, 5))
    return finite_difference_check(
        "encoder.correlation", lambda i: _weighted(correlation(i[0], i[1]), w),
        [rng.normal(size=(3, 4)), rng.normal(size=(3, 5))])


@register("encoder.topk_softmax")
def _topk_softmax(rng) -> GradReport:
    w = rng.normal(size=(3, 3))

    def fn(i):
        _, probs = topk_softmax(i[0], 3)
        return _weighted(probs, w)

    return finite_difference_check("encoder.topk_softmax", fn,
                                   [_separated(rng, (3, 6))])


@register("encoder.aggregate")
def _aggregate(rng) -> GradReport:
    w = rng.normal(size=(3, 4))
    return finite_difference_check(
        "encoder.aggregate", lambda i: _weighted(aggregate(i[0], i[1]), w),
        [rng.normal(size=(3, 4, 2)), rng.uniform(0.1, 0.9, size=(4, 2))])


@register("encoder.read_path")
def _read_path(rng) -> GradReport:
    w = rng.normal(size=(3, 4))

    def fn(i):
        agg, _, _ = correlate_topk_aggregate(i[0], i[1], 3)
        return _anchored(_weighted(agg, w), i)

    return finite_difference_check(
        "encoder.read_path", fn,
        [rng.normal(size=(3, 4)), rng.normal(size=(3, 7))])


@register("encoder.fused_image")
def _fused_image(rng) -> GradReport:
    grid = GridSpec(x_range=(0.0, 0.64), y_range=(-0.32, 0.32),
                    z_range=(-1.0, 1.0), voxel_size=(0.16, 0.16, 2.0))
    coords = np.array([[0, 1], [1, 3], [2, 0], [3, 2]])
    w = rng.normal(size=(6, 4, 4))
    return finite_difference_check(
        "encoder.fused_image",
        lambda i: _weighted(build_fused_image(i[0], i[1], coords, grid), w),
        [rng.normal(size=(3, 4)), rng.normal(size=(3, 4))])


# -- memory --------------------------------------------------------------------


@register("memory.read")
def _memory_read(rng) -> GradReport:
    bank = MemoryBank("g", 8, 4, rng)
    w = rng.normal(size=(4, 5))

    def fn(i):
        bank.items.tensor = i[0]
        agg, _, _ = bank.read(i[1], 3)
        return _anchored(_weighted(agg, w), i)

    return finite_difference_check(
        "memory.read", fn, [bank.items.data.copy(), rng.normal(size=(4, 5))])


@register("memory.alignment")
def _memory_alignment(rng) -> GradReport:
    g_pts = rng.normal(size=(3, 5))
    # per-pillar distances stay well away from the sqrt kink at zero
    diff = rng.normal(size=(3, 5))
    diff /= np.linalg.norm(diff, axis=0, keepdims=True)
    g_mem = g_pts + diff * rng.uniform(0.5, 1.5, size=(1, 5))
    return finite_difference_check(
        "memory.alignment", lambda i: memory_alignment_loss(i[0], i[1]),
        [g_pts, g_mem])


# -- backbone / attention --------------------------------------------------------


@register("backbone.block")
def _backbone_block(rng) -> GradReport:
    block = ConvBlock("g", 2, 3, depth=2, rng=rng)
    w = rng.normal(size=(3, 4, 4))

    def fn(i):
        block.units[0].conv.weight.tensor = i[0]
        return _anchored(_weighted(block(i[1]), w), i)

    return finite_difference_check(
        "backbone.block", fn,
        [block.units[0].conv.weight.data.copy(), rng.normal(size=(2, 8, 8))])


@register("backbone.levels")
def _backbone_levels(rng) -> GradReport:
    net = Backbone("g", 2, 2, depth=1, rng=rng)
    x = rng.normal(size=(2, 8, 8))
    ws = [rng.normal(size=(2, 4, 4)), rng.normal(size=(4, 2, 2)),
          rng.normal(size=(8, 1, 1))]

    def fn(i):
        net.blocks[0].units[0].conv.weight.tensor = i[0]
        levels = net(x)
        total = _weighted(levels[0], ws[0])
        for lvl, w in zip(levels[1:], ws[1:]):
            total = dt.tensor.add(total, _weighted(lvl, w))
        return _anchored(total, i)

    return finite_difference_check(
        "backbone.levels", fn, [net.blocks[0].units[0].conv.weight.data.copy()])


@register("backbone.scale_net")
def _scale_net(rng) -> GradReport:
    grid = GridSpec(x_range=(0.0, 0.64), y_range=(-0.32, 0.32),
                    z_range=(-1.0, 1.0), voxel_size=(0.16, 0.16, 2.0))
    raw = np.zeros((3, 4, 4))
    counts = np.array([2, 4, 1])
    for r in range(3):
        raw[r, : counts[r]] = np.column_stack(
            [rng.uniform(0.0, 0.6, size=(counts[r], 2)),
             rng.uniform(-0.8, 0.8, size=counts[r]),
             rng.uniform(0.1, 0.9, size=counts[r])])
    batch = PillarBatch(features=np.zeros((3, 4, 9)), raw=raw, counts=counts,
                        coords=np.array([[0, 1], [1, 3], [3, 0]]))
    net = ScaleFeatureNet("g", 3, rng)
    w = rng.normal(size=(3, 4, 4))

    def fn(i):
        net.linear.weight.tensor = i[0]
        net.linear.bias.tensor = i[1]
        return _anchored(_weighted(net(batch, grid), w), i)

    return finite_difference_check(
        "backbone.scale_net", fn,
        [net.linear.weight.data.copy(), net.linear.bias.data.copy()])


@register("backbone.attention_gate")
def _attention_gate(rng) -> GradReport:
    gate = AttentionGate("g", rng)
    w = rng.normal(size=(1, 6, 6))

    def fn(i):
        gate.conv.weight.tensor = i[0]
        return _anchored(_weighted(gate(i[1]), w), i)

    # unit-scale source keeps the sigmoid off its saturated tails, where
    # true gradients vanish and the difference quotient is pure noise
    return finite_difference_check(
        "backbone.attention_gate", fn,
        [gate.conv.weight.data.copy(), rng.normal(size=(3, 6, 6))])


@register("backbone.refine")
def _refine(rng) -> GradReport:
    w = rng.normal(size=(2, 4, 4))
    return finite_difference_check(
        "backbone.refine", lambda i: _weighted(refine(i[0], i[1]), w),
        [rng.normal(size=(2, 4, 4)), rng.uniform(0.1, 0.9, size=(1, 4, 4))])


@register("backbone.neck")
def _neck(rng) -> GradReport:
    neck = ScaleAttentiveFusion("g", 2, rng, attention=True)
    levels = [dt.Tensor(_separated(rng, (2, 8, 8))),
              dt.Tensor(_separated(rng, (4, 4, 4)))]
    w = rng.normal(size=(12, 8, 8))

    def fn(i):
        neck.up[0].weight.tensor = i[0]
        return _anchored(_weighted(neck([levels[0], levels[1], i[1]]), w), i)

    return finite_difference_check(
        "backbone.neck", fn,
        [neck.up[0].weight.data.copy(), _separated(rng, (8, 2, 2))])


# -- head -------------------------------------------------------------------------


@register("head.forward")
def _head_forward(rng) -> GradReport:
    head = DetectionHead("g", 4, n_headings=2, rng=rng)
    x = rng.normal(size=(4, 4, 4))
    w_reg = rng.normal(size=(32, 9))
    w_cls = rng.normal(size=32)

    def fn(i):
        head.reg_conv.weight.tensor = i[0]
        head.cls_conv.weight.tensor = i[1]
        reg, cls = head(dt.Tensor(x))
        return _anchored(dt.tensor.add(_weighted(reg, w_reg), _weighted(cls, w_cls)), i)

    return finite_difference_check(
        "head.forward", fn,
        [head.reg_conv.weight.data.copy(), head.cls_conv.weight.data.copy()])


@register("head.focal_loss")
def _focal(rng) -> GradReport:
    targets = (rng.random(10) < 0.3).astype(np.float64)
    return finite_difference_check(
        "head.focal_loss", lambda i: focal_loss_sum(i[0], targets),
        [rng.uniform(-3.0, 3.0, size=10)])


@register("head.direction_loss")
def _direction(rng) -> GradReport:
    bits = rng.integers(0, 2, size=5)
    return finite_difference_check(
        "head.direction_loss", lambda i: direction_loss_sum(i[0], bits),
        [rng.normal(size=(5, 2))])


@register("head.smooth_l1")
def _smooth_l1(rng) -> GradReport:
    # both branches of the Huber corridor, margins clear of |diff| == 1
    targets = np.zeros((4, 7))
    pred = np.concatenate([rng.uniform(-0.5, 0.5, size=(2, 7)),
                           _signed(rng, (2, 7), low=1.5, high=2.5)])
    return finite_difference_check(
        "head.smooth_l1", lambda i: regression_loss_sum(i[0], targets), [pred])


@register("head.combine")
def _combine(rng) -> GradReport:
    return finite_difference_check(
        "head.combine",
        lambda i: combine_losses(i[0], i[1], i[2], i[3], n_pos=3),
        [rng.uniform(0.5, 2.0, size=()) for _ in range(4)])


# -- full model -------------------------------------------------------------------


def _tiny_run_config() -> RunConfig:
    return RunConfig(
        variant="full",
        grid=GridConfig(x_range=(0.0, 1.28), y_range=(-0.64, 0.64),
                        z_range=(-3.0, 1.0), voxel_size=(0.16, 0.16, 4.0),
                        max_points_per_pillar=4, max_pillars=64),
        encoder=EncoderConfig(channels=4, top_k=2, sa_max_samples=6),
        memory=MemoryConfig(items=8, top_k=2),
        backbone=BackboneConfig(depth=1),
        data=DataConfig(n_scenes=1),
    )


@register("model.train_loss")
def _model_train_loss(rng) -> GradReport:
    cfg = _tiny_run_config()
    model = Detector(cfg, rng)
    pts = np.column_stack([rng.uniform(0.05, 1.25, size=30),
                           rng.uniform(-0.6, 0.6, size=30),
                           rng.uniform(-1.5, -0.5, size=30),
                           rng.uniform(0.1, 0.9, size=30)])
    batch = voxelize(pts, model.grid, cfg.grid.max_points_per_pillar,
                     cfg.grid.max_pillars, rng=rng)
    boxes = [GroundTruthBox(center=np.array([0.64, 0.0, -1.0]),
                            size=np.array([0.5, 0.8, 0.6]), heading=0.4)]

    def fn(i):
        model.voxel_net.linear.weight.tensor = i[0]
        model.memory.items.tensor = i[1]
        model.head.cls_conv.bias.tensor = i[2]
        return _anchored(model.forward_train(batch, boxes, points=pts).total, i)

    return finite_difference_check(
        "model.train_loss", fn,
        [model.voxel_net.linear.weight.data.copy(),
         model.memory.items.data.copy(),
         model.head.cls_conv.bias.data.copy()])
