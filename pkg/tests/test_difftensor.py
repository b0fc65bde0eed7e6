"""Tests for the autodiff core: primitives, layers, optimizer, checkpoints."""

import struct

import numpy as np
import pytest

from pillardet.difftensor import Adam, Parameter, Tensor, checkpoint, cosine_lr, nn
from pillardet.difftensor import tensor as dt
from pillardet.difftensor.gradcheck import finite_difference_check, register, registered_names
from pillardet.errors import CheckpointError


def check(name, fn, inputs, tol=1e-4):
    report = finite_difference_check(name, fn, inputs, tol=tol)
    assert report.passed, report.line()
    return report


class TestTensorBasics:
    def test_float64_everywhere(self):
        t = Tensor([1, 2, 3])
        assert t.data.dtype == np.float64

    def test_backward_requires_scalar(self):
        t = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ValueError):
            t.backward()

    def test_detach_blocks_gradient(self):
        x = Tensor(2.0, requires_grad=True)
        y = dt.mul(x.detach(), x)
        y.backward()
        np.testing.assert_allclose(x.grad, 2.0)

    def test_no_grad_builds_no_graph(self):
        x = Tensor(2.0, requires_grad=True)
        with dt.no_grad():
            y = dt.mul(x, x)
        assert not y.requires_grad and y._backward is None

    def test_constant_inputs_get_no_grad(self):
        x = Tensor(3.0)
        y = dt.mul(x, 2.0)
        assert not y.requires_grad

    def test_grad_accumulates_across_uses(self):
        x = Tensor(3.0, requires_grad=True)
        y = dt.add(dt.mul(x, x), x)
        y.backward()
        np.testing.assert_allclose(x.grad, 7.0)


class TestPrimitiveGradients:
    """Central-difference verification for every primitive, random instances."""

    def setup_method(self):
        self.rng = np.random.default_rng(77)

    def test_arithmetic(self):
        r = self.rng
        a = r.normal(size=(3, 4))
        b = r.normal(size=(3, 4)) + 3.0
        check("add", lambda t: dt.sum_(dt.add(t[0], t[1])), [a, b])
        check("sub", lambda t: dt.sum_(dt.mul(dt.sub(t[0], t[1]), t[0])), [a, b])
        check("mul", lambda t: dt.sum_(dt.mul(t[0], t[1])), [a, b])
        check("div", lambda t: dt.sum_(dt.div(t[0], t[1])), [a, b])
        check("neg", lambda t: dt.sum_(dt.mul(dt.neg(t[0]), t[0])), [a])

    def test_broadcast_unbroadcast(self):
        r = self.rng
        a = r.normal(size=(3, 4))
        b = r.normal(size=(4,))
        c = r.normal(size=(3, 1))
        check("add_bcast", lambda t: dt.sum_(dt.mul(dt.add(t[0], t[1]), t[0])), [a, b])
        check("mul_bcast", lambda t: dt.sum_(dt.mul(t[0], t[2])), [a, b, c])

    def test_unary(self):
        r = self.rng
        x = r.normal(size=(12,))
        pos = np.abs(x) + 0.5
        away = x + np.sign(x) * 0.2
        check("pow", lambda t: dt.sum_(dt.pow_(t[0], 3.0)), [pos])
        check("abs", lambda t: dt.sum_(dt.abs_(t[0])), [away])
        check("exp", lambda t: dt.sum_(dt.exp(t[0])), [x])
        check("log", lambda t: dt.sum_(dt.log(t[0])), [pos])
        check("sqrt", lambda t: dt.sum_(dt.sqrt(t[0])), [pos])
        check("relu", lambda t: dt.sum_(dt.relu(t[0])), [away])
        check("sigmoid", lambda t: dt.sum_(dt.sigmoid(t[0])), [x])

    def test_sqrt_zero_subgradient(self):
        x = Tensor(np.array([0.0, 4.0]), requires_grad=True)
        y = dt.sum_(dt.sqrt(x))
        y.backward()
        np.testing.assert_allclose(x.grad, [0.0, 0.25])

    def test_clip_and_where(self):
        r = self.rng
        x = r.normal(size=(10,)) * 2.0
        x = x + np.sign(x) * 0.05  # keep away from clip boundaries at +-1
        y = r.normal(size=(10,))
        cond = r.random(10) > 0.5
        check("clip", lambda t: dt.sum_(dt.mul(dt.clip(t[0], -1.0, 1.0), t[0])), [x])
        check("where", lambda t: dt.sum_(dt.where(cond, t[0], t[1])), [x, y])

    def test_matmul(self):
        r = self.rng
        a = r.normal(size=(3, 5))
        b = r.normal(size=(5, 2))
        proj = Tensor(r.normal(size=(3, 2)))
        check("matmul", lambda t: dt.sum_(dt.mul(dt.matmul(t[0], t[1]), proj)), [a, b])

    def test_matmul_shape_errors(self):
        with pytest.raises(ValueError):
            dt.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))
        with pytest.raises(ValueError):
            dt.matmul(Tensor(np.ones(3)), Tensor(np.ones((3, 2))))

    def test_reductions(self):
        r = self.rng
        a = r.normal(size=(3, 4, 2))
        w = Tensor(r.normal(size=(3, 1, 2)))
        w2 = Tensor(r.normal(size=(4,)))
        w3 = Tensor(r.normal(size=(4, 2)))
        w4 = Tensor(r.normal(size=(3, 2)))
        check("sum_axis", lambda t: dt.sum_(dt.mul(dt.sum_(t[0], axis=1, keepdims=True), w)), [a])
        check("sum_tuple", lambda t: dt.sum_(dt.mul(dt.sum_(t[0], axis=(0, 2)), w2)), [a])
        check("mean", lambda t: dt.sum_(dt.mul(dt.mean_(t[0], axis=0), w3)), [a])
        check("max", lambda t: dt.sum_(dt.mul(dt.max_(t[0], axis=1), w4)), [a])

    def test_max_ties_take_first(self):
        x = Tensor(np.array([[2.0, 2.0, 1.0]]), requires_grad=True)
        dt.sum_(dt.max_(x, axis=1)).backward()
        np.testing.assert_allclose(x.grad, [[1.0, 0.0, 0.0]])

    def test_shape_ops(self):
        r = self.rng
        a = r.normal(size=(2, 3, 4))
        w = Tensor(r.normal(size=(4, 6)))
        w2 = Tensor(r.normal(size=(4, 2, 3)))
        w3 = Tensor(r.normal(size=(2, 5)))
        w4 = Tensor(r.normal(size=(2, 2, 4)))
        check("reshape", lambda t: dt.sum_(dt.mul(dt.reshape(t[0], (4, 6)), w)), [a])
        check("transpose", lambda t: dt.sum_(dt.mul(dt.transpose(t[0], (2, 0, 1)), w2)), [a])
        check("concat", lambda t: dt.sum_(dt.mul(dt.concat([t[0], t[1]], axis=1), w3)),
              [r.normal(size=(2, 3)), r.normal(size=(2, 2))])
        check("slice", lambda t: dt.sum_(dt.mul(dt.slice_axis(t[0], 1, 1, 3), w4)), [a])

    def test_gathers(self):
        r = self.rng
        a = r.normal(size=(5, 3))
        idx = np.array([0, 2, 2, 4])  # repeats must accumulate
        w = Tensor(r.normal(size=(4, 3)))
        check("gather_rows", lambda t: dt.sum_(dt.mul(dt.gather_rows(t[0], idx), w)), [a])
        src = r.normal(size=(3, 6))
        idx2 = np.array([[0, 5], [5, 2]])
        w2 = Tensor(r.normal(size=(3, 2, 2)))
        check("gather_axis1", lambda t: dt.sum_(dt.mul(dt.gather_axis1(t[0], idx2), w2)), [src])
        mat = r.normal(size=(4, 6))
        idx3 = np.array([[0, 1], [2, 2], [5, 0], [3, 4]])
        w3 = Tensor(r.normal(size=(4, 2)))
        check("take_along_axis1", lambda t: dt.sum_(dt.mul(dt.take_along_axis1(t[0], idx3), w3)), [mat])

    def test_masked_max(self):
        r = self.rng
        a = r.normal(size=(4, 5, 3))
        counts = np.array([5, 2, 1, 3])
        w = Tensor(r.normal(size=(4, 3)))
        check("masked_max", lambda t: dt.sum_(dt.mul(dt.masked_max(t[0], counts), w)), [a])

    def test_masked_max_ignores_padding(self):
        a = np.zeros((1, 3, 2))
        a[0, 0] = [1.0, -1.0]
        a[0, 1] = [9.0, 9.0]  # padded slot, must not win
        t = Tensor(a, requires_grad=True)
        out = dt.masked_max(t, np.array([1]))
        np.testing.assert_allclose(out.data, [[1.0, -1.0]])
        dt.sum_(out).backward()
        assert t.grad[0, 1].sum() == 0.0

    def test_masked_max_empty_row(self):
        t = Tensor(np.ones((2, 3, 2)), requires_grad=True)
        out = dt.masked_max(t, np.array([0, 3]))
        np.testing.assert_allclose(out.data[0], 0.0)

    def test_scatter(self):
        r = self.rng
        feats = r.normal(size=(3, 4))
        coords = np.array([[0, 0], [1, 2], [2, 1], [3, 3]])
        w = Tensor(r.normal(size=(3, 4, 4)))
        check("scatter", lambda t: dt.sum_(dt.mul(dt.scatter_cols(t[0], coords, (4, 4)), w)), [feats])

    def test_scatter_rejects_duplicates_and_out_of_grid(self):
        feats = Tensor(np.ones((2, 2)))
        with pytest.raises(ValueError, match="duplicate"):
            dt.scatter_cols(feats, np.array([[0, 0], [0, 0]]), (2, 2))
        with pytest.raises(ValueError, match="outside"):
            dt.scatter_cols(feats, np.array([[0, 0], [0, 5]]), (2, 2))

    def test_conv2d(self):
        r = self.rng
        x = r.normal(size=(2, 6, 6))
        w = r.normal(size=(3, 2, 3, 3)) * 0.5
        b = r.normal(size=(3,))
        proj = Tensor(r.normal(size=(3, 3, 3)))
        check("conv2d_s2p1",
              lambda t: dt.sum_(dt.mul(dt.conv2d(t[0], t[1], t[2], stride=2, padding=1), proj)),
              [x, w, b])
        proj2 = Tensor(r.normal(size=(3, 6, 6)))
        check("conv2d_s1p1",
              lambda t: dt.sum_(dt.mul(dt.conv2d(t[0], t[1], t[2], stride=1, padding=1), proj2)),
              [x, w, b])

    def test_conv2d_channel_mismatch(self):
        with pytest.raises(ValueError, match="channel"):
            dt.conv2d(Tensor(np.ones((2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))))

    def test_conv2d_matches_direct_computation(self):
        r = self.rng
        x = r.normal(size=(1, 4, 4))
        w = r.normal(size=(1, 1, 2, 2))
        out = dt.conv2d(Tensor(x), Tensor(w), stride=2, padding=0)
        expect = np.zeros((1, 2, 2))
        for i in range(2):
            for j in range(2):
                patch = x[0, 2 * i : 2 * i + 2, 2 * j : 2 * j + 2]
                expect[0, i, j] = (patch * w[0, 0]).sum()
        np.testing.assert_allclose(out.data, expect, atol=1e-12)

    def test_conv_transpose2d(self):
        r = self.rng
        x = r.normal(size=(3, 4, 4))
        w = r.normal(size=(3, 2, 2, 2)) * 0.5
        b = r.normal(size=(2,))
        proj = Tensor(r.normal(size=(2, 8, 8)))
        check("conv_transpose2d",
              lambda t: dt.sum_(dt.mul(dt.conv_transpose2d(t[0], t[1], t[2], factor=2), proj)),
              [x, w, b])

    def test_conv_transpose2d_tiles_exactly(self):
        x = np.zeros((1, 2, 2))
        x[0, 0, 1] = 1.0
        w = np.arange(4, dtype=np.float64).reshape(1, 1, 2, 2)
        out = dt.conv_transpose2d(Tensor(x), Tensor(w), factor=2)
        expect = np.zeros((1, 4, 4))
        expect[0, 0:2, 2:4] = w[0, 0]
        np.testing.assert_allclose(out.data, expect)

    def test_softmax(self):
        r = self.rng
        x = r.normal(size=(4, 6)) * 3.0
        proj = Tensor(r.normal(size=(4, 6)))
        check("softmax", lambda t: dt.sum_(dt.mul(dt.softmax(t[0], axis=1), proj)), [x])
        rows = dt.softmax(Tensor(x), axis=1).data.sum(axis=1)
        np.testing.assert_allclose(rows, 1.0, atol=1e-12)

    def test_sigmoid_open_interval(self):
        x = np.linspace(-30, 30, 101)
        y = dt.sigmoid(Tensor(x)).data
        assert np.all(y > 0.0) and np.all(y < 1.0)


class TestLayers:
    def setup_method(self):
        self.rng = np.random.default_rng(5)

    def test_linear_gradients(self):
        r = self.rng
        lin = nn.Linear("lin", 4, 3, r)
        x = r.normal(size=(6, 4))
        proj = Tensor(r.normal(size=(6, 3)))

        def fn(ts):
            lin.weight.tensor, lin.bias.tensor = ts[1], ts[2]
            return dt.sum_(dt.mul(lin(ts[0]), proj))

        check("linear", fn, [x, lin.weight.data.copy(), lin.bias.data.copy()])

    def test_batchnorm_train_gradients_with_mask(self):
        r = self.rng
        bn = nn.BatchNorm("bn", 3)
        x = r.normal(size=(8, 3))
        rows = np.array([0, 1, 2, 5, 7])
        proj = Tensor(r.normal(size=(8, 3)))

        def fn(ts):
            bn.gamma.tensor, bn.beta.tensor = ts[1], ts[2]
            return dt.sum_(dt.mul(bn(ts[0], real_rows=rows), proj))

        check("batchnorm", fn, [x, np.ones(3) + r.normal(size=3) * 0.1, r.normal(size=3)],
              tol=5e-4)

    def test_batchnorm_masked_stats(self):
        """Padded rows must not influence the normalization statistics."""
        bn = nn.BatchNorm("bn", 2)
        real = np.array([[1.0, 2.0], [3.0, 6.0]])
        x = np.vstack([real, np.full((2, 2), 100.0)])
        out = bn(Tensor(x), real_rows=np.array([0, 1]))
        mu = real.mean(axis=0)
        var = real.var(axis=0)
        expect = (real - mu) / np.sqrt(var + bn.eps)
        np.testing.assert_allclose(out.data[:2], expect, atol=1e-12)
        np.testing.assert_allclose(bn.running_mean.value, 0.9 * 0.0 + 0.1 * mu)

    def test_batchnorm_eval_uses_running_stats(self):
        bn = nn.BatchNorm("bn", 2)
        bn.running_mean.value = np.array([1.0, -1.0])
        bn.running_var.value = np.array([4.0, 0.25])
        bn.set_training(False)
        out = bn(Tensor(np.array([[3.0, 0.0]])))
        np.testing.assert_allclose(out.data, [[2.0 / np.sqrt(4 + 1e-5), 1.0 / np.sqrt(0.25 + 1e-5)]],
                                   rtol=1e-9)

    def test_batchnorm_empty_selection_falls_back(self):
        bn = nn.BatchNorm("bn", 2)
        out = bn(Tensor(np.ones((3, 2))), real_rows=np.array([], dtype=np.int64))
        assert np.all(np.isfinite(out.data))

    def test_batchnorm2d_matches_rowwise(self):
        r = self.rng
        bn2 = nn.BatchNorm2d("bn2", 3)
        x = r.normal(size=(3, 4, 4))
        out = bn2(Tensor(x))
        flat = x.reshape(3, -1)
        mu = flat.mean(axis=1, keepdims=True)
        var = flat.var(axis=1, keepdims=True)
        expect = ((flat - mu) / np.sqrt(var + 1e-5)).reshape(3, 4, 4)
        np.testing.assert_allclose(out.data, expect, atol=1e-10)

    def test_module_collects_parameters_and_buffers(self):
        class Net(nn.Module):
            def __init__(self, rng):
                self.a = nn.Linear("a", 2, 2, rng)
                self.blocks = [nn.BatchNorm("b0", 2), nn.BatchNorm("b1", 2)]

        net = Net(self.rng)
        names = {p.name for p in net.parameters()}
        assert names == {"a.weight", "a.bias", "b0.gamma", "b0.beta", "b1.gamma", "b1.beta"}
        assert {b.name for b in net.buffers()} == {
            "b0.running_mean", "b0.running_var", "b1.running_mean", "b1.running_var"}
        nn.check_unique_names(net.parameters(), net.buffers())

    def test_duplicate_names_rejected(self):
        p = [Parameter("w", np.zeros(1)), Parameter("w", np.zeros(1))]
        with pytest.raises(ValueError, match="duplicate"):
            nn.check_unique_names(p)


class TestGradcheckHarness:
    def test_quadratic_hand_case(self):
        """d/dx x^2 at x=3 is 6; central differences are exact for quadratics."""
        report = finite_difference_check("square", lambda t: dt.mul(t[0], t[0]),
                                         [np.array(3.0)])
        assert report.passed
        assert report.max_rel_error < 1e-9

    def test_detects_wrong_gradient(self):
        # f = x * detach(x): analytic grad x, true derivative 2x
        report = finite_difference_check("broken", lambda t: dt.mul(t[0], t[0].detach()),
                                         [np.array(1.5)])
        assert not report.passed

    def test_nonfinite_raises(self):
        with np.errstate(invalid="ignore"), pytest.raises(FloatingPointError):
            finite_difference_check("loggy", lambda t: dt.log(t[0]), [np.array(-1.0)])

    def test_register_rejects_duplicates(self):
        name = "test.dup_probe"
        register(name)(lambda rng: None)
        assert name in registered_names()
        with pytest.raises(ValueError):
            register(name)(lambda rng: None)


class TestAdam:
    def test_first_step_hand_computed(self):
        """w=1, grad 0.5, lr 0.1, wd 0.1: m-hat=0.5, v-hat=0.25, so the Adam
        term is 0.1 * 0.5/(0.5+1e-8) and decay subtracts 0.1*0.1*1."""
        p = Parameter("w", np.array([1.0]))
        p.tensor.grad = np.array([0.5])
        opt = Adam([p], lr=0.1, weight_decay=0.1)
        opt.step()
        expected = 1.0 - 0.1 * (0.5 / (0.5 + 1e-8)) - 0.1 * 0.1 * 1.0
        np.testing.assert_allclose(p.data, [expected], rtol=0, atol=1e-15)

    def test_decay_is_decoupled_from_moments(self):
        """With zero gradient the moments stay zero and only decay acts."""
        p = Parameter("w", np.array([2.0]))
        p.tensor.grad = np.array([0.0])
        opt = Adam([p], lr=0.5, weight_decay=0.1)
        opt.step()
        np.testing.assert_allclose(p.data, [2.0 - 0.5 * 0.1 * 2.0])
        assert np.all(opt.m["w"] == 0.0)

    def test_missing_gradient_names_parameter(self):
        p = Parameter("encoder.weight", np.zeros(2))
        opt = Adam([p])
        with pytest.raises(ValueError, match="encoder.weight"):
            opt.step()

    def test_matches_reference_simulation(self):
        rng = np.random.default_rng(3)
        p = Parameter("w", rng.normal(size=(4,)))
        opt = Adam([p], lr=0.01, weight_decay=0.02)
        w = p.data.copy()
        m = np.zeros(4)
        v = np.zeros(4)
        for t in range(1, 6):
            g = rng.normal(size=(4,))
            p.tensor.grad = g.copy()
            opt.step()
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            mh = m / (1 - 0.9**t)
            vh = v / (1 - 0.999**t)
            w = w - 0.01 * mh / (np.sqrt(vh) + 1e-8) - 0.01 * 0.02 * w
            opt.zero_grad()
        np.testing.assert_allclose(p.data, w, atol=1e-12)

    def test_state_roundtrip(self):
        rng = np.random.default_rng(9)
        p = Parameter("w", rng.normal(size=(3,)))
        opt = Adam([p])
        p.tensor.grad = rng.normal(size=(3,))
        opt.step()
        arrays = dict(opt.state_arrays())
        opt2 = Adam([p])
        opt2.load_state_arrays(arrays)
        assert opt2.t == 1
        np.testing.assert_allclose(opt2.m["w"], opt.m["w"])
        np.testing.assert_allclose(opt2.v["w"], opt.v["w"])


class TestCosineSchedule:
    def test_endpoints_and_midpoint(self):
        assert cosine_lr(0, 100, 3e-3) == pytest.approx(3e-3)
        assert cosine_lr(100, 100, 3e-3) == pytest.approx(0.0, abs=1e-18)
        # frozen fixture: halfway through a 3e-3 schedule sits at 1.5e-3
        assert cosine_lr(50, 100, 3e-3, 0.0) == pytest.approx(1.5e-3, abs=1e-15)

    def test_monotone_decreasing(self):
        values = [cosine_lr(s, 50, 1.0, 0.1) for s in range(51)]
        assert all(a >= b for a, b in zip(values, values[1:]))
        assert values[-1] == pytest.approx(0.1)

    def test_domain_errors(self):
        with pytest.raises(ValueError):
            cosine_lr(-1, 10, 1e-3)
        with pytest.raises(ValueError):
            cosine_lr(11, 10, 1e-3)
        with pytest.raises(ValueError):
            cosine_lr(0, 0, 1e-3)


class TestCheckpoint:
    def _params(self, rng):
        return [("enc.weight", rng.normal(size=(3, 4))),
                ("enc.bias", rng.normal(size=(4,))),
                ("scalar", np.array(2.5))]

    def test_roundtrip(self, tmp_path):
        rng = np.random.default_rng(11)
        params = self._params(rng)
        opt = [("adam.t", np.array([3.0])), ("adam.m.enc.weight", rng.normal(size=(3, 4)))]
        cfg = '{"profile": "desk"}'
        path = tmp_path / "model.ckpt"
        checkpoint.write_checkpoint(path, params, opt, cfg)
        rp, ro, rc = checkpoint.read_checkpoint(path)
        assert rc == cfg
        for name, arr in params:
            np.testing.assert_array_equal(rp[name], arr)
            assert rp[name].shape == arr.shape
        for name, arr in opt:
            np.testing.assert_array_equal(ro[name], arr)

    def test_params_only(self, tmp_path):
        path = tmp_path / "p.ckpt"
        checkpoint.write_checkpoint(path, [("w", np.ones(2))])
        rp, ro, rc = checkpoint.read_checkpoint(path)
        assert ro is None and rc is None
        np.testing.assert_array_equal(rp["w"], np.ones(2))

    def test_exact_byte_layout(self, tmp_path):
        """One scalar parameter named 'w': the record bytes are fully pinned."""
        path = tmp_path / "w.ckpt"
        checkpoint.write_checkpoint(path, [("w", np.array([1.5]))])
        raw = path.read_bytes()
        expect = (b"HVPRCKPT" + struct.pack("<I", 1) + struct.pack("<I", 1)
                  + struct.pack("<I", 1) + b"w" + struct.pack("<I", 1)
                  + struct.pack("<Q", 1) + struct.pack("<d", 1.5))
        assert raw == expect

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"NOTMAGIC" + b"\x00" * 16)
        with pytest.raises(CheckpointError, match="magic"):
            checkpoint.read_checkpoint(path)

    def test_version_mismatch_names_both(self, tmp_path):
        path = tmp_path / "v9.ckpt"
        path.write_bytes(b"HVPRCKPT" + struct.pack("<I", 9) + struct.pack("<I", 0))
        with pytest.raises(CheckpointError, match=r"9.*1"):
            checkpoint.read_checkpoint(path)

    def test_truncation(self, tmp_path):
        rng = np.random.default_rng(2)
        path = tmp_path / "full.ckpt"
        checkpoint.write_checkpoint(path, self._params(rng))
        raw = path.read_bytes()
        clipped = tmp_path / "clipped.ckpt"
        clipped.write_bytes(raw[: len(raw) - 9])
        with pytest.raises(CheckpointError, match="truncated"):
            checkpoint.read_checkpoint(clipped)

    def test_duplicate_names_rejected(self, tmp_path):
        with pytest.raises(ValueError, match="duplicate"):
            checkpoint.write_checkpoint(tmp_path / "d.ckpt",
                                        [("w", np.ones(1)), ("w", np.ones(1))])
