import numpy as np
import pytest

from cardiosynth import diffcore as dc
from cardiosynth.diffcore import Tensor
from cardiosynth.diffcore.conv import conv_output_shape, tconv_output_shape


def naive_conv3d(x, w, b, s, p):
    """Direct six-loop convolution oracle."""
    bn, cin, *sp = x.shape
    cout = w.shape[0]
    k = w.shape[2:]
    xp = np.pad(x, ((0, 0), (0, 0), (p[0], p[0]), (p[1], p[1]), (p[2], p[2])))
    out_sp = tuple((xp.shape[2 + i] - k[i]) // s[i] + 1 for i in range(3))
    out = np.zeros((bn, cout) + out_sp)
    for bi in range(bn):
        for co in range(cout):
            for ox in range(out_sp[0]):
                for oy in range(out_sp[1]):
                    for oz in range(out_sp[2]):
                        acc = 0.0 if b is None else b[co]
                        for ci in range(cin):
                            for k0 in range(k[0]):
                                for k1 in range(k[1]):
                                    for k2 in range(k[2]):
                                        acc += (
                                            xp[bi, ci, ox * s[0] + k0, oy * s[1] + k1, oz * s[2] + k2]
                                            * w[co, ci, k0, k1, k2]
                                        )
                        out[bi, co, ox, oy, oz] = acc
    return out


class TestConv:
    def test_identity_kernel(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(1, 1, 3, 3, 3))
        w = np.ones((1, 1, 1, 1, 1))
        out = dc.conv3d(Tensor(x), Tensor(w), None, stride=1, padding=0)
        assert np.allclose(out.data, x)

    def test_stride2_shape_arithmetic(self):
        rng = np.random.default_rng(1)
        x = Tensor(rng.normal(size=(1, 2, 8, 8, 4)))
        w = Tensor(rng.normal(size=(3, 2, 4, 4, 4)))
        y = dc.conv3d(x, w, None, 2, 1)
        assert y.data.shape == (1, 3, 4, 4, 2)
        wt = Tensor(rng.normal(size=(3, 2, 4, 4, 4)))
        restored = dc.tconv3d(y, wt, None, 2, 1)
        assert restored.data.shape == (1, 2, 8, 8, 4)

    def test_matches_naive_oracle(self):
        rng = np.random.default_rng(2)
        for _ in range(5):
            sp = tuple(rng.integers(3, 8, 3))
            k = tuple(rng.integers(1, 5, 3))
            s = tuple(rng.integers(1, 3, 3))
            p = tuple(int(min(pp, kk - 1)) for pp, kk in zip(rng.integers(0, 3, 3), k))
            try:
                conv_output_shape(sp, k, s, p)
            except ValueError:
                continue
            x = rng.normal(size=(2, 3) + sp)
            w = rng.normal(size=(4, 3) + k)
            b = rng.normal(size=4)
            got = dc.conv3d(Tensor(x), Tensor(w), Tensor(b), s, p).data
            want = naive_conv3d(x, w, b, s, p)
            assert np.max(np.abs(got - want)) < 1e-5 * max(1.0, np.abs(want).max())

    def test_channel_mismatch_raises(self):
        with pytest.raises(ValueError, match="channels"):
            dc.conv3d(Tensor(np.zeros((1, 3, 4, 4, 4))), Tensor(np.zeros((2, 4, 3, 3, 3))))

    def test_adjointness(self):
        # <conv(x, w), y> == <x, tconv(y, w)> with shared weights and no bias
        rng = np.random.default_rng(3)
        for _ in range(5):
            x = rng.normal(size=(2, 3, 8, 6, 4))
            w = rng.normal(size=(5, 3, 4, 4, 4))
            y = rng.normal(size=(2, 5, 4, 3, 2))
            cx = dc.conv3d(Tensor(x), Tensor(w), None, 2, 1).data
            tx = dc.tconv3d(Tensor(y), Tensor(w), None, 2, 1).data
            lhs = float((cx * y).sum())
            rhs = float((x * tx).sum())
            assert abs(lhs - rhs) <= 1e-4 * abs(lhs)

    def test_tconv_doubles_dims(self):
        rng = np.random.default_rng(4)
        x = Tensor(rng.normal(size=(1, 4, 2, 2, 1)))
        w = Tensor(rng.normal(size=(4, 2, 4, 4, 1)))
        out = dc.tconv3d(x, w, None, (2, 2, 1), (1, 1, 0))
        assert out.data.shape == (1, 2, 4, 4, 1)
        assert tconv_output_shape((2, 2, 1), (4, 4, 1), (2, 2, 1), (1, 1, 0)) == (4, 4, 1)

    def test_replay_matches_conv_values_and_input_grad(self):
        rng = np.random.default_rng(5)
        x_data = rng.normal(size=(2, 3, 4, 4, 4))
        w = Tensor(rng.normal(size=(4, 3, 4, 4, 4)) * 0.3, requires_grad=True)
        b = Tensor(rng.normal(size=4) * 0.1, requires_grad=True)

        x1 = Tensor(x_data, requires_grad=True)
        ref = dc.conv3d(x1, w, b, 2, 1)
        dc.mean_all(ref).backward()

        x2 = Tensor(x_data, requires_grad=True)
        rep = dc.conv3d_replay(x2, w, ref.data, 2, 1)
        assert rep.data is ref.data
        dc.mean_all(rep).backward()
        assert np.allclose(x1.grad, x2.grad)

    def test_replay_shape_check(self):
        x = Tensor(np.zeros((1, 2, 4, 4, 4)))
        w = Tensor(np.zeros((3, 2, 4, 4, 4)))
        with pytest.raises(ValueError, match="cached output"):
            dc.conv3d_replay(x, w, np.zeros((1, 3, 4, 4, 4)), 2, 1)


class TestElementwise:
    def test_relu(self):
        out = dc.relu(Tensor(np.array([-1.0, 0.0, 2.0])))
        assert out.data.tolist() == [0.0, 0.0, 2.0]

    def test_softmax_uniform(self):
        out = dc.softmax(Tensor(np.zeros((2, 4))), axis=1)
        assert np.allclose(out.data, 0.25)

    def test_tanh_range(self):
        rng = np.random.default_rng(6)
        out = dc.tanh(Tensor(rng.normal(scale=50.0, size=1000)))
        assert np.all(out.data >= -1.0) and np.all(out.data <= 1.0)

    def test_sigmoid_extremes_stable(self):
        out = dc.sigmoid(Tensor(np.array([-1000.0, 0.0, 1000.0])))
        assert np.isfinite(out.data).all()
        assert out.data[1] == 0.5

    def test_softplus_matches_reference(self):
        x = np.array([-30.0, -1.0, 0.0, 1.0, 30.0])
        out = dc.softplus(Tensor(x))
        assert np.allclose(out.data, np.logaddexp(0.0, x))

    def test_cross_entropy_uniform_logits(self):
        loss = dc.cross_entropy_logits(Tensor(np.zeros((3, 7))), np.array([0, 3, 6]))
        assert loss.item() == pytest.approx(np.log(7.0))

    def test_cross_entropy_bad_target(self):
        with pytest.raises(ValueError, match="target index"):
            dc.cross_entropy_logits(Tensor(np.zeros((1, 7))), np.array([7]))


class TestBackward:
    def test_linear_case_grad_equals_input(self):
        rng = np.random.default_rng(7)
        x = rng.normal(size=(3, 4))
        w = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        loss = dc.sum_all(dc.mul(w, Tensor(x)))
        loss.backward()
        assert np.allclose(w.grad, x)

    def test_l1_subgradient_at_zero_is_zero(self):
        a = Tensor(np.zeros(3), requires_grad=True)
        loss = dc.sum_all(dc.abs_(a))
        loss.backward()
        assert np.all(a.grad == 0.0)

    def test_backward_requires_scalar(self):
        t = Tensor(np.zeros(3), requires_grad=True)
        with pytest.raises(ValueError, match="scalar"):
            dc.relu(t).backward()

    def test_backward_rejects_nan(self):
        t = Tensor(np.array(np.nan), requires_grad=True)
        with pytest.raises(FloatingPointError):
            dc.scale(t, 1.0).backward()

    def test_grad_accumulates_across_uses(self):
        x = Tensor(np.ones(2), requires_grad=True)
        loss = dc.sum_all(dc.add(x, x))
        loss.backward()
        assert np.allclose(x.grad, 2.0)


def _fd_check(build, params, h=1e-5, floor=1e-3):
    loss = build()
    for p in params:
        p.grad = None
    loss.backward()
    worst = 0.0
    for p in params:
        ana = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            lp = build().item()
            flat[i] = orig - h
            lm = build().item()
            flat[i] = orig
            fd = (lp - lm) / (2 * h)
            a = ana.reshape(-1)[i]
            worst = max(worst, abs(a - fd) / max(abs(a), abs(fd), floor))
    return worst


class TestFiniteDifferences:
    def test_every_primitive_fragment(self):
        rng = np.random.default_rng(8)
        x = Tensor(rng.normal(size=(3, 5)))
        w1 = Tensor(rng.normal(size=(5, 6)) * 0.5, requires_grad=True)
        b1 = Tensor(rng.normal(size=6) * 0.2, requires_grad=True)
        w2 = Tensor(rng.normal(size=(12, 2)) * 0.5, requires_grad=True)
        targets = np.array([0, 1, 1])

        def build():
            h = dc.relu(dc.bias_add(dc.matmul(x, w1), b1))
            t = dc.tanh(h)
            s = dc.sigmoid(h)
            cat = dc.concat([t, s], axis=1)
            logits = dc.matmul(cat, w2)
            ce = dc.cross_entropy_logits(logits, targets)
            sm = dc.mean_all(dc.softmax(logits, axis=1))
            sp = dc.mean_all(dc.softplus(dc.narrow(logits, 1, 0, 1)))
            l1 = dc.mean_all(dc.abs_(dc.sub(t, s)))
            bc = dc.mean_all(dc.broadcast_spatial(dc.reshape(t, (3, 6)), (2, 2, 2)))
            return dc.add(dc.add(ce, sm), dc.add(dc.add(sp, l1), bc))

        assert _fd_check(build, [w1, b1, w2]) < 1e-6

    def test_conv_ce_fragment(self):
        rng = np.random.default_rng(9)
        x = Tensor(rng.normal(size=(2, 2, 4, 4, 4)))
        wc = Tensor(rng.normal(size=(3, 2, 4, 4, 4)) * 0.3, requires_grad=True)
        bc = Tensor(rng.normal(size=3) * 0.1, requires_grad=True)
        wf = Tensor(rng.normal(size=(3 * 8, 4)) * 0.3, requires_grad=True)
        targets = np.array([0, 2])

        def build():
            h = dc.relu(dc.conv3d(x, wc, bc, 2, 1))
            flat = dc.reshape(h, (2, 3 * 8))
            return dc.cross_entropy_logits(dc.matmul(flat, wf), targets)

        assert _fd_check(build, [wc, bc, wf]) < 1e-5

    def test_tconv_fragment(self):
        rng = np.random.default_rng(10)
        z = Tensor(rng.normal(size=(2, 6)))
        wt = Tensor(rng.normal(size=(6, 3, 4, 4, 4)) * 0.3, requires_grad=True)
        bt = Tensor(rng.normal(size=3) * 0.1, requires_grad=True)
        target = Tensor(rng.normal(size=(2, 3, 2, 2, 2)))

        def build():
            h = dc.reshape(z, (2, 6, 1, 1, 1))
            y = dc.tconv3d(h, wt, bt, 2, 1)
            return dc.mean_all(dc.abs_(dc.sub(target, y)))

        assert _fd_check(build, [wt, bt]) < 1e-5


class TestAdam:
    def make_store(self, values):
        store = dc.ParamStore()
        t = store.add("p", np.asarray(values, dtype=np.float64))
        return store, t

    def test_first_step_magnitude(self):
        store, t = self.make_store(np.zeros(4))
        lr = 0.1
        t.grad = np.ones(4)
        dc.adam_step(store, lr)
        assert np.allclose(t.data, -lr / (1 + 1e-8), rtol=1e-12)

    def test_zero_gradients_fresh_store_no_change(self):
        store, t = self.make_store(np.full(3, 2.5))
        t.grad = np.zeros(3)
        dc.adam_step(store, 0.1)
        assert np.all(t.data == 2.5)

    def test_lr_zero_updates_moments_only(self):
        store, t = self.make_store(np.full(3, 1.0))
        t.grad = np.ones(3)
        dc.adam_step(store, 0.0)
        assert np.all(t.data == 1.0)
        assert np.allclose(store["p"].m, 0.1)
        assert np.allclose(store["p"].v, 0.001)

    def test_weight_decay_applied_before_update(self):
        store, t = self.make_store(np.full(2, 1.0))
        t.grad = np.zeros(2)
        dc.adam_step(store, lr=0.5, weight_decay=0.1)
        assert np.allclose(t.data, 1.0 - 0.5 * 0.1 * 1.0)

    def test_matches_manual_recurrence_two_steps(self):
        store, t = self.make_store(np.array([1.0]))
        lr, b1, b2, eps = 0.01, 0.9, 0.999, 1e-8
        p, m, v = 1.0, 0.0, 0.0
        for step, g in enumerate([0.3, -0.7], start=1):
            t.grad = np.array([g])
            dc.adam_step(store, lr, b1, b2, eps)
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            p -= lr * (m / (1 - b1**step)) / (np.sqrt(v / (1 - b2**step)) + eps)
            assert t.data[0] == pytest.approx(p, rel=1e-12)

    def test_deterministic_across_runs(self):
        def run():
            rng = np.random.default_rng(0)
            store = dc.ParamStore()
            t = store.add("w", rng.normal(size=(4, 4)).astype(np.float32))
            for _ in range(10):
                t.grad = rng.normal(size=(4, 4)).astype(np.float32)
                dc.adam_step(store, 1e-3, weight_decay=1e-5)
            return t.data.tobytes()

        assert run() == run()


class TestGradCheckHarness:
    def test_dense_l1_passes(self):
        rng = np.random.default_rng(11)
        store = dc.ParamStore()
        w = store.add("w", rng.normal(size=(4, 3)) * 0.5)
        b = store.add("b", rng.normal(size=3) * 0.2)
        x = Tensor(rng.normal(size=(5, 4)))
        target = Tensor(rng.normal(size=(5, 3)))

        def losses():
            pred = dc.bias_add(dc.matmul(x, w), b)
            return {"l1": dc.mean_all(dc.abs_(dc.sub(target, pred)))}

        report = dc.grad_check(losses, {"s": store})
        assert report.passed()
        assert report.max_rel_err < 1e-6

    def test_conv_ce_passes(self):
        rng = np.random.default_rng(12)
        store = dc.ParamStore()
        w = store.add("w", rng.normal(size=(3, 2, 4, 4, 4)) * 0.3)
        b = store.add("b", rng.normal(size=3) * 0.1)
        fc = store.add("fc", rng.normal(size=(24, 5)) * 0.3)
        x = Tensor(rng.normal(size=(2, 2, 4, 4, 4)))
        targets = np.array([1, 4])

        def losses():
            h = dc.relu(dc.conv3d(x, w, b, 2, 1))
            logits = dc.matmul(dc.reshape(h, (2, 24)), fc)
            return {"ce": dc.cross_entropy_logits(logits, targets)}

        report = dc.grad_check(losses, {"s": store})
        assert report.passed()
        assert report.max_rel_err < 1e-5

    def test_corrupted_gradient_flagged(self):
        from cardiosynth.diffcore import tensor as tensor_mod

        rng = np.random.default_rng(13)
        store = dc.ParamStore()
        w = store.add("w", rng.normal(size=(3, 2)))
        x = Tensor(rng.normal(size=(4, 3)))

        def bad_losses():
            good = dc.mean_all(dc.matmul(x, w))
            # node whose backward reports twice the true gradient
            bad = Tensor(
                good.data.copy(),
                requires_grad=True,
                parents=(w,),
                backward_fn=lambda g: tensor_mod.accumulate(w, 2.0 * g * (x.data.T @ np.full((4, 2), 1.0 / 24))),
            )
            return {"bad": bad}

        report = dc.grad_check(bad_losses, {"s": store})
        assert not report.passed()

    def test_max_elements_subsampling(self):
        rng = np.random.default_rng(14)
        store = dc.ParamStore()
        w = store.add("w", rng.normal(size=(10, 10)))
        x = Tensor(rng.normal(size=(2, 10)))

        def losses():
            return {"s": dc.mean_all(dc.matmul(x, w))}

        report = dc.grad_check(losses, {"s": store}, max_elements=7)
        assert report.passed()

    def test_report_csv_shape(self):
        rng = np.random.default_rng(15)
        store = dc.ParamStore()
        store.add("w", rng.normal(size=(2, 2)))
        x = Tensor(rng.normal(size=(1, 2)))

        def losses():
            return {"m": dc.mean_all(dc.matmul(x, store["w"].tensor))}

        report = dc.grad_check(losses, {"s": store})
        lines = report.to_csv().strip().splitlines()
        assert lines[0] == "param,max_rel_err,pass"
        assert len(lines) == 2


class TestDeterminism:
    def test_identical_seeds_identical_params(self):
        from cardiosynth.model import ModelConfig, SynthesisModel

        cfg = ModelConfig.micro()
        m1 = SynthesisModel(cfg, seed=5)
        m2 = SynthesisModel(cfg, seed=5)
        for store1, store2 in zip(m1.stores.values(), m2.stores.values()):
            for (n1, p1), (n2, p2) in zip(store1.items(), store2.items()):
                assert n1 == n2
                assert np.array_equal(p1.tensor.data, p2.tensor.data)
