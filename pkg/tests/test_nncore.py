import numpy as np
import pytest

from bisim_mpc import nncore
from bisim_mpc.nncore import (ContractViolation, MLP, ParamStore, Tensor,
                              affine, elu, layer_norm, load_checkpoint,
                              save_checkpoint)


class TestTensorOps:
    def test_add_mul_grads(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        y = Tensor([3.0, 4.0], requires_grad=True)
        ((x + y) * x).sum().backward()
        # d/dx (x^2 + xy) = 2x + y, d/dy = x
        np.testing.assert_allclose(x.grad, [5.0, 8.0])
        np.testing.assert_allclose(y.grad, [1.0, 2.0])

    def test_broadcast_grad_sums_down(self):
        x = Tensor(np.ones((3, 2)), requires_grad=True)
        b = Tensor(np.zeros(2), requires_grad=True)
        (x + b).sum().backward()
        np.testing.assert_allclose(b.grad, [3.0, 3.0])

    def test_quadratic_grad(self):
        x = Tensor([1.0, -2.0, 3.0], requires_grad=True)
        x.square().sum().backward()
        np.testing.assert_allclose(x.grad, 2 * x.data)

    def test_matmul_outer_product_structure(self):
        rng = np.random.default_rng(0)
        w = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
        x = rng.normal(size=(4, 3))
        Tensor(x).matmul(w).sum().backward()
        np.testing.assert_allclose(w.grad, x.T @ np.ones((4, 2)))

    def test_unused_parameter_gets_no_grad(self):
        x = Tensor([1.0], requires_grad=True)
        p = Tensor([5.0], requires_grad=True)
        x.square().sum().backward()
        assert p.grad is None

    def test_backward_rejects_non_scalar(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(ContractViolation):
            (x * 2).backward()

    def test_minimum_picks_achieving_side(self):
        a = Tensor([3.0, 1.0], requires_grad=True)
        b = Tensor([2.0, 4.0], requires_grad=True)
        a.minimum(b).sum().backward()
        np.testing.assert_allclose(a.grad, [0.0, 1.0])
        np.testing.assert_allclose(b.grad, [1.0, 0.0])

    def test_take_rows_scatter_adds(self):
        x = Tensor(np.arange(6.0).reshape(3, 2), requires_grad=True)
        x.take_rows(np.array([0, 0, 2])).sum().backward()
        np.testing.assert_allclose(x.grad, [[2, 2], [0, 0], [1, 1]])

    def test_row_slice_pads_with_zeros(self):
        x = Tensor(np.ones((4, 2)), requires_grad=True)
        x.row_slice(1, 3).sum().backward()
        np.testing.assert_allclose(x.grad, [[0, 0], [1, 1], [1, 1], [0, 0]])

    def test_non_finite_creation_rejected(self):
        with pytest.raises(ContractViolation):
            Tensor([1.0, np.inf])

    def test_reused_node_accumulates(self):
        x = Tensor([2.0], requires_grad=True)
        y = x * 3.0
        (y + y).sum().backward()
        np.testing.assert_allclose(x.grad, [6.0])


class TestElu:
    def test_values(self):
        x = Tensor([0.0, -1.0, 2.0])
        out = elu(x).data
        np.testing.assert_allclose(out, [0.0, np.exp(-1.0) - 1.0, 2.0])

    def test_continuity_near_zero(self):
        h = 1e-6
        for x0 in (-h, 0.0, h):
            a = elu(Tensor([x0])).data[0]
            b = elu(Tensor([x0 - h])).data[0]
            assert abs(a - b) <= (1 + 1e-9) * h

    def test_gradient_vs_fd(self, rng):
        x = rng.normal(size=7)
        t = Tensor(x, requires_grad=True)
        elu(t).sum().backward()
        h = 1e-7
        fd = (nncore.elu_np(x + h) - nncore.elu_np(x - h)) / (2 * h)
        np.testing.assert_allclose(t.grad, fd, rtol=1e-6, atol=1e-8)


class TestLayerNorm:
    def test_constant_row_maps_to_zero(self):
        x = Tensor(np.full((2, 4), 3.7))
        out = layer_norm(x, Tensor(np.ones(4)), Tensor(np.zeros(4)))
        np.testing.assert_allclose(out.data, 0.0)

    def test_two_point_row(self):
        x = Tensor([[1.0, -1.0]])
        out = layer_norm(x, Tensor(np.ones(2)), Tensor(np.zeros(2)))
        expect = 1.0 / np.sqrt(1.0 + 1e-5)
        np.testing.assert_allclose(out.data, [[expect, -expect]], rtol=1e-12)

    def test_zero_gain_yields_bias(self):
        x = Tensor(np.random.default_rng(0).normal(size=(3, 5)))
        bias = np.arange(5.0)
        out = layer_norm(x, Tensor(np.zeros(5)), Tensor(bias))
        np.testing.assert_allclose(out.data, np.broadcast_to(bias, (3, 5)))

    def test_gradient_vs_fd(self, rng):
        x = rng.normal(size=(2, 4))
        g = rng.normal(size=4)
        b = rng.normal(size=4)
        xt = Tensor(x, requires_grad=True)
        layer_norm(xt, Tensor(g), Tensor(b)).square().sum().backward()
        h = 1e-5
        fd = np.zeros_like(x)
        for i in range(x.size):
            for sgn, acc in ((1, 1.0), (-1, -1.0)):
                xp = x.copy()
                xp.flat[i] += sgn * h
                fd.flat[i] += acc * (nncore.layer_norm_np(xp, g, b) ** 2).sum()
        fd /= 2 * h
        np.testing.assert_allclose(xt.grad, fd, rtol=1e-5, atol=1e-8)


class TestAdam:
    def _store_with(self, value):
        store = ParamStore()
        store.register("p", np.array(value, dtype=np.float64))
        return store

    def test_zero_grad_leaves_params_increments_t(self):
        store = self._store_with([1.0, 2.0])
        store.adam_step({"p": np.zeros(2)}, lr=1e-3)
        np.testing.assert_allclose(store.params["p"].data, [1.0, 2.0])
        assert store.t == 1

    def test_first_step_is_signed_lr(self):
        # Bias-corrected first step: m-hat = g, v-hat = g^2, so the update
        # is lr * g / (|g| + eps) = lr * sign(g) up to eps.
        store = self._store_with([1.0])
        store.adam_step({"p": np.array([0.3])}, lr=1e-3)
        assert store.params["p"].data[0] == pytest.approx(1.0 - 1e-3, abs=1e-9)

    def test_constant_gradient_decreases_twice(self):
        store = self._store_with([1.0])
        vals = [store.params["p"].data[0]]
        for _ in range(2):
            store.adam_step({"p": np.array([0.5])}, lr=1e-3)
            vals.append(store.params["p"].data[0])
        assert vals[2] < vals[1] < vals[0]

    def test_nan_gradient_rejected(self):
        store = self._store_with([1.0])
        with pytest.raises(ContractViolation):
            store.adam_step({"p": np.array([np.nan])}, lr=1e-3)
        assert store.t == 0
        np.testing.assert_allclose(store.params["p"].data, [1.0])

    def test_shape_mismatch_rejected(self):
        store = self._store_with([1.0])
        with pytest.raises(ContractViolation):
            store.adam_step({"p": np.zeros(3)}, lr=1e-3)

    def test_duplicate_registration_rejected(self):
        store = self._store_with([1.0])
        with pytest.raises(ContractViolation):
            store.register("p", np.zeros(1))


class TestMLP:
    def test_forward_matches_numpy_path(self, rng):
        store = ParamStore()
        net = MLP(store, "f", 3, 8, 2, rng, use_layer_norm=True)
        x = rng.normal(size=(5, 3))
        np.testing.assert_array_equal(net.forward(Tensor(x)).data,
                                      net.forward_np(x))

    def test_frozen_forward_gives_no_param_grads(self, rng):
        store = ParamStore()
        net = MLP(store, "f", 3, 8, 2, rng)
        net.forward(Tensor(rng.normal(size=(4, 3))), frozen=True).sum().backward()
        assert all(store.params[n].grad is None for n in net.param_names)

    def test_gradient_vs_fd(self, rng):
        from conftest import fd_grad_check
        store = ParamStore()
        net = MLP(store, "f", 3, 8, 2, rng, use_layer_norm=True)
        x = rng.normal(size=(4, 3))

        def loss():
            return float((net.forward_np(x) ** 2).sum())

        store.zero_grad()
        net.forward(Tensor(x)).square().sum().backward()
        fd_grad_check(loss, store, store.grads(net.param_names), rng)

    def test_init_ranges(self, rng):
        store = ParamStore()
        MLP(store, "f", 9, 16, 4, rng)
        lim = np.sqrt(1.0 / 9)
        assert np.abs(store.params["f.w0"].data).max() <= lim
        np.testing.assert_array_equal(store.params["f.b0"].data, 0.0)


class TestCheckpoint:
    def test_round_trip(self, tmp_path, rng):
        store = ParamStore()
        net = MLP(store, "f", 3, 4, 2, rng)
        x = rng.normal(size=(4, 3))
        net.forward(Tensor(x)).square().sum().backward()
        store.adam_step(store.grads(), lr=1e-3)

        path = tmp_path / "ck.npz"
        extra = {"tgt": rng.normal(size=(2, 2))}
        save_checkpoint(path, store, extra_arrays=extra, rng=rng,
                        meta={"env_step": 7})
        loaded, extra2, rng_state, meta = load_checkpoint(path)

        assert loaded.t == store.t
        assert meta["env_step"] == 7
        for name in store.params:
            np.testing.assert_array_equal(loaded.params[name].data,
                                          store.params[name].data)
            np.testing.assert_array_equal(loaded.m[name], store.m[name])
            np.testing.assert_array_equal(loaded.v[name], store.v[name])
        np.testing.assert_array_equal(extra2["tgt"], extra["tgt"])

        # Restoring the RNG state replays the same stream.
        fresh = np.random.default_rng(0)
        fresh.bit_generator.state = rng_state
        np.testing.assert_array_equal(fresh.normal(size=3), rng.normal(size=3))
