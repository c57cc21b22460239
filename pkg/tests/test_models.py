import numpy as np
import pytest

from bisim_mpc.models import ModelConfig, ModelSet, TARGETED
from bisim_mpc.nncore import Tensor
from conftest import small_models


class TestForwardPaths:
    def test_encode_deterministic(self, rng):
        models = small_models()
        s = rng.normal(size=(4, 3))
        np.testing.assert_array_equal(models.encode_np(s), models.encode_np(s))

    def test_encode_row_independence(self, rng):
        models = small_models()
        s = rng.normal(size=(4, 3))
        full = models.encode_np(s)
        for i in range(4):
            # Row values may differ only by BLAS summation-order noise.
            np.testing.assert_allclose(full[i], models.encode_np(s[i:i + 1])[0],
                                       rtol=1e-12, atol=1e-14)

    def test_encode_dim_mismatch_raises(self, rng):
        models = small_models()
        with pytest.raises(ValueError):
            models.encode(Tensor(rng.normal(size=(2, 5))))

    def test_predict_next_shape_and_determinism(self, rng):
        models = small_models()
        z = rng.normal(size=(3, 4))
        a = rng.normal(size=(3, 1))
        out = models.predict_next_np(z, a)
        assert out.shape == (3, 4)
        np.testing.assert_array_equal(out, models.predict_next_np(z, a))

    def test_encoder_jacobian_vs_fd(self, rng):
        models = small_models()
        s = rng.normal(size=(1, 3))
        st = Tensor(s, requires_grad=True)
        models.encode(st).sum().backward()
        h = 1e-5
        for i in range(3):
            sp, sm = s.copy(), s.copy()
            sp[0, i] += h
            sm[0, i] -= h
            fd = (models.encode_np(sp).sum() - models.encode_np(sm).sum()) / (2 * h)
            assert abs(st.grad[0, i] - fd) / max(abs(fd), 1e-6) < 1e-4

    def test_tape_matches_numpy(self, rng):
        models = small_models()
        z = rng.normal(size=(3, 4))
        a = rng.normal(size=(3, 1))
        np.testing.assert_array_equal(
            models.predict_reward(Tensor(z), Tensor(a)).data[:, 0],
            models.predict_reward_np(z, a))
        np.testing.assert_array_equal(
            models.q_value(Tensor(z), Tensor(a), "min").data[:, 0],
            models.q_np(z, a, "min"))


class TestQValue:
    def test_min_of_copied_heads_equals_head1(self, rng):
        models = small_models()
        for name in models.q1.param_names:
            tgt = name.replace("q1.", "q2.")
            models.store.params[tgt].data[...] = models.store.params[name].data
        z = rng.normal(size=(5, 4))
        a = rng.normal(size=(5, 1))
        np.testing.assert_array_equal(models.q_np(z, a, "min"),
                                      models.q_np(z, a, "head1"))

    def test_min_scalar(self):
        a = Tensor([[3.0]])
        b = Tensor([[5.0]])
        assert a.minimum(b).data[0, 0] == 3.0

    def test_min_gradient_only_through_achieving_head(self, rng):
        models = small_models()
        z = rng.normal(size=(1, 4))
        a = rng.normal(size=(1, 1))
        q1, q2 = models.q_np(z, a, "head1")[0], models.q_np(z, a, "head2")[0]
        assert q1 != q2, "tie would make the subgradient check ambiguous"
        models.store.zero_grad()
        models.q_value(Tensor(z), Tensor(a), "min").sum().backward()
        winner = models.q1 if q1 < q2 else models.q2
        loser = models.q2 if q1 < q2 else models.q1
        assert any(models.store.params[n].grad is not None
                   and np.any(models.store.params[n].grad)
                   for n in winner.param_names)
        for n in loser.param_names:
            g = models.store.params[n].grad
            assert g is None or not np.any(g)

    def test_unknown_mode(self, rng):
        models = small_models()
        with pytest.raises(ValueError):
            models.q_np(rng.normal(size=(1, 4)), rng.normal(size=(1, 1)), "max")


class TestPolicy:
    def test_zero_noise_deterministic(self, rng):
        models = small_models()
        z = rng.normal(size=(3, 4))
        np.testing.assert_array_equal(models.policy_action(z),
                                      models.policy_action(z))

    def test_output_within_bounds(self, rng):
        cfg = ModelConfig(state_dim=3, action_dim=2, latent_dim=4,
                          hidden_dim=8, action_low=-2.0, action_high=0.5)
        models = ModelSet(cfg, rng)
        z = rng.normal(size=(100, 4)) * 50
        a = models.policy_action(z, noise_std=0.5, rng=rng)
        assert np.all(a >= -2.0) and np.all(a <= 0.5)

    def test_noisy_action_reproducible(self, rng):
        models = small_models()
        z = rng.normal(size=(2, 4))
        a1 = models.policy_action(z, 0.5, np.random.default_rng(7))
        a2 = models.policy_action(z, 0.5, np.random.default_rng(7))
        np.testing.assert_array_equal(a1, a2)

    def test_negative_noise_rejected(self, rng):
        models = small_models()
        with pytest.raises(ValueError):
            models.policy_action(rng.normal(size=(1, 4)), noise_std=-0.1)


class TestTargets:
    def test_targets_start_as_copies(self):
        models = small_models()
        for comp in TARGETED:
            for name in getattr(models, comp).param_names:
                np.testing.assert_array_equal(models.targets[name],
                                              models.store.params[name].data)

    def test_zeta_zero_copies_online(self, rng):
        models = small_models()
        for p in models.store.params.values():
            p.data += rng.normal(size=p.data.shape)
        models.update_targets(zeta=0.0)
        for name, tgt in models.targets.items():
            np.testing.assert_array_equal(tgt, models.store.params[name].data)

    def test_equal_params_unchanged(self):
        models = small_models()
        before = {n: t.copy() for n, t in models.targets.items()}
        models.update_targets(zeta=0.99)
        for name, tgt in models.targets.items():
            np.testing.assert_allclose(tgt, before[name], atol=1e-15)

    def test_ema_scalar_case(self):
        # zeta = 0.99, target 0, online 1 -> target 0.01.
        models = small_models()
        name = models.encoder.param_names[0]
        models.targets[name][...] = 0.0
        models.store.params[name].data[...] = 1.0
        models.update_targets(zeta=0.99)
        np.testing.assert_allclose(models.targets[name], 0.01, rtol=1e-12)

    def test_update_skipped_off_schedule(self):
        models = small_models()
        name = models.encoder.param_names[0]
        models.store.params[name].data += 1.0
        before = models.targets[name].copy()
        models.update_targets(zeta=0.5, every=2, step=3)
        np.testing.assert_array_equal(models.targets[name], before)
        models.update_targets(zeta=0.5, every=2, step=4)
        assert np.any(models.targets[name] != before)

    def test_drift_bound(self, rng):
        models = small_models()
        for p in models.store.params.values():
            p.data += rng.normal(size=p.data.shape)
        before = {n: t.copy() for n, t in models.targets.items()}
        zeta = 0.99
        models.update_targets(zeta=zeta)
        for name, tgt in models.targets.items():
            drift = np.abs(tgt - before[name]).max()
            gap = np.abs(models.store.params[name].data - before[name]).max()
            assert drift <= (1 - zeta) * gap + 1e-15

    def test_no_optimizer_state_for_targets(self):
        models = small_models()
        # Target arrays live outside the ParamStore entirely.
        for name in models.targets:
            assert models.targets[name] is not models.store.params[name].data
        assert set(models.store.m) == set(models.store.params)

    def test_invalid_zeta(self):
        models = small_models()
        with pytest.raises(ValueError):
            models.update_targets(zeta=1.0)

    def test_policy_params_live_in_their_own_store(self):
        models = small_models()
        assert set(models.policy_param_names) == set(models.pi_store.params)
        assert not set(models.policy_param_names) & set(models.store.params)
