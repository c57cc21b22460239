import numpy as np
import pytest

from bisim_mpc.envs import (DistractorConfig, DistractorWrapper, MdpParseError,
                            PendulumEnv, PointMassEnv, TabularMdp, load_mdp,
                            make_env, random_mdp, save_mdp)


class TestPendulum:
    def test_upright_equilibrium(self):
        obs, reward = PendulumEnv.static_step(np.array([1.0, 0.0, 0.0]), 0.0)
        np.testing.assert_allclose(obs, [1.0, 0.0, 0.0], atol=1e-15)
        assert reward == 0.0

    def test_hanging_reward(self):
        _, reward = PendulumEnv.static_step(np.array([-1.0, 0.0, 0.0]), 0.0)
        assert reward == pytest.approx(-np.pi**2, rel=1e-12)

    def test_energy_pump_from_rest(self):
        # From hanging rest, max torque: thdot = dt * 3/(m l^2) * a = 0.3.
        obs, _ = PendulumEnv.static_step(np.array([-1.0, 0.0, 0.0]), 2.0)
        assert obs[2] == pytest.approx(0.3, rel=1e-12)

    def test_out_of_bounds_action_clipped_and_counted(self):
        env = PendulumEnv()
        env.reset(np.random.default_rng(0))
        env.step(np.array([100.0]))
        assert env.clip_count == 1

    def test_speed_clipped(self):
        env = PendulumEnv()
        env._theta, env._thdot = np.pi / 2, 7.99
        obs, _ = env.step(np.array([2.0]))
        assert abs(obs[2]) <= 8.0

    def test_off_manifold_state_rejected(self):
        with pytest.raises(ValueError):
            PendulumEnv.static_step(np.array([1.0, 1.0, 0.0]), 0.0)

    def test_determinism(self):
        a = PendulumEnv.static_step(np.array([0.6, 0.8, 1.0]), -1.0)
        b = PendulumEnv.static_step(np.array([0.6, 0.8, 1.0]), -1.0)
        np.testing.assert_array_equal(a[0], b[0])
        assert a[1] == b[1]


class TestPointMass:
    def test_goal_rest_is_fixed_point(self):
        env = PointMassEnv()
        env._state = np.zeros(4)
        obs, reward = env.step(np.zeros(2))
        np.testing.assert_array_equal(obs, np.zeros(4))
        assert reward == 0.0

    def test_one_step_from_rest(self):
        env = PointMassEnv()
        env._state = np.array([0.5, 0.0, 0.0, 0.0])
        obs, _ = env.step(np.array([1.0, 0.0]))
        assert obs[2] == pytest.approx(0.05, rel=1e-12)

    def test_reward_never_positive(self):
        env = PointMassEnv()
        rng = np.random.default_rng(0)
        env.reset(rng)
        for _ in range(50):
            _, reward = env.step(rng.uniform(-1, 1, 2))
            assert reward <= 0.0


class TestDistractors:
    def test_config_validation(self):
        with pytest.raises(ValueError):
            DistractorConfig(rho=1.0)
        with pytest.raises(ValueError):
            DistractorConfig(process="brownian")
        with pytest.raises(ValueError):
            DistractorConfig(n_distractors=-1)

    def test_zero_distractors_identity(self):
        base = PointMassEnv()
        wrapped = DistractorWrapper(PointMassEnv(), DistractorConfig(0), seed=3)
        rng1, rng2 = np.random.default_rng(5), np.random.default_rng(5)
        np.testing.assert_array_equal(base.reset(rng1), wrapped.reset(rng2))
        a = np.array([0.3, -0.2])
        np.testing.assert_array_equal(base.step(a)[0], wrapped.step(a)[0])

    def test_distractors_independent_of_actions(self):
        cfg = DistractorConfig(n_distractors=4)
        rng = np.random.default_rng(0)
        rollouts = []
        for action_seed in (1, 2):
            env = DistractorWrapper(PendulumEnv(), cfg, seed=42)
            env.reset(np.random.default_rng(9))
            arng = np.random.default_rng(action_seed)
            traj = [env.step(arng.uniform(-2, 2, 1))[0][3:] for _ in range(20)]
            rollouts.append(np.array(traj))
        np.testing.assert_array_equal(rollouts[0], rollouts[1])

    def test_ar1_stationary_variance(self):
        # rho = 0.9, unit noise: var = 1/(1 - 0.81) ~= 5.263.
        cfg = DistractorConfig(n_distractors=1, rho=0.9, noise_scale=1.0)
        env = DistractorWrapper(PendulumEnv(episode_length=10**9), cfg, seed=0)
        env.reset(np.random.default_rng(0))
        xs = np.empty(100_000)
        for i in range(xs.size):
            env._advance()
            xs[i] = env._d[0]
        expect = 1.0 / (1.0 - 0.81)
        assert abs(xs.var() - expect) / expect < 0.05

    def test_make_env_wires_spec(self):
        env = make_env("pendulum", distractors=DistractorConfig(16),
                       distractor_seed=1)
        assert env.spec.state_dim == 19
        assert env.reset(np.random.default_rng(0)).shape == (19,)

    def test_unknown_task(self):
        with pytest.raises(ValueError):
            make_env("cartpole")


class TestTabularMdp:
    def test_rows_sum_to_one(self):
        mdp = random_mdp(6, 2, seed=0)
        np.testing.assert_allclose(mdp.transitions.sum(axis=-1), 1.0,
                                   atol=1e-15)

    def test_seed_reproducibility(self):
        a = random_mdp(5, 3, seed=11)
        b = random_mdp(5, 3, seed=11)
        np.testing.assert_array_equal(a.transitions, b.transitions)
        np.testing.assert_array_equal(a.rewards, b.rewards)

    def test_sparsity_limits_successors(self):
        mdp = random_mdp(10, 2, sparsity=0.3, seed=4)
        nonzero = (mdp.transitions > 0).sum(axis=-1)
        assert nonzero.max() <= int(np.ceil(0.3 * 10))

    def test_rewards_in_unit_interval(self):
        mdp = random_mdp(8, 3, seed=2)
        assert mdp.rewards.min() >= 0.0 and mdp.rewards.max() <= 1.0

    def test_invalid_mdp_rejected(self):
        p = np.ones((2, 1, 2)) * 0.6     # rows sum to 1.2
        with pytest.raises(ValueError):
            TabularMdp(p, np.zeros((2, 1)), 0.9)
        with pytest.raises(ValueError):
            TabularMdp(np.ones((2, 1, 2)) * 0.5, np.full((2, 1), 1.5), 0.9)


class TestMdpFileFormat:
    def test_round_trip(self, tmp_path):
        mdp = random_mdp(5, 2, seed=7, gamma=0.95)
        path = tmp_path / "m.mdp"
        save_mdp(path, mdp)
        back = load_mdp(path)
        np.testing.assert_array_equal(back.transitions, mdp.transitions)
        np.testing.assert_array_equal(back.rewards, mdp.rewards)
        assert back.gamma == mdp.gamma

    def test_parse_error_names_line(self, tmp_path):
        path = tmp_path / "bad.mdp"
        path.write_text("2 1 0.9\n0.5\n0.7\n1.0 0.0\n0.3 oops\n")
        with pytest.raises(MdpParseError, match="line 5"):
            load_mdp(path)

    def test_wrong_line_count(self, tmp_path):
        path = tmp_path / "short.mdp"
        path.write_text("2 1 0.9\n0.5\n")
        with pytest.raises(MdpParseError, match="expected"):
            load_mdp(path)

    def test_empty_file(self, tmp_path):
        path = tmp_path / "empty.mdp"
        path.write_text("\n")
        with pytest.raises(MdpParseError):
            load_mdp(path)
