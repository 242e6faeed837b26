"""Attack contracts: projection invariants, reductions, and the corner oracle."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from batlab import attack
from batlab.attack import AttackConfig, evaluation_attack, fgsm, pgd
from batlab.autodiff import softmax_cross_entropy, Tensor
from batlab.errors import ContractError
from batlab.model import forward, init_mlp

from oracles import corner_search_max_loss, cross_entropy_mean


def _loss_at(model, x, y):
    logits = forward(model, np.atleast_2d(x)).logits
    return softmax_cross_entropy(logits, np.atleast_1d(y)).item()


def _random_linear_model(rng, dim, classes=2, scale=3.0):
    m = init_mlp(dim, [], classes, seed=int(rng.integers(0, 2 ** 31)))
    m.weights[0].data[...] = rng.normal(size=(classes, dim)) * scale
    m.biases[0].data[...] = rng.normal(size=classes) * 0.5
    return m


class TestConfigValidation:
    def test_negative_epsilon(self):
        with pytest.raises(ContractError):
            AttackConfig(epsilon=-0.1, step_size=0.1, steps=1)

    def test_zero_step_size_with_steps(self):
        with pytest.raises(ContractError):
            AttackConfig(epsilon=0.1, step_size=0.0, steps=3)

    def test_bad_clamp_range(self):
        with pytest.raises(ContractError):
            AttackConfig(epsilon=0.1, step_size=0.1, steps=1,
                         clamp_min=1.0, clamp_max=0.0)


class TestBasicContracts:
    def test_epsilon_zero_returns_input_exactly(self):
        rng = np.random.default_rng(0)
        m = init_mlp(4, [6], 3, seed=1)
        x = rng.uniform(size=(5, 4))
        y = rng.integers(0, 3, size=5)
        cfg = AttackConfig(epsilon=0.0, step_size=0.1, steps=5, random_init=True)
        out = pgd(m, x, y, cfg, rng=np.random.default_rng(1))
        assert np.array_equal(out, x)

    def test_clamp_saturates_near_boundary(self):
        # Linear model engineered so the input gradient is positive everywhere.
        m = init_mlp(2, [], 2, seed=0)
        m.weights[0].data[...] = np.array([[-1.0, -1.0], [1.0, 1.0]])
        m.biases[0].data[...] = 0.0
        x = np.array([[0.99, 0.5]])
        y = np.array([0])
        out = fgsm(m, x, y, AttackConfig(epsilon=0.05, step_size=0.05, steps=1))
        assert out[0, 0] == 1.0
        assert out[0, 1] == pytest.approx(0.55, abs=1e-15)

    def test_single_step_pgd_equals_fgsm(self):
        rng = np.random.default_rng(5)
        m = init_mlp(6, [8], 3, seed=2)
        x = rng.uniform(size=(7, 6))
        y = rng.integers(0, 3, size=7)
        cfg = AttackConfig(epsilon=0.07, step_size=0.07, steps=1, random_init=False)
        assert np.array_equal(pgd(m, x, y, cfg), fgsm(m, x, y, cfg))

    def test_deterministic_without_random_init(self):
        rng = np.random.default_rng(8)
        m = init_mlp(5, [6], 2, seed=3)
        x = rng.uniform(size=(4, 5))
        y = rng.integers(0, 2, size=4)
        cfg = AttackConfig(epsilon=0.05, step_size=0.0125, steps=10, random_init=False)
        assert np.array_equal(pgd(m, x, y, cfg), pgd(m, x, y, cfg))

    def test_deterministic_in_seed_with_random_init(self):
        rng = np.random.default_rng(9)
        m = init_mlp(5, [6], 2, seed=3)
        x = rng.uniform(size=(4, 5))
        y = rng.integers(0, 2, size=4)
        cfg = AttackConfig(epsilon=0.05, step_size=0.0125, steps=5, random_init=True)
        a = pgd(m, x, y, cfg, rng=np.random.default_rng(42))
        b = pgd(m, x, y, cfg, rng=np.random.default_rng(42))
        c = pgd(m, x, y, cfg, rng=np.random.default_rng(43))
        assert np.array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_call_counter_increments(self):
        attack.reset_call_counts()
        m = init_mlp(3, [], 2, seed=0)
        x = np.full((1, 3), 0.5)
        y = np.array([0])
        cfg = AttackConfig(epsilon=0.01, step_size=0.01, steps=1)
        fgsm(m, x, y, cfg)
        pgd(m, x, y, cfg)
        assert attack.call_counts == {"fgsm": 1, "pgd": 1}

    def test_no_gradient_leaks_into_model(self):
        m = init_mlp(4, [5], 2, seed=7)
        x = np.random.default_rng(1).uniform(size=(3, 4))
        y = np.array([0, 1, 0])
        pgd(m, x, y, AttackConfig(epsilon=0.05, step_size=0.0125, steps=10))
        assert all(p.grad is None for p in m.parameters())


class TestProjectionInvariant:
    @given(st.integers(min_value=0, max_value=2 ** 31 - 1))
    @settings(max_examples=60, deadline=None)
    def test_fuzzed_configs_stay_in_ball_and_clamp(self, seed):
        rng = np.random.default_rng(seed)
        dim = int(rng.integers(1, 8))
        batch = int(rng.integers(1, 5))
        m = init_mlp(dim, [int(rng.integers(1, 9))], int(rng.integers(2, 5)),
                     seed=int(rng.integers(0, 1000)))
        x = rng.uniform(size=(batch, dim))
        y = rng.integers(0, m.num_classes, size=batch)
        cfg = AttackConfig(
            epsilon=float(rng.uniform(0, 0.5)),
            step_size=float(rng.uniform(1e-4, 0.6)),
            steps=int(rng.integers(0, 12)),
            random_init=bool(rng.integers(0, 2)),
        )
        out = pgd(m, x, y, cfg, rng=rng)
        assert np.abs(out - x).max() <= cfg.epsilon + 1e-12
        assert out.min() >= cfg.clamp_min and out.max() <= cfg.clamp_max

    def test_adversarial_loss_not_below_clean_on_linear(self):
        rng = np.random.default_rng(123)
        for _ in range(10):
            m = _random_linear_model(rng, dim=6)
            x = rng.uniform(0.2, 0.8, size=6)
            y = int(rng.integers(0, 2))
            clean = _loss_at(m, x, y)
            cfg = AttackConfig(epsilon=0.1, step_size=0.025, steps=8,
                               random_init=False)
            adv = _loss_at(m, pgd(m, x[None, :], np.array([y]), cfg)[0], y)
            assert adv >= clean - 1e-12


class TestCornerOracle:
    """On affine two-class models the box maximum sits at a corner and a single
    signed step reaches it; the oracle enumerates all corners independently."""

    @pytest.mark.parametrize("seed", range(8))
    def test_fgsm_and_pgd_reach_corner_maximum(self, seed):
        rng = np.random.default_rng(300 + seed)
        dim = int(rng.integers(2, 9))
        m = _random_linear_model(rng, dim)
        x = rng.uniform(0.05, 0.95, size=dim)
        y = int(rng.integers(0, 2))
        eps = 0.1
        oracle = corner_search_max_loss(
            [w.data for w in m.weights], [b.data for b in m.biases], x, y, eps)

        cfg1 = AttackConfig(epsilon=eps, step_size=eps, steps=1)
        x_fgsm = fgsm(m, x[None, :], np.array([y]), cfg1)[0]
        assert abs(_loss_at(m, x_fgsm, y) - oracle) <= 1e-9

        cfg20 = AttackConfig(epsilon=eps, step_size=eps / 4, steps=20)
        x_pgd = pgd(m, x[None, :], np.array([y]), cfg20)[0]
        assert abs(_loss_at(m, x_pgd, y) - oracle) <= 1e-9
