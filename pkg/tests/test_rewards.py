import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lenctl.autodiff import Tensor, finite_difference_gradient
from lenctl.grammar import ControlKind, StandardControlPrompt
from lenctl import rewards
from lenctl.rewards import (
    RewardRegressorParams,
    control_error,
    predict_reward,
    regressor_mse,
    rule_reward,
    simulate_reward_dataset,
    train_reward_regressor,
)


def oracle_reward(p: StandardControlPrompt, l_gen: int, grid_max: int = 600) -> int:
    """Independent enumeration oracle: negated distance to the feasible set."""
    feasible = [L for L in range(0, grid_max + 1) if p.satisfied_by(L)]
    return -min(abs(l_gen - L) for L in feasible)


def all_prompts(bounds):
    out = []
    for b in bounds:
        out.append(StandardControlPrompt.more_than(b))
        out.append(StandardControlPrompt.less_than(b))
        out.append(StandardControlPrompt.equal_to(b))
    for lo in bounds:
        for hi in bounds:
            if lo <= hi:
                out.append(StandardControlPrompt.between(lo, hi))
    out.append(StandardControlPrompt.none())
    return out


class TestRuleReward:
    def test_spec_cases(self):
        assert rule_reward(StandardControlPrompt.equal_to(100), 90).value == -10
        assert rule_reward(StandardControlPrompt.more_than(80), 100).value == 0
        assert rule_reward(StandardControlPrompt.between(50, 150), 40).value == -10
        assert rule_reward(StandardControlPrompt.none(), 12345).value == 0

    def test_matches_enumeration_oracle_on_bound_grid(self):
        for p in all_prompts([50, 100, 150]):
            for l_gen in range(0, 301):
                assert rule_reward(p, l_gen).value == oracle_reward(p, l_gen), (p, l_gen)

    def test_normalization(self):
        s = rule_reward(StandardControlPrompt.equal_to(100), 0, max_output_len=256)
        assert s.value == -100 and s.normalized == -100 / 256

    def test_zero_iff_feasible(self):
        for p in all_prompts([60, 110]):
            for l_gen in range(0, 260):
                assert (rule_reward(p, l_gen).value == 0) == p.satisfied_by(l_gen)

    def test_translation_consistency_equal_to(self):
        for k in (-30, -7, 0, 13, 40):
            base = rule_reward(StandardControlPrompt.equal_to(100), 90).value
            assert rule_reward(StandardControlPrompt.equal_to(100 + k), 90 + k).value == base

    def test_degenerate_between_equals_equal_to(self):
        for l_gen in range(0, 300):
            a = rule_reward(StandardControlPrompt.between(77, 77), l_gen).value
            b = rule_reward(StandardControlPrompt.equal_to(77), l_gen).value
            assert a == b

    def test_piecewise_slopes(self):
        for p in all_prompts([55, 120]):
            vals = rewards.rule_reward_lengths(p, np.arange(0, 301))
            slopes = np.diff(vals)
            assert set(np.unique(slopes)) <= {-1.0, 0.0, 1.0}
            assert (np.diff(slopes) != 0).sum() <= 2  # at most two breakpoints

    def test_batch_path_equals_scalar_path(self):
        for p in all_prompts([60, 140]):
            lengths = np.arange(0, 301)
            batch = rewards.rule_reward_lengths(p, lengths)
            scalar = np.array([rule_reward(p, int(l)).value for l in lengths])
            assert np.array_equal(batch, scalar)


class TestControlError:
    def test_negation(self):
        assert control_error(StandardControlPrompt.equal_to(100), 90) == 10.0
        assert control_error(StandardControlPrompt.none(), 9999) == 0.0

    def test_batch_mean_semantics(self):
        p = StandardControlPrompt.between(50, 150)
        lengths = [40, 100, 160]
        mean_err = np.mean([control_error(p, L) for L in lengths])
        assert mean_err == (10 + 0 + 10) / 3


@settings(max_examples=100, deadline=None)
@given(
    lo=st.integers(min_value=50, max_value=150),
    hi=st.integers(min_value=50, max_value=150),
    l_gen=st.integers(min_value=0, max_value=400),
)
def test_between_oracle_property(lo, hi, l_gen):
    lo, hi = min(lo, hi), max(lo, hi)
    p = StandardControlPrompt.between(lo, hi)
    assert rule_reward(p, l_gen).value == oracle_reward(p, l_gen)


class TestRegressor:
    def test_gradient_check(self):
        rng = np.random.default_rng(0)
        data = simulate_reward_dataset(rng, 16)
        x, y = rewards.dataset_matrices(data, 256)
        params = RewardRegressorParams.init(rng, hidden=6)
        tensors = {k: Tensor(v, requires_grad=True) for k, v in params.arrays().items()}
        loss = (rewards._forward(Tensor(x), *[tensors[k] for k in ("w1", "b1", "w2", "b2")]) - Tensor(y)).square().mean()
        loss.backward()
        for name, arr in params.arrays().items():
            def f():
                tt = {k: Tensor(v) for k, v in params.arrays().items()}
                out = rewards._forward(Tensor(x), tt["w1"], tt["b1"], tt["w2"], tt["b2"])
                return float((out - Tensor(y)).square().mean().data)
            g_fd = finite_difference_gradient(f, arr)
            g_an = tensors[name].grad
            rel = np.linalg.norm(g_an - g_fd) / max(np.linalg.norm(g_fd), 1e-12)
            assert rel < 1e-4, (name, rel)

    def test_constant_zero_labels_reachable(self):
        rng = np.random.default_rng(1)
        data = [(p, lg, 0.0) for p, lg, _ in simulate_reward_dataset(rng, 400)]
        params, hist = train_reward_regressor(data, rng, hidden=8, lr=1e-2, epochs=60, batch_size=32)
        assert hist["best_val_mse"] < 1e-4

    def test_small_training_run_learns(self):
        rng = np.random.default_rng(2)
        data = simulate_reward_dataset(rng, 4000)
        params, hist = train_reward_regressor(data, rng, epochs=30, batch_size=64)
        heldout = simulate_reward_dataset(np.random.default_rng(99), 1000)
        assert regressor_mse(params, heldout) < 1e-2

    def test_predict_clamped_nonpositive(self):
        rng = np.random.default_rng(3)
        params = RewardRegressorParams.init(rng)
        for lg in (50, 100, 150):
            assert predict_reward(params, StandardControlPrompt.equal_to(100), lg).normalized <= 0.0

    def test_zero_params_predict_zero(self):
        params = RewardRegressorParams.init(np.random.default_rng(0))
        for a in params.arrays().values():
            a[:] = 0.0
        s = predict_reward(params, StandardControlPrompt.equal_to(100), 90)
        assert s.value == 0.0 and s.normalized == 0.0

    def test_divergence_raises_with_step(self):
        rng = np.random.default_rng(4)
        data = simulate_reward_dataset(rng, 256)
        data[0] = (data[0][0], data[0][1], float("nan"))
        with pytest.raises(rewards.DivergenceError) as err:
            train_reward_regressor(data, rng, epochs=3, val_fraction=0.0)
        assert err.value.step >= 0
