import json
import math

import numpy as np
import pytest

from gfcs.directions import FixedBasisSource, OdsSource
from gfcs.engine import (
    AttackConfig,
    AttackState,
    QueryOracle,
    default_nu,
    evaluate_candidate,
    gf_only_attack,
    gfcs_attack,
    is_adversarial,
    pick_target_class,
    simba_attack,
    step_trial,
    victim_loss,
    write_trace,
)
from gfcs.errors import BudgetExceededError, InvalidInputError
from gfcs.layers import Affine
from gfcs.models import ScoreModel
from gfcs.numerics import RandomStream


def linear(weight, bias=None):
    weight = np.asarray(weight, dtype=float)
    bias = np.zeros(weight.shape[0]) if bias is None else np.asarray(bias, dtype=float)
    return ScoreModel([Affine(weight, bias)], (weight.shape[1],), weight.shape[0])


def start(victim, x_in, **config):
    cfg = AttackConfig(**config)
    x_in = np.asarray(x_in, dtype=float)
    return QueryOracle(victim, cfg.budget), x_in, victim.forward_scores(x_in), cfg


def orthogonal_pair():
    """Victim reads coordinates 0-1; the surrogate margin gradient lies in 2-3."""
    victim = linear(
        [[1, 0, 0, 0], [0, 1, 0, 0], [0, 0, 0, 0]], bias=[0.0, 0.0, -100.0]
    )
    surrogate = linear([[0, 0, 1, 0], [0, 0, 0, 1], [1, -1, 0, 0]])
    return victim, surrogate


def test_default_nu():
    assert default_nu(768) == pytest.approx(math.sqrt(0.768))
    assert AttackConfig().radius(1000) == pytest.approx(1.0)
    assert AttackConfig(nu=5.0).radius(1000) == 5.0


def test_config_validation():
    with pytest.raises(InvalidInputError, match="step length must be positive"):
        _ = AttackConfig(epsilon=0.0)
    with pytest.raises(InvalidInputError, match="norm bound must be positive"):
        _ = AttackConfig(nu=-1.0)
    with pytest.raises(InvalidInputError, match="the targeted-log loss needs a target"):
        _ = AttackConfig(loss="targeted-log")
    with pytest.raises(InvalidInputError, match="invalid clamp range"):
        _ = AttackConfig(clamp=(1.0, 0.0))


def test_victim_loss_is_positive_iff_adversarial():
    cfg = AttackConfig()
    for scores in ([3.0, 1.0, 2.0], [1.0, 3.0, 2.0], [1.0, 2.0, 3.0]):
        scores = np.array(scores)
        assert (victim_loss(scores, cfg, 0) > 0) == is_adversarial(scores, cfg, 0)
    targeted = AttackConfig(target=2)
    assert victim_loss(np.array([1.0, 2.0, 3.0]), targeted, 0) == 1.0
    assert victim_loss(np.array([3.0, 2.0, 1.0]), targeted, 0) == -2.0


def test_oracle_budget():
    oracle = QueryOracle(linear(np.eye(2)), budget=1)
    oracle.query(np.zeros(2))
    assert oracle.query_count == 1
    with pytest.raises(BudgetExceededError, match="query budget exhausted: 1"):
        oracle.query(np.zeros(2))


def test_step_trial_orthogonal_direction_is_rejected():
    oracle, x_in, scores, cfg = start(linear(np.eye(3)[:2]), [1.0, 0.0, 0.0], nu=10.0)
    state = AttackState.start(x_in, scores, cfg)
    assert not step_trial(oracle, state, np.array([0.0, 0.0, 1.0]), cfg)
    assert oracle.query_count == 2
    assert np.array_equal(state.x, x_in)
    assert state.loss == -1.0


def test_step_trial_accepts_first_improving_sign():
    oracle, x_in, scores, cfg = start(
        linear(np.eye(3)[:2]), [1.0, 0.0, 0.0], nu=10.0, epsilon=0.5
    )
    state = AttackState.start(x_in, scores, cfg)
    assert step_trial(oracle, state, np.array([1.0, 0.0, 0.0]), cfg)
    assert oracle.query_count == 2
    assert np.allclose(state.x, [0.5, 0.0, 0.0])
    assert state.loss == pytest.approx(-0.5)
    assert oracle.point is not None and np.array_equal(oracle.point, state.x)


def test_candidates_are_projected():
    oracle, x_in, scores, cfg = start(
        linear(np.eye(3)[:2]), [1.0, 0.0, 0.0], nu=0.3, epsilon=2.0
    )
    state = AttackState.start(x_in, scores, cfg)
    evaluation = evaluate_candidate(oracle, state, x_in + [0.0, 2.0, 0.0], cfg)
    assert np.linalg.norm(evaluation.point - x_in) == pytest.approx(0.3)
    assert oracle.query_count == 1


def test_clamp_warns():
    oracle, x_in, scores, cfg = start(
        linear(np.eye(2)), [0.0, 0.0], nu=10.0, clamp=(0.0, 1.0)
    )
    state = AttackState.start(x_in, scores, cfg)
    with pytest.warns(UserWarning, match="box clamp applied"):
        evaluation = evaluate_candidate(oracle, state, np.array([-0.5, 0.5]), cfg)
    assert evaluation.clamped
    assert np.array_equal(evaluation.point, [0.0, 0.5])


def test_scripted_query_accounting():
    victim = linear(np.eye(3)[:2])
    oracle, x_in, scores, cfg = start(
        victim, [1.0, 0.0, 0.0], nu=10.0, epsilon=0.4, trace=True
    )
    directions = np.array(
        [[0.0, 0.0, 1.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 1.0, 0.0]]
    )
    result = simba_attack(oracle, FixedBasisSource(directions), x_in, scores, cfg)
    assert result.success
    assert result.total_queries == 6
    assert result.basis_queries == 6
    assert result.gradient_queries == 0 and result.coimage_queries == 0
    assert result.final_class == 1
    assert result.final_norm == pytest.approx(math.sqrt(0.8))
    assert [r["accepted"] for r in result.trace] == [False, False, False, True, True, True]
    assert [r["alpha"] for r in result.trace] == [0.4, -0.4, 0.4, -0.4, 0.4, 0.4]
    assert [r["queries"] for r in result.trace] == [1, 2, 3, 4, 5, 6]


def test_white_box_linear_closed_form():
    victim = linear([[1, 0, 0, 0], [0, 1, 0, 0]])
    oracle, x_in, scores, cfg = start(victim, [3.0, 0.0, 0.0, 0.0], nu=10.0, epsilon=0.5)
    result = gfcs_attack(oracle, [victim], x_in, scores, cfg, RandomStream(0))
    # distance to the boundary is 3 / sqrt(2); each accepted step covers epsilon
    expected = math.ceil(3 / math.sqrt(2) / 0.5)
    assert result.success
    assert result.total_queries == expected == 5
    assert result.gradient_queries == 5
    assert result.coimage_queries == 0
    assert result.final_norm == pytest.approx(2.5)
    assert result.reason is None


def test_orthogonal_gradient_falls_back_to_coimage():
    victim, surrogate = orthogonal_pair()
    oracle, x_in, scores, cfg = start(victim, [1.0, 0.0, 0.0, 0.0], nu=100.0, trace=True)
    result = gfcs_attack(oracle, [surrogate], x_in, scores, cfg, RandomStream(1))
    assert result.success
    assert result.coimage_queries > 0
    assert result.gradient_queries >= 2 and result.gradient_queries % 2 == 0
    assert result.total_queries == result.gradient_queries + result.coimage_queries
    assert result.total_queries == oracle.query_count
    first, second = result.trace[:2]
    assert first["branch"] == second["branch"] == "gradient"
    assert not first["accepted"] and not second["accepted"]
    assert result.trace[2]["branch"] == "coimage"
    assert not any(r["accepted"] for r in result.trace if r["branch"] == "gradient")


def test_gf_only_fails_on_orthogonal_gradient():
    victim, surrogate = orthogonal_pair()
    oracle, x_in, scores, cfg = start(victim, [1.0, 0.0, 0.0, 0.0], nu=100.0)
    result = gf_only_attack(oracle, [surrogate], x_in, scores, cfg, RandomStream(1))
    assert not result.success
    assert result.reason == "surrogates-exhausted"
    assert result.total_queries == result.gradient_queries == 2
    assert result.final_norm == 0.0


def test_budget_exhaustion():
    victim = linear([[1, 0, 0, 0], [0, 1, 0, 0]])
    for budget, queries in [(0, 0), (1, 1), (4, 4)]:
        oracle, x_in, scores, cfg = start(
            victim, [3.0, 0.0, 0.0, 0.0], nu=10.0, epsilon=0.5, budget=budget
        )
        result = gfcs_attack(oracle, [victim], x_in, scores, cfg, RandomStream(0))
        assert not result.success
        assert result.reason == "budget"
        assert result.total_queries == queries


def test_norm_bound_caps_progress():
    victim = linear([[1, 0, 0, 0], [0, 1, 0, 0]])
    oracle, x_in, scores, cfg = start(
        victim, [3.0, 0.0, 0.0, 0.0], nu=1.0, epsilon=0.5, budget=200, trace=True
    )
    result = gfcs_attack(oracle, [victim], x_in, scores, cfg, RandomStream(0))
    assert not result.success
    assert result.reason == "budget"
    assert result.final_norm <= 1.0 * (1 + 1e-9)
    assert result.total_queries == 200


def test_targeted_attack():
    victim = linear(np.eye(3), bias=[2.0, 0.0, 0.0])
    oracle, x_in, scores, cfg = start(
        victim, [0.0, 0.0, 0.0], nu=10.0, target=2, loss="targeted-log"
    )
    result = gfcs_attack(oracle, [victim], x_in, scores, cfg, RandomStream(0))
    assert result.success
    assert result.final_class == 2


def test_simba_ods_white_box():
    victim = linear([[1, 0, 0, 0], [0, 1, 0, 0]])
    oracle, x_in, scores, cfg = start(victim, [1.0, 0.0, 0.0, 0.0], nu=10.0)
    source = OdsSource([victim], RandomStream(2))
    result = simba_attack(oracle, source, x_in, scores, cfg)
    assert result.success
    assert result.coimage_queries == result.total_queries > 0


def test_degenerate_surrogates_stop_the_attack():
    victim = linear(np.eye(2))
    zero = linear(np.zeros((2, 2)))
    oracle, x_in, scores, cfg = start(victim, [1.0, 0.0], nu=10.0, max_degenerate=5)
    result = gfcs_attack(oracle, [zero], x_in, scores, cfg, RandomStream(0))
    assert result.reason == "degenerate-directions"
    assert result.total_queries == 0
    oracle, x_in, scores, cfg = start(victim, [1.0, 0.0], nu=10.0, max_degenerate=5)
    result = simba_attack(oracle, OdsSource([zero], RandomStream(0)), x_in, scores, cfg)
    assert result.reason == "degenerate-directions"


def test_basis_exhaustion():
    victim = linear(np.eye(3)[:2])
    oracle, x_in, scores, cfg = start(victim, [1.0, 0.0, 0.0], nu=10.0)
    source = FixedBasisSource(np.array([[0.0, 0.0, 1.0]]))
    result = simba_attack(oracle, source, x_in, scores, cfg)
    assert result.reason == "basis-exhausted"
    assert result.total_queries == 2


def test_already_adversarial_costs_nothing():
    victim = linear(np.eye(2))
    oracle, x_in, scores, cfg = start(victim, [0.0, 1.0], target=1, nu=1.0)
    result = gfcs_attack(oracle, [victim], x_in, scores, cfg, RandomStream(0))
    assert result.success and result.total_queries == 0


def test_target_out_of_range():
    victim = linear(np.eye(2))
    oracle, x_in, scores, cfg = start(victim, [1.0, 0.0], target=5)
    with pytest.raises(InvalidInputError, match="target class out of range: 5"):
        _ = gfcs_attack(oracle, [victim], x_in, scores, cfg, RandomStream(0))


def test_attacks_are_deterministic():
    victim, surrogate = orthogonal_pair()
    results = []
    for _ in range(2):
        oracle, x_in, scores, cfg = start(victim, [1.0, 0.0, 0.0, 0.0], nu=100.0)
        results.append(gfcs_attack(oracle, [surrogate], x_in, scores, cfg, RandomStream(7)))
    assert results[0].summary() == results[1].summary()
    assert np.array_equal(results[0].perturbation, results[1].perturbation)


def test_pick_target_class():
    stream = RandomStream(0)
    targets = {pick_target_class(stream, 2, 5) for _ in range(200)}
    assert targets == {0, 1, 3, 4}
    with pytest.raises(InvalidInputError, match="need at least 2 classes"):
        _ = pick_target_class(stream, 0, 1)


def test_write_trace(tmp_path):
    path = tmp_path / "trace.jsonl"
    write_trace(path, [{"step": 0, "accepted": True}, {"step": 1, "accepted": False}])
    lines = path.read_text().splitlines()
    assert [json.loads(line)["step"] for line in lines] == [0, 1]
