import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cbil.geometry import heading_quat, quat_rotate
from cbil.rewards import (Aggregation, Alignment, Circling, Feeding, RewardConfig, aggregation_reward,
                          alignment_reward, bio_reward, chase_rewards, circling_direction, circling_reward,
                          cohesion_reward, consume_food, feeding_reward, goal_observation, total_reward)
from cbil.sim import Action, AgentState, CageSpec, EnvConfig, init_environment


def agent(pos=(0.0, 0.0, 0.0), fwd=(1.0, 0.0, 0.0), speed=1.0):
    f = np.asarray(fwd, dtype=np.float64)
    f = f / np.linalg.norm(f)
    yaw = math.atan2(f[2], f[0])
    pitch = math.asin(np.clip(f[1], -1, 1))
    return AgentState.from_heading(np.asarray(pos, dtype=np.float64), yaw, pitch, speed)


def test_circling_extremes():
    a = agent(speed=1.0)
    assert circling_reward(a, Circling(np.array([1.0, 0, 0]), 1.0)) == pytest.approx(10.0, abs=1e-9)
    assert circling_reward(a, Circling(np.array([-1.0, 0, 0]), 1.0)) == pytest.approx(-10.0, abs=1e-9)


def test_circling_hand_value():
    a = agent(speed=1.2)
    target = np.array([0.5, 0.0, math.sqrt(0.75)])
    assert circling_reward(a, Circling(target, 1.0)) == pytest.approx(4.6, abs=1e-9)


def test_circling_grid_search_optimum():
    target = np.array([0.0, 0.0, 1.0])
    best, arg = -np.inf, None
    for yaw in np.linspace(-math.pi, math.pi, 73):
        for speed in np.linspace(0.8, 1.5, 15):
            r = circling_reward(AgentState.from_heading(np.zeros(3), yaw, 0.0, speed), Circling(target, 1.0))
            if r > best:
                best, arg = r, (yaw, speed)
    assert arg[0] == pytest.approx(math.pi / 2, abs=1e-9) and arg[1] == pytest.approx(1.0)


def test_circling_direction_clockwise_and_fallback():
    pos = np.array([[5.0, 0.0, 0.0], [0.0, 0.0, 0.0]])
    fwd = np.array([[1.0, 0, 0], [0.0, 0.0, -1.0]])
    d = circling_direction(pos, fwd, np.zeros(3), True)
    assert np.allclose(d[0], [0, 0, 1]) and np.allclose(d[1], [0, 0, -1])
    assert np.allclose(circling_direction(pos, fwd, np.zeros(3), False)[0], [0, 0, -1])


def test_alignment_cases():
    a = agent()
    assert alignment_reward(a, [agent() for _ in range(5)]) == pytest.approx(5.0)
    assert alignment_reward(a, [agent(fwd=(-1, 0, 0)) for _ in range(3)]) == pytest.approx(0.0, abs=1e-9)
    two = [agent(fwd=(0, 0, 1)), agent(fwd=(0, 0, -1))]
    assert alignment_reward(a, two) == pytest.approx(1.0, abs=1e-9)
    assert alignment_reward(a, []) == 0.0


@settings(max_examples=25, deadline=None)
@given(st.permutations(list(range(5))))
def test_alignment_permutation_invariant(perm):
    rng = np.random.default_rng(4)
    nbrs = [agent(fwd=rng.normal(size=3)) for _ in range(5)]
    a = agent()
    assert alignment_reward(a, [nbrs[i] for i in perm]) == pytest.approx(alignment_reward(a, nbrs), abs=1e-12)


def test_aggregation_cases():
    assert aggregation_reward(agent(), np.zeros(3)) == 0.0
    assert aggregation_reward(agent(pos=(1, 0, 0)), np.zeros(3), a=2, b=1, w_agg=1) == pytest.approx(-0.5, abs=1e-9)
    far = aggregation_reward(agent(pos=(50, 0, 0)), np.zeros(3))
    assert far == pytest.approx(-50.0, rel=1e-9)


@settings(max_examples=25, deadline=None)
@given(st.floats(0.0, 2 * math.pi), st.floats(0.1, 4.0))
def test_aggregation_and_cohesion_rotation_invariant(theta, r):
    c = np.array([0.5, -0.2, 0.3])
    p1 = c + np.array([r, 0.0, 0.0])
    p2 = c + np.array([r * math.cos(theta), 0.0, r * math.sin(theta)])
    assert aggregation_reward(agent(pos=p1), c) == pytest.approx(aggregation_reward(agent(pos=p2), c), abs=1e-9)
    assert cohesion_reward(agent(pos=p1), c) == pytest.approx(cohesion_reward(agent(pos=p2), c), abs=1e-9)


def test_chase_cases():
    dom = agent(pos=(0, 0, 0), fwd=(1, 0, 0), speed=1.5)
    sub = agent(pos=(2, 0, 0), fwd=(1, 0, 0), speed=1.0)
    r_dom, r_sub = chase_rewards(dom, sub)
    assert r_dom == pytest.approx(12.0, abs=1e-9) and r_sub == pytest.approx(1.0, abs=1e-9)
    perp = chase_rewards(agent(fwd=(0, 0, 1)), agent(pos=(2, 0, 0), fwd=(0, 0, 1)))
    assert perp == pytest.approx((0.0, 0.0), abs=1e-9)
    assert chase_rewards(agent(), agent()) == (0.0, 0.0)
    back = chase_rewards(agent(fwd=(-1, 0, 0), speed=1.5), sub)[0]
    assert back == pytest.approx(-r_dom, abs=1e-9)


def test_cohesion_cases():
    assert cohesion_reward(agent(), np.zeros(3)) == 0.0
    assert cohesion_reward(agent(pos=(2, 0, 0)), np.zeros(3)) == pytest.approx(-10.0)
    vals = [cohesion_reward(agent(pos=(d, 0, 0)), np.zeros(3)) for d in np.linspace(0, 5, 11)]
    assert all(a > b for a, b in zip(vals, vals[1:]))
    assert cohesion_reward(agent(), None) == 0.0


def test_feeding_cases():
    assert feeding_reward(agent(), np.array([0.005, 0, 0])) == 10.0
    assert feeding_reward(agent(), np.array([0.02, 0, 0])) == 0.0
    assert feeding_reward(agent(), None) == 0.0


def test_feeding_consumes_food():
    env = init_environment(EnvConfig(n_agents=1), 0)
    env.food = np.array([env.positions[0] + [0.005, 0, 0], [5.0, 4.0, 5.0]])
    out = consume_food(env, RewardConfig())
    assert len(out.food) == 1 and np.allclose(out.food[0], [5.0, 4.0, 5.0])


def test_bio_reward_cases():
    cage = CageSpec()
    a = agent()
    assert bio_reward(a, Action(0, 0, 0), a, [], cage) == pytest.approx(1.0)
    wall = agent(pos=(5.8, 0, 0))
    assert bio_reward(wall, Action(0, 0, 0), wall, [], cage) == pytest.approx(1.0 - 0.4)
    other = agent(pos=(0.75, 0, 0))
    assert bio_reward(a, Action(0, 0, 0), a, [other], cage) == pytest.approx(1.0 - 0.4 * 0.5)


def test_goal_observations():
    env = init_environment(EnvConfig(n_agents=3), 0)
    env.positions = np.array([[0.0, 0, 0], [1.0, 0, 0], [-1.0, 0, 0]])
    env.food = np.array([[1.0, 0.0, 0.0]])
    g = goal_observation("feeding", env, 2)
    assert isinstance(g, Feeding) and np.allclose(g.offset, [2.0, 0, 0])
    g = goal_observation("aggregation", env, 0)
    assert isinstance(g, Aggregation) and np.allclose(g.center, [0, 0, 0])
    lone = init_environment(EnvConfig(n_agents=1), 0)
    g = goal_observation("alignment", lone, 0)
    assert isinstance(g, Alignment) and np.allclose(g.mean_dir, lone.forwards[0])
    env1 = init_environment(EnvConfig(n_agents=1), 0)
    env1.food = env1.positions[:1] + np.array([[1.0, 0, 0]])
    assert np.allclose(goal_observation("feeding", env1, 0).offset, [1, 0, 0])
    c = goal_observation("circling", env, 1)
    assert abs(np.linalg.norm(c.target_dir) - 1.0) < 1e-6


def test_total_reward_cases():
    b = total_reward(1.0, 1.0, 1.0, (0.0, 1.0))
    assert b.total == pytest.approx(1.0)
    assert total_reward(0.0, 0.0, 0.0, (0.0, 1.0)).total == 0.0
    b = total_reward(0.8572, 1.0, 0.73, (0.0, 1.0))
    assert b.total == pytest.approx(0.80788, abs=1e-9)


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 1), st.floats(0, 1), st.floats(-100, 100))
def test_total_reward_in_unit_interval(s, b, raw):
    out = total_reward(s, b, raw, (-10.0, 10.0))
    assert 0.0 <= out.total <= 1.0
    assert out.total == pytest.approx(0.4 * out.r_style + 0.1 * out.r_bio + 0.5 * out.r_task, abs=1e-12)
