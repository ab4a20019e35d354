"""
Point-mass dynamics, task sampling, expert demonstrations and outcomes.
"""

import json

import numpy as np
import pytest

import diffcore as dc
from env import (GOAL_CENTER, HOLE_RADIUS, START_POSITION, Demonstration, SpeedClass, State, Task, TaskKind,
                 Trajectory, dyn_step, evaluate_outcome, expert_demo, insertion_success, placement_outcome,
                 rollout, rollout_positions, sample_durations, sample_tasks)
from errors import InvariantError, NumericDomainError, TaskDefinitionError


def _traj(points, dt=0.2):
    positions = np.array(points, dtype=float)
    return Trajectory(positions, np.zeros_like(positions), dt)


# ============================================================================
# DYNAMICS
# ============================================================================


def test_dyn_step_moves_by_velocity_times_dt():
    s = dyn_step(State([0, 0, 0]), [1, 0, 0], 0.2)
    assert s.position.tolist() == [0.2, 0.0, 0.0]
    assert s.velocity.tolist() == [1.0, 0.0, 0.0]


def test_zero_command_keeps_position():
    s = dyn_step(State([1, 2, 3]), [0, 0, 0], 0.2)
    assert s.position.tolist() == [1.0, 2.0, 3.0]


def test_fifteen_unit_steps_cover_three_cm():
    s = State([0, 0, 0])
    for _ in range(15):
        s = dyn_step(s, [1, 0, 0], 0.2)
    assert np.allclose(s.position, [3.0, 0.0, 0.0])


def test_zero_actions_give_constant_trajectory():
    traj = rollout(State(START_POSITION), np.zeros((6, 3)), 0.2)
    assert traj.horizon == 6
    assert np.all(traj.positions == np.array(START_POSITION))


def test_single_step_rollout():
    traj = rollout(State([0, 0, 0]), [[1.0, 2.0, 3.0]], 0.5)
    assert len(traj.states) == 2
    assert traj.positions[1].tolist() == [0.5, 1.0, 1.5]


def test_rollout_endpoint_is_sum_of_commands():
    actions = np.random.default_rng(0).normal(size=(10, 3))
    traj = rollout(State([1, -1, 2]), actions, 0.2)
    assert traj.positions[-1] - traj.positions[0] == pytest.approx(0.2 * actions.sum(axis=0), abs=1e-12)


def test_differentiable_rollout_matches_fold():
    actions = np.random.default_rng(1).normal(size=(7, 3))
    folded = rollout(State(START_POSITION), actions, 0.2)
    tape_positions = rollout_positions(np.array(START_POSITION), dc.const(actions), 0.2).value
    assert np.allclose(tape_positions, folded.positions, atol=1e-12)


def test_trajectory_rejects_non_finite_state():
    with pytest.raises(NumericDomainError):
        _traj([[0, 0, 0], [np.nan, 0, 0]])


def test_trajectory_needs_two_states():
    with pytest.raises(InvariantError):
        _traj([[0, 0, 0]])


def test_timestamps_are_uniform():
    traj = _traj(np.zeros((4, 3)))
    assert np.allclose(np.diff(traj.timestamps), 0.2)
    assert traj.timestamps[0] == 0.0


# ============================================================================
# TASKS
# ============================================================================


def test_task_horizon_from_duration():
    assert Task(goal=GOAL_CENTER, duration=3.0).horizon == 15
    assert Task(goal=GOAL_CENTER, duration=6.0).horizon == 30


def test_task_rejects_fractional_horizon():
    with pytest.raises(TaskDefinitionError):
        Task(goal=GOAL_CENTER, duration=0.3)


def test_sample_tasks_grid_size_and_order():
    tasks = sample_tasks(GOAL_CENTER, 1.0, 10, [2, 3, 4, 5, 6], rng_seed=0)
    assert len(tasks) == 50
    assert [t.duration for t in tasks[:5]] == [2.0, 3.0, 4.0, 5.0, 6.0]
    assert len({t.goal for t in tasks}) == 10


def test_sampled_goals_stay_in_the_disc():
    for radius in (1.0, 3.0, 5.0, 0.0001):
        for t in sample_tasks(GOAL_CENTER, radius, 20, [3.0], rng_seed=7):
            offset = np.array(t.goal) - np.array(GOAL_CENTER)
            assert np.hypot(offset[0], offset[1]) <= radius + 1e-12
            assert t.goal[2] == GOAL_CENTER[2]


def test_sample_tasks_is_reproducible():
    a = sample_tasks(GOAL_CENTER, 5.0, 10, [2, 6], rng_seed=3, kind=TaskKind.PEG_IN_HOLE)
    b = sample_tasks(GOAL_CENTER, 5.0, 10, [2, 6], rng_seed=3, kind=TaskKind.PEG_IN_HOLE)
    assert a == b


def test_sample_tasks_rejects_empty_disc():
    with pytest.raises(TaskDefinitionError):
        sample_tasks(GOAL_CENTER, 0.0, 3, [3.0], rng_seed=0)


def test_sample_durations_stay_in_range():
    d = sample_durations(2.8, 3.2, 50, np.random.default_rng(0))
    assert np.all((d >= 2.8) & (d <= 3.2))


# ============================================================================
# EXPERT
# ============================================================================


def test_expert_three_seconds_splits_nine_six():
    demo = expert_demo(Task(goal=GOAL_CENTER, duration=3.0))
    assert demo.horizon == 15
    waypoint = [GOAL_CENTER[0], GOAL_CENTER[1], START_POSITION[2]]
    assert demo.trajectory.positions[9].tolist() == waypoint
    assert np.all(demo.trajectory.positions[:10, 2] == START_POSITION[2])
    assert np.all(demo.trajectory.positions[9:, :2] == np.array(GOAL_CENTER[:2]))
    assert demo.trajectory.final_position.tolist() == list(GOAL_CENTER)


def test_expert_goal_equals_final_state():
    for task in sample_tasks(GOAL_CENTER, 5.0, 5, [2.0, 5.0], rng_seed=1):
        demo = expert_demo(task, 0.2, rng_seed=4)
        assert np.array_equal(demo.goal, demo.trajectory.final_position)
        assert np.array_equal(demo.goal, task.goal_array)


def test_expert_is_deterministic():
    task = Task(goal=(0.3, 9.5, 0.0), duration=5.0)
    a, b = expert_demo(task, 0.2, rng_seed=11), expert_demo(task, 0.2, rng_seed=11)
    assert np.array_equal(a.trajectory.positions, b.trajectory.positions)
    assert np.array_equal(a.trajectory.velocities, b.trajectory.velocities)


def test_jittered_horizons_round_to_whole_steps():
    task = Task(goal=GOAL_CENTER, duration=3.0)
    horizons = {expert_demo(task, 0.2, rng_seed=s).horizon for s in range(30)}
    assert horizons <= {14, 15, 16}


def test_jitter_draws_the_duration_from_the_seeded_range():
    task = Task(goal=GOAL_CENTER, duration=5.0)
    for s in range(10):
        drawn = sample_durations(5.0 - 0.2, 5.0 + 0.2, 1, np.random.default_rng(s))[0]
        assert expert_demo(task, 0.2, rng_seed=s).horizon == int(round(drawn * task.frequency))


def test_expert_rejects_goal_above_start():
    with pytest.raises(TaskDefinitionError):
        expert_demo(Task(goal=(0, 10, 12), duration=3.0))


def test_expert_velocities_reproduce_positions():
    demo = expert_demo(Task(goal=(1.0, 9.0, 0.0), duration=4.0))
    replay = rollout(State(START_POSITION), demo.trajectory.velocities[1:], demo.trajectory.dt)
    assert np.allclose(replay.positions, demo.trajectory.positions, atol=1e-9)


def test_doubling_duration_traces_the_same_path():
    goal = (0.4, 10.7, 0.0)
    short = expert_demo(Task(goal=goal, duration=3.0)).trajectory.positions
    long = expert_demo(Task(goal=goal, duration=6.0)).trajectory.positions
    assert np.allclose(long[::2], short, atol=1e-9)


def test_demonstration_requires_goal_at_final_state():
    traj = _traj([[0, 0, 10], [0, 5, 5]])
    with pytest.raises(InvariantError):
        Demonstration(traj, np.array([0.0, 10.0, 0.0]), SpeedClass.FAST, 0)


def test_demo_record_reads_back_bit_exact():
    demo = expert_demo(Task(goal=(0.123456789, 10.987654321, 0.0), duration=5.0), 0.2, rng_seed=9,
                       speed_class=SpeedClass.SLOW)
    back = Demonstration.from_record(json.loads(json.dumps(demo.to_record())))
    assert np.array_equal(back.trajectory.positions, demo.trajectory.positions)
    assert np.array_equal(back.trajectory.velocities, demo.trajectory.velocities)
    assert back.trajectory.dt == demo.trajectory.dt
    assert back.speed_class is SpeedClass.SLOW
    assert back.seed == 9


# ============================================================================
# OUTCOMES
# ============================================================================


def test_expert_placement_is_clean():
    for task in sample_tasks(GOAL_CENTER, 5.0, 10, [2.0, 6.0], rng_seed=2):
        outcome = placement_outcome(expert_demo(task).trajectory, task)
        assert not outcome.strategy_violation
        assert outcome.final_distance == 0.0


def test_straight_line_cuts_the_corner():
    task = Task(goal=GOAL_CENTER, duration=3.0)
    start, goal = np.array(START_POSITION), np.array(GOAL_CENTER)
    line = _traj([start + (t / 15) * (goal - start) for t in range(16)])
    assert placement_outcome(line, task).strategy_violation


def test_final_distance_one_cm():
    task = Task(goal=GOAL_CENTER, duration=0.2)
    outcome = placement_outcome(_traj([[0, 10, 5], [1, 10, 0]]), task)
    assert outcome.final_distance == pytest.approx(1.0)


def test_placement_outcome_rejects_peg_task():
    with pytest.raises(TaskDefinitionError):
        placement_outcome(_traj([[0, 0, 0], [0, 0, 0]]), Task(goal=GOAL_CENTER, duration=0.2,
                                                                kind=TaskKind.PEG_IN_HOLE))


def test_expert_always_inserts():
    for task in sample_tasks(GOAL_CENTER, 5.0, 10, [2.0, 4.0, 6.0], rng_seed=5, kind=TaskKind.PEG_IN_HOLE):
        outcome = insertion_success(expert_demo(task).trajectory, task)
        assert outcome.inserted
        assert outcome.final_distance <= HOLE_RADIUS


def test_descent_off_axis_misses_the_hole():
    task = Task(goal=GOAL_CENTER, duration=0.8, kind=TaskKind.PEG_IN_HOLE)
    traj = _traj([[2, 10, 10], [2, 10, 6], [2, 10, 3], [2, 10, 0.5], [2, 10, 0]])
    assert not insertion_success(traj, task).inserted


def test_drifting_sideways_after_entry_fails():
    task = Task(goal=GOAL_CENTER, duration=0.8, kind=TaskKind.PEG_IN_HOLE)
    traj = _traj([[0, 10, 10], [0, 10, 5], [0, 10, 0.8], [1, 10, 0.5], [0, 10, 0]])
    outcome = insertion_success(traj, task)
    assert outcome.final_distance == 0.0
    assert not outcome.inserted


def test_evaluate_outcome_dispatches_on_kind():
    peg = Task(goal=GOAL_CENTER, duration=3.0, kind=TaskKind.PEG_IN_HOLE)
    assert evaluate_outcome(expert_demo(peg).trajectory, peg).inserted
    place = Task(goal=GOAL_CENTER, duration=3.0)
    assert not evaluate_outcome(expert_demo(place).trajectory, place).inserted


def test_peg_inserted_above_the_goal_counts():
    # entered on-axis and resting 0.8 cm above the hole bottom
    task = Task(goal=GOAL_CENTER, duration=0.8, kind=TaskKind.PEG_IN_HOLE)
    traj = _traj([[0, 10, 10], [0, 10, 6], [0, 10, 3], [0.2, 10, 1.2], [0.2, 10, 0.8]])
    outcome = insertion_success(traj, task)
    assert outcome.inserted
    assert outcome.final_distance == pytest.approx(0.2)


def test_peg_stopping_above_the_hole_is_not_inserted():
    task = Task(goal=GOAL_CENTER, duration=0.4, kind=TaskKind.PEG_IN_HOLE)
    outcome = insertion_success(_traj([[0, 10, 10], [0, 10, 4], [0, 10, 1.5]]), task)
    assert not outcome.inserted
    assert outcome.final_distance == pytest.approx(0.5)


def test_peg_pulled_back_out_is_not_inserted():
    task = Task(goal=GOAL_CENTER, duration=0.6, kind=TaskKind.PEG_IN_HOLE)
    traj = _traj([[0, 10, 10], [0, 10, 0.5], [0, 10, 1.3], [0, 10, 1.2]])
    assert not insertion_success(traj, task).inserted


def test_inserted_pegs_end_within_the_hole_radius():
    task = Task(goal=GOAL_CENTER, duration=0.8, kind=TaskKind.PEG_IN_HOLE)
    rng = np.random.default_rng(4)
    for _ in range(200):
        tail = np.column_stack([rng.uniform(-0.6, 0.6, 3), 10 + rng.uniform(-0.6, 0.6, 3),
                                rng.uniform(-0.5, 1.5, 3)])
        traj = _traj(np.vstack([[[0, 10, 10], [0, 10, 5]], tail]))
        outcome = insertion_success(traj, task)
        if outcome.inserted:
            assert outcome.final_distance <= HOLE_RADIUS
