import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import ndimage
from scipy.sparse import csgraph, lil_matrix

from alpt.maze import (
    ACTION_NAMES,
    EnvState,
    MazeGenerationError,
    MazeSpec,
    MazeStyle,
    bfs_distances,
    collect_trajectories,
    corridor_maze,
    decode_state,
    displacement_action,
    encode_state,
    generate_maze,
    optimal_policy,
    render_svg,
    step,
)


def n_components(walls):
    """Independent connectivity oracle: 4-connected labelling of free cells."""
    _, n = ndimage.label(~walls, structure=[[0, 1, 0], [1, 1, 1], [0, 1, 0]])
    return n


def shortest_path_oracle(spec, goal):
    """Distances to ``goal`` via scipy's graph search on the move graph."""
    g = lil_matrix((spec.n_cells, spec.n_cells))
    for cell in spec.free_cells:
        for name in spec.actions:
            nxt = spec.move(int(cell), name)
            if nxt != cell:
                g[nxt, cell] = 1  # reversed edge: search outward from the goal
    d = csgraph.shortest_path(g.tocsr(), directed=True, indices=goal, unweighted=True)
    return np.where(np.isinf(d), -1, d).astype(int)


def open_maze(w=5, h=5, walls=None, actions=ACTION_NAMES):
    walls = np.zeros((h, w), bool) if walls is None else np.asarray(walls, bool)
    return MazeSpec(w, h, walls, MazeStyle.BLOCKED, 0, tuple(actions))


@given(seed=st.integers(0, 2**32 - 1), style=st.sampled_from(["blocked", "tunneled"]))
@settings(max_examples=25, deadline=None)
def test_generated_mazes_are_connected(seed, style):
    spec = generate_maze(seed, style)
    assert spec.walls.shape == (20, 20)
    assert n_components(spec.walls) == 1


def test_blocked_default_maze_is_connected_with_blocks():
    spec = generate_maze(0, "blocked", 20, 20, 0.15)
    assert spec.walls.sum() >= 0.15 * 400
    assert n_components(spec.walls) == 1


@pytest.mark.parametrize("style", ["blocked", "tunneled", "corridor"])
def test_zero_density_leaves_grid_open(style):
    spec = generate_maze(3, style, obstacle_density=0.0)
    assert not spec.walls.any()
    assert spec.free_cells.size == 400


def test_tunneled_lines_have_gaps():
    spec = generate_maze(7, "tunneled", 20, 20, 0.15)
    assert n_components(spec.walls) == 1
    assert not spec.walls.all(axis=1).any()
    assert not spec.walls.all(axis=0).any()
    # at least one line spans the grid apart from its gaps
    assert (spec.walls.sum(axis=1) >= 18).any() or (spec.walls.sum(axis=0) >= 18).any()


def test_generation_is_deterministic():
    a = generate_maze(11, "tunneled")
    b = generate_maze(11, "tunneled")
    assert a == b
    assert np.array_equal(a.walls, b.walls)
    assert a != generate_maze(12, "tunneled")


def test_dense_generation_hits_retry_bound():
    with pytest.raises(MazeGenerationError):
        generate_maze(0, "blocked", obstacle_density=0.9)


@pytest.mark.parametrize("kwargs", [{"width": 3}, {"height": 2}, {"obstacle_density": 1.0}, {"obstacle_density": -0.1}])
def test_generate_validates_arguments(kwargs):
    with pytest.raises(ValueError):
        generate_maze(0, "blocked", **kwargs)


def test_maze_dict_round_trip():
    spec = generate_maze(5, "blocked")
    assert MazeSpec.from_dict(spec.to_dict()) == spec


def test_walls_are_read_only():
    spec = generate_maze(5, "blocked")
    with pytest.raises(ValueError):
        spec.walls[0, 0] = True


def test_step_into_goal_rewards_and_ends():
    spec = open_maze()
    out = step(spec, EnvState(agent=11, goal=12), ACTION_NAMES.index("Right"))
    assert out == (EnvState(12, 12), 1.0, True)


def test_step_into_wall_is_noop():
    walls = np.zeros((5, 5), bool)
    walls[2, 3] = True
    spec = open_maze(walls=walls)
    out = step(spec, EnvState(12, 0), ACTION_NAMES.index("Right"))
    assert out.next.agent == 12 and out.reward == 0 and not out.done


def test_step_off_grid_is_noop():
    spec = open_maze()
    for cell, name in [(0, "Up"), (0, "Left"), (24, "Down"), (24, "Right")]:
        assert step(spec, EnvState(cell, 12), ACTION_NAMES.index(name)).next.agent == cell


def test_step_rejects_bad_action_and_state():
    spec = open_maze()
    with pytest.raises(ValueError):
        step(spec, EnvState(0, 1), 4)
    with pytest.raises(ValueError):
        step(spec, EnvState(0, 1), -1)
    walls = np.zeros((5, 5), bool)
    walls[0, 0] = True
    walled = open_maze(walls=walls)
    with pytest.raises(ValueError):
        step(walled, EnvState(0, 1), 0)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_bfs_matches_graph_oracle(seed):
    spec = generate_maze(seed, "blocked")
    rng = np.random.default_rng(seed)
    for goal in rng.choice(spec.free_cells, 5, replace=False):
        assert np.array_equal(bfs_distances(spec, int(goal)), shortest_path_oracle(spec, int(goal)))


def test_policy_adjacent_left_of_goal_is_right():
    spec = open_maze()
    assert ACTION_NAMES[optimal_policy(spec, 12)[11]] == "Right"


def test_policy_tie_order():
    spec = open_maze()
    # goal down-right of the agent: Down and Right both help; Down comes first
    assert ACTION_NAMES[optimal_policy(spec, 24)[0]] == "Down"
    # goal up-left: Up before Left
    assert ACTION_NAMES[optimal_policy(spec, 0)[24]] == "Up"


@pytest.mark.parametrize("seed", [0, 4])
def test_policy_decreases_distance_everywhere(seed):
    spec = generate_maze(seed, "tunneled")
    goal = int(spec.free_cells[len(spec.free_cells) // 2])
    pol = optimal_policy(spec, goal)
    d = shortest_path_oracle(spec, goal)
    for cell in spec.free_cells:
        if cell == goal:
            assert pol[int(cell)] == -1
            continue
        nxt = spec.move(int(cell), spec.actions[pol[int(cell)]])
        assert d[nxt] == d[cell] - 1


def test_policy_rollout_length_equals_distance():
    spec = generate_maze(2, "blocked")
    rng = np.random.default_rng(0)
    goal = int(rng.choice(spec.free_cells))
    pol = optimal_policy(spec, goal)
    for start in rng.choice(spec.free_cells, 20):
        state, n = EnvState(int(start), goal), 0
        while state.agent != goal:
            state = step(spec, state, pol[state.agent]).next
            n += 1
        assert n == pol.distances[int(start)]


def test_optimal_policy_rejects_wall_goal():
    walls = np.zeros((5, 5), bool)
    walls[0, 0] = True
    with pytest.raises(ValueError):
        optimal_policy(open_maze(walls=walls), 0)


def test_corridor_actions():
    v = corridor_maze(0, "vertical")
    h = corridor_maze(0, "horizontal")
    assert v.actions == ("Up", "Down") and h.actions == ("Left", "Right")
    assert v.name != h.name
    # only same-column cells reach a goal under vertical moves
    d = bfs_distances(v, 0)
    assert (d[np.arange(0, 400, 20)] >= 0).all()
    assert (d[1:20] == -1).all()
    with pytest.raises(ValueError):
        corridor_maze(0, "diagonal")


def test_collect_is_deterministic_and_well_formed():
    spec = generate_maze(1, "blocked")
    a = collect_trajectories(spec, count=20, seed=5)
    b = collect_trajectories(spec, count=20, seed=5)
    assert a == b
    for ep in a.episodes:
        assert len(ep.states) == len(ep.actions) == len(ep.rewards) == len(ep.returns_to_go)
        assert ep.rewards.sum() in (0.0, 1.0)
        if ep.rewards.sum():
            assert ep.rewards[-1] == 1.0
        assert ep.labelled.all()
        assert decode_state(spec, int(ep.states[0])).agent != decode_state(spec, int(ep.states[0])).goal


def test_collect_greedy_episodes_follow_bfs_distance():
    spec = generate_maze(1, "blocked")
    ds = collect_trajectories(spec, epsilon=0.0, count=30, seed=2)
    for ep in ds.episodes:
        s = decode_state(spec, int(ep.states[0]))
        assert len(ep) == bfs_distances(spec, s.goal)[s.agent]
        assert ep.rewards[-1] == 1.0


def test_collect_epsilon_mismatch_rate():
    spec = generate_maze(1, "blocked")
    ds = collect_trajectories(spec, epsilon=0.5, count=400, seed=3)
    differ = total = 0
    for ep in ds.episodes:
        goal = decode_state(spec, int(ep.states[0])).goal
        pol = optimal_policy(spec, goal)
        for tok, a in zip(ep.states, ep.actions):
            differ += a != pol[decode_state(spec, int(tok)).agent]
            total += 1
    assert total >= 10_000
    assert abs(differ / total - 0.5 * 0.75) <= 0.03


def test_collect_validates_arguments():
    spec = open_maze()
    with pytest.raises(ValueError):
        collect_trajectories(spec, epsilon=1.5)
    with pytest.raises(ValueError):
        collect_trajectories(spec, count=0)


def test_displacement_determines_recorded_action():
    spec = generate_maze(1, "tunneled")
    ds = collect_trajectories(spec, count=50, seed=1)
    for ep in ds.episodes:
        obs = ep.observations
        for t, a in enumerate(ep.actions):
            name = displacement_action(spec, int(obs[t]), int(obs[t + 1]))
            if name is not None:
                assert name == spec.actions[a]


def test_displacement_rejects_jumps():
    spec = open_maze()
    with pytest.raises(ValueError):
        displacement_action(spec, encode_state(spec, EnvState(0, 3)), encode_state(spec, EnvState(2, 3)))


@given(agent=st.integers(0, 399), goal=st.integers(0, 399))
def test_state_token_round_trip(agent, goal):
    spec = generate_maze(0, "blocked", obstacle_density=0.0)
    s = EnvState(agent, goal)
    assert decode_state(spec, encode_state(spec, s)) == s


def test_render_svg_draws_walls():
    spec = generate_maze(0, "blocked")
    svg = render_svg(spec, goal=int(spec.free_cells[0]))
    assert svg.startswith("<svg") and svg.endswith("</svg>")
    assert svg.count('fill="#333333"') == spec.walls.sum()
