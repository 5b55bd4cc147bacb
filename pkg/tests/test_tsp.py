import numpy as np
import pytest

from fleetmap.nn import ParamStore
from fleetmap.policy import PolicyConfig, init_policy_params
from fleetmap.tsp import (
    HEURISTICS,
    best_found,
    distance_matrix,
    farthest_insertion,
    heuristic_tour,
    model_tour,
    model_tour_ss,
    model_tour_ss_sp,
    nearest_insertion,
    nearest_neighbour,
    random_points,
    tour_length,
    two_opt,
)

SQUARE = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])


def random_instance(k, seed):
    return distance_matrix(random_points(k, np.random.default_rng(seed)))


# ---------------------------------------------------------------------------
# Geometry
# ---------------------------------------------------------------------------


def test_distance_matrix_is_a_metric():
    D = random_instance(12, 0)
    np.testing.assert_allclose(D, D.T, atol=1e-15)
    assert np.all(np.diag(D) == 0.0)
    via = D[:, None, :] + D[None, :, :]
    assert np.all(D <= via.min(axis=1) + 1e-12)


def test_distance_matrix_hand_values():
    D = distance_matrix(SQUARE)
    assert D[0, 1] == pytest.approx(1.0)
    assert D[0, 2] == pytest.approx(np.sqrt(2.0))


def test_tour_length_square_perimeter():
    D = distance_matrix(SQUARE)
    assert tour_length(D, [0, 1, 2, 3]) == pytest.approx(4.0)
    assert tour_length(D, [0, 2, 1, 3]) == pytest.approx(2.0 + 2.0 * np.sqrt(2.0))


def test_tour_length_rejects_non_permutations():
    D = distance_matrix(SQUARE)
    with pytest.raises(ValueError):
        tour_length(D, [0, 1, 2])
    with pytest.raises(ValueError):
        tour_length(D, [0, 1, 2, 2])


# ---------------------------------------------------------------------------
# Construction heuristics
# ---------------------------------------------------------------------------


def test_nearest_neighbour_walks_a_line():
    points = np.array([[0.0, 0.0], [1.0, 0.0], [2.1, 0.0], [4.0, 0.0]])
    assert nearest_neighbour(distance_matrix(points)) == [0, 1, 2, 3]


@pytest.mark.parametrize("method", HEURISTICS)
def test_heuristics_return_permutations(method):
    D = random_instance(15, 3)
    order = heuristic_tour(D, method, rng=np.random.default_rng(3))
    assert sorted(order) == list(range(15))


@pytest.mark.parametrize("method", HEURISTICS)
def test_heuristics_solve_the_square(method):
    D = distance_matrix(SQUARE)
    order = heuristic_tour(D, method, rng=np.random.default_rng(0))
    assert tour_length(D, order) == pytest.approx(4.0)


def test_heuristic_tour_guards():
    D = random_instance(8, 1)
    with pytest.raises(ValueError, match="unknown TSP method"):
        heuristic_tour(D, "christofides")
    with pytest.raises(ValueError, match="random generator"):
        heuristic_tour(D, "random-insertion")
    with pytest.raises(ValueError, match="at least 3"):
        nearest_insertion(distance_matrix(SQUARE[:2]))


# ---------------------------------------------------------------------------
# Local refinement
# ---------------------------------------------------------------------------


def test_two_opt_uncrosses_the_square():
    D = distance_matrix(SQUARE)
    assert tour_length(D, two_opt(D, [0, 2, 1, 3])) == pytest.approx(4.0)


@pytest.mark.parametrize("seed", range(5))
def test_two_opt_never_lengthens(seed):
    D = random_instance(14, seed)
    rng = np.random.default_rng(seed + 100)
    order = list(rng.permutation(14))
    refined = two_opt(D, order)
    assert sorted(refined) == list(range(14))
    assert tour_length(D, refined) <= tour_length(D, order) + 1e-12


def test_two_opt_zero_budget_is_identity():
    D = random_instance(10, 2)
    order = list(np.random.default_rng(2).permutation(10))
    assert two_opt(D, order, move_budget=0) == order


def test_best_found_is_at_most_any_refined_heuristic():
    D = random_instance(20, 4)
    best = best_found(D, seed=4)
    for method in ("nearest-insertion", "farthest-insertion", "nearest-neighbour"):
        refined = two_opt(D, heuristic_tour(D, method))
        assert best <= tour_length(D, refined) + 1e-12


# ---------------------------------------------------------------------------
# Model-guided tours
# ---------------------------------------------------------------------------


def untrained_model(seed=0):
    cfg = PolicyConfig(iterations=2)
    return init_policy_params(cfg, seed=seed), cfg


def test_model_tour_is_a_permutation_from_start():
    store, cfg = untrained_model()
    D = random_instance(9, 5)
    order = model_tour(store, cfg, D, start=4)
    assert order[0] == 4
    assert sorted(order) == list(range(9))


def test_model_tour_greedy_is_deterministic():
    store, cfg = untrained_model(1)
    D = random_instance(9, 6)
    assert model_tour(store, cfg, D) == model_tour(store, cfg, D)


def test_model_tour_sample_needs_rng():
    store, cfg = untrained_model()
    with pytest.raises(ValueError):
        model_tour(store, cfg, random_instance(6, 0), mode="sample")


def test_self_start_takes_the_best_start():
    store, cfg = untrained_model(2)
    D = random_instance(8, 7)
    order, length = model_tour_ss(store, cfg, D)
    per_start = [tour_length(D, model_tour(store, cfg, D, start=s)) for s in range(8)]
    assert length == pytest.approx(min(per_start))
    assert tour_length(D, order) == pytest.approx(length)


def test_sampling_never_hurts_the_self_start_tour():
    store, cfg = untrained_model(3)
    D = random_instance(8, 8)
    _, ss_len = model_tour_ss(store, cfg, D)
    _, sp_len = model_tour_ss_sp(store, cfg, D, samples=16, seed=0)
    assert sp_len <= ss_len + 1e-12
