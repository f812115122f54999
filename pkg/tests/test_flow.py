import itertools

import numpy as np
import pytest

from matchstudy.errors import InfeasibleFlowError
from matchstudy.flow import solve_min_cost_flow


def test_single_arc():
    res = solve_min_cost_flow(2, [0], [1], [5], [7], [1, -1])
    assert res.flow.tolist() == [1] and res.cost == 7


def test_zero_supplies():
    res = solve_min_cost_flow(3, [0, 1], [1, 2], [4, 4], [1, 1], [0, 0, 0])
    assert res.cost == 0 and not res.flow.any()


def transport_by_enumeration(supply, demand, cost):
    """Cheapest integral 3x3 transport plan by listing every feasible plan."""
    best = None
    rows = []
    for s in supply:
        rows.append([x for x in itertools.product(range(s + 1), repeat=3) if sum(x) == s])
    for plan in itertools.product(*rows):
        if all(sum(plan[i][j] for i in range(3)) == demand[j] for j in range(3)):
            c = sum(cost[i][j] * plan[i][j] for i in range(3) for j in range(3))
            best = c if best is None else min(best, c)
    return best


@pytest.mark.parametrize("seed", range(25))
def test_three_by_three_transport(seed):
    rng = np.random.default_rng(seed)
    supply = rng.integers(0, 5, size=3)
    demand = rng.multinomial(int(supply.sum()), [1 / 3] * 3)
    cost = rng.integers(0, 20, size=(3, 3))
    tails, heads, caps, costs = [], [], [], []
    for i in range(3):
        for j in range(3):
            tails.append(i)
            heads.append(3 + j)
            caps.append(int(supply[i]))
            costs.append(int(cost[i, j]))
    res = solve_min_cost_flow(6, tails, heads, caps, costs, list(supply) + list(-demand))
    assert res.cost == transport_by_enumeration(list(supply), list(demand), cost.tolist())


def test_negative_costs_use_potentials():
    res = solve_min_cost_flow(3, [0, 0, 1], [1, 2, 2], [1, 1, 1], [-5, 1, 2], [1, 0, -1])
    assert res.cost == -3


def test_infeasible_network_names_deficit_nodes():
    with pytest.raises(InfeasibleFlowError) as info:
        solve_min_cost_flow(3, [0], [1], [1], [1], [2, -1, -1])
    assert info.value.deficit_nodes == [2]


def test_unbalanced_supplies_rejected():
    with pytest.raises(ValueError, match="balance"):
        solve_min_cost_flow(2, [0], [1], [1], [0], [1, 0])


def test_deterministic():
    args = (4, [0, 0, 1, 2], [1, 2, 3, 3], [1, 1, 1, 1], [1, 1, 1, 1], [1, 0, 0, -1])
    assert solve_min_cost_flow(*args).flow.tolist() == solve_min_cost_flow(*args).flow.tolist()
