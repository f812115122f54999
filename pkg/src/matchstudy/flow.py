"""Minimum-cost flow by successive shortest augmenting paths.

General-purpose solver on an explicit arc list. Costs and capacities are
integers, so the optimum is exact. Dijkstra runs on reduced costs
``cost + pi[tail] - pi[head]``; potentials are initialised by Bellman-Ford
when negative arc costs are present.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass

import numpy as np

from .errors import InfeasibleFlowError


@dataclass(frozen=True)
class FlowResult:
    flow: np.ndarray
    cost: int
    n_augmentations: int


class _Residual:
    """Paired-arc residual graph; arc ``k ^ 1`` is the reverse of arc ``k``."""

    def __init__(self, n_nodes):
        self.n = n_nodes
        self.head = []
        self.cap = []
        self.cost = []
        self.out = [[] for _ in range(n_nodes)]

    def add(self, u, v, cap, cost):
        k = len(self.head)
        self.head += [v, u]
        self.cap += [cap, 0]
        self.cost += [cost, -cost]
        self.out[u].append(k)
        self.out[v].append(k + 1)
        return k


def _bellman_ford(g, source):
    inf = float("inf")
    dist = [inf] * g.n
    dist[source] = 0
    for _ in range(g.n):
        changed = False
        for u in range(g.n):
            if dist[u] == inf:
                continue
            for k in g.out[u]:
                if g.cap[k] > 0 and dist[u] + g.cost[k] < dist[g.head[k]]:
                    dist[g.head[k]] = dist[u] + g.cost[k]
                    changed = True
        if not changed:
            return dist
    raise ValueError("network contains a negative-cost cycle")


def solve_min_cost_flow(n_nodes, tails, heads, capacities, costs, supplies):
    """Integral min-cost flow meeting every node's supply (>0) or demand (<0).

    Ties in Dijkstra are broken by node index, so the returned flow is a
    deterministic function of the inputs.
    """
    tails = [int(x) for x in tails]
    heads = [int(x) for x in heads]
    capacities = [int(x) for x in capacities]
    costs = [int(x) for x in costs]
    supplies = [int(x) for x in supplies]
    if not (len(tails) == len(heads) == len(capacities) == len(costs)):
        raise ValueError("arc arrays must have equal length")
    if len(supplies) != n_nodes:
        raise ValueError("supplies must have one entry per node")
    if sum(supplies) != 0:
        raise ValueError(f"total supply {sum(supplies)} does not balance demand")
    if any(c < 0 for c in capacities):
        raise ValueError("capacities must be nonnegative")

    source, sink = n_nodes, n_nodes + 1
    g = _Residual(n_nodes + 2)
    arc_ids = [g.add(u, v, c, w) for u, v, c, w in zip(tails, heads, capacities, costs)]
    demand_arcs = {}
    required = 0
    for v, s in enumerate(supplies):
        if s > 0:
            g.add(source, v, s, 0)
            required += s
        elif s < 0:
            demand_arcs[v] = g.add(v, sink, -s, 0)

    if any(w < 0 for w in costs):
        pi = _bellman_ford(g, source)
        pi = [0 if p == float("inf") else p for p in pi]
    else:
        pi = [0] * g.n

    sent = 0
    total_cost = 0
    n_aug = 0
    while sent < required:
        dist = [None] * g.n
        pred = [-1] * g.n
        dist[source] = 0
        heap = [(0, source)]
        done = [False] * g.n
        while heap:
            d, u = heapq.heappop(heap)
            if done[u]:
                continue
            done[u] = True
            if u == sink:
                break
            for k in g.out[u]:
                if g.cap[k] <= 0:
                    continue
                v = g.head[k]
                if done[v]:
                    continue
                nd = d + g.cost[k] + pi[u] - pi[v]
                if dist[v] is None or nd < dist[v]:
                    dist[v] = nd
                    pred[v] = k
                    heapq.heappush(heap, (nd, v))
        if not done[sink]:
            deficit = sorted(v for v, k in demand_arcs.items() if g.cap[k] > 0)
            raise InfeasibleFlowError(
                f"no feasible flow: {required - sent} unit(s) of demand unmet at nodes {deficit}",
                deficit_nodes=deficit,
            )
        dt = dist[sink]
        for v in range(g.n):
            if done[v]:
                pi[v] += dist[v]
            else:
                pi[v] += dt
        push = required - sent
        v = sink
        while v != source:
            k = pred[v]
            push = min(push, g.cap[k])
            v = g.head[k ^ 1]
        v = sink
        while v != source:
            k = pred[v]
            g.cap[k] -= push
            g.cap[k ^ 1] += push
            total_cost += push * g.cost[k]
            v = g.head[k ^ 1]
        sent += push
        n_aug += 1

    flow = np.array([g.cap[k ^ 1] for k in arc_ids], dtype=np.int64)
    return FlowResult(flow=flow, cost=int(np.dot(flow, np.asarray(costs, dtype=np.int64))) if costs else 0,
                      n_augmentations=n_aug)
