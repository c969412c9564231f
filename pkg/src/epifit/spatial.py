"""Region adjacency orders and spatial transmission weights."""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

WEIGHT_VARIANTS = ("power_law_with_self", "power_law_no_self", "free_order_weights")


@dataclass(frozen=True)
class RegionGraph:
    regions: tuple[str, ...]
    edges: tuple[tuple[str, str], ...]

    def __post_init__(self):
        object.__setattr__(self, "regions", tuple(str(r) for r in self.regions))
        known = set(self.regions)
        if len(known) != len(self.regions):
            raise ValueError("duplicate region labels")
        clean = []
        for a, b in self.edges:
            a, b = str(a), str(b)
            if a not in known or b not in known:
                raise ValueError(f"edge ({a}, {b}) refers to an unknown region")
            if a == b:
                raise ValueError(f"self-loop at region {a!r}")
            clean.append((a, b))
        object.__setattr__(self, "edges", tuple(clean))

    def neighbours(self) -> list[set[int]]:
        index = {r: i for i, r in enumerate(self.regions)}
        adj = [set() for _ in self.regions]
        for a, b in self.edges:
            adj[index[a]].add(index[b])
            adj[index[b]].add(index[a])
        return adj


def adjacency_orders(graph: RegionGraph) -> np.ndarray:
    """All-pairs hop counts, one breadth-first search per region."""
    adj = graph.neighbours()
    n = len(adj)
    orders = np.full((n, n), -1, dtype=int)
    for src in range(n):
        orders[src, src] = 0
        queue = deque([src])
        while queue:
            u = queue.popleft()
            for v in adj[u]:
                if orders[src, v] < 0:
                    orders[src, v] = orders[src, u] + 1
                    queue.append(v)
    if np.any(orders < 0):
        raise ValueError(f"region graph is disconnected; components: {_components(graph, adj)}")
    return orders


def _components(graph: RegionGraph, adj: list[set[int]]) -> list[list[str]]:
    seen: set[int] = set()
    out = []
    for s in range(len(adj)):
        if s in seen:
            continue
        comp, stack = [], [s]
        seen.add(s)
        while stack:
            u = stack.pop()
            comp.append(graph.regions[u])
            for v in adj[u]:
                if v not in seen:
                    seen.add(v)
                    stack.append(v)
        out.append(sorted(comp))
    return out


def power_law_weights(orders: np.ndarray, rho: float, include_self: bool = True) -> np.ndarray:
    """Unnormalized ``(o + 1)**-rho``, or ``o**-rho`` with zero diagonal."""
    if not rho > 0:
        raise ValueError(f"rho must be positive, got {rho}")
    o = np.asarray(orders, dtype=float)
    if include_self:
        return (o + 1.0) ** -rho
    with np.errstate(divide="ignore"):
        w = np.where(o > 0, o ** -rho, 0.0)
    return w


def free_order_weights(orders: np.ndarray, log_weights: Sequence[float]) -> np.ndarray:
    """Weight 1 at order 0 and ``exp(log_weights[k - 1])`` at order ``k``."""
    o = np.asarray(orders, dtype=int)
    table = np.concatenate([[1.0], np.exp(np.asarray(log_weights, dtype=float))])
    if o.max() >= len(table):
        raise ValueError(f"need {o.max()} free order weights, got {len(table) - 1}")
    return table[o]


def joint_normalize(contact_w: np.ndarray, spatial_w: np.ndarray,
                    labels: Iterable[tuple[str, str]] | None = None) -> np.ndarray:
    """Product weights ``c[g', g] w[r', r]`` normalized over all ``(g, r)``.

    Rows and columns are ordered group-major: index ``g * R + r``.
    """
    C = np.asarray(contact_w, dtype=float)
    W = np.asarray(spatial_w, dtype=float)
    if np.any(C < 0) or np.any(W < 0):
        raise ValueError("contact and spatial weights must be nonnegative")
    R = W.shape[0]
    prod = np.kron(C, W)
    sums = prod.sum(axis=1)
    bad = np.flatnonzero(sums <= 0)
    if bad.size:
        g, r = divmod(int(bad[0]), R)
        names = list(labels) if labels is not None else None
        where = names[bad[0]] if names else (g, r)
        raise ValueError(f"no transmission weight leaves cell (group, region) = {where}")
    return prod / sums[:, None]
