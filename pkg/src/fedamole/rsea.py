"""Reverse-selection expert assignment.

Each expert picks the clients whose data embeddings best match its own
embedding. The per-module choice is made jointly by maximising
``<P, D>`` over binary ``D`` (clients x experts) with

* every expert on exactly ``k_c`` clients, and
* every client holding between ``k_e`` and ``b`` experts.

The constraint matrix is that of a bipartite transportation problem, so the
LP relaxation is integral. :func:`solve_assignment` solves it exactly as a
min-cost flow with arc lower bounds, using integer arithmetic on the exact
binary expansion of the probabilities. A lexicographic tie-break term is
folded into the integer costs, so the returned matrix is the
lexicographically smallest optimum in row-major order and is unique.
"""

from __future__ import annotations

import itertools
import math
from collections import deque
from dataclasses import dataclass
from fractions import Fraction
from typing import Mapping, Sequence

import numpy as np

from .errors import FeasibilityError

__all__ = [
    "AssignmentProblem",
    "FlowNetwork",
    "relevance",
    "selection_probabilities",
    "check_feasible",
    "solve_assignment",
    "enumerate_oracle",
    "objective",
    "audit_assignment",
    "plan_from_assignment",
    "assignment_from_plan",
]


def relevance(token_embeddings, expert_embeddings, d: int) -> np.ndarray:
    """Scores ``s[i, j] = <t_i, e_j> / sqrt(d)``.

    Args:
        token_embeddings: ``[C, r]`` per-client data embeddings.
        expert_embeddings: ``[E, r]`` per-expert embeddings.
        d: hidden size used for scaling.
    """
    t = np.atleast_2d(np.asarray(token_embeddings, dtype=np.float64))
    e = np.atleast_2d(np.asarray(expert_embeddings, dtype=np.float64))
    if t.shape[1] != e.shape[1]:
        raise ValueError(f"embedding sizes differ: {t.shape[1]} vs {e.shape[1]}")
    return t @ e.T / math.sqrt(d)


def selection_probabilities(scores) -> np.ndarray:
    """Softmax over clients (axis 0) for each expert column."""
    s = np.asarray(scores, dtype=np.float64)
    z = np.exp(s - s.max(axis=0, keepdims=True))
    return z / z.sum(axis=0, keepdims=True)


@dataclass(frozen=True)
class AssignmentProblem:
    probs: np.ndarray  # [C, E]
    k_e: int
    k_c: int
    b: int

    @property
    def n_clients(self) -> int:
        return self.probs.shape[0]

    @property
    def n_experts(self) -> int:
        return self.probs.shape[1]


def check_feasible(n_clients: int, n_experts: int, k_e: int, k_c: int, b: int) -> None:
    """Raise :class:`FeasibilityError` naming the first violated inequality."""
    if min(n_clients, n_experts) < 1:
        raise FeasibilityError("need at least one client and one expert")
    if k_e < 0 or k_c < 1 or b < 1:
        raise FeasibilityError(f"invalid bounds k_e={k_e}, k_c={k_c}, b={b}")
    if k_e > b:
        raise FeasibilityError(f"k_e={k_e} > b={b}", key="hmole.k_e")
    if k_c > n_clients:
        raise FeasibilityError(f"k_c={k_c} > C={n_clients}", key="hmole.k_c")
    if k_e > n_experts:
        raise FeasibilityError(f"k_e={k_e} > E={n_experts}", key="hmole.k_e")
    slots = n_experts * k_c
    if n_clients * k_e > slots:
        raise FeasibilityError(
            f"C*k_e <= E*k_c violated: {n_clients}*{k_e}={n_clients * k_e} > {slots}",
            key="hmole.k_e",
        )
    if slots > n_clients * min(b, n_experts):
        raise FeasibilityError(
            f"E*k_c <= C*b violated: {slots} > {n_clients}*{min(b, n_experts)}",
            key="hmole.b",
        )


class FlowNetwork:
    """Residual graph for min-cost flow with integer capacities and costs."""

    def __init__(self, n_nodes: int):
        self.n = n_nodes
        self.head: list[int] = []
        self.cap: list[int] = []
        self.cost: list[int] = []
        self.adj: list[list[int]] = [[] for _ in range(n_nodes)]

    def add_arc(self, u: int, v: int, cap: int, cost: int = 0) -> int:
        """Add ``u -> v``; returns the arc index (its reverse is index ^ 1)."""
        idx = len(self.head)
        self.head += [v, u]
        self.cap += [cap, 0]
        self.cost += [cost, -cost]
        self.adj[u].append(idx)
        self.adj[v].append(idx + 1)
        return idx

    def flow(self, arc: int) -> int:
        return self.cap[arc ^ 1]

    def _shortest_paths(self, source: int):
        # SPFA; residual costs never form negative cycles because every
        # augmentation follows a shortest path.
        dist: list = [None] * self.n
        parent = [-1] * self.n
        in_queue = [False] * self.n
        dist[source] = 0
        queue = deque([source])
        while queue:
            u = queue.popleft()
            in_queue[u] = False
            du = dist[u]
            for arc in self.adj[u]:
                if self.cap[arc] <= 0:
                    continue
                v = self.head[arc]
                nd = du + self.cost[arc]
                if dist[v] is None or nd < dist[v]:
                    dist[v] = nd
                    parent[v] = arc
                    if not in_queue[v]:
                        in_queue[v] = True
                        queue.append(v)
        return dist, parent

    def min_cost_flow(self, source: int, sink: int, demand: int) -> tuple[int, int]:
        """Push up to ``demand`` units along successive shortest paths.

        Returns ``(flow, cost)``.
        """
        flow = cost = 0
        while flow < demand:
            dist, parent = self._shortest_paths(source)
            if dist[sink] is None:
                break
            push = demand - flow
            v = sink
            while v != source:
                arc = parent[v]
                push = min(push, self.cap[arc])
                v = self.head[arc ^ 1]
            v = sink
            while v != source:
                arc = parent[v]
                self.cap[arc] -= push
                self.cap[arc ^ 1] += push
                v = self.head[arc ^ 1]
            flow += push
            cost += push * dist[sink]
        return flow, cost


def _integer_costs(probs: np.ndarray) -> list[list[int]]:
    """Exact integer costs ``(1 - p) * 2^K`` preserving every float's value."""
    fracs = [[Fraction(float(p)) for p in row] for row in probs]
    denom = 1
    for row in fracs:
        for f in row:
            denom = max(denom, f.denominator)
    return [[denom - f.numerator * (denom // f.denominator) for f in row] for row in fracs]


def solve_assignment(problem: AssignmentProblem) -> np.ndarray:
    """Exact maximiser of ``<P, D>`` under the assignment constraints.

    Network: source -> expert ``[k_c, k_c]``; expert -> client ``[0, 1]``
    at cost ``1 - p``; client -> sink ``[k_e, b]``; sink -> source
    unbounded. Lower bounds are removed with the usual excess/deficit
    transform and the resulting flow problem is solved by successive
    shortest paths. Costs are scaled by ``2^(C*E)`` and the row-major
    lexicographic weight of each cell is added, which picks the
    lexicographically smallest optimum without disturbing optimality.

    Returns:
        ``[C, E]`` int8 matrix of zeros and ones.

    Raises:
        FeasibilityError: if the constraints cannot be met.
    """
    P = np.asarray(problem.probs, dtype=np.float64)
    if P.ndim != 2 or not np.isfinite(P).all():
        raise ValueError("probs must be a finite 2-D array")
    C, E = P.shape
    k_e, k_c, b = problem.k_e, problem.k_c, min(problem.b, E)
    check_feasible(C, E, k_e, k_c, b)

    base = _integer_costs(P)
    cells = C * E
    shift = 1 << cells
    cost = [[base[i][j] * shift + (1 << (cells - 1 - (i * E + j))) for j in range(E)] for i in range(C)]

    src, snk = 0, 1 + E + C
    super_src, super_snk = snk + 1, snk + 2
    net = FlowNetwork(snk + 3)
    excess = [0] * net.n

    def bounded(u, v, lo, hi, c=0):
        excess[v] += lo
        excess[u] -= lo
        return net.add_arc(u, v, hi - lo, c) if hi > lo else None

    for j in range(E):
        bounded(src, 1 + j, k_c, k_c)
    arcs = {}
    for j in range(E):
        for i in range(C):
            arcs[i, j] = net.add_arc(1 + j, 1 + E + i, 1, cost[i][j])
    for i in range(C):
        bounded(1 + E + i, snk, k_e, b)
    net.add_arc(snk, src, E * k_c)

    demand = 0
    for v in range(snk + 1):
        if excess[v] > 0:
            net.add_arc(super_src, v, excess[v])
            demand += excess[v]
        elif excess[v] < 0:
            net.add_arc(v, super_snk, -excess[v])
    flow, _ = net.min_cost_flow(super_src, super_snk, demand)
    if flow != demand:
        raise FeasibilityError(f"no feasible assignment (routed {flow} of {demand} units)")

    D = np.zeros((C, E), dtype=np.int8)
    for (i, j), arc in arcs.items():
        D[i, j] = net.flow(arc)
    return D


def objective(probs, D) -> float:
    """``<P, D>`` summed exactly and rounded once."""
    P = np.asarray(probs, dtype=np.float64)
    return math.fsum(P[np.asarray(D, dtype=bool)].tolist())


def audit_assignment(D, k_e: int, k_c: int, b: int) -> list[str]:
    """Constraint violations of ``D`` (empty when it is valid)."""
    D = np.asarray(D)
    problems = []
    if not np.isin(D, (0, 1)).all():
        problems.append("entries outside {0, 1}")
    for i, count in enumerate(D.sum(axis=1)):
        if not k_e <= count <= b:
            problems.append(f"client {i} holds {count} experts, outside [{k_e}, {b}]")
    for j, count in enumerate(D.sum(axis=0)):
        if count != k_c:
            problems.append(f"expert {j} is on {count} clients, expected {k_c}")
    return problems


ORACLE_MAX_CELLS = 20


def enumerate_oracle(problem: AssignmentProblem) -> tuple[np.ndarray | None, Fraction | None]:
    """Brute-force optimum for tiny instances (``C*E <= 20``).

    Enumerates every way of giving each expert exactly ``k_c`` clients,
    keeps those meeting the per-client bounds and compares objectives as
    exact rationals. Among optima it returns the lexicographically smallest
    matrix in row-major order.

    Returns:
        ``(D, value)`` or ``(None, None)`` if the instance is infeasible.
    """
    P = np.asarray(problem.probs, dtype=np.float64)
    C, E = P.shape
    if C * E > ORACLE_MAX_CELLS:
        raise ValueError(f"oracle limited to C*E <= {ORACLE_MAX_CELLS}, got {C * E}")
    exact = [[Fraction(float(p)) for p in row] for row in P]
    column_choices = list(itertools.combinations(range(C), problem.k_c))
    best = None
    best_value = None
    best_key = None
    for choice in itertools.product(column_choices, repeat=E):
        counts = [0] * C
        for rows in choice:
            for i in rows:
                counts[i] += 1
        if any(c < problem.k_e or c > problem.b for c in counts):
            continue
        value = sum(exact[i][j] for j, rows in enumerate(choice) for i in rows)
        D = np.zeros((C, E), dtype=np.int8)
        for j, rows in enumerate(choice):
            D[list(rows), j] = 1
        key = tuple(D.ravel())
        if best_value is None or value > best_value or (value == best_value and key < best_key):
            best, best_value, best_key = D, value, key
    return best, best_value


def plan_from_assignment(matrices: Mapping[str, np.ndarray], expert_ids: Sequence[int] | None = None):
    """Per-module ``{client: sorted expert ids}`` from assignment matrices."""
    plan = {}
    for module, D in matrices.items():
        D = np.asarray(D)
        ids = list(range(D.shape[1])) if expert_ids is None else list(expert_ids)
        plan[module] = {i: [ids[j] for j in np.flatnonzero(D[i])] for i in range(D.shape[0])}
    return plan


def assignment_from_plan(module_plan: Mapping[int, Sequence[int]], n_clients: int, n_experts: int) -> np.ndarray:
    D = np.zeros((n_clients, n_experts), dtype=np.int8)
    for client, experts in module_plan.items():
        D[client, list(experts)] = 1
    return D
