"""Exact integer transportation solver with dual-potential optimality certificates.

One solver serves every matching step in the pipeline: the capacity-bounded
device-to-UAV assignment (unit device supplies against UAV capacities) and the
one-to-one matching of UAVs to new cluster centers. The LP relaxation of a
balanced transportation problem has integral vertices, so the tree simplex
below returns provably optimal integer plans directly, along with dual
potentials that certify optimality through complementary slackness.

Forbidden arcs are removed from the basis graph outright instead of being
priced with a large penalty, which keeps the dual potentials clean. Degenerate
pivots use Bland's rule (lowest arc index enters, lowest index leaves among
ties), so the solver always terminates and is fully deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class InfeasibleTransportError(Exception):
    """No feasible flow exists.

    ``unroutable_supplies`` lists supply-row indices whose remaining supply
    cannot reach unmet demand through admissible arcs.
    """

    def __init__(self, message: str, unroutable_supplies=()):
        super().__init__(message)
        self.unroutable_supplies = sorted(int(i) for i in unroutable_supplies)


@dataclass
class TransportProblem:
    """Balanced or unbalanced transportation instance.

    ``costs`` is an (m, n) matrix of finite arc costs, ``supplies`` and
    ``demands`` are nonnegative integer masses, and ``forbidden`` marks arcs
    removed from the problem (None means all arcs admissible).
    """

    costs: np.ndarray
    supplies: np.ndarray
    demands: np.ndarray
    forbidden: np.ndarray | None = None

    def __post_init__(self):
        self.costs = np.asarray(self.costs, dtype=float)
        if self.costs.ndim != 2:
            raise ValueError("costs must be a 2D matrix")
        m, n = self.costs.shape
        self.supplies = np.asarray(self.supplies, dtype=np.int64)
        self.demands = np.asarray(self.demands, dtype=np.int64)
        if self.supplies.shape != (m,) or self.demands.shape != (n,):
            raise ValueError("supplies/demands do not match the cost matrix shape")
        if (self.supplies < 0).any() or (self.demands < 0).any():
            raise ValueError("supplies and demands must be nonnegative")
        if self.forbidden is None:
            self.forbidden = np.zeros((m, n), dtype=bool)
        else:
            self.forbidden = np.asarray(self.forbidden, dtype=bool)
            if self.forbidden.shape != (m, n):
                raise ValueError("forbidden mask does not match the cost matrix shape")
        if not np.isfinite(self.costs[~self.forbidden]).all():
            raise ValueError("admissible arc costs must be finite")

    @property
    def is_balanced(self) -> bool:
        return int(self.supplies.sum()) == int(self.demands.sum())


@dataclass
class TransportPlan:
    """Optimal integer flow with its dual certificate.

    The potentials satisfy ``col_potentials[l] - row_potentials[k] <= cost[k, l]``
    on every admissible arc, with equality wherever ``flow[k, l] > 0``; the
    dual objective ``phi @ demands - xi @ supplies`` equals ``objective``.
    """

    flow: np.ndarray
    objective: float
    row_potentials: np.ndarray  # xi, one per supply node
    col_potentials: np.ndarray  # phi, one per demand node


@dataclass
class CertificateReport:
    """Outcome of checking a plan against its problem; empty failures = pass."""

    passed: bool
    failures: list[str] = field(default_factory=list)
    max_dual_violation: float = 0.0
    max_slackness_gap: float = 0.0


def certificate_tolerance(costs: np.ndarray) -> float:
    """Default tolerance for dual checks, scaled by the cost magnitude."""
    finite = costs[np.isfinite(costs)]
    scale = float(np.abs(finite).max()) if finite.size else 0.0
    return 1e-9 * (1.0 + scale)


# ---------------------------------------------------------------------------
# feasibility: connected components + greedy flow + augmenting paths
# ---------------------------------------------------------------------------


def _components(admissible: np.ndarray):
    """Label connected components of the bipartite admissible graph.

    Returns per-row and per-column component ids plus the component count;
    isolated columns get their own components.
    """
    m, n = admissible.shape
    comp_row = np.full(m, -1, dtype=int)
    comp_col = np.full(n, -1, dtype=int)
    comp = 0
    for start in range(m):
        if comp_row[start] >= 0:
            continue
        comp_row[start] = comp
        stack = [("r", start)]
        while stack:
            kind, idx = stack.pop()
            if kind == "r":
                for j in np.flatnonzero(admissible[idx]):
                    if comp_col[j] < 0:
                        comp_col[j] = comp
                        stack.append(("c", int(j)))
            else:
                for i in np.flatnonzero(admissible[:, idx]):
                    if comp_row[i] < 0:
                        comp_row[i] = comp
                        stack.append(("r", int(i)))
        comp += 1
    for j in range(n):
        if comp_col[j] < 0:
            comp_col[j] = comp
            comp += 1
    return comp_row, comp_col, comp


def _greedy_flow(costs, admissible, rem_s, rem_d):
    """Fill cheap arcs first, saturating a row or column per push.

    Every push moves min(remaining supply, remaining demand), so no
    row-column pair repeats and the resulting support is a forest.
    """
    m, n = costs.shape
    flow = np.zeros((m, n), dtype=np.int64)
    flat = np.flatnonzero(admissible.ravel())
    order = flat[np.argsort(costs.ravel()[flat], kind="stable")]
    for arc in order:
        i, j = divmod(int(arc), n)
        if rem_s[i] == 0 or rem_d[j] == 0:
            continue
        push = min(rem_s[i], rem_d[j])
        flow[i, j] = push
        rem_s[i] -= push
        rem_d[j] -= push
    return flow


def _augment_to_feasibility(flow, admissible, rem_s, rem_d):
    """Route stranded supply with BFS augmenting paths on the residual graph.

    Raises InfeasibleTransportError when some supply cannot reach unmet
    demand; may leave cycles in the support of ``flow``.
    """
    m, n = admissible.shape
    while True:
        sources = np.flatnonzero(rem_s)
        if sources.size == 0:
            return
        prev_col = np.full(n, -2, dtype=int)  # row that reached this column
        prev_row = np.full(m, -2, dtype=int)  # column that reached this row
        queue = list(map(int, sources))
        for i in sources:
            prev_row[i] = -1  # root marker
        reached = -1
        head = 0
        while head < len(queue) and reached < 0:
            i = queue[head]
            head += 1
            for j in np.flatnonzero(admissible[i]):
                if prev_col[j] != -2:
                    continue
                prev_col[j] = i
                if rem_d[j] > 0:
                    reached = int(j)
                    break
                for i2 in np.flatnonzero(flow[:, j]):
                    if prev_row[i2] == -2:
                        prev_row[i2] = j
                        queue.append(int(i2))
        if reached < 0:
            raise InfeasibleTransportError(
                "no feasible flow: supply rows "
                f"{sorted(int(i) for i in sources)} cannot reach unmet demand",
                unroutable_supplies=sources,
            )
        # Trace the alternating path back and push the bottleneck along it.
        path = []  # (i, j, +1 push / -1 withdraw)
        j = reached
        bottleneck = int(rem_d[j])
        while True:
            i = int(prev_col[j])
            path.append((i, j, +1))
            if prev_row[i] == -1:
                bottleneck = min(bottleneck, int(rem_s[i]))
                break
            j_back = int(prev_row[i])
            path.append((i, j_back, -1))
            bottleneck = min(bottleneck, int(flow[i, j_back]))
            j = j_back
        for i, j, direction in path:
            flow[i, j] += direction * bottleneck
        rem_s[path[-1][0]] -= bottleneck
        rem_d[reached] -= bottleneck


def _find_support_cycle(flow: np.ndarray):
    """Return one cycle of the support graph as an ordered node list, or None."""
    m, n = flow.shape
    cols_of_row = [list(map(int, np.flatnonzero(flow[i, :]))) for i in range(m)]
    rows_of_col = [list(map(int, np.flatnonzero(flow[:, j]))) for j in range(n)]
    visited = set()
    for start in range(m):
        root = ("r", start)
        if root in visited or not cols_of_row[start]:
            continue
        parent = {root: None}
        depth = {root: 0}
        stack = [root]
        while stack:
            node = stack.pop()
            visited.add(node)
            kind, idx = node
            nbrs = (
                [("c", j) for j in cols_of_row[idx]]
                if kind == "r"
                else [("r", i) for i in rows_of_col[idx]]
            )
            for nb in nbrs:
                if nb == parent[node]:
                    continue
                if nb in parent:
                    # Back edge: climb both endpoints to their meeting node.
                    up_a, up_b = node, nb
                    path_a, path_b = [up_a], [up_b]
                    while depth[up_a] > depth[up_b]:
                        up_a = parent[up_a]
                        path_a.append(up_a)
                    while depth[up_b] > depth[up_a]:
                        up_b = parent[up_b]
                        path_b.append(up_b)
                    while up_a != up_b:
                        up_a, up_b = parent[up_a], parent[up_b]
                        path_a.append(up_a)
                        path_b.append(up_b)
                    # node -> ... -> meet -> ... -> nb, closed by (nb, node)
                    return path_a + path_b[:-1][::-1]
                parent[nb] = node
                depth[nb] = depth[node] + 1
                stack.append(nb)
    return None


def _cancel_cycles(flow: np.ndarray):
    """Rebalance flow until its support is acyclic; marginals are preserved."""
    while True:
        nodes = _find_support_cycle(flow)
        if nodes is None:
            return
        arcs = []
        for k in range(len(nodes)):
            a, b = nodes[k], nodes[(k + 1) % len(nodes)]
            arcs.append((a[1], b[1]) if a[0] == "r" else (b[1], a[1]))
        # Alternating signs preserve every marginal on a bipartite cycle.
        delta = min(int(flow[i, j]) for i, j in arcs[1::2])
        for k, (i, j) in enumerate(arcs):
            flow[i, j] += delta if k % 2 == 0 else -delta


def _spanning_basis(flow: np.ndarray, admissible: np.ndarray) -> np.ndarray:
    """Extend the acyclic support of ``flow`` to a spanning forest.

    Adds zero-flow admissible arcs in index order until every admissible
    component is spanned by exactly one tree.
    """
    m, n = flow.shape
    parent = list(range(m + n))

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    in_basis = flow > 0
    for i, j in zip(*np.nonzero(in_basis)):
        ri, rj = find(int(i)), find(m + int(j))
        if ri != rj:
            parent[ri] = rj
    for i, j in zip(*np.nonzero(admissible)):
        ri, rj = find(int(i)), find(m + int(j))
        if ri != rj:
            parent[ri] = rj
            in_basis[i, j] = True
    return in_basis


# ---------------------------------------------------------------------------
# tree simplex
# ---------------------------------------------------------------------------


class _Forest:
    """Basis forest over rows 0..m-1 and columns m..m+n-1.

    Adjacency is kept up to date across pivots instead of being rebuilt,
    which dominates runtime on instances with many rows.
    """

    def __init__(self, m: int, n: int, in_basis: np.ndarray):
        self.m = m
        self.n = n
        self.in_basis = in_basis
        self.adj: list[list[int]] = [[] for _ in range(m + n)]
        for i, j in zip(*np.nonzero(in_basis)):
            self._link(int(i), int(j))

    def _link(self, i: int, j: int):
        self.adj[i].append(self.m + j)
        self.adj[self.m + j].append(i)

    def _unlink(self, i: int, j: int):
        self.adj[i].remove(self.m + j)
        self.adj[self.m + j].remove(i)

    def swap(self, enter: tuple[int, int], leave: tuple[int, int]):
        self.in_basis[leave] = False
        self._unlink(*leave)
        self.in_basis[enter] = True
        self._link(*enter)

    def potentials(self, costs: np.ndarray):
        """Solve u_i + w_j = c_ij over each tree, rooting components at 0."""
        m = self.m
        u = np.zeros(m)
        w = np.zeros(self.n)
        seen = bytearray(m + self.n)
        adj = self.adj
        for root in range(m + self.n):
            if seen[root]:
                continue
            seen[root] = 1
            stack = [root]
            while stack:
                node = stack.pop()
                if node < m:
                    un = u[node]
                    for nb in adj[node]:
                        if not seen[nb]:
                            seen[nb] = 1
                            w[nb - m] = costs[node, nb - m] - un
                            stack.append(nb)
                else:
                    wn = w[node - m]
                    for nb in adj[node]:
                        if not seen[nb]:
                            seen[nb] = 1
                            u[nb] = costs[nb, node - m] - wn
                            stack.append(nb)
        return u, w

    def tree_path(self, row: int, col: int):
        """Node path from ``row`` to column node ``m + col``, or None."""
        target = self.m + col
        adj = self.adj
        parent = {row: -1}
        queue = [row]
        head = 0
        while head < len(queue):
            node = queue[head]
            head += 1
            if node == target:
                path = [node]
                while parent[path[-1]] != -1:
                    path.append(parent[path[-1]])
                return path[::-1]
            for nb in adj[node]:
                if nb not in parent:
                    parent[nb] = node
                    queue.append(nb)
        return None


def solve_transportation(problem: TransportProblem, warm_flow: np.ndarray | None = None) -> TransportPlan:
    """Solve a balanced transportation problem to proven optimality.

    Returns an integer flow meeting all marginals together with dual
    potentials satisfying complementary slackness. Raises ValueError on
    unbalanced input and InfeasibleTransportError when forbidden arcs
    disconnect supply from demand.

    ``warm_flow`` optionally seeds the simplex with a known feasible flow
    (marginals met, zero on forbidden arcs); an invalid warm start falls
    back to the cold-start construction.
    """
    if not problem.is_balanced:
        raise ValueError(
            f"unbalanced instance (supply {int(problem.supplies.sum())} != "
            f"demand {int(problem.demands.sum())}); add a zero-cost slack node"
        )
    costs = problem.costs
    m, n = costs.shape
    admissible = ~problem.forbidden

    flow = None
    if warm_flow is not None:
        warm = np.asarray(warm_flow, dtype=np.int64)
        if (
            warm.shape == (m, n)
            and (warm >= 0).all()
            and (warm.sum(axis=1) == problem.supplies).all()
            and (warm.sum(axis=0) == problem.demands).all()
            and not warm[problem.forbidden].any()
        ):
            flow = warm.copy()

    if flow is None:
        # No flow crosses between components, so balance must hold per one.
        comp_row, comp_col, n_comp = _components(admissible)
        bad_rows: list[int] = []
        for c in range(n_comp):
            if int(problem.supplies[comp_row == c].sum()) != int(problem.demands[comp_col == c].sum()):
                bad_rows.extend(map(int, np.flatnonzero((comp_row == c) & (problem.supplies > 0))))
        if bad_rows:
            raise InfeasibleTransportError(
                "forbidden arcs disconnect supply from demand; "
                f"unroutable supply rows {sorted(bad_rows)}",
                unroutable_supplies=bad_rows,
            )
        rem_s = problem.supplies.astype(np.int64).copy()
        rem_d = problem.demands.astype(np.int64).copy()
        flow = _greedy_flow(costs, admissible, rem_s, rem_d)
        _augment_to_feasibility(flow, admissible, rem_s, rem_d)

    _cancel_cycles(flow)
    forest = _Forest(m, n, _spanning_basis(flow, admissible))

    cost_scale = float(np.abs(costs[admissible]).max()) if admissible.any() else 0.0
    pivot_tol = 1e-11 * (1.0 + cost_scale)
    max_pivots = 200 * (m + n) * max(m, n) + 10000

    # Entering rule: steepest (most negative reduced cost) while the
    # objective moves; a run of degenerate pivots switches to Bland's
    # lowest-index rule, whose finiteness breaks any stall.
    stall = 0
    stall_limit = 4 * (m + n)
    blocked = ~admissible

    for _ in range(max_pivots):
        u, w = forest.potentials(costs)
        reduced = costs - u[:, None] - w[None, :]
        np.putmask(reduced, blocked | forest.in_basis, np.inf)
        if stall <= stall_limit:
            enter = int(reduced.argmin())
            if reduced.ravel()[enter] >= -pivot_tol:
                break
        else:
            candidates = np.flatnonzero(reduced.ravel() < -pivot_tol)
            if candidates.size == 0:
                break
            enter = int(candidates[0])
        ei, ej = divmod(enter, n)

        nodes = forest.tree_path(ei, ej)
        if nodes is None:
            raise RuntimeError("basis forest lost connectivity")
        # Path arcs alternate signs, starting and ending with a decrease;
        # the entering arc itself carries the increase into column ej.
        cycle_arcs = []
        for k in range(len(nodes) - 1):
            a, b = nodes[k], nodes[k + 1]
            i, j = (a, b - m) if a < m else (b, a - m)
            cycle_arcs.append((int(i), int(j), -1 if k % 2 == 0 else +1))

        neg = [(i, j) for i, j, s in cycle_arcs if s < 0]
        delta = min(int(flow[i, j]) for i, j in neg)
        # Among minimum-flow arcs the lowest index leaves (Bland-consistent).
        leave = min(i * n + j for i, j in neg if flow[i, j] == delta)
        li, lj = divmod(leave, n)

        stall = 0 if delta > 0 else stall + 1
        flow[ei, ej] += delta
        for i, j, s in cycle_arcs:
            flow[i, j] += s * delta
        forest.swap((ei, ej), (li, lj))
    else:
        raise RuntimeError("transportation simplex failed to terminate")

    u, w = forest.potentials(costs)
    objective = float((costs[flow > 0] * flow[flow > 0]).sum())
    return TransportPlan(flow=flow, objective=objective, row_potentials=-u, col_potentials=w)


def verify_certificate(
    plan: TransportPlan, problem: TransportProblem, tol: float | None = None
) -> CertificateReport:
    """Check a plan's feasibility and its dual optimality certificate.

    Verifies marginals, integrality, zero flow on forbidden arcs, dual
    feasibility on admissible arcs, complementary slackness on the support,
    and agreement of primal and dual objectives. Never raises; failures come
    back as structured reasons.
    """
    failures: list[str] = []
    costs = problem.costs
    m, n = costs.shape
    if plan.flow.shape != (m, n):
        return CertificateReport(passed=False, failures=["plan dimensions do not match problem"])
    if tol is None:
        tol = certificate_tolerance(costs)

    flow = plan.flow
    if (flow < 0).any():
        failures.append("negative flow entries")
    if not np.issubdtype(flow.dtype, np.integer) and not np.allclose(flow, np.round(flow), atol=1e-12):
        failures.append("non-integer flow entries")
    row_sums = flow.sum(axis=1)
    col_sums = flow.sum(axis=0)
    if (row_sums != problem.supplies).any():
        failures.append(f"row marginals violated at rows {np.flatnonzero(row_sums != problem.supplies).tolist()}")
    if (col_sums != problem.demands).any():
        failures.append(
            f"column marginals violated at columns {np.flatnonzero(col_sums != problem.demands).tolist()}"
        )
    if (flow[problem.forbidden] != 0).any():
        failures.append("positive flow on forbidden arcs")

    xi = plan.row_potentials
    phi = plan.col_potentials
    gap = phi[None, :] - xi[:, None] - costs  # <= 0 required on admissible arcs
    admissible = ~problem.forbidden
    max_dual_violation = float(gap[admissible].max()) if admissible.any() else 0.0
    if max_dual_violation > tol:
        failures.append(f"dual infeasibility {max_dual_violation:.3e} exceeds tolerance {tol:.3e}")

    support = (flow > 0) & admissible
    max_slackness_gap = float(np.abs(gap[support]).max()) if support.any() else 0.0
    if max_slackness_gap > tol:
        failures.append(f"complementary slackness gap {max_slackness_gap:.3e} exceeds tolerance {tol:.3e}")

    primal = float((costs[flow > 0] * flow[flow > 0]).sum())
    dual = float(phi @ problem.demands - xi @ problem.supplies)
    scale = 1.0 + abs(primal)
    if abs(primal - plan.objective) > tol * scale:
        failures.append(f"stored objective {plan.objective} differs from recomputed {primal}")
    if abs(primal - dual) > tol * scale * (m + n):
        failures.append(f"duality gap: primal {primal} vs dual {dual}")

    return CertificateReport(
        passed=not failures,
        failures=failures,
        max_dual_violation=max(0.0, max_dual_violation),
        max_slackness_gap=max_slackness_gap,
    )


def solve_semi_assignment(
    costs: np.ndarray,
    capacities: np.ndarray,
    forbidden: np.ndarray | None = None,
    initial_labels: np.ndarray | None = None,
) -> np.ndarray:
    """Assign each row to one column at minimum total cost under column capacities.

    Rows carry unit supply; column ``j`` accepts at most ``capacities[j]``
    rows. Surplus capacity drains into a zero-cost slack supply so the
    instance handed to the transportation solver is balanced. Returns the
    chosen column index for every row.

    ``initial_labels`` warm-starts the solve from a known assignment (it must
    respect capacities and admissibility to take effect); the result is the
    exact optimum either way.
    """
    costs = np.asarray(costs, dtype=float)
    if costs.ndim != 2:
        raise ValueError("costs must be a 2D matrix")
    rows, cols = costs.shape
    capacities = np.asarray(capacities, dtype=np.int64)
    if capacities.shape != (cols,):
        raise ValueError("capacities must give one integer per column")
    total_cap = int(capacities.sum())
    if total_cap < rows:
        raise InfeasibleTransportError(
            f"total capacity {total_cap} below the {rows} rows to assign",
            unroutable_supplies=range(rows),
        )
    if forbidden is None:
        forbidden = np.zeros((rows, cols), dtype=bool)
    else:
        forbidden = np.asarray(forbidden, dtype=bool)
    blocked = np.flatnonzero(forbidden.all(axis=1))
    if blocked.size:
        raise InfeasibleTransportError(
            f"rows {blocked.tolist()} have every arc forbidden",
            unroutable_supplies=blocked,
        )

    slack = total_cap - rows
    if slack:
        supplies = np.concatenate([np.ones(rows, dtype=np.int64), [slack]])
        full_costs = np.vstack([costs, np.zeros(cols)])
        full_forbidden = np.vstack([forbidden, np.zeros(cols, dtype=bool)])
    else:
        supplies = np.ones(rows, dtype=np.int64)
        full_costs = costs
        full_forbidden = forbidden

    problem = TransportProblem(
        costs=full_costs, supplies=supplies, demands=capacities, forbidden=full_forbidden
    )
    warm_flow = None
    if initial_labels is not None:
        labels = np.asarray(initial_labels, dtype=np.int64)
        if labels.shape == (rows,) and (0 <= labels).all() and (labels < cols).all():
            counts = np.bincount(labels, minlength=cols)
            if (counts <= capacities).all() and not forbidden[np.arange(rows), labels].any():
                warm_flow = np.zeros_like(full_costs, dtype=np.int64)
                warm_flow[np.arange(rows), labels] = 1
                if slack:
                    warm_flow[rows] = capacities - counts
    try:
        plan = solve_transportation(problem, warm_flow=warm_flow)
    except InfeasibleTransportError as err:
        device_rows = [i for i in err.unroutable_supplies if i < rows]
        raise InfeasibleTransportError(
            f"rows {device_rows} cannot be routed to any admissible column",
            unroutable_supplies=device_rows,
        ) from err
    return plan.flow[:rows].argmax(axis=1)
