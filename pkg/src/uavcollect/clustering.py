"""Capacity- and radius-constrained K-means over IoT devices.

Alternates two exact steps until the centers stop moving: an assignment step
(minimum total squared 3D distance subject to per-UAV capacities and the LoS
radius, solved as a transportation problem) and a center-update step (optimal
UAV position over each cluster subject to every member seeing the UAV at or
above the minimum elevation angle).

The center update is solved through an exact reduction: for fixed ground
coordinates the altitude constraint binds, h = max(h_min, tan(theta) * max_i
ground_dist_i), leaving a convex two-variable problem handled in epigraph form
by an SQP solver. The textbook Lagrangian-dual route for the same subproblem
is implemented as a cross-check only: its constraint matrices are indefinite
in the altitude direction, so the ascent usually terminates on the boundary
of the dual domain and falls back to the exact reduction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.optimize import minimize

from . import otsolve
from .channel import UavPosition, max_los_radius, power_law_coefficient


class ClusteringInfeasibleError(Exception):
    """Some devices cannot be served; ``devices`` lists their indices."""

    def __init__(self, message: str, devices=()):
        super().__init__(message)
        self.devices = sorted(int(i) for i in devices)


@dataclass
class ClusteringConfig:
    """Knobs of the constrained K-means loop.

    ``capacities`` may be a single int (shared by all UAVs), a per-UAV
    sequence, or None for the ceil(L/K) default resolved at run time.
    """

    num_uavs: int
    theta_min_deg: float
    capacities: int | Sequence[int] | None = None
    min_altitude: float = 100.0
    tolerance: float = 0.1
    max_iterations: int = 100
    seeding: str = "farthest-point"
    seed: int = 0

    def __post_init__(self):
        if self.num_uavs < 1:
            raise ValueError("num_uavs must be at least 1")
        if not 0.0 < self.theta_min_deg < 90.0:
            raise ValueError(f"theta_min_deg must lie in (0, 90), got {self.theta_min_deg}")
        if self.min_altitude < 0:
            raise ValueError("min_altitude must be nonnegative")
        if self.tolerance <= 0:
            raise ValueError("tolerance must be positive")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be at least 1")
        if self.seeding != "farthest-point":
            raise ValueError(f"unknown seeding rule {self.seeding!r}")

    def resolve_capacities(self, num_devices: int) -> np.ndarray:
        if self.capacities is None:
            caps = np.full(self.num_uavs, -(-num_devices // self.num_uavs), dtype=np.int64)
        elif np.isscalar(self.capacities):
            caps = np.full(self.num_uavs, int(self.capacities), dtype=np.int64)
        else:
            caps = np.asarray(self.capacities, dtype=np.int64)
            if caps.shape != (self.num_uavs,):
                raise ValueError("capacities must give one value per UAV")
        if int(caps.sum()) < num_devices:
            raise ValueError(
                f"total capacity {int(caps.sum())} cannot cover {num_devices} devices"
            )
        return caps


@dataclass
class Cluster:
    """Devices served by one UAV: member indices plus the UAV position."""

    members: np.ndarray
    center: UavPosition


@dataclass
class Assignment:
    """Device-to-UAV mapping with its total squared 3D distance."""

    labels: np.ndarray
    objective: float


@dataclass
class ClusteringResult:
    clusters: list[Cluster]
    centers: list[UavPosition]
    labels: np.ndarray
    objective: float
    objective_trace: list[float]
    n_iter: int
    converged: bool


def _centers_array(centers) -> np.ndarray:
    arr = np.asarray([(c[0], c[1], c[2]) for c in centers], dtype=float)
    return arr.reshape(-1, 3)


def squared_distances_3d(devices: np.ndarray, centers) -> np.ndarray:
    """(L, K) squared 3D distances from devices (L, 2) to UAV centers."""
    devices = np.asarray(devices, dtype=float)
    arr = _centers_array(centers)
    ground = ((devices[:, None, :] - arr[None, :, :2]) ** 2).sum(axis=2)
    return ground + arr[None, :, 2] ** 2


def assign_devices(devices, centers, config: ClusteringConfig, initial_labels=None) -> Assignment:
    """Capacity-respecting assignment minimizing total squared 3D distance.

    Arcs whose 3D distance exceeds the LoS radius of the target UAV are
    removed. Raises ClusteringInfeasibleError naming devices that no UAV can
    serve; the altitude-raise fallback lives in the cluster loop.
    """
    devices = np.asarray(devices, dtype=float)
    caps = config.resolve_capacities(len(devices))
    d2 = squared_distances_3d(devices, centers)
    radii = np.array([max_los_radius(c[2], config.theta_min_deg) for c in centers])
    # A sliver of slack keeps members sitting exactly on the radius admissible.
    forbidden = d2 > (radii[None, :] ** 2) * (1.0 + 1e-9)
    try:
        labels = otsolve.solve_semi_assignment(d2, caps, forbidden, initial_labels=initial_labels)
    except otsolve.InfeasibleTransportError as err:
        raise ClusteringInfeasibleError(
            f"devices {err.unroutable_supplies} are outside every UAV's LoS radius "
            "or capacity-starved",
            devices=err.unroutable_supplies,
        ) from err
    objective = float(d2[np.arange(len(devices)), labels].sum())
    return Assignment(labels=labels, objective=objective)


# ---------------------------------------------------------------------------
# center update
# ---------------------------------------------------------------------------


def _cluster_objective(pts: np.ndarray, x: float, y: float, h: float) -> float:
    """Total squared 3D distance of members at (x, y) ground, altitude h."""
    return float(((pts[:, 0] - x) ** 2 + (pts[:, 1] - y) ** 2).sum() + len(pts) * h * h)


def _bound_altitude(pts: np.ndarray, x: float, y: float, tau: float, h_min: float) -> float:
    """Lowest altitude meeting the elevation constraint for all members."""
    gmax = math.sqrt(float(((pts[:, 0] - x) ** 2 + (pts[:, 1] - y) ** 2).max()))
    return max(h_min, tau * gmax)


def update_center(members, theta_min_deg: float, h_min: float = 0.0) -> UavPosition:
    """Optimal UAV position over a member set.

    Minimizes the total squared member-to-UAV distance subject to every
    member's elevation angle reaching ``theta_min_deg`` and the altitude floor
    ``h_min``. The altitude constraint binds at the optimum, which reduces the
    search to a convex problem over the ground coordinates, solved in epigraph
    form (x, y, t) with t an upper bound on all squared ground distances.
    """
    pts = np.asarray(members, dtype=float).reshape(-1, 2)
    n = len(pts)
    if n == 0:
        raise ValueError("cannot place a UAV over an empty member set")
    tau = math.tan(math.radians(theta_min_deg))
    if n == 1:
        return UavPosition(float(pts[0, 0]), float(pts[0, 1]), h_min)

    centroid = pts.mean(axis=0)
    scale = max(1.0, float(np.abs(pts - centroid).max()))
    local = (pts - centroid) / scale
    t_floor = (h_min / (tau * scale)) ** 2

    def objective(z):
        dx = z[0] - local[:, 0]
        dy = z[1] - local[:, 1]
        return float((dx * dx + dy * dy).sum() + n * tau * tau * z[2])

    def objective_grad(z):
        dx = z[0] - local[:, 0]
        dy = z[1] - local[:, 1]
        return np.array([2.0 * dx.sum(), 2.0 * dy.sum(), n * tau * tau])

    def cons(z):
        dx = z[0] - local[:, 0]
        dy = z[1] - local[:, 1]
        vals = z[2] - (dx * dx + dy * dy)
        return np.append(vals, z[2] - t_floor)

    def cons_jac(z):
        dx = z[0] - local[:, 0]
        dy = z[1] - local[:, 1]
        jac = np.column_stack([-2.0 * dx, -2.0 * dy, np.ones(n)])
        return np.vstack([jac, [0.0, 0.0, 1.0]])

    d2_at_centroid = (local**2).sum(axis=1)
    z0 = np.array([0.0, 0.0, max(float(d2_at_centroid.max()), t_floor) * (1 + 1e-9) + 1e-12])
    res = minimize(
        objective,
        z0,
        jac=objective_grad,
        constraints=[{"type": "ineq", "fun": cons, "jac": cons_jac}],
        method="SLSQP",
        options={"maxiter": 300, "ftol": 1e-14},
    )
    cand = [(centroid[0], centroid[1])]
    if res.success or np.isfinite(res.x).all():
        cand.append((centroid[0] + scale * res.x[0], centroid[1] + scale * res.x[1]))

    # Derivative-free polish guards against SQP stalls on tied-radius kinks.
    def ground_obj(xy):
        h = _bound_altitude(pts, xy[0], xy[1], tau, h_min)
        return _cluster_objective(pts, xy[0], xy[1], h)

    nm = minimize(
        ground_obj,
        np.asarray(cand[-1]),
        method="Nelder-Mead",
        options={"xatol": 1e-6, "fatol": 1e-12, "maxiter": 400},
    )
    if np.isfinite(nm.x).all():
        cand.append((nm.x[0], nm.x[1]))

    best_xy = min(cand, key=ground_obj)
    h = _bound_altitude(pts, best_xy[0], best_xy[1], tau, h_min)
    return UavPosition(float(best_xy[0]), float(best_xy[1]), float(h))


@dataclass
class QcqpData:
    """Matrices of the center-update QCQP in its standard form.

    The objective is 0.5 s'P_o s + Q_o's + r_o over s = (x, y, h); each member
    contributes the constraint 0.5 s'P_i s + Q_i's + r_i <= 0. ``omega`` is
    the altitude coefficient 1 - 1/sin^2(theta_min), nonpositive for any
    feasible minimum elevation angle.
    """

    p_o: np.ndarray
    q_o: np.ndarray
    r_o: float
    p_i: np.ndarray
    q_i: np.ndarray
    r_i: np.ndarray
    omega: float


def qcqp_data(members, theta_min_deg: float) -> QcqpData:
    pts = np.asarray(members, dtype=float).reshape(-1, 2)
    n = len(pts)
    omega = 1.0 - 1.0 / math.sin(math.radians(theta_min_deg)) ** 2
    p_o = 2.0 * n * np.eye(3)
    q_o = np.array([-2.0 * pts[:, 0].sum(), -2.0 * pts[:, 1].sum(), 0.0])
    r_o = float((pts**2).sum())
    p_i = np.diag([2.0, 2.0, omega])
    q_i = np.column_stack([-2.0 * pts[:, 0], -2.0 * pts[:, 1], np.zeros(n)])
    r_i = (pts**2).sum(axis=1)
    return QcqpData(p_o=p_o, q_o=q_o, r_o=r_o, p_i=p_i, q_i=q_i, r_i=r_i, omega=omega)


@dataclass
class DualCenterResult:
    position: UavPosition
    lam: np.ndarray
    interior: bool
    boundary_hit: bool
    dual_value: float
    iterations: int


def update_center_dual(members, theta_min_deg: float, max_iter: int = 500) -> DualCenterResult:
    """Cross-check of update_center through the Lagrangian dual of the QCQP.

    Maximizes g(lam) = -0.5 Q(lam)' P(lam)^-1 Q(lam) + r(lam) over lam >= 0 by
    projected gradient ascent, restricted to the region where P(lam) stays
    positive definite. The altitude block of P loses definiteness once the
    multipliers grow past 2n/|omega|; hitting that boundary is reported and
    the exact reduction's answer is returned instead. The dual gradient equals
    the constraint residual at the inner minimizer, so interior convergence
    requires every member to sit at the recovered ground point; expect it only
    for degenerate (co-located) clusters.
    """
    pts = np.asarray(members, dtype=float).reshape(-1, 2)
    n = len(pts)
    if n == 0:
        raise ValueError("cannot place a UAV over an empty member set")
    data = qcqp_data(pts, theta_min_deg)
    tau = math.tan(math.radians(theta_min_deg))
    sum_x, sum_y = pts[:, 0].sum(), pts[:, 1].sum()
    omega = data.omega
    s_bar = math.inf if omega >= 0 else 2.0 * n / (-omega)  # z-block PD bound

    def ground_point(lam):
        s = float(lam.sum())
        denom = 2.0 * n + 2.0 * s
        qx = -2.0 * (sum_x + (lam * pts[:, 0]).sum())
        qy = -2.0 * (sum_y + (lam * pts[:, 1]).sum())
        return np.array([-qx / denom, -qy / denom]), s

    def dual_value(lam):
        xy, s = ground_point(lam)
        denom = 2.0 * n + 2.0 * s
        qx = -xy[0] * denom
        qy = -xy[1] * denom
        return -0.5 * (qx * qx + qy * qy) / denom + data.r_o + float(lam @ data.r_i)

    spread2 = float(((pts - pts.mean(axis=0)) ** 2).sum(axis=1).max())
    grad_tol = 1e-8 * (1.0 + spread2)

    lam = np.zeros(n)
    step = 1.0
    stalled = False
    it = 0
    for it in range(1, max_iter + 1):
        xy, _ = ground_point(lam)
        grad = ((pts - xy) ** 2).sum(axis=1)  # constraint residuals
        if float(grad.max()) <= grad_tol:
            break
        # Backtracking ascent step kept strictly inside the PD region; the
        # dual formula is meaningless once the altitude block goes indefinite.
        g0 = dual_value(lam)
        advanced = False
        while step > 1e-14:
            trial = lam + step * grad
            if trial.sum() < s_bar * (1.0 - 1e-6) and dual_value(trial) > g0:
                lam = trial
                step *= 2.0
                advanced = True
                break
            step *= 0.5
        if not advanced:
            stalled = True
            break

    xy, s = ground_point(lam)
    grad = ((pts - xy) ** 2).sum(axis=1)
    interior = not stalled and float(grad.max()) <= grad_tol and s < s_bar * (1.0 - 1e-6)
    boundary_hit = not interior
    if interior:
        gmax = math.sqrt(float(((pts - xy) ** 2).sum(axis=1).max()))
        pos = UavPosition(float(xy[0]), float(xy[1]), tau * gmax)
    else:
        pos = update_center(pts, theta_min_deg, h_min=0.0)
    return DualCenterResult(
        position=pos,
        lam=lam,
        interior=interior,
        boundary_hit=boundary_hit,
        dual_value=dual_value(lam),
        iterations=it,
    )


# ---------------------------------------------------------------------------
# main loop
# ---------------------------------------------------------------------------


def seed_centers(devices: np.ndarray, k: int, h_min: float, rng: np.random.Generator) -> list[UavPosition]:
    """Farthest-point seeding over device positions at the altitude floor."""
    devices = np.asarray(devices, dtype=float)
    first = int(rng.integers(len(devices)))
    chosen = [first]
    d2 = ((devices - devices[first]) ** 2).sum(axis=1)
    for _ in range(k - 1):
        nxt = int(np.argmax(d2))
        chosen.append(nxt)
        d2 = np.minimum(d2, ((devices - devices[nxt]) ** 2).sum(axis=1))
    return [UavPosition(float(devices[i, 0]), float(devices[i, 1]), h_min) for i in chosen]


def _raise_altitudes(centers, devices, unserved, tau, h_min):
    """Lift, per unserved device, its nearest not-yet-covering UAV to reach it.

    Every lift admits at least one new device-UAV arc, so repeating this on
    persistent infeasibility strictly enlarges the admissible graph and must
    terminate. Returns (new centers, whether anything was lifted).
    """
    arr = _centers_array(centers)
    lifted = list(centers)
    changed = False
    for dev in unserved:
        ground = np.sqrt(((arr[:, :2] - devices[dev]) ** 2).sum(axis=1))
        covering = ground * tau <= arr[:, 2]
        if covering.all():
            continue
        masked = np.where(covering, np.inf, ground)
        j = int(np.argmin(masked))
        need = max(h_min, tau * float(ground[j]) * (1.0 + 1e-9))
        if need > lifted[j][2]:
            lifted[j] = UavPosition(lifted[j][0], lifted[j][1], need)
            arr[j, 2] = need
            changed = True
    return lifted, changed


def cluster_devices(devices, config: ClusteringConfig) -> ClusteringResult:
    """Run constrained K-means to convergence.

    Seeds centers by farthest-point traversal, then alternates exact
    assignment and center updates until the largest center displacement drops
    below the configured tolerance, the assignment stops changing, or the
    iteration cap is reached. The recorded objective (total squared 3D
    distance after each update step) is non-increasing by construction: each
    assignment is exact, and a center update is only accepted when it does not
    degrade its cluster's objective (the previous center is always feasible).
    """
    devices = np.asarray(devices, dtype=float)
    L = len(devices)
    if L == 0:
        raise ValueError("no devices to cluster")
    config.resolve_capacities(L)  # validate capacity early
    rng = np.random.default_rng(config.seed)
    tau = math.tan(math.radians(config.theta_min_deg))
    centers = seed_centers(devices, config.num_uavs, config.min_altitude, rng)

    labels = None
    trace: list[float] = []
    converged = False
    n_iter = 0
    prev_assign_obj = math.inf
    for n_iter in range(1, config.max_iterations + 1):
        try:
            assignment = assign_devices(devices, centers, config, initial_labels=labels)
        except ClusteringInfeasibleError as err:
            # One-shot fallback: lift the nearest UAV over each unserved
            # device so its LoS disk covers it, then retry.
            centers = _raise_altitudes(centers, devices, err.devices, tau, config.min_altitude)
            assignment = assign_devices(devices, centers, config, initial_labels=labels)
        if assignment.objective > prev_assign_obj * (1.0 + 1e-12) + 1e-9:
            raise RuntimeError("assignment step increased the objective")

        new_centers = list(centers)
        for j in range(config.num_uavs):
            members = devices[assignment.labels == j]
            if len(members) == 0:
                continue
            candidate = update_center(members, config.theta_min_deg, config.min_altitude)
            current = centers[j]
            cur_obj = _cluster_objective(members, current[0], current[1], current[2])
            cand_obj = _cluster_objective(members, candidate[0], candidate[1], candidate[2])
            new_centers[j] = candidate if cand_obj <= cur_obj else current

        d2 = squared_distances_3d(devices, new_centers)
        objective = float(d2[np.arange(L), assignment.labels].sum())
        if trace and objective > trace[-1] * (1.0 + 1e-12) + 1e-9:
            raise RuntimeError("update step increased the objective")
        trace.append(objective)
        prev_assign_obj = objective

        moved = max(
            math.dist(tuple(a), tuple(b)) for a, b in zip(centers, new_centers)
        )
        unchanged = labels is not None and np.array_equal(labels, assignment.labels)
        centers = new_centers
        labels = assignment.labels
        if moved < config.tolerance or unchanged:
            converged = True
            break

    clusters = [
        Cluster(members=np.flatnonzero(labels == j), center=centers[j])
        for j in range(config.num_uavs)
    ]
    return ClusteringResult(
        clusters=clusters,
        centers=centers,
        labels=labels,
        objective=trace[-1],
        objective_trace=trace,
        n_iter=n_iter,
        converged=converged,
    )


def total_power(clusters: list[Cluster], devices, link, ch) -> float:
    """Total minimum transmit power (watts) of all devices in their clusters.

    Equal to the power-law coefficient times the total squared member-to-UAV
    distance, which is exactly the per-device minimum-power sum.
    """
    devices = np.asarray(devices, dtype=float)
    coeff = power_law_coefficient(link, ch)
    total = 0.0
    for cluster in clusters:
        if len(cluster.members) == 0:
            continue
        pts = devices[cluster.members]
        c = cluster.center
        total += _cluster_objective(pts, c[0], c[1], c[2])
    return coeff * total
