"""Bistatic sensing geometry with a fixed receiver at the origin.

A mobile transmitter at ``s_i`` reaches the receiver directly (line of
sight) and via a static target at ``p`` (reflected path). Ranges and range
rates follow from the geometry; the Doppler of each path is
``-f_c * rate / c``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from os import PathLike
from typing import Sequence

import numpy as np
import yaml

__all__ = [
    "C",
    "Scene",
    "SensingMeasurement",
    "nlos_range",
    "nlos_range_rate",
    "los_range_rate",
    "path_coupling_angle",
    "measurements_from_paths",
    "true_measurements",
    "synthesize_measurements",
    "linear_trajectory",
    "arc_trajectory",
    "SceneParams",
    "sample_scene",
    "write_measurements_csv",
    "read_measurements_csv",
    "load_scene",
]

C = 299_792_458.0


@dataclass
class Scene:
    """Receiver at origin, per-instant transmitter states and a static target."""

    tx_positions: np.ndarray  # (n, 2)
    tx_velocities: np.ndarray  # (n, 2)
    target: np.ndarray  # (2,)
    f_c: float = 5.6e9
    c: float = C

    def __post_init__(self):
        self.tx_positions = np.atleast_2d(np.asarray(self.tx_positions, dtype=float))
        self.tx_velocities = np.atleast_2d(np.asarray(self.tx_velocities, dtype=float))
        self.target = np.asarray(self.target, dtype=float)
        if self.tx_positions.shape != self.tx_velocities.shape or self.tx_positions.shape[1] != 2:
            raise ValueError("tx_positions and tx_velocities must both be (n, 2)")
        if np.linalg.norm(self.target) == 0:
            raise ValueError("target cannot coincide with the receiver")
        for s in self.tx_positions:
            if _on_segment(self.target, s, np.zeros(2)):
                raise ValueError(f"target lies on the Tx-Rx segment for Tx at {s}")

    @property
    def rx(self) -> np.ndarray:
        return np.zeros(2)

    def __len__(self) -> int:
        return len(self.tx_positions)


@dataclass
class SensingMeasurement:
    r_hat: float
    r_dot_hat: float
    d_dot_hat: float
    s: np.ndarray
    sigma_r: float = 0.0
    sigma_rdot: float = 0.0
    sigma_ddot: float = 0.0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.s = np.asarray(self.s, dtype=float)
        if min(self.sigma_r, self.sigma_rdot, self.sigma_ddot) < 0:
            raise ValueError("standard deviations must be non-negative")


def _on_segment(p, a, b, tol=1e-9) -> bool:
    ab = b - a
    ap = p - a
    cross = ab[0] * ap[1] - ab[1] * ap[0]
    if abs(cross) > tol * max(1.0, np.linalg.norm(ab) ** 2):
        return False
    t = np.dot(ap, ab) / np.dot(ab, ab)
    return 0.0 <= t <= 1.0


def nlos_range(p, s) -> float:
    """Bistatic range ``|p - s| + |p|``."""
    p = np.asarray(p, dtype=float)
    s = np.asarray(s, dtype=float)
    return float(np.linalg.norm(p - s) + np.linalg.norm(p))


def nlos_range_rate(p, s, s_dot) -> float:
    """Rate of change of the reflected path length for a static target."""
    diff = np.asarray(s, dtype=float) - np.asarray(p, dtype=float)
    dist = np.linalg.norm(diff)
    if dist == 0:
        raise ValueError("transmitter coincides with target")
    return float(diff @ np.asarray(s_dot, dtype=float) / dist)


def los_range_rate(s, s_dot) -> float:
    """Rate of change of the direct path length (receiver at origin)."""
    if not np.any(np.asarray(s, dtype=float)):
        raise ValueError("transmitter coincides with receiver")
    return nlos_range_rate(np.zeros(2), s, s_dot)


def path_coupling_angle(s, p, t=(0.0, 0.0)) -> float:
    """Acute angle at the transmitter between the lines towards the receiver and the target.

    Computed from the law of cosines. Obtuse angles are folded to
    ``pi - theta`` so the result lies in ``[0, pi/2]``: a target behind the
    transmitter is as badly placed for velocity estimation as one in front,
    since both make the two range-rate directions parallel.
    """
    s, p, t = (np.asarray(v, dtype=float) for v in (s, p, t))
    st = np.linalg.norm(s - t)
    sp = np.linalg.norm(s - p)
    pt = np.linalg.norm(p - t)
    if st == 0 or sp == 0:
        raise ValueError("degenerate triangle")
    cos_theta = (st**2 + sp**2 - pt**2) / (2 * sp * st)
    theta = float(np.arccos(np.clip(cos_theta, -1.0, 1.0)))
    return min(theta, np.pi - theta)


def measurements_from_paths(estimates, s, f_c: float, c: float = C,
                            sigmas: tuple[float, float, float] = (0.0, 0.0, 0.0)
                            ) -> SensingMeasurement:
    """Map a LoS/NLoS pair of path estimates to range and range-rate measurements.

    The shorter delay is taken as line of sight and the longest as the
    reflected path.
    """
    if len(estimates) < 2:
        raise ValueError(f"need a LoS and an NLoS path, got {len(estimates)} estimate(s)")
    ordered = sorted(estimates, key=lambda e: e.tau_hat)
    los, nlos = ordered[0], ordered[-1]
    return SensingMeasurement(
        r_hat=c * nlos.tau_hat,
        r_dot_hat=-c * nlos.nu_hat / f_c,
        d_dot_hat=-c * los.nu_hat / f_c,
        s=s,
        sigma_r=sigmas[0], sigma_rdot=sigmas[1], sigma_ddot=sigmas[2],
    )


def true_measurements(scene: Scene) -> list[SensingMeasurement]:
    return [
        SensingMeasurement(
            r_hat=nlos_range(scene.target, s),
            r_dot_hat=nlos_range_rate(scene.target, s, v),
            d_dot_hat=los_range_rate(s, v),
            s=s,
        )
        for s, v in zip(scene.tx_positions, scene.tx_velocities)
    ]


def synthesize_measurements(scene: Scene, sigmas: tuple[float, float, float],
                            seed=None) -> list[SensingMeasurement]:
    """True measurements plus independent zero-mean Gaussian errors."""
    sigma_r, sigma_rdot, sigma_ddot = (float(x) for x in sigmas)
    rng = np.random.default_rng(seed)
    out = []
    for m in true_measurements(scene):
        e = rng.standard_normal(3) * np.array([sigma_r, sigma_rdot, sigma_ddot])
        out.append(SensingMeasurement(
            r_hat=m.r_hat - e[0], r_dot_hat=m.r_dot_hat - e[1], d_dot_hat=m.d_dot_hat - e[2],
            s=m.s, sigma_r=sigma_r, sigma_rdot=sigma_rdot, sigma_ddot=sigma_ddot))
    return out


def linear_trajectory(start, velocity, n: int, dt: float) -> tuple[np.ndarray, np.ndarray]:
    """Constant-velocity straight line sampled at ``n`` instants spaced ``dt`` seconds."""
    start = np.asarray(start, dtype=float)
    velocity = np.asarray(velocity, dtype=float)
    t = np.arange(n)[:, None] * dt
    return start + t * velocity, np.repeat(velocity[None, :], n, axis=0)


def arc_trajectory(center, radius: float, start_angle: float, sweep: float, n: int,
                   speed: float) -> tuple[np.ndarray, np.ndarray]:
    """Constant-speed motion along a circular arc.

    ``n`` positions evenly spaced over ``sweep`` radians starting at
    ``start_angle``; a negative ``sweep`` turns clockwise. Velocities are
    tangent to the arc with magnitude ``speed``.
    """
    if radius <= 0:
        raise ValueError("radius must be positive")
    center = np.asarray(center, dtype=float)
    a = start_angle + np.linspace(0.0, sweep, n)
    pos = center + radius * np.c_[np.cos(a), np.sin(a)]
    direction = 1.0 if sweep >= 0 else -1.0
    vel = direction * speed * np.c_[-np.sin(a), np.cos(a)]
    return pos, vel


@dataclass(frozen=True)
class SceneParams:
    """Ranges for random scene generation (metres, m/s, degrees).

    The transmitter turns along an arc; straight tracks give ellipse
    families that nearly share a second intersection, which makes every
    solver ambiguous. With ``cos_theta`` set, the target is placed so that
    the angle at the middle transmitter position between the receiver and
    the target directions has that cosine. Instants whose cosine exceeds
    ``max_cos_theta`` are rejected (their velocity system is near singular).
    """

    n_instants: int = 5
    arc_deg: float = 90.0
    radius: tuple[float, float] = (25.0, 50.0)
    center_spread: float = 10.0
    speed: tuple[float, float] = (20.0, 72.0)
    target_range: tuple[float, float] = (10.0, 40.0)
    tx_range: tuple[float, float] = (10.0, 80.0)
    clearance: float = 10.0
    cos_theta: float | None = None
    target_offset: tuple[float, float] = (10.0, 40.0)
    max_cos_theta: float = 0.9

    def __post_init__(self):
        if self.n_instants < 3:
            raise ValueError("at least 3 instants are needed to localise")
        if self.cos_theta is not None and not 0.0 <= self.cos_theta < 1.0:
            raise ValueError("cos_theta must lie in [0, 1)")
        if not 0.0 < self.max_cos_theta <= 1.0:
            raise ValueError("max_cos_theta must lie in (0, 1]")


def _coupled_track(rng, params: SceneParams):
    """Target and an arc on which every instant sees the receiver-target chord under theta.

    By the inscribed-angle theorem, points on the major arc of a circle
    through the receiver and the target all subtend the chord at the same
    angle. Returns ``None`` when the arc cannot keep ``clearance``.
    """
    theta = float(np.arccos(params.cos_theta))
    rho = rng.uniform(*params.target_range)
    bearing = rng.uniform(0.0, 2 * np.pi)
    target = rho * np.array([np.cos(bearing), np.sin(bearing)])
    normal = rng.choice([-1.0, 1.0]) * np.array([-np.sin(bearing), np.cos(bearing)])
    radius = rho / (2 * np.sin(theta))
    center = target / 2 + normal * (rho / 2) / np.tan(theta) if theta < np.pi / 2 else target / 2
    if params.clearance >= 2 * radius:
        return None
    half = np.pi - theta  # the major arc spans far_angle +- half
    margin = 2 * np.arcsin(params.clearance / (2 * radius))
    width = min(np.deg2rad(params.arc_deg), 2 * (half - margin))
    if width <= 0:
        return None
    far_angle = np.arctan2(normal[1], normal[0])
    slack = half - margin - width / 2
    mid = far_angle + rng.uniform(-slack, slack)
    sweep = width * rng.choice([-1.0, 1.0])
    speed = rng.uniform(*params.speed)
    pos, vel = arc_trajectory(center, radius, mid - sweep / 2, sweep, params.n_instants, speed)
    return target, pos, vel


def sample_scene(rng: np.random.Generator, params: SceneParams = SceneParams(),
                 accept=None, max_tries: int = 1000, f_c: float = 5.6e9) -> Scene:
    """Draw a random scene by rejection sampling.

    Without ``params.cos_theta`` the transmitter follows a random arc and
    the target a random position. With it, the transmitter arc lies on a
    circle through the receiver and the target so that every instant has
    the requested coupling angle.

    ``accept(scene) -> bool`` adds caller-side feasibility checks (guard
    extents, path separation). Raises ``RuntimeError`` after ``max_tries``
    rejections.
    """
    for _ in range(max_tries):
        if params.cos_theta is None:
            radius = rng.uniform(*params.radius)
            center = rng.uniform(-params.center_spread, params.center_spread, 2)
            start = rng.uniform(0.0, 2 * np.pi)
            sweep = np.deg2rad(params.arc_deg) * rng.choice([-1.0, 1.0])
            speed = rng.uniform(*params.speed)
            pos, vel = arc_trajectory(center, radius, start, sweep, params.n_instants, speed)
            bearing = rng.uniform(0.0, 2 * np.pi)
            target = rng.uniform(*params.target_range) * np.array([np.cos(bearing), np.sin(bearing)])
        else:
            track = _coupled_track(rng, params)
            if track is None:
                continue
            target, pos, vel = track
        d = np.linalg.norm(pos, axis=1)
        if d.min() < params.tx_range[0] or d.max() > params.tx_range[1]:
            continue
        if np.linalg.norm(pos - target, axis=1).min() < params.clearance:
            continue
        if np.linalg.norm(target) < params.clearance:
            continue
        if params.cos_theta is None:
            cos_all = [np.cos(path_coupling_angle(s, target)) for s in pos]
            if max(cos_all) > params.max_cos_theta:
                continue
        try:
            scene = Scene(pos, vel, target, f_c=f_c)
        except ValueError:
            continue
        if accept is None or accept(scene):
            return scene
    raise RuntimeError(f"no acceptable scene after {max_tries} draws")


_MEAS_COLUMNS = ["s_x", "s_y", "r_hat", "r_dot_hat", "d_dot_hat",
                 "sigma_r", "sigma_rdot", "sigma_ddot"]


def write_measurements_csv(path: str | PathLike, meas: Sequence[SensingMeasurement]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(_MEAS_COLUMNS)
        for m in meas:
            w.writerow([repr(float(v)) for v in (m.s[0], m.s[1], m.r_hat, m.r_dot_hat,
                                                   m.d_dot_hat, m.sigma_r, m.sigma_rdot,
                                                   m.sigma_ddot)])


def read_measurements_csv(path: str | PathLike) -> list[SensingMeasurement]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(row for row in fh if not row.startswith("#"))
        missing = set(_MEAS_COLUMNS[:5]) - set(reader.fieldnames or [])
        if missing:
            raise ValueError(f"{path}: missing columns {sorted(missing)}")
        out = []
        for row in reader:
            out.append(SensingMeasurement(
                r_hat=float(row["r_hat"]), r_dot_hat=float(row["r_dot_hat"]),
                d_dot_hat=float(row["d_dot_hat"]),
                s=[float(row["s_x"]), float(row["s_y"])],
                sigma_r=float(row.get("sigma_r") or 0.0),
                sigma_rdot=float(row.get("sigma_rdot") or 0.0),
                sigma_ddot=float(row.get("sigma_ddot") or 0.0)))
    return out


def load_scene(path: str | PathLike) -> tuple[Scene, tuple[float, float, float]]:
    """Read a scene file (YAML) with ``target``, ``tx`` entries and optional ``sigmas``.

    ``tx`` is a list of ``{position: [x, y], velocity: [vx, vy]}``.
    """
    with open(path) as fh:
        doc = yaml.safe_load(fh) or {}
    try:
        tx = doc["tx"]
        scene = Scene(
            tx_positions=[e["position"] for e in tx],
            tx_velocities=[e.get("velocity", [0.0, 0.0]) for e in tx],
            target=doc["target"],
            f_c=float(doc.get("f_c", 5.6e9)),
        )
    except KeyError as exc:
        raise ValueError(f"{path}: missing key {exc}") from None
    sig = doc.get("sigmas", {}) or {}
    sigmas = (float(sig.get("r", 0.0)), float(sig.get("r_dot", 0.0)), float(sig.get("d_dot", 0.0)))
    return scene, sigmas
