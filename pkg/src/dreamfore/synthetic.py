"""Synthetic scenario generator.

Every agent is driven by a scripted controller (speed tracking + pure
pursuit on a reference path) with AR(1) command noise, and integrated with
:func:`dreamfore.kinematics.integrate` at the native step, so the commands
that produced each track are recoverable exactly from speed and heading.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .autodiff import wrap_angle_np
from .kinematics import KinematicCommand, KinematicState, integrate
from .scene import AgentTrack, MapPolyline, Scenario

ARCHETYPES = ("straight", "protected_left", "unprotected_turn", "pedestrian_yield")

LANE_HALF = 1.75
ROAD_HALF = 3.5
TURN_RADIUS = 8.0
CROSSWALK_X = (28.0, 32.0)
YIELD_ZONE = 15.0


def _line(p0, p1, step=0.5) -> np.ndarray:
    p0, p1 = np.asarray(p0, float), np.asarray(p1, float)
    n = max(int(np.ceil(np.linalg.norm(p1 - p0) / step)), 1)
    return p0 + (p1 - p0) * np.linspace(0, 1, n + 1)[:, None]


def _arc(center, radius, a0, a1, step=0.5) -> np.ndarray:
    n = max(int(np.ceil(abs(a1 - a0) * radius / step)), 2)
    a = np.linspace(a0, a1, n + 1)
    return np.asarray(center, float) + radius * np.stack([np.cos(a), np.sin(a)], axis=1)


def _join(*parts) -> np.ndarray:
    out = [parts[0]]
    for p in parts[1:]:
        out.append(p[1:] if np.allclose(p[0], out[-1][-1]) else p)
    return np.concatenate(out)


def _dedupe(points: np.ndarray) -> np.ndarray:
    keep = np.concatenate([[True], np.linalg.norm(np.diff(points, axis=0), axis=1) > 1e-9])
    return points[keep]


@dataclass
class _Agent:
    agent_id: str
    object_class: str
    path: np.ndarray
    cruise: float
    v0: float
    noise_a: float = 0.0
    noise_w: float = 0.0
    accel_cap: Callable | None = None
    start_time: float = 0.0
    max_accel: float = 3.0
    max_decel: float = 6.0
    state: KinematicState | None = None
    states: list = field(default_factory=list)
    n_a: float = 0.0
    n_w: float = 0.0
    idx: int = 0


def _pursuit_turn(ag: _Agent, lookahead: float) -> float:
    s = ag.state
    pos = np.array([s.x, s.y])
    lo = ag.idx
    hi = min(len(ag.path), lo + 80)
    d = np.linalg.norm(ag.path[lo:hi] - pos, axis=1)
    ag.idx = lo + int(np.argmin(d))
    seg = np.linalg.norm(np.diff(ag.path[ag.idx:], axis=0), axis=1)
    acc = np.cumsum(seg)
    j = ag.idx + 1 + int(np.searchsorted(acc, lookahead)) if len(acc) else ag.idx
    j = min(j, len(ag.path) - 1)
    tgt = ag.path[j]
    if j == ag.idx:
        return 0.0
    alpha = wrap_angle_np(np.arctan2(tgt[1] - s.y, tgt[0] - s.x) - s.heading)
    return float(2.0 * max(s.speed, 0.5) * np.sin(alpha) / max(np.linalg.norm(tgt - pos), 1e-6))


def _simulate(agents: list[_Agent], num_steps: int, dt: float, rng: np.random.Generator) -> None:
    for ag in agents:
        d0 = ag.path[1] - ag.path[0]
        ag.state = KinematicState(float(ag.path[0, 0]), float(ag.path[0, 1]),
                                  float(wrap_angle_np(np.arctan2(d0[1], d0[0]))), float(ag.v0))
        ag.states = [ag.state]
    for k in range(num_steps - 1):
        t = k * dt
        world = {ag.agent_id: ag.state for ag in agents}
        cmds = []
        for ag in agents:
            v_des = ag.cruise if t >= ag.start_time else 0.0
            a = 1.5 * (v_des - ag.state.speed)
            moving = ag.state.speed > 0.05 or v_des > 0.05
            if ag.noise_a > 0 and moving:
                ag.n_a = 0.9 * ag.n_a + ag.noise_a * rng.standard_normal()
                a += ag.n_a
            if ag.accel_cap is not None:
                a = min(a, ag.accel_cap(t, ag.state, world, dt))
                moving = ag.state.speed > 0.05 or a > 0.05
            a = float(np.clip(a, -ag.max_decel, ag.max_accel))
            w = _pursuit_turn(ag, max(4.0, 1.0 * ag.state.speed)) if moving else 0.0
            if ag.noise_w > 0 and moving:
                ag.n_w = 0.9 * ag.n_w + ag.noise_w * rng.standard_normal()
                w += ag.n_w
            cmds.append(KinematicCommand(float(np.clip(a, -8.0, 8.0)), float(np.clip(w, -1.2, 1.2))))
        for ag, c in zip(agents, cmds):
            ag.state = integrate(ag.state, c, dt)
            ag.states.append(ag.state)


def _stop_rule(stop_x: float, blocked: Callable[[float, dict], bool], onset: float = 1.5):
    """Acceleration cap that brings an agent moving along +x to rest at ``stop_x``.

    Braking starts once the constant deceleration needed to stop exceeds
    ``onset``; an agent already at the line holds still while blocked.
    """

    def cap(t, s, world, dt):
        if not blocked(t, world) or s.x > stop_x + 0.5:
            return np.inf
        d = stop_x - s.x
        if d <= 0.3:
            return -s.speed / dt
        need = s.speed**2 / (2.0 * d)
        return -need if need > onset else np.inf

    return cap


def _straight_map():
    polylines = [
        MapPolyline("lane_e", "lane", _line((-120, -LANE_HALF), (200, -LANE_HALF), 5.0)),
        MapPolyline("lane_w", "lane", _line((200, LANE_HALF), (-120, LANE_HALF), 5.0)),
        MapPolyline("bnd_s", "boundary", _line((-120, -ROAD_HALF), (200, -ROAD_HALF), 5.0)),
        MapPolyline("bnd_n", "boundary", _line((-120, ROAD_HALF), (200, ROAD_HALF), 5.0)),
    ]
    return polylines


def _intersection_map():
    L = 90.0
    h, r = LANE_HALF, TURN_RADIUS
    lanes = {
        "lane_e": _line((-L, -h), (L, -h), 5.0),
        "lane_w": _line((L, h), (-L, h), 5.0),
        "lane_n": _line((h, -L), (h, L), 5.0),
        "lane_s": _line((-h, L), (-h, -L), 5.0),
        "lane_e_to_n": _arc((h - r, -h + r), r, -np.pi / 2, 0.0, 1.0),
        "lane_w_to_s": _arc((-h + r, h - r), r, np.pi / 2, np.pi, 1.0),
    }
    polylines = [MapPolyline(k, "lane", v) for k, v in lanes.items()]
    e = ROAD_HALF
    for sx in (-1, 1):
        for sy in (-1, 1):
            polylines.append(MapPolyline(f"bnd_x{sx}{sy}", "boundary", _line((sx * e, sy * e), (sx * L, sy * e), 5.0)))
            polylines.append(MapPolyline(f"bnd_y{sx}{sy}", "boundary", _line((sx * e, sy * e), (sx * e, sy * L), 5.0)))
    polylines.append(MapPolyline("cw_w", "crosswalk", np.array([[-e - 4, -e], [-e - 4, e], [-e - 1, e], [-e - 1, -e]])))
    polylines.append(MapPolyline("cw_e", "crosswalk", np.array([[e + 1, -e], [e + 1, e], [e + 4, e], [e + 4, -e]])))
    return polylines


def _left_turn_path(x0: float) -> np.ndarray:
    h, r = LANE_HALF, TURN_RADIUS
    xs = h - r
    return _dedupe(_join(_line((x0, -h), (xs, -h)), _arc((xs, -h + r), r, -np.pi / 2, 0.0), _line((h, -h + r), (h, 120.0))))


def _straight(rng, num_steps, dt):
    v = rng.uniform(8.0, 13.0)
    ego = _Agent("ego", "vehicle", _line((rng.uniform(-20, 0), -LANE_HALF), (400, -LANE_HALF)),
                 cruise=v, v0=v, noise_a=0.05)
    lead_x = ego.path[0, 0] + rng.uniform(18, 30)
    lead_v = v + rng.uniform(-1.5, 1.0)
    lead = _Agent("a1", "vehicle", _line((lead_x, -LANE_HALF), (400, -LANE_HALF)), cruise=lead_v, v0=lead_v, noise_a=0.15, noise_w=0.002)
    onc_v = rng.uniform(8.0, 12.0)
    onc = _Agent("a2", "vehicle", _line((rng.uniform(90, 130), LANE_HALF), (-300, LANE_HALF)), cruise=onc_v, v0=onc_v, noise_a=0.15, noise_w=0.002)
    ped_v = rng.uniform(1.0, 1.6)
    ped = _Agent("a3", "pedestrian", _line((rng.uniform(-10, 30), -ROAD_HALF - 2.0), (200, -ROAD_HALF - 2.0)),
                 cruise=ped_v, v0=ped_v, noise_a=0.05, noise_w=0.01)
    agents = [ego, lead, onc, ped]
    _simulate(agents, num_steps, dt, rng)
    return _straight_map(), agents


def _protected_left(rng, num_steps, dt):
    v = rng.uniform(6.0, 7.5)
    x0 = (LANE_HALF - TURN_RADIUS) - v * rng.uniform(4.0, 5.5)
    ego = _Agent("ego", "vehicle", _left_turn_path(x0), cruise=v, v0=v, noise_a=0.05, noise_w=0.003)
    # cross traffic held at its stop line for the whole clip
    held = _Agent("a1", "vehicle", _line((-LANE_HALF, ROAD_HALF + 6.0), (-LANE_HALF, -100)), cruise=0.0, v0=0.0)
    follow_v = rng.uniform(6.0, 9.0)
    follow =_Agent("a2", "vehicle", _line((LANE_HALF, rng.uniform(-70, -45)), (LANE_HALF, 150)), cruise=follow_v, v0=follow_v, noise_a=0.15, noise_w=0.002)
    agents = [ego, held, follow]
    _simulate(agents, num_steps, dt, rng)
    return _intersection_map(), agents


def _unprotected_turn(rng, num_steps, dt):
    v = rng.uniform(6.0, 8.0)
    xs = LANE_HALF - TURN_RADIUS
    x0 = xs - v * rng.uniform(3.0, 4.5)
    onc_v = rng.uniform(9.0, 12.0)
    onc_x0 = rng.uniform(40.0, 70.0)
    onc = _Agent("a1", "vehicle", _line((onc_x0, LANE_HALF), (-300, LANE_HALF)), cruise=onc_v, v0=onc_v, noise_a=0.15, noise_w=0.002)

    def oncoming_not_clear(t, world):
        return world["a1"].x > xs - 4.0

    ego = _Agent("ego", "vehicle", _left_turn_path(x0), cruise=v, v0=v, noise_a=0.05, noise_w=0.003,
                 accel_cap=_stop_rule(xs - 2.0, oncoming_not_clear))
    cyc_v = rng.uniform(3.5, 5.0)
    cyc = _Agent("a2", "cyclist", _line((LANE_HALF + 1.0, rng.uniform(-50, -30)), (LANE_HALF + 1.0, 100)), cruise=cyc_v, v0=cyc_v, noise_a=0.1, noise_w=0.004)
    agents = [ego, onc, cyc]
    _simulate(agents, num_steps, dt, rng)
    return _intersection_map(), agents


def _pedestrian_yield(rng, num_steps, dt):
    v = rng.uniform(8.5, 11.0)
    x0 = rng.uniform(-25.0, -12.0)
    stop_x = CROSSWALK_X[0] - 4.0
    ped_v = rng.uniform(1.2, 1.6)
    ped_start = rng.uniform(0.0, 1.0)
    ped = _Agent("a1", "pedestrian", _line((np.mean(CROSSWALK_X), -ROAD_HALF - 2.0), (np.mean(CROSSWALK_X), ROAD_HALF + 20.0), 0.25),
                 cruise=ped_v, v0=0.0, start_time=ped_start, noise_a=0.03)

    def ped_on_road(t, world):
        return world["a1"].y < ROAD_HALF + 0.5

    ego = _Agent("ego", "vehicle", _line((x0, -LANE_HALF), (400, -LANE_HALF)), cruise=v, v0=v, noise_a=0.03,
                 accel_cap=_stop_rule(stop_x, ped_on_road))
    onc_v = rng.uniform(7.0, 10.0)
    onc = _Agent("a2", "vehicle", _line((rng.uniform(-60, -40), LANE_HALF), (-300, LANE_HALF)), cruise=onc_v, v0=onc_v, noise_a=0.1, noise_w=0.002)
    agents = [ego, ped, onc]
    _simulate(agents, num_steps, dt, rng)
    polylines = _straight_map()
    cx0, cx1 = CROSSWALK_X
    polylines.append(MapPolyline("cw", "crosswalk", np.array([[cx0, -ROAD_HALF], [cx0, ROAD_HALF], [cx1, ROAD_HALF], [cx1, -ROAD_HALF]])))
    return polylines, agents


def yield_self_check(ego_states: np.ndarray) -> bool:
    """Ego must slow below 0.5 m/s inside the approach zone of the crosswalk."""
    x, v = ego_states[:, 0], ego_states[:, 3]
    zone = (x >= CROSSWALK_X[0] - YIELD_ZONE) & (x <= CROSSWALK_X[1])
    return bool(zone.any() and v[zone].min() < 0.5)


_BUILDERS = {
    "straight": _straight,
    "protected_left": _protected_left,
    "unprotected_turn": _unprotected_turn,
    "pedestrian_yield": _pedestrian_yield,
}


def _rigid(polylines, tracks, theta, offset):
    c, s = np.cos(theta), np.sin(theta)
    rot = np.array([[c, -s], [s, c]])
    for pl in polylines:
        pl.points = pl.points @ rot.T + offset
    for tr in tracks:
        tr.states[:, :2] = tr.states[:, :2] @ rot.T + offset
        tr.states[:, 2] = wrap_angle_np(tr.states[:, 2] + theta)


def generate_synthetic(seed: int, count: int, mix=None, observation_len: int = 40,
                       horizon_len: int = 60, sample_rate: float = 10.0,
                       extra_steps: int = 0, randomize_frame: bool = True) -> list[Scenario]:
    """Deterministic corpus of ``count`` scenarios.

    ``mix`` is a sequence of archetype names cycled in order, or a mapping of
    name to weight sampled from the seeded stream.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    if mix is None:
        mix = ARCHETYPES
    if isinstance(mix, dict):
        names, w = zip(*mix.items())
        bad = set(names) - set(ARCHETYPES)
        if bad or min(w) < 0 or sum(w) <= 0:
            raise ValueError(f"bad archetype mix {mix!r}")
    elif set(mix) - set(ARCHETYPES) or not mix:
        raise ValueError(f"bad archetype mix {mix!r}")
    root = np.random.default_rng(seed)
    streams = root.spawn(count)
    dt = 1.0 / sample_rate
    num_steps = observation_len + horizon_len + extra_steps
    out = []
    for i, rng in enumerate(streams):
        if isinstance(mix, dict):
            p = np.asarray(w, float) / sum(w)
            kind = names[int(rng.choice(len(names), p=p))]
        else:
            kind = list(mix)[i % len(mix)]
        for _ in range(20):
            polylines, agents = _BUILDERS[kind](rng, num_steps, dt)
            if kind != "pedestrian_yield" or yield_self_check(np.array([[s.x, s.y, s.heading, s.speed] for s in agents[0].states])):
                break
        else:
            raise RuntimeError(f"archetype {kind} failed its self-check 20 times")
        tracks = [
            AgentTrack(ag.agent_id, ag.object_class,
                       np.array([[s.x, s.y, s.heading, s.speed] for s in ag.states]),
                       np.ones(num_steps, dtype=bool))
            for ag in agents
        ]
        if randomize_frame:
            _rigid(polylines, tracks, rng.uniform(-np.pi, np.pi), rng.uniform(-500, 500, size=2))
        sc = Scenario(f"syn-{seed}-{i:04d}-{kind}", sample_rate, polylines, tracks, "ego",
                      observation_len, horizon_len)
        sc.validate()
        out.append(sc)
    return out
