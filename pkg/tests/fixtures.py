"""Small hand-built scenarios."""

import numpy as np

from dreamfore.scene import AgentTrack, MapPolyline, Scenario


def straight_track(agent_id, x0, y0, heading, speed, steps=100, dt=0.1, cls="vehicle"):
    t = np.arange(steps) * dt
    xs = x0 + speed * np.cos(heading) * t
    ys = y0 + speed * np.sin(heading) * t
    states = np.column_stack([xs, ys, np.full(steps, heading), np.full(steps, speed)])
    return AgentTrack(agent_id, cls, states, np.ones(steps, dtype=bool))


def simple_scenario(n_agents=3, steps=100, obs=40, hor=60, sid="fixture"):
    lanes = [MapPolyline("lane0", "lane", [[-50, 0], [150, 0]]),
             MapPolyline("lane1", "lane", [[150, 4], [-50, 4]]),
             MapPolyline("b0", "boundary", [[-50, -2], [150, -2]]),
             MapPolyline("cw", "crosswalk", [[60, -3], [60, 7]])]
    tracks = [straight_track("ego", 0.0, 0.0, 0.0, 5.0, steps)]
    for i in range(1, n_agents):
        tracks.append(straight_track(f"a{i}", 10.0 * i, 4.0, np.pi, 3.0 + i, steps))
    sc = Scenario(sid, 10.0, lanes, tracks, "ego", obs, hor)
    sc.validate()
    return sc


def transform_scenario(sc, theta, shift):
    c, s = np.cos(theta), np.sin(theta)
    r = np.array([[c, -s], [s, c]])

    def pts(p):
        return p @ r.T + shift

    polylines = [MapPolyline(p.id, p.kind, pts(p.points)) for p in sc.polylines]
    tracks = []
    for tr in sc.tracks:
        st = tr.states.copy()
        st[:, :2] = pts(st[:, :2])
        h = st[:, 2] + theta
        st[:, 2] = np.arctan2(np.sin(h), np.cos(h))
        tracks.append(AgentTrack(tr.agent_id, tr.object_class, st, tr.valid.copy()))
    return Scenario(sc.id, sc.sample_rate, polylines, tracks, sc.ego_id, sc.observation_len, sc.horizon_len)
