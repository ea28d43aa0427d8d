"""Scenario domain types, ego-frame vectorization and the polyline encoder."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Params, Tensor
from .config import ModelConfig

MAP_KINDS = ("lane", "boundary", "crosswalk")
OBJECT_CLASSES = ("vehicle", "pedestrian", "cyclist", "other")
ATTRIBUTES = MAP_KINDS + OBJECT_CLASSES
# start xy, end xy, attribute one-hot, relative time
FEATURE_DIM = 4 + len(ATTRIBUTES) + 1


class ScenarioError(ValueError):
    pass


class DegenerateScenarioError(ScenarioError):
    pass


@dataclass
class MapPolyline:
    id: str
    kind: str
    points: np.ndarray

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)

    def validate(self) -> None:
        if self.kind not in MAP_KINDS:
            raise ScenarioError(f"polyline {self.id}: unknown kind {self.kind!r}")
        if len(self.points) < 2:
            raise ScenarioError(f"polyline {self.id}: needs at least 2 points, got {len(self.points)}")
        if not np.isfinite(self.points).all():
            raise ScenarioError(f"polyline {self.id}: non-finite coordinates")
        seg = np.linalg.norm(np.diff(self.points, axis=0), axis=1)
        if np.any(seg == 0):
            raise ScenarioError(f"polyline {self.id}: consecutive duplicate points")


@dataclass
class AgentTrack:
    """Per-step ``[x, y, heading, speed]`` with a validity mask."""

    agent_id: str
    object_class: str
    states: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=np.float64).reshape(-1, 4)
        self.valid = np.asarray(self.valid, dtype=bool).reshape(-1)

    def validate(self) -> None:
        if self.object_class not in OBJECT_CLASSES:
            raise ScenarioError(f"track {self.agent_id}: unknown class {self.object_class!r}")
        if len(self.valid) != len(self.states):
            raise ScenarioError(f"track {self.agent_id}: valid mask length mismatch")
        s = self.states[self.valid]
        if not np.isfinite(s).all():
            raise ScenarioError(f"track {self.agent_id}: non-finite state")
        if np.any(s[:, 3] < 0):
            raise ScenarioError(f"track {self.agent_id}: negative speed")
        if np.any(s[:, 2] <= -np.pi) or np.any(s[:, 2] > np.pi):
            raise ScenarioError(f"track {self.agent_id}: heading outside (-pi, pi]")


@dataclass
class Scenario:
    id: str
    sample_rate: float
    polylines: list[MapPolyline]
    tracks: list[AgentTrack]
    ego_id: str
    observation_len: int = 40
    horizon_len: int = 60

    @property
    def dt(self) -> float:
        return 1.0 / self.sample_rate

    @property
    def num_steps(self) -> int:
        return len(self.tracks[0].states) if self.tracks else 0

    @property
    def t_obs(self) -> int:
        """Index of the last observed step."""
        return self.observation_len - 1

    def track(self, agent_id: str) -> AgentTrack:
        for tr in self.tracks:
            if tr.agent_id == agent_id:
                return tr
        raise KeyError(agent_id)

    @property
    def ego_track(self) -> AgentTrack:
        return self.track(self.ego_id)

    def validate(self) -> None:
        if self.sample_rate <= 0:
            raise ScenarioError(f"scenario {self.id}: sample_rate must be positive")
        for pl in self.polylines:
            pl.validate()
        ids = [tr.agent_id for tr in self.tracks]
        if len(set(ids)) != len(ids):
            raise ScenarioError(f"scenario {self.id}: duplicate agent ids")
        if ids.count(self.ego_id) != 1:
            raise ScenarioError(f"scenario {self.id}: exactly one track must match ego_id {self.ego_id!r}")
        n = self.num_steps
        for tr in self.tracks:
            if len(tr.states) != n:
                raise ScenarioError(f"scenario {self.id}: track {tr.agent_id} length differs")
            tr.validate()
        if self.observation_len < 2 or self.horizon_len < 1:
            raise ScenarioError(f"scenario {self.id}: bad window lengths")
        span = self.observation_len + self.horizon_len
        if span > n:
            raise ScenarioError(f"scenario {self.id}: observation+horizon {span} exceeds {n} steps")
        if not self.ego_track.valid[:span].all():
            raise ScenarioError(f"scenario {self.id}: ego invalid inside the evaluation window")


@dataclass
class VectorSet:
    """Ego-frame vectors for one time step.

    ``features`` rows are ``[xs, ys, xe, ye, one-hot attribute, t_rel]`` in
    meters; ``polyline_index`` maps each row to its polyline. Agent slots
    follow ``agent_ids`` (slot 0 is the ego).
    """

    features: np.ndarray
    polyline_index: np.ndarray
    num_polylines: int
    agent_ids: list[str]
    agent_polyline: np.ndarray
    agent_valid: np.ndarray
    agent_states: np.ndarray
    agent_classes: list[str]
    frame: np.ndarray
    t: int
    lanes: list[np.ndarray] = field(default_factory=list)


def world_to_frame(points: np.ndarray, frame) -> np.ndarray:
    x0, y0, psi = frame
    c, s = np.cos(psi), np.sin(psi)
    d = np.asarray(points, dtype=np.float64)[..., :2] - np.array([x0, y0])
    return np.stack([c * d[..., 0] + s * d[..., 1], -s * d[..., 0] + c * d[..., 1]], axis=-1)


def states_to_frame(states: np.ndarray, frame) -> np.ndarray:
    """Transform ``[x, y, heading, speed]`` rows into the given frame."""
    out = np.array(states, dtype=np.float64, copy=True)
    out[..., :2] = world_to_frame(out[..., :2], frame)
    out[..., 2] = ad.wrap_angle_np(out[..., 2] - frame[2])
    return out


def resample_polyline(points: np.ndarray, spacing: float) -> np.ndarray:
    """Resample at uniform arc length, keeping both endpoints."""
    seg = np.linalg.norm(np.diff(points, axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    total = s[-1]
    n = max(int(np.floor(total / spacing)), 1)
    q = np.arange(n + 1) * spacing
    q = q[q < total - 1e-9]
    q = np.append(q, total)
    return np.stack([np.interp(q, s, points[:, 0]), np.interp(q, s, points[:, 1])], axis=1)


def _contiguous_runs(keep: np.ndarray) -> list[tuple[int, int]]:
    runs, start = [], None
    for i, k in enumerate(keep):
        if k and start is None:
            start = i
        elif not k and start is not None:
            runs.append((start, i))
            start = None
    if start is not None:
        runs.append((start, len(keep)))
    return [(a, b) for a, b in runs if b - a >= 2]


def agent_slot_order(scenario: Scenario, t: int) -> list[str]:
    """Ego first, then every other agent valid at ``t`` sorted by id."""
    others = sorted(tr.agent_id for tr in scenario.tracks if tr.agent_id != scenario.ego_id and tr.valid[t])
    return [scenario.ego_id] + others


def vectorize(
    scenario: Scenario,
    t: int,
    cfg: ModelConfig | None = None,
    frame_step: int | None = None,
    agent_order: list[str] | None = None,
) -> VectorSet:
    """Build ego-frame vectors at step ``t``.

    Coordinates are expressed in the ego pose at ``frame_step`` (default
    ``t``); agent histories cover the trailing observation window and map
    polylines are resampled and cropped around the ego position at ``t``.
    """
    cfg = cfg or ModelConfig()
    if t < scenario.observation_len - 1 or t >= scenario.num_steps:
        raise ScenarioError(f"vectorize: step {t} outside [{scenario.observation_len - 1}, {scenario.num_steps})")
    ego = scenario.ego_track
    fs = t if frame_step is None else frame_step
    if not ego.valid[t] or not ego.valid[fs]:
        raise ScenarioError(f"scenario {scenario.id}: ego track invalid at step {t}")
    frame = ego.states[fs, :3].copy()
    ego_pos_t = world_to_frame(ego.states[t, :2], frame)

    feats, pidx, lanes = [], [], []
    n_poly = 0
    for pl in scenario.polylines:
        pts = world_to_frame(resample_polyline(pl.points, cfg.resample_spacing), frame)
        keep = np.linalg.norm(pts - ego_pos_t, axis=1) <= cfg.crop_radius
        onehot = np.zeros(len(ATTRIBUTES))
        onehot[ATTRIBUTES.index(pl.kind)] = 1.0
        for a, b in _contiguous_runs(keep):
            run = pts[a:b]
            nv = len(run) - 1
            block = np.zeros((nv, FEATURE_DIM))
            block[:, 0:2] = run[:-1]
            block[:, 2:4] = run[1:]
            block[:, 4:4 + len(ATTRIBUTES)] = onehot
            feats.append(block)
            pidx.append(np.full(nv, n_poly))
            if pl.kind == "lane":
                lanes.append(run)
            n_poly += 1
    if n_poly == 0:
        raise DegenerateScenarioError(f"scenario {scenario.id}: empty map after cropping at step {t}")

    order = agent_order if agent_order is not None else agent_slot_order(scenario, t)
    lo = max(0, t - scenario.observation_len + 1)
    agent_poly = np.full(len(order), -1, dtype=np.int64)
    agent_valid = np.zeros(len(order), dtype=bool)
    agent_states = np.zeros((len(order), 4))
    classes = []
    for slot, aid in enumerate(order):
        tr = scenario.track(aid)
        classes.append(tr.object_class)
        if not tr.valid[t]:
            continue
        steps = np.arange(lo, t + 1)[tr.valid[lo:t + 1]]
        local = states_to_frame(tr.states[steps], frame)
        pts = local[:, :2]
        if len(pts) >= 2:
            block = np.zeros((len(pts) - 1, FEATURE_DIM))
            block[:, 0:2] = pts[:-1]
            block[:, 2:4] = pts[1:]
            block[:, -1] = (steps[1:] - t) / scenario.observation_len
        else:
            block = np.zeros((1, FEATURE_DIM))
            block[:, 0:2] = pts[0]
            block[:, 2:4] = pts[0]
        block[:, 4 + ATTRIBUTES.index(tr.object_class)] = 1.0
        feats.append(block)
        pidx.append(np.full(len(block), n_poly))
        agent_poly[slot] = n_poly
        agent_valid[slot] = True
        agent_states[slot] = local[-1]
        n_poly += 1
    return VectorSet(
        features=np.concatenate(feats, axis=0),
        polyline_index=np.concatenate(pidx),
        num_polylines=n_poly,
        agent_ids=list(order),
        agent_polyline=agent_poly,
        agent_valid=agent_valid,
        agent_states=agent_states,
        agent_classes=classes,
        frame=frame,
        t=t,
        lanes=lanes,
    )


@dataclass
class LatentScene:
    """Per-agent embeddings ``(..., n_max, d)``; masked rows are exactly zero."""

    embeddings: Tensor
    mask: np.ndarray
    agent_ids: list

    @property
    def batched(self) -> bool:
        return self.embeddings.ndim == 3

    def flat(self) -> Tensor:
        e = self.embeddings
        if e.ndim == 3:
            return e.reshape(e.shape[0], e.shape[1] * e.shape[2])
        return e.reshape(1, e.shape[0] * e.shape[1])


def stack_latents(latents: list[LatentScene]) -> LatentScene:
    return LatentScene(
        embeddings=ad.stack([z.embeddings for z in latents], axis=0),
        mask=np.stack([z.mask for z in latents]),
        agent_ids=[z.agent_ids for z in latents],
    )


def init_encoder(params: Params, cfg: ModelConfig, rng: np.random.Generator) -> None:
    hs, d = cfg.subgraph_hidden, cfg.d_model
    ad.add_linear(params, "enc.sub0", FEATURE_DIM, hs, rng)
    ad.add_linear(params, "enc.sub1", 2 * hs, hs, rng)
    ad.add_linear(params, "enc.proj", hs, d, rng)
    for name in ("q", "k", "v"):
        ad.add_linear(params, f"enc.{name}", d, d, rng)


def _check_vectors(x: VectorSet, cfg: ModelConfig) -> None:
    if len(x.agent_ids) > cfg.n_max:
        raise ScenarioError(f"{len(x.agent_ids)} agents exceed n_max={cfg.n_max}")
    if len(x.features) == 0:
        raise ScenarioError("encode: empty vector set")
    if x.features.shape[1] != FEATURE_DIM:
        raise ad.ShapeError(f"encode: feature width {x.features.shape[1]} != {FEATURE_DIM}")


def encode(x: VectorSet, params: Params, cfg: ModelConfig) -> LatentScene:
    """Subgraph rounds per polyline, then one attention round over polylines."""
    z = encode_many([x], params, cfg)
    return LatentScene(embeddings=z.embeddings[0], mask=z.mask[0], agent_ids=z.agent_ids[0])


def encode_many(xs: list[VectorSet], params: Params, cfg: ModelConfig) -> LatentScene:
    """Encode several scenes in one pass; returns a batched latent ``(S, n_max, d)``.

    Polylines of every scene share one padded subgraph pass; attention runs
    per scene with padded polylines masked out of the keys.
    """
    if not xs:
        raise ScenarioError("encode_many: no vector sets")
    for x in xs:
        _check_vectors(x, cfg)
    hs, d, n = cfg.subgraph_hidden, cfg.d_model, cfg.n_max
    S = len(xs)
    P_each = np.array([x.num_polylines for x in xs])
    offs = np.concatenate([[0], np.cumsum(P_each)[:-1]])
    P = int(P_each.sum())
    pidx = np.concatenate([x.polyline_index + o for x, o in zip(xs, offs)])
    feats = np.concatenate([x.features for x in xs], axis=0).copy()
    counts = np.bincount(pidx, minlength=P)
    L = int(counts.max())
    order = np.argsort(pidx, kind="stable")
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    pos = np.arange(len(order)) - np.repeat(starts, counts)
    rows = pidx[order] * L + pos

    feats[:, :4] /= cfg.coord_scale
    padded = np.zeros((P * L, FEATURE_DIM))
    padded[rows] = feats[order]
    node_mask = np.zeros(P * L)
    node_mask[rows] = 1.0
    m1 = Tensor(np.repeat(node_mask[:, None], hs, axis=1))
    m2 = Tensor(np.repeat(node_mask[:, None], 2 * hs, axis=1).reshape(P, L, 2 * hs))

    # padded nodes are zeroed after relu so they never win the max-pool
    h = ad.relu(ad.apply_linear(params, "enc.sub0", Tensor(padded))) * m1
    pooled = ad.max_(h.reshape(P, L, hs), axis=1)
    cat = ad.concat([h.reshape(P, L, hs), ad.expand(pooled, L, axis=1)], axis=-1) * m2
    h = ad.relu(ad.apply_linear(params, "enc.sub1", cat.reshape(P * L, 2 * hs))) * m1
    # second-round concat would duplicate the pooled half; pool directly
    poly = ad.apply_linear(params, "enc.proj", ad.max_(h.reshape(P, L, hs), axis=1))

    # scatter polylines into (S, Pmax); row P is an all-zero pad
    Pm = int(P_each.max())
    slot = np.full((S, Pm), P, dtype=np.int64)
    for i, (o, c) in enumerate(zip(offs, P_each)):
        slot[i, :c] = np.arange(o, o + c)
    poly = ad.gather_rows(ad.concat([poly, Tensor(np.zeros((1, d)))], axis=0), slot.reshape(-1))
    q = ad.apply_linear(params, "enc.q", poly).reshape(S, Pm, d)
    k = ad.apply_linear(params, "enc.k", poly).reshape(S, Pm, d)
    v = ad.apply_linear(params, "enc.v", poly).reshape(S, Pm, d)
    logits = ad.bmm(q, k, transpose_b=True) * (1.0 / np.sqrt(d))
    key_ok = np.broadcast_to((slot < P)[:, None, :], (S, Pm, Pm))
    logits = ad.where(key_ok, logits, Tensor(np.full((S, Pm, Pm), -1e9)))
    poly = poly + ad.bmm(ad.softmax(logits, axis=-1), v).reshape(S * Pm, d)

    idx = np.zeros((S, n), dtype=np.int64)
    mask = np.zeros((S, n), dtype=bool)
    for i, x in enumerate(xs):
        na = len(x.agent_ids)
        idx[i, :na] = np.where(x.agent_valid, x.agent_polyline, 0) + i * Pm
        mask[i, :na] = x.agent_valid
    agents = ad.gather_rows(poly, idx.reshape(-1)).reshape(S, n, d)
    emb = agents * Tensor(np.repeat(mask[:, :, None].astype(float), d, axis=2))
    return LatentScene(embeddings=emb, mask=mask, agent_ids=[list(x.agent_ids) for x in xs])
