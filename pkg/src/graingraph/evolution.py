"""Graph-to-graph layer update, trajectory rollout and the weight-free baseline predictor."""

from __future__ import annotations

import heapq
import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ConfigError, ContractError, DegenerateCollapseError, GrainGraphError, TopologyError
from .graph import FeatureSet, GrainGraph, min_image, normalize_features, validate, wrap
from .topology import apply_edge_flip, flip_plan, remove_grain

log = logging.getLogger(__name__)


@dataclass
class Prediction:
    junction_ids: np.ndarray
    dpos: np.ndarray  # (n_j, 2) feature units
    grain_ids: np.ndarray
    ds: np.ndarray  # feature units
    v: np.ndarray  # feature units
    edges: np.ndarray  # (E, 2) junction ids
    p: np.ndarray  # (E,)


Predictor = Callable[[GrainGraph, FeatureSet], Prediction]


@dataclass(frozen=True)
class Thresholds:
    eps_edge: float = 0.6
    eps_grain: float = 1e-4

    def __post_init__(self):
        if not 0 < self.eps_edge < 1:
            raise ConfigError(f"edge threshold {self.eps_edge} outside (0, 1)")
        if not self.eps_grain > 0:
            raise ConfigError(f"grain threshold {self.eps_grain} must be positive")


@dataclass
class EventLog:
    step: int = 0
    records: list = field(default_factory=list)

    def add(self, kind: str, ids, **keys):
        rec = {"step": self.step, "kind": kind, "ids": [int(i) for i in ids]}
        rec.update(keys)
        self.records.append(rec)

    def count(self, kind: str) -> int:
        return sum(1 for r in self.records if r["kind"] == kind)

    def eliminated(self) -> list:
        return [r["ids"][0] for r in self.records if r["kind"] in ("remove", "sweep")]


# -- predictors -------------------------------------------------------------


def identity_predict(graph: GrainGraph, fs: FeatureSet) -> Prediction:
    nj, ng, ne = len(fs.junction_ids), len(fs.grain_ids), len(fs.jj_edges)
    return Prediction(fs.junction_ids, np.zeros((nj, 2)), fs.grain_ids, np.zeros(ng), np.zeros(ng), fs.jj_edges, np.zeros(ne))


@dataclass
class BaselinePredictor:
    """Geometric stand-in for the trained networks.

    Junctions relax towards the mean of their neighbours, grains with few
    sides or large misorientation shrink, and short edges are the likeliest
    to switch. ``dz`` (um) sets the excess-volume estimate; when None the
    layer spacing recorded in the features is used.
    """

    kappa: float = 0.3
    c1: float = 0.005
    c2: float = 0.02
    c3: float = 4.0
    dz: float | None = None

    def __call__(self, graph: GrainGraph, fs: FeatureSet) -> Prediction:
        return baseline_predict(graph, fs, self.kappa, self.c1, self.c2, self.c3, self.dz)


def baseline_predict(graph, fs, kappa=0.3, c1=0.005, c2=0.02, c3=4.0, dz=None) -> Prediction:
    nj = len(fs.junction_ids)
    row = {int(j): i for i, j in enumerate(fs.junction_ids)}
    xy = fs.junction[:, :2]
    period = fs.domain.period
    acc = np.zeros((nj, 2))
    deg = np.zeros(nj)
    if len(fs.jj_edges):
        a = np.array([row[int(x)] for x in fs.jj_edges[:, 0]])
        b = np.array([row[int(x)] for x in fs.jj_edges[:, 1]])
        d = min_image(xy[b] - xy[a], period)
        np.add.at(acc, a, d)
        np.add.at(acc, b, -d)
        np.add.at(deg, a, 1)
        np.add.at(deg, b, 1)
    dpos = np.clip(kappa * acc / np.maximum(deg, 1)[:, None], -1, 1)

    s = fs.grain[:, 3]
    sides = np.array([graph.sides(int(g)) for g in fs.grain_ids], dtype=float)
    cz = fs.grain[:, 7]
    ds = np.clip(c1 * (sides - 6) * s + c2 * (cz - cz.mean() if len(cz) else cz) * s, -1, 1)
    dz_norm = dz / fs.domain.l0z if dz is not None else (fs.grain[:, 10] if len(s) else 0.0)
    v = np.maximum(s * dz_norm / 2, 0.0)

    ln = fs.jj_length
    if len(ln):
        mean = ln.mean()
        p = 1.0 / (1.0 + np.exp(-c3 * (mean - ln) / mean)) if mean > 0 else np.full(len(ln), 0.5)
    else:
        p = np.zeros(0)
    return Prediction(fs.junction_ids, dpos, fs.grain_ids, ds, v, fs.jj_edges, p)


def check_prediction(pred: Prediction, fs: FeatureSet) -> None:
    def bad(msg):
        raise ContractError(f"predictor output: {msg}")

    if pred.dpos.shape != (len(fs.junction_ids), 2) or len(pred.ds) != len(fs.grain_ids) or len(pred.v) != len(fs.grain_ids):
        bad("shape mismatch with features")
    if len(pred.p) != len(fs.jj_edges):
        bad("one probability per e_jj edge required")
    for name, arr in (("dpos", pred.dpos), ("ds", pred.ds), ("v", pred.v), ("p", pred.p)):
        if not np.all(np.isfinite(arr)):
            bad(f"{name} has non-finite entries")
    if np.any(np.abs(pred.dpos) > 1) or np.any(np.abs(pred.ds) > 1):
        bad("displacements and area changes must lie in [-1, 1]")
    if np.any(pred.v < 0):
        bad("excess volume must be non-negative")
    if np.any(pred.p < 0) or np.any(pred.p > 1):
        bad("probabilities must lie in [0, 1]")


# -- the update -----------------------------------------------------------------


class _Update:
    def __init__(self, g: GrainGraph, ds: dict, elog: EventLog):
        self.g = g
        self.ds = ds
        self.log = elog
        self.active: set = set()

    def _guard_size(self, gid):
        if self.g.n_grains - 1 < 3:
            raise DegenerateCollapseError(f"removing grain {gid} would leave fewer than 3 grains", self.log)

    def remove(self, gid, kind="remove", **keys):
        self._guard_size(gid)
        rec = remove_grain(self.g, gid)
        self.log.add(kind, [gid], junctions=list(rec.junctions), bridge=list(rec.bridge), **keys)

    def eliminate(self, gid, area, depth=0):
        """Flip ``gid`` down to two sides, neighbours by ascending ds, then remove it."""
        g = self.g
        if gid not in g.grains or gid in self.active:
            return
        self.active.add(gid)
        try:
            key = lambda h: (self.ds.get(h, 0.0), h)  # noqa: E731
            order = sorted(g.grain_neighbors(gid), key=key)
            plan = order[:-2] if len(order) > 2 else []
            self._cascade(gid, plan, depth)
            if g.sides(gid) > 2:
                # earlier events changed the ring; keep going by the same key
                self._cascade(gid, sorted(g.grain_neighbors(gid), key=key), depth, until_two=True)
            if gid in g.grains and g.sides(gid) == 2:
                self.remove(gid, area=area)
            elif gid in g.grains:
                self.log.add("stuck", [gid], sides=g.sides(gid))
        finally:
            self.active.discard(gid)

    def _cascade(self, gid, plan, depth, until_two=False):
        g = self.g
        for h in plan:
            if gid not in g.grains or g.sides(gid) <= 2:
                return
            if h not in g.grains:
                continue
            edge = g.boundary_edge(gid, h)
            if edge is None:
                continue
            if g.sides(h) == 3 and depth < 8:
                # the neighbour would go two-sided: eliminate it first
                self.log.add("reinsert", [h], parent=gid)
                self.eliminate(h, g.grains[h].area, depth + 1)
                continue
            try:
                f = apply_edge_flip(g, *edge, collapse=gid)
            except TopologyError as exc:
                self.log.add("skip", list(edge), reason=str(exc), grain=gid)
                continue
            self.log.add("flip", list(edge), grain=gid, neighbor=h, ds=self.ds.get(h, 0.0), new=list(f.new))
            if until_two and g.sides(gid) <= 2:
                return

    def edge_flip(self, a, b, p):
        g = self.g
        if a not in g.junctions or b not in g.adj.get(a, ()):
            self.log.add("stale", [a, b], p=p)
            return
        _, (g3, g4) = flip_plan(g, a, b)
        collapse = None
        if g.sides(g3) == 3 and g.sides(g4) == 3:
            self.log.add("skip", [a, b], p=p, reason="both losing grains three-sided")
            return
        if g.sides(g3) == 3:
            collapse = g3
        elif g.sides(g4) == 3:
            collapse = g4
        if collapse is not None and g.n_grains - 1 < 3:
            raise DegenerateCollapseError("edge event would leave fewer than 3 grains", self.log)
        try:
            f = apply_edge_flip(g, a, b, collapse=collapse)
        except TopologyError as exc:
            self.log.add("skip", [a, b], p=p, reason=str(exc))
            return
        self.log.add("flip", [a, b], p=p, new=list(f.new))
        if collapse is not None:
            self.remove(collapse, kind="sweep")


def update_graph(
    graph: GrainGraph,
    fs: FeatureSet,
    predictor: Predictor,
    thresholds: Thresholds = Thresholds(),
    dz: float = 0.0,
    step: int = 0,
    check: bool = True,
) -> tuple[GrainGraph, FeatureSet, EventLog]:
    """Advance one layer: move features, then apply grain and edge events."""
    if graph.n_grains < 3:
        raise DegenerateCollapseError(f"graph has {graph.n_grains} grains; need at least 3", EventLog(step))
    pred = predictor(graph, fs)
    check_prediction(pred, fs)
    elog = EventLog(step)

    g = graph.copy()
    g.z = graph.z + dz
    g.dz = dz
    period = fs.domain.period
    dfrac = pred.dpos / period
    for jid, d in zip(pred.junction_ids.tolist(), dfrac):
        j = g.junctions[jid]
        p = wrap(np.asarray(j.pos) + d)
        j.pos = (float(p[0]), float(p[1]))
        j.delta = (float(d[0]), float(d[1]))
    ds = {}
    for gid, d, v in zip(pred.grain_ids.tolist(), pred.ds.tolist(), pred.v.tolist()):
        gr = g.grains[gid]
        gr.area += d
        gr.delta_area = d
        gr.excess_volume = v
        ds[gid] = d

    edges = [tuple(e) for e in pred.edges.tolist()]
    s_e = [(p, e) for p, e in zip(pred.p.tolist(), edges) if p > thresholds.eps_edge]
    s_g = sorted((gr.area, gid) for gid, gr in g.grains.items() if gr.area < thresholds.eps_grain)

    up = _Update(g, ds, elog)
    heap = list(s_g)
    heapq.heapify(heap)
    while heap:
        area, gid = heapq.heappop(heap)
        if gid in g.grains:
            up.eliminate(gid, area)

    s_e.sort(key=lambda pe: (-pe[0], pe[1]))
    for p, (a, b) in s_e:
        up.edge_flip(a, b, p)

    for gid in sorted(k for k in g.grains if g.sides(k) == 2):
        up.remove(gid, kind="sweep")

    for gr in g.grains.values():
        if gr.area < 0:
            gr.area = 0.0
    if check:
        bad = validate(g)
        if bad:
            raise TopologyError(f"update left an invalid graph: {bad[0].message}")
    return g, normalize_features(g), elog


@dataclass
class Trajectory:
    graphs: list
    features: list
    dz: float
    logs: list
    error: GrainGraphError | None = None

    @property
    def heights(self) -> list:
        return [g.z for g in self.graphs]

    def eliminated_counts(self) -> list:
        """Cumulative eliminated-grain count per layer."""
        out, total = [0], 0
        for elog in self.logs:
            total += len(elog.eliminated())
            out.append(total)
        return out[: len(self.graphs)]


def rollout(
    g0: GrainGraph,
    f0: FeatureSet | None,
    predictor: Predictor,
    n_l: int,
    thresholds: Thresholds = Thresholds(),
    dz: float = 1.0,
    check: bool = True,
    on_layer=None,
) -> Trajectory:
    """Produce ``n_l`` layers starting from ``g0``; stops early on an error."""
    if n_l < 2:
        raise ConfigError(f"need at least 2 layers, got {n_l}")
    if not dz > 0:
        raise ConfigError(f"layer spacing must be positive, got {dz}")
    f0 = f0 or normalize_features(g0)
    traj = Trajectory([g0], [f0], dz, [])
    if on_layer:
        on_layer(0, g0, None)
    g, f = g0, f0
    for step in range(1, n_l):
        try:
            g, f, elog = update_graph(g, f, predictor, thresholds, dz=dz, step=step, check=check)
        except GrainGraphError as exc:
            log.warning("rollout stopped at step %d: %s", step, exc)
            traj.error = exc
            break
        traj.graphs.append(g)
        traj.features.append(f)
        traj.logs.append(elog)
        if on_layer:
            on_layer(step, g, elog)
    return traj
