"""Heterogeneous grain/junction graph on a periodic rectangle.

Units used throughout the package:

* junction positions and displacements are fractions of the current domain,
  wrapped to ``[0, 1)``;
* grain areas, area changes and excess volumes are stored in feature units,
  i.e. divided by the training-domain constants ``l0x*l0y`` and
  ``l0x*l0y*l0z``;
* the layer height ``z`` and spacing ``dz`` are physical (micrometres).
"""

from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path
from typing import Iterable, NamedTuple

import numpy as np

from .errors import ConfigError, DataFormatError, InputError

FORMAT_VERSION = 1


@dataclass(frozen=True)
class DomainSpec:
    """Physical domain and process parameters.

    ``l0x, l0y, l0z`` are the training-domain lengths used to normalise
    features; a domain wider than the training one yields feature
    coordinates larger than one.
    """

    lx: float = 40.0
    ly: float = 40.0
    lz: float = 50.0
    g_z: float = 1.0
    r_z: float = 1.0
    g_max: float = 10.0
    r_max: float = 2.0
    l0x: float = 40.0
    l0y: float = 40.0
    l0z: float = 50.0

    def __post_init__(self):
        for name in ("lx", "ly", "lz", "g_max", "r_max", "l0x", "l0y", "l0z"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"domain constant {name} must be positive, got {getattr(self, name)}")
        if not 0 < self.g_z <= self.g_max:
            raise ConfigError(f"g_z={self.g_z} outside (0, g_max={self.g_max}]")
        if not 0 < self.r_z <= self.r_max:
            raise ConfigError(f"r_z={self.r_z} outside (0, r_max={self.r_max}]")

    @property
    def period(self) -> np.ndarray:
        """Domain period in feature units (1 on the training domain)."""
        return np.array([self.lx / self.l0x, self.ly / self.l0y])

    @property
    def area_scale(self) -> float:
        """Feature-unit area of the whole domain."""
        return self.lx * self.ly / (self.l0x * self.l0y)

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def wrap(p):
    """Wrap fractional coordinates into [0, 1)."""
    p = np.asarray(p, dtype=float) % 1.0
    # x % 1.0 can return exactly 1.0 for tiny negative x
    return np.where(p >= 1.0, 0.0, p)


def min_image(d, period=1.0):
    """Minimum-image displacement for a box of the given period."""
    d = np.asarray(d, dtype=float)
    period = np.asarray(period, dtype=float)
    return d - period * np.rint(d / period)


def periodic_relative(xk, xi, period=1):
    """``xk - xi - period*nint((xk - xi)/period)`` for scalars.

    Works with ``fractions.Fraction`` inputs, which makes the result exact.
    """
    d = xk - xi
    return d - period * round(d / period)


def orientation_angles(d) -> tuple[float, float]:
    """Return ``(theta_x, theta_z)`` in radians for a growth direction.

    The direction is sign-agnostic: it is flipped into the upper half
    space first, so ``theta_z`` lies in ``[0, pi/2]``.
    """
    d = np.asarray(d, dtype=float)
    if d[2] < 0:
        d = -d
    theta_z = math.acos(min(1.0, max(-1.0, d[2])))
    theta_x = math.atan2(d[1], d[0]) % (2 * math.pi)
    return theta_x, theta_z


@dataclass
class Grain:
    id: int
    orientation: tuple
    area: float = 0.0
    excess_volume: float = 0.0
    delta_area: float = 0.0
    theta_x: float = field(init=False)
    theta_z: float = field(init=False)

    def __setattr__(self, name, value):
        if name == "orientation":
            o = np.asarray(value, dtype=float)
            n = np.linalg.norm(o)
            if n == 0:
                raise InputError(f"grain {self.id}: zero orientation vector")
            # leave already-unit vectors untouched so file round trips are exact
            if abs(n - 1.0) > 1e-12:
                o = o / n
            value = tuple(float(v) for v in o)
            tx, tz = orientation_angles(value)
            object.__setattr__(self, "theta_x", tx)
            object.__setattr__(self, "theta_z", tz)
        object.__setattr__(self, name, value)


@dataclass
class Junction:
    id: int
    pos: tuple
    triplet: tuple
    delta: tuple = (0.0, 0.0)


class Neighbors(NamedTuple):
    grains: frozenset
    junctions: frozenset


@dataclass
class Violation:
    code: str
    message: str
    ids: tuple = ()


class GrainGraph:
    """Grain vertices, junction vertices and the two edge kinds.

    Junction-grain edges are never stored: they are the junction triplets.
    ``ring[g]`` indexes them from the grain side.
    """

    def __init__(self, domain: DomainSpec | None = None, z: float = 0.0, dz: float = 0.0):
        self.domain = domain or DomainSpec()
        self.z = float(z)
        self.dz = float(dz)
        self.grains: dict[int, Grain] = {}
        self.junctions: dict[int, Junction] = {}
        self.adj: dict[int, set[int]] = {}
        self.ring: dict[int, set[int]] = {}
        self.next_junction_id = 0

    # -- construction -------------------------------------------------

    def add_grain(self, gid, orientation, area=0.0, excess_volume=0.0, delta_area=0.0) -> Grain:
        gid = int(gid)
        if gid in self.grains:
            raise InputError(f"duplicate grain id {gid}")
        g = Grain(gid, orientation, float(area), float(excess_volume), float(delta_area))
        self.grains[gid] = g
        self.ring.setdefault(gid, set())
        return g

    def add_junction(self, pos, triplet, delta=(0.0, 0.0), jid=None) -> int:
        if jid is None:
            jid = self.next_junction_id
        jid = int(jid)
        if jid in self.junctions:
            raise InputError(f"duplicate junction id {jid}")
        self.next_junction_id = max(self.next_junction_id, jid + 1)
        p = wrap(pos)
        trip = tuple(sorted(int(g) for g in triplet))
        self.junctions[jid] = Junction(jid, (float(p[0]), float(p[1])), trip, (float(delta[0]), float(delta[1])))
        self.adj[jid] = set()
        for g in set(trip):
            self.ring.setdefault(g, set()).add(jid)
        return jid

    def add_edge(self, a: int, b: int):
        if a == b:
            raise InputError(f"self edge on junction {a}")
        self.adj[a].add(b)
        self.adj[b].add(a)

    def remove_edge(self, a: int, b: int):
        self.adj[a].discard(b)
        self.adj[b].discard(a)

    def remove_junction(self, jid: int):
        j = self.junctions.pop(jid)
        for k in self.adj.pop(jid):
            self.adj[k].discard(jid)
        for g in set(j.triplet):
            r = self.ring.get(g)
            if r is not None:
                r.discard(jid)

    def remove_grain_vertex(self, gid: int):
        del self.grains[gid]
        self.ring.pop(gid, None)

    def copy(self) -> "GrainGraph":
        out = GrainGraph(self.domain, self.z, self.dz)
        out.grains = {k: copy.copy(v) for k, v in self.grains.items()}
        out.junctions = {k: copy.copy(v) for k, v in self.junctions.items()}
        out.adj = {k: set(v) for k, v in self.adj.items()}
        out.ring = {k: set(v) for k, v in self.ring.items()}
        out.next_junction_id = self.next_junction_id
        return out

    # -- queries ------------------------------------------------------

    @property
    def n_grains(self) -> int:
        return len(self.grains)

    @property
    def n_junctions(self) -> int:
        return len(self.junctions)

    def e_jj(self) -> list[tuple[int, int]]:
        """Junction-junction edges as sorted id pairs, in sorted order."""
        return sorted((a, b) for a, nb in self.adj.items() for b in nb if a < b)

    def e_jg(self) -> list[tuple[int, int]]:
        return sorted((j.id, g) for j in self.junctions.values() for g in j.triplet)

    def n_e_jj(self) -> int:
        return sum(len(v) for v in self.adj.values()) // 2

    def n_e_jg(self) -> int:
        return 3 * len(self.junctions)

    def sides(self, gid: int) -> int:
        return len(self.ring.get(gid, ()))

    def grain_neighbors(self, gid: int) -> set[int]:
        """Grains sharing a junction with ``gid``."""
        out = set()
        for j in self.ring[gid]:
            out.update(self.junctions[j].triplet)
        out.discard(gid)
        return out

    def boundary_edge(self, g: int, h: int):
        """The junction pair separating grains ``g`` and ``h``, or None."""
        common = sorted(self.ring.get(g, set()) & self.ring.get(h, set()))
        for a, b in combinations(common, 2):
            if b in self.adj[a]:
                return (a, b)
        return None

    def pos(self, jid: int) -> np.ndarray:
        return np.asarray(self.junctions[jid].pos)

    def displacement(self, a: int, b: int) -> np.ndarray:
        """Minimum-image vector from junction a to junction b, fractional units."""
        return min_image(self.pos(b) - self.pos(a))

    def to_feature_units(self, d) -> np.ndarray:
        return np.asarray(d) * self.domain.period

    def edge_length(self, a: int, b: int) -> float:
        """Periodic length of a junction-junction edge in feature units."""
        return float(np.hypot(*self.to_feature_units(self.displacement(a, b))))

    def centroid(self, gid: int) -> np.ndarray:
        """Periodic mean of the ring, unwrapped around its lowest-id junction."""
        ring = sorted(self.ring[gid])
        if not ring:
            return np.array([np.nan, np.nan])
        p0 = self.pos(ring[0])
        pts = np.array([self.junctions[j].pos for j in ring])
        return wrap(p0 + min_image(pts - p0).mean(axis=0))

    def grain_length(self, jid: int, gid: int) -> float:
        d = min_image(self.centroid(gid) - self.pos(jid))
        return float(np.hypot(*self.to_feature_units(d)))

    def ordered_ring(self, gid: int) -> tuple[list[int], np.ndarray]:
        """Ring junctions ordered by angle about the unwrapped centroid.

        Returns the ids and their unwrapped fractional coordinates.
        """
        ring = sorted(self.ring[gid])
        p0 = self.pos(ring[0])
        pts = p0 + min_image(np.array([self.junctions[j].pos for j in ring]) - p0)
        c = pts.mean(axis=0)
        rel = (pts - c) * self.domain.period
        order = np.lexsort((np.array(ring), np.arctan2(rel[:, 1], rel[:, 0])))
        return [ring[i] for i in order], pts[order]

    def triplet_index(self) -> dict[tuple, int]:
        return {j.triplet: j.id for j in self.junctions.values()}


def neighbors(graph: GrainGraph, vertex_id: int, kind: str = "junction") -> Neighbors:
    """Neighbour sets of a junction (3 grains, 3 junctions) or a grain (its ring)."""
    if kind == "junction":
        if vertex_id not in graph.junctions:
            raise KeyError(f"unknown junction {vertex_id}")
        j = graph.junctions[vertex_id]
        return Neighbors(frozenset(j.triplet), frozenset(graph.adj[vertex_id]))
    if kind == "grain":
        if vertex_id not in graph.grains:
            raise KeyError(f"unknown grain {vertex_id}")
        return Neighbors(frozenset(), frozenset(graph.ring[vertex_id]))
    raise ValueError(f"kind must be 'junction' or 'grain', got {kind!r}")


def validate(graph: GrainGraph) -> list[Violation]:
    """Check every structural invariant; an empty list means valid."""
    out: list[Violation] = []
    ng = graph.n_grains
    sub_minimal = ng < 3
    if sub_minimal:
        out.append(Violation("sub-minimal", f"graph has {ng} grains (< 3)"))

    for g in graph.grains.values():
        if abs(np.linalg.norm(g.orientation) - 1.0) > 1e-9:
            out.append(Violation("orientation", f"grain {g.id} orientation not unit", (g.id,)))
        if g.area < 0 or g.excess_volume < 0:
            out.append(Violation("negative-size", f"grain {g.id} has negative area/volume", (g.id,)))

    for j in graph.junctions.values():
        x, y = j.pos
        if not (0.0 <= x < 1.0 and 0.0 <= y < 1.0):
            out.append(Violation("position", f"junction {j.id} not wrapped", (j.id,)))
        missing = [g for g in j.triplet if g not in graph.grains]
        if missing:
            out.append(Violation("dangling-grain", f"junction {j.id} references missing grains {missing}", (j.id,)))
        nb = graph.adj[j.id]
        if j.id in nb:
            out.append(Violation("self-edge", f"junction {j.id} has a self edge", (j.id,)))
        if len(nb) != 3:
            out.append(Violation("degree", f"junction {j.id} has {len(nb)} junction neighbours", (j.id,)))
        for k in nb:
            if k not in graph.junctions or j.id not in graph.adj.get(k, ()):
                out.append(Violation("asymmetric-edge", f"edge ({j.id}, {k}) is not symmetric", (j.id, k)))
        if not sub_minimal and len(set(j.triplet)) != 3:
            out.append(Violation("triplet", f"junction {j.id} triplet {j.triplet} not 3 distinct grains", (j.id,)))

    if sub_minimal:
        return out

    seen: dict[tuple, int] = {}
    for j in graph.junctions.values():
        if j.triplet in seen:
            out.append(Violation("duplicate-triplet", f"junctions {seen[j.triplet]} and {j.id} share triplet {j.triplet}", (seen[j.triplet], j.id)))
        else:
            seen[j.triplet] = j.id

    for a, b in graph.e_jj():
        if b not in graph.junctions:
            continue
        shared = set(graph.junctions[a].triplet) & set(graph.junctions[b].triplet)
        if len(shared) != 2:
            out.append(Violation("edge-triplet", f"edge ({a}, {b}) shares {len(shared)} grains", (a, b)))

    # converse direction: junctions sharing two grains must be adjacent
    for g, ring in graph.ring.items():
        if g not in graph.grains:
            continue
        if len(ring) < 3:
            out.append(Violation("grain-ring", f"grain {g} has {len(ring)} junctions", (g,)))
        for a in ring:
            for b in ring:
                if a < b and b not in graph.adj[a]:
                    shared = set(graph.junctions[a].triplet) & set(graph.junctions[b].triplet)
                    if len(shared) >= 2 and min(shared) == g:
                        out.append(Violation("edge-triplet", f"junctions ({a}, {b}) share {sorted(shared)} but are not adjacent", (a, b)))

    nj, ne = graph.n_junctions, graph.n_e_jj()
    if nj != 2 * ng or ne != 3 * ng:
        out.append(Violation("euler", f"n_j={nj}, |e_jj|={ne} for n_g={ng} (expected {2 * ng}, {3 * ng})"))
    return out


# -- features ---------------------------------------------------------


def junction_scale(domain: DomainSpec) -> np.ndarray:
    d = domain
    return np.array([d.l0x, d.l0y, d.l0z, d.g_max, d.r_max, d.l0x, d.l0y, d.l0z])


def grain_scale(domain: DomainSpec) -> np.ndarray:
    d = domain
    a = d.l0x * d.l0y
    return np.array([d.l0x, d.l0y, d.l0z, a, a * d.l0z, 1, 1, 1, 1, a, d.l0z])


@dataclass
class FeatureSet:
    """Normalised features of one layer, rows ordered by vertex id."""

    domain: DomainSpec
    junction_ids: np.ndarray
    grain_ids: np.ndarray
    junction: np.ndarray  # (n_j, 8)
    grain: np.ndarray  # (n_g, 11)
    jj_edges: np.ndarray  # (E, 2) junction ids, lower first
    jj_length: np.ndarray
    jg_edges: np.ndarray  # (E', 2) junction id, grain id
    jg_length: np.ndarray


def grain_centroids(graph: GrainGraph, gids) -> np.ndarray:
    return np.array([graph.centroid(g) for g in gids]).reshape(-1, 2)


def physical_features(graph: GrainGraph) -> tuple[np.ndarray, np.ndarray]:
    """Un-normalised junction (n_j, 8) and grain (n_g, 11) feature rows."""
    d = graph.domain
    jids = sorted(graph.junctions)
    gids = sorted(graph.grains)
    z = min(graph.z, d.l0z)
    fj = np.zeros((len(jids), 8))
    if jids:
        pos = np.array([graph.junctions[j].pos for j in jids])
        dl = np.array([graph.junctions[j].delta for j in jids])
        fj[:, 0] = pos[:, 0] * d.lx
        fj[:, 1] = pos[:, 1] * d.ly
        fj[:, 2] = z
        fj[:, 3] = d.g_z
        fj[:, 4] = d.r_z
        fj[:, 5] = dl[:, 0] * d.lx
        fj[:, 6] = dl[:, 1] * d.ly
        fj[:, 7] = graph.dz
    a0 = d.l0x * d.l0y
    fg = np.zeros((len(gids), 11))
    if gids:
        c = grain_centroids(graph, gids)
        gr = [graph.grains[g] for g in gids]
        fg[:, 0] = c[:, 0] * d.lx
        fg[:, 1] = c[:, 1] * d.ly
        fg[:, 2] = z
        fg[:, 3] = [g.area * a0 for g in gr]
        fg[:, 4] = [g.excess_volume * a0 * d.l0z for g in gr]
        tx = np.array([g.theta_x for g in gr])
        tz = np.array([g.theta_z for g in gr])
        fg[:, 5] = np.cos(tx)
        fg[:, 6] = np.sin(tx)
        fg[:, 7] = np.cos(tz)
        fg[:, 8] = np.sin(tz)
        fg[:, 9] = [g.delta_area * a0 for g in gr]
        fg[:, 10] = graph.dz
    return fj, fg


def normalize_features(graph: GrainGraph) -> FeatureSet:
    d = graph.domain
    fj, fg = physical_features(graph)
    jids = np.array(sorted(graph.junctions), dtype=np.int64)
    gids = np.array(sorted(graph.grains), dtype=np.int64)
    jj = np.array(graph.e_jj(), dtype=np.int64).reshape(-1, 2)
    jg = np.array(graph.e_jg(), dtype=np.int64).reshape(-1, 2)
    period = d.period
    jrow = {j: i for i, j in enumerate(jids.tolist())}
    grow = {g: i for i, g in enumerate(gids.tolist())}
    fjn = fj / junction_scale(d)
    fgn = fg / grain_scale(d)
    xy_j = fjn[:, :2]
    xy_g = fgn[:, :2]
    if len(jj):
        dv = min_image(xy_j[[jrow[b] for b in jj[:, 1]]] - xy_j[[jrow[a] for a in jj[:, 0]]], period)
        jj_len = np.hypot(dv[:, 0], dv[:, 1])
    else:
        jj_len = np.zeros(0)
    if len(jg):
        valid = np.array([g in grow for g in jg[:, 1]])
        jg = jg[valid]
        dv = min_image(xy_g[[grow[g] for g in jg[:, 1]]] - xy_j[[jrow[j] for j in jg[:, 0]]], period)
        jg_len = np.hypot(dv[:, 0], dv[:, 1])
    else:
        jg_len = np.zeros(0)
    return FeatureSet(d, jids, gids, fjn, fgn, jj, jj_len, jg, jg_len)


def denormalize_features(fs: FeatureSet, domain: DomainSpec | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Physical junction and grain feature rows."""
    domain = domain or fs.domain
    return fs.junction * junction_scale(domain), fs.grain * grain_scale(domain)


# -- serialisation ------------------------------------------------------


def graph_to_dict(graph: GrainGraph) -> dict:
    dom = graph.domain.to_dict()
    dom["z_l"] = graph.z
    dom["dz"] = graph.dz
    return {
        "format": "graingraph",
        "version": FORMAT_VERSION,
        "domain": dom,
        "next_junction_id": graph.next_junction_id,
        "grains": [
            {
                "id": g.id,
                "orientation": list(g.orientation),
                "area": g.area,
                "excess_volume": g.excess_volume,
                "delta_area": g.delta_area,
            }
            for g in sorted(graph.grains.values(), key=lambda g: g.id)
        ],
        "junctions": [
            {"id": j.id, "x": j.pos[0], "y": j.pos[1], "dx": j.delta[0], "dy": j.delta[1], "triplet": list(j.triplet)}
            for j in sorted(graph.junctions.values(), key=lambda j: j.id)
        ],
        "e_jj": [list(e) for e in graph.e_jj()],
    }


def graph_from_dict(data: dict) -> GrainGraph:
    try:
        if data.get("version") != FORMAT_VERSION:
            raise DataFormatError(f"unsupported graph format version {data.get('version')!r}")
        dom = dict(data["domain"])
        z = dom.pop("z_l", 0.0)
        dz = dom.pop("dz", 0.0)
        graph = GrainGraph(DomainSpec(**dom), z=z, dz=dz)
        for g in data["grains"]:
            graph.add_grain(g["id"], g["orientation"], g["area"], g["excess_volume"], g.get("delta_area", 0.0))
        for j in data["junctions"]:
            graph.add_junction((j["x"], j["y"]), j["triplet"], (j["dx"], j["dy"]), jid=j["id"])
        for a, b in data["e_jj"]:
            graph.add_edge(int(a), int(b))
        graph.next_junction_id = max(graph.next_junction_id, int(data.get("next_junction_id", 0)))
    except (KeyError, TypeError) as exc:
        raise DataFormatError(f"malformed graph document: {exc}") from exc
    return graph


def save_graph(graph: GrainGraph, path) -> None:
    Path(path).write_text(json.dumps(graph_to_dict(graph), sort_keys=True))


def load_graph(path) -> GrainGraph:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"{path}: not a graph document ({exc})") from exc
    return graph_from_dict(data)


def check_positions(points: Iterable) -> None:
    for p in points:
        if not (0 <= p[0] < 1 and 0 <= p[1] < 1):
            raise InputError(f"point {p} outside the unit cell")
