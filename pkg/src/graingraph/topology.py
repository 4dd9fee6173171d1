"""Topological edits (edge flip, grain removal), layer matching and layer spacing."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataFormatError, GuardedFlipError, InputError, TopologyError
from .graph import DomainSpec, GrainGraph, graph_to_dict, min_image, wrap

ELIMINATION_PER_UPDATE = 0.03


@dataclass
class EdgeFlip:
    old: tuple  # (j1, j2)
    gaining: tuple  # (g1, g2): g1 from j1's side, g2 from j2's side
    losing: tuple  # (g3, g4), ascending
    new: tuple  # (j1', j2') with triplets {g1,g2,g3}, {g1,g2,g4}


@dataclass
class GrainRemoval:
    grain: int
    junctions: tuple
    bridge: tuple


def flip_plan(graph: GrainGraph, j1: int, j2: int) -> tuple[tuple, tuple]:
    """Gaining and losing grains of the flip of edge (j1, j2)."""
    if j1 not in graph.junctions or j2 not in graph.junctions or j2 not in graph.adj[j1]:
        raise InputError(f"({j1}, {j2}) is not a junction-junction edge")
    t1 = set(graph.junctions[j1].triplet)
    t2 = set(graph.junctions[j2].triplet)
    shared = t1 & t2
    if len(shared) != 2 or len(t1) != 3 or len(t2) != 3:
        raise InputError(f"edge ({j1}, {j2}) joins triplets {sorted(t1)} and {sorted(t2)}")
    (g1,) = t1 - t2
    (g2,) = t2 - t1
    g3, g4 = sorted(shared)
    return (g1, g2), (g3, g4)


def apply_edge_flip(graph: GrainGraph, j1: int, j2: int, collapse: int | None = None) -> EdgeFlip:
    """Neighbour switch on edge (j1, j2), in place.

    The two junctions merge and split the other way: the grains they
    shared lose the boundary and the two outer grains gain one. A losing
    grain with only three junctions would become two-sided; that is
    allowed only for the grain named by ``collapse`` (an elimination in
    progress).
    """
    (g1, g2), (g3, g4) = flip_plan(graph, j1, j2)
    for g in (g3, g4):
        s = graph.sides(g)
        if s < 3:
            raise TopologyError(f"losing grain {g} already has {s} junctions")
        if s == 3 and g != collapse:
            raise GuardedFlipError(f"flip ({j1}, {j2}) would leave grain {g} two-sided")
    if graph.sides(g3) == 3 and graph.sides(g4) == 3:
        raise TopologyError(f"flip ({j1}, {j2}) would collapse both grains {g3} and {g4}")

    tnew1 = tuple(sorted((g1, g2, g3)))
    tnew2 = tuple(sorted((g1, g2, g4)))
    # a triplet already present elsewhere is legitimate only for the
    # junction that closes a collapsing three-sided grain
    closing = {k for k in graph.adj[j1] & graph.adj[j2]}
    for t in (tnew1, tnew2):
        for g in t:
            for k in graph.ring[g]:
                if k not in (j1, j2) and k not in closing and graph.junctions[k].triplet == t:
                    raise TopologyError(f"flip ({j1}, {j2}) would duplicate triplet {t} of junction {k}")

    # gaining grains that already meet elsewhere would end up sharing two boundaries
    both = graph.ring[g1] & graph.ring[g2]
    if both and not any({g3, g4} & set(graph.junctions[k].triplet) for k in both):
        raise TopologyError(f"flip ({j1}, {j2}) would give grains {g1} and {g2} a second common boundary")

    p1 = graph.pos(j1)
    mid = wrap(p1 + 0.5 * min_image(graph.pos(j2) - p1))
    ext = [(k, set(graph.junctions[j1].triplet) & set(graph.junctions[k].triplet)) for k in graph.adj[j1] if k != j2]
    ext += [(k, set(graph.junctions[j2].triplet) & set(graph.junctions[k].triplet)) for k in graph.adj[j2] if k != j1]
    graph.remove_junction(j1)
    graph.remove_junction(j2)
    n1 = graph.add_junction(mid, tnew1)
    n2 = graph.add_junction(mid, tnew2)
    graph.add_edge(n1, n2)
    for k, pair in ext:
        # the neighbour keeps the boundary it shared; attach it to the new
        # junction that still carries that grain pair
        target = n1 if pair <= set(tnew1) else n2
        graph.add_edge(target, k)
    return EdgeFlip((j1, j2), (g1, g2), (g3, g4), (n1, n2))


def remove_grain(graph: GrainGraph, g: int) -> GrainRemoval:
    """Delete a two-sided grain and bridge its outer neighbours, in place."""
    if g not in graph.grains:
        raise InputError(f"unknown grain {g}")
    ring = sorted(graph.ring[g])
    if len(ring) != 2:
        raise InputError(f"grain {g} has {len(ring)} junctions; flip it down to 2 first")
    a, b = ring
    ea = graph.adj[a] - {b}
    eb = graph.adj[b] - {a}
    if len(ea) != 1 or len(eb) != 1:
        raise TopologyError(f"two-sided grain {g} is not a lens: outer degrees {len(ea)}, {len(eb)}")
    (ka,), (kb,) = ea, eb
    if ka == kb or kb in graph.adj[ka]:
        raise TopologyError(f"removing grain {g} would create a self or parallel edge")
    graph.remove_junction(a)
    graph.remove_junction(b)
    graph.remove_grain_vertex(g)
    graph.add_edge(ka, kb)
    return GrainRemoval(g, (a, b), (min(ka, kb), max(ka, kb)))


def eliminate_grain(graph: GrainGraph, g: int, neighbor_order=None) -> tuple[list[EdgeFlip], GrainRemoval]:
    """Flip grain ``g`` down to two sides and remove it.

    ``neighbor_order`` ranks the neighbours whose boundaries go first; the
    default is ascending grain id. Boundaries with the last two remaining
    neighbours are never flipped.
    """
    flips = []
    while graph.sides(g) > 2:
        nbrs = graph.grain_neighbors(g)
        order = list(neighbor_order) if neighbor_order is not None else sorted(nbrs)
        order = [h for h in order if h in nbrs] + sorted(nbrs - set(order))
        for h in order:
            edge = graph.boundary_edge(g, h)
            if edge is None:
                continue
            try:
                flips.append(apply_edge_flip(graph, *edge, collapse=g))
                break
            except TopologyError:
                continue
        else:
            raise TopologyError(f"grain {g} cannot be reduced below {graph.sides(g)} sides")
    return flips, remove_grain(graph, g)


# -- layer matching ---------------------------------------------------------


@dataclass
class MatchResult:
    junction_map: dict  # previous junction id -> next junction id
    grains: list  # grain ids present in both layers
    delta_pos: dict  # previous junction id -> (dx, dy), fractional
    delta_area: dict  # grain id -> area change, feature units
    volume: dict  # grain id -> excess volume in the next layer
    edge_events: list  # flipped (j1, j2) pairs of the previous layer
    eliminated: list  # grain ids gone in the next layer
    junction_mask: dict  # previous junction id -> usable for training
    edge_mask: dict  # previous e_jj pair -> usable for training
    edge_label: dict = field(default_factory=dict)


def match_graphs(prev: GrainGraph, nxt: GrainGraph) -> MatchResult:
    """Correspond two consecutive layers by junction triplets."""
    if not set(prev.grains) & set(nxt.grains):
        raise InputError("layers share no grain ids")
    next_index = nxt.triplet_index()
    jmap = {}
    for jid, j in prev.junctions.items():
        k = next_index.get(j.triplet)
        if k is not None:
            jmap[jid] = k
    dpos = {j: tuple(min_image(nxt.pos(k) - prev.pos(j)).tolist()) for j, k in jmap.items()}
    common = sorted(set(prev.grains) & set(nxt.grains))
    darea = {g: nxt.grains[g].area - prev.grains[g].area for g in common}
    vol = {g: nxt.grains[g].excess_volume for g in common}
    eliminated = sorted(set(prev.grains) - set(nxt.grains))

    unmatched = set(prev.junctions) - set(jmap)
    events = []
    for a, b in prev.e_jj():
        if a not in unmatched or b not in unmatched:
            continue
        try:
            (g1, g2), (g3, g4) = flip_plan(prev, a, b)
        except InputError:
            continue
        t1 = tuple(sorted((g1, g2, g3)))
        t2 = tuple(sorted((g1, g2, g4)))
        if t1 in next_index and t2 in next_index:
            events.append((a, b))
    in_event = {j for e in events for j in e}
    jmask = {j: (j in jmap or j in in_event) for j in sorted(prev.junctions)}
    emask = {}
    label = {}
    event_set = set(events)
    for e in prev.e_jj():
        emask[e] = jmask[e[0]] and jmask[e[1]]
        label[e] = 1 if e in event_set else 0
    return MatchResult(jmap, common, dpos, darea, vol, events, eliminated, jmask, emask, label)


def training_record(prev: GrainGraph, nxt: GrainGraph, m: MatchResult) -> dict:
    """One line of the training-pair archive."""
    key = lambda e: f"{e[0]}-{e[1]}"  # noqa: E731
    return {
        "prev": graph_to_dict(prev),
        "next": graph_to_dict(nxt),
        "delta_pos": {str(k): v for k, v in m.delta_pos.items()},
        "delta_area": {str(k): v for k, v in m.delta_area.items()},
        "volume": {str(k): v for k, v in m.volume.items()},
        "edge_events": [list(e) for e in m.edge_events],
        "eliminated": m.eliminated,
        "junction_mask": {str(k): v for k, v in m.junction_mask.items()},
        "edge_mask": {key(k): v for k, v in m.edge_mask.items()},
        "edge_label": {key(k): v for k, v in m.edge_label.items()},
    }


def write_training_archive(pairs, path) -> int:
    """Write ``(prev, next)`` graph pairs as line-delimited JSON; returns the count."""
    n = 0
    with open(path, "w") as fh:
        for prev, nxt in pairs:
            fh.write(json.dumps(training_record(prev, nxt, match_graphs(prev, nxt)), sort_keys=True))
            fh.write("\n")
            n += 1
    return n


# -- layer spacing ------------------------------------------------------------


@dataclass(frozen=True)
class TableEntry:
    g_z: float
    r_z: float
    fraction: float  # eliminated grains over initial grains across the height


def layers_for_fraction(fraction: float) -> int:
    """Layer count so that about 3% of grains go per update; at least 2."""
    if not 0 <= fraction <= 1:
        raise ConfigError(f"elimination fraction {fraction} outside [0, 1]")
    # the small offset keeps 0.6/0.03 = 19.999... from rounding down
    return max(2, int(math.floor(fraction / ELIMINATION_PER_UPDATE + 0.5 + 1e-9)))


def delta_z_policy(p, table, lz: float, domain: DomainSpec | None = None) -> tuple[float, int]:
    """Return (dz, n_l) for process parameters ``p = (g_z, r_z)``.

    The nearest table entry in (G/G_max, R/R_max) space supplies the
    elimination fraction.
    """
    if not table:
        raise ConfigError("elimination table is empty")
    if not lz > 0:
        raise ConfigError(f"height must be positive, got {lz}")
    domain = domain or DomainSpec()
    entries = [e if isinstance(e, TableEntry) else TableEntry(*e) for e in table]
    pts = np.array([(e.g_z / domain.g_max, e.r_z / domain.r_max) for e in entries])
    q = np.array([p[0] / domain.g_max, p[1] / domain.r_max])
    d = np.hypot(*(pts - q).T)
    best = int(np.lexsort((np.arange(len(d)), d))[0])
    n_l = layers_for_fraction(entries[best].fraction)
    return lz / (n_l - 1), n_l


def load_elimination_table(path) -> list[TableEntry]:
    """JSON list of ``{"g_z", "r_z", "fraction"}`` records."""
    try:
        rows = json.loads(Path(path).read_text())
        return [TableEntry(float(r["g_z"]), float(r["r_z"]), float(r["fraction"])) for r in rows]
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise DataFormatError(f"{path}: bad elimination table ({exc})") from exc
