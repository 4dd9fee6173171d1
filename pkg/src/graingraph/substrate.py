"""Initial substrates: seed sampling, orientations and the periodic Voronoi graph."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import Delaunay

from .errors import ConfigError, InputError
from .graph import DomainSpec, GrainGraph, validate



def _shifts(reach: int) -> np.ndarray:
    r = range(-reach, reach + 1)
    return np.array([(sx, sy) for sx in r for sy in r])


@dataclass(frozen=True)
class SubstrateSpec:
    """How to draw a substrate.

    ``sampler`` is ``"hex"`` (uses ``d0`` and ``amplitude``) or ``"uniform"``
    (uses ``n_seeds``). ``theta0`` switches orientations from the uniform
    sphere to a distribution peaked at that misorientation (radians).
    """

    domain: DomainSpec = DomainSpec()
    sampler: str = "hex"
    d0: float = 4.1
    amplitude: float = 0.1
    n_seeds: int = 100
    rng_seed: int = 0
    theta0: float | None = None
    theta_spread: float = 0.1

    def __post_init__(self):
        if self.sampler not in ("hex", "uniform"):
            raise ConfigError(f"unknown sampler {self.sampler!r}")
        if self.sampler == "hex":
            if not self.d0 > 0:
                raise ConfigError(f"d0 must be positive, got {self.d0}")
            if not 0 <= self.amplitude < 0.5:
                raise ConfigError(f"amplitude must lie in [0, 0.5), got {self.amplitude}")
        elif self.n_seeds < 2:
            raise ConfigError(f"need at least 2 seeds, got {self.n_seeds}")
        if not 0 <= self.rng_seed < 2**64:
            raise ConfigError("rng_seed must be an unsigned 64-bit integer")


def sample_orientations(n: int, rng: np.random.Generator) -> np.ndarray:
    """Unit vectors uniform on the sphere, shape (n, 3)."""
    if n < 1:
        raise InputError(f"need n >= 1, got {n}")
    v = rng.standard_normal((n, 3))
    norm = np.linalg.norm(v, axis=1, keepdims=True)
    # a zero draw has probability zero, but redraw rather than divide by it
    while np.any(norm == 0):
        bad = norm[:, 0] == 0
        v[bad] = rng.standard_normal((bad.sum(), 3))
        norm = np.linalg.norm(v, axis=1, keepdims=True)
    return v / norm


def peaked_orientations(n: int, rng: np.random.Generator, theta0: float, spread: float) -> np.ndarray:
    """Unit vectors whose misorientation clusters around ``theta0``.

    theta_z is ``|theta0 + spread*N(0,1)|`` folded into [0, pi/2]; the
    azimuth is uniform.
    """
    if n < 1:
        raise InputError(f"need n >= 1, got {n}")
    tz = np.abs(theta0 + spread * rng.standard_normal(n))
    tz = np.pi / 2 - np.abs(np.pi / 2 - tz % np.pi)
    tx = rng.uniform(0.0, 2 * np.pi, n)
    return np.column_stack([np.sin(tz) * np.cos(tx), np.sin(tz) * np.sin(tx), np.cos(tz)])


def hex_lattice_shape(domain: DomainSpec, d0: float) -> tuple[int, int]:
    """Column and (even) row counts giving cells of equivalent diameter ~d0."""
    n = domain.lx * domain.ly / (math.pi * d0 * d0 / 4)
    ncol = round(math.sqrt(n * (domain.lx / domain.ly) * math.sqrt(3) / 2))
    nrow = 2 * round(n / max(ncol, 1) / 2)
    if ncol < 2 or nrow < 2:
        raise ConfigError(f"domain {domain.lx}x{domain.ly} too small for d0={d0}")
    return ncol, nrow


def hex_perturbed_seeds(spec: SubstrateSpec, rng: np.random.Generator) -> np.ndarray:
    """Centres of a hexagonal lattice, each jittered by amplitude*l0x*N(0,1).

    Returned as fractional coordinates in [0, 1).
    """
    d = spec.domain
    ncol, nrow = hex_lattice_shape(d, spec.d0)
    r, c = np.divmod(np.arange(ncol * nrow), ncol)
    x = (c + 0.25 + 0.5 * (r % 2)) / ncol
    y = (r + 0.5) / nrow
    pts = np.column_stack([x, y])
    if spec.amplitude > 0:
        eta = rng.standard_normal(pts.shape)
        pts = pts + spec.amplitude * d.l0x * eta / np.array([d.lx, d.ly])
    return pts % 1.0


def uniform_seeds(n: int, rng: np.random.Generator) -> np.ndarray:
    if n < 2:
        raise ConfigError(f"need at least 2 seeds, got {n}")
    return rng.random((n, 2))


def _circumcenters(p: np.ndarray) -> np.ndarray:
    """Circumcentres of triangles given as (m, 3, 2)."""
    a = p[:, 0]
    b = p[:, 1] - a
    c = p[:, 2] - a
    d = 2.0 * (b[:, 0] * c[:, 1] - b[:, 1] * c[:, 0])
    b2 = (b * b).sum(1)
    c2 = (c * c).sum(1)
    # flat slivers from the tiled lattice give inf/nan; callers reject them
    with np.errstate(divide="ignore", invalid="ignore"):
        ux = (c[:, 1] * b2 - b[:, 1] * c2) / d
        uy = (b[:, 0] * c2 - c[:, 0] * b2) / d
    return a + np.column_stack([ux, uy])


def _tessellate(phys: np.ndarray, lx: float, ly: float, reach: int = 1):
    """Periodic Delaunay via a (2*reach+1)^2 tiling.

    Returns (triplets, junction positions, jj edges, cell areas) with
    physical positions, or None when the result is degenerate.
    """
    n = len(phys)
    box = np.array([lx, ly])
    shifts = _shifts(reach)
    w = 2 * reach + 1
    pts = (phys[None, :, :] + shifts[:, None, :] * box).reshape(-1, 2)
    owner = np.tile(np.arange(n), len(shifts))
    shift = np.repeat(shifts, n, axis=0)
    tri = Delaunay(pts)
    simp = tri.simplices
    cc = _circumcenters(pts[simp])

    # translation-invariant key of each triangle on the torus
    own = owner[simp]
    sh = shift[simp]
    code = own * w * w + (sh[:, :, 0] + reach) * w + (sh[:, :, 1] + reach)
    anchor = np.argmin(code, axis=1)
    rows = np.arange(len(simp))
    rel = sh - sh[rows, anchor][:, None, :]
    # relative shifts lie in [-2*reach, 2*reach]
    rw = 2 * w - 1
    vcode = own * rw * rw + (rel[:, :, 0] + 2 * reach) * rw + (rel[:, :, 1] + 2 * reach)
    vcode.sort(axis=1)
    m = np.int64(rw * rw * n)
    key = (vcode[:, 0].astype(np.int64) * m + vcode[:, 1]) * m + vcode[:, 2]

    central = np.all((cc >= 0) & (cc < box), axis=1)
    reps = np.flatnonzero(central)
    if len(reps) != 2 * n:
        return None
    rep_keys = key[reps]
    sort = np.argsort(rep_keys)
    rep_keys = rep_keys[sort]
    reps = reps[sort]
    if np.any(np.diff(rep_keys) == 0):
        return None

    nb = tri.neighbors[reps]
    if np.any(nb < 0):
        return None
    nb_keys = key[nb]
    idx = np.searchsorted(rep_keys, nb_keys)
    idx = np.minimum(idx, len(rep_keys) - 1)
    if np.any(rep_keys[idx] != nb_keys):
        return None
    edges = set()
    for a in range(len(reps)):
        for b in idx[a]:
            if a == b:
                return None
            edges.add((min(a, int(b)), max(a, int(b))))
    if len(edges) != 3 * n:
        return None
    jpos = cc[reps]

    # shortest periodic edge length flags cocircular ties
    e = np.array(sorted(edges))
    dv = jpos[e[:, 1]] - jpos[e[:, 0]]
    dv -= box * np.rint(dv / box)
    # two-seed tori keep coincident vertex pairs however they are jittered
    if n >= 3 and np.hypot(dv[:, 0], dv[:, 1]).min() < 1e-11 * max(lx, ly):
        return None

    # cell areas: shoelace over circumcentres of triangles touching each central seed
    mid = len(shifts) // 2  # the (0, 0) tile
    central_vertex = np.arange(mid * n, (mid + 1) * n)
    incident = np.isin(simp, central_vertex)
    sidx, slot = np.nonzero(incident)
    seed = owner[simp[sidx, slot]]
    cpts = cc[sidx]
    ang = np.arctan2(cpts[:, 1] - phys[seed, 1], cpts[:, 0] - phys[seed, 0])
    o = np.lexsort((ang, seed))
    seed, cpts = seed[o], cpts[o]
    starts = np.flatnonzero(np.r_[True, seed[1:] != seed[:-1]])
    nxt = np.arange(len(seed)) + 1
    ends = np.r_[starts[1:], len(seed)]
    nxt[ends - 1] = starts
    cross = cpts[:, 0] * cpts[nxt, 1] - cpts[nxt, 0] * cpts[:, 1]
    areas = 0.5 * np.add.reduceat(cross, starts)
    if len(starts) != n or np.any(areas <= 0):
        return None

    triplets = owner[simp[reps]]
    return triplets, jpos, sorted(edges), areas


def periodic_voronoi(seeds, orientations, domain: DomainSpec | None = None, z: float = 0.0) -> GrainGraph:
    """Voronoi graph of fractional ``seeds`` on the periodic domain.

    Grain ``i+1`` is the cell of ``seeds[i]``. Cocircular ties are broken by
    a deterministic jitter of the tessellation points (not of the returned
    seeds).
    """
    domain = domain or DomainSpec()
    seeds = np.asarray(seeds, dtype=float).reshape(-1, 2)
    orientations = np.asarray(orientations, dtype=float).reshape(-1, 3)
    n = len(seeds)
    if n < 2:
        raise InputError(f"need at least 2 seeds, got {n}")
    if len(orientations) != n:
        raise InputError(f"{len(orientations)} orientations for {n} seeds")
    if np.any(seeds < 0) or np.any(seeds >= 1):
        raise InputError("seeds must lie in [0, 1)")
    if len(np.unique(seeds, axis=0)) != n:
        raise InputError("duplicate seeds")

    box = np.array([domain.lx, domain.ly])
    phys = seeds * box
    result = None
    for attempt in range(6):
        if attempt:
            jitter_rng = np.random.default_rng(attempt)
            amp = 1e-9 * domain.lx * 10 ** (attempt - 1)
            pts = (phys + amp * jitter_rng.standard_normal(phys.shape)) % box
        else:
            pts = phys
        result = _tessellate(pts, domain.lx, domain.ly, reach=1 if n >= 16 else 2)
        if result is not None:
            break
    if result is None:
        # e.g. two generic seeds, whose cells meet along parallel edges
        raise InputError("tessellation has parallel junction edges or unresolved ties")
    triplets, jpos, edges, areas = result

    a0 = domain.l0x * domain.l0y
    graph = GrainGraph(domain, z=z, dz=0.0)
    for i in range(n):
        graph.add_grain(i + 1, orientations[i], area=areas[i] / a0)
    frac = jpos / box
    for k in range(len(triplets)):
        graph.add_junction(frac[k], triplets[k] + 1, jid=k)
    for a, b in edges:
        graph.add_edge(a, b)
    # on a small torus two cells can meet along several separate edges;
    # triplets then stop identifying junctions and the graph is unusable
    bad = [v for v in validate(graph) if v.code != "sub-minimal"]
    if bad:
        raise InputError(f"tessellation is not a simple triple-junction graph ({bad[0].message}); use more seeds")
    return graph


def generate_substrate(spec: SubstrateSpec) -> GrainGraph:
    """Seeds, orientations and tessellation for one substrate draw."""
    rng = np.random.default_rng(spec.rng_seed)
    if spec.sampler == "hex":
        seeds = hex_perturbed_seeds(spec, rng)
    else:
        seeds = uniform_seeds(spec.n_seeds, rng)
    if spec.theta0 is None:
        ori = sample_orientations(len(seeds), rng)
    else:
        ori = peaked_orientations(len(seeds), rng, spec.theta0, spec.theta_spread)
    return periodic_voronoi(seeds, ori, spec.domain)
