import itertools

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from graingraph.graph import DomainSpec, GrainGraph
from graingraph.substrate import SubstrateSpec, generate_substrate, periodic_voronoi, sample_orientations

settings.register_profile("default", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def ring_seeds(n: int) -> np.ndarray:
    """Centre seed, a ring of n seeds, a buffer ring and a background lattice.

    Grain 1 comes out n-sided.
    """
    pts = [(0.5, 0.5)]
    for k in range(n):
        a = 2 * np.pi * k / n + 0.1
        pts.append((0.5 + 0.06 * np.cos(a), 0.5 + 0.06 * np.sin(a)))
    m = max(2 * n, 8)
    for k in range(m):
        a = 2 * np.pi * (k + 0.5) / m
        pts.append((0.5 + 0.14 * np.cos(a), 0.5 + 0.14 * np.sin(a)))
    for i, j in itertools.product(range(8), range(8)):
        p = ((i + 0.5 * (j % 2)) / 8 + 0.03, (j + 0.5) / 8)
        if np.hypot(p[0] - 0.5, p[1] - 0.5) > 0.22:
            pts.append(p)
    return np.array(pts)


def ring_graph(n: int, domain: DomainSpec | None = None) -> GrainGraph:
    seeds = ring_seeds(n)
    ori = sample_orientations(len(seeds), np.random.default_rng(n))
    return periodic_voronoi(seeds, ori, domain or DomainSpec())


def brick_layout(rows: int = 4, cols: int = 4):
    """Running-bond brick partition: (labels function, grain ids).

    Row r spans y in [r/rows, (r+1)/rows); odd rows shift by half a brick.
    """

    def label(x, y):
        r = np.floor(np.asarray(y) * rows).astype(int) % rows
        b = np.floor(np.asarray(x) * cols - 0.5 * (r % 2)).astype(int) % cols
        return 1 + r * cols + b

    return label, list(range(1, rows * cols + 1))


def brick_graph(rows: int = 4, cols: int = 4, domain: DomainSpec | None = None) -> GrainGraph:
    """Hand-built graph of the brick partition, junctions on brick corners."""
    label, gids = brick_layout(rows, cols)
    domain = domain or DomainSpec()
    g = GrainGraph(domain)
    for gid in gids:
        g.add_grain(gid, (0.0, 0.0, 1.0), area=domain.area_scale / len(gids))
    eps = 1e-6
    for r in range(rows):
        y = r / rows
        xs = sorted({(b + 0.5 * (r % 2)) / cols % 1.0 for b in range(cols)} | {(b + 0.5 * ((r - 1) % 2)) / cols % 1.0 for b in range(cols)})
        for x in xs:
            t = {int(label((x - eps) % 1, y + eps)), int(label((x + eps) % 1, y + eps)), int(label((x - eps) % 1, (y - eps) % 1)), int(label((x + eps) % 1, (y - eps) % 1))}
            assert len(t) == 3
            g.add_junction((x, y), tuple(t))
    ids = sorted(g.junctions)
    for a, b in itertools.combinations(ids, 2):
        if len(set(g.junctions[a].triplet) & set(g.junctions[b].triplet)) == 2:
            g.add_edge(a, b)
    return g


def brick_image(width: int, height: int, rows: int = 4, cols: int = 4) -> np.ndarray:
    label, _ = brick_layout(rows, cols)
    yy, xx = np.mgrid[0:height, 0:width]
    return label((xx + 0.5) / width, (yy + 0.5) / height).astype(np.uint32)


def uniform_graph(n: int, seed: int = 0, domain: DomainSpec | None = None) -> GrainGraph:
    return generate_substrate(SubstrateSpec(domain=domain or DomainSpec(), sampler="uniform", n_seeds=n, rng_seed=seed))


@pytest.fixture
def hex_graph():
    return generate_substrate(SubstrateSpec(sampler="hex", amplitude=0.1, rng_seed=1))


@pytest.fixture
def random30():
    return uniform_graph(30, seed=7)


def regular_hex_graph(ncol: int = 4, nrow: int = 4, a: float = 10.0, orientations=None) -> GrainGraph:
    """Voronoi of a regular hexagonal lattice: every edge has length a/sqrt(3).

    Both feature scales equal lx so feature space stays isotropic.
    """
    lx, ly = ncol * a, nrow * a * np.sqrt(3) / 2
    d = DomainSpec(lx=lx, ly=ly, l0x=lx, l0y=lx)
    seeds = np.array([((i + 0.5 * (j % 2)) / ncol, (j + 0.5) / nrow) for j in range(nrow) for i in range(ncol)])
    if orientations is None:
        orientations = np.tile([0.0, 0.0, 1.0], (len(seeds), 1))
    return periodic_voronoi(seeds, orientations, d)
