"""Raster index images and their conversion to and from grain graphs."""

from __future__ import annotations

import struct
from collections import Counter
from dataclasses import dataclass
from itertools import combinations
from pathlib import Path

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree
from skimage.measure import label as label_regions

from .errors import DataFormatError, DegeneracyError, InputError, PartitionError, ReconstructionError
from .graph import DomainSpec, FeatureSet, GrainGraph, min_image, normalize_features

GIDX_MAGIC = b"GIDX"
GVOL_MAGIC = b"GVOL"
BINARY_VERSION = 1
_GIDX_HEAD = struct.Struct("<4sHIId")
_GVOL_HEAD = struct.Struct("<4sHIIId")

# the 8 neighbours, row offset then column offset, in row-major order
_RING8 = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)]


@dataclass
class IndexImage:
    """Grain indices of one layer, ``data[row, col]``; row 0 is y = 0."""

    data: np.ndarray
    domain: DomainSpec = DomainSpec()
    z: float = 0.0

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.uint32)
        if self.data.ndim != 2:
            raise InputError("index image must be 2-D")
        if min(self.data.shape) < 8:
            raise InputError(f"index image {self.data.shape} smaller than 8x8")
        if self.data.size and self.data.min() == 0:
            raise InputError("index 0 is reserved; every pixel needs a grain index > 0")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


@dataclass
class IndexVolume:
    data: np.ndarray  # (depth, height, width)
    dz: float
    domain: DomainSpec = DomainSpec()

    @property
    def depth(self) -> int:
        return self.data.shape[0]


# -- binary formats -------------------------------------------------------


def write_gidx(img: IndexImage, path) -> None:
    head = _GIDX_HEAD.pack(GIDX_MAGIC, BINARY_VERSION, img.width, img.height, float(img.z))
    Path(path).write_bytes(head + img.data.astype("<u4").tobytes())


def read_gidx(path, domain: DomainSpec | None = None) -> IndexImage:
    raw = Path(path).read_bytes()
    if len(raw) < _GIDX_HEAD.size:
        raise DataFormatError(f"{path}: truncated header")
    magic, version, w, h, z = _GIDX_HEAD.unpack_from(raw)
    if magic != GIDX_MAGIC:
        raise DataFormatError(f"{path}: bad magic {magic!r}")
    if version != BINARY_VERSION:
        raise DataFormatError(f"{path}: unsupported version {version}")
    body = raw[_GIDX_HEAD.size:]
    if len(body) != 4 * w * h:
        raise DataFormatError(f"{path}: expected {4 * w * h} data bytes, found {len(body)}")
    data = np.frombuffer(body, dtype="<u4").reshape(h, w)
    try:
        return IndexImage(data.astype(np.uint32), domain or DomainSpec(), z)
    except InputError as exc:
        raise DataFormatError(f"{path}: {exc}") from exc


def write_gvol(vol: IndexVolume, path) -> None:
    d, h, w = vol.data.shape
    head = _GVOL_HEAD.pack(GVOL_MAGIC, BINARY_VERSION, w, h, d, float(vol.dz))
    Path(path).write_bytes(head + vol.data.astype("<u4").tobytes())


def read_gvol(path, domain: DomainSpec | None = None) -> IndexVolume:
    raw = Path(path).read_bytes()
    if len(raw) < _GVOL_HEAD.size:
        raise DataFormatError(f"{path}: truncated header")
    magic, version, w, h, d, dz = _GVOL_HEAD.unpack_from(raw)
    if magic != GVOL_MAGIC:
        raise DataFormatError(f"{path}: bad magic {magic!r}")
    if version != BINARY_VERSION:
        raise DataFormatError(f"{path}: unsupported version {version}")
    body = raw[_GVOL_HEAD.size:]
    if len(body) != 4 * w * h * d:
        raise DataFormatError(f"{path}: expected {4 * w * h * d} data bytes, found {len(body)}")
    data = np.frombuffer(body, dtype="<u4").reshape(d, h, w).astype(np.uint32)
    return IndexVolume(data, dz, domain or DomainSpec())


def stack_layers(images: list[IndexImage], dz: float) -> IndexVolume:
    if not images:
        raise InputError("no layers to stack")
    shape = images[0].data.shape
    for k, im in enumerate(images):
        if im.data.shape != shape:
            raise InputError(f"layer {k} has shape {im.data.shape}, expected {shape}")
        if im.domain != images[0].domain:
            raise InputError(f"layer {k} has a different domain")
    return IndexVolume(np.stack([im.data for im in images]), float(dz), images[0].domain)


# -- oracle-style rasterisation of a Voronoi tessellation -------------------


def voronoi_image(seeds, domain: DomainSpec, width: int, height: int, z: float = 0.0) -> IndexImage:
    """Label each pixel centre with 1 + the index of its nearest periodic seed."""
    box = np.array([domain.lx, domain.ly])
    tree = cKDTree(np.asarray(seeds, dtype=float) * box % box, boxsize=box)
    cx = (np.arange(width) + 0.5) / width * domain.lx
    cy = (np.arange(height) + 0.5) / height * domain.ly
    gx, gy = np.meshgrid(cx, cy)
    _, idx = tree.query(np.column_stack([gx.ravel(), gy.ravel()]))
    return IndexImage((idx + 1).reshape(height, width), domain, z)


# -- image -> graph ---------------------------------------------------------


def check_partition(data: np.ndarray, repair: bool = False) -> np.ndarray:
    """Every index must form one component under periodic 8-connectivity.

    Rasterised straight edges meet at acute corners through diagonal pixel
    contacts, so 4-connectivity would reject clean Voronoi images. With
    ``repair`` the smaller fragments of a split index are flooded from their
    surroundings instead of raising. Returns the (possibly repaired) data.
    """
    lab = label_regions(data.astype(np.int64), background=0, connectivity=2)
    n = int(lab.max())
    h, w = data.shape
    # wrap links: straight across each seam plus the two diagonals
    rows = np.arange(h)
    cols = np.arange(w)
    a_parts, b_parts = [], []
    for dr in (-1, 0, 1):
        a_parts.append((rows, np.zeros(h, int)))
        b_parts.append(((rows + dr) % h, np.full(h, w - 1)))
        a_parts.append((np.zeros(w, int), cols))
        b_parts.append((np.full(w, h - 1), (cols + dr) % w))
    ar = np.concatenate([p[0] for p in a_parts])
    ac = np.concatenate([p[1] for p in a_parts])
    br = np.concatenate([p[0] for p in b_parts])
    bc = np.concatenate([p[1] for p in b_parts])
    a, b = lab[ar, ac], lab[br, bc]
    va, vb = data[ar, ac], data[br, bc]
    same = va == vb
    m = coo_matrix((np.ones(same.sum()), (a[same] - 1, b[same] - 1)), shape=(n, n))
    _, comp = connected_components(m, directed=False)
    region_value = np.zeros(n, dtype=np.int64)
    region_value[lab.ravel() - 1] = data.ravel()
    pairs = np.unique(np.column_stack([region_value, comp]), axis=0)
    values, counts = np.unique(pairs[:, 0], return_counts=True)
    if not np.any(counts > 1):
        return data
    bad = values[counts > 1]
    if not repair:
        raise PartitionError(f"grain indices {bad[:10].tolist()} are disconnected")
    size = np.bincount(comp[lab.ravel() - 1], minlength=comp.max() + 1)
    keep = {}
    for ci in np.unique(comp):
        v = int(region_value[np.flatnonzero(comp == ci)[0]])
        if v not in keep or size[ci] > size[keep[v]]:
            keep[v] = ci
    pix_comp = comp[lab - 1]
    kept = np.zeros(comp.max() + 1, dtype=bool)
    kept[list(keep.values())] = True
    out = data.astype(np.int64)
    out[~kept[pix_comp]] = 0
    return _flood_holes(out).astype(data.dtype)


def _neighbourhood(data: np.ndarray) -> np.ndarray:
    """(8, H, W) stack of periodic neighbour indices."""
    return np.stack([np.roll(data, (-dr, -dc), axis=(0, 1)) for dr, dc in _RING8])


def _contacts(data: np.ndarray, r: int, c: int, radius: int = 2, diagonal: bool = False) -> Counter:
    """Counts of grain pairs touching inside a periodic window around (r, c)."""
    h, w = data.shape
    rows = np.arange(r - radius, r + radius + 1) % h
    cols = np.arange(c - radius, c + radius + 1) % w
    win = data[np.ix_(rows, cols)]
    views = [(win[:, :-1], win[:, 1:]), (win[:-1, :], win[1:, :])]
    if diagonal:
        views += [(win[:-1, :-1], win[1:, 1:]), (win[:-1, 1:], win[1:, :-1])]
    out: Counter = Counter()
    for a, b in views:
        diff = a != b
        lo = np.minimum(a[diff], b[diff])
        hi = np.maximum(a[diff], b[diff])
        out.update(zip(lo.tolist(), hi.tolist()))
    return out


def _is_triple(trip, pairs) -> bool:
    a, b, c = trip
    return (a, b) in pairs and (a, c) in pairs and (b, c) in pairs


def _bridge_quad(data, r, c, ids) -> list:
    """Split a quadruple point whose short edge is only touched diagonally.

    The pair with the most diagonal contacts becomes the short edge; the
    two triplets containing it are returned.
    """
    four = _contacts(data, r, c)
    eight = _contacts(data, r, c, diagonal=True)
    options = [p for p in combinations(ids, 2) if p not in four and p in eight]
    if not options:
        return []
    bridge = min(options, key=lambda p: (-eight[p], p))
    trips = [tuple(sorted(set(bridge) | {g})) for g in ids if g not in bridge]
    return [t for t in trips if _is_triple(t, eight)]


def find_junction_pixels(data: np.ndarray, strict: bool = False) -> dict:
    """Map each detected triplet to its chosen pixel ``(row, col)``.

    A triplet counts only if its three grain pairs touch 4-adjacently near
    the pixel. Among pixels sharing a triplet the one whose neighbourhood
    counts are most even wins; ties go to the lowest row-major pixel index.
    """
    h, w = data.shape
    nb = _neighbourhood(data)
    srt = np.sort(nb, axis=0)
    distinct = 1 + (np.diff(srt, axis=0) != 0).sum(axis=0)
    cand = np.flatnonzero(distinct.ravel() >= 3)
    best: dict = {}
    bridged: dict = {}
    for flat in cand.tolist():
        r, c = divmod(flat, w)
        vals = nb[:, r, c]
        ids, counts = np.unique(vals, return_counts=True)
        ids = ids.tolist()
        k = len(ids)
        if k >= 4 and strict:
            raise DegeneracyError(f"pixel (row={r}, col={c}) touches {k} grains")
        pairs = _contacts(data, r, c)
        cnt = dict(zip(ids, counts.tolist()))
        trips = [t for t in combinations(ids, 3) if _is_triple(t, pairs)]
        if k >= 5 and not trips:
            raise DegeneracyError(f"pixel (row={r}, col={c}) touches {k} grains and no triple resolves")
        if k == 4 and not trips:
            quad = tuple(ids)
            if quad not in bridged:
                bridged[quad] = _bridge_quad(data, r, c, ids)
            trips = bridged[quad]
            if not trips:
                raise DegeneracyError(f"pixel (row={r}, col={c}) is an unresolvable quadruple point")
        for trip in trips:
            key = (k > 3, sum(cnt[g] ** 2 for g in trip), flat)
            old = best.get(trip)
            if old is None or key < old[0]:
                best[trip] = (key, (r, c))
    return {t: v[1] for t, v in best.items()}


def _pair_triplets(triplets: list, pos: np.ndarray, period) -> list:
    """e_jj from triplets sharing two grains."""
    by_pair: dict = {}
    for i, t in enumerate(triplets):
        for p in combinations(t, 2):
            by_pair.setdefault(p, []).append(i)
    edges = set()
    for members in by_pair.values():
        if len(members) == 2:
            edges.add(tuple(sorted(members)))
        elif len(members) > 2:
            # two grains meeting along several boundaries; pair up nearest ends
            left = sorted(members)
            while len(left) >= 2:
                a = left.pop(0)
                d = [np.hypot(*(min_image(pos[b] - pos[a]) * period)) for b in left]
                b = left.pop(int(np.argmin(d)))
                edges.add((min(a, b), max(a, b)))
    return sorted(edges)


def image_to_graph(
    img: IndexImage, orientations: dict | None = None, strict: bool = False, repair: bool = False
) -> tuple[GrainGraph, FeatureSet]:
    """Extract the grain graph of an index image.

    ``orientations`` maps grain id to a direction vector; missing ids
    default to the z axis. ``strict`` refuses any pixel touching four or
    more grains; ``repair`` absorbs detached fragments of a grain.
    """
    data = check_partition(img.data, repair=repair)
    h, w = data.shape
    d = img.domain
    ids, counts = np.unique(data, return_counts=True)
    graph = GrainGraph(d, z=img.z)
    orientations = orientations or {}
    for g, cnt in zip(ids.tolist(), counts.tolist()):
        graph.add_grain(g, orientations.get(g, (0.0, 0.0, 1.0)), area=cnt / data.size * d.area_scale)
    found = find_junction_pixels(data, strict=strict)
    triplets = sorted(found)
    pos = np.array([((found[t][1] + 0.5) / w, (found[t][0] + 0.5) / h) for t in triplets]).reshape(-1, 2)
    for i, t in enumerate(triplets):
        graph.add_junction(pos[i], t, jid=i)
    for a, b in _pair_triplets(triplets, pos, d.period):
        graph.add_edge(a, b)
    return graph, normalize_features(graph)


# -- graph -> image ---------------------------------------------------------


def _fill_polygon(px: np.ndarray, py: np.ndarray):
    """Pixel centres inside a polygon (even-odd rule), unwrapped coordinates.

    ``px, py`` are in pixel units where pixel ``(r, c)`` has its centre at
    ``(c, r)``. Returns row and column arrays, possibly outside the image.
    """
    x0, y0 = px, py
    x1, y1 = np.roll(px, -1), np.roll(py, -1)
    r_lo = int(np.ceil(py.min()))
    r_hi = int(np.floor(py.max()))
    if r_hi < r_lo:
        return np.zeros(0, int), np.zeros(0, int)
    rows = np.arange(r_lo, r_hi + 1)[:, None]
    # half-open rule: an edge covers y in [min, max)
    ylo = np.minimum(y0, y1)
    yhi = np.maximum(y0, y1)
    hit = (rows >= ylo) & (rows < yhi)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (rows - y0) / (y1 - y0)
        xs = np.where(hit, x0 + t * (x1 - x0), np.inf)
    xs.sort(axis=1)
    out_r, out_c = [], []
    nhit = hit.sum(axis=1)
    for i in range(len(rows)):
        k = nhit[i]
        for j in range(0, k - 1, 2):
            c0 = int(np.ceil(xs[i, j]))
            c1 = int(np.ceil(xs[i, j + 1]))
            if c1 > c0:
                out_c.append(np.arange(c0, c1))
                out_r.append(np.full(c1 - c0, rows[i, 0]))
    if not out_r:
        return np.zeros(0, int), np.zeros(0, int)
    return np.concatenate(out_r), np.concatenate(out_c)


def _flood_holes(lab: np.ndarray) -> np.ndarray:
    """Give unclaimed pixels (0) the smallest label among claimed 4-neighbours, layer by layer."""
    lab = lab.copy()
    big = np.iinfo(np.int64).max
    while np.any(lab == 0):
        filled = np.where(lab > 0, lab, big)
        best = np.full(lab.shape, big)
        for shift, axis in ((1, 0), (-1, 0), (1, 1), (-1, 1)):
            best = np.minimum(best, np.roll(filled, shift, axis=axis))
        grow = (lab == 0) & (best < big)
        if not grow.any():
            raise ReconstructionError("no claimed pixels to flood from")
        lab[grow] = best[grow]
    return lab


def graph_to_image(graph: GrainGraph, width: int, height: int) -> IndexImage:
    """Rasterise every grain as the straight-edged polygon of its junction ring."""
    if not graph.grains:
        raise ReconstructionError("graph has no grains")
    claims_p, claims_g = [], []
    cent = {}
    for gid in sorted(graph.grains):
        if graph.sides(gid) < 3:
            raise ReconstructionError(f"grain {gid} has {graph.sides(gid)} junctions; need at least 3")
        _, pts = graph.ordered_ring(gid)
        cent[gid] = pts.mean(axis=0) % 1.0
        r, c = _fill_polygon(pts[:, 0] * width - 0.5, pts[:, 1] * height - 0.5)
        if len(r) == 0:
            continue
        flat = (r % height) * width + (c % width)
        claims_p.append(np.unique(flat))
        claims_g.append(np.full(len(claims_p[-1]), gid))
    lab = np.zeros(height * width, dtype=np.int64)
    if claims_p:
        p = np.concatenate(claims_p)
        g = np.concatenate(claims_g)
        # nearest periodic centroid settles pixels claimed more than once
        _, inv, cnt = np.unique(p, return_inverse=True, return_counts=True)
        multi = cnt[inv] > 1
        lab[p[~multi]] = g[~multi]
        if multi.any():
            pm, gm = p[multi], g[multi]
            rr, cc = np.divmod(pm, width)
            pix = np.column_stack([(cc + 0.5) / width, (rr + 0.5) / height])
            cg = np.array([cent[k] for k in gm.tolist()])
            dv = min_image(cg - pix) * graph.domain.period
            dist = np.hypot(dv[:, 0], dv[:, 1])
            o = np.lexsort((gm, dist, pm))
            pm, gm = pm[o], gm[o]
            first = np.r_[True, pm[1:] != pm[:-1]]
            lab[pm[first]] = gm[first]
    lab = _flood_holes(lab.reshape(height, width))
    return IndexImage(lab.astype(np.uint32), graph.domain, graph.z)


def default_resolution(domain: DomainSpec, pixels_per_um: float = 12.5) -> tuple[int, int]:
    return max(8, round(domain.lx * pixels_per_um)), max(8, round(domain.ly * pixels_per_um))
