"""Forward pass of the graph-transformer LSTM regressor and classifier.

Every vertex (junction or grain) becomes a 12-wide input row: its feature
vector zero-padded to 11 entries plus a kind flag (0 junction, 1 grain).
A vertex sees its own row with x and y zeroed; a neighbour's row carries
the periodic offset to that neighbour instead, so the network never sees
absolute in-plane positions.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ContractError, InputError, NumericError, WeightLoadError
from .graph import FeatureSet, GrainGraph, normalize_features

INPUT_WIDTH = 12
GATES = ("i", "f", "c", "o")
MANIFEST_VERSION = 1
_DECODERS = {
    "regressor": {"hx": 1, "hy": 1, "hs": 1, "hv": 1},
    "classifier": {"hc": 2},
}
_NAME = re.compile(r"^(layer(\d+)\.gate([ifco])\.(W[1-5]|b)|decoder\.(hx|hy|hs|hv|hc)\.(W|b))$")


@dataclass
class WeightBundle:
    tag: str
    hidden_dim: int
    layers: int
    tensors: dict  # name -> float32 array

    def __post_init__(self):
        if self.tag not in _DECODERS:
            raise WeightLoadError(f"unknown model tag {self.tag!r}")
        expected = expected_shapes(self.tag, self.hidden_dim, self.layers)
        for name, shape in expected.items():
            if name not in self.tensors:
                raise WeightLoadError(f"missing tensor {name}")
            t = np.asarray(self.tensors[name], dtype=np.float32)
            if t.shape != shape:
                raise WeightLoadError(f"tensor {name} has shape {t.shape}, expected {shape}")
            self.tensors[name] = t
        extra = set(self.tensors) - set(expected)
        if extra:
            raise WeightLoadError(f"unknown tensor {sorted(extra)[0]}")

    @property
    def n_params(self) -> int:
        return int(sum(t.size for t in self.tensors.values()))

    def gate(self, layer: int, g: str) -> dict:
        p = f"layer{layer}.gate{g}."
        return {k: self.tensors[p + k] for k in ("W1", "W2", "W3", "W4", "W5", "b")}


def layer_input_width(layer: int, d: int) -> int:
    return (INPUT_WIDTH if layer == 0 else d) + d


def expected_shapes(tag: str, d: int, layers: int) -> dict:
    out = {}
    for layer in range(layers):
        u = layer_input_width(layer, d)
        for g in GATES:
            p = f"layer{layer}.gate{g}."
            for w in ("W1", "W2", "W4", "W5"):
                out[p + w] = (d, u)
            out[p + "W3"] = (d, 1)
            out[p + "b"] = (d,)
    for name, mult in _DECODERS[tag].items():
        out[f"decoder.{name}.W"] = (1, mult * d + (1 if name == "hc" else 0))
        out[f"decoder.{name}.b"] = (1,)
    return out


def random_bundle(tag: str, hidden_dim: int = 96, layers: int = 2, seed: int = 0, scale: float = 1.0) -> WeightBundle:
    """Glorot-style random weights; handy for tests and smoke runs."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in expected_shapes(tag, hidden_dim, layers).items():
        fan = shape[-1] if len(shape) > 1 else shape[0]
        tensors[name] = (scale * rng.standard_normal(shape) / np.sqrt(fan)).astype(np.float32)
    return WeightBundle(tag, hidden_dim, layers, tensors)


def zero_bundle(tag: str, hidden_dim: int = 96, layers: int = 2) -> WeightBundle:
    shapes = expected_shapes(tag, hidden_dim, layers)
    return WeightBundle(tag, hidden_dim, layers, {k: np.zeros(s, np.float32) for k, s in shapes.items()})


# -- serialisation ------------------------------------------------------------


def save_weights(bundle: WeightBundle, manifest_path, blob_path) -> None:
    records, chunks, offset = [], [], 0
    for name in sorted(bundle.tensors):
        t = np.ascontiguousarray(bundle.tensors[name], dtype="<f4")
        records.append({"name": name, "shape": list(t.shape), "dtype": "f32", "byte_offset": offset})
        chunks.append(t.tobytes())
        offset += t.nbytes
    manifest = {
        "format_version": MANIFEST_VERSION,
        "model": bundle.tag,
        "hidden_dim": bundle.hidden_dim,
        "layers": bundle.layers,
        "tensors": records,
    }
    Path(manifest_path).write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    Path(blob_path).write_bytes(b"".join(chunks))


def load_weights(manifest_path, blob_path) -> WeightBundle:
    try:
        manifest = json.loads(Path(manifest_path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise WeightLoadError(f"{manifest_path}: unreadable manifest ({exc})") from exc
    blob = Path(blob_path).read_bytes()
    if manifest.get("format_version") != MANIFEST_VERSION:
        raise WeightLoadError(f"unsupported manifest version {manifest.get('format_version')!r}")
    tensors = {}
    layers_seen = set()
    for rec in manifest.get("tensors", []):
        name = rec["name"]
        m = _NAME.match(name)
        if not m:
            raise WeightLoadError(f"unknown tensor name {name}")
        if m.group(2) is not None:
            layers_seen.add(int(m.group(2)))
        if rec.get("dtype", "f32") != "f32":
            raise WeightLoadError(f"tensor {name}: dtype {rec['dtype']} unsupported")
        shape = tuple(int(s) for s in rec["shape"])
        start = int(rec["byte_offset"])
        stop = start + 4 * int(np.prod(shape))
        if stop > len(blob):
            raise WeightLoadError(f"tensor {name}: blob truncated ({len(blob)} bytes, need {stop})")
        tensors[name] = np.frombuffer(blob, dtype="<f4", count=stop // 4 - start // 4, offset=start).reshape(shape).astype(np.float32)
    d = int(manifest.get("hidden_dim", 0))
    layers = int(manifest.get("layers", 0))
    if layers_seen and layers_seen != set(range(layers)):
        raise WeightLoadError(f"manifest says {layers} layers, tensors cover {sorted(layers_seen)}")
    b0 = tensors.get("layer0.gatei.b")
    if b0 is not None and b0.shape != (d,):
        raise WeightLoadError(f"tensor layer0.gatei.b implies hidden size {b0.shape[0]}, manifest says {d}")
    return WeightBundle(manifest.get("model", ""), d, layers, tensors)


# -- graph tensors --------------------------------------------------------------


@dataclass
class GraphTensors:
    """Padded neighbour tables for one layer, rows in ``order``."""

    vertex_ids: list  # ("j", id) / ("g", id) per row
    n_junctions: int
    x: np.ndarray  # (n, 12) float32, x and y zeroed
    nbr: np.ndarray  # (n, m) row indices, -1 = padding
    mask: np.ndarray  # (n, m) bool
    rel: np.ndarray  # (n, m, 2) periodic offsets, feature units
    length: np.ndarray  # (n, m) edge lengths, feature units
    row_of: dict


def relative_offsets(xk, xi, period) -> np.ndarray:
    d = np.asarray(xk, dtype=float) - np.asarray(xi, dtype=float)
    return d - period * np.rint(d / period)


def build_tensors(graph: GrainGraph, fs: FeatureSet | None = None, order=None) -> GraphTensors:
    """Input rows and neighbour tables; ``order`` permutes the row layout."""
    fs = fs or normalize_features(graph)
    nj, ng = len(fs.junction_ids), len(fs.grain_ids)
    n = nj + ng
    x = np.zeros((n, INPUT_WIDTH))
    x[:nj, :8] = fs.junction
    x[nj:, :11] = fs.grain
    x[nj:, 11] = 1.0
    vids = [("j", int(j)) for j in fs.junction_ids] + [("g", int(g)) for g in fs.grain_ids]
    perm = np.arange(n) if order is None else np.asarray(order)
    if sorted(perm.tolist()) != list(range(n)):
        raise InputError("order must be a permutation of the vertex rows")
    x = x[perm]
    vids = [vids[i] for i in perm]
    row_of = {v: r for r, v in enumerate(vids)}
    xy = x[:, :2].copy()
    x[:, :2] = 0.0

    src, dst, ln = [], [], []
    for (a, b), l in zip(fs.jj_edges.tolist(), fs.jj_length.tolist()):
        ra, rb = row_of[("j", a)], row_of[("j", b)]
        src += [ra, rb]
        dst += [rb, ra]
        ln += [l, l]
    for (j, g), l in zip(fs.jg_edges.tolist(), fs.jg_length.tolist()):
        ra, rb = row_of[("j", j)], row_of[("g", g)]
        src += [ra, rb]
        dst += [rb, ra]
        ln += [l, l]
    src = np.asarray(src, dtype=np.int64)
    dst = np.asarray(dst, dtype=np.int64)
    ln = np.asarray(ln, dtype=float)
    deg = np.bincount(src, minlength=n) if len(src) else np.zeros(n, int)
    m = max(1, int(deg.max()) if n else 1)
    o = np.lexsort((dst, src))
    src, dst, ln = src[o], dst[o], ln[o]
    start = np.r_[0, np.cumsum(deg)[:-1]]
    slot = np.arange(len(src)) - start[src]
    nbr = np.full((n, m), -1, dtype=np.int64)
    length = np.zeros((n, m))
    nbr[src, slot] = dst
    length[src, slot] = ln
    mask = nbr >= 0
    rel = np.zeros((n, m, 2))
    if len(src):
        rel[src, slot] = relative_offsets(xy[dst], xy[src], fs.domain.period)
    return GraphTensors(vids, nj, x.astype(np.float32), nbr, mask, rel, length, row_of)


# -- layers ----------------------------------------------------------------------


def _sorted_sum(a: np.ndarray, axis: int) -> np.ndarray:
    """Sum after sorting, so the result ignores the order of the terms."""
    return np.sort(a, axis=axis).sum(axis=axis)


def transformer_aggregate(u: np.ndarray, t: GraphTensors, w: dict, rel: bool = True, return_attention: bool = False):
    """Attention-weighted neighbour aggregation of one gate.

    ``u`` holds the self inputs (n, U); a neighbour input is the
    neighbour's self row plus the periodic offset in its first two slots
    when ``rel`` is set.
    """
    u = np.asarray(u, dtype=np.float32)
    w1, w2, w3, w4, w5 = (np.asarray(w[k], dtype=np.float32) for k in ("W1", "W2", "W3", "W4", "W5"))
    if u.shape[1] != w1.shape[1]:
        raise InputError(f"input width {u.shape[1]} does not match weights ({w1.shape[1]})")
    d = w1.shape[0]
    s = (u @ w1.T).astype(np.float64)
    q = (u @ w4.T).astype(np.float64)
    k_base = (u @ w5.T).astype(np.float64)
    v_base = (u @ w2.T).astype(np.float64)
    nbr = np.where(t.mask, t.nbr, 0)
    e = t.length[..., None] * w3[:, 0].astype(np.float64)
    keys = k_base[nbr] + e
    vals = v_base[nbr] + e
    if rel:
        keys += t.rel @ w5[:, :2].T.astype(np.float64)
        vals += t.rel @ w2[:, :2].T.astype(np.float64)
    score = (q[:, None, :] * keys).sum(-1) / np.sqrt(d)
    score = np.where(t.mask, score, -np.inf)
    top = score.max(axis=1, keepdims=True)
    top = np.where(np.isfinite(top), top, 0.0)
    ex = np.where(t.mask, np.exp(score - top), 0.0)
    den = _sorted_sum(ex, axis=1)[:, None]
    beta = np.divide(ex, den, out=np.zeros_like(ex), where=den > 0)
    agg = _sorted_sum(beta[..., None] * vals, axis=1)
    out = s + agg
    return (out, beta) if return_attention else out


def _sigmoid(a):
    return 0.5 * (1.0 + np.tanh(0.5 * a))


def lstm_step(x: np.ndarray, h: np.ndarray, c: np.ndarray, t: GraphTensors, layer: dict, rel: bool = True):
    """One graph-LSTM cell: returns (H', C')."""
    u = np.concatenate([np.asarray(x, np.float32), np.asarray(h, np.float32)], axis=1)
    pre = {}
    for g in GATES:
        pre[g] = transformer_aggregate(u, t, layer[g], rel=rel) + layer[g]["b"].astype(np.float64)
        if not np.all(np.isfinite(pre[g])):
            raise NumericError(f"non-finite values in gate {g}")
    i = _sigmoid(pre["i"])
    f = _sigmoid(pre["f"])
    o = _sigmoid(pre["o"])
    cand = np.tanh(pre["c"])
    c_new = f * np.asarray(c, np.float64) + i * cand
    h_new = o * np.tanh(c_new)
    if not (np.all(np.isfinite(c_new)) and np.all(np.isfinite(h_new))):
        raise NumericError("non-finite cell state")
    return h_new.astype(np.float32), c_new.astype(np.float32)


def encode(t: GraphTensors, bundle: WeightBundle, state=None):
    """Run the stacked cells once; returns (top H, per-layer states)."""
    n = len(t.vertex_ids)
    d = bundle.hidden_dim
    state = state or [(np.zeros((n, d), np.float32), np.zeros((n, d), np.float32)) for _ in range(bundle.layers)]
    x = t.x
    new_state = []
    for layer in range(bundle.layers):
        weights = {g: bundle.gate(layer, g) for g in GATES}
        h, c = lstm_step(x, state[layer][0], state[layer][1], t, weights, rel=(layer == 0))
        new_state.append((h, c))
        x = h
    return x, new_state


def _linear(h, bundle, name):
    w = bundle.tensors[f"decoder.{name}.W"].astype(np.float64)
    b = bundle.tensors[f"decoder.{name}.b"].astype(np.float64)
    return h.astype(np.float64) @ w[0] + b[0]


@dataclass
class Regression:
    junction_ids: np.ndarray
    dx: np.ndarray  # feature units
    dy: np.ndarray
    grain_ids: np.ndarray
    ds: np.ndarray
    v: np.ndarray


def regress(fs: FeatureSet, graph: GrainGraph, bundle: WeightBundle, order=None) -> Regression:
    if bundle.tag != "regressor":
        raise ContractError(f"regress needs a regressor bundle, got {bundle.tag!r}")
    t = build_tensors(graph, fs, order)
    h, _ = encode(t, bundle)
    jrows = np.array([t.row_of[("j", int(j))] for j in fs.junction_ids], dtype=np.int64)
    grows = np.array([t.row_of[("g", int(g))] for g in fs.grain_ids], dtype=np.int64)
    hj, hg = h[jrows], h[grows]
    return Regression(
        fs.junction_ids.copy(),
        np.tanh(_linear(hj, bundle, "hx")),
        np.tanh(_linear(hj, bundle, "hy")),
        fs.grain_ids.copy(),
        np.tanh(_linear(hg, bundle, "hs")),
        np.maximum(_linear(hg, bundle, "hv"), 0.0),
    )


def classify(fs: FeatureSet, graph: GrainGraph, bundle: WeightBundle, order=None) -> np.ndarray:
    """Switch probability of each e_jj edge, in ``fs.jj_edges`` order."""
    if bundle.tag != "classifier":
        raise ContractError(f"classify needs a classifier bundle, got {bundle.tag!r}")
    t = build_tensors(graph, fs, order)
    h, _ = encode(t, bundle)
    if len(fs.jj_edges) == 0:
        return np.zeros(0)
    lo = np.array([t.row_of[("j", int(a))] for a in fs.jj_edges[:, 0]])
    hi = np.array([t.row_of[("j", int(b))] for b in fs.jj_edges[:, 1]])
    feat = np.concatenate([h[lo], h[hi], fs.jj_length[:, None].astype(np.float32)], axis=1)
    return _sigmoid(_linear(feat, bundle, "hc"))


class GNNPredictor:
    """Predictor backed by a regressor and a classifier bundle."""

    def __init__(self, regressor: WeightBundle, classifier: WeightBundle):
        if regressor.tag != "regressor" or classifier.tag != "classifier":
            raise ContractError("need one regressor and one classifier bundle")
        self.regressor = regressor
        self.classifier = classifier

    def __call__(self, graph: GrainGraph, fs: FeatureSet):
        from .evolution import Prediction

        r = regress(fs, graph, self.regressor)
        p = classify(fs, graph, self.classifier)
        return Prediction(r.junction_ids, np.column_stack([r.dx, r.dy]), r.grain_ids, r.ds, r.v, fs.jj_edges, p)
