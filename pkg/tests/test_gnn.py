import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import regular_hex_graph, uniform_graph
from graingraph.errors import ContractError, NumericError, WeightLoadError
from graingraph.graph import normalize_features
from graingraph.gnn import (
    GNNPredictor,
    build_tensors,
    classify,
    expected_shapes,
    load_weights,
    lstm_step,
    random_bundle,
    regress,
    relative_offsets,
    save_weights,
    transformer_aggregate,
    zero_bundle,
)


def logit(p):
    return np.log(p) - np.log1p(-p)


@pytest.fixture(scope="module")
def graph():
    return uniform_graph(40, seed=2)


@pytest.fixture(scope="module")
def bundles():
    return random_bundle("regressor", 96, 2, seed=1), random_bundle("classifier", 96, 2, seed=2)



# -- aggregation ------------------------------------------------------------------------------


def test_relative_offset_example():
    assert relative_offsets(0.8, 0.1, 1.0) == pytest.approx(-0.3, abs=1e-15)


def test_zero_weights_give_zero_aggregate(graph):
    t = build_tensors(graph)
    w = zero_bundle("regressor", 8, 1).gate(0, "i")
    u = np.random.default_rng(0).standard_normal((len(t.vertex_ids), 20)).astype(np.float32)
    assert np.all(transformer_aggregate(u, t, w) == 0)


def test_attention_rows_sum_to_one(graph, bundles):
    t = build_tensors(graph)
    w = bundles[0].gate(0, "f")
    u = np.concatenate([t.x, np.zeros((len(t.x), 96), np.float32)], axis=1)
    _, beta = transformer_aggregate(u, t, w, return_attention=True)
    assert np.max(np.abs(beta.sum(axis=1) - 1)) <= 1e-9
    assert np.all(beta[~t.mask] == 0)


def test_isolated_vertex_keeps_self_term(graph, bundles):
    t = build_tensors(graph)
    t.mask[0] = False
    t.nbr[0] = -1
    w = bundles[0].gate(0, "o")
    u = np.concatenate([t.x, np.zeros((len(t.x), 96), np.float32)], axis=1)
    out = transformer_aggregate(u, t, w)
    np.testing.assert_allclose(out[0], u[0] @ w["W1"].T, rtol=1e-6)


# -- LSTM cell ------------------------------------------------------------------------------------


def test_zero_cell_closed_form(graph):
    t = build_tensors(graph)
    layer = {g: zero_bundle("regressor", 16, 1).gate(0, g) for g in "ifco"}
    c = np.random.default_rng(3).standard_normal((len(t.x), 16)).astype(np.float32)
    h1, c1 = lstm_step(t.x, np.zeros_like(c), c, t, layer)
    np.testing.assert_allclose(c1, 0.5 * c, rtol=1e-6)
    np.testing.assert_allclose(h1, 0.5 * np.tanh(0.5 * c), rtol=1e-6)


def test_saturated_forget_gate_keeps_cell(graph):
    t = build_tensors(graph)
    b = random_bundle("regressor", 16, 1, seed=4)
    layer = {g: dict(b.gate(0, g)) for g in "ifco"}
    layer["f"]["b"] = np.full(16, 50.0, np.float32)
    c = np.random.default_rng(5).standard_normal((len(t.x), 16)).astype(np.float32)
    h = np.zeros_like(c)
    u = np.concatenate([t.x, h], axis=1)
    i = 1 / (1 + np.exp(-(transformer_aggregate(u, t, layer["i"]) + layer["i"]["b"])))
    cand = np.tanh(transformer_aggregate(u, t, layer["c"]) + layer["c"]["b"])
    _, c1 = lstm_step(t.x, h, c, t, layer)
    np.testing.assert_allclose(c1, c + i * cand, atol=1e-5)


def test_non_finite_gate_is_named(graph):
    t = build_tensors(graph)
    layer = {g: dict(zero_bundle("regressor", 8, 1).gate(0, g)) for g in "ifco"}
    layer["c"]["b"] = np.full(8, np.nan, np.float32)
    with pytest.raises(NumericError, match="gate c"):
        lstm_step(t.x, np.zeros((len(t.x), 8)), np.zeros((len(t.x), 8)), t, layer)


# -- decoders --------------------------------------------------------------------------------------------


def test_decoder_bias_closed_forms(graph):
    b = zero_bundle("regressor", 96, 2)
    b.tensors["decoder.hx.b"][:] = 0.3
    b.tensors["decoder.hv.b"][:] = -1.0
    r = regress(normalize_features(graph), graph, b)
    assert np.all(r.dx == np.tanh(np.float64(np.float32(0.3))))
    assert np.all(r.v == 0) and np.all(r.dy == 0) and np.all(r.ds == 0)


def test_zero_classifier_gives_one_half(graph):
    p = classify(normalize_features(graph), graph, zero_bundle("classifier"))
    assert np.all(p == 0.5) and len(p) == graph.n_e_jj()


def test_classifier_bias_shifts_every_logit(graph, bundles):
    fs = normalize_features(graph)
    cls = bundles[1]
    p0 = classify(fs, graph, cls)
    shifted = random_bundle("classifier", 96, 2, seed=2)
    shifted.tensors["decoder.hc.b"] = shifted.tensors["decoder.hc.b"] + np.float32(0.25)
    p1 = classify(fs, graph, shifted)
    np.testing.assert_allclose(logit(p1) - logit(p0), 0.25, atol=1e-6)


def test_lattice_translates_share_probabilities():
    g = regular_hex_graph()
    fs = normalize_features(g)
    p = classify(fs, g, random_bundle("classifier", 32, 2, seed=9))
    classes = {}
    for (a, b), pe in zip(fs.jj_edges.tolist(), p):
        d = g.displacement(a, b)
        key = (round(d[0], 6), round(d[1], 6))
        classes.setdefault(key, []).append(pe)
    assert len(classes) < len(p)
    for vals in classes.values():
        assert np.ptp(vals) <= 1e-9


def test_tag_mismatch_is_a_contract_error(graph, bundles):
    fs = normalize_features(graph)
    with pytest.raises(ContractError):
        regress(fs, graph, bundles[1])
    with pytest.raises(ContractError):
        classify(fs, graph, bundles[0])
    with pytest.raises(ContractError):
        GNNPredictor(bundles[1], bundles[0])


# -- invariances ---------------------------------------------------------------------------------------------


@given(st.floats(0, 1, exclude_max=True), st.floats(0, 1, exclude_max=True))
def test_translation_invariance(tx, ty):
    g = uniform_graph(30, seed=6)
    reg, cls = random_bundle("regressor", 32, 2, seed=1), random_bundle("classifier", 32, 2, seed=2)
    r0, p0 = regress(normalize_features(g), g, reg), classify(normalize_features(g), g, cls)
    for j in g.junctions.values():
        j.pos = ((j.pos[0] + tx) % 1.0, (j.pos[1] + ty) % 1.0)
    fs = normalize_features(g)
    r1, p1 = regress(fs, g, reg), classify(fs, g, cls)
    for a, b in [(r0.dx, r1.dx), (r0.dy, r1.dy), (r0.ds, r1.ds), (r0.v, r1.v), (p0, p1)]:
        assert np.max(np.abs(a - b)) <= 1e-6


@given(st.integers(0, 2**31))
def test_permutation_equivariance_is_exact(seed):
    g = uniform_graph(25, seed=3)
    fs = normalize_features(g)
    reg, cls = random_bundle("regressor", 24, 2, seed=5), random_bundle("classifier", 24, 2, seed=6)
    order = np.random.default_rng(seed).permutation(g.n_junctions + g.n_grains)
    a, b = regress(fs, g, reg), regress(fs, g, reg, order=order)
    for x, y in [(a.dx, b.dx), (a.dy, b.dy), (a.ds, b.ds), (a.v, b.v)]:
        assert np.array_equal(x, y)
    assert np.array_equal(classify(fs, g, cls), classify(fs, g, cls, order=order))


@given(st.integers(0, 1000), st.floats(0.1, 20))
def test_output_ranges(seed, scale):
    g = uniform_graph(20 + seed % 20, seed=seed % 7) if seed % 7 else uniform_graph(30, 1)
    fs = normalize_features(g)
    r = regress(fs, g, random_bundle("regressor", 16, 2, seed=seed, scale=scale))
    p = classify(fs, g, random_bundle("classifier", 16, 2, seed=seed + 1, scale=scale))
    assert np.all(np.abs(np.r_[r.dx, r.dy, r.ds]) <= 1) and np.all(r.v >= 0)
    assert np.all((p >= 0) & (p <= 1))


def test_runs_are_bitwise_reproducible(graph, bundles):
    fs = normalize_features(graph)
    a, b = regress(fs, graph, bundles[0]), regress(fs, graph, bundles[0])
    assert a.dx.tobytes() == b.dx.tobytes() and a.v.tobytes() == b.v.tobytes()


# -- weight files -----------------------------------------------------------------------------------------------


def test_parameter_count_matches_layout():
    b = zero_bundle("regressor", 96, 2)
    d = 96
    per_layer = [4 * (4 * d * (12 + d) + 2 * d), 4 * (4 * d * (2 * d) + 2 * d)]
    assert b.n_params == sum(per_layer) + 4 * (d + 1)
    assert b.n_params == sum(int(np.prod(s)) for s in expected_shapes("regressor", 96, 2).values())


def test_weight_files_round_trip(tmp_path, bundles):
    reg = bundles[0]
    save_weights(reg, tmp_path / "m.json", tmp_path / "w.bin")
    back = load_weights(tmp_path / "m.json", tmp_path / "w.bin")
    assert back.tag == "regressor" and back.hidden_dim == 96 and back.layers == 2
    save_weights(back, tmp_path / "m2.json", tmp_path / "w2.bin")
    assert (tmp_path / "m.json").read_bytes() == (tmp_path / "m2.json").read_bytes()
    assert (tmp_path / "w.bin").read_bytes() == (tmp_path / "w2.bin").read_bytes()


def test_truncated_blob_and_bad_names(tmp_path, bundles):
    save_weights(bundles[1], tmp_path / "m.json", tmp_path / "w.bin")
    blob = (tmp_path / "w.bin").read_bytes()
    (tmp_path / "short.bin").write_bytes(blob[:-8])
    with pytest.raises(WeightLoadError, match="truncated"):
        load_weights(tmp_path / "m.json", tmp_path / "short.bin")
    m = json.loads((tmp_path / "m.json").read_text())
    m["tensors"][0]["name"] = "layer0.gatez.W1"
    (tmp_path / "bad.json").write_text(json.dumps(m))
    with pytest.raises(WeightLoadError, match="gatez"):
        load_weights(tmp_path / "bad.json", tmp_path / "w.bin")
    m = json.loads((tmp_path / "m.json").read_text())
    m["hidden_dim"] = 64
    (tmp_path / "d.json").write_text(json.dumps(m))
    with pytest.raises(WeightLoadError):
        load_weights(tmp_path / "d.json", tmp_path / "w.bin")
