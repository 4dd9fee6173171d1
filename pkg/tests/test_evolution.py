import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import regular_hex_graph, ring_graph, uniform_graph
from graingraph.errors import ConfigError, ContractError, DegenerateCollapseError
from graingraph.graph import graph_to_dict, normalize_features, validate
from graingraph.evolution import (
    BaselinePredictor,
    Prediction,
    Thresholds,
    identity_predict,
    rollout,
    update_graph,
)
from graingraph.substrate import periodic_voronoi, sample_orientations


def with_changes(grain_ds=None, edge_p=None, **over):
    """Identity predictor with selected grain/edge outputs overridden."""

    def predict(graph, fs):
        pred = identity_predict(graph, fs)
        for gid, d in (grain_ds or {}).items():
            pred.ds[list(fs.grain_ids).index(gid)] = d
        edges = [tuple(e) for e in fs.jj_edges.tolist()]
        for e, pe in (edge_p or {}).items():
            pred.p[edges.index(e)] = pe
        for k, v in over.items():
            setattr(pred, k, v(pred) if callable(v) else v)
        return pred

    return predict


def topology(g):
    return sorted(j.triplet for j in g.junctions.values()), {k: set(v) for k, v in g.adj.items()}


# -- single update ------------------------------------------------------------------------


def test_identity_update_changes_nothing(random30):
    fs = normalize_features(random30)
    g, fs2, elog = update_graph(random30, fs, identity_predict, dz=2.0)
    assert elog.records == []
    assert topology(g) == topology(random30)
    assert {k: j.pos for k, j in g.junctions.items()} == {k: j.pos for k, j in random30.junctions.items()}
    assert g.z == random30.z + 2.0
    np.testing.assert_array_equal(fs2.grain[:, 3], fs.grain[:, 3])


def test_input_graph_is_not_mutated(random30):
    before = graph_to_dict(random30)
    update_graph(random30, normalize_features(random30), BaselinePredictor(c3=20.0), dz=1.0)
    assert graph_to_dict(random30) == before


def test_shrinking_three_sided_grain_is_removed():
    g = ring_graph(3)
    fs = normalize_features(g)
    area = g.grains[1].area
    out, _, elog = update_graph(g, fs, with_changes(grain_ds={1: -area - 1e-5}))
    assert elog.count("flip") == 1 and elog.count("remove") == 1
    assert elog.eliminated() == [1]
    assert 1 not in out.grains
    assert (out.n_grains, out.n_junctions) == (g.n_grains - 1, g.n_junctions - 2)
    assert validate(out) == []


@pytest.mark.parametrize("n", [4, 5, 7])
def test_shrinking_n_sided_grain_takes_n_minus_two_flips(n):
    g = ring_graph(n)
    area = g.grains[1].area
    out, _, elog = update_graph(g, normalize_features(g), with_changes(grain_ds={1: -area}))
    assert elog.eliminated() == [1]
    assert elog.count("flip") >= n - 2
    assert validate(out) == []


def test_edge_events_run_in_descending_probability(random30):
    fs = normalize_features(random30)
    edges = [tuple(e) for e in fs.jj_edges.tolist()]
    a = edges[0]
    b = next(e for e in edges if e != a and set(e) & set(a))
    out, _, elog = update_graph(random30, fs, with_changes(edge_p={a: 0.8, b: 0.95}))
    kinds = [(r["kind"], tuple(r["ids"])) for r in elog.records]
    first = next(k for k in kinds if k[0] in ("flip", "skip"))
    assert first[1] == b
    # the weaker event shares a junction that no longer exists
    assert ("stale", a) in kinds or ("skip", a) in kinds
    assert validate(out) == []


def test_probabilities_at_threshold_do_not_fire(random30):
    fs = normalize_features(random30)
    e = tuple(fs.jj_edges[0].tolist())
    _, _, elog = update_graph(random30, fs, with_changes(edge_p={e: 0.6}))
    assert elog.records == []


# -- contracts ------------------------------------------------------------------------------------


@pytest.mark.parametrize(
    "override",
    [
        {"dpos": lambda pr: pr.dpos[:-1]},
        {"p": lambda pr: pr.p + 1.5},
        {"v": lambda pr: pr.v - 1.0},
        {"ds": lambda pr: np.full_like(pr.ds, np.nan)},
        {"dpos": lambda pr: pr.dpos + 2.0},
    ],
)
def test_bad_predictor_output_is_a_contract_error(random30, override):
    with pytest.raises(ContractError):
        update_graph(random30, normalize_features(random30), with_changes(**override))


def test_thresholds_and_rollout_arguments_are_checked(random30):
    with pytest.raises(ConfigError):
        Thresholds(eps_edge=1.0)
    with pytest.raises(ConfigError):
        Thresholds(eps_grain=0.0)
    with pytest.raises(ConfigError):
        rollout(random30, None, identity_predict, 1)
    with pytest.raises(ConfigError):
        rollout(random30, None, identity_predict, 5, dz=0.0)


def test_tiny_graph_is_a_degenerate_collapse():
    g = periodic_voronoi(np.array([[0.25, 0.25], [0.75, 0.75]]), np.eye(3)[:2])
    with pytest.raises(DegenerateCollapseError):
        update_graph(g, normalize_features(g), identity_predict)


def test_mass_shrinkage_keeps_graphs_valid():
    g = uniform_graph(40, seed=1)

    def everything_shrinks(graph, fs):
        pred = identity_predict(graph, fs)
        pred.ds = -fs.grain[:, 3].copy()
        return pred

    traj = rollout(g, None, everything_shrinks, 3, dz=1.0)
    assert traj.error is None or isinstance(traj.error, DegenerateCollapseError)
    assert all(validate(x) == [] for x in traj.graphs)
    assert traj.graphs[-1].n_grains < g.n_grains


# -- baseline predictor ------------------------------------------------------------------------------


def test_baseline_on_regular_hex_is_neutral():
    g = regular_hex_graph()
    fs = normalize_features(g)
    pred = BaselinePredictor()(g, fs)
    assert np.max(np.abs(pred.dpos)) <= 1e-12
    assert np.max(np.abs(pred.ds)) <= 1e-15
    assert np.ptp(pred.p) <= 1e-12


def test_baseline_shrinks_grains_with_few_sides():
    g = ring_graph(5)
    fs = normalize_features(g)
    pred = BaselinePredictor(c2=0.0)(g, fs)
    ds = dict(zip(fs.grain_ids.tolist(), pred.ds))
    assert ds[1] < 0
    big = ring_graph(8)
    fs = normalize_features(big)
    assert dict(zip(fs.grain_ids.tolist(), BaselinePredictor(c2=0.0)(big, fs).ds))[1] > 0


def test_baseline_favours_aligned_grains():
    ori = sample_orientations(16, np.random.default_rng(4))
    ori[5] = (0.0, 0.0, 1.0)
    g = regular_hex_graph(orientations=ori)
    fs = normalize_features(g)
    ds = BaselinePredictor()(g, fs).ds
    assert int(fs.grain_ids[np.argmax(ds)]) == 6


def test_baseline_prefers_short_edges(random30):
    fs = normalize_features(random30)
    p = BaselinePredictor()(random30, fs).p
    order = np.argsort(fs.jj_length, kind="stable")
    assert np.all(np.diff(p[order]) <= 1e-15)


@given(st.sampled_from([0, 1, 2, 3]))
def test_baseline_rollout_stays_valid(seed):
    g0 = uniform_graph(60, seed)
    sizes = []

    def watch(step, g, elog):
        assert validate(g) == []
        sizes.append(g.n_grains)

    traj = rollout(g0, None, BaselinePredictor(c1=0.02), 8, dz=2.0, on_layer=watch)
    assert traj.error is None and len(traj.graphs) == 8
    assert all(a >= b for a, b in zip(sizes, sizes[1:]))
    counts = traj.eliminated_counts()
    assert counts[0] == 0 and counts == sorted(counts)
    assert counts[-1] == g0.n_grains - traj.graphs[-1].n_grains
    assert traj.heights == pytest.approx([2.0 * k for k in range(8)])


def test_rollout_is_deterministic():
    g0 = uniform_graph(50, 5)
    a = rollout(g0, None, BaselinePredictor(), 6, dz=2.0)
    b = rollout(g0, None, BaselinePredictor(), 6, dz=2.0)
    assert [graph_to_dict(x) for x in a.graphs] == [graph_to_dict(x) for x in b.graphs]
    assert [x.records for x in a.logs] == [x.records for x in b.logs]


def test_prediction_type_is_plain_arrays(random30):
    pred = identity_predict(random30, normalize_features(random30))
    assert isinstance(pred, Prediction) and pred.dpos.shape == (random30.n_junctions, 2)
