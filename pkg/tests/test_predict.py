import numpy as np
import pytest

from eden import nn
from eden.config import RunConfig
from eden.digraph import add_sink_loops, build_digraph
from eden.errors import ConfigError, CountError, MetricError
from eden.hkt import build_hkt
from eden.predict import (DIRECTION, EXISTENCE, LINK_C, NODE_C, WalkConfig,
                          WalkPath, accuracy, ap_score, auc_score, encode_walk,
                          evaluate, make_link_split, predict_link, predict_node,
                          propagation_graph, sample_walk, total_loss,
                          walk_moves, RepTable)
from eden.rng import stream
from eden.synth import random_digraph


@pytest.fixture
def tree_and_graph():
    g = add_sink_loops(random_digraph(12, 30, seed=2, features=4))
    tree, _ = build_hkt(g, 3)
    return g, tree


def test_walk_config_validation():
    with pytest.raises(ConfigError):
        WalkConfig(p_rw=0.0)
    with pytest.raises(ConfigError):
        WalkConfig(k=0)


def test_walk_moves_hand_normalization(tree_and_graph):
    g, tree = tree_and_graph
    # find a node with 1 parent, >=2 siblings, 0 children: a leaf
    tree.refresh_depths()
    leaf = next(l for l in tree.leaf_ids()
                if len(tree.node(tree.node(l).parent).children) >= 3)
    cfg = WalkConfig(p_rw=1.0, s_rw=2.0, c_rw=1.0)
    cands, probs = walk_moves(tree, leaf, None, cfg)
    parent = tree.node(leaf).parent
    n_sib = len(tree.node(parent).children) - 1
    weights = np.array([1.0] + [0.5] * n_sib)
    assert cands[0] == parent
    assert np.allclose(probs, weights / weights.sum())
    if n_sib == 2:
        assert probs[0] == pytest.approx(0.5)
        assert probs[1] == pytest.approx(0.25)


def test_walk_probabilities_sum_to_one_every_step(tree_and_graph):
    g, tree = tree_and_graph
    cfg = WalkConfig()
    rng = np.random.default_rng(0)
    for leaf in range(g.n):
        prev = None
        current = leaf
        for _ in range(6):
            cands, probs = walk_moves(tree, current, prev, cfg)
            assert probs.sum() == pytest.approx(1.0)
            prev, current = current, cands[int(rng.integers(len(cands)))]


def test_walk_scale_invariance(tree_and_graph):
    g, tree = tree_and_graph
    a = WalkConfig(p_rw=1.0, s_rw=2.0, c_rw=4.0)
    b = WalkConfig(p_rw=10.0, s_rw=20.0, c_rw=40.0)
    for leaf in range(g.n):
        pa = sample_walk(tree, leaf, a, seed=5)
        pb = sample_walk(tree, leaf, b, seed=5)
        assert pa.visits == pb.visits


def test_walk_parent_only_climbs_to_root(tree_and_graph):
    g, tree = tree_and_graph
    cfg = WalkConfig(p_rw=1e-9, s_rw=1e9, c_rw=1e9, k=4)
    tree.refresh_depths()
    leaf = 0
    path = sample_walk(tree, leaf, cfg, seed=1)
    # climbs straight up; at the root only child moves exist
    depth = tree.node(leaf).depth
    expected_up = min(depth, 4)
    ids = [leaf] + path.visits
    for i in range(1, expected_up + 1):
        assert tree.node(ids[i]).depth == depth - i
    cands, _ = walk_moves(tree, tree.root, ids[-2] if ids else None, cfg)
    assert all(tree.node(c).parent == tree.root for c in cands)


def test_walk_root_only_child_moves(tree_and_graph):
    g, tree = tree_and_graph
    cands, probs = walk_moves(tree, tree.root, None, WalkConfig())
    assert set(cands) == set(tree.node(tree.root).children)


def test_walk_no_backtrack_unless_forced():
    g = add_sink_loops(build_digraph(1, []))
    tree, _ = build_hkt(g, 3)
    # chain tree: every move is forced, so backtracking is permitted
    path = sample_walk(tree, 0, WalkConfig(k=4), seed=0)
    assert len(path.visits) == 4


def test_walk_determinism(tree_and_graph):
    g, tree = tree_and_graph
    a = sample_walk(tree, 3, WalkConfig(), seed=11)
    b = sample_walk(tree, 3, WalkConfig(), seed=11)
    assert a.visits == b.visits


def test_encode_walk_and_heads(tree_and_graph):
    g, tree = tree_and_graph
    dists = nn.softmax(nn.constant(stream(1, "d").normal(size=(g.n, 3))))
    reps = {n.id: nn.constant(stream(2, "r", n.id).dirichlet(np.ones(3))[None, :])
            for n in tree.nodes() if not n.is_leaf()}
    table = RepTable(dists, reps, g.n)
    k = 5
    q_rw = nn.Mlp([(k + 1) * 3, 8, 4], stream(3, "q"))
    walks = [sample_walk(tree, v, WalkConfig(k=k), seed=4) for v in range(3)]
    enc = encode_walk(walks[0], table, q_rw)
    assert enc.shape == (1, 4)
    probs = predict_node(table, walks, q_rw)
    assert probs.shape == (3, 4)
    assert np.allclose(probs.data.sum(axis=1), 1.0)
    q_link = nn.Mlp([2 * (k + 1) * 3, 8, 2], stream(5, "ql"))
    link = predict_link(table, walks, walks, q_link)
    assert np.allclose(link.data.sum(axis=1), 1.0)


def test_identical_paths_identical_encodings(tree_and_graph):
    g, tree = tree_and_graph
    dists = nn.softmax(nn.constant(stream(1, "d").normal(size=(g.n, 3))))
    reps = {n.id: nn.constant(np.full((1, 3), 1 / 3)) for n in tree.nodes()
            if not n.is_leaf()}
    table = RepTable(dists, reps, g.n)
    q_rw = nn.Mlp([6 * 3, 8, 2], stream(3, "q"))
    w = sample_walk(tree, 2, WalkConfig(), seed=9)
    assert np.array_equal(encode_walk(w, table, q_rw).data,
                          encode_walk(WalkPath(2, list(w.visits)), table, q_rw).data)


def test_encode_walk_gradient(tree_and_graph):
    g, tree = tree_and_graph
    q_rw = nn.Mlp([6 * 3, 6, 2], stream(6, "q"))
    raw = nn.parameter(stream(7, "x").normal(size=(g.n, 3)))
    reps = {n.id: nn.constant(np.full((1, 3), 1 / 3)) for n in tree.nodes()
            if not n.is_leaf()}
    walks = [sample_walk(tree, v, WalkConfig(), seed=8) for v in range(4)]
    params = [p for _, p in q_rw.parameters()] + [raw]

    def loss():
        table = RepTable(nn.softmax(raw), reps, g.n)
        return nn.cross_entropy(q_rw(table.walk_input(walks)), np.array([0, 1, 0, 1]))

    assert nn.grad_check(loss, params, max_coords=6) < 1e-4


# -- metrics -------------------------------------------------------------


def test_auc_perfect_and_random():
    labels = np.array([1, 1, 0, 0])
    assert auc_score(labels, np.array([0.9, 0.8, 0.2, 0.1])) == 1.0
    assert auc_score(labels, np.array([0.5, 0.5, 0.5, 0.5])) == 0.5
    assert ap_score(labels, np.array([0.9, 0.8, 0.2, 0.1])) == 1.0


def test_auc_single_class_undefined():
    with pytest.raises(MetricError):
        auc_score(np.array([1, 1]), np.array([0.4, 0.6]))


def test_ap_hand_value():
    # relevant items at ranks 1 and 3: AP = (1/2)*(1 + 2/3)
    labels = np.array([1, 0, 1])
    scores = np.array([0.9, 0.5, 0.3])
    assert ap_score(labels, scores) == pytest.approx((1 + 2 / 3) / 2)


def test_accuracy_and_evaluate_shapes():
    probs = np.array([[0.8, 0.2], [0.3, 0.7], [0.6, 0.4]])
    labels = np.array([0, 1, 1])
    assert accuracy(probs, labels) == pytest.approx(2 / 3)
    metrics = evaluate(probs, labels, EXISTENCE)
    assert set(metrics) == {"acc", "auc", "ap"}
    metrics_node = evaluate(probs, labels, NODE_C)
    assert set(metrics_node) == {"acc"}


# -- link splits ---------------------------------------------------------


def test_existence_split_balanced_and_leakage_free():
    g = random_digraph(30, 120, seed=6)
    split = make_link_split(g, EXISTENCE, seed=1)
    assert (split.labels == 1).sum() == (split.labels == 0).sum()
    prop = propagation_graph(g, split)
    held = {(int(u), int(v)) for u, v in split.removed_edges}
    for u, v in prop.edges():
        assert (int(u), int(v)) not in held
    # every held-out positive is a real edge of the original graph
    for u, v in split.removed_edges:
        assert g.has_edge(int(u), int(v))
    fr = [split.indices(p).size for p in ("train", "val", "test")]
    assert abs(fr[0] / len(split.pairs) - 0.8) < 0.02


def test_direction_split_single_orientation_only():
    g = random_digraph(30, 100, seed=7)
    split = make_link_split(g, DIRECTION, seed=2)
    for (a, b), label in zip(split.pairs, split.labels):
        fwd = g.has_edge(int(a), int(b))
        rev = g.has_edge(int(b), int(a))
        assert fwd != rev  # exactly one orientation exists
        assert label == int(fwd)


def test_direction_split_two_cycle_degenerate():
    g = build_digraph(2, [(0, 1), (1, 0)])
    with pytest.raises(CountError):
        make_link_split(g, DIRECTION, seed=0)


def test_linkc_split_three_balanced_classes():
    g = random_digraph(40, 160, seed=8)
    split = make_link_split(g, LINK_C, seed=3)
    counts = np.bincount(split.labels, minlength=3)
    assert counts[0] == counts[1] == counts[2] > 0
    for (a, b), label in zip(split.pairs, split.labels):
        fwd = g.has_edge(int(a), int(b))
        rev = g.has_edge(int(b), int(a))
        if label == 0:
            assert fwd and not rev
        elif label == 1:
            assert rev and not fwd
        else:
            assert not fwd and not rev


def test_split_ratio_validation_and_determinism():
    g = random_digraph(20, 60, seed=9)
    with pytest.raises(ConfigError):
        make_link_split(g, EXISTENCE, ratios=(0.5, 0.4, 0.2), seed=0)
    a = make_link_split(g, EXISTENCE, seed=4)
    b = make_link_split(g, EXISTENCE, seed=4)
    assert np.array_equal(a.pairs, b.pairs)
    assert np.array_equal(a.assign, b.assign)


# -- loss ----------------------------------------------------------------


def test_total_loss_alpha():
    ce = nn.constant([[0.7]])
    kd = nn.constant([[0.3]])
    assert total_loss(ce, kd, 0.0).item() == pytest.approx(0.7)
    assert total_loss(ce, kd, 1.0).item() == pytest.approx(1.0)
    assert total_loss(ce, kd, 0.5).item() == pytest.approx(0.85)
    with pytest.raises(ConfigError):
        total_loss(ce, kd, 1.5)


def test_total_loss_zero_when_perfect():
    ce = nn.constant([[0.0]])
    kd = nn.constant([[0.0]])
    assert total_loss(ce, kd, 0.7).item() == 0.0
