import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from topology import span_equal, span_report
from tagpose.diffcore.networks import TagNetworks
from tagpose.losses import LossWeights
from tagpose.taggraph import (
    AFL, ALIGNMENT, ALIGNMENT_SPECS, BCL, FORWARD, Edge, NodeError, build_tag, enumerate_closed_loops,
    loop_gradient_audit, parameter_groups, tag_structure,
)
from tagpose.trainer import scene_batch

LOSS_PAIRS = {frozenset(p) for p in [("2D:p", "3D:p"), ("2D:kp3", "3D:kp3"), ("3D:kp3", "2D:kp3_fk"),
                                     ("2D:kp2", "2D:kp2_proj"), ("3D:pts_fk", "3D:pts_unproj"),
                                     ("3D:pts_unproj", "2D:pts_fk")]}


@pytest.fixture(scope="module")
def built(robot, scenes):
    nets = TagNetworks(robot.n_joints, robot.n_keypoints, seed=0)
    images, K = scene_batch(scenes[:2])
    return build_tag(robot, nets, images, K), nets


def test_canonical_counts():
    g = tag_structure()
    assert len(g.nodes) == 18
    assert len(g.forward_edges()) == 29
    assert len(g.alignment_edges()) == 10
    assert len(g.loss_edges()) == 6
    assert {frozenset((e.u, e.v)) for e in g.loss_edges()} == LOSS_PAIRS


def test_nodes_unique_and_no_self_edges():
    g = tag_structure()
    assert len({(n.branch, n.kind) for n in g.nodes.values()}) == len(g.nodes)
    assert all(e.u != e.v for e in g.edges)
    assert len({e.key for e in g.edges}) == len(g.edges)


def test_extra_alignments_flag():
    assert len(tag_structure(extra_alignments=True).alignment_edges()) == 13


def test_triangle_gives_one_forward_loop():
    edges = [Edge("a", "b", FORWARD), Edge("b", "c", FORWARD), Edge("c", "a", ALIGNMENT, term="t")]
    loops = enumerate_closed_loops((["a", "b", "c"], edges), virtual=None, root="a")
    assert len(loops) == 1 and loops[0].kind == AFL and len(loops[0]) == 3


def test_path_between_backbones_gives_one_line():
    edges = [Edge("2D:f", "x", FORWARD), Edge("x", "y", ALIGNMENT), Edge("y", "3D:D", FORWARD)]
    loops = enumerate_closed_loops((["2D:f", "x", "y", "3D:D"], edges))
    assert len(loops) == 1
    loop = loops[0]
    assert loop.kind == BCL
    assert {loop.nodes[0], loop.nodes[-1]} == {"2D:f", "3D:D"}
    assert len(loop.edges) == 3


def test_disconnected_graph_reports_per_component():
    edges = [Edge("a", "b", FORWARD), Edge("b", "c", FORWARD), Edge("c", "a", ALIGNMENT),
             Edge("x", "y", FORWARD), Edge("y", "z", FORWARD), Edge("z", "x", ALIGNMENT)]
    loops = enumerate_closed_loops((["a", "b", "c", "x", "y", "z"], edges), virtual=None, root="a")
    assert sorted(l.component for l in loops) == [0, 1]


def test_every_loop_has_one_alignment_edge():
    for loop in enumerate_closed_loops(tag_structure()):
        assert sum(e.cls == ALIGNMENT for e in loop.edges) == 1
        if loop.kind == AFL:
            assert loop.nodes[0] in (loop.edges[0].u, loop.edges[0].v)
            assert loop.nodes[0] in (loop.edges[-1].u, loop.edges[-1].v)
        else:
            assert (loop.nodes[0], loop.nodes[-1]) == ("3D:D", "2D:f")


def test_loop_basis_spans_brute_force_cycles():
    g = tag_structure()
    report = span_report(g, enumerate_closed_loops(g))
    assert span_equal(report), report


def test_loop_basis_with_extra_alignments():
    g = tag_structure(extra_alignments=True)
    report = span_report(g, enumerate_closed_loops(g))
    assert span_equal(report), report


def test_all_loss_pairs_covered():
    loops = enumerate_closed_loops(tag_structure())
    assert LOSS_PAIRS <= {frozenset((l.alignment.u, l.alignment.v)) for l in loops}


def test_removing_joint_alignment_drops_joint_loop():
    full = enumerate_closed_loops(tag_structure())
    cut = enumerate_closed_loops(tag_structure(drop_alignments=[("2D:p", "3D:p")]))
    assert len(tag_structure(drop_alignments=[("2D:p", "3D:p")]).alignment_edges()) == 9
    lost = {l.alignment.key for l in full} - {l.alignment.key for l in cut}
    assert lost == {("2D:p", "3D:p")}
    assert len(cut) == len(full) - 1


@settings(max_examples=25, deadline=None)
@given(st.lists(st.booleans(), min_size=39, max_size=39))
def test_loops_invariant_to_endpoint_order(flips):
    g = tag_structure()
    flipped = [Edge(e.v, e.u, e.cls, e.mechanism, e.term, e.group) if f else e for e, f in zip(g.edges, flips)]
    nodes = list(g.nodes)
    a = sorted((l.kind, l.alignment.key, l.cycle) for l in enumerate_closed_loops((nodes, g.edges)))
    b = sorted((l.kind, l.alignment.key, l.cycle) for l in enumerate_closed_loops((nodes, flipped)))
    assert a == b


def test_basis_is_deterministic():
    a = [(l.kind, l.alignment.key, l.nodes) for l in enumerate_closed_loops(tag_structure())]
    b = [(l.kind, l.alignment.key, l.nodes) for l in enumerate_closed_loops(tag_structure())]
    assert a == b


def test_built_values_are_finite(built, robot):
    graph, _ = built
    for nid, node in graph.nodes.items():
        assert np.isfinite(graph[nid].data).all(), nid
    assert graph["2D:kp3_fk"].shape == (2, robot.n_keypoints, 3)
    assert graph["2D:R"].shape == (2, 3, 3)


def test_graph_structure_matches_canonical(built):
    graph, _ = built
    ref = tag_structure()
    assert [e.key for e in graph.edges] == [e.key for e in ref.edges]


def test_failed_node_poisons_dependents(robot, scenes):
    nets = TagNetworks(robot.n_joints, robot.n_keypoints, seed=0)

    class Broken:
        def __call__(self, *args):
            raise RuntimeError("boom")
    nets.heads_3d = Broken()
    images, K = scene_batch(scenes[:1])
    graph = build_tag(robot, nets, images, K)
    with pytest.raises(NodeError, match="boom"):
        graph["3D:p"]
    with pytest.raises(NodeError, match="3D:p"):
        graph["3D:kp3_fk"]
    assert np.isfinite(graph["2D:kp3_fk"].data).all()


def _audit(graph, nets, a, b, w=None):
    loop = next(l for l in enumerate_closed_loops(graph) if l.alignment.key == graph.edge(a, b).key)
    return loop, parameter_groups(loop_gradient_audit(graph, loop, nets, w))


def test_backbone_lines_reach_both_backbones(built):
    graph, nets = built
    lines = [l for l in enumerate_closed_loops(graph) if l.kind == BCL]
    assert lines
    for loop in lines:
        groups = parameter_groups(loop_gradient_audit(graph, loop, nets))
        assert "backbone_2d" in groups and "backbone_3d" in groups, (loop.alignment.label(), groups)


def test_joint_loop_reaches_both_joint_heads(built):
    graph, nets = built
    _, groups = _audit(graph, nets, "2D:p", "3D:p")
    assert "heads_2d.p" in groups and "heads_3d" in groups


def test_2d_internal_loop_stays_in_2d(built):
    graph, nets = built
    _, groups = _audit(graph, nets, "2D:kp2", "2D:kp2_proj")
    assert "backbone_3d" not in groups and "heads_3d" not in groups
    assert "backbone_2d" in groups


def test_zero_weight_audit_is_empty(built):
    graph, nets = built
    loop = next(l for l in enumerate_closed_loops(graph) if l.alignment.term == "a1")
    assert loop_gradient_audit(graph, loop, nets, LossWeights(a1=0.0)) == []


def test_adjacency_listing_is_symmetric():
    adj = tag_structure().adjacency_listing()
    for node, items in adj.items():
        for other, cls, _ in items:
            assert node in [x[0] for x in adj[other]]
    assert sum(len(v) for v in adj.values()) == 2 * 39


def test_alignment_specs_are_the_documented_set():
    assert len(ALIGNMENT_SPECS) == 10
