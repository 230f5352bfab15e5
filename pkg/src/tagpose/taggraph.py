"""The alignment graph: typed state nodes, forward/alignment edges, closed loops.

Forward edges are read off the node evaluators: an edge joins a node to each
input it is computed from.  Alignment edges join nodes that estimate the same
physical quantity.  Closed loops are the fundamental cycles (with respect to
a spanning tree grown from ``2D:f`` over forward edges) that contain exactly
one alignment edge; a virtual forward edge between the two backbone outputs
turns backbone-to-backbone paths into cycles.
"""
from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .camera import project, regulate_depth, unproject_pixels
from .diffcore.networks import PixelSet, as_batch
from .diffcore.tensor import backward
from .kinematics import keypoints_from_config, surface_cloud_from_config

logger = logging.getLogger(__name__)

BRANCHES = ("2D", "3D")
KINDS = ("f", "lam", "D", "D_abs", "p", "R", "T", "kp2", "kp3", "kp3_fk", "kp2_proj", "pts_fk", "pts_unproj")

FORWARD, ALIGNMENT, VIRTUAL = "forward", "alignment", "virtual"
TRANSFORMATION, ROBOT_PRIOR, NETWORK = "transformation", "robot_prior", "network"
AFL, BCL = "AlignmentForwardLoop", "BackboneConnectingLine"
ROOT = "2D:f"
BACKBONE_NODES = ("3D:D", "2D:f")

# node id -> (inputs, mechanism of the forward edges into it)
NODE_SPECS = {
    "2D:f": ((), NETWORK),
    "3D:D": ((), NETWORK),
    "2D:lam": (("2D:f",), NETWORK),
    "2D:p": (("2D:f",), NETWORK),
    "2D:R": (("2D:f",), NETWORK),
    "2D:T": (("2D:f",), NETWORK),
    "2D:kp2": (("2D:f",), NETWORK),
    "2D:kp3": (("2D:f",), NETWORK),
    "3D:D_abs": (("3D:D", "2D:lam"), TRANSFORMATION),
    "3D:pts_unproj": (("3D:D_abs",), TRANSFORMATION),
    "3D:p": (("3D:D_abs", "2D:R", "2D:T"), NETWORK),
    "3D:kp3": (("3D:D_abs", "2D:R", "2D:T"), NETWORK),
    "2D:kp3_fk": (("2D:p", "2D:R", "2D:T"), ROBOT_PRIOR),
    "3D:kp3_fk": (("3D:p", "2D:R", "2D:T"), ROBOT_PRIOR),
    "2D:pts_fk": (("2D:p", "2D:R", "2D:T"), ROBOT_PRIOR),
    "3D:pts_fk": (("3D:p", "2D:R", "2D:T"), ROBOT_PRIOR),
    "2D:kp2_proj": (("2D:kp3",), TRANSFORMATION),
    "3D:kp2_proj": (("3D:kp3",), TRANSFORMATION),
}

# (node, node, align-loss term or None, loop group)
ALIGNMENT_SPECS = (
    ("2D:p", "3D:p", "a1", "joints"),
    ("2D:kp3", "3D:kp3", "a2", "keypoints"),
    ("3D:kp3", "3D:kp3_fk", None, "keypoints"),
    ("3D:kp3_fk", "2D:kp3_fk", None, "keypoints"),
    ("3D:kp3", "2D:kp3_fk", "a3", "keypoints"),
    ("2D:kp2", "2D:kp2_proj", "a4", "keypoints"),
    ("2D:kp2_proj", "3D:kp2_proj", None, "keypoints"),
    ("2D:pts_fk", "3D:pts_fk", None, "pointcloud"),
    ("3D:pts_fk", "3D:pts_unproj", "a5", "pointcloud"),
    ("3D:pts_unproj", "2D:pts_fk", "a6", "pointcloud"),
)

# non-consecutive chain pairs, off by default
EXTRA_ALIGNMENT_SPECS = (
    ("2D:kp3", "3D:kp3_fk", None, "keypoints"),
    ("2D:kp3", "2D:kp3_fk", None, "keypoints"),
    ("2D:kp2", "3D:kp2_proj", None, "keypoints"),
)

LOOP_GROUPS = ("keypoints", "joints", "pointcloud")


class NodeError(RuntimeError):
    """A node value could not be computed (or depends on one that failed)."""


def node_order(node_id):
    # unknown ids (hand-built graphs) sort after the canonical ones, by name
    branch, _, kind = node_id.partition(":")
    if branch in BRANCHES and kind in KINDS:
        return BRANCHES.index(branch), KINDS.index(kind), ""
    return len(BRANCHES), len(KINDS), node_id


@dataclass
class StateNode:
    id: str
    branch: str
    kind: str
    value: object = None
    error: str = None

    def get(self):
        if self.error is not None:
            raise NodeError(self.error)
        if self.value is None:
            raise NodeError(f"node {self.id} has no value; build the graph first")
        return self.value


@dataclass(frozen=True)
class Edge:
    u: str
    v: str
    cls: str
    mechanism: str = None
    term: str = None
    group: str = None

    @property
    def key(self):
        return tuple(sorted((self.u, self.v), key=node_order))

    def other(self, node):
        return self.v if node == self.u else self.u

    def label(self):
        a, b = self.key
        return f"{a} -- {b}"


@dataclass
class ClosedLoop:
    """A basis element: a cycle (or backbone-to-backbone path) with one alignment edge.

    ``edges``/``nodes`` give the traversal order; for backbone-connecting
    lines the virtual edge is elided and the walk runs from ``3D:D`` to
    ``2D:f``.  ``cycle`` is the full edge-key set over Z2, virtual edge
    included.
    """

    kind: str
    alignment: Edge
    edges: tuple
    nodes: tuple
    cycle: frozenset
    component: int = 0

    def __len__(self):
        return len(self.edges)


@dataclass
class TagGraph:
    nodes: dict
    edges: list
    batch: int = 0
    pixels: PixelSet = None
    K: object = None
    model: object = None
    meta: dict = field(default_factory=dict)

    def __getitem__(self, node_id):
        return self.nodes[node_id].get()

    def forward_edges(self):
        return [e for e in self.edges if e.cls == FORWARD]

    def alignment_edges(self):
        return [e for e in self.edges if e.cls == ALIGNMENT]

    def loss_edges(self):
        return [e for e in self.edges if e.cls == ALIGNMENT and e.term is not None]

    def edge(self, a, b):
        key = tuple(sorted((a, b), key=node_order))
        for e in self.edges:
            if e.key == key:
                return e
        raise KeyError(f"no edge {a} -- {b}")

    def structure(self):
        """Node ids and edges without values (for reports and topology work)."""
        return sorted(self.nodes, key=node_order), list(self.edges)

    def adjacency_listing(self):
        """Machine-readable adjacency: ``{node: [[neighbour, class, mechanism|term], ...]}``."""
        out = {n: [] for n in sorted(self.nodes, key=node_order)}
        for e in self.edges:
            tag = e.mechanism if e.cls == FORWARD else e.term
            out[e.u].append([e.v, e.cls, tag])
            out[e.v].append([e.u, e.cls, tag])
        for n in out:
            out[n].sort(key=lambda item: node_order(item[0]))
        return out


def tag_structure(extra_alignments=False, drop_alignments=()):
    """The canonical node and edge sets (no values)."""
    nodes = {}
    for nid in sorted(NODE_SPECS, key=node_order):
        branch, kind = nid.split(":")
        nodes[nid] = StateNode(nid, branch, kind)
    edges = []
    for nid in sorted(NODE_SPECS, key=node_order):
        inputs, mech = NODE_SPECS[nid]
        for src in inputs:
            edges.append(Edge(src, nid, FORWARD, mechanism=mech))
    specs = ALIGNMENT_SPECS + (EXTRA_ALIGNMENT_SPECS if extra_alignments else ())
    drop = {tuple(sorted(pair, key=node_order)) for pair in drop_alignments}
    for a, b, term, group in specs:
        if tuple(sorted((a, b), key=node_order)) in drop:
            continue
        edges.append(Edge(a, b, ALIGNMENT, term=term, group=group))
    return TagGraph(nodes=nodes, edges=edges)


def build_tag(model, nets, images, K, masks=None, pixels=None, extra_alignments=False,
              drop_alignments=(), max_points=256):
    """Evaluate every node of the graph for a batch of scene images.

    ``images`` is ``(B, 4, H, W)`` (a single image is promoted to a batch of
    one).  ``masks`` default to the silhouette channel.  Node values are
    Values on a fresh tape; a node whose evaluator fails records the error
    and poisons its dependents.
    """
    images = as_batch(images)
    if masks is None:
        masks = images[:, 1] > 0.5
    if pixels is None:
        pixels = PixelSet.from_masks(masks, max_points=max_points)
    graph = tag_structure(extra_alignments, drop_alignments)
    graph.batch, graph.pixels, graph.K, graph.model = images.shape[0], pixels, K, model
    cache = {}

    def heads2():
        if "h2" not in cache:
            cache["h2"] = nets.heads_2d(graph["2D:f"])
        return cache["h2"]

    def heads3():
        if "h3" not in cache:
            cache["h3"] = nets.heads_3d(graph["3D:D_abs"], graph["2D:R"], graph["2D:T"], K, pixels)
        return cache["h3"]

    evaluators = {
        "2D:f": lambda: nets.backbone_2d(images, pixels, K),
        "3D:D": lambda: nets.backbone_3d(images),
        "2D:lam": lambda: heads2()["lam"],
        "2D:p": lambda: heads2()["p"],
        "2D:R": lambda: heads2()["R"],
        "2D:T": lambda: heads2()["T"],
        "2D:kp2": lambda: heads2()["kp2"],
        "2D:kp3": lambda: heads2()["kp3"],
        "3D:D_abs": lambda: regulate_depth(graph["3D:D"], graph["2D:lam"]),
        "3D:pts_unproj": lambda: unproject_pixels(graph["3D:D_abs"], K, pixels.rows, pixels.cols),
        "3D:p": lambda: heads3()["p"],
        "3D:kp3": lambda: heads3()["kp3"],
        "2D:kp3_fk": lambda: keypoints_from_config(model, graph["2D:p"], graph["2D:R"], graph["2D:T"]),
        "3D:kp3_fk": lambda: keypoints_from_config(model, graph["3D:p"], graph["2D:R"], graph["2D:T"]),
        "2D:pts_fk": lambda: surface_cloud_from_config(model, graph["2D:p"], graph["2D:R"], graph["2D:T"]),
        "3D:pts_fk": lambda: surface_cloud_from_config(model, graph["3D:p"], graph["2D:R"], graph["2D:T"]),
        "2D:kp2_proj": lambda: project(graph["2D:kp3"], K, strict=False),
        "3D:kp2_proj": lambda: project(graph["3D:kp3"], K, strict=False),
    }
    for nid in _evaluation_order():
        node = graph.nodes[nid]
        failed = [src for src in NODE_SPECS[nid][0] if graph.nodes[src].error is not None]
        if failed:
            node.error = f"{nid} not computed: input {failed[0]} failed"
            continue
        try:
            node.value = evaluators[nid]()
        except Exception as exc:  # recorded on the node, surfaced on access
            node.error = f"{nid} failed: {type(exc).__name__}: {exc}"
            logger.warning(node.error)
    return graph


def _evaluation_order():
    done, order = set(), []
    pending = sorted(NODE_SPECS, key=node_order)
    while pending:
        for nid in pending:
            if all(src in done for src in NODE_SPECS[nid][0]):
                order.append(nid)
                done.add(nid)
                pending.remove(nid)
                break
    return order


# ---------------------------------------------------------------------------
# closed loops


def _components(node_ids, edges):
    adj = {n: [] for n in node_ids}
    for e in edges:
        adj[e.u].append(e)
        adj[e.v].append(e)
    seen, comps = set(), []
    for n in sorted(node_ids, key=_safe_order):
        if n in seen:
            continue
        comp, queue = [], deque([n])
        seen.add(n)
        while queue:
            x = queue.popleft()
            comp.append(x)
            for e in adj[x]:
                y = e.other(x)
                if y not in seen:
                    seen.add(y)
                    queue.append(y)
        comps.append(comp)
    return comps


def _safe_order(node_id):
    try:
        return (0,) + node_order(node_id)
    except (ValueError, IndexError):
        return (1, str(node_id))


def spanning_tree(node_ids, edges, root=ROOT):
    """Parent pointers of a spanning forest preferring forward edges.

    Each component is grown breadth-first from ``root`` (or its first node in
    canonical order), first over forward/virtual edges, then alignment edges
    only where needed to reach the rest.  Neighbours are visited in
    (edge class, branch, kind) order, so the result is reproducible and does
    not depend on stored endpoint order.
    """
    adj = {n: [] for n in node_ids}
    for e in edges:
        adj[e.u].append(e)
        adj[e.v].append(e)
    rank = {VIRTUAL: 0, FORWARD: 1, ALIGNMENT: 2}
    for n in adj:
        adj[n].sort(key=lambda e, n=n: (rank[e.cls], _safe_order(e.other(n))))
    parent, comp_of = {}, {}
    for ci, comp in enumerate(_components(node_ids, edges)):
        start = root if root in comp else min(comp, key=_safe_order)
        parent[start] = None
        comp_of[start] = ci
        members = set(comp)
        for allowed in ({VIRTUAL, FORWARD}, {VIRTUAL, FORWARD, ALIGNMENT}):
            if allowed is not None and len(members & set(parent)) == len(members):
                break
            queue = deque([start] if ALIGNMENT not in allowed else
                          sorted(members & set(parent), key=_safe_order))
            while queue:
                x = queue.popleft()
                for e in adj[x]:
                    y = e.other(x)
                    if e.cls in allowed and y not in parent:
                        parent[y] = (x, e)
                        comp_of[y] = ci
                        queue.append(y)
    return parent, comp_of


def _path_to_root(parent, node):
    path = [node]
    while parent[path[-1]] is not None:
        path.append(parent[path[-1]][0])
    return path


def fundamental_cycles(node_ids, edges, root=ROOT):
    """All fundamental cycles as ``(non_tree_edge, walk_nodes, walk_edges, component)``.

    The walk starts at the non-tree edge's first endpoint, crosses it and
    returns through the tree.
    """
    parent, comp_of = spanning_tree(node_ids, edges, root)
    tree = {id(p[1]) for p in parent.values() if p is not None}
    out = []
    for e in edges:
        if id(e) in tree:
            continue
        a, b = e.key
        pa, pb = _path_to_root(parent, a), _path_to_root(parent, b)
        on_a = set(pa)
        lca = next(x for x in pb if x in on_a)
        down_b = pb[:pb.index(lca) + 1]
        up_a = pa[:pa.index(lca) + 1]
        walk = [a, b] + down_b[1:] + list(reversed(up_a[:-1]))
        walk_edges = [e]
        for x in down_b[:-1]:
            walk_edges.append(parent[x][1])
        for x in reversed(up_a[:-1]):
            walk_edges.append(parent[x][1])
        out.append((e, tuple(walk), tuple(walk_edges), comp_of[a]))
    return out


def enumerate_closed_loops(graph, virtual=BACKBONE_NODES, root=ROOT):
    """Loop basis: fundamental cycles with exactly one alignment edge.

    A virtual forward edge between the two backbone outputs closes
    backbone-to-backbone paths; loops through it are reported as
    backbone-connecting lines with the virtual edge removed.
    """
    node_ids, edges = graph.structure() if isinstance(graph, TagGraph) else graph
    edges = list(edges)
    virt = None
    if virtual is not None and all(v in node_ids for v in virtual):
        virt = Edge(virtual[0], virtual[1], VIRTUAL)
        edges.append(virt)
    loops = []
    for e, walk, walk_edges, comp in fundamental_cycles(node_ids, edges, root):
        aligned = [x for x in walk_edges if x.cls == ALIGNMENT]
        if len(aligned) != 1:
            continue
        cycle = frozenset(x.key for x in walk_edges)
        if virt is not None and any(x is virt for x in walk_edges):
            walk, walk_edges = _open_at_virtual(walk, walk_edges, virt)
            loops.append(ClosedLoop(BCL, aligned[0], walk_edges, walk, cycle, comp))
        else:
            loops.append(ClosedLoop(AFL, aligned[0], walk_edges, walk, cycle, comp))
    return loops


def _open_at_virtual(walk, walk_edges, virt):
    closed = list(walk[:-1])  # walk repeats its start node at the end
    k = next(i for i, x in enumerate(walk_edges) if x is virt)
    # edge k joins closed[k] -> closed[k+1]; rotate so the path starts after it
    n = len(walk_edges)
    nodes = [closed[(k + 1 + i) % n] for i in range(n)]
    edges_ = [walk_edges[(k + 1 + i) % n] for i in range(n - 1)]
    if nodes[0] != virt.u:
        nodes.reverse()
        edges_.reverse()
    return tuple(nodes), tuple(edges_)


def loop_gradient_audit(graph, loop, nets, weights=None, tol=0.0):
    """Parameter tensors that receive a nonzero gradient from one loop's loss.

    Only the alignment term attached to ``loop.alignment`` is applied.  The
    graph must have been built with values on a live tape.
    """
    from .losses import edge_alignment_loss

    loss = edge_alignment_loss(graph, loop.alignment, weights)
    named = list(nets.named_parameters())
    params = [p for _, p in named]
    if loss is None:
        return []
    backward(loss, params=params)
    return [name for name, p in named if np.abs(p.grad).max() > tol]


def parameter_groups(names):
    """Collapse tensor names to ``backbone_2d``, ``heads_2d.p``, ... groups."""
    groups = set()
    for name in names:
        parts = name.split(".")
        groups.add(".".join(parts[:2]) if parts[0] == "heads_2d" else parts[0])
    return sorted(groups)
