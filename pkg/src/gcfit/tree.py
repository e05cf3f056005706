"""Event-annotated trees in backward time (collection at t = 0).

Every node carries the type in effect on the segment *below* it (toward the
leaves). Leaves carry the type of the segment that ends at them, so for every
node except the root and type changes, ``node.state == parent.state``.
"""

from __future__ import annotations

import json
import re
from collections import defaultdict
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .model import TypeSpace, bin_index

EVENTS = ("root", "birth", "type_change", "sampled_leaf", "death_leaf", "unsampled_leaf")
LEAF_EVENTS = ("sampled_leaf", "death_leaf", "unsampled_leaf")
ARITY = {"root": 1, "birth": 2, "type_change": 1}
MIN_BRANCH = 1e-12


class TreeError(ValueError):
    """A tree document or structure is invalid."""

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


@dataclass(frozen=True)
class Node:
    id: int
    parent: int | None
    time: float
    event: str
    state: int
    affinity: float | None = None


@dataclass(frozen=True)
class Segment:
    """Branch stretch between two adjacent events, ``end_time < start_time``."""

    node: int
    start_time: float
    end_time: float
    state: int
    end_event: str
    children: tuple[int, ...]

    @property
    def length(self) -> float:
        return self.start_time - self.end_time


class Tree:
    """Immutable collection of nodes with parent/child lookups.

    Construction does not validate; call :func:`validate` (the
    ``ObservedTree``/``FullTree`` constructors used by importers and
    simulators do so).
    """

    allowed_leaves: tuple[str, ...] = LEAF_EVENTS

    def __init__(self, nodes: Iterable[Node], rho_index: int = 0):
        self.nodes: tuple[Node, ...] = tuple(nodes)
        self.rho_index = int(rho_index)
        self._by_id = {n.id: n for n in self.nodes}
        children = defaultdict(list)
        for n in self.nodes:
            if n.parent is not None:
                children[n.parent].append(n.id)
        self._children = {k: tuple(v) for k, v in children.items()}

    def __len__(self):
        return len(self.nodes)

    def __getitem__(self, node_id) -> Node:
        return self._by_id[node_id]

    def __eq__(self, other):
        return (
            type(self) is type(other)
            and self.rho_index == other.rho_index
            and sorted(self.nodes, key=lambda n: n.id)
            == sorted(other.nodes, key=lambda n: n.id)
        )

    def __repr__(self):
        return (
            f"{type(self).__name__}(nodes={len(self.nodes)}, "
            f"leaves={len(self.leaves())}, root_time={self.root_time:.4g})"
        )

    def children(self, node_id) -> tuple[int, ...]:
        return self._children.get(node_id, ())

    @property
    def root(self) -> Node:
        roots = [n for n in self.nodes if n.parent is None]
        if len(roots) != 1:
            raise TreeError(f"expected exactly one root, found {len(roots)}")
        return roots[0]

    @property
    def root_time(self) -> float:
        return self.root.time

    def leaves(self, event: str | None = None) -> list[Node]:
        return [
            n
            for n in self.nodes
            if n.event in LEAF_EVENTS and (event is None or n.event == event)
        ]

    def postorder(self) -> list[Node]:
        """Nodes with every child before its parent (iterative)."""
        out, stack = [], [(self.root.id, False)]
        while stack:
            nid, expanded = stack.pop()
            if expanded:
                out.append(self._by_id[nid])
            else:
                stack.append((nid, True))
                stack.extend((c, False) for c in reversed(self.children(nid)))
        return out

    def total_branch_length(self) -> float:
        return sum(
            self._by_id[n.parent].time - n.time
            for n in self.nodes
            if n.parent is not None
        )

    def lineages_at(self, t: float) -> int:
        """Number of branches crossing backward time ``t``."""
        return sum(
            1
            for n in self.nodes
            if n.parent is not None and n.time < t <= self._by_id[n.parent].time
        )


class FullTree(Tree):
    """Complete realization including dead and unsampled lineages."""


class ObservedTree(Tree):
    """Tree on sampled lineages only: leaves are sampled at time 0."""

    allowed_leaves = ("sampled_leaf",)


def validate(tree: Tree) -> list[str]:
    """Every invariant violation, with node ids. An empty list means valid."""
    problems = []
    nodes = tree.nodes
    if not nodes:
        return ["no root: tree has no nodes"]
    ids = [n.id for n in nodes]
    if len(set(ids)) != len(ids):
        dup = sorted({i for i in ids if ids.count(i) > 1})
        problems.append(f"duplicate node ids {dup}")
    by_id = {n.id: n for n in nodes}
    roots = [n for n in nodes if n.parent is None]
    if len(roots) != 1:
        problems.append(f"expected exactly one root, found {len(roots)}")
    for n in nodes:
        if n.event not in EVENTS:
            problems.append(f"node {n.id}: unknown event {n.event!r}")
            continue
        if (n.parent is None) != (n.event == "root"):
            problems.append(f"node {n.id}: root event must be exactly the parentless node")
        if n.parent is not None and n.parent not in by_id:
            problems.append(f"node {n.id}: dangling parent id {n.parent}")
            continue
        if n.event in LEAF_EVENTS and n.event not in tree.allowed_leaves:
            problems.append(
                f"node {n.id}: {n.event} not allowed in {type(tree).__name__}"
            )
        if n.time < 0:
            problems.append(f"node {n.id}: negative time {n.time}")
        if n.event in ("sampled_leaf", "unsampled_leaf") and n.time != 0:
            problems.append(f"node {n.id}: {n.event} must be at time 0, got {n.time}")
        if n.event == "death_leaf" and not n.time > 0:
            problems.append(f"node {n.id}: death_leaf must have time > 0")
        kids = tree.children(n.id)
        want = ARITY.get(n.event, 0)
        if len(kids) != want:
            problems.append(
                f"node {n.id}: {n.event} has {len(kids)} children, expected {want}"
            )
        if n.parent is not None and n.parent in by_id:
            parent = by_id[n.parent]
            if not parent.time - n.time > MIN_BRANCH:
                problems.append(
                    f"node {n.id}: non-positive branch "
                    f"(parent time {parent.time}, child time {n.time})"
                )
            if n.event == "type_change":
                if n.state == parent.state:
                    problems.append(
                        f"node {n.id}: type change to same state {n.state}"
                    )
            elif n.state != parent.state:
                problems.append(
                    f"node {n.id}: state {n.state} differs from parent state "
                    f"{parent.state} without a type change"
                )
    # cycles: walk up from every node
    if not any("dangling" in p for p in problems):
        for n in nodes:
            seen, cur = set(), n
            while cur.parent is not None:
                if cur.id in seen:
                    problems.append(f"node {n.id}: cycle through node {cur.id}")
                    break
                seen.add(cur.id)
                cur = by_id[cur.parent]
    return problems


def check(tree: Tree) -> Tree:
    problems = validate(tree)
    if problems:
        raise TreeError(problems)
    return tree


def postorder_segments(tree: Tree) -> list[Segment]:
    """One segment per non-root node, children before parents; the last
    element is the root segment."""
    segs = []
    for n in tree.postorder():
        if n.parent is None:
            continue
        parent = tree[n.parent]
        segs.append(
            Segment(
                node=n.id,
                start_time=parent.time,
                end_time=n.time,
                state=parent.state,
                end_event=n.event,
                children=tree.children(n.id),
            )
        )
    return segs


# -- JSON -------------------------------------------------------------------


def to_json(tree: Tree) -> bytes:
    check(tree)
    doc = {
        "kind": "full" if isinstance(tree, FullTree) else "observed",
        "rho_index": tree.rho_index,
        "root_time": tree.root_time,
        "nodes": [
            {
                "id": n.id,
                "parent": n.parent,
                "time": n.time,
                "event": n.event,
                "state": n.state,
                "affinity": n.affinity,
            }
            for n in sorted(tree.nodes, key=lambda n: n.id)
        ],
    }
    return json.dumps(doc, sort_keys=True).encode()


def _node_from_doc(d) -> Node:
    try:
        event = d["event"]
        if event not in EVENTS:
            raise TreeError(f"unknown event kind {event!r}")
        parent = d.get("parent")
        aff = d.get("affinity")
        return Node(
            id=int(d["id"]),
            parent=None if parent is None else int(parent),
            time=float(d["time"]),
            event=event,
            state=int(d["state"]),
            affinity=None if aff is None else float(aff),
        )
    except (KeyError, TypeError) as e:
        raise TreeError(f"malformed node {d!r}: {e}") from None


def from_json(data: bytes | str) -> Tree:
    try:
        doc = json.loads(data)
    except json.JSONDecodeError as e:
        raise TreeError(f"malformed document: {e}") from None
    if not isinstance(doc, dict) or not isinstance(doc.get("nodes"), list):
        raise TreeError("malformed document: expected an object with a 'nodes' list")
    nodes = [_node_from_doc(d) for d in doc["nodes"]]
    if not nodes:
        raise TreeError("no root: empty node list")
    cls = FullTree if doc.get("kind") == "full" else ObservedTree
    tree = cls(nodes, rho_index=doc.get("rho_index", 0))
    check(tree)
    if "root_time" in doc and abs(float(doc["root_time"]) - tree.root_time) > 1e-12:
        raise TreeError("root_time does not match the root node time")
    return tree


def save_trees(trees: Sequence[Tree], path) -> None:
    """Write a list of trees as a JSON array of tree documents."""
    from pathlib import Path

    docs = [json.loads(to_json(t)) for t in trees]
    Path(path).write_text(json.dumps(docs, sort_keys=True))


def load_trees(path) -> list[Tree]:
    """Read a single tree document or an array of them."""
    from pathlib import Path

    doc = json.loads(Path(path).read_text())
    docs = doc if isinstance(doc, list) else [doc]
    return [from_json(json.dumps(d)) for d in docs]


# -- annotated Newick --------------------------------------------------------

_MUTATIONS = re.compile(r"&\s*mutations\s*=\s*\{(.*)\}\s*$", re.S)
_PAIR = re.compile(r"\(\s*([^,()]+?)\s*,\s*([^,()]+?)\s*\)")


@dataclass
class _NewickNode:
    name: str = ""
    length: float | None = None
    comment: str | None = None
    children: list = None


def _parse_newick(text: str) -> _NewickNode:
    s = text.strip()
    if not s.endswith(";"):
        raise TreeError("newick string must end with ';'")
    s = s[:-1]
    pos = 0

    def parse_comment():
        nonlocal pos
        end = s.find("]", pos)
        if end < 0:
            raise TreeError("unterminated comment block")
        body = s[pos + 1 : end]
        pos = end + 1
        return body

    def parse_node():
        nonlocal pos
        node = _NewickNode(children=[])
        if pos < len(s) and s[pos] == "(":
            pos += 1
            node.children.append(parse_node())
            while pos < len(s) and s[pos] == ",":
                pos += 1
                node.children.append(parse_node())
            if pos >= len(s) or s[pos] != ")":
                raise TreeError(f"expected ')' at position {pos}")
            pos += 1
        start = pos
        while pos < len(s) and s[pos] not in ":,()[;":
            pos += 1
        node.name = s[start:pos].strip()
        while pos < len(s) and s[pos] in ":[":
            if s[pos] == "[":
                node.comment = parse_comment()
            else:
                pos += 1
                start = pos
                while pos < len(s) and s[pos] not in ",()[;":
                    pos += 1
                try:
                    node.length = float(s[start:pos])
                except ValueError:
                    raise TreeError(f"bad branch length {s[start:pos]!r}") from None
        return node

    root = parse_node()
    if pos != len(s):
        raise TreeError(f"unexpected trailing text at position {pos}")
    return root


def _parse_mutations(comment: str | None) -> list[tuple[float, float]]:
    if comment is None:
        return []
    m = _MUTATIONS.search(comment)
    if m is None:
        if "mutations" in comment:
            raise TreeError(f"unparseable comment block [{comment}]")
        return []
    body = m.group(1)
    pairs = _PAIR.findall(body)
    if _PAIR.sub("", body).replace(",", "").strip():
        raise TreeError(f"unparseable comment block [{comment}]")
    try:
        return [(float(t), float(a)) for t, a in pairs]
    except ValueError:
        raise TreeError(f"unparseable comment block [{comment}]") from None


def from_annotated_newick(
    text: str,
    space: TypeSpace,
    root_age: float | None = None,
    root_affinity: float = 0.0,
    rho_index: int = 0,
    tol: float = 1e-6,
) -> ObservedTree:
    """Import a Newick tree whose branches carry ``[&mutations={(t,a),...}]``
    comments, ``t`` being the backward time of the mutation and ``a`` the
    affinity after it.

    Leaves are placed at time 0 (the tree must be ultrametric within ``tol``
    relative to its height). The root node sits at ``root_age`` if given,
    otherwise above the top node by its branch length. Affinities are
    binned; a mutation that stays in the current bin adds no node.
    """
    top = _parse_newick(text)

    # depths measured from the top node
    depth = {}
    stack = [(top, 0.0)]
    leaves = []
    while stack:
        nd, d = stack.pop()
        depth[id(nd)] = d
        for c in nd.children:
            if c.length is None:
                raise TreeError(f"branch to {c.name or 'internal node'} has no length")
            stack.append((c, d + c.length))
        if not nd.children:
            leaves.append(nd)
    height = max(depth[id(l)] for l in leaves)
    for l in leaves:
        if abs(depth[id(l)] - height) > tol * max(height, 1.0):
            raise TreeError(f"leaf {l.name!r} is not at collection time (non-ultrametric)")
    top_time = height
    if root_age is None:
        if not top.length:
            raise TreeError("root age not given and the top node has no root branch")
        root_time = top_time + top.length
    else:
        root_time = float(root_age)

    nodes: list[Node] = []
    root_state = bin_index(space, root_affinity)
    nodes.append(Node(0, None, root_time, "root", root_state, root_affinity))
    counter = [1]

    def add(parent, time, event, state, affinity):
        nid = counter[0]
        counter[0] += 1
        nodes.append(Node(nid, parent, time, event, state, affinity))
        return nid

    def walk(nd, parent_id, parent_time, state, affinity):
        time = 0.0 if not nd.children else height - depth[id(nd)]
        muts = sorted(_parse_mutations(nd.comment), key=lambda m: -m[0])
        for t, a in muts:
            if not time < t < parent_time:
                raise TreeError(
                    f"mutation time {t} outside branch interval ({time}, {parent_time})"
                )
            new_state = bin_index(space, a)
            affinity = a
            if new_state != state:
                parent_id = add(parent_id, t, "type_change", new_state, a)
                state = new_state
        if nd.children:
            if len(nd.children) != 2:
                raise TreeError("multifurcations are not supported")
            nid = add(parent_id, time, "birth", state, affinity)
            for c in nd.children:
                walk(c, nid, time, state, affinity)
        else:
            add(parent_id, 0.0, "sampled_leaf", state, affinity)

    walk(top, 0, root_time, root_state, root_affinity)
    return check(ObservedTree(nodes, rho_index=rho_index))
