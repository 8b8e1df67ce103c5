"""21-keypoint hand graphs.

Node layout follows the usual 21-point hand-pose convention::

    0            palm / wrist
    1..4         thumb   (base -> tip)
    5..8         index
    9..12        middle
    13..16       ring
    17..20       little

Three edge structures are provided, each with exactly 20 undirected edges:

* ``anatomical`` -- palm to every finger base, plus a chain along each finger.
* ``finger:<name>`` -- one reference finger. Every joint of the reference
  finger is linked to the joint at the same level on the four other fingers,
  and the palm is linked to all four reference joints.
* ``star`` -- the palm linked to every other keypoint.
"""

from __future__ import annotations

import enum
from collections import deque
from dataclasses import dataclass

import numpy as np

from .errors import ContractError

N_NODES = 21
N_EDGES = 20
PALM = 0
JOINTS_PER_FINGER = 4


class FingerId(enum.IntEnum):
    THUMB = 0
    INDEX = 1
    MIDDLE = 2
    RING = 3
    LITTLE = 4

    @property
    def nodes(self):
        """Node indices of this finger, base first."""
        start = 1 + JOINTS_PER_FINGER * int(self)
        return tuple(range(start, start + JOINTS_PER_FINGER))


@dataclass(frozen=True)
class TopologyKind:
    """Which of the three hand structures to build.

    ``name`` is ``"anatomical"``, ``"finger"`` or ``"star"``; ``finger`` is
    only meaningful (and required) for ``"finger"``.
    """

    name: str
    finger: FingerId | None = None

    def __post_init__(self):
        if self.name not in ("anatomical", "finger", "star"):
            raise ContractError(f"unknown topology kind {self.name!r}")
        if self.name == "finger" and self.finger is None:
            object.__setattr__(self, "finger", FingerId.INDEX)
        if self.name != "finger" and self.finger is not None:
            raise ContractError(f"topology {self.name!r} takes no reference finger")

    @classmethod
    def parse(cls, text):
        """Parse ``anatomical``, ``star`` or ``finger:<name>`` (``finger`` alone means index)."""
        text = text.strip().lower()
        if text in ("anatomical", "a", "(a)"):
            return cls("anatomical")
        if text in ("star", "palm", "c", "(c)"):
            return cls("star")
        if text in ("finger", "b", "(b)"):
            return cls("finger", FingerId.INDEX)
        if text.startswith("finger:"):
            fname = text.split(":", 1)[1]
            try:
                return cls("finger", FingerId[fname.upper()])
            except KeyError:
                raise ContractError(f"unknown finger {fname!r}") from None
        raise ContractError(f"cannot parse topology {text!r}")

    def __str__(self):
        if self.name == "finger":
            return f"finger:{self.finger.name.lower()}"
        return self.name

    @property
    def letter(self):
        """Short ablation label: (a), (b) or (c)."""
        return {"anatomical": "(a)", "finger": "(b)", "star": "(c)"}[self.name]


ANATOMICAL = TopologyKind("anatomical")
PALM_STAR = TopologyKind("star")


def finger_reference(finger=FingerId.INDEX):
    return TopologyKind("finger", FingerId(finger))


@dataclass(frozen=True)
class HandTopology:
    kind: TopologyKind
    edges: tuple
    n_nodes: int = N_NODES

    def degrees(self):
        deg = np.zeros(self.n_nodes, dtype=int)
        for u, v in self.edges:
            deg[u] += 1
            deg[v] += 1
        return deg


def _anatomical_edges():
    edges = []
    for f in FingerId:
        chain = f.nodes
        edges.append((PALM, chain[0]))
        edges.extend(zip(chain[:-1], chain[1:]))
    return edges


def _finger_reference_edges(ref):
    edges = []
    ref_nodes = ref.nodes
    for other in FingerId:
        if other == ref:
            continue
        for level in range(JOINTS_PER_FINGER):
            edges.append((ref_nodes[level], other.nodes[level]))
    edges.extend((PALM, n) for n in ref_nodes)
    return edges


def build_topology(kind=PALM_STAR):
    """Build one of the three hand graphs.

    Parameters
    ----------
    kind : TopologyKind or str
        A kind or a string accepted by :meth:`TopologyKind.parse`.

    Returns
    -------
    HandTopology
        Edges are normalized to ``(u, v)`` with ``u < v`` and sorted.
    """
    if isinstance(kind, str):
        kind = TopologyKind.parse(kind)
    if kind.name == "anatomical":
        edges = _anatomical_edges()
    elif kind.name == "finger":
        edges = _finger_reference_edges(kind.finger)
    else:
        edges = [(PALM, n) for n in range(1, N_NODES)]
    edges = tuple(sorted((min(u, v), max(u, v)) for u, v in edges))
    return HandTopology(kind=kind, edges=edges)


def adjacency(topology, with_self_loops=False):
    """Symmetric 0/1 adjacency matrix, optionally with a unit diagonal."""
    n = topology.n_nodes
    adj = np.zeros((n, n), dtype=np.float64)
    for u, v in topology.edges:
        adj[u, v] = 1.0
        adj[v, u] = 1.0
    if with_self_loops:
        adj[np.diag_indices(n)] = 1.0
    return adj


def _n_components(n, edges):
    nbrs = [[] for _ in range(n)]
    for u, v in edges:
        if 0 <= u < n and 0 <= v < n:
            nbrs[u].append(v)
            nbrs[v].append(u)
    seen = [False] * n
    count = 0
    for start in range(n):
        if seen[start]:
            continue
        count += 1
        seen[start] = True
        queue = deque([start])
        while queue:
            u = queue.popleft()
            for w in nbrs[u]:
                if not seen[w]:
                    seen[w] = True
                    queue.append(w)
    return count


def validate(topology):
    """Return a list of human-readable invariant violations (empty if valid)."""
    problems = []
    n = topology.n_nodes
    if n != N_NODES:
        problems.append(f"node count: expected {N_NODES}, got {n}")
    normalized = []
    for u, v in topology.edges:
        if u == v:
            problems.append(f"self-loop at node {u}")
            continue
        if not (0 <= u < n and 0 <= v < n):
            problems.append(f"edge ({u}, {v}) out of range")
            continue
        normalized.append((min(u, v), max(u, v)))
    dupes = len(normalized) - len(set(normalized))
    if dupes:
        problems.append(f"duplicate edges: {dupes}")
    if len(topology.edges) != N_EDGES:
        problems.append(f"edge count: expected {N_EDGES}, got {len(topology.edges)}")
    if n > 0 and _n_components(n, normalized) != 1:
        problems.append("disconnected graph")
    return problems


def export_edge_list(topology):
    """Plain-text edge list: a ``hand21 <kind>`` header then one ``u v`` per line."""
    lines = [f"hand21 {topology.kind}"]
    lines.extend(f"{u} {v}" for u, v in topology.edges)
    return "\n".join(lines) + "\n"


def parse_edge_list(text):
    """Inverse of :func:`export_edge_list`."""
    lines = [ln.strip() for ln in text.splitlines() if ln.strip()]
    if not lines or not lines[0].startswith("hand21 "):
        raise ContractError("edge list must start with a 'hand21 <kind>' header")
    kind = TopologyKind.parse(lines[0].split(None, 1)[1])
    edges = []
    for ln in lines[1:]:
        u, v = (int(tok) for tok in ln.split())
        edges.append((u, v))
    return HandTopology(kind=kind, edges=tuple(edges))
