"""Wireless mesh as a hypergraph: flows, broadcast hyperarcs, XOR code sets
and conflict cliques, plus builders for the canonical relay topologies."""
from __future__ import annotations

import itertools
import re
from dataclasses import dataclass, field, replace

import networkx as nx

from .lossmodel import LossMatrix

PATTERNS = ("overhearing_only", "direct_only", "both", "all_links")


class TopologyError(ValueError):
    pass


@dataclass(frozen=True)
class Flow:
    id: str
    path: tuple
    generation_size: int = 15
    utility: str = "log"

    def __post_init__(self):
        object.__setattr__(self, "path", tuple(self.path))
        if len(self.path) < 2:
            raise TopologyError(f"flow {self.id}: path needs at least two nodes")
        if len(set(self.path)) != len(self.path):
            raise TopologyError(f"flow {self.id}: path repeats a node")
        if self.generation_size < 1:
            raise TopologyError(f"flow {self.id}: generation_size must be >= 1")
        if self.utility != "log":
            raise TopologyError(f"flow {self.id}: only log utility is supported")

    @property
    def source(self):
        return self.path[0]

    @property
    def destination(self):
        return self.path[-1]

    def next_hop(self, node):
        i = self.path.index(node)
        return self.path[i + 1] if i + 1 < len(self.path) else None

    def prev_hop(self, node):
        i = self.path.index(node)
        return self.path[i - 1] if i > 0 else None

    def forwarders(self):
        return self.path[:-1]


@dataclass(frozen=True)
class Hyperarc:
    id: str
    transmitter: str
    receivers: frozenset
    capacity: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "receivers", frozenset(self.receivers))
        if not self.receivers:
            raise TopologyError(f"hyperarc {self.id}: empty receiver set")
        if self.transmitter in self.receivers:
            raise TopologyError(f"hyperarc {self.id}: transmitter among receivers")


@dataclass(frozen=True)
class Topology:
    nodes: tuple
    links: dict  # (i, j) -> capacity, directed

    def has_link(self, i, j):
        return (i, j) in self.links

    def neighbors(self, i):
        return [j for (a, j) in self.links if a == i]


@dataclass(frozen=True)
class CodeBook:
    """Per hyperarc, the list of codes; a code is a tuple of flow ids."""
    codes: dict  # hyperarc id -> tuple of codes

    def H(self, h, k, s):
        codes = self.codes.get(h, ())
        return 1 if 0 <= k < len(codes) and s in codes[k] else 0

    def pairs(self):
        for h, codes in self.codes.items():
            for k, code in enumerate(codes):
                yield h, k, code

    def singletons_only(self):
        return CodeBook({h: tuple(c for c in codes if len(c) == 1)
                         for h, codes in self.codes.items()})


@dataclass(frozen=True)
class ConflictStructure:
    cliques: tuple  # of frozensets of hyperarc ids
    gamma: float = 1.0

    def __post_init__(self):
        if not 0 < self.gamma <= 1:
            raise TopologyError("gamma must lie in (0, 1]")

    def disjoint(self):
        seen = set()
        for c in self.cliques:
            if seen & c:
                return False
            seen |= c
        return True


@dataclass(frozen=True)
class Scenario:
    name: str
    topology: Topology
    flows: tuple
    hyperarcs: tuple
    codebook: CodeBook
    conflict: ConflictStructure
    loss: LossMatrix
    pattern_links: dict = field(default_factory=dict)

    def flow(self, fid):
        for f in self.flows:
            if f.id == fid:
                return f
        raise KeyError(fid)

    def hyperarc(self, hid):
        for h in self.hyperarcs:
            if h.id == hid:
                return h
        raise KeyError(hid)

    def hyperarcs_of(self, node):
        return [h for h in self.hyperarcs if h.transmitter == node]

    def with_loss(self, loss):
        return replace(self, loss=loss)

    def with_pattern(self, pattern, rate):
        """Uniform loss `rate` on the links named by `pattern`, others lossless."""
        if pattern not in PATTERNS:
            raise TopologyError(f"unknown loss pattern {pattern!r}")
        if pattern == "all_links":
            links = list(self.topology.links)
        elif pattern == "both":
            links = list(self.pattern_links["overhearing"]) + list(self.pattern_links["direct"])
        else:
            links = list(self.pattern_links[pattern.split("_")[0]])
        return self.with_loss(LossMatrix.for_links(self.topology.links, {l: rate for l in links}))

    def without_coding(self):
        return replace(self, codebook=self.codebook.singletons_only())


def crossing_flows(h, flows):
    """Flows that leave h's transmitter towards one of h's receivers."""
    out = []
    for f in flows:
        if h.transmitter in f.forwarders() and f.next_hop(h.transmitter) in h.receivers:
            out.append(f)
    return out


def antidote_ok(node, s, other, topology):
    """Can s's next hop after `node` hold the packets of `other` it needs?"""
    nh = s.next_hop(node)
    origin = other.prev_hop(node)
    if origin is None:
        return False  # other starts here, nobody downstream has seen it
    return origin == nh or topology.has_link(origin, nh)


def enumerate_codes(h, flows, topology, max_code_size=4):
    cand = crossing_flows(h, flows)
    codes = [(f.id,) for f in cand]
    for size in range(2, min(max_code_size, len(cand)) + 1):
        for combo in itertools.combinations(cand, size):
            hops = {f.next_hop(h.transmitter) for f in combo}
            if len(hops) < size:
                continue
            if all(antidote_ok(h.transmitter, a, b, topology)
                   for a in combo for b in combo if a is not b):
                codes.append(tuple(f.id for f in combo))
    return codes


def interferes(a, b, topology):
    if a.id == b.id:
        return True
    na = {a.transmitter} | a.receivers
    nb = {b.transmitter} | b.receivers
    if na & nb:
        return True
    # a transmission reaching the other's receiver collides with it
    return (any(topology.has_link(a.transmitter, r) for r in b.receivers)
            or any(topology.has_link(b.transmitter, r) for r in a.receivers))


def conflict_cliques(topology, hyperarcs, interference="single_clique", gamma=1.0):
    ids = [h.id for h in hyperarcs]
    if interference == "single_clique":
        return ConflictStructure((frozenset(ids),), gamma)
    if interference != "all_in_range":
        raise TopologyError(f"unknown interference model {interference!r}")
    g = nx.Graph()
    g.add_nodes_from(ids)
    for a, b in itertools.combinations(hyperarcs, 2):
        if interferes(a, b, topology):
            g.add_edge(a.id, b.id)
    order = {h: n for n, h in enumerate(ids)}
    cliques = [frozenset(c) for c in nx.find_cliques(g)]
    cliques.sort(key=lambda c: sorted(order[h] for h in c))
    return ConflictStructure(tuple(cliques), gamma)


def broadcast_hyperarcs(flows, links):
    """One hyperarc per transmitting node, reaching every next hop it serves."""
    hops = {}
    for f in flows:
        for n in f.forwarders():
            hops.setdefault(n, set()).add(f.next_hop(n))
    out = []
    for n in sorted(hops, key=lambda n: _first_seen(n, flows)):
        rx = hops[n]
        missing = [r for r in rx if (n, r) not in links]
        if missing:
            raise TopologyError(f"flow hop {n}->{missing[0]} has no link")
        cap = min(links[(n, r)] for r in rx)
        out.append(Hyperarc(f"{n}>" + ",".join(sorted(rx)), n, frozenset(rx), cap))
    return out


def _first_seen(node, flows):
    for i, f in enumerate(flows):
        if node in f.path:
            return (i, f.path.index(node))
    return (len(flows), 0)


def build_scenario(nodes, links, flows, *, name="custom", hyperarcs=None, cliques=None,
                   interference="single_clique", gamma=1.0, max_code_size=4,
                   loss=None, pattern_links=None):
    """Assemble and validate a Scenario from explicit parts.

    links maps directed (i, j) to capacity. loss maps (i, j) to a rate;
    links not mentioned are lossless.
    """
    nodes = tuple(nodes)
    known = set(nodes)
    for (i, j) in links:
        if i not in known or j not in known:
            raise TopologyError(f"link {i}->{j} references an unknown node")
    flows = tuple(flows)
    if len({f.id for f in flows}) != len(flows):
        raise TopologyError("duplicate flow id")
    for f in flows:
        for n in f.path:
            if n not in known:
                raise TopologyError(f"flow {f.id} references unknown node {n}")
    topo = Topology(nodes, dict(links))
    if hyperarcs is None:
        hyperarcs = broadcast_hyperarcs(flows, topo.links)
    hyperarcs = tuple(hyperarcs)
    codebook = CodeBook({h.id: tuple(enumerate_codes(h, flows, topo, max_code_size))
                         for h in hyperarcs})
    for f in flows:
        for n in f.forwarders():
            if not any(s for h in hyperarcs if h.transmitter == n
                       for s in codebook.codes[h.id] if f.id in s):
                raise TopologyError(f"flow {f.id} cannot leave node {n}: no hyperarc reaches {f.next_hop(n)}")
    if cliques is None:
        conflict = conflict_cliques(topo, hyperarcs, interference, gamma)
    else:
        ids = {h.id for h in hyperarcs}
        conflict = ConflictStructure(tuple(frozenset(c) for c in cliques), gamma)
        for c in conflict.cliques:
            if not c <= ids:
                raise TopologyError(f"clique references unknown hyperarc {sorted(c - ids)[0]}")
        uncovered = ids - set().union(*conflict.cliques)
        if uncovered:
            raise TopologyError(f"hyperarc {sorted(uncovered)[0]} is in no clique")
    if pattern_links is None:
        pattern_links = default_pattern_links(flows, hyperarcs, codebook, topo)
    return Scenario(name, topo, flows, hyperarcs, codebook, conflict,
                    LossMatrix.for_links(topo.links, loss or {}), dict(pattern_links))


def default_pattern_links(flows, hyperarcs, codebook, topo):
    """Overhearing = every antidote link some code relies on; direct = the
    hops out of nodes that have a multi-flow code."""
    by_id = {f.id: f for f in flows}
    over, direct = set(), set()
    for h in hyperarcs:
        for code in codebook.codes[h.id]:
            if len(code) < 2:
                continue
            for a in code:
                fa = by_id[a]
                direct.add((h.transmitter, fa.next_hop(h.transmitter)))
                for b in code:
                    if a == b:
                        continue
                    origin = by_id[b].prev_hop(h.transmitter)
                    nh = fa.next_hop(h.transmitter)
                    if origin != nh:
                        over.add((origin, nh))
    return {"overhearing": tuple(sorted(over)), "direct": tuple(sorted(direct))}


def _ring_links(ring, relays, capacity):
    # end nodes sit on a circle around the relay; all but diametric pairs hear each other
    links = {}
    n = len(ring)
    for a, b in itertools.combinations(range(n), 2):
        if 2 * (b - a) == n:
            continue
        links[(ring[a], ring[b])] = capacity
        links[(ring[b], ring[a])] = capacity
    for r in relays:
        for v in ring:
            links[(r, v)] = capacity
            links[(v, r)] = capacity
    return links


def _parse_kind(kind):
    m = re.fullmatch(r"\s*([a-z_]+)\s*(?:\(\s*(\d+)\s*\))?\s*", kind)
    if not m:
        raise TopologyError(f"unknown topology kind {kind!r}")
    return m.group(1), (int(m.group(2)) if m.group(2) else None)


def build_canonical(kind, params=None):
    """Build one of: x, cross, wheel(n), multihop_chain.

    params may carry capacity, generation_size, max_code_size, gamma,
    interference and (for wheel) n.
    """
    p = dict(params or {})
    base, n = _parse_kind(kind)
    cap = float(p.pop("capacity", 1.0))
    G = int(p.pop("generation_size", 15))
    opts = dict(max_code_size=int(p.pop("max_code_size", 4)),
                gamma=float(p.pop("gamma", 1.0)))
    interference = p.pop("interference", None)
    if base == "wheel":
        n = n if n is not None else int(p.pop("n", 3))
    if p:
        raise TopologyError(f"unknown parameter {sorted(p)[0]!r} for {base}")

    if base == "x":
        ring = ["A1", "B2", "A2", "B1"]
        flows = [Flow("S1", ("A1", "I", "A2"), G), Flow("S2", ("B1", "I", "B2"), G)]
        return build_scenario(["A1", "B1", "I", "A2", "B2"], _ring_links(ring, ["I"], cap), flows,
                              name="x", interference=interference or "single_clique",
                              pattern_links={"overhearing": (("A1", "B2"),), "direct": (("I", "B2"),)},
                              **opts)
    if base == "cross":
        ring = ["A1", "B1", "A2", "B2"]
        flows = [Flow("S1", ("A1", "I", "A2"), G), Flow("S2", ("A2", "I", "A1"), G),
                 Flow("S3", ("B1", "I", "B2"), G), Flow("S4", ("B2", "I", "B1"), G)]
        return build_scenario(["A1", "A2", "B1", "B2", "I"], _ring_links(ring, ["I"], cap), flows,
                              name="cross", interference=interference or "single_clique",
                              pattern_links={"overhearing": (("A1", "B2"),), "direct": (("I", "B2"),)},
                              **opts)
    if base == "wheel":
        if n < 2:
            raise TopologyError("wheel needs at least 2 flows")
        ring = [f"W{j + 1}" for j in range(2 * n)]
        flows = [Flow(f"S{j + 1}", (ring[j], "I", ring[j + n]), G) for j in range(n)]
        return build_scenario(ring + ["I"], _ring_links(ring, ["I"], cap), flows,
                              name=f"wheel({n})", interference=interference or "single_clique", **opts)
    if base == "multihop_chain":
        return _multihop_chain(cap, G, interference or "all_in_range", opts)
    raise TopologyError(f"unknown topology kind {kind!r}")


def _multihop_chain(cap, G, interference, opts):
    # two X neighbourhoods sharing the middle pair (A2, B2)
    nodes = ["A1", "B1", "I1", "A2", "B2", "I2", "A3", "B3"]
    pairs = [("I1", "A1"), ("I1", "B1"), ("I1", "A2"), ("I1", "B2"),
             ("A1", "B2"), ("B1", "A2"), ("A1", "B1"), ("A2", "B2"),
             ("I2", "A2"), ("I2", "B2"), ("I2", "A3"), ("I2", "B3"),
             ("A2", "B3"), ("B2", "A3"), ("A3", "B3")]
    links = {}
    for a, b in pairs:
        links[(a, b)] = cap
        links[(b, a)] = cap
    flows = [Flow("S1", ("A1", "I1", "A2", "I2", "A3"), G),
             Flow("S2", ("B1", "I1", "B2", "I2", "B3"), G)]
    return build_scenario(nodes, links, flows, name="multihop_chain",
                          interference=interference, **opts)
