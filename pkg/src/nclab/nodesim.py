"""Slotted packet-level simulation of relay nodes doing generation coding
plus XOR coding, with COPE-like and uncoded baselines.

Time advances in slots of one packet airtime. Each conflict clique carries
at most one broadcast per slot. A broadcast reaches every node with a link
from the sender; each reception is an independent Bernoulli draw.
"""
from __future__ import annotations

import heapq
import math
import random
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import coding
from .lossmodel import LossEstimator, draw, generation_sample

SCHEMES = ("i2nc_state", "i2nc_stateless", "cope", "nonc")
SCHEDULERS = ("idealized_backpressure", "random_access")
TRAFFIC = ("cbr", "window")

# a generation's loss sample is taken once packets two generations newer show up
SAMPLE_LAG = 2
# decoding state older than this many generations behind the newest is dropped
KEEP_GENERATIONS = 48


class SimError(ValueError):
    pass


@dataclass
class SimConfig:
    scheme: str = "i2nc_state"
    duration: float = 60.0              # seconds
    seeds: int = 10
    traffic: str = "cbr"
    cbr_interval: float = 1e-4          # seconds between source packets
    generation_size: int | None = None  # None: take it from each flow
    cope_threshold: float = 0.20
    decodability_threshold: float = 0.20
    scheduler: str = "idealized_backpressure"
    queue_capacity: int = 100
    payload_bytes: int = 500
    link_rate: float = 1e6              # bits/s; sets the slot length
    report_cost: float = 1.0            # slots per completed flow generation
    ack_cost: float = 0.0               # slots per hop-by-hop ACK
    carry_payload: bool = False
    window_init: int = 2
    window_max: int = 64
    window_rto: int = 50                # slots without transport ACK progress

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise SimError(f"unknown scheme {self.scheme!r}")
        if self.scheduler not in SCHEDULERS:
            raise SimError(f"unknown scheduler {self.scheduler!r}")
        if self.traffic not in TRAFFIC:
            raise SimError(f"unknown traffic {self.traffic!r}")
        for name in ("cope_threshold", "decodability_threshold"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise SimError(f"{name} must lie in [0, 1]")
        if self.duration < 0 or self.cbr_interval <= 0 or self.link_rate <= 0:
            raise SimError("duration must be >= 0; cbr_interval and link_rate > 0")
        if self.queue_capacity < 1 or self.payload_bytes < 1 or self.seeds < 1:
            raise SimError("queue_capacity, payload_bytes and seeds must be >= 1")
        if self.report_cost < 0 or self.ack_cost < 0:
            raise SimError("costs must be >= 0")
        if self.generation_size is not None and self.generation_size < 1:
            raise SimError("generation_size must be >= 1")

    @property
    def slot(self):
        return self.payload_bytes * 8.0 / self.link_rate

    @property
    def arq(self):
        return self.scheme != "i2nc_stateless"

    @property
    def parities(self):
        return self.scheme in ("i2nc_state", "i2nc_stateless")


@dataclass
class SimResult:
    scheme: str
    seed: int
    flows: tuple
    delivered: dict                 # flow -> decoded original packets
    throughput: dict                # flow -> bits/s
    slots: int
    transmissions: int = 0
    coded_transmissions: int = 0
    xi_sizes: dict = field(default_factory=dict)
    missed_coding: int = 0          # broadcasts that left a codable partner behind
    drops: int = 0
    injected: dict = field(default_factory=dict)

    @property
    def total(self):
        return sum(self.throughput.values())

    @property
    def total_packets(self):
        return sum(self.delivered.values())


class Packet:
    __slots__ = ("pid", "flow", "gen", "coeffs", "payload", "pair", "label",
                 "origin", "rx_time", "local", "seq", "blk", "nxt", "retry")

    def __init__(self, pid, flow, gen, coeffs, payload, origin=None, rx_time=-1, local=False):
        self.pid = pid
        self.flow = flow
        self.gen = gen
        self.coeffs = coeffs
        self.payload = payload
        self.pair = None
        self.label = None
        self.origin = origin      # node that handed it to us
        self.rx_time = rx_time
        self.local = local        # parity made here, nobody else has seen it
        self.seq = 0              # position in the node's output queue
        self.nxt = None           # next hop of the label flow
        self.blk = None           # node whose queue it will join, if any
        self.retry = False        # resent after a timeout

    @property
    def key(self):
        return (self.flow, self.gen)


def drop_policy(queue_values, queued_flows, arriving):
    """Which packet to drop from a full queue.

    queue_values maps flow -> Q_i^s. Returns "incoming" or the flow whose
    last queued packet goes.
    """
    flows = set(queued_flows) | {arriving}
    best = max(queue_values.get(f, 0.0) for f in flows)
    top = [f for f in flows if queue_values.get(f, 0.0) == best]
    if len(top) > 1 or top[0] == arriving:
        return "incoming"
    return top[0]


def combined_probability(probs):
    p = 1.0
    for v in probs:
        p *= v
    return p


class Node:
    def __init__(self, nid, rng, payload_len):
        self.id = nid
        self.rng = rng
        self.pairs = []           # (hyperarc, code) with code a tuple of flow ids
        self.subs = []            # per pair, pairs on the same hyperarc with a smaller code
        self.options = {}         # flow -> pair indices able to carry it
        self.q = {}               # (pair, flow) -> virtual queue
        self.queues = []          # per pair, packets in arrival order
        self.targets = []         # per pair, blk -> packets queued
        self.qlen = 0             # queued + awaiting ACK
        self.inflight = {}        # pid -> packet
        self.recv = coding.BlockReceiver(payload_len)
        self.heard_at = {}        # pid -> slot a native was overheard
        self.last_report = -1
        self.est = {}             # (sender, flow) -> LossEstimator
        self.reported = {}        # (sender, flow) -> last reported estimate
        self.obs = {}             # (sender, flow) -> {generation: received}
        self.gcount = {}          # (flow, gen) -> {pair: packets labelled}
        self.maxgen = {}
        self.rtt = 2.0

    def loss_estimate(self, sender, flow):
        return self.reported.get((sender, flow), 0.0)

    def add_pair(self, h, code):
        p = len(self.pairs)
        self.pairs.append((h, tuple(code)))
        self.queues.append(deque())
        self.targets.append({})
        for s in code:
            self.options.setdefault(s, []).append(p)
            self.q[(p, s)] = 0.0

    def push(self, pkt, front=False):
        dq = self.queues[pkt.pair]
        dq.appendleft(pkt) if front else dq.append(pkt)
        t = self.targets[pkt.pair]
        t[pkt.blk] = t.get(pkt.blk, 0) + 1
        self.qlen += 1

    def release(self, pkt):
        self.qlen -= 1

    def pop(self, pkt, release=True):
        self.queues[pkt.pair].remove(pkt)
        self.targets[pkt.pair][pkt.blk] -= 1
        if release:
            self.release(pkt)

    def purge(self, pred):
        for p, dq in enumerate(self.queues):
            if not dq:
                continue
            gone = [x for x in dq if pred(x)]
            if gone:
                self.queues[p] = deque(x for x in dq if not pred(x))
                for x in gone:
                    self.targets[p][x.blk] -= 1
                    self.release(x)
        for pid in [pid for pid, x in self.inflight.items() if pred(x)]:
            self.release(self.inflight.pop(pid))


class Simulation:
    def __init__(self, scenario, config, seed):
        self.cfg = config
        self.seed = seed
        sc = scenario.without_coding() if config.scheme == "nonc" else scenario
        self.sc = sc
        self.G = {f.id: (config.generation_size or f.generation_size) for f in sc.flows}
        self.flows = {f.id: f for f in sc.flows}
        self.order = [f.id for f in sc.flows]
        self.nhop = {(f.id, n): f.next_hop(n) for f in sc.flows for n in f.path}
        self.prev = {(f.id, n): f.prev_hop(n) for f in sc.flows for n in f.path}
        self.chan = random.Random(f"{seed}:channel")
        self.mac = random.Random(f"{seed}:mac")
        self.coef_rng = np.random.default_rng(stable_seed(seed))
        self.L = config.payload_bytes if config.carry_payload else 0
        self.nodes = {n: Node(n, random.Random(f"{seed}:{n}"), self.L) for n in sc.topology.nodes}
        self.node_list = [self.nodes[n] for n in sc.topology.nodes]
        self.hear = {n: [j for j in sc.topology.nodes if sc.topology.has_link(n, j)]
                     for n in sc.topology.nodes}
        self.harc = {h.id: h for h in sc.hyperarcs}
        self.clique_of = {h.id: [i for i, c in enumerate(sc.conflict.cliques) if h.id in c]
                          for h in sc.hyperarcs}
        for h in sc.hyperarcs:
            node = self.nodes[h.transmitter]
            for code in sc.codebook.codes[h.id]:
                node.add_pair(h.id, code)
        for node in self.node_list:
            node.subs = [[o for o, (h2, c2) in enumerate(node.pairs)
                          if o != p and h2 == h and set(c2) < set(c)]
                         for p, (h, c) in enumerate(node.pairs)]
        # new data stops one generation short of a full queue so parities still fit
        self.admit = max(1, config.queue_capacity - max(self.G.values()))
        self.pid = 0
        self.seq = 0
        self.events = {}
        self.debt = [0.0] * len(sc.conflict.cliques)
        self.delivered = {f: 0 for f in self.order}
        self.injected = {f: 0 for f in self.order}
        self.drops = 0
        self.tx = 0
        self.coded_tx = 0
        self.xi_sizes = {}
        self.missed = 0
        self.now = 0
        self.src = {f.id: dict(gen=-1, enc=None, cwnd=float(config.window_init), acked=0, sent=0,
                               gsize={}, gacked={}, last_ack=0) for f in sc.flows}
        self.done = set()         # (flow, gen) decoded at the destination

    # -- helpers --------------------------------------------------------

    def new_pid(self):
        self.pid += 1
        return self.pid

    def at(self, slot, ev):
        self.events.setdefault(slot, []).append(ev)

    def gsize(self, fid, gen):
        return self.src[fid]["gsize"].get(gen, self.G[fid])

    def direct_est(self, node, flow):
        return self.nodes[self.nhop[(flow, node)]].loss_estimate(node, flow)

    def antidote_est(self, node, label_flow, content_flow):
        """Estimated loss of content_flow's packets at label_flow's next hop."""
        if label_flow == content_flow:
            return 0.0
        nxt = self.nhop[(label_flow, node)]
        origin = self.prev[(content_flow, node)]
        if origin == nxt:
            return 0.0
        if origin is None:
            return 1.0
        return self.nodes[nxt].loss_estimate(origin, content_flow)

    def coupling(self, node, label_flow, content_flow):
        r = self.antidote_est(node, label_flow, content_flow)
        if r and self.cfg.scheme == "i2nc_stateless":
            d = self.direct_est(node, label_flow)
            r = r / (1.0 - d) if d < 1.0 else r
        return r

    def price(self, node, p, s):
        """Q_{h,k}^s: what labelling one more packet of s onto pair p costs."""
        _, code = node.pairs[p]
        d = self.direct_est(node.id, s)
        v = node.q[(p, s)] / (1.0 - d) if d < 1.0 else math.inf
        for o in code:
            if o != s:
                c = self.coupling(node.id, o, s)
                if c:
                    v += c * node.q[(p, o)]
        return v

    def node_queue_value(self, node, s):
        return min(self.price(node, p, s) for p in node.options[s])

    # -- Alg. 1: insert, label, parities --------------------------------

    def label(self, node, pkt, label_flow=None, count=True):
        s = pkt.flow if label_flow is None else label_flow
        opts = node.options[s]
        if len(opts) == 1:
            p = opts[0]
        else:
            prices = [self.price(node, o, s) for o in opts]
            best = min(prices)
            ties = [o for o, v in zip(opts, prices) if v == best]
            p = ties[0] if len(ties) == 1 else ties[node.rng.randrange(len(ties))]
        self.set_label(node, pkt, p, s)
        if count:
            _, code = node.pairs[p]
            d = self.direct_est(node.id, s)
            node.q[(p, s)] += 1.0 / (1.0 - d) if d < 1.0 else 0.0
            for o in code:
                if o != s:
                    node.q[(p, o)] += self.coupling(node.id, o, s)
            g = node.gcount.setdefault(pkt.key, {})
            g[p] = g.get(p, 0) + 1
        return p

    def set_label(self, node, pkt, p, s):
        pkt.pair, pkt.label = p, s
        nxt = self.nhop[(s, node.id)]
        pkt.nxt = nxt
        f = self.flows[pkt.flow]
        fwd = self.nhop.get((pkt.flow, node.id)) == nxt and nxt != f.destination
        pkt.blk = nxt if fwd else None

    def enqueue(self, node, pkt, front=False):
        if node.qlen >= self.cfg.queue_capacity:
            queued = {x.flow for dq in node.queues for x in dq}
            vals = {f: self.node_queue_value(node, f) for f in queued | {pkt.flow}
                    if f in node.options}
            victim = drop_policy(vals, queued, pkt.flow)
            self.drops += 1
            if victim == "incoming":
                return False
            self._drop_last(node, victim)
        if not front:
            # a retransmission goes back to the head with its old position
            self.seq += 1
            pkt.seq = self.seq
        node.push(pkt, front)
        return True

    def _drop_last(self, node, flow):
        best = None
        for dq in node.queues:
            for i in range(len(dq) - 1, -1, -1):
                if dq[i].flow == flow:
                    if best is None or dq[i].seq > best.seq:
                        best = dq[i]
                    break
        if best is not None:
            node.pop(best)

    def arrive(self, node, pkt):
        """A packet to be forwarded enters node's output queue."""
        self.label(node, pkt)
        self.enqueue(node, pkt)
        key = pkt.key
        if self.cfg.parities and node.recv.rank(key) == self.gsize(*key):
            self.make_parities(node, key)

    def make_parities(self, node, key):
        flow, gen = key
        counts = node.gcount.pop(key, {})
        if not counts:
            return
        variant = "state" if self.cfg.scheme == "i2nc_state" else "stateless"
        for p, g_alloc in sorted(counts.items()):
            _, code = node.pairs[p]
            others = [o for o in code if o != flow]
            rd = self.direct_est(node.id, flow)
            if rd >= 1.0:
                continue
            own, cross = coding.parity_counts(
                g_alloc, rd,
                {o: self.antidote_est(node.id, o, flow) for o in others},
                {o: min(self.direct_est(node.id, o), 0.999) for o in others},
                variant)
            for lab, n in [(flow, own)] + list(cross.items()):
                for pkt in self.parity_packets(node, key, n):
                    self.set_label(node, pkt, p, lab)
                    self.enqueue(node, pkt)

    def parity_packets(self, node, key, n):
        sp = node.recv.spaces.get(key)
        if n <= 0 or sp is None or sp.rank == 0:
            return []
        out = []
        G = sp.G
        for _ in range(n):
            w = coding.random_coefficients(self.coef_rng, sp.rank)
            row = coding.combine(w, sp.rows)
            out.append(Packet(self.new_pid(), key[0], key[1], row[:G].copy(),
                              row[G:].copy() if self.L else None, local=True, rx_time=self.now))
        return out

    # -- sources ------------------------------------------------------------

    def inject(self, fid, n):
        f = self.flows[fid]
        node = self.nodes[f.source]
        st = self.src[fid]
        for _ in range(n):
            enc = st["enc"]
            if enc is None or enc.count >= enc.G:
                st["gen"] += 1
                G = self.G[fid]
                if self.cfg.traffic == "window":
                    G = max(1, min(self.cfg.window_max, int(st["cwnd"])))
                st["gsize"][st["gen"]] = G
                enc = st["enc"] = coding.IncrementalEncoder(fid, st["gen"], G)
                node.maxgen[fid] = st["gen"]
                self._prune(node, fid, st["gen"])
            payload = (self.coef_rng.integers(0, 256, self.L, dtype=np.uint8)
                       if self.L else np.zeros(0, np.uint8))
            cp = enc.push(payload)
            pkt = Packet(self.new_pid(), fid, enc.generation, cp.coeffs,
                         cp.payload if self.L else None, rx_time=self.now)
            node.recv.add_native(cp)
            self.injected[fid] += 1
            st["sent"] += 1
            self.arrive(node, pkt)

    def source_room(self, fid):
        node = self.nodes[self.flows[fid].source]
        room = self.admit - node.qlen
        if self.cfg.traffic == "window":
            st = self.src[fid]
            room = min(room, int(st["cwnd"]) - (st["sent"] - st["acked"]))
        return max(0, room)

    # -- Alg. 2: pick a pair and build the XOR set -----------------------

    def antidote_prob(self, node, x, m):
        """Chance that node x can strip packet m out of an XOR."""
        xn = self.nodes[x]
        if xn.recv.rank(m.key) == self.gsize(*m.key):
            return 1.0
        if m.local:
            return 0.0
        if m.origin == x:
            return 1.0
        t = xn.heard_at.get(m.pid)
        if t is not None and t <= xn.last_report:
            return 1.0
        if m.rx_time > xn.last_report and m.origin is not None:
            return 1.0 - xn.loss_estimate(m.origin, m.flow)
        return 0.0

    def fits(self, node, xi, cand):
        """State and COPE admission test for adding cand to xi."""
        members = xi + [cand]
        cope = self.cfg.scheme == "cope"
        for a in members:
            x = a.nxt
            probs = []
            for m in members:
                if m is a or m.key == a.key:
                    continue
                if cope:
                    if m.origin is None:
                        return False
                    if max(self.nodes[x].loss_estimate(m.origin, m.flow),
                           self.direct_est(node.id, a.label)) > self.cfg.cope_threshold:
                        return False
                probs.append(self.antidote_prob(node, x, m))
            if probs and combined_probability(probs) < self.cfg.decodability_threshold:
                return False
        return True

    def sendable(self, node, p):
        cap = self.admit
        for b, n in node.targets[p].items():
            if n > 0 and (b is None or self.nodes[b].qlen < cap):
                return True
        return False

    def build_xi(self, node, p):
        h, code = node.pairs[p]
        xi, labels = [], set()
        check = self.cfg.scheme in ("i2nc_state", "cope")
        cap = self.admit
        # packets of sub-codes on the same hyperarc may ride along
        subs = [o for o in node.subs[p] if node.queues[o]]
        if subs:
            scan = heapq.merge(node.queues[p], *(node.queues[o] for o in subs),
                               key=lambda x: x.seq)
        else:
            scan = node.queues[p]
        avail = set()
        full = {b for b, n in node.targets[p].items()
                if n and b is not None and self.nodes[b].qlen >= cap}
        for o in subs:
            full |= {b for b, n in node.targets[o].items()
                     if n and b is not None and self.nodes[b].qlen >= cap}
        for pkt in scan:
            if pkt.label in labels:
                continue
            if full and pkt.blk in full:
                continue
            avail.add(pkt.label)
            if xi and check and not self.fits(node, xi, pkt):
                continue
            # a fresh parity is unknown everywhere; two of them from different
            # flows can only be stripped once a receiver holds a whole generation
            if pkt.local and any(x.local and x.flow != pkt.flow for x in xi):
                continue
            xi.append(pkt)
            labels.add(pkt.label)
            if len(xi) == len(code):
                break
        return xi, avail

    def weight(self, node, p):
        h, code = node.pairs[p]
        R = self.harc[h].capacity
        return R * sum(node.q[(p, s)] for s in code)

    def candidate(self, node):
        """(weight, pair, xi, labels seen) of the node's best sendable pair."""
        if node.qlen == 0:
            return None
        ranked = [(self.weight(node, p), p) for p in range(len(node.pairs))
                  if node.queues[p] and self.sendable(node, p)]
        if not ranked:
            return None
        ranked.sort(key=lambda t: -t[0])
        i = 0
        while i < len(ranked):
            j = i
            while j < len(ranked) and ranked[j][0] == ranked[i][0]:
                j += 1
            group = ranked[i:j]
            if len(group) > 1:
                node.rng.shuffle(group)
            for w, p in group:
                xi, avail = self.build_xi(node, p)
                if xi:
                    return w, p, xi, avail
            i = j
        return None

    # -- transmission and reception -------------------------------------

    def transmit(self, node, p, xi, avail):
        h, code = node.pairs[p]
        arq = self.cfg.arq
        for pkt in xi:
            node.pop(pkt, release=not arq)
        R = self.harc[h].capacity
        for sp in {p} | {pkt.pair for pkt in xi}:
            for s in node.pairs[sp][1]:
                node.q[(sp, s)] = max(0.0, node.q[(sp, s)] - R)
        n = len(xi)
        self.tx += 1
        self.xi_sizes[n] = self.xi_sizes.get(n, 0) + 1
        if n > 1:
            self.coded_tx += 1
        if n < min(len(code), len(avail)):
            self.missed += 1
        if arq:
            due = self.now + max(2, int(math.ceil(node.rtt)))
            for pkt in xi:
                node.inflight[pkt.pid] = pkt
                self.at(due, ("timeout", node.id, pkt.pid))
        empty = np.zeros(0, np.uint8)
        cps = [coding.CodedPacket(x.flow, x.gen, x.pid, x.coeffs,
                                  x.payload if self.L else empty, (h, None, x.label)) for x in xi]
        cp = cps[0] if n == 1 else coding.inter_encode(cps, [x.nxt for x in xi])
        addressed = {}
        for x in xi:
            addressed.setdefault(x.nxt, []).append(x)
        # loss samples count first attempts only, like a MAC retry bit
        keys = {x.key for x in xi if not x.retry}
        for j in self.hear[node.id]:
            if draw(self.chan, self.sc.loss.rho(node.id, j)):
                self.receive(self.nodes[j], node, xi, cp, keys, addressed.get(j))
        if not arq:
            for x in xi:
                if x.blk is not None or x.nxt == self.flows[x.flow].destination:
                    if self.nhop[(x.flow, node.id)] == x.nxt:
                        self.at(self.now + 1, ("report", node.id, x.nxt, x.key))

    def observe(self, rx, sender, keys):
        for flow, gen in keys:
            k = (sender, flow)
            o = rx.obs.get(k)
            if o is None:
                o = rx.obs[k] = {}
            if gen in o:
                o[gen] += 1
                continue
            if o and gen < min(o):
                continue            # a straggler from a generation already sampled
            o[gen] = 1
            for g in [g for g in o if g <= gen - SAMPLE_LAG]:
                est = rx.est.setdefault(k, LossEstimator())
                est.add(generation_sample(o.pop(g), self.gsize(flow, g)))
                rx.reported[k] = est.estimate()
                rx.last_report = self.now

    def receive(self, rx, sender, xi, cp, keys, mine):
        self.observe(rx, sender.id, keys)
        if not mine:
            # overheard: keep natives of flows this node does not carry
            if len(xi) == 1:
                pkt = xi[0]
                if rx.id not in self.flows[pkt.flow].path:
                    rx.heard_at[pkt.pid] = self.now
                    # the antidote may unlock pending equations of other flows
                    self.absorb(rx, sender, rx.recv.add_native(cp), {})
            return
        if len(xi) == 1:
            rows, ok = rx.recv.add_native(cp), True
        else:
            rows, ok = rx.recv.add_coded(cp)
        self.absorb(rx, sender, rows, {x.key: x for x in mine if x.flow == x.label})
        if self.cfg.arq and ok:
            # nothing left pending: every addressed part was absorbed or already known
            self.at(self.now + 1, ("ack", sender.id, tuple(x.pid for x in mine)))
            self.charge(rx.id, self.cfg.ack_cost)

    def charge(self, node_id, cost, toward=None):
        """Put control airtime on the cliques of node_id's hyperarc."""
        if cost <= 0:
            return
        for h in self.sc.hyperarcs_of(node_id):
            if toward is None or toward in h.receivers:
                for c in self.clique_of[h.id]:
                    self.debt[c] += cost
                return

    def absorb(self, rx, sender, rows, natives):
        """Route rows that raised a rank at rx: deliver, forward, or keep."""
        for key, v, payload in rows:
            flow, gen = key
            f = self.flows[flow]
            prev = self.prev.get((flow, rx.id))
            if prev is None:
                continue            # side information, or our own flow
            G = self.gsize(flow, gen)
            if rx.id == f.destination:
                if key in self.done:
                    continue
                if rx.recv.rank(key) == G:
                    self.complete(rx, key, prev)
                elif self.cfg.traffic == "window":
                    self.at(self.now + len(f.path) - 1, ("tack", flow, gen, rx.recv.rank(key)))
                continue
            nat = natives.get(key)
            pid = nat.pid if nat is not None and np.array_equal(nat.coeffs, v) else self.new_pid()
            pkt = Packet(pid, flow, gen, v, payload, origin=prev, rx_time=self.now)
            if gen > rx.maxgen.get(flow, -1):
                rx.maxgen[flow] = gen
                self._prune(rx, flow, gen)
            self.arrive(rx, pkt)
            if rx.recv.rank(key) == G:
                self.at(self.now + 1, ("full", prev, rx.id, key))

    def complete(self, rx, key, prev):
        flow, gen = key
        self.done.add(key)
        self.delivered[flow] += self.gsize(flow, gen)
        f = self.flows[flow]
        # the per-generation control report from the destination
        self.charge(prev, self.cfg.report_cost, toward=rx.id)
        if self.cfg.traffic == "window":
            self.at(self.now + len(f.path) - 1, ("tack", flow, gen, self.gsize(flow, gen)))
        self.at(self.now + 1, ("full", prev, rx.id, key))
        rx.recv.forget(key)

    def _prune(self, node, flow, gen):
        old = (flow, gen - KEEP_GENERATIONS)
        node.recv.forget(old)
        node.gcount.pop(old, None)

    # -- events -----------------------------------------------------------

    def run_events(self):
        evs = self.events.pop(self.now, None)
        if not evs:
            return
        for ev in evs:
            kind = ev[0]
            if kind == "ack":
                node = self.nodes[ev[1]]
                for pid in ev[2]:
                    pkt = node.inflight.pop(pid, None)
                    if pkt is not None:
                        node.release(pkt)
                node.rtt = 0.875 * node.rtt + 0.125 * 2.0
            elif kind == "timeout":
                node = self.nodes[ev[1]]
                pkt = node.inflight.pop(ev[2], None)
                if pkt is not None:
                    node.release(pkt)
                    if pkt.key in self.done and pkt.nxt == self.flows[pkt.flow].destination:
                        continue
                    pkt.retry = True
                    self.enqueue(node, pkt, front=True)
            elif kind == "full":
                _, sid, rid, key = ev
                self.nodes[sid].purge(lambda x: x.key == key and x.nxt == rid)
            elif kind == "report":
                self.topup(*ev[1:])
            elif kind == "tack":
                self.transport_ack(*ev[1:])

    def topup(self, sid, rid, key):
        """Stateless: the next hop's count for a generation came back short."""
        node = self.nodes[sid]
        flow, gen = key
        G = self.gsize(flow, gen)
        if key in self.done or node.recv.rank(key) < G:
            return
        for dq in node.queues:
            for x in dq:
                if x.key == key and x.nxt == rid:
                    return
        r = self.nodes[rid].recv.rank(key)
        if r >= G:
            return
        # repairs jump the queue like retransmissions do
        for pkt in self.parity_packets(node, key, G - r):
            self.label(node, pkt, count=False)
            self.enqueue(node, pkt, front=True)

    def transport_ack(self, flow, gen, count):
        st = self.src[flow]
        prev = st["gacked"].get(gen, 0)
        if count <= prev:
            return
        st["gacked"][gen] = count
        new = count - prev
        st["acked"] += new
        st["cwnd"] = min(float(self.cfg.window_max), st["cwnd"] + new / st["cwnd"])
        st["last_ack"] = self.now

    def window_timeouts(self):
        for st in self.src.values():
            if st["sent"] > st["acked"] and self.now - st["last_ack"] > self.cfg.window_rto:
                st["cwnd"] = max(1.0, st["cwnd"] / 2.0)
                st["last_ack"] = self.now
                # the stalled packets are written off so the window can move
                st["acked"] = st["sent"]

    # -- main loop --------------------------------------------------------------

    def run(self):
        cfg = self.cfg
        slots = int(round(cfg.duration / cfg.slot))
        per_slot = cfg.slot / cfg.cbr_interval
        credit = {f: 0.0 for f in self.order}
        ideal = cfg.scheduler == "idealized_backpressure"
        for t in range(slots):
            self.now = t
            self.run_events()
            for fid in self.order:
                if cfg.traffic == "cbr":
                    credit[fid] += per_slot
                    n = int(credit[fid])
                    credit[fid] -= n
                else:
                    n = self.source_room(fid)
                take = min(n, self.source_room(fid))
                self.drops += n - take
                if take:
                    self.inject(fid, take)
            if cfg.traffic == "window":
                self.window_timeouts()
            busy = set()
            for c, d in enumerate(self.debt):
                if d >= 1.0:
                    self.debt[c] = d - 1.0
                    busy.add(c)
            cands = []
            for node in self.node_list:
                got = self.candidate(node)
                if got is not None:
                    cands.append((got[0], self.mac.random(), node, got))
            if not cands:
                continue
            if ideal:
                cands.sort(key=lambda c: (-c[0], c[1]))
            else:
                cands.sort(key=lambda c: c[1])
            for w, _, node, (_, p, xi, avail) in cands:
                cl = self.clique_of[node.pairs[p][0]]
                if any(c in busy for c in cl):
                    continue
                busy.update(cl)
                self.transmit(node, p, xi, avail)
        self.now = slots
        bits = cfg.payload_bytes * 8
        thr = {f: (self.delivered[f] * bits / cfg.duration if cfg.duration > 0 else 0.0)
               for f in self.order}
        return SimResult(cfg.scheme, self.seed, tuple(self.order), dict(self.delivered), thr, slots,
                         self.tx, self.coded_tx, dict(sorted(self.xi_sizes.items())), self.missed,
                         self.drops, dict(self.injected))


def stable_seed(seed):
    # str hashing is salted per process; derive the numpy stream by hand
    return int.from_bytes(f"coeffs:{seed}".encode(), "little") % (2 ** 63)


def _config(config, overrides):
    cfg = config or SimConfig()
    if overrides:
        cfg = SimConfig(**{**cfg.__dict__, **overrides})
    return cfg


def run_simulation(scenario, config=None, seed=0, **overrides):
    return Simulation(scenario, _config(config, overrides), seed).run()


def run_seeds(scenario, config=None, seeds=None, **overrides):
    cfg = _config(config, overrides)
    seeds = range(cfg.seeds) if seeds is None else seeds
    return [run_simulation(scenario, cfg, s) for s in seeds]
