"""Generation coding over GF(2^8) and XOR inter-session coding.

Wire layouts (little-endian, no padding):

intra packet
    u64 block id | u32 packet id | u16 block size G | u16 payload length L
    | G bytes coefficients | L bytes payload

inter packet
    u8 count n | n x (u16 flow, u64 block id, u32 packet id, u16 next hop, u16 label flow)
    | u8 m | m x (u16 flow, u64 block id, u16 block size G, G bytes coefficients)
    | u16 payload length L | L bytes xor payload

The inter header is sent in the clear; only the payload and the per-block
coefficient vectors are XOR-combined.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

PRIM_POLY = 0x11D


def _tables():
    exp = np.zeros(512, dtype=np.int64)
    log = np.zeros(256, dtype=np.int64)
    v = 1
    for i in range(255):
        exp[i] = v
        log[v] = i
        v <<= 1
        if v & 0x100:
            v ^= PRIM_POLY
    exp[255:510] = exp[:255]
    a = np.arange(256)
    mul = exp[(log[:, None] + log[None, :]) % 255].astype(np.uint8)
    mul[0, :] = 0
    mul[:, 0] = 0
    inv = np.zeros(256, dtype=np.uint8)
    inv[1:] = exp[(255 - log[1:]) % 255]
    return exp.astype(np.uint8), log, mul, inv


EXP, LOG, MUL, INV = _tables()


class CodingError(ValueError):
    pass


class Undecodable(CodingError):
    pass


def gf_mul(a, b):
    return MUL[np.asarray(a, dtype=np.uint8), np.asarray(b, dtype=np.uint8)]


def gf_inv(a):
    a = np.asarray(a, dtype=np.uint8)
    if np.any(a == 0):
        raise ZeroDivisionError("0 has no inverse in GF(256)")
    return INV[a]


def as_bytes(payload):
    if isinstance(payload, np.ndarray):
        return payload.astype(np.uint8, copy=False)
    return np.frombuffer(bytes(payload), dtype=np.uint8).copy()


@dataclass
class CodedPacket:
    flow: int
    generation: int
    pid: int
    coeffs: np.ndarray                 # uint8, length G
    payload: np.ndarray                # uint8
    label: tuple | None = None         # (hyperarc, code, flow) chosen on enqueue

    @property
    def G(self):
        return len(self.coeffs)

    def to_bytes(self):
        head = struct.pack("<QIHH", self.generation, self.pid, self.G, len(self.payload))
        return head + self.coeffs.tobytes() + self.payload.tobytes()

    @classmethod
    def from_bytes(cls, data, flow):
        g, pid, G, L = struct.unpack_from("<QIHH", data)
        off = struct.calcsize("<QIHH")
        if len(data) != off + G + L:
            raise CodingError("truncated intra packet")
        c = np.frombuffer(data, np.uint8, G, off).copy()
        p = np.frombuffer(data, np.uint8, L, off + G).copy()
        return cls(flow, g, pid, c, p)


class IncrementalEncoder:
    """a_l = p_1 + ... + p_l, released as each p_l arrives."""

    def __init__(self, flow, generation, G, first_pid=0):
        self.flow, self.generation, self.G = flow, generation, G
        self.acc = None
        self.count = 0
        self.next_pid = first_pid

    def push(self, payload):
        if self.count >= self.G:
            raise CodingError("generation already complete")
        p = as_bytes(payload)
        if self.acc is None:
            self.acc = p.copy()
        else:
            if len(p) != len(self.acc):
                raise CodingError("payload lengths differ within a generation")
            self.acc = self.acc ^ p
        self.count += 1
        c = np.zeros(self.G, dtype=np.uint8)
        c[:self.count] = 1
        pkt = CodedPacket(self.flow, self.generation, self.next_pid, c, self.acc.copy())
        self.next_pid += 1
        return pkt


def incremental_encode(payloads, flow=0, generation=0):
    enc = IncrementalEncoder(flow, generation, len(payloads))
    return [enc.push(p) for p in payloads]


def _ceil(v):
    # the formulas are exact ratios; guard against 3.0000000000000004
    return int(math.ceil(v - 1e-9))


def parity_counts(G_alloc, rho_direct, rho_antidote, rho_direct_partner=None, variant="state"):
    """Parities for G_alloc packets of flow s sent on one (hyperarc, code).

    rho_antidote maps each partner s' to the loss of s's packets at s''s
    next hop (the antidote link); rho_direct_partner maps s' to its own
    direct loss (stateless only). Returns (own parities, {s': parities
    generated from s and labelled s'}).
    """
    if variant not in ("state", "stateless"):
        raise CodingError(f"unknown variant {variant!r}")
    if rho_direct >= 1.0:
        raise CodingError("direct loss 1: flow cannot be served")
    own = _ceil(G_alloc * rho_direct / (1.0 - rho_direct))
    cross = {}
    for other, r in rho_antidote.items():
        if variant == "state":
            cross[other] = _ceil(G_alloc * r)
        else:
            rp = (rho_direct_partner or {}).get(other, 0.0)
            if rp >= 1.0:
                raise CodingError(f"partner {other} has direct loss 1")
            cross[other] = _ceil(G_alloc * r / (1.0 - rp))
    return own, cross


def random_coefficients(rng, n):
    while True:
        c = rng.integers(0, 256, size=n, dtype=np.uint8) if hasattr(rng, "integers") \
            else np.array([rng.randrange(256) for _ in range(n)], dtype=np.uint8)
        if c.any():
            return c


def combine(coeffs, rows):
    """XOR-sum of coeffs[i] * rows[i] over GF(256)."""
    if len(rows) == 0:
        return None
    return np.bitwise_xor.reduce(MUL[np.asarray(coeffs, np.uint8)[:, None], rows], axis=0)


def rlnc_parities(buffer, n, rng, first_pid=0):
    if n == 0:
        return []
    if not buffer:
        raise CodingError("cannot code over an empty buffer")
    C = np.stack([p.coeffs for p in buffer])
    P = np.stack([p.payload for p in buffer])
    out = []
    for j in range(n):
        w = random_coefficients(rng, len(buffer))
        b = buffer[0]
        out.append(CodedPacket(b.flow, b.generation, first_pid + j, combine(w, C), combine(w, P)))
    return out


class Subspace:
    """Row space over GF(256) kept in reduced row-echelon form.

    Rows are coefficient vectors of width G, optionally followed by a
    payload block that rides along every row operation.
    """

    def __init__(self, G, payload_len=0):
        self.G = G
        self.width = G + payload_len
        self._buf = np.zeros((G, self.width), dtype=np.uint8)
        self.pivots = []

    @property
    def rows(self):
        return self._buf[:len(self.pivots)]

    @property
    def rank(self):
        return len(self.pivots)

    def full(self):
        return len(self.pivots) == self.G

    def reduce(self, v):
        if not self.pivots:
            return v.copy()
        c = v[self.pivots]
        nz = np.flatnonzero(c)
        if len(nz) == 0:
            return v.copy()
        if len(nz) == 1:
            return v ^ MUL[c[nz[0]], self._buf[nz[0]]]
        return v ^ np.bitwise_xor.reduce(MUL[c[nz, None], self._buf[nz]], axis=0)

    def contains(self, coeffs):
        if len(self.pivots) == self.G:
            return True
        r = self.reduce(np.concatenate([coeffs, np.zeros(self.width - self.G, np.uint8)])
                        if self.width > self.G else coeffs)
        return not r[:self.G].any()

    def insert(self, v):
        """Add a row; True when it raised the rank."""
        if len(self.pivots) == self.G:
            return False
        r = self.reduce(v)
        nz = np.flatnonzero(r[:self.G])
        if len(nz) == 0:
            return False
        p = int(nz[0])
        r = MUL[INV[r[p]], r]
        k = len(self.pivots)
        if k:
            rows = self._buf[:k]
            col = rows[:, p]
            nz = np.flatnonzero(col)
            if len(nz):
                rows[nz] ^= MUL[col[nz, None], r[None, :]]
        self._buf[k] = r
        self.pivots.append(p)
        return True

    def solution(self):
        """Payload of each original in order, once the rank is full."""
        if not self.full():
            raise Undecodable(f"rank {self.rank} < {self.G}")
        order = np.argsort(self.pivots)
        return self.rows[order, self.G:]


@dataclass
class DecodeResult:
    rank: int
    originals: list | None = None

    @property
    def decoded(self):
        return self.originals is not None


def intra_decode(received, G):
    if received:
        L = len(received[0].payload)
        if any(len(p.payload) != L for p in received):
            raise CodingError("payload lengths differ within a generation")
        keys = {(p.flow, p.generation) for p in received}
        if len(keys) > 1:
            raise CodingError("packets from more than one generation")
    else:
        L = 0
    sp = Subspace(G, L)
    for p in received:
        if len(p.coeffs) != G:
            raise CodingError("coefficient vector does not match the block size")
        sp.insert(np.concatenate([p.coeffs, p.payload]))
        if sp.full():
            break
    if not sp.full():
        return DecodeResult(sp.rank)
    return DecodeResult(G, [bytes(r) for r in sp.solution()])


# -- inter-session XOR ------------------------------------------------

@dataclass(frozen=True)
class Constituent:
    flow: int
    generation: int
    pid: int
    next_hop: int
    label_flow: int


@dataclass
class InterCodedPacket:
    constituents: tuple
    meta: dict            # (flow, generation) -> combined coefficient vector
    xor_payload: np.ndarray

    @property
    def count(self):
        return len(self.constituents)

    def to_bytes(self):
        out = [struct.pack("<B", self.count)]
        for c in self.constituents:
            out.append(struct.pack("<HQIHH", c.flow, c.generation, c.pid, c.next_hop, c.label_flow))
        out.append(struct.pack("<B", len(self.meta)))
        for (f, g), v in sorted(self.meta.items()):
            out.append(struct.pack("<HQH", f, g, len(v)) + v.tobytes())
        out.append(struct.pack("<H", len(self.xor_payload)) + self.xor_payload.tobytes())
        return b"".join(out)

    @classmethod
    def from_bytes(cls, data):
        off = 0
        (n,) = struct.unpack_from("<B", data, off)
        off += 1
        cons = []
        for _ in range(n):
            cons.append(Constituent(*struct.unpack_from("<HQIHH", data, off)))
            off += struct.calcsize("<HQIHH")
        (m,) = struct.unpack_from("<B", data, off)
        off += 1
        meta = {}
        for _ in range(m):
            f, g, G = struct.unpack_from("<HQH", data, off)
            off += struct.calcsize("<HQH")
            meta[(f, g)] = np.frombuffer(data, np.uint8, G, off).copy()
            off += G
        (L,) = struct.unpack_from("<H", data, off)
        off += 2
        payload = np.frombuffer(data, np.uint8, L, off).copy()
        if off + L != len(data):
            raise CodingError("trailing bytes after inter packet")
        return cls(tuple(cons), meta, payload)


def _label_flow(p):
    return p.label[2] if p.label is not None else p.flow


def inter_encode(packets, next_hops):
    if not packets:
        raise CodingError("nothing to code")
    labels = [_label_flow(p) for p in packets]
    if len(set(labels)) != len(labels):
        raise CodingError("coded packets must carry distinct flow labels")
    L = len(packets[0].payload)
    if any(len(p.payload) != L for p in packets):
        raise CodingError("payload lengths differ")
    body = packets[0].payload.copy()
    for p in packets[1:]:
        body ^= p.payload
    meta = {}
    for p in packets:
        k = (p.flow, p.generation)
        meta[k] = meta[k] ^ p.coeffs if k in meta else p.coeffs.copy()
    cons = tuple(Constituent(p.flow, p.generation, p.pid, nh, lf)
                 for p, nh, lf in zip(packets, next_hops, labels))
    return InterCodedPacket(cons, meta, body)


def inter_decode(coded, known):
    """Strip the known constituents; return the one that is left."""
    have = {p.pid: p for p in known}
    missing = [c for c in coded.constituents if c.pid not in have]
    if len(missing) != 1:
        raise Undecodable(f"{len(missing)} unknown constituents")
    c = missing[0]
    body = coded.xor_payload.copy()
    coeffs = coded.meta[(c.flow, c.generation)].copy()
    for k in coded.constituents:
        if k.pid in have:
            p = have[k.pid]
            body ^= p.payload
            if (p.flow, p.generation) == (c.flow, c.generation):
                coeffs ^= p.coeffs
    return CodedPacket(c.flow, c.generation, c.pid, coeffs, body, (None, None, c.label_flow))


class BlockReceiver:
    """What one node knows about a set of generations, with XOR packets it
    could not use yet kept aside and retried whenever a generation grows.

    Each generation is a Subspace over [coefficients | payload]. The add_*
    methods return the rows that raised a rank as (key, coeffs, payload),
    unreduced, so a relay can pass them on as they arrived.
    """

    def __init__(self, payload_len=0, max_pending=64):
        self.L = payload_len
        self.spaces = {}
        self.pending = []
        self.max_pending = max_pending

    def space(self, key, G):
        sp = self.spaces.get(key)
        if sp is None:
            sp = self.spaces[key] = Subspace(G, self.L)
        return sp

    def rank(self, key):
        sp = self.spaces.get(key)
        return sp.rank if sp is not None else 0

    def knows(self, key, coeffs):
        sp = self.spaces.get(key)
        return sp is not None and sp.contains(coeffs)

    def _row(self, coeffs, payload):
        if self.L == 0:
            return coeffs
        return np.concatenate([coeffs, payload])

    def _insert(self, key, v, payload, out):
        if self.space(key, len(v)).insert(self._row(v, payload)):
            out.append((key, v, payload))
            return True
        return False

    def add_native(self, pkt):
        out = []
        if self._insert((pkt.flow, pkt.generation), pkt.coeffs,
                        pkt.payload if self.L else None, out) and self.pending:
            self._retry(out)
        return out

    def _strip(self, parts, payload):
        """Cancel every part whose coefficients lie in a known space."""
        left = {}
        for key, v in parts.items():
            sp = self.spaces.get(key)
            if sp is not None:
                if self.L:
                    r = sp.reduce(np.concatenate([v, np.zeros(self.L, np.uint8)]))
                    if not r[:len(v)].any():
                        payload = payload ^ r[len(v):]
                        continue
                elif sp.contains(v):
                    continue
            left[key] = v
        return left, payload

    def add_coded(self, coded):
        """Returns (rows, resolved); resolved is False when the packet had to
        wait for more side information."""
        out = []
        left, payload = self._strip(coded.meta, coded.xor_payload if self.L else None)
        if len(left) > 1:
            if len(self.pending) >= self.max_pending:
                self.pending.pop(0)
            self.pending.append((left, payload))
            return out, False
        if left:
            (key, v), = left.items()
            if self._insert(key, v, payload, out) and self.pending:
                self._retry(out)
        return out, True

    def _retry(self, out):
        progress = True
        while progress and self.pending:
            progress = False
            keep = []
            for parts, payload in self.pending:
                left, pl = self._strip(parts, payload)
                if len(left) > 1:
                    keep.append((left, pl))
                elif left:
                    (key, v), = left.items()
                    if self._insert(key, v, pl, out):
                        progress = True
            self.pending = keep

    def forget(self, key):
        self.spaces.pop(key, None)
        self.pending = [(p, pl) for p, pl in self.pending if key not in p]
