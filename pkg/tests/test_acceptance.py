"""Acceptance suite: one PASS/FAIL line per criterion, then the assert.

Optimizer numbers are checked at the stated tolerances; the simulator
criteria run the full 10-seed, 60 s sweeps and take a while.
"""
import itertools
import math
import statistics
import subprocess
import sys
import time

import numpy as np
import pytest

from nclab import coding
from nclab.cli import main
from nclab.coding import (BlockReceiver, InterCodedPacket, incremental_encode, inter_encode,
                          intra_decode, parity_counts, rlnc_parities)
from nclab.nodesim import SCHEMES, run_simulation
from nclab.numopt import convergence_report, solve
from nclab.topology import PATTERNS, build_canonical
from oracles import transmissions_per_round
from test_coding import rank256

X = build_canonical("x")
CROSS = build_canonical("cross")
RATES = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5]
SEEDS = range(10)
SOLVE_BUDGET = 5.0


def verdict(capsys, n, title, ok, detail):
    with capsys.disabled():
        print(f"\n{'PASS' if ok else 'FAIL'} criterion {n:2d} {title}: {detail}")
    assert ok, detail


def timed(sc, variant, **kw):
    t = time.perf_counter()
    tr = solve(sc, variant=variant, **kw)
    return tr, time.perf_counter() - t


def total(tr):
    return float(tr.final_x.sum())


def gain(a, b):
    return 100.0 * (a / b - 1.0)


# -- optimizer --------------------------------------------------------------

def test_c01_x_lossless(capsys):
    runs = {v: timed(X, v) for v in ("state", "stateless", "nonc")}
    tot = {v: total(tr) for v, (tr, _) in runs.items()}
    slow = max(dt for _, dt in runs.values())
    g = gain(tot["state"], tot["nonc"])
    ok = (abs(tot["state"] - 2 / 3) <= 0.01 and abs(tot["stateless"] - 2 / 3) <= 0.01
          and abs(tot["nonc"] - 0.5) <= 0.01 and abs(g - 33.3) <= 2 and slow < SOLVE_BUDGET)
    verdict(capsys, 1, "X lossless totals", ok,
            f"state {tot['state']:.4f}, stateless {tot['stateless']:.4f}, nonc {tot['nonc']:.4f}, "
            f"gain {g:.2f}%, slowest solve {slow:.2f}s")


def test_c02_x_both_links_30(capsys):
    sc = X.with_pattern("both", 0.3)
    (a, ta), (b, tb) = timed(sc, "state"), timed(sc, "stateless")
    ok = abs(total(a) - 0.59) <= 0.01 and abs(total(b) - 0.55) <= 0.01 and max(ta, tb) < SOLVE_BUDGET
    verdict(capsys, 2, "X 30% on A1-B2 and I-B2", ok,
            f"state {total(a):.4f}, stateless {total(b):.4f}")


def test_c03_x_direct_50(capsys):
    sc = X.with_pattern("direct_only", 0.5)
    (a, ta), (n, tn) = timed(sc, "state"), timed(sc, "nonc")
    x1, x2 = a.final_x
    g = gain(total(a), total(n))
    ok = (abs(x1 - 0.40) <= 0.01 and abs(x2 - 0.20) <= 0.01 and abs(g - 44) <= 2
          and max(ta, tn) < SOLVE_BUDGET)
    verdict(capsys, 3, "X 50% on I-B2", ok, f"x1 {x1:.4f}, x2 {x2:.4f}, gain over nonc {g:.2f}%")


def test_c04_x_overhearing_50(capsys):
    sc = X.with_pattern("overhearing_only", 0.5)
    (a, ta), (n, tn) = timed(sc, "state"), timed(sc, "nonc")
    g = gain(total(a), total(n))
    flat = [total(timed(X.with_pattern("overhearing_only", r), "nonc")[0]) for r in RATES]
    spread = max(flat) - min(flat)
    ok = abs(g - 16.6) <= 2 and spread <= 0.01 and max(ta, tn) < SOLVE_BUDGET
    verdict(capsys, 4, "X 50% on A1-B2", ok, f"gain {g:.2f}%, nonc spread over the sweep {spread:.2e}")


def test_c05_x_stateless_gain_fades(capsys):
    gains = {}
    for r in (0.3, 0.4, 0.5):
        sc = X.with_pattern("both", r)
        gains[r] = gain(total(timed(sc, "stateless")[0]), total(timed(sc, "nonc")[0]))
    ok = (abs(gains[0.3] - 22) <= 3 and abs(gains[0.5]) <= 2
          and gains[0.3] >= gains[0.4] >= gains[0.5])
    verdict(capsys, 5, "X stateless gain on both links", ok,
            ", ".join(f"{int(r * 100)}% -> {g:.2f}%" for r, g in gains.items()))


def test_c06_cross(capsys):
    # one packet per flow through the relay: 4 source slots plus 1 coded or 4 plain
    nc_ref = 4 / transmissions_per_round(4, coded=True)
    plain_ref = 4 / transmissions_per_round(4, coded=False)
    tot = {v: total(timed(CROSS, v)[0]) for v in ("state", "stateless", "nonc")}
    peak, where = -math.inf, None
    slow = 0.0
    for pattern in PATTERNS:
        for r in RATES:
            sc = CROSS.with_pattern(pattern, r)
            n, dn = timed(sc, "nonc")
            for v in ("state", "stateless"):
                tr, dt = timed(sc, v)
                slow = max(slow, dt, dn)
                g = gain(total(tr), total(n))
                if g > peak:
                    peak, where = g, f"{v} {pattern} {r}"
    lossless_ok = (abs(tot["state"] - 0.8) <= 0.01 and abs(tot["stateless"] - 0.8) <= 0.01
                   and abs(tot["nonc"] - 0.5) <= 0.01
                   and abs(tot["state"] - nc_ref) <= 0.01 and abs(tot["nonc"] - plain_ref) <= 0.01)
    ok = lossless_ok and 70 <= peak <= 90 and slow < SOLVE_BUDGET
    verdict(capsys, 6, "cross totals and peak gain", ok,
            f"coded {tot['state']:.4f} (count oracle {nc_ref:.2f}), nonc {tot['nonc']:.4f} "
            f"(count oracle {plain_ref:.2f}); peak gain {peak:.2f}% at {where}, window [70, 90]")


def test_c07_convergence(capsys):
    worst = dict(iters=0, inc=0.0, res=0.0, time=0.0)
    bad = []
    for kind, sc0 in (("x", X), ("cross", CROSS)):
        for v in ("state", "stateless"):
            for pattern in PATTERNS:
                tr, dt = timed(sc0.with_pattern(pattern, 0.3), v)
                rep = convergence_report(tr)
                worst["iters"] = max(worst["iters"], tr.iterations)
                worst["inc"] = max(worst["inc"], rep.tail_increase_fraction)
                worst["res"] = max(worst["res"], rep.final_residual)
                worst["time"] = max(worst["time"], dt)
                if not (tr.converged and tr.iterations <= 100_000 and rep.tail_increase_fraction <= 0.01
                        and rep.final_residual <= 1e-3 and dt < SOLVE_BUDGET):
                    bad.append(f"{kind}/{v}/{pattern}")
    verdict(capsys, 7, "convergence on 16 configurations", not bad,
            f"max iterations {worst['iters']}, max proxy-increase share {worst['inc']:.4f}, "
            f"max residual {worst['res']:.1e}, slowest {worst['time']:.2f}s"
            + (f"; failing {bad}" if bad else ""))


# -- coding -----------------------------------------------------------------

def test_c08_intra_round_trip(capsys):
    rng = np.random.default_rng(8)
    parts = []
    ok = True
    for G in (1, 4, 15, 32):
        P = 4
        wins = 0
        for trial in range(1000):
            orig = [rng.integers(0, 256, 32, dtype=np.uint8) for _ in range(G)]
            coded = incremental_encode(orig, generation=trial)
            pkts = coded + rlnc_parities(coded, P, rng, first_pid=G)
            pick = [pkts[i] for i in rng.choice(G + P, G, replace=False)]
            res = intra_decode(pick, G)
            full = rank256([p.coeffs for p in pick]) == G
            if full != res.decoded:
                ok = False
            if res.decoded:
                wins += 1
                if res.originals != [bytes(o) for o in orig]:
                    ok = False
        parts.append(f"G={G}: {wins / 10:.1f}%")
        ok = ok and wins / 1000 >= 0.95
    verdict(capsys, 8, "intra decode of random G-subsets", ok, ", ".join(parts))


def test_c09_worked_trace(capsys):
    p11, p21 = parity_counts(4, 0.0, {"S2": 0.25}, {"S2": 0.5}, "stateless")
    p22, p12 = parity_counts(1, 0.5, {"S1": 0.0}, {"S1": 0.0}, "stateless")
    counts = (p11, p22, p21["S2"], p12["S1"])

    rng = np.random.default_rng(9)
    pa = [rng.integers(0, 256, 64, dtype=np.uint8) for _ in range(4)]
    pb = [rng.integers(0, 256, 64, dtype=np.uint8)]
    a = incremental_encode(pa, flow=0)
    b = incremental_encode(pb, flow=1)
    a56 = rlnc_parities(a, counts[2], rng, first_pid=4)
    b2 = rlnc_parities(b, counts[1], rng, first_pid=1)[0]
    for p in a:
        p.label = ("I", 1, 0)
    for p in a56 + [b[0], b2]:
        p.label = ("I", 1, 1)
    sends = [inter_encode([a[0], b[0]], [0, 1]), inter_encode([a[1], b2], [0, 1]),
             inter_encode([a[2], a56[0]], [0, 1]), inter_encode([a[3], a56[1]], [0, 1])]
    rx = BlockReceiver(64)
    for i in (0, 1, 2):                      # overheard from the source
        rx.add_native(a[i])
    for i in (3, 1):                         # two of the relay's four
        rx.add_coded(InterCodedPacket.from_bytes(sends[i].to_bytes()))
    decoded = rx.rank((1, 0)) == 1 and rx.spaces[(1, 0)].solution()[0].tolist() == pb[0].tolist()
    ok = counts == (0, 1, 2, 0) and decoded
    verdict(capsys, 9, "worked relay example", ok,
            f"parities (own S1, own S2, S1 for S2, S2 for S1) = {counts}, "
            f"b1 from 3 overheard + 2 direct: {'decoded' if decoded else 'not decoded'}")


# -- simulator ----------------------------------------------------------------

def sweep(pattern, rates, schemes):
    out = {}
    for r in rates:
        sc = X.with_pattern(pattern, r)
        for s in schemes:
            out[(r, s)] = [run_simulation(sc, scheme=s, seed=k).total for k in SEEDS]
    return out


@pytest.fixture(scope="module")
def all_links():
    return sweep("all_links", RATES, SCHEMES)


@pytest.fixture(scope="module")
def overhearing():
    return sweep("overhearing_only", [0.3, 0.4, 0.5], ("cope", "nonc"))


def test_c10_lossless_ratio(capsys, all_links):
    m = {s: statistics.fmean(all_links[(0.0, s)]) for s in SCHEMES}
    ratios = {s: m[s] / m["nonc"] for s in ("i2nc_state", "i2nc_stateless")}
    same = all_links[(0.0, "i2nc_state")] == all_links[(0.0, "i2nc_stateless")]
    ok = all(1.30 <= v <= 1.37 for v in ratios.values()) and same
    verdict(capsys, 10, "lossless X simulator gain", ok,
            f"state/nonc {ratios['i2nc_state']:.4f}, stateless/nonc {ratios['i2nc_stateless']:.4f}, "
            f"state and stateless identical per seed: {same}")


def test_c11_scheme_ordering(capsys, all_links):
    order = ["i2nc_stateless", "i2nc_state", "cope", "nonc"]
    bad, slack = [], []
    for r in RATES:
        for hi, lo in zip(order, order[1:]):
            a, b = all_links[(r, hi)], all_links[(r, lo)]
            pooled = math.sqrt((statistics.variance(a) + statistics.variance(b)) / 2)
            d = statistics.fmean(a) - statistics.fmean(b)
            if d < 0:
                slack.append(f"{hi}<{lo}@{r}: {d:.0f} vs sd {pooled:.0f}")
                if -d > pooled:
                    bad.append(slack[-1])
    means = "; ".join(f"{r}: " + "/".join(f"{statistics.fmean(all_links[(r, s)]) / 1e3:.1f}"
                                          for s in order) for r in RATES)
    verdict(capsys, 11, "scheme ordering over all-links loss", not bad,
            f"means kbit/s stateless/state/cope/nonc {means}; "
            f"{len(slack)} inversions within one pooled sd" + (f"; beyond: {bad}" if bad else ""))


def test_c12_cope_matches_nonc(capsys, overhearing):
    gaps = {}
    for r in (0.3, 0.4, 0.5):
        c = statistics.fmean(overhearing[(r, "cope")])
        n = statistics.fmean(overhearing[(r, "nonc")])
        gaps[r] = 100 * abs(c - n) / n
    ok = all(g <= 3 for g in gaps.values())
    verdict(capsys, 12, "cope at nonc above 20% overhearing loss", ok,
            ", ".join(f"{int(r * 100)}%: {g:.2f}% apart" for r, g in gaps.items()))


# -- determinism ----------------------------------------------------------------

SIM_TEXT = """\
[topology]
kind = x
[loss]
rate = 0.2
pattern = all_links
[engine]
mode = simulate
scheme = i2nc_state
duration = 2
seeds = 2
"""

OPT_TEXT = """\
[topology]
kind = cross
[loss]
rate = 0.3
pattern = both
[engine]
mode = optimize
variant = stateless
"""


def test_c13_determinism(tmp_path, capsys):
    sim = tmp_path / "sim.ini"
    sim.write_text(SIM_TEXT)
    opt = tmp_path / "opt.ini"
    opt.write_text(OPT_TEXT)
    cases = {
        "optimize": ["optimize", str(opt)],
        "convergence": ["convergence", str(opt)],
        "simulate": ["simulate", str(sim), "--schemes", ",".join(SCHEMES), "--seed", "3"],
        "sweep": ["sweep", str(sim), "--rates", "0,0.3", "--schemes", "i2nc_stateless,cope"],
        "optimize sweep": ["sweep", str(opt), "--rates", "0,0.2,0.4", "--schemes", "state,nonc"],
    }
    same = {}
    for name, argv in cases.items():
        outs = []
        for k in range(2):
            dest = tmp_path / f"{name.replace(' ', '_')}{k}.csv"
            assert main(argv + ["--out", str(dest)]) == 0
            outs.append(dest.read_bytes())
        # a fresh interpreter has a different string-hash salt
        proc = subprocess.run([sys.executable, "-m", "nclab"] + argv, capture_output=True, check=True)
        outs.append(proc.stdout)
        same[name] = len(set(outs)) == 1 and len(outs[0]) > 0
    verdict(capsys, 13, "byte-identical CSV on re-run", all(same.values()),
            ", ".join(f"{k}: {'same' if v else 'DIFFERENT'}" for k, v in same.items()))
