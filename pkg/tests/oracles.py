"""Independent reference computations the tests compare against.

Nothing here imports the optimizer: the utility problem is rebuilt from
the scenario's links and codes and handed to cvxpy, or searched on a grid.
"""
import itertools

import cvxpy as cp
import numpy as np


def _direct(sc, node, flow):
    return sc.loss.rho(node, flow.next_hop(node))


def _antidote(sc, node, flow, other):
    # other's packet has to reach flow's next hop by overhearing
    nh = flow.next_hop(node)
    origin = other.prev_hop(node)
    if origin == nh:
        return 0.0
    if origin is None:
        return 1.0
    return sc.loss.rho(origin, nh)


def convex_optimum(sc, variant="state", gamma=1.0):
    """Max sum log x over per-(hyperarc, code, flow) loads y = alpha * x."""
    if variant == "nonc":
        sc = sc.without_coding()
    flows = {f.id: f for f in sc.flows}
    ids = [f.id for f in sc.flows]
    harc = {h.id: h for h in sc.hyperarcs}
    hks = [(h, k, code) for h in sorted(sc.codebook.codes) for k, code in enumerate(sc.codebook.codes[h])]
    triples = [(n, s) for n, (h, k, code) in enumerate(hks) for s in code]
    x = cp.Variable(len(ids), pos=True)
    y = cp.Variable(len(triples), nonneg=True)
    tau = cp.Variable(len(hks), nonneg=True)
    cons = []
    for fid in ids:
        f = flows[fid]
        for node in f.forwarders():
            ts = [i for i, (n, s) in enumerate(triples) if s == fid and harc[hks[n][0]].transmitter == node]
            cons.append(sum(y[i] for i in ts) == x[ids.index(fid)])
    for a, (n, s) in enumerate(triples):
        h, k, code = hks[n]
        node = harc[h].transmitter
        rs = _direct(sc, node, flows[s])
        load = y[a] / (1 - rs)
        for b, (n2, s2) in enumerate(triples):
            if n2 == n and s2 != s:
                r = _antidote(sc, node, flows[s], flows[s2])
                load = load + (r / (1 - rs) if variant == "stateless" else r) * y[b]
        cons.append(load <= harc[h].capacity * tau[n])
    for c in sc.conflict.cliques:
        cons.append(sum(tau[n] for n, (h, _, _) in enumerate(hks) if h in c) <= gamma)
    prob = cp.Problem(cp.Maximize(cp.sum(cp.log(x))), cons)
    prob.solve()
    return dict(zip(ids, np.asarray(x.value, float)))


def x_grid_optimum(rho_overhear_a, rho_overhear_b, rho_direct_a, rho_direct_b, variant="state",
                   step=0.01):
    """Grid search on the X relay: rates (x1, x2) and coded fractions (a1, a2).

    Sources each need x / 1 of the slot; the relay needs, per code, the
    largest load over its flows. Feasible iff the shares add up to <= 1.
    rho_overhear_a is the loss of flow 2's antidotes at flow 1's next hop.
    """
    g = np.round(np.arange(0, 1 + step / 2, step), 10)
    a1 = g[:, None]
    a2 = g[None, :]
    da, db = 1 / (1 - rho_direct_a), 1 / (1 - rho_direct_b)
    if variant == "stateless":
        ca, cb = rho_overhear_a * da, rho_overhear_b * db
    else:
        ca, cb = rho_overhear_a, rho_overhear_b
    best = (-np.inf, None)
    for x1 in g[1:]:
        x2 = g[1:, None, None]
        need = (x1 + x2                                              # two sources
                + x1 * (1 - a1) * da + x2 * (1 - a2) * db            # singleton codes
                + np.maximum(x1 * a1 * da + ca * x2 * a2, x2 * a2 * db + cb * x1 * a1))
        ok = (need <= 1 + 1e-12).any(axis=(1, 2))
        if ok.any():
            xs = g[1:][ok]
            u = np.log(x1) + np.log(xs)
            i = int(u.argmax())
            if u[i] > best[0]:
                best = (u[i], (float(x1), float(xs[i])))
    return best[1]


def transmissions_per_round(flows, coded):
    """Slots to move one packet of every flow through a single relay."""
    return flows + (1 if coded else flows)


def brute_force_codes(sc, hyperarc_id, max_size=4):
    h = sc.hyperarc(hyperarc_id)
    node = h.transmitter
    crossing = [f for f in sc.flows if node in f.forwarders() and f.next_hop(node) in h.receivers]
    out = set()
    for size in range(1, min(max_size, len(crossing)) + 1):
        for combo in itertools.combinations(crossing, size):
            hops = [f.next_hop(node) for f in combo]
            if len(set(hops)) != size:
                continue
            ok = True
            for f, g in itertools.permutations(combo, 2):
                origin = g.prev_hop(node)
                nh = f.next_hop(node)
                if origin != nh and not sc.topology.has_link(origin, nh):
                    ok = False
            if ok:
                out.add(frozenset(f.id for f in combo))
    return out
