"""Decomposed utility maximisation over hyperarcs, codes and flows.

Every (hyperarc, code, flow) triple t carries one capacity constraint

    sum_t' N[t, t'] * alpha[t'] * x[flow(t')]  <=  R[h(t)] * tau[h(t), k(t)]

with multiplier q[t].  N holds 1/(1 - direct loss) on the diagonal and the
antidote-loss cross terms off it (scaled by the same 1/(1 - direct loss) in
the stateless variant).  With log utilities the dual pieces are

    Q        = N^T q                      per-triple queue value
    price_s  = sum over s's triples of alpha * Q
    x_s      = min(x_cap, 1 / price_s)
    Q_hk     = R_h * sum of q over the code's triples

and the solver runs projected primal-dual dynamics on (q, alpha, tau).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .lossmodel import antidote_loss, direct_loss

VARIANTS = ("state", "stateless", "nonc")


class InfeasibleHyperarcError(ValueError):
    pass


class OptimizerError(ValueError):
    pass


@dataclass
class OptimizerConfig:
    variant: str = "state"
    step_q: float = 2.0
    step_alpha: float = 0.5
    step_tau: float = 0.5
    schedule: str = "constant"          # or "diminishing": c0 / (1 + t / schedule_T)
    schedule_T: float = 1000.0
    method: str = "extragradient"       # or "euler"
    direction: str = "projected"        # or "bracket" (active-set means)
    max_iters: int = 100_000
    tol: float = 1e-9
    resid_tol: float = 1e-6
    window: int = 100
    gamma: float | None = None          # None: take the scenario's
    x_cap: float | None = None          # None: 10 x largest capacity
    record: bool = True
    armijo: float = 0.9                 # extragradient step test: st*|dF| <= armijo*|dz|
    regrow: float = 1.5

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise OptimizerError(f"unknown variant {self.variant!r}")
        if min(self.step_q, self.step_alpha, self.step_tau) <= 0:
            raise OptimizerError("step sizes must be positive")
        if self.tol <= 0:
            raise OptimizerError("tol must be positive")
        if self.gamma is not None and not 0 < self.gamma <= 1:
            raise OptimizerError("gamma must lie in (0, 1]")
        if self.schedule not in ("constant", "diminishing"):
            raise OptimizerError(f"unknown schedule {self.schedule!r}")
        if self.method not in ("extragradient", "euler"):
            raise OptimizerError(f"unknown method {self.method!r}")
        if self.direction not in ("projected", "bracket"):
            raise OptimizerError(f"unknown direction {self.direction!r}")
        if self.max_iters < 0 or self.window < 1:
            raise OptimizerError("max_iters must be >= 0 and window >= 1")


def _padded(groups):
    width = max((len(g) for g in groups), default=1)
    idx = np.zeros((len(groups), width), dtype=np.int64)
    mask = np.zeros((len(groups), width), dtype=bool)
    for r, g in enumerate(groups):
        idx[r, :len(g)] = g
        mask[r, :len(g)] = True
    return idx, mask


def project_simplex_rows(y, mask, total):
    """Euclidean projection of each masked row onto {v >= 0, sum v = total}."""
    u = np.sort(np.where(mask, y, -np.inf), axis=1)[:, ::-1]
    fin = np.isfinite(u)
    cs = np.cumsum(np.where(fin, u, 0.0), axis=1)
    j = np.arange(1, y.shape[1] + 1)
    cond = fin & (u * j - (cs - total[:, None]) > 0)
    k = np.maximum(cond.sum(axis=1), 1)
    theta = (cs[np.arange(len(y)), k - 1] - total) / k
    return np.where(mask, np.maximum(y - theta[:, None], 0.0), 0.0)


def project_capped_rows(y, mask, total):
    """Projection onto {v >= 0, sum v <= total}."""
    clipped = np.where(mask, np.maximum(y, 0.0), 0.0)
    over = clipped.sum(axis=1) > total
    if over.any():
        clipped[over] = project_simplex_rows(y[over], mask[over], total[over])
    return clipped


def max_active_mean(values, active):
    """Largest mean m over active ∪ {inactive entries with value <= m},
    where the added inactive entries form a prefix of the sorted inactive
    values (the only consistent candidates)."""
    values = np.asarray(values, float)
    active = np.asarray(active, bool)
    ina = np.sort(values[~active])
    s, n = values[active].sum(), int(active.sum())
    best = -math.inf
    for k in range(len(ina) + 1):
        cnt = n + k
        if cnt == 0:
            continue
        m = (s + ina[:k].sum()) / cnt
        lo_ok = k == 0 or ina[k - 1] <= m
        hi_ok = k == len(ina) or ina[k] > m
        if lo_ok and hi_ok:
            best = max(best, m)
    return best


def min_active_mean(values, active):
    return -max_active_mean(-np.asarray(values, float), active)


class Model:
    """Index arrays and coupling matrix for one scenario and variant."""

    def __init__(self, scenario, variant="state", gamma=None):
        if variant not in VARIANTS:
            raise OptimizerError(f"unknown variant {variant!r}")
        self.variant = variant
        sc = scenario.without_coding() if variant == "nonc" else scenario
        self.scenario = sc
        self.gamma = scenario.conflict.gamma if gamma is None else gamma
        flows = {f.id: f for f in sc.flows}
        self.flow_ids = [f.id for f in sc.flows]
        fidx = {f: n for n, f in enumerate(self.flow_ids)}
        harcs = {h.id: h for h in sc.hyperarcs}

        self.hks = []      # (h id, k)
        self.codes = []
        self.triples = []  # (h id, k, flow id)
        hk_of, s_of, node_of = [], [], []
        for h, k, code in sc.codebook.pairs():
            self.hks.append((h, k))
            self.codes.append(code)
            for s in code:
                self.triples.append((h, k, s))
                hk_of.append(len(self.hks) - 1)
                s_of.append(fidx[s])
                node_of.append(harcs[h].transmitter)
        self.index = {t: n for n, t in enumerate(self.triples)}
        self.hk_index = {hk: n for n, hk in enumerate(self.hks)}
        self.hk_of = np.array(hk_of, dtype=np.int64)
        self.s_of = np.array(s_of, dtype=np.int64)
        self.ns, self.nt, self.nh = len(self.flow_ids), len(self.triples), len(self.hks)
        self.R = np.array([harcs[h].capacity for h, _ in self.hks])
        self.R_t = self.R[self.hk_of]

        loss = sc.loss
        N = np.zeros((self.nt, self.nt))
        for a, (h, k, s) in enumerate(self.triples):
            rs = direct_loss(loss, harcs[h], flows[s])
            if rs >= 1.0:
                raise InfeasibleHyperarcError(f"flow {s} cannot be served on {h}: direct loss 1")
            N[a, a] = 1.0 / (1.0 - rs)
            code = self.codes[self.hk_of[a]]
            for s2 in code:
                if s2 == s:
                    continue
                b = self.index[(h, k, s2)]
                r = antidote_loss(loss, harcs[h], code, flows[s], flows[s2])
                N[a, b] = r / (1.0 - rs) if variant == "stateless" else r
        self.N = N
        self.NT = np.ascontiguousarray(N.T)

        groups = {}
        for t, (h, k, s) in enumerate(self.triples):
            groups.setdefault((harcs[h].transmitter, s), []).append(t)
        self.group_keys = list(groups)
        self.groups = [groups[g] for g in self.group_keys]
        multi = [g for g in self.groups if len(g) > 1]
        self.g_idx, self.g_mask = _padded(multi) if multi else (None, None)
        self.g_total = np.ones(len(multi))
        self.fixed = np.array([g[0] for g in self.groups if len(g) == 1], dtype=np.int64)

        cl = [[self.hk_index[(h, k)] for h in sorted(c) for k in range(len(sc.codebook.codes[h]))]
              for c in sc.conflict.cliques]
        self.cliques = cl
        self.c_idx, self.c_mask = _padded(cl)
        self.c_total = np.full(len(cl), float(self.gamma))
        self.disjoint = sc.conflict.disjoint()
        self.max_R = float(self.R.max()) if self.nh else 1.0

    # -- state helpers -------------------------------------------------

    def initial(self):
        q = np.zeros(self.nt)
        alpha = np.zeros(self.nt)
        for g in self.groups:
            alpha[g] = 1.0 / len(g)
        tau = np.zeros(self.nh)
        share = np.zeros(self.nh)
        for c in self.cliques:
            share[c] = np.maximum(share[c], len(c))
        tau = self.gamma / np.maximum(share, 1)
        return q, alpha, tau

    def queue_values(self, q):
        return self.NT @ q

    def rates(self, Q, alpha, x_cap):
        price = np.bincount(self.s_of, alpha * Q, minlength=self.ns)
        with np.errstate(divide="ignore"):
            return np.where(price * x_cap > 1.0, 1.0 / price, x_cap)

    def inflow(self, alpha, x):
        return self.N @ (alpha * x[self.s_of])

    def code_values(self, q):
        return self.R * np.bincount(self.hk_of, q, minlength=self.nh)

    def field(self, q, alpha, tau, x_cap):
        Q = self.NT @ q
        x = self.rates(Q, alpha, x_cap)
        gq = self.N @ (alpha * x[self.s_of]) - self.R_t * tau[self.hk_of]
        Qhk = self.R * np.bincount(self.hk_of, q, minlength=self.nh)
        return x, gq, Q, Qhk

    def project(self, q, alpha, tau):
        q = np.maximum(q, 0.0)
        if self.g_idx is not None:
            rows = project_simplex_rows(alpha[self.g_idx], self.g_mask, self.g_total)
            alpha = alpha.copy()
            alpha[self.g_idx[self.g_mask]] = rows[self.g_mask]
        alpha[self.fixed] = 1.0
        tau = self.project_tau(tau)
        return q, alpha, tau

    def project_tau(self, tau):
        if self.disjoint:
            rows = project_capped_rows(tau[self.c_idx], self.c_mask, self.c_total)
            out = np.zeros_like(tau)
            out[self.c_idx[self.c_mask]] = rows[self.c_mask]
            return out
        return _dykstra(tau, self.cliques, self.gamma)

    def bracket_directions(self, alpha, tau, Q, Qhk):
        """Active-set dynamics: alpha moves by E_i - Q, tau by Q_hk - E_C."""
        da = np.zeros(self.nt)
        for g in self.groups:
            v = Q[g]
            a = alpha[g]
            E = max_active_mean(v, a > 0)
            act = (a > 0) | (v <= E)
            da[g] = np.where(act, E - v, 0.0)
        dt = np.zeros(self.nh)
        for c in self.cliques:
            v = Qhk[c]
            t = tau[c]
            if not (v > 0).any():
                continue
            E = min_active_mean(v, t > 0)
            act = (t > 0) | (v >= E)
            dt[c] += np.where(act, v - E, 0.0)
        return da, dt

    def bracket_project(self, q, alpha, tau):
        q = np.maximum(q, 0.0)
        alpha = np.maximum(alpha, 0.0)
        for g in self.groups:
            s = alpha[g].sum()
            alpha[g] = alpha[g] / s if s > 0 else 1.0 / len(g)
        tau = np.maximum(tau, 0.0)
        for c in self.cliques:
            s = tau[c].sum()
            if s > 0:
                tau[c] = tau[c] * (self.gamma / s)
        return q, alpha, tau


def _dykstra(tau, cliques, gamma, iters=200, tol=1e-13):
    """Projection onto {tau >= 0, sum over each clique <= gamma} for
    overlapping cliques."""
    x = tau.copy()
    sets = len(cliques) + 1
    incr = [np.zeros_like(x) for _ in range(sets)]
    for _ in range(iters):
        prev = x.copy()
        for n in range(sets):
            y = x + incr[n]
            if n == len(cliques):
                z = np.maximum(y, 0.0)
            else:
                z = y.copy()
                c = cliques[n]
                excess = z[c].sum() - gamma
                if excess > 0:
                    z[c] -= excess / len(c)
            incr[n] = y - z
            x = z
        if np.abs(x - prev).max() < tol:
            break
    return np.maximum(x, 0.0)


@dataclass
class OptimizerState:
    model: Model
    q: np.ndarray
    alpha: np.ndarray
    tau: np.ndarray
    x: np.ndarray
    iter: int = 0

    def q_of(self, h, k, s):
        return float(self.q[self.model.index[(h, k, s)]])

    def alpha_of(self, h, k, s):
        return float(self.alpha[self.model.index[(h, k, s)]])

    def tau_of(self, h, k):
        return float(self.tau[self.model.hk_index[(h, k)]])

    def x_of(self, s):
        return float(self.x[self.model.flow_ids.index(s)])

    def as_dict(self):
        m = self.model
        return {"q": {t: float(self.q[n]) for n, t in enumerate(m.triples)},
                "alpha": {t: float(self.alpha[n]) for n, t in enumerate(m.triples)},
                "tau": {hk: float(self.tau[n]) for n, hk in enumerate(m.hks)},
                "x": {s: float(self.x[n]) for n, s in enumerate(m.flow_ids)}}


def initial_state(model, x_cap=None):
    x_cap = 10.0 * model.max_R if x_cap is None else x_cap
    q, alpha, tau = model.initial()
    x = model.rates(model.queue_values(q), alpha, x_cap)
    return OptimizerState(model, q, alpha, tau, x, 0)


# -- per-element operations ---------------------------------------------

def compute_Q_hks(state, h, k, s):
    m = state.model
    t = m.index[(h, k, s)]
    return float(m.NT[t] @ state.q)


def compute_Q_is(state, i, s):
    m = state.model
    Q = m.queue_values(state.q)
    g = m.groups[m.group_keys.index((i, s))]
    return float(state.alpha[g] @ Q[g])


def rate_control(state, s, x_cap):
    m = state.model
    sid = m.flow_ids.index(s)
    Q = m.queue_values(state.q)
    price = float((state.alpha * Q)[m.s_of == sid].sum())
    return x_cap if price * x_cap <= 1.0 else 1.0 / price


def traffic_split_step(state, i, s, step):
    """One bracketed step of the split dynamics for flow s at node i."""
    m = state.model
    key = (i, s)
    if key not in m.group_keys:
        raise OptimizerError(f"flow {s} has no option at node {i}")
    g = m.groups[m.group_keys.index(key)]
    Q = m.queue_values(state.q)[g]
    a = state.alpha[g]
    E = max_active_mean(Q, a > 0)
    act = (a > 0) | (Q <= E)
    a = np.maximum(a + step * np.where(act, E - Q, 0.0), 0.0)
    return a / a.sum()


def schedule_step(state, clique, step):
    """One bracketed step of the schedule dynamics on clique index `clique`."""
    m = state.model
    c = m.cliques[clique]
    v = m.code_values(state.q)[c]
    t = state.tau[c]
    if not (v > 0).any():
        return t.copy()
    E = min_active_mean(v, t > 0)
    act = (t > 0) | (v >= E)
    t = np.maximum(t + step * np.where(act, v - E, 0.0), 0.0)
    tot = t.sum()
    return t * (m.gamma / tot) if tot > 0 else t


def queue_update(state, h, k, s, step):
    m = state.model
    t = m.index[(h, k, s)]
    inflow = float(m.N[t] @ (state.alpha * state.x[m.s_of]))
    out = m.R_t[t] * state.tau[m.hk_of[t]]
    return max(0.0, float(state.q[t]) + step * (inflow - out))


# -- solver ------------------------------------------------------------

@dataclass
class Trajectory:
    model: Model
    config: OptimizerConfig
    x: np.ndarray                 # (iterations + 1, flows)
    residual: np.ndarray          # per recorded state
    converged: bool
    iterations: int
    final: OptimizerState
    q_hist: np.ndarray | None = None
    alpha_hist: np.ndarray | None = None
    tau_hist: np.ndarray | None = None
    x_cap: float = 0.0
    extra: dict = field(default_factory=dict)

    @property
    def totals(self):
        return self.x.sum(axis=1)

    @property
    def final_x(self):
        return self.x[-1]


def solve(scenario, config=None, **overrides):
    cfg = config or OptimizerConfig(**overrides)
    if config is not None and overrides:
        raise OptimizerError("pass either a config or keyword overrides")
    model = Model(scenario, cfg.variant, cfg.gamma)
    x_cap = 10.0 * model.max_R if cfg.x_cap is None else cfg.x_cap
    q, alpha, tau = model.initial()
    n_max = cfg.max_iters
    X = np.empty((n_max + 1, model.ns))
    res = np.empty(n_max + 1)
    if cfg.record:
        QH = np.empty((n_max + 1, model.nt))
        AH = np.empty((n_max + 1, model.nt))
        TH = np.empty((n_max + 1, model.nh))
    c0, k0, e0 = cfg.step_q, cfg.step_alpha, cfg.step_tau
    bracket = cfg.direction == "bracket"
    eg = cfg.method == "extragradient"
    w = cfg.window

    def advance(q, alpha, tau, gq, Q, Qhk, st):
        if bracket:
            da, dt = model.bracket_directions(alpha, tau, Q, Qhk)
            return model.bracket_project(q + st * c0 * gq, alpha + st * k0 * da, tau + st * e0 * dt)
        return model.project(q + st * c0 * gq, alpha - st * k0 * Q, tau + st * e0 * Qhk)

    converged = False
    t = 0
    gain = 1.0   # adaptive factor on the step, shrunk when the field is too steep
    free = np.ones(model.nt, dtype=bool)
    free[model.fixed] = False
    while True:
        x, gq, Q, Qhk = model.field(q, alpha, tau, x_cap)
        X[t] = x
        r = max(0.0, float(gq.max())) if len(gq) else 0.0
        res[t] = r
        if cfg.record:
            QH[t], AH[t], TH[t] = q, alpha, tau
        if t >= w and r <= cfg.resid_tol and np.abs(X[t - w:t] - x).max() < cfg.tol:
            converged = True
            break
        if t == n_max:
            break
        st = 1.0 if cfg.schedule == "constant" else 1.0 / (1.0 + t / cfg.schedule_T)
        if eg and not bracket:
            gain = min(1.0, gain * cfg.regrow)
            while True:
                qh, ah, th = advance(q, alpha, tau, gq, Q, Qhk, st * gain)
                _, gq2, Q2, Qhk2 = model.field(qh, ah, th, x_cap)
                dF = (c0 * ((gq - gq2) ** 2).sum() + k0 * (((Q - Q2) ** 2)[free]).sum()
                      + e0 * ((Qhk - Qhk2) ** 2).sum())
                dz = (((q - qh) ** 2).sum() / c0 + ((alpha - ah) ** 2).sum() / k0
                      + ((tau - th) ** 2).sum() / e0)
                if (st * gain) ** 2 * dF <= cfg.armijo ** 2 * dz or gain < 1e-8:
                    break
                gain *= 0.5
            gq, Q, Qhk = gq2, Q2, Qhk2
            q, alpha, tau = advance(q, alpha, tau, gq, Q, Qhk, st * gain)
        elif eg:
            qh, ah, th = advance(q, alpha, tau, gq, Q, Qhk, st)
            _, gq, Q, Qhk = model.field(qh, ah, th, x_cap)
            q, alpha, tau = advance(q, alpha, tau, gq, Q, Qhk, st)
        elif not bracket:
            # sequential order: queues first, then splits and schedule see the new queues
            q = np.maximum(q + st * c0 * gq, 0.0)
            Q = model.NT @ q
            Qhk = model.code_values(q)
            _, alpha, tau = model.project(q, alpha - st * k0 * Q, tau + st * e0 * Qhk)
        else:
            q, alpha, tau = advance(q, alpha, tau, gq, Q, Qhk, st)
        t += 1

    n = t + 1
    final = OptimizerState(model, q.copy(), alpha.copy(), tau.copy(), X[t].copy(), t)
    tr = Trajectory(model, cfg, X[:n].copy(), res[:n].copy(), converged, t, final, x_cap=x_cap)
    if cfg.record:
        tr.q_hist, tr.alpha_hist, tr.tau_hist = QH[:n].copy(), AH[:n].copy(), TH[:n].copy()
    return tr


def utility(x):
    x = np.asarray(x, float)
    with np.errstate(divide="ignore"):
        return np.log(x).sum(axis=-1)


def lyapunov_proxy(tr):
    """Weighted squared distance of (q, tau, alpha) to the final iterate."""
    if tr.q_hist is None:
        raise OptimizerError("trajectory was solved with record=False")
    m, cfg = tr.model, tr.config
    qf, af, tf = tr.q_hist[-1], tr.alpha_hist[-1], tr.tau_hist[-1]
    wx = tr.x[-1][m.s_of]
    return (((tr.q_hist - qf) ** 2).sum(axis=1) / (2 * cfg.step_q)
            + ((tr.tau_hist - tf) ** 2).sum(axis=1) / (2 * cfg.step_tau)
            + (wx * (tr.alpha_hist - af) ** 2).sum(axis=1) / (2 * cfg.step_alpha))


@dataclass
class ConvergenceReport:
    residuals: np.ndarray
    final_residual: float
    feasibility: float          # worst simplex / clique violation over the run
    objective_gap: np.ndarray   # utility(final) - utility(t)
    proxy: np.ndarray
    tail_increase_fraction: float
    converged: bool
    iterations: int


def convergence_report(tr, scenario=None, tail=0.5, noise=1e-12):
    m = tr.model
    V = lyapunov_proxy(tr)
    start = int(len(V) * (1 - tail))
    seg = V[start:]
    if len(seg) > 1:
        floor = noise * max(float(seg[0]), 1e-300)
        inc = float((np.diff(seg) > floor).mean())
    else:
        inc = 0.0
    feas = 0.0
    for g in m.groups:
        feas = max(feas, float(np.abs(tr.alpha_hist[:, g].sum(axis=1) - 1).max()))
    for c in m.cliques:
        feas = max(feas, float((tr.tau_hist[:, c].sum(axis=1) - m.gamma).max()))
    feas = max(feas, float(-min(tr.q_hist.min(), tr.alpha_hist.min(), tr.tau_hist.min(), 0.0)))
    u = utility(tr.x)
    return ConvergenceReport(tr.residual, float(tr.residual[-1]), feas, u[-1] - u, V, inc,
                             tr.converged, tr.iterations)
