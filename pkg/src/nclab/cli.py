"""Command line front end: scenario files in, CSV out.

A scenario file is INI-style with three sections:

    [topology]
    kind = x                  # x, cross, wheel(n), multihop_chain
    generation_size = 15

    [loss]
    rate = 0.3
    pattern = both            # overhearing_only, direct_only, both, all_links
    A1>B2 = 0.1               # single directed link; A1-B2 sets both directions

    [engine]
    mode = optimize           # or simulate
    variant = state

Instead of `kind` a topology may be spelled out with `nodes`, `links`
(`A-B` both ways, `A>B` one way), `flow.<id> = <path>` and optionally
`cliques` (hyperarc ids, cliques separated by `;`).
"""
from __future__ import annotations

import argparse
import configparser
import csv
import dataclasses
import io
import math
import re
import statistics
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

from . import numopt, nodesim
from .lossmodel import LossError, LossMatrix
from .topology import PATTERNS, Flow, TopologyError, build_canonical, build_scenario

EXIT_OK, EXIT_USAGE, EXIT_ENGINE, EXIT_NONCONVERGED = 0, 1, 2, 3

SECTIONS = ("topology", "loss", "engine")
CANONICAL_KEYS = {"kind", "generation_size", "capacity", "max_code_size", "gamma",
                  "interference", "n"}
EXPLICIT_KEYS = {"nodes", "links", "cliques", "generation_size", "capacity",
                 "max_code_size", "gamma", "interference"}
OPT_FIELDS = {f.name for f in dataclasses.fields(numopt.OptimizerConfig)} - {"record"}
SIM_FIELDS = {f.name for f in dataclasses.fields(nodesim.SimConfig)}


class ScenarioError(ValueError):
    def __init__(self, message, line=None):
        super().__init__(message)
        self.line = line

    def __str__(self):
        msg = self.args[0]
        return f"line {self.line}: {msg}" if self.line is not None else msg


@dataclass
class ScenarioSpec:
    scenario: object
    mode: str
    engine: dict = field(default_factory=dict)     # OptimizerConfig or SimConfig kwargs
    pattern: str | None = None
    rate: float | None = None
    links: dict = field(default_factory=dict)      # explicit per-link overrides
    text: str = ""

    def at_rate(self, rate):
        """The scenario with the uniform pattern rate replaced."""
        pattern = self.pattern or "all_links"
        sc = self.scenario.with_pattern(pattern, rate)
        if self.links:
            rates = dict(sc.loss.rates)
            rates.update(self.links)
            sc = sc.with_loss(LossMatrix(rates))
        return sc


# -- parsing ------------------------------------------------------------

def _key_lines(text):
    """(section, key) -> line number, for pointing diagnostics at the source."""
    out, section = {}, None
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line[0] in "#;":
            continue
        m = re.match(r"\[([^\]]*)\]", line)
        if m:
            section = m.group(1).strip()
            out.setdefault((section, None), n)
            continue
        key = re.split(r"[=:]", line, maxsplit=1)[0].strip()
        out.setdefault((section, key), n)
    return out


def _number(value, kind, where, line):
    try:
        return kind(value)
    except ValueError:
        raise ScenarioError(f"{where}: expected {kind.__name__}, got {value!r}", line) from None


def _typed(value, default, where, line):
    v = value.strip()
    if v.lower() == "none" and default is None:
        return None
    if isinstance(default, bool):
        if v.lower() in ("1", "true", "yes", "on"):
            return True
        if v.lower() in ("0", "false", "no", "off"):
            return False
        raise ScenarioError(f"{where}: expected true or false, got {value!r}", line)
    if isinstance(default, int):
        return _number(v, int, where, line)
    if isinstance(default, float) or default is None:
        return _number(v, float, where, line)
    return v


def _link(key, line):
    m = re.fullmatch(r"\s*([^\s>-]+)\s*([>-])\s*([^\s>-]+)\s*", key)
    if not m:
        raise ScenarioError(f"cannot read link {key!r}; write A-B or A>B", line)
    a, arrow, b = m.groups()
    return [(a, b)] if arrow == ">" else [(a, b), (b, a)]


def _rate(value, where, line):
    r = _number(value, float, where, line)
    if not 0.0 <= r <= 1.0:
        raise ScenarioError(f"{where}: loss rate {r} outside [0, 1]", line)
    return r


def parse_scenario(text):
    """Parse scenario text into a ScenarioSpec; errors carry a line number."""
    if not text.strip():
        raise ScenarioError("empty scenario file", 1)
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",),
                                   strict=True)
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.MissingSectionHeaderError as e:
        raise ScenarioError("expected a [section] header", e.lineno) from None
    except configparser.DuplicateSectionError as e:
        raise ScenarioError(f"section [{e.section}] given twice", e.lineno) from None
    except configparser.DuplicateOptionError as e:
        raise ScenarioError(f"key {e.option!r} given twice in [{e.section}]", e.lineno) from None
    except configparser.ParsingError as e:
        line = e.errors[0][0] if e.errors else None
        raise ScenarioError("cannot parse this line", line) from None
    lines = _key_lines(text)
    for sec in cp.sections():
        if sec not in SECTIONS:
            raise ScenarioError(f"unknown section [{sec}]", lines.get((sec, None)))
    if not cp.has_section("topology"):
        raise ScenarioError("missing [topology] section", 1)

    scenario = _parse_topology(cp["topology"], lines)
    pattern, rate, links = _parse_loss(cp["loss"] if cp.has_section("loss") else {}, lines, scenario)
    mode, engine = _parse_engine(cp["engine"] if cp.has_section("engine") else {}, lines)

    spec = ScenarioSpec(scenario, mode, engine, pattern, rate, links, text)
    try:
        if pattern is not None:
            spec.scenario = spec.at_rate(rate)
        elif links:
            spec.scenario = _with_links(scenario, links)
    except (TopologyError, LossError) as e:
        raise ScenarioError(str(e), lines.get(("loss", None))) from None
    return spec


def _with_links(scenario, links):
    rates = dict(scenario.loss.rates)
    for l, r in links.items():
        if l not in rates:
            raise LossError(f"loss given for {l[0]}->{l[1]}, which is not a link")
        rates[l] = r
    return scenario.with_loss(LossMatrix(rates))


def _parse_topology(sec, lines):
    where = lambda k: lines.get(("topology", k))
    keys = list(sec.keys())
    if "kind" in keys:
        for k in keys:
            if k not in CANONICAL_KEYS:
                raise ScenarioError(f"unknown key {k!r} in [topology]", where(k))
        params = {k: sec[k] for k in keys if k != "kind"}
        try:
            return build_canonical(sec["kind"].strip(), params)
        except (TopologyError, ValueError) as e:
            raise ScenarioError(str(e), where("kind")) from None

    for k in keys:
        if k not in EXPLICIT_KEYS and not k.startswith("flow."):
            raise ScenarioError(f"unknown key {k!r} in [topology]", where(k))
    if "nodes" not in keys:
        raise ScenarioError("[topology] needs either kind or nodes", lines.get(("topology", None)))
    nodes = sec["nodes"].replace(",", " ").split()
    known = set(nodes)
    cap = _number(sec.get("capacity", "1.0"), float, "capacity", where("capacity"))
    G = _number(sec.get("generation_size", "15"), int, "generation_size", where("generation_size"))
    links = {}
    for tok in sec.get("links", "").replace(",", " ").split():
        for a, b in _link(tok, where("links")):
            for n in (a, b):
                if n not in known:
                    raise ScenarioError(f"link {tok} references undefined node {n}", where("links"))
            links[(a, b)] = cap
    flows = []
    for k in keys:
        if k.startswith("flow."):
            path = sec[k].replace(",", " ").split()
            for n in path:
                if n not in known:
                    raise ScenarioError(f"{k} references undefined node {n}", where(k))
            try:
                flows.append(Flow(k[5:], tuple(path), G))
            except TopologyError as e:
                raise ScenarioError(str(e), where(k)) from None
    if not flows:
        raise ScenarioError("no flow.<id> entries", lines.get(("topology", None)))
    cliques = None
    if "cliques" in keys:
        cliques = [c.split() for c in sec["cliques"].split(";") if c.strip()]
    opts = {}
    if "max_code_size" in keys:
        opts["max_code_size"] = _number(sec["max_code_size"], int, "max_code_size", where("max_code_size"))
    if "gamma" in keys:
        opts["gamma"] = _number(sec["gamma"], float, "gamma", where("gamma"))
    if "interference" in keys:
        opts["interference"] = sec["interference"].strip()
    try:
        return build_scenario(nodes, links, flows, cliques=cliques, **opts)
    except (TopologyError, ValueError) as e:
        line = where("cliques") if "clique" in str(e) else lines.get(("topology", None))
        raise ScenarioError(str(e), line) from None


def _parse_loss(sec, lines, scenario):
    where = lambda k: lines.get(("loss", k))
    pattern = rate = None
    links = {}
    for k in list(sec.keys()):
        v = sec[k]
        if k == "pattern":
            pattern = v.strip()
            if pattern not in PATTERNS:
                raise ScenarioError(f"unknown pattern {pattern!r}; one of {', '.join(PATTERNS)}",
                                    where(k))
        elif k == "rate":
            rate = _rate(v, "rate", where(k))
        elif ">" in k or "-" in k:
            r = _rate(v, k, where(k))
            for l in _link(k, where(k)):
                if l not in scenario.topology.links:
                    raise ScenarioError(f"{l[0]}->{l[1]} is not a link", where(k))
                links[l] = r
        else:
            raise ScenarioError(f"unknown key {k!r} in [loss]", where(k))
    if rate is not None and pattern is None:
        pattern = "all_links"
    if pattern is not None and rate is None:
        rate = 0.0
    return pattern, rate, links


def _parse_engine(sec, lines):
    where = lambda k: lines.get(("engine", k))
    mode = sec.get("mode", "optimize").strip()
    if mode not in ("optimize", "simulate"):
        raise ScenarioError(f"mode must be optimize or simulate, not {mode!r}", where("mode"))
    if mode == "optimize":
        defaults = numopt.OptimizerConfig()
        allowed = OPT_FIELDS
    else:
        defaults = nodesim.SimConfig()
        allowed = SIM_FIELDS
    out = {}
    for k in sec.keys():
        if k == "mode":
            continue
        if k not in allowed:
            raise ScenarioError(f"unknown key {k!r} for mode {mode}", where(k))
        out[k] = _typed(sec[k], getattr(defaults, k), k, where(k))
    try:
        (numopt.OptimizerConfig if mode == "optimize" else nodesim.SimConfig)(**out)
    except (numopt.OptimizerError, nodesim.SimError) as e:
        raise ScenarioError(str(e), lines.get(("engine", None))) from None
    return mode, out


def load(path):
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as e:
        raise ScenarioError(f"cannot read {path}: {e.strerror}") from None
    return parse_scenario(text)


# -- running ------------------------------------------------------------

@dataclass
class Row:
    scheme: str
    loss_rate: float | None
    seed: object
    flows: dict
    converged: object = ""
    iterations: object = ""
    error: str = ""
    total: float | None = None      # None: sum of the flows


def optimize_row(scenario, engine, variant, rate, seed):
    cfg = numopt.OptimizerConfig(**{**engine, "variant": variant, "record": False})
    tr = numopt.solve(scenario, cfg)
    flows = {f.id: float(v) for f, v in zip(scenario.flows, tr.final_x)}
    return Row(variant, rate, seed, flows, tr.converged, tr.iterations)


def simulate_row(scenario, engine, scheme, rate, seed):
    cfg = nodesim.SimConfig(**{**engine, "scheme": scheme})
    res = nodesim.run_simulation(scenario, cfg, seed)
    return Row(scheme, rate, seed, dict(res.throughput))


def _cell(args):
    kind, scenario, engine, scheme, rate, seed = args
    try:
        if kind == "optimize":
            return optimize_row(scenario, engine, scheme, rate, seed)
        return simulate_row(scenario, engine, scheme, rate, seed)
    except (numopt.OptimizerError, numopt.InfeasibleHyperarcError, nodesim.SimError,
            TopologyError, LossError, ValueError, ZeroDivisionError) as e:
        return Row(scheme, rate, seed, {}, error=f"{type(e).__name__}: {e}")


def _seeds(spec, base):
    if spec.mode == "optimize":
        return [base]
    n = spec.engine.get("seeds", nodesim.SimConfig().seeds)
    return list(range(base, base + n))


def run_cells(cells, jobs=1):
    if jobs > 1 and len(cells) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            return list(ex.map(_cell, cells))   # map keeps input order
    return [_cell(c) for c in cells]


def aggregate(rows):
    """Mean and sample std rows over the successful seeds of one cell."""
    ok = [r for r in rows if not r.error]
    if not ok:
        return []
    ids = list(ok[0].flows)
    mean = {f: statistics.fmean(r.flows[f] for r in ok) for f in ids}
    std = {f: (statistics.stdev([r.flows[f] for r in ok]) if len(ok) > 1 else 0.0) for f in ids}
    totals = [sum(r.flows.values()) for r in ok]
    head = rows[0]
    # the spread of the total is not the sum of the per-flow spreads
    spread = statistics.stdev(totals) if len(totals) > 1 else 0.0
    return [Row(head.scheme, head.loss_rate, "mean", mean),
            Row(head.scheme, head.loss_rate, "std", std, total=spread)]


# -- CSV ------------------------------------------------------------------

def _fmt(v, prec):
    if v is None or v == "":
        return ""
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        if math.isnan(v):
            return "nan"
        return f"{v:.{prec}f}"
    return str(v)


def write_rows(fh, flow_ids, rows, prec):
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["scheme", "loss_rate", "seed"] + [f"x_{f}" for f in flow_ids]
               + ["total", "converged", "iterations", "error"])
    for r in rows:
        vals = [round(r.flows[f], prec) for f in flow_ids] if r.flows else []
        if r.total is not None:
            total = round(r.total, prec)
        else:
            # summing the rounded values keeps total == sum of the columns
            total = round(sum(vals), prec) if vals else None
        w.writerow([r.scheme, _fmt(r.loss_rate, prec), r.seed]
                   + ([_fmt(v, prec) for v in vals] if vals else [""] * len(flow_ids))
                   + [_fmt(total, prec), _fmt(r.converged, prec), _fmt(r.iterations, prec), r.error])


def write_trajectory(fh, flow_ids, tr, prec):
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["iter"] + [f"x_{f}" for f in flow_ids] + ["total", "residual", "lyapunov_proxy"])
    V = numopt.lyapunov_proxy(tr)
    for t in range(len(tr.x)):
        vals = [round(float(v), prec) for v in tr.x[t]]
        w.writerow([t] + [_fmt(v, prec) for v in vals]
                   + [_fmt(round(sum(vals), prec), prec), _fmt(float(tr.residual[t]), prec),
                      _fmt(float(V[t]), prec)])
    if not tr.converged:
        w.writerow(["nonconverged"] + [""] * (len(flow_ids) + 3))


# -- commands -------------------------------------------------------------

def _schemes(spec, given):
    if given:
        names = [s.strip() for s in given.split(",") if s.strip()]
    elif spec.mode == "optimize":
        names = [spec.engine.get("variant", "state")]
    else:
        names = [spec.engine.get("scheme", "i2nc_state")]
    valid = numopt.VARIANTS if spec.mode == "optimize" else nodesim.SCHEMES
    for n in names:
        if n not in valid:
            raise ScenarioError(f"unknown scheme {n!r} for mode {spec.mode}; one of {', '.join(valid)}")
    return names


def _rates(given):
    out = []
    for tok in given.split(","):
        tok = tok.strip()
        if not tok:
            continue
        try:
            r = float(tok)
        except ValueError:
            raise ScenarioError(f"--rates: {tok!r} is not a number") from None
        if not 0.0 <= r < 1.0:
            raise ScenarioError(f"--rates: {r} outside [0, 1)")
        out.append(r)
    return out


def cmd_run(spec, args, rates=None):
    schemes = _schemes(spec, getattr(args, "schemes", None))
    seeds = _seeds(spec, args.seed)
    if rates is None:
        cells = [(spec.mode, spec.scenario, spec.engine, s, spec.rate, seed)
                 for s in schemes for seed in seeds]
    else:
        cells = [(spec.mode, spec.at_rate(r), spec.engine, s, r, seed)
                 for s in schemes for r in rates for seed in seeds]
    rows = run_cells(cells, args.jobs)
    out = []
    per = len(seeds)
    for i in range(0, len(rows), per):
        group = rows[i:i + per]
        out.extend(group)
        if spec.mode == "simulate":
            out.extend(aggregate(group))
    return out


def exit_code(rows):
    if any(r.error for r in rows):
        return EXIT_ENGINE
    if any(r.converged is False for r in rows):
        return EXIT_NONCONVERGED
    return EXIT_OK


def _open_out(path):
    if path in (None, "-"):
        return sys.stdout, False
    return open(path, "w", encoding="utf-8", newline=""), True


def main(argv=None):
    parser = argparse.ArgumentParser(prog="nclab", description="Optimizer and simulator for "
                                     "XOR relaying with generation coding.")
    sub = parser.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("scenario")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out", default=None, help="CSV path (default stdout)")
    common.add_argument("--csv-precision", type=int, default=6, dest="precision")
    common.add_argument("--jobs", type=int, default=1, help="worker processes")
    sub.add_parser("optimize", parents=[common], help="solve the utility problem once")
    p = sub.add_parser("simulate", parents=[common], help="packet-level runs over the seeds")
    p.add_argument("--schemes", default=None)
    p = sub.add_parser("sweep", parents=[common], help="loss-rate sweep")
    p.add_argument("--rates", required=True)
    p.add_argument("--schemes", default=None)
    sub.add_parser("convergence", parents=[common], help="optimizer trajectory")

    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code else EXIT_OK
    if args.precision < 0 or args.jobs < 1:
        print("nclab: --csv-precision must be >= 0 and --jobs >= 1", file=sys.stderr)
        return EXIT_USAGE

    try:
        spec = load(args.scenario)
        if args.command in ("optimize", "convergence") and spec.mode != "optimize":
            raise ScenarioError(f"{args.command} needs mode = optimize in [engine]")
        if args.command == "simulate" and spec.mode != "simulate":
            raise ScenarioError("simulate needs mode = simulate in [engine]")
        rates = _rates(args.rates) if args.command == "sweep" else None
        if args.command != "convergence":
            _schemes(spec, getattr(args, "schemes", None))
    except ScenarioError as e:
        print(f"nclab: {args.scenario}: {e}", file=sys.stderr)
        return EXIT_USAGE

    flow_ids = [f.id for f in spec.scenario.flows]
    buf = io.StringIO()
    if args.command == "convergence":
        try:
            cfg = numopt.OptimizerConfig(**spec.engine)
            tr = numopt.solve(spec.scenario, cfg)
        except (numopt.OptimizerError, numopt.InfeasibleHyperarcError, ValueError) as e:
            print(f"nclab: engine error: {e}", file=sys.stderr)
            return EXIT_ENGINE
        write_trajectory(buf, flow_ids, tr, args.precision)
        code = EXIT_OK if tr.converged else EXIT_NONCONVERGED
    else:
        rows = cmd_run(spec, args, rates)
        write_rows(buf, flow_ids, rows, args.precision)
        for r in rows:
            if r.error:
                print(f"nclab: {r.scheme} rate={r.loss_rate} seed={r.seed}: {r.error}",
                      file=sys.stderr)
        code = exit_code(rows)

    fh, close = _open_out(args.out)
    try:
        fh.write(buf.getvalue())
    finally:
        if close:
            fh.close()
    return code


if __name__ == "__main__":
    sys.exit(main())
