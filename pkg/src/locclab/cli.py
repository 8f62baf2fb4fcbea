"""Command-line entry point.

Exit codes: 0 success, 2 malformed input, 3 failed precondition, 4 resource guard.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from dataclasses import dataclass

import numpy as np

from . import protocols as pr
from .analysis import factorizability_audit, monotone_audit, monte_carlo_yield, state_digest
from .decomp import Cut, enumerate_cuts, is_factorizable, is_irreducible, schmidt
from .errors import InvalidParameter, LocclabError
from .locc import (
    DEFAULT_BRANCH_GUARD,
    ResourceLedger,
    check_program_layout,
    load_program,
    run_program,
    sample_program,
)
from .qstate import (
    Party,
    PureState,
    RegisterLayout,
    epr,
    ghz,
    load_state,
    party_names,
    permute_parties,
    random_state,
    state_to_dict,
    tensor,
    w_state,
)

COMMANDS = ("gamble", "some-epr", "pair-epr", "cat2epr", "epr2cat", "synthesize", "loccq-rewrite", "audit", "sample")
SAMPLING = ("gamble", "some-epr", "sample")
KINDS = ("ghz", "w", "epr", "random-irreducible", "random-factorizable")


@dataclass
class RunConfig:
    command: str
    state_path: str | None = None
    protocol_path: str | None = None
    seed: int = 0
    trials: int = 100_000
    output_path: str | None = None
    format: str = "json"
    pair: tuple[str, str] | None = None
    copies: int | None = None
    site: str | None = None
    parties: list[str] | None = None
    cats: int = 1


# --------------------------------------------------------------------------
# output


def _flatten(obj, prefix=""):
    if isinstance(obj, dict):
        for k in obj:
            yield from _flatten(obj[k], f"{prefix}.{k}" if prefix else str(k))
    elif isinstance(obj, list):
        for i, v in enumerate(obj):
            yield from _flatten(v, f"{prefix}[{i}]")
    else:
        yield prefix, obj


def render(report: dict, fmt: str) -> str:
    if fmt == "json":
        return json.dumps(report, indent=2, sort_keys=True) + "\n"
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["key", "value"])
    for key, value in _flatten(report):
        writer.writerow([key, "" if value is None else value])
    return buf.getvalue()


def _write(text: str, path: str | None):
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        with open(path, "w") as fh:
            fh.write(text)


# --------------------------------------------------------------------------
# commands


def _need_state(cfg: RunConfig) -> PureState:
    if not cfg.state_path:
        raise InvalidParameter(f"{cfg.command} needs --state")
    return load_state(cfg.state_path)


def _need_pair(cfg: RunConfig, s: PureState) -> tuple[int, int]:
    if not cfg.pair:
        raise InvalidParameter(f"{cfg.command} needs --pair P1,P2")
    return s.layout.index(cfg.pair[0]), s.layout.index(cfg.pair[1])


def _outcome_report(out: pr.DistillationOutcome) -> dict:
    return {
        "pair": list(out.pair_names),
        "enumerated_success_probability": out.success_probability,
        "min_success_fidelity": out.min_success_fidelity,
        "branches": [
            {"path": list(b.path), "probability": b.probability, "verdict": b.verdict}
            for b in out.trace.branches
        ],
        "ledger": out.ledger.to_dict(),
    }


def _cmd_gamble(cfg, s):
    if cfg.pair:
        out = pr.gamble_pair(s, *_need_pair(cfg, s))
    elif s.m == 2:
        out = pr.bipartite_gamble(s, enumerate_cuts(s.layout)[0])
    else:
        raise InvalidParameter("gamble on more than two parties needs --pair")
    i, j = out.pair
    pair_state = pr._pair_vector(s, i, j)
    analysis = pr.gamble_success_probability(schmidt(pair_state, Cut(frozenset({0}), 2)).coefficients)
    report = _outcome_report(out)
    report["analytic_success_probability"] = analysis.total_success
    report["filter_coeffs"] = list(analysis.filter_coeffs)
    report["projection_probability"] = analysis.projection_probability
    report["monte_carlo"] = monte_carlo_yield(out.program, s, cfg.trials, cfg.seed).to_dict()
    report["notes"] = [pr.NOTE_FILTER, pr.NOTE_YIELD]
    return report


def _cmd_some_epr(cfg, s):
    out = pr.gamble_some_epr(s, cfg.seed)
    report = _outcome_report(out)
    report["monte_carlo"] = monte_carlo_yield(out.program, s, cfg.trials, cfg.seed).to_dict()
    report["notes"] = [pr.NOTE_FILTER, pr.NOTE_YIELD]
    return report


def _cmd_pair_epr(cfg, s):
    i, j = _need_pair(cfg, s)
    out = pr.epr_between_pair(s, i, j, cfg.copies, cfg.seed)
    report = _outcome_report(out)
    report["target"] = [s.layout.names[i], s.layout.names[j]]
    report["levels"] = out.stages
    report["notes"] = [pr.NOTE_IRREDUCIBLE, pr.NOTE_YIELD]
    return report


def _cmd_cat2epr(cfg, s):
    out = pr.cat_to_epr(s, *_need_pair(cfg, s))
    return _outcome_report(out)


def _cmd_epr2cat(cfg, s):
    names = cfg.parties or (s.layout.names if s is not None else ["A", "B", "C"])
    if len(names) < 2:
        raise InvalidParameter("epr2cat needs a hub and at least one spoke")
    hub, spokes = names[0], names[1:]
    supply = ResourceLedger()
    for sp in spokes:
        supply.register_epr(hub, sp)
    res = pr.eprs_to_cat(hub, spokes, supply)
    return {"hub": hub, "spokes": spokes, "fidelity": res.fidelity,
            "min_branch_fidelity": min(t.min_fidelity for t in res.teleports),
            "ledger": res.delta.to_dict(), "state": state_to_dict(res.state)}


def _cmd_synthesize(cfg, s):
    site = cfg.site or s.layout.names[0]
    si = s.layout.index(site)
    supply = ResourceLedger()
    for i, p in enumerate(s.layout.parties):
        if i != si:
            supply.register_epr(s.layout.names[si], p.name, len(p.dims))
    res = pr.synthesize_from_eprs(s, si, supply)
    return {"site": s.layout.names[si], "fidelity": res.fidelity,
            "factor_blocks": [[s.layout.names[i] for i in b] for b in pr.factor_blocks(s)],
            "ledger": res.delta.to_dict()}


def _cmd_loccq(cfg, s):
    n = cfg.copies or 1
    if cfg.protocol_path:
        prog, raw = load_program(cfg.protocol_path)
        protocol = pr.LoccqProtocol(prog, int(raw.get("cats", cfg.cats)))
        check_program_layout(prog, pr.joint_input(s, n, [ghz(s.m, s.layout.names)] * protocol.cats).layout)
        name = cfg.protocol_path
    else:
        protocol = pr.cat_teleport_protocol(s, n)
        name = "builtin:cat-teleport"
    res = pr.loccq_to_locc_rewrite(protocol, s, n, cfg.seed)
    report = res.report()
    report.update({"protocol": name, "cats": protocol.cats, "copies": n,
                   "notes": [pr.NOTE_YIELD, "extra_copies does not depend on the copy count n"]})
    return report


def _load_protocol_for(cfg, s):
    if not cfg.protocol_path:
        raise InvalidParameter(f"{cfg.command} needs --protocol")
    prog, _ = load_program(cfg.protocol_path)
    check_program_layout(prog, s.layout)
    return prog


def _cmd_audit(cfg, s):
    prog = _load_protocol_for(cfg, s)
    mono = monotone_audit(prog, s)
    fact = [factorizability_audit(prog, s, c).to_dict(cfg.protocol_path, s)
            for c in enumerate_cuts(s.layout) if is_factorizable(s, c)]
    return {"monotone": mono.to_dict(cfg.protocol_path, s), "factorizability": fact,
            "pass": mono.passed and all(f["pass"] for f in fact)}


def _cmd_sample(cfg, s):
    prog = _load_protocol_for(cfg, s)
    res = sample_program(prog, s, cfg.seed, cfg.trials)
    est = monte_carlo_yield(prog, s, cfg.trials, cfg.seed)
    report = {"monte_carlo": est.to_dict(),
              "histogram": [{"path": list(k), "count": v, "verdict": res.verdicts[k]} for k, v in res.histogram.items()]}
    try:
        trace = run_program(prog, s, DEFAULT_BRANCH_GUARD)
        report["enumerated_success_probability"] = trace.total_success_probability
    except LocclabError:
        report["enumerated_success_probability"] = None
    return report


HANDLERS = {
    "gamble": _cmd_gamble,
    "some-epr": _cmd_some_epr,
    "pair-epr": _cmd_pair_epr,
    "cat2epr": _cmd_cat2epr,
    "epr2cat": _cmd_epr2cat,
    "synthesize": _cmd_synthesize,
    "loccq-rewrite": _cmd_loccq,
    "audit": _cmd_audit,
    "sample": _cmd_sample,
}


def build_report(cfg: RunConfig) -> dict:
    if cfg.command in SAMPLING and cfg.trials < 100:
        raise InvalidParameter("--trials must be at least 100")
    if cfg.format not in ("json", "csv"):
        raise InvalidParameter(f"unknown format {cfg.format!r}")
    s = None
    if cfg.command != "epr2cat" or cfg.state_path:
        s = _need_state(cfg)
    report = HANDLERS[cfg.command](cfg, s)
    report["command"] = cfg.command
    report["seed"] = cfg.seed
    if s is not None:
        report["state_digest"] = state_digest(s)
        report["parties"] = s.layout.names
    return report


def run(cfg: RunConfig) -> int:
    """Execute one command; returns the process exit code."""
    try:
        report = build_report(cfg)
    except LocclabError as exc:
        sys.stderr.write(f"{type(exc).__name__}: {exc}\n")
        return exc.exit_code
    _write(render(report, cfg.format), cfg.output_path)
    return 0


# --------------------------------------------------------------------------
# state generation


def generate(kind: str, m: int, d: int, seed: int) -> PureState:
    if m < 2:
        raise InvalidParameter("need at least two parties")
    if d < 2:
        raise InvalidParameter("local dimension must be at least 2")
    if kind in ("ghz", "w", "epr") and d != 2:
        raise InvalidParameter(f"{kind} states are qubit states")
    rng = np.random.default_rng(seed)
    if kind == "ghz":
        return ghz(m)
    if kind == "w":
        return w_state(m)
    if kind == "epr":
        return epr()
    layout = RegisterLayout.uniform(m, d)
    if kind == "random-irreducible":
        for _ in range(1000):
            s = random_state(layout, rng)
            if is_irreducible(s):
                return s
        raise InvalidParameter("rejection sampling found no irreducible state")
    if kind == "random-factorizable":
        names = party_names(m)
        k = int(rng.integers(1, m))
        side = sorted(rng.choice(m, size=k, replace=False).tolist())
        other = [i for i in range(m) if i not in side]
        a = random_state(RegisterLayout(tuple(Party(names[i], (d,)) for i in side)), rng)
        b = random_state(RegisterLayout(tuple(Party(names[i], (d,)) for i in other)), rng)
        joint = tensor(a, b)
        order = [(side + other).index(i) for i in range(m)]
        return permute_parties(joint, order)
    raise InvalidParameter(f"unknown kind {kind!r}")


# --------------------------------------------------------------------------
# argument parsing


def _pair(text: str) -> tuple[str, str]:
    parts = [p.strip() for p in text.split(",")]
    if len(parts) != 2 or not all(parts):
        raise argparse.ArgumentTypeError("expected P1,P2")
    return parts[0], parts[1]


def _names(text: str) -> list[str]:
    return [p.strip() for p in text.split(",") if p.strip()]


def _seed(text: str) -> int:
    value = int(text, 0)
    if not -(2**63) <= value < 2**64:
        raise argparse.ArgumentTypeError("seed must fit in 64 bits")
    return value


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="locclab", description="Multipartite LOCC protocol simulator")
    sub = parser.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--state")
    common.add_argument("--protocol")
    common.add_argument("--seed", type=_seed, default=0)
    common.add_argument("--trials", type=int, default=100_000)
    common.add_argument("--out")
    common.add_argument("--format", choices=("json", "csv"), default="json")
    common.add_argument("--pair", type=_pair)
    common.add_argument("--copies", type=int)
    common.add_argument("--site")
    common.add_argument("--parties", type=_names, help="epr2cat: hub first, then spokes")
    common.add_argument("--cats", type=int, default=1, help="loccq-rewrite: cat budget of the built-in protocol")
    for cmd in COMMANDS:
        sub.add_parser(cmd, parents=[common])
    gen = sub.add_parser("generate", help="write a state file")
    gen.add_argument("kind", choices=KINDS)
    gen.add_argument("--parties", type=int, default=None, dest="m")
    gen.add_argument("--dims", type=int, default=2)
    gen.add_argument("--seed", type=_seed, default=0)
    gen.add_argument("--out")
    return parser


def main(argv=None) -> int:
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 2
    if args.command == "generate":
        m = args.m if args.m is not None else (2 if args.kind == "epr" else 3)
        try:
            s = generate(args.kind, m, args.dims, args.seed)
        except LocclabError as exc:
            sys.stderr.write(f"{type(exc).__name__}: {exc}\n")
            return 2
        _write(json.dumps(state_to_dict(s)) + "\n", args.out)
        return 0
    cfg = RunConfig(
        command=args.command, state_path=args.state, protocol_path=args.protocol, seed=args.seed,
        trials=args.trials, output_path=args.out, format=args.format, pair=args.pair,
        copies=args.copies, site=args.site, parties=args.parties, cats=args.cats,
    )
    return run(cfg)


if __name__ == "__main__":
    sys.exit(main())
