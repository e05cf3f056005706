"""Command line entry point.

Every subcommand reads an optional JSON config (``--config``); flags
override file values and unknown keys are rejected. Each run writes
``<subcommand>_metadata.json`` with the effective config into ``--out-dir``.
Exit codes: 0 success, 1 invalid input, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__, seqmut
from .infer import JOINT_MOVES, Chain, ChainConfig, InferenceError, chain_summary, run_chain
from .likelihood import LikelihoodError, per_tree_log_densities
from .model import (
    ConstantBirth,
    ModelError,
    Params,
    Prior,
    PriorSpec,
    SigmoidParams,
    TypeSpace,
    bin_index,
    discretize,
    load_gamma,
    load_type_space,
    save_gamma,
)
from .ppc import child_seeds, posterior_predictive
from .simulate import (
    Capacity,
    SimOptions,
    SimulationError,
    simulate_conditioned,
    simulate_full,
)
from .tree import TreeError, load_trees, to_json

CONFIG_VERSION = 1
log = logging.getLogger("gcfit")

PARAMS_DEFAULT = {
    "phi": [1.3, 1.0, -1.1, 0.5],
    "mu": 0.5,
    "delta": 20.0,
    "rho": [0.1],
    "gamma": None,
    "type_space": None,
}

DEFAULTS = {
    "simulate": {
        "params": PARAMS_DEFAULT,
        "t_total": 15.0,
        "root_affinity": 0.0,
        "capacity": None,
        "n_trees": 1,
        "full": False,
        "max_events": 10**6,
        "max_rejections": 10**6,
    },
    "loglik": {
        "trees": None,
        "params": PARAMS_DEFAULT,
        "mode": "exact",
        "conditional": True,
    },
    "infer": {
        "trees": None,
        "params": PARAMS_DEFAULT,
        "priors": None,
        "iterations": 20_000,
        "burn_in": 5_000,
        "thin": 10,
        "adapt": True,
        "joint_moves": JOINT_MOVES,
        "scales": {},
        "mode": "exact",
        "conditional": True,
    },
    "ratemat": {
        "naive": None,
        "affinity": None,
        "context": None,
        "type_space": None,
        "n_chains": 100,
        "duration": 200.0,
        "mutation_rate": 1.0,
        "rate_convention": "sequence",
        "allow_unvisited": True,
    },
    "discretize": {"samples": None, "n": 8},
    "ppc": {
        "chain": None,
        "trees": None,
        "params": PARAMS_DEFAULT,
        "n_draws": 100,
        "n_trees": None,
        "t_total": 15.0,
        "root_affinity": 0.0,
    },
    "study": {"name": None, "overrides": {}},
}
PATH_KEYS = {"trees", "chain", "samples", "naive", "affinity", "context", "type_space", "gamma"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(1)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="gcfit", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", type=Path, help="JSON config file")
        sp.add_argument("--seed", type=int, default=None, help="master seed")
        sp.add_argument("--out-dir", type=Path, default=Path("."), help="output directory")
        sp.add_argument("--threads", type=int, default=None, help="parallel workers")
        sp.add_argument("-v", "--verbose", action="store_true")
        return sp

    s = common(sub.add_parser("simulate", help="simulate trees"))
    s.add_argument("--n-trees", type=int)
    s.add_argument("--full", action="store_true", default=None, help="keep full trees")

    s = common(sub.add_parser("loglik", help="evaluate tree log densities"))
    s.add_argument("--trees", type=Path)
    s.add_argument("--mode", choices=["exact", "loglinear", "direct", "approx"])
    s.add_argument("--unconditional", action="store_true", default=None)

    s = common(sub.add_parser("infer", help="sample the posterior"))
    s.add_argument("--trees", type=Path)
    s.add_argument("--mode", choices=["exact", "loglinear", "direct", "approx"])
    s.add_argument("--iterations", type=int)
    s.add_argument("--burn-in", type=int)
    s.add_argument("--thin", type=int)
    s.add_argument("--joint-moves", type=int, help="joint moves per sweep (0 = component-wise only)")

    s = common(sub.add_parser("ratemat", help="estimate the type change rate matrix"))
    s.add_argument("--n-chains", type=int)

    s = common(sub.add_parser("discretize", help="bin affinity samples"))
    s.add_argument("--samples", type=Path)
    s.add_argument("--n", type=int)

    s = common(sub.add_parser("ppc", help="posterior predictive diagnostics"))
    s.add_argument("--chain", type=Path)
    s.add_argument("--trees", type=Path)
    s.add_argument("--n-draws", type=int)

    s = common(sub.add_parser("study", help="run a named simulation study"))
    s.add_argument("name", choices=["nm", "al", "isp", "cc", "cc-soft", "cc-slm", "conditioning"])
    s.add_argument("--mode", choices=["exact", "approx"])
    s.add_argument("--iterations", type=int)
    s.add_argument("--n-sets", type=int)
    return p


# -- configuration -------------------------------------------------------------


def _merge(defaults: dict, given: dict, where: str) -> dict:
    unknown = set(given) - set(defaults)
    if unknown:
        raise UsageError(f"unknown config keys in {where}: {sorted(unknown)}")
    out = dict(defaults)
    for k, v in given.items():
        if isinstance(defaults[k], dict) and k not in ("scales", "overrides") and isinstance(v, dict):
            out[k] = _merge(defaults[k], v, f"{where}.{k}")
        else:
            out[k] = v
    return out


def effective_config(args) -> dict:
    """Defaults, then the config file, then flags."""
    cmd = args.command
    given = {}
    if args.config is not None:
        if not args.config.exists():
            raise UsageError(f"config file not found: {args.config}")
        doc = json.loads(args.config.read_text())
        if "effective_config" in doc:  # replaying a metadata record
            if doc.get("command") != cmd:
                raise UsageError(f"metadata record is for {doc.get('command')!r}, not {cmd!r}")
            doc = {"version": doc.get("version", CONFIG_VERSION), **doc["effective_config"]}
        version = doc.pop("version", CONFIG_VERSION)
        if version != CONFIG_VERSION:
            raise UsageError(f"unsupported config version {version}")
        given = doc
    given = dict(given)
    file_seed = given.pop("seed", 0)
    file_threads = given.pop("threads", None)
    cfg = _merge(DEFAULTS[cmd], given, "config")
    flag_map = {
        "n_trees": "n_trees",
        "full": "full",
        "trees": "trees",
        "mode": "mode",
        "unconditional": "conditional",
        "iterations": "iterations",
        "burn_in": "burn_in",
        "thin": "thin",
        "joint_moves": "joint_moves",
        "n_chains": "n_chains",
        "samples": "samples",
        "n": "n",
        "chain": "chain",
        "n_draws": "n_draws",
    }
    for flag, key in flag_map.items():
        v = getattr(args, flag, None)
        if v is None:
            continue
        if flag == "unconditional":
            v = not v
        if cmd == "study":
            continue
        cfg[key] = str(v) if isinstance(v, Path) else v
    if cmd == "study":
        cfg["name"] = args.name
        over = dict(cfg["overrides"])
        for flag in ("mode", "iterations", "n_sets"):
            v = getattr(args, flag, None)
            if v is not None:
                over[flag] = v
        cfg["overrides"] = over
    cfg["seed"] = args.seed if args.seed is not None else file_seed
    if args.threads is not None:
        cfg["threads"] = args.threads
    else:
        cfg["threads"] = file_threads or os.cpu_count() or 1
    for key in PATH_KEYS:
        for holder in (cfg, cfg.get("params") or {}):
            v = holder.get(key) if isinstance(holder, dict) else None
            if v is not None and not Path(v).exists():
                raise UsageError(f"{key} path not found: {v}")
    return cfg


def params_from_config(pc: dict) -> tuple[Params, TypeSpace]:
    space = load_type_space(pc.get("type_space"))
    gamma = load_gamma(pc.get("gamma"))
    phi = pc["phi"]
    if isinstance(phi, dict) and "lam" in phi:
        phi = ConstantBirth(float(phi["lam"]))
    elif isinstance(phi, dict):
        phi = SigmoidParams(**{k: float(v) for k, v in phi.items()})
    else:
        phi = SigmoidParams(*map(float, phi))
    rho = pc["rho"]
    rho = (rho,) if np.isscalar(rho) else tuple(rho)
    return Params(phi, float(pc["mu"]), float(pc["delta"]), gamma, rho=rho), space


def priors_from_config(pc: dict | None) -> PriorSpec:
    if pc is None:
        return PriorSpec.default()
    return PriorSpec({k: Prior(v["kind"], float(v["loc"]), float(v["scale"])) for k, v in pc.items()})


def write_metadata(out_dir: Path, cmd: str, cfg: dict, argv, extra=None) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"{cmd}_metadata.json"
    doc = {
        "version": CONFIG_VERSION,
        "software_version": __version__,
        "command": cmd,
        "argv": list(argv),
        "effective_config": cfg,
        **(extra or {}),
    }
    path.write_text(json.dumps(doc, indent=2, sort_keys=True, default=str))
    return path


# -- subcommands ---------------------------------------------------------------


def cmd_simulate(cfg, out: Path):
    params, space = params_from_config(cfg["params"])
    cap = cfg["capacity"]
    capacity = None if cap is None else Capacity(cap["mode"], int(cap["K"]), float(cap.get("sharpness", 0.1)))
    opts = SimOptions(
        t_total=float(cfg["t_total"]),
        root_state=bin_index(space, float(cfg["root_affinity"])),
        capacity=capacity,
        max_events=int(cfg["max_events"]),
        max_rejections=int(cfg["max_rejections"]),
    )
    seeds = child_seeds(cfg["seed"], int(cfg["n_trees"]))
    manifest = []
    for i, s in enumerate(seeds):
        rng = np.random.default_rng(s)
        if cfg["full"]:
            tree, rej = simulate_full(params, space, opts, rng), 0
        else:
            tree, rej = simulate_conditioned(params, space, opts, rng=rng)
        name = f"tree_{i:04d}.json"
        (out / name).write_bytes(to_json(tree))
        manifest.append({"file": name, "seed": s, "rejections": rej})
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return {"n_trees": len(manifest)}


def _load_tree_input(path) -> list:
    if path is None:
        raise UsageError("no trees given (--trees or config 'trees')")
    return load_trees(path)


def cmd_loglik(cfg, out: Path):
    trees = _load_tree_input(cfg["trees"])
    params, space = params_from_config(cfg["params"])
    mode = cfg["mode"]
    # per-tree results come from one set evaluation
    from .likelihood import log_density

    rows = []
    for i, t in enumerate(trees):
        if mode == "approx":
            lq = per_tree_log_densities([t], params, space, "approx", conditional=False)[0]
            lc = per_tree_log_densities([t], params, space, "approx", conditional=True)[0]
            ls = lq - lc
        else:
            r = log_density(t, params, space, "loglinear" if mode == "exact" else mode)
            lq, ls, lc = r.log_q_root, r.log_survival, r.log_conditional
        rows.append((i, mode, lq, ls, lc))
    col = 4 if cfg["conditional"] else 2
    total = float(sum(r[col] for r in rows))
    lines = ["tree,mode,log_q_root,log_survival,log_conditional"]
    lines += [f"{i},{m},{lq!r},{ls!r},{lc!r}" for i, m, lq, ls, lc in rows]
    lines.append(f"total,{mode},,,{total!r}" if cfg["conditional"] else f"total,{mode},{total!r},,")
    (out / "loglik.csv").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    return {"total": total}


def cmd_infer(cfg, out: Path):
    trees = _load_tree_input(cfg["trees"])
    base, space = params_from_config(cfg["params"])
    priors = priors_from_config(cfg["priors"])
    cc = ChainConfig(
        iterations=int(cfg["iterations"]),
        burn_in=int(cfg["burn_in"]),
        thin=int(cfg["thin"]),
        scales=cfg["scales"],
        adapt=bool(cfg["adapt"]),
        joint_moves=int(cfg["joint_moves"]),
        seed=int(cfg["seed"]),
        mode=cfg["mode"],
        conditional=bool(cfg["conditional"]),
    )
    chain = run_chain(trees, priors, cc, base=base, space=space)
    chain.write(out)
    summ = chain_summary(chain, space)
    (out / "summary.json").write_text(json.dumps(summ.as_dict(), indent=2))
    return {"acceptance": chain.acceptance, "ess": chain.ess()}


def cmd_ratemat(cfg, out: Path):
    if cfg["naive"] or cfg["affinity"] or cfg["context"]:
        if not (cfg["naive"] and cfg["affinity"] and cfg["context"]):
            raise UsageError("naive, affinity and context must be given together")
        naive = Path(cfg["naive"]).read_text().split()[0]
        aff = seqmut.AffinityModel.from_csv(cfg["affinity"], naive)
        ctx = seqmut.ContextModel.from_csv(
            cfg["context"],
            overall_rate=float(cfg["mutation_rate"]),
            convention=cfg["rate_convention"],
        )
    else:
        naive, aff, ctx = seqmut.load_synthetic_models(cfg["rate_convention"], float(cfg["mutation_rate"]))
    space = load_type_space(cfg["type_space"])
    seeds = child_seeds(cfg["seed"], int(cfg["n_chains"]))
    chains = [
        seqmut.mutate_chain(naive, ctx, float(cfg["duration"]), np.random.default_rng(s))
        for s in seeds
    ]
    paths = [seqmut.chain_bin_path(c, aff, space) for c in chains]
    gamma, counts, dwell = seqmut.gamma_mle(paths, len(space), bool(cfg["allow_unvisited"]))
    save_gamma(gamma, out / "gamma.json")
    (out / "ratemat_counts.json").write_text(
        json.dumps({"counts": counts.tolist(), "dwell": dwell.tolist()}, indent=2)
    )
    return {"n_mutations": int(sum(len(c.mutations) for c in chains))}


def _read_samples(path) -> list[float]:
    text = Path(path).read_text().strip()
    if text.startswith("["):
        return [float(v) for v in json.loads(text)]
    return [float(v) for v in text.replace(",", " ").split()]


def cmd_discretize(cfg, out: Path):
    if cfg["samples"] is None:
        raise UsageError("no samples given (--samples or config 'samples')")
    samples = cfg["samples"]
    values = samples if isinstance(samples, list) else _read_samples(samples)
    space = discretize(values, int(cfg["n"]))
    (out / "type_space.json").write_text(space.to_json())
    print(space.to_json())
    return {}


def cmd_ppc(cfg, out: Path):
    if cfg["chain"] is None:
        raise UsageError("no chain given (--chain or config 'chain')")
    observed = _load_tree_input(cfg["trees"])
    base, space = params_from_config(cfg["params"])
    chain = Chain.from_csv(cfg["chain"])
    opts = SimOptions(t_total=float(cfg["t_total"]), root_state=bin_index(space, float(cfg["root_affinity"])))
    report = posterior_predictive(
        chain, base, observed, opts, space, int(cfg["n_draws"]), cfg["n_trees"], int(cfg["seed"])
    )
    report.to_csv(out / "ppc.csv")
    (out / "ppc.json").write_text(report.to_json())
    return {"within_central_90": report.within_central(0.9).tolist()}


def cmd_study(cfg, out: Path):
    from . import studies

    over = dict(cfg["overrides"])
    over.setdefault("seed", cfg["seed"])
    over.setdefault("threads", cfg["threads"])
    study = studies.get_study(cfg["name"], **over)
    if cfg["name"] == "conditioning":
        rows = studies.run_conditioning(study, out)
        return {"rows": len(rows)}
    results = studies.run_study(study, out)
    return {"lam_covered_90": [r["lam_covered_90"] for r in results]}


COMMANDS = {
    "simulate": cmd_simulate,
    "loglik": cmd_loglik,
    "infer": cmd_infer,
    "ratemat": cmd_ratemat,
    "discretize": cmd_discretize,
    "ppc": cmd_ppc,
    "study": cmd_study,
}

VALIDATION_ERRORS = (UsageError, ModelError, TreeError, ValueError, KeyError, FileNotFoundError, json.JSONDecodeError)
NUMERICAL_ERRORS = (LikelihoodError, SimulationError, InferenceError, FloatingPointError, ArithmeticError)


def run_cli(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    try:
        cfg = effective_config(args)
        out = args.out_dir
        out.mkdir(parents=True, exist_ok=True)
        write_metadata(out, args.command, cfg, argv, {"status": "running"})
        extra = COMMANDS[args.command](cfg, out)
        write_metadata(out, args.command, cfg, argv, {"status": "ok", "result": extra})
        return 0
    except NUMERICAL_ERRORS as e:
        print(f"gcfit {args.command}: numerical failure: {e}", file=sys.stderr)
        return 2
    except VALIDATION_ERRORS as e:
        print(f"gcfit {args.command}: invalid input: {e}", file=sys.stderr)
        return 1


def main():
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
