"""Command-line entry point.

Every subcommand reads one JSON config (a path or the name of a bundled
config), validates it against the shipped schema and writes its outputs into
``--out``. Each output names the config hash and seed. Exit codes: 0 success,
1 error (a JSON object on stdout), 2 experiment criterion failed.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from importlib import resources
from pathlib import Path
from typing import Any

import jsonschema

from . import ee as ee_mod
from . import estimators, oracle
from .designs import design_from_dict, draw_sample, sample_from_labels
from .errors import TwoPhaseError
from .experiments import ExperimentSpec, run_experiment
from .population import ModelSpec, liapunov_m1, model_moments, realize_population
from .rng import Seed

log = logging.getLogger("twophase")

STOCHASTIC = {"realize", "sample", "estimate", "ee", "experiment"}
SUBCOMMANDS = ("realize", "sample", "estimate", "ee", "oracle", "experiment")


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------
# config handling
# --------------------------------------------------------------------------


def _schema() -> dict[str, Any]:
    text = resources.files("twophase").joinpath("schemas/config.schema.json").read_text()
    return json.loads(text)


def bundled_configs() -> list[str]:
    root = resources.files("twophase").joinpath("configs")
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".json"))


def load_config(ref: str) -> dict[str, Any]:
    """Read a config from a file path, or by name from the bundled configs."""
    path = Path(ref)
    if path.is_file():
        return json.loads(path.read_text())
    name = ref[:-5] if ref.endswith(".json") else ref
    res = resources.files("twophase").joinpath(f"configs/{name}.json")
    if res.is_file():
        return json.loads(res.read_text())
    raise UsageError(f"config {ref!r} is neither a file nor a bundled config ({', '.join(bundled_configs())})")


def validate_config(cfg: dict[str, Any], subcommand: str) -> None:
    schema = _schema()
    root = {"$defs": schema["$defs"], "$ref": f"#/$defs/{subcommand}"}
    jsonschema.validate(cfg, root, cls=jsonschema.Draft202012Validator)


def config_hash(cfg: dict[str, Any]) -> str:
    canonical = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()


def _dump(obj: dict[str, Any]) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


class Outputs:
    def __init__(self, out: Path, meta: dict[str, Any]):
        self.out = out
        self.meta = meta
        self.written: list[str] = []
        out.mkdir(parents=True, exist_ok=True)

    @property
    def header(self) -> str:
        return " ".join(f"{k}={v}" for k, v in sorted(self.meta.items()))

    def json(self, name: str, payload: dict[str, Any]) -> dict[str, Any]:
        doc = {**payload, **self.meta}
        (self.out / name).write_text(_dump(doc))
        self.written.append(name)
        return doc

    def text(self, name: str, body: str) -> None:
        (self.out / name).write_text(body)
        self.written.append(name)

    def path(self, name: str) -> Path:
        self.written.append(name)
        return self.out / name


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------


def _population(cfg, seed: int):
    model = ModelSpec.from_dict(cfg["model"])
    return model, realize_population(model, Seed(seed).child("population"))


def cmd_realize(cfg, seed, out: Outputs, threads) -> dict[str, Any]:
    model, pop = _population(cfg, seed)
    pop.to_csv(out.path("population.csv"), out.header)
    theta_n, ybar_n = estimators.finite_pop_mean(pop)
    mom = model_moments(model)
    return out.json(
        "population.json",
        {
            "L": pop.L,
            "N": pop.N,
            "M": pop.M,
            "N_h": list(pop.n_clusters),
            "M_h": pop.stratum_sizes.tolist(),
            "W_h": pop.weights.tolist(),
            "theta_N": theta_n.tolist(),
            "Ybar_N": ybar_n.tolist(),
            "model_mu_h": mom.mu.tolist(),
            "model_sigma2_h": mom.sigma2.tolist(),
            "model_gamma_h": mom.gamma.tolist(),
            "model_mu_N": mom.mu_N.tolist(),
            "liapunov_m1": liapunov_m1(pop, float(cfg.get("delta", 1.0))),
        },
    )


def cmd_sample(cfg, seed, out: Outputs, threads) -> dict[str, Any]:
    _, pop = _population(cfg, seed)
    design = design_from_dict(cfg["design"])
    s = draw_sample(design, pop, Seed(seed).child("sample"))
    s.to_csv(out.path("sample.csv"), out.header)
    return out.json(
        "sample.json",
        {"design": design.to_dict(), "n": len(s), "repeated_labels": bool(s.has_repeats()), "N": pop.N},
    )


def cmd_estimate(cfg, seed, out: Outputs, threads) -> dict[str, Any]:
    _, pop = _population(cfg, seed)
    design = design_from_dict(cfg["design"])
    s = draw_sample(design, pop, Seed(seed).child("sample"))
    name = cfg.get("estimator", "mean")
    res = estimators.ppswr_mean_estimate(s, pop) if name == "mean" else estimators.ratio_estimate(s, pop)
    payload = res.to_dict()
    if design.kind == "strat_ppswr":
        payload["c1_prime"] = estimators.check_c1_prime(pop, design, float(cfg.get("delta", 1.0)))
    return out.json("estimate.json", payload)


def cmd_ee(cfg, seed, out: Outputs, threads) -> dict[str, Any]:
    _, pop = _population(cfg, seed)
    design = design_from_dict(cfg["design"])
    s = draw_sample(design, pop, Seed(seed).child("sample"))
    fn = ee_mod.builtin_ee(cfg.get("ee", "mean"), pop)
    res = ee_mod.fit_sample_ee(
        s,
        pop,
        fn,
        theta_init=cfg.get("theta_init"),
        include_model=bool(cfg.get("include_model", True)),
        level=float(cfg.get("level", 0.95)),
        with_target=True,
    )
    return out.json("ee.json", {"ee": fn.name, **res.to_dict()})


def _discrete_model(d: dict[str, Any]) -> oracle.DiscreteModel:
    if "bernoulli" in d:
        return oracle.DiscreteModel.bernoulli(d["bernoulli"])
    return oracle.DiscreteModel(
        tuple(tuple(float(v) for v in s) for s in d["supports"]),
        tuple(tuple(float(v) for v in p) for p in d["probs"]),
    )


def cmd_oracle(cfg, seed, out: Outputs, threads) -> dict[str, Any]:
    model = _discrete_model(cfg["discrete_model"])
    st = cfg.get("structure")
    structure = (
        oracle.Structure(
            tuple(st["n_clusters"]),
            tuple(st["sizes"]) if "sizes" in st else None,
            tuple(st["z"]) if "z" in st else None,
        )
        if st
        else None
    )
    tables = {
        name: oracle.enumerate_product_space(model, design_from_dict(d), structure)
        for name, d in sorted(cfg["designs"].items())
    }
    results: dict[str, Any] = {}
    for q in cfg["queries"]:
        if q["design"] not in tables:
            raise UsageError(f"query {q['name']!r} names unknown design {q['design']!r}")
        jp = tables[q["design"]]
        kind = q["type"]
        s0 = None
        if "sample" in q:
            s0 = sample_from_labels(jp.design, jp.population(0), q["sample"])
        if kind == "joint":
            results[q["name"]] = oracle.sample_variable_joint(jp, q["draws"], q["values"])
        elif kind == "posterior":
            if s0 is None:
                raise UsageError(f"posterior query {q['name']!r} needs a sample")
            event = list(zip(q.get("draws", []), q.get("values", [])))
            results[q["name"]] = oracle.posterior_given_sample(jp, s0, event)
        elif kind == "verdict":
            results[q["name"]] = oracle.independence_verdict(jp, s0).to_dict()
        elif kind == "design_cdf":
            pop = jp.population(int(q.get("outcome", 0)))
            results[q["name"]] = oracle.design_cdf(pop, jp.design, q.get("estimator", "mean"), float(q["t"]))
        elif kind == "product_cdf":
            results[q["name"]] = oracle.product_space_cdf(jp, q.get("estimator", "mean"), float(q["t"]))
    if cfg.get("export_tables"):
        for name, jp in tables.items():
            jp.to_csv(out.path(f"joint_{name}.csv"), out.header)
    shapes = {name: list(jp.shape) for name, jp in tables.items()}
    return out.json("oracle.json", {**results, "table_shapes": shapes})


def cmd_experiment(cfg, seed, out: Outputs, threads) -> dict[str, Any]:
    spec = ExperimentSpec.from_dict({**cfg, "seed": seed})
    report = run_experiment(spec, threads)
    out.text("replicates.csv", report.replicate_csv(out.header))
    doc = out.json("summary.json", json.loads(report.to_json()))
    return doc


HANDLERS = {
    "realize": cmd_realize,
    "sample": cmd_sample,
    "estimate": cmd_estimate,
    "ee": cmd_ee,
    "oracle": cmd_oracle,
    "experiment": cmd_experiment,
}


# --------------------------------------------------------------------------
# entry point
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="twophase", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="JSON config path or bundled config name")
        p.add_argument("--seed", type=int, help="master seed (unsigned 64-bit)")
        p.add_argument("--out", default=".", help="output directory")
        p.add_argument("--threads", type=int, default=os.cpu_count() or 1, help="worker threads")
        p.add_argument("--verbose", action="store_true")
    return parser


def _error(kind: str, message: str) -> int:
    sys.stdout.write(_dump({"error": kind, "message": message}))
    return 1


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else _error("usage", "invalid command line")
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = load_config(args.config)
        validate_config(cfg, args.command)
        seed = args.seed if args.seed is not None else cfg.get("seed")
        if args.command in STOCHASTIC and seed is None:
            raise UsageError(f"{args.command} needs --seed or a seed in the config")
        if seed is not None:
            Seed(int(seed))
        if args.threads < 1:
            raise UsageError("--threads must be at least 1")
        meta = {"config_hash": config_hash(cfg), "seed": seed}
        out = Outputs(Path(args.out), meta)
        log.info("running %s with seed %s", args.command, seed)
        doc = HANDLERS[args.command](cfg, seed, out, args.threads)
    except jsonschema.ValidationError as exc:
        path = "/".join(str(p) for p in exc.absolute_path)
        return _error("schema", f"{path or '<root>'}: {exc.message}")
    except (UsageError, TwoPhaseError, ValueError, OSError, KeyError) as exc:
        return _error(type(exc).__name__, str(exc))
    sys.stdout.write(_dump({**doc, "outputs": sorted(out.written)}))
    if args.command == "experiment" and not doc.get("passed", True):
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
