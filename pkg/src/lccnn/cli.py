"""Batch front door: synth / sample / verify / bounds / regret subcommands.

Configs are JSON files; command-line flags override file fields (flag wins,
file second, built-in default last).  Unknown keys anywhere in a config are
rejected.  Every command is reproducible from (config, seed) alone and all
outputs embed the config hash.  Exit codes: 2 config error, 3 sampler
failure, 4 oracle / verification failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import os
import sys
from dataclasses import dataclass, field

import numpy as np

from .nnmodel import Activation, Dataset, NetworkConfig, eval_network_many, squared_relu, tanh_scaled
from .priors import DiscreteGridPrior, enumerate_grid
from .coupling import CouplingParams, check_logconcavity_conditions
from .samplers import ChainConfig, SamplerError, TwoStageBudgets, two_stage_sample
from .estimators import sequential_discrete_posteriors
from .risk import BoundInputs, RegretLedger, bound_calculator, optimal_hyperparams, regret_ledger
from .verify import SUITES, run_suites

ENV_OUT_DIR = "LCCNN_OUT_DIR"


class ConfigError(ValueError):
    """Invalid configuration; exits with code 2."""


class OracleError(RuntimeError):
    """Oracle or verification failure; exits with code 4."""


# ----------------------------------------------------------------------
# config parsing
# ----------------------------------------------------------------------

def _take(d: dict, allowed: dict, where: str) -> dict:
    """Validate keys of d against allowed {key: required} and return a copy."""
    unknown = set(d) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown keys {sorted(unknown)} in {where}")
    missing = [k for k, req in allowed.items() if req and k not in d]
    if missing:
        raise ConfigError(f"missing keys {missing} in {where}")
    return dict(d)


def activation_from_dict(d: dict) -> Activation:
    d = _take(d, {"kind": True, "a": False, "c": False}, "activation")
    kind = d["kind"]
    if kind == "tanh":
        return tanh_scaled(a=float(d.get("a", 1.0)), c=float(d.get("c", 1.0)))
    if kind == "squared_relu":
        if "c" in d:
            raise ConfigError("squared_relu takes no 'c' parameter")
        return squared_relu(a=float(d.get("a", 1.0)))
    raise ConfigError(f"unknown activation kind {kind!r}")


def activation_to_dict(act: Activation) -> dict:
    if act.kind == "tanh":
        return {"kind": "tanh", "a": act.a, "c": act.c}
    return {"kind": "squared_relu", "a": act.a}


def network_from_dict(d: dict) -> NetworkConfig:
    d = _take(d, {"K": True, "d": True, "V": True, "activation": True, "signs": False},
              "network")
    signs = np.asarray(d["signs"], dtype=float) if "signs" in d else None
    try:
        return NetworkConfig(K=int(d["K"]), d=int(d["d"]), V=float(d["V"]),
                             activation=activation_from_dict(d["activation"]),
                             signs=signs)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def chain_from_dict(d: dict, where: str) -> dict:
    return _take(d, {"step_size": True, "iterations": True, "burn_in": False,
                     "thinning": False, "adapt_step": False}, where)


def _chain_cfg(d: dict, seed: int) -> ChainConfig:
    return ChainConfig(step_size=float(d["step_size"]), iterations=int(d["iterations"]),
                       burn_in=int(d.get("burn_in", 0)), thinning=int(d.get("thinning", 1)),
                       seed=seed, adapt_step=bool(d.get("adapt_step", True)))


@dataclass
class ExperimentConfig:
    """Parsed experiment file; as_dict round-trips losslessly."""

    network: dict
    prior: dict
    data: dict
    beta: dict
    sampler: dict
    seed: int = 0
    output_dir: str = None
    raw: dict = field(default_factory=dict, repr=False)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        top = _take(d, {"network": True, "prior": True, "data": True, "beta": True,
                        "sampler": False, "seed": False, "output_dir": False},
                    "experiment config")
        network_from_dict(top["network"])  # validate now, reparse on use
        prior = _take(top["prior"], {"kind": True, "M": False}, "prior")
        if prior["kind"] not in ("continuous", "discrete"):
            raise ConfigError("prior.kind must be 'continuous' or 'discrete'")
        if prior["kind"] == "discrete" and "M" not in prior:
            raise ConfigError("discrete prior requires M")
        data = _take(top["data"], {"path": False, "synthetic": False}, "data")
        if ("path" in data) == ("synthetic" in data):
            raise ConfigError("data needs exactly one of 'path' or 'synthetic'")
        beta = _take(top["beta"], {"mode": True, "value": False, "b": False}, "beta")
        if beta["mode"] not in ("fixed", "fourth-root"):
            raise ConfigError("beta.mode must be 'fixed' or 'fourth-root'")
        if beta["mode"] == "fixed" and "value" not in beta:
            raise ConfigError("fixed beta requires a value")
        sampler = top.get("sampler", {})
        sampler = _take(sampler, {"outer": False, "inner": False, "conditional": False,
                                  "n": False, "n_xi": False}, "sampler")
        for key in ("outer", "inner", "conditional"):
            if key in sampler:
                chain_from_dict(sampler[key], f"sampler.{key}")
        return cls(network=top["network"], prior=prior, data=data, beta=beta,
                   sampler=sampler, seed=int(top.get("seed", 0)),
                   output_dir=top.get("output_dir"), raw=d)

    def as_dict(self) -> dict:
        out = {"network": self.network, "prior": self.prior, "data": self.data,
               "beta": self.beta}
        if self.sampler:
            out["sampler"] = self.sampler
        if "seed" in self.raw or self.seed != 0:
            out["seed"] = self.seed
        if self.output_dir is not None:
            out["output_dir"] = self.output_dir
        return out


def config_hash(d: dict) -> str:
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def experiment_hash(ec: "ExperimentConfig") -> str:
    """Config hash over everything that determines the outputs (not where
    they are written)."""
    d = {k: v for k, v in ec.as_dict().items() if k != "output_dir"}
    return config_hash(d)


def resolve_beta(beta_cfg: dict, cfg: NetworkConfig, data: Dataset, N: int,
                 b: float = None) -> float:
    if beta_cfg["mode"] == "fixed":
        return float(beta_cfg["value"])
    act = cfg.activation
    b_val = float(beta_cfg.get("b", b if b is not None else act.a0 * cfg.V))
    C_N = float(np.max(np.abs(data.y[:N]))) + act.a0 * cfg.V if N else act.a0 * cfg.V
    inputs = BoundInputs(a0=act.a0, a1=act.a1, a2=act.a2, V=cfg.V, b=b_val,
                         sigma=1.0, C_N=C_N, d=max(cfg.d, 2), N=max(N, 1),
                         M=1.0, K=1.0, beta=1.0)
    return optimal_hyperparams("square_regret", inputs).beta_star


# ----------------------------------------------------------------------
# dataset io
# ----------------------------------------------------------------------

def load_dataset_csv(path) -> Dataset:
    with open(path) as fh:
        header = fh.readline().strip().split(",")
    if header[-1] != "y":
        raise ConfigError("dataset CSV must end with a 'y' column")
    arr = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    try:
        return Dataset(X=arr[:, :-1], y=arr[:, -1])
    except ValueError as exc:
        raise ConfigError(f"invalid dataset: {exc}") from exc


def save_dataset_csv(path, data: Dataset) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"x{j + 1}" for j in range(data.d)] + ["y"])
        for i in range(data.N):
            writer.writerow([repr(float(v)) for v in data.X[i]] + [repr(float(data.y[i]))])


# ----------------------------------------------------------------------
# synth
# ----------------------------------------------------------------------

def synthesize(spec: dict, seed_override: int = None) -> tuple:
    spec = _take(spec, {"N": True, "d": True, "seed": False, "g": True, "noise": True},
                 "synthetic spec")
    N, d = int(spec["N"]), int(spec["d"])
    seed = int(spec.get("seed", 0)) if seed_override is None else seed_override
    rng = np.random.default_rng(seed)
    X = rng.uniform(-1.0, 1.0, size=(N, d))
    X[:, 0] = 1.0

    g_spec = dict(spec["g"])
    kind = g_spec.pop("kind", None)
    teacher_meta = {"kind": kind}
    if kind == "teacher":
        g_spec = _take(g_spec, {"K": True, "V": True, "activation": True,
                                "weights": False, "signs": False}, "g (teacher)")
        weights = g_spec.pop("weights", None)
        tcfg = network_from_dict(g_spec | {"d": d})
        if weights is not None:
            w = np.asarray(weights, dtype=float)
        else:
            raw = rng.uniform(-1.0, 1.0, size=(tcfg.K, d))
            w = raw / np.maximum(np.abs(raw).sum(axis=1, keepdims=True), 1.0)
        g_vals = eval_network_many(tcfg, w, X)
        teacher_meta.update({"K": tcfg.K, "V": tcfg.V,
                             "activation": activation_to_dict(tcfg.activation),
                             "signs": tcfg.signs.tolist(), "weights": w.tolist()})
    elif kind == "cosine":
        g_spec = _take(g_spec, {"amplitude": False, "frequency": False}, "g (cosine)")
        amp = float(g_spec.get("amplitude", 1.0))
        freq = float(g_spec.get("frequency", 1.0))
        g_vals = amp * np.cos(math.pi * freq * X.mean(axis=1))
        teacher_meta.update({"amplitude": amp, "frequency": freq})
    else:
        raise ConfigError("g.kind must be 'teacher' or 'cosine'")

    noise = _take(spec["noise"], {"kind": True, "sigma": False, "range": False}, "noise")
    nkind = noise["kind"]
    if nkind == "none":
        y = g_vals.copy()
    elif nkind == "gaussian":
        sigma = float(noise.get("sigma", 1.0))
        y = g_vals + sigma * rng.standard_normal(N)
        teacher_meta["sigma"] = sigma
    elif nkind == "bounded":
        r = float(noise.get("range", 1.0))
        y = g_vals + rng.uniform(-r, r, size=N)
        teacher_meta["range"] = r
    else:
        raise ConfigError("noise.kind must be 'none', 'gaussian' or 'bounded'")
    teacher_meta["g_values_head"] = [float(v) for v in g_vals[:5]]
    return Dataset(X=X, y=y), teacher_meta, g_vals


def cmd_synth(args) -> int:
    spec = _load_json(args.spec)
    data, meta, _ = synthesize(spec, seed_override=args.seed)
    out = _out_path(args, args.out)
    save_dataset_csv(out, data)
    meta["config_hash"] = config_hash(spec)
    with open(str(out) + ".teacher.json", "w") as fh:
        json.dump(meta, fh, sort_keys=True, indent=1)
    print(f"wrote {data.N} rows to {out}")
    return 0


# ----------------------------------------------------------------------
# sample
# ----------------------------------------------------------------------

def _load_json(path) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc


def _get_data(ec: ExperimentConfig) -> Dataset:
    if "path" in ec.data:
        return load_dataset_csv(ec.data["path"])
    data, _, _ = synthesize(ec.data["synthetic"])
    return data


def _out_path(args, name):
    base = args.output_dir or os.environ.get(ENV_OUT_DIR, ".")
    os.makedirs(base, exist_ok=True)
    return os.path.join(base, name)


_DEFAULT_CHAINS = {
    "outer": {"step_size": 0.2, "iterations": 1200, "burn_in": 400, "thinning": 2},
    "inner": {"step_size": 0.1, "iterations": 220, "burn_in": 60, "thinning": 1},
    "conditional": {"step_size": 0.1, "iterations": 300, "burn_in": 100, "thinning": 20},
}


def cmd_sample(args) -> int:
    ec = ExperimentConfig.from_dict(_load_json(args.config))
    if args.seed is not None:
        ec.seed = args.seed
    if args.output_dir:
        ec.output_dir = args.output_dir
    if ec.prior["kind"] != "continuous":
        raise ConfigError("the two-stage sampler uses the continuous prior")
    cfg = network_from_dict(ec.network)
    data = _get_data(ec)
    n = int(ec.sampler.get("n", data.N))
    beta = resolve_beta(ec.beta, cfg, data, n)
    params = CouplingParams.from_config(cfg, data, n=n, beta=beta)
    report = check_logconcavity_conditions(cfg, data, beta, N=n)

    chains = {}
    for key in ("outer", "inner", "conditional"):
        chains[key] = _chain_cfg(ec.sampler.get(key, _DEFAULT_CHAINS[key]), ec.seed)
    budgets = TwoStageBudgets(outer=chains["outer"], inner=chains["inner"],
                              conditional=chains["conditional"],
                              n_xi=ec.sampler.get("n_xi"))
    draws, tags, diag = two_stage_sample(cfg, data, params, budgets)

    hash_ = experiment_hash(ec)
    chain_path = _out_path(args, f"chains_{hash_}.jsonl")
    with open(chain_path, "w") as fh:
        fh.write(json.dumps({"meta": {"config_hash": hash_, "beta": beta, "n": n,
                                      "seed": ec.seed}}, sort_keys=True) + "\n")
        for i, (w, tag) in enumerate(zip(draws, tags)):
            rec = {"step": i, "xi_index": int(tag),
                   "sample": [float(v) for v in w.reshape(-1)],
                   "diagnostics": {"outer_acceptance": diag["outer"].acceptance_rate,
                                   "outer_step_size": diag["outer"].final_step_size}}
            fh.write(json.dumps(rec, sort_keys=True) + "\n")

    cert_path = _out_path(args, f"certificate_{hash_}.json")
    with open(cert_path, "w") as fh:
        json.dump({"config_hash": hash_, "condition_report": report.as_dict(),
                   "params": {"n": params.n, "beta": params.beta, "C_n": params.C_n,
                              "rho": params.rho, "delta": params.delta,
                              "b_threshold": params.b_threshold}},
                  fh, sort_keys=True, indent=1)
    diag_path = _out_path(args, f"diagnostics_{hash_}.json")
    with open(diag_path, "w") as fh:
        json.dump({"config_hash": hash_,
                   "outer_acceptance": diag["outer"].acceptance_rate,
                   "outer_ess": diag["outer"].ess_estimate,
                   "outer_support_rejections": diag["outer"].support_rejections,
                   "n_xi": diag["n_xi"],
                   "conditional_acceptance_mean": diag["conditional_acceptance_mean"],
                   "n_draws": int(len(draws))}, fh, sort_keys=True, indent=1)
    print(f"wrote {len(draws)} draws to {chain_path}")
    return 0


# ----------------------------------------------------------------------
# verify
# ----------------------------------------------------------------------

def cmd_verify(args) -> int:
    names = args.suites or list(SUITES)
    bad = [n for n in names if n not in SUITES]
    if bad:
        raise ConfigError(f"unknown suites {bad}; available: {sorted(SUITES)}")
    results = run_suites(names)
    failures = 0
    for r in results:
        status = "PASS" if r["passed"] else "FAIL"
        print(f"{status} {r['suite']:<14} margin={r['margin']:+.3e}  {r['detail']}")
        failures += 0 if r["passed"] else 1
    if failures:
        raise OracleError(f"{failures} verification suite(s) failed")
    return 0


# ----------------------------------------------------------------------
# bounds
# ----------------------------------------------------------------------

def cmd_bounds(args) -> int:
    raw = _load_json(args.inputs)
    spec = _take(raw, {k: True for k in ("a0", "a1", "a2", "V", "b", "sigma",
                                         "C_N", "d", "N", "M", "K", "beta")}
                 | {"non_odd": False}, "bound inputs")
    non_odd = bool(spec.pop("non_odd", False))
    try:
        inputs = BoundInputs(a0=spec["a0"], a1=spec["a1"], a2=spec["a2"], V=spec["V"],
                             b=spec["b"], sigma=spec["sigma"], C_N=spec["C_N"],
                             d=int(spec["d"]), N=int(spec["N"]), M=spec["M"],
                             K=spec["K"], beta=spec["beta"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    hash_ = config_hash(raw)
    rows = []
    lines = [f"bound report (config hash {hash_})"]
    for kind in ("log_regret", "square_regret", "msr", "kl", "m2_msr"):
        br = bound_calculator(kind, inputs, non_odd=non_odd)
        row = {"kind": kind, **{k: v for k, v in br.as_dict().items() if k != "kind"}}
        if kind != "log_regret":
            opt = optimal_hyperparams(kind, inputs)
            row.update({"beta_star": opt.beta_star, "K_star": opt.K_star,
                        "M_star": opt.M_star, "bound_at_opt": opt.bound_continuous,
                        "closed_form": opt.closed_form})
        rows.append(row)
        lines.append(f"  {kind}: total={br.total!r}")
        for term in ("prior_mass", "width", "grid", "beta_quad", "residual"):
            lines.append(f"    {term:<11} {getattr(br, term)!r}")
        for w in br.warnings:
            lines.append(f"    warning: {w}")
    # monotonicity spot rows: each control knob doubled moves its term down
    for label, kwargs in (("N_doubled", {"N": inputs.N * 2}),
                          ("K_doubled", {"K": inputs.K * 2}),
                          ("M_doubled", {"M": inputs.M * 2})):
        alt = BoundInputs(**{**inputs.__dict__, **kwargs})
        br = bound_calculator("square_regret", alt, non_odd=non_odd)
        rows.append({"kind": f"square_regret[{label}]",
                     **{k: v for k, v in br.as_dict().items() if k != "kind"}})
        lines.append(f"  square_regret[{label}]: total={br.total!r}")

    out_csv = _out_path(args, f"bounds_{hash_}.csv")
    cols = sorted({k for row in rows for k in row if k != "warnings"})
    with open(out_csv, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=cols, extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (repr(float(v)) if isinstance(v, (float, np.floating)) else v)
                             for k, v in row.items() if k != "warnings"})
    out_txt = _out_path(args, f"bounds_{hash_}.txt")
    with open(out_txt, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    print("\n".join(lines))
    print(f"wrote {out_csv}")
    return 0


# ----------------------------------------------------------------------
# regret
# ----------------------------------------------------------------------

def _ledger_csv(path, ledger: RegretLedger, hash_: str) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# config_hash={hash_}\n")
        cols = ["n", "r_square", "r_rand", "r_log", "lambda",
                "avg_square", "avg_rand", "avg_log", "avg_lambda_sq"]
        writer = csv.DictWriter(fh, fieldnames=cols)
        writer.writeheader()
        for row in ledger.as_rows():
            writer.writerow({k: (repr(float(v)) if isinstance(v, (float, np.floating)) else v)
                             for k, v in row.items()})


def cmd_regret(args) -> int:
    ec = ExperimentConfig.from_dict(_load_json(args.config))
    if args.seed is not None:
        ec.seed = args.seed
    if args.output_dir:
        ec.output_dir = args.output_dir
    if ec.prior["kind"] != "discrete":
        raise ConfigError("exact regret ledgers require the discrete prior")
    cfg = network_from_dict(ec.network)
    data = _get_data(ec)
    hash_ = experiment_hash(ec)
    if data.N == 0:
        path = _out_path(args, f"ledger_{hash_}.csv")
        _ledger_csv(path, RegretLedger(records=(), R_square=0.0, R_rand=0.0,
                                       R_log=0.0, Lambda_sq=0.0), hash_)
        print(f"empty ledger written to {path}")
        return 0

    prior = DiscreteGridPrior(d=cfg.d, M=int(ec.prior["M"]), K=cfg.K)
    try:
        grid = enumerate_grid(prior)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc

    # competitor g: the teacher when synthetic and noiseless info is present,
    # otherwise the observed responses themselves
    if "synthetic" in ec.data:
        _, _, g_vals = synthesize(ec.data["synthetic"])
    else:
        g_vals = data.y.copy()

    beta_full = resolve_beta(ec.beta, cfg, data, data.N)
    snapshots, _ = sequential_discrete_posteriors(cfg, grid, data, data.N, beta_full)
    ledger = regret_ledger(snapshots[:-1], cfg, data, g_vals, beta_full)
    ledger_path = _out_path(args, f"ledger_{hash_}.csv")
    _ledger_csv(ledger_path, ledger, hash_)

    act = cfg.activation
    rows = []
    N_dyadic = 1
    while N_dyadic <= data.N:
        if N_dyadic >= 2 or data.N == 1:
            Nn = N_dyadic
            beta_n = resolve_beta(ec.beta, cfg, data, Nn)
            snaps_n, _ = sequential_discrete_posteriors(cfg, grid, data, Nn, beta_n)
            led_n = regret_ledger(snaps_n[:-1], cfg, data, g_vals[:Nn], beta_n)
            C_N = float(np.max(np.abs(data.y[:Nn]))) + act.a0 * cfg.V
            b_g = float(np.max(np.abs(g_vals[:Nn])))
            inp = BoundInputs(a0=act.a0, a1=act.a1, a2=act.a2, V=cfg.V, b=b_g,
                              sigma=0.0, C_N=C_N, d=max(cfg.d, 2), N=Nn,
                              M=prior.M, K=cfg.K, beta=beta_n)
            br = bound_calculator("square_regret", inp)
            rows.append({"N": Nn, "beta": beta_n, "R_square": led_n.R_square,
                         "bound": br.total})
        N_dyadic *= 2
    comp_path = _out_path(args, f"regret_vs_bound_{hash_}.csv")
    with open(comp_path, "w", newline="") as fh:
        fh.write(f"# config_hash={hash_}\n")
        writer = csv.DictWriter(fh, fieldnames=["N", "beta", "R_square", "bound"])
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (repr(float(v)) if isinstance(v, (float, np.floating)) else v)
                             for k, v in row.items()})
    print(f"wrote {ledger_path} and {comp_path}")
    return 0


# ----------------------------------------------------------------------
# entry point
# ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lccnn",
                                description="Log-concave-coupling sampler and "
                                            "risk-bound tooling for Bayesian "
                                            "single-hidden-layer networks")
    p.add_argument("--output-dir", default=None,
                   help=f"output directory (default: ${ENV_OUT_DIR} or '.')")
    sub = p.add_subparsers(dest="command", required=True)

    ps = sub.add_parser("synth", help="generate a synthetic dataset CSV")
    ps.add_argument("--spec", required=True, help="JSON synthesis spec")
    ps.add_argument("--out", default="data.csv")
    ps.add_argument("--seed", type=int, default=None, help="override spec seed")
    ps.set_defaults(func=cmd_synth)

    pm = sub.add_parser("sample", help="run the two-stage posterior sampler")
    pm.add_argument("--config", required=True, help="experiment config JSON")
    pm.add_argument("--seed", type=int, default=None, help="override config seed")
    pm.set_defaults(func=cmd_sample)

    pv = sub.add_parser("verify", help="run verification suites")
    pv.add_argument("suites", nargs="*", help=f"subset of {sorted(SUITES)}; empty = all")
    pv.set_defaults(func=cmd_verify)

    pb = sub.add_parser("bounds", help="tabulate every closed-form bound")
    pb.add_argument("--inputs", required=True, help="JSON file of bound inputs")
    pb.set_defaults(func=cmd_bounds)

    pr = sub.add_parser("regret", help="exact sequential regret ledger vs bound")
    pr.add_argument("--config", required=True)
    pr.add_argument("--seed", type=int, default=None)
    pr.set_defaults(func=cmd_regret)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except SamplerError as exc:
        print(f"sampler error: {exc}", file=sys.stderr)
        return 3
    except OracleError as exc:
        print(f"verification failure: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
