"""Command-line surface: train a cut-posterior, draw samples, evaluate
conditional density slices, run the benchmark studies, and compare sample
files.

Configuration comes from a plain-text ``key = value`` file with sections
[experiment], [flow], [train], [mcmc], [paths] (all optional; every field
has a default). Unknown sections or keys are rejected. A single global seed
fans out deterministically to every stochastic component, and each written
artifact carries a manifest sufficient to re-run it.

Exit codes: 0 success, 2 configuration error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import configparser
import os
import sys

import numpy as np

from . import io as cfio
from .baselines import MCMCConfig
from .benchmarks import EXPERIMENT_METHODS, run_benchmark, run_mixture_study
from .engine import (
    TrainConfig,
    conditional_density_grid,
    load_checkpoint,
    sample_cut_posterior,
    save_checkpoint,
    train,
)
from .flows import ConditionalFlow, FlowConfig
from .models import EXPERIMENTS, ExperimentSpec, make_builtin_model, simulate, upstream_samples
from .metrics import clr, wasserstein1_1d, wasserstein2_1d
from .seeding import derive_seed

__all__ = ["main", "RunConfig", "ConfigError"]


class ConfigError(ValueError):
    pass


_SCHEMA = {
    "experiment": {
        "name": str, "seed": int, "n_upstream": int,
        "n1": int, "n2": int, "n": int, "n_causes": int, "n_gold": int,
    },
    "flow": {
        "kind": str, "layers": int, "bins": int, "halfwidth": float,
        "hidden": str, "base": str, "student_df": float, "head": str,
        "umnn_width": int, "quadrature_order": int, "envelope": str,
    },
    "train": {
        "max_iters": int, "patience": int, "lr": float, "n_eta": int,
        "n_z": int, "n_units": int, "smooth_window": int, "grad_clip": float,
    },
    "mcmc": {
        "warmup": int, "kept": int, "thin": int, "init_scale": float,
        "target_accept": float,
    },
    "paths": {"upstream_csv": str, "output_dir": str},
}

_EXPERIMENT_PARAM_KEYS = ("n1", "n2", "n", "n_causes", "n_gold")


class RunConfig:
    """Validated merge of the config file sections with their defaults."""

    def __init__(self, sections, source_text=""):
        self.source_text = source_text
        unknown_sections = set(sections) - set(_SCHEMA)
        if unknown_sections:
            raise ConfigError(f"unknown config section(s): {sorted(unknown_sections)}")
        parsed = {}
        for section, schema in _SCHEMA.items():
            raw = sections.get(section, {})
            unknown = set(raw) - set(schema)
            if unknown:
                raise ConfigError(
                    f"[{section}]: unknown key(s) {sorted(unknown)}")
            out = {}
            for key, value in raw.items():
                try:
                    out[key] = _convert(schema[key], value)
                except ValueError as exc:
                    raise ConfigError(f"[{section}] {key}: {exc}") from None
            parsed[section] = out
        self.sections = parsed

        exp = parsed["experiment"]
        self.experiment = exp.get("name")
        if self.experiment is not None and self.experiment not in EXPERIMENTS:
            raise ConfigError(f"[experiment] name: unknown experiment {self.experiment!r}")
        self.seed = exp.get("seed", 0)
        self.n_upstream = exp.get("n_upstream", 500)
        self.experiment_params = {k: exp[k] for k in _EXPERIMENT_PARAM_KEYS if k in exp}
        self.upstream_csv = parsed["paths"].get("upstream_csv")
        self.output_dir = parsed["paths"].get("output_dir", "out")
        if self.upstream_csv is not None and not os.path.exists(self.upstream_csv):
            raise ConfigError(f"[paths] upstream_csv: no such file {self.upstream_csv!r}")

    @classmethod
    def from_file(cls, path):
        if not os.path.exists(path):
            raise ConfigError(f"config file not found: {path}")
        parser = configparser.ConfigParser()
        with open(path) as fh:
            text = fh.read()
        try:
            parser.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from None
        sections = {name: dict(parser[name]) for name in parser.sections()}
        return cls(sections, source_text=text)

    def flow_config(self, eta_dim, theta_dim, support="unconstrained"):
        raw = dict(self.sections["flow"])
        if "hidden" in raw:
            raw["hidden"] = tuple(int(v) for v in raw["hidden"].split(","))
        if "envelope" in raw:
            parts = [float(v) for v in raw["envelope"].split(",")]
            if len(parts) != 3:
                raise ConfigError("[flow] envelope: need three comma-separated values")
            raw["envelope"] = tuple(parts)
        head = raw.pop("head", "stick-breaking" if support == "simplex" else "identity")
        dim = theta_dim - 1 if head == "stick-breaking" else theta_dim
        try:
            return FlowConfig(eta_dim=eta_dim, dim=dim, head=head, **raw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"[flow]: {exc}") from None

    def train_config(self):
        try:
            config = TrainConfig(seed=derive_seed(self.seed, "train"),
                                 **self.sections["train"])
            config.validate()
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"[train]: {exc}") from None
        return config

    def mcmc_config(self):
        try:
            config = MCMCConfig(seed=derive_seed(self.seed, "mcmc"),
                                **self.sections["mcmc"])
            config.validate()
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"[mcmc]: {exc}") from None
        return config


def _convert(kind, value):
    if kind is bool:
        return value.lower() in ("1", "true", "yes", "on")
    return kind(value)


# ---------------------------------------------------------------------------
# subcommands


def _resolve_inputs(config):
    if config.experiment is None:
        raise ConfigError("[experiment] name is required for this command")
    spec = ExperimentSpec(config.experiment, seed=derive_seed(config.seed, "data"),
                          params=config.experiment_params)
    dataset = simulate(spec)
    model = make_builtin_model(config.experiment, dataset)
    if config.upstream_csv:
        upstream = cfio.load_upstream_csv(config.upstream_csv)
    else:
        upstream = upstream_samples(config.experiment, dataset, config.n_upstream,
                                    seed=derive_seed(config.seed, "upstream"))
    return dataset, model, upstream


def cmd_train(args):
    config = RunConfig.from_file(args.config)
    if args.output_dir:
        config.output_dir = args.output_dir
    dataset, model, upstream = _resolve_inputs(config)
    flow = ConditionalFlow(
        config.flow_config(upstream.dim, model.theta_dim, model.support),
        seed=derive_seed(config.seed, "flow-init"))
    result = train(flow, model, upstream, config.train_config())

    out = config.output_dir
    os.makedirs(out, exist_ok=True)
    ckpt_path = os.path.join(out, "flow.ckpt")
    digest = save_checkpoint(ckpt_path, flow)
    trace_lines = ["step,elbo"] + [f"{i},{v!r}" for i, v in enumerate(result.trace)]
    cfio.atomic_write(os.path.join(out, "loss_trace.csv"),
                      "\n".join(trace_lines) + "\n")
    draws = sample_cut_posterior(flow, upstream, derive_seed(config.seed, "cut-draws"),
                                 provenance={"checkpoint": digest})
    cfio.write_samples_csv(os.path.join(out, "cut_samples.csv"), draws)
    cfio.write_manifest(os.path.join(out, "manifest.json"),
                        seed=config.seed, config_text=config.source_text,
                        extra={"command": "train", "experiment": config.experiment,
                               "checkpoint_sha256": digest,
                               "stop_reason": result.stop_reason,
                               "steps": len(result.trace) - 1})
    print(f"trained: {result.stop_reason} after {len(result.trace) - 1} steps; "
          f"artifacts in {out}")
    return 0


def cmd_sample(args):
    flow = load_checkpoint(args.checkpoint)
    upstream = cfio.load_upstream_csv(args.upstream)
    draws = sample_cut_posterior(flow, upstream, args.seed)
    cfio.write_samples_csv(args.output, draws)
    cfio.write_manifest(args.output + ".manifest.json", seed=args.seed,
                        extra={"command": "sample", "checkpoint": args.checkpoint})
    print(f"wrote {draws.n} paired draws to {args.output}")
    return 0


def cmd_density(args):
    flow = load_checkpoint(args.checkpoint)
    eta0 = np.array([float(v) for v in args.eta0.split(",")])
    lo, hi, count = args.grid.split(":")
    grid = np.linspace(float(lo), float(hi), int(count))
    dens = conditional_density_grid(flow, eta0, grid)
    lines = ["theta,density"] + [f"{g!r},{d!r}" for g, d in zip(grid, dens)]
    cfio.atomic_write(args.output, "\n".join(lines) + "\n")
    cfio.write_manifest(args.output + ".manifest.json", seed=0,
                        extra={"command": "density", "checkpoint": args.checkpoint,
                               "eta0": eta0.tolist()})
    print(f"wrote {len(grid)} density values to {args.output}")
    return 0


def cmd_benchmark(args):
    out = args.output_dir
    os.makedirs(out, exist_ok=True)
    if args.experiment == "mixture":
        report = {"experiment": "mixture", "kinds": {}}
        for kind in ("rqnsf-ar", "umnn"):
            study = run_mixture_study(kind, seed=args.seed)
            report["kinds"][kind] = {
                "conditional_kl": {str(k): v for k, v in study["conditional_kl"].items()},
                "marginal_kl": study["marginal_kl"],
            }
        cfio.write_json(os.path.join(out, "report.json"), report)
    else:
        if args.experiment not in EXPERIMENT_METHODS:
            raise ConfigError(f"no benchmark defined for {args.experiment!r}")
        report = run_benchmark(args.experiment, args.replicates, args.seed)
        cfio.atomic_write(os.path.join(out, "report.json"), report.to_json() + "\n")
        cfio.atomic_write(os.path.join(out, "timings.json"),
                          report.timing_json() + "\n")
    cfio.write_manifest(os.path.join(out, "manifest.json"), seed=args.seed,
                        extra={"command": "benchmark", "experiment": args.experiment,
                               "replicates": args.replicates})
    print(f"benchmark report written to {os.path.join(out, 'report.json')}")
    return 0


def cmd_compare(args):
    a = cfio.read_samples_csv(args.file_a)
    b = cfio.read_samples_csv(args.file_b)
    if a.theta.shape[1] != b.theta.shape[1]:
        raise ConfigError("sample files have different theta dimensions")
    theta_a, theta_b = a.theta, b.theta
    mode = "raw"
    if args.clr:
        theta_a = clr(np.clip(theta_a, 1e-12, None))
        theta_b = clr(np.clip(theta_b, 1e-12, None))
        mode = "clr"
    dims = {}
    for j in range(theta_a.shape[1]):
        dims[f"theta_{j + 1}"] = {
            "w1": wasserstein1_1d(theta_a[:, j], theta_b[:, j]),
            "w2": wasserstein2_1d(theta_a[:, j], theta_b[:, j]),
        }
    report = {"file_a": args.file_a, "file_b": args.file_b, "space": mode,
              "per_dimension": dims}
    if args.output:
        cfio.write_json(args.output, report)
    else:
        import json
        print(json.dumps(report, indent=2, sort_keys=True))
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="cutflow",
        description="Estimate cut-posteriors with conditional normalizing "
                    "flows and benchmark them against MCMC and parametric "
                    "baselines.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a flow on an experiment")
    p.add_argument("--config", required=True, help="key = value config file")
    p.add_argument("--output-dir", help="override [paths] output_dir")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("sample", help="draw paired cut-posterior samples")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--upstream", required=True, help="upstream sample CSV")
    p.add_argument("--output", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_sample)

    p = sub.add_parser("density", help="conditional density slice on a grid")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--eta0", required=True, help="comma-separated conditioning value")
    p.add_argument("--grid", required=True, help="lo:hi:count")
    p.add_argument("--output", required=True)
    p.set_defaults(fn=cmd_density)

    p = sub.add_parser("benchmark", help="replicate study across methods")
    p.add_argument("experiment", choices=sorted(EXPERIMENTS))
    p.add_argument("--replicates", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--output-dir", default="benchmark_out")
    p.set_defaults(fn=cmd_benchmark)

    p = sub.add_parser("compare", help="distance report between two sample CSVs")
    p.add_argument("file_a")
    p.add_argument("file_b")
    p.add_argument("--clr", action="store_true",
                   help="compare in centered-log-ratio space (simplex columns)")
    p.add_argument("--output", help="write JSON report here instead of stdout")
    p.set_defaults(fn=cmd_compare)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, cfio.CsvFormatError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - top-level CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
