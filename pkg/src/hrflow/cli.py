"""``hrflow`` command line: gen-data, train, sample, eval, probe-velocity, sweep-nfe.

Each verb except ``eval`` takes one JSON run config. Every CSV it writes starts
with a ``# config_sha256=...`` comment line followed by a header row.

Exit codes: 0 ok, 1 config error, 2 numeric divergence, 3 undefined velocity
law at the probe anchor, 4 I/O or malformed input.
"""
from __future__ import annotations

import argparse
import copy
import csv
import json
import sys
from pathlib import Path

import jsonschema
import numpy as np
from threadpoolctl import threadpool_limits

from . import svg
from .dists import PRESETS, GaussianMixture, StandardGaussian, make_rng, preset, spec_from_dict
from .interp import SpaceTimePoint
from .metrics import MetricReport, dip_bimodality, sliced_w2, w1_1d
from .model import NonFiniteError, load_checkpoint
from .oracle import (UndefinedVelocityLaw, empirical_velocity_law, independent_sampler,
                     ot_coupled_sampler, rho_t, velocity_law, UNDERFLOW)
from .sampling import NfeBudget, integrate_velocity, sample_hrf2, sample_rf
from .training import METHODS, TrainConfig, config_digest, train, validate

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_UNDEFINED, EXIT_IO = 0, 1, 2, 3, 4
PROBE_MODES = ("analytic", "empirical-independent", "empirical-coupled", "model")

_DIST = {
    "oneOf": [
        {"type": "object", "additionalProperties": False, "required": ["type"],
         "properties": {"type": {"const": "standard_gaussian"}, "dim": {"type": "integer", "minimum": 1}}},
        {"type": "object", "additionalProperties": False, "required": ["type", "weights", "means", "stdevs"],
         "properties": {"type": {"const": "gaussian_mixture"},
                        "weights": {"type": "array", "items": {"type": "number", "minimum": 0}, "minItems": 1},
                        "means": {"type": "array", "items": {"type": "array", "items": {"type": "number"}}},
                        "stdevs": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0}}}},
        {"type": "object", "additionalProperties": False, "required": ["type"],
         "properties": {"type": {"const": "moons"},
                        "noise_stdev": {"type": "number", "minimum": 0},
                        "radius": {"type": "number", "exclusiveMinimum": 0},
                        "offset": {"type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 2}}},
    ]
}
_COUNT = {"type": "integer", "minimum": 1}
_BUDGET = {"type": "array", "items": _COUNT, "minItems": 2, "maxItems": 2}

SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "additionalProperties": False,
    "required": ["seed", "output_dir", "data"],
    "properties": {
        "name": {"type": "string"},
        "seed": {"type": "integer", "minimum": 0},
        "output_dir": {"type": "string", "minLength": 1},
        "data": {
            "oneOf": [
                {"type": "object", "additionalProperties": False, "required": ["preset"],
                 "properties": {"preset": {"enum": list(PRESETS)}}},
                {"type": "object", "additionalProperties": False, "required": ["source", "target"],
                 "properties": {"source": _DIST, "target": _DIST}},
            ]
        },
        "train": {
            "type": "object",
            "additionalProperties": False,
            "required": ["method"],
            "properties": {
                "method": {"enum": list(METHODS)},
                "ot_batch": {"type": ["integer", "null"], "minimum": 1},
                "grad_batch": _COUNT,
                "iters": _COUNT,
                "checkpoint_every": _COUNT,
                "validation_size": _COUNT,
                "validation_budget": _BUDGET,
                "pretrained_path": {"type": "string", "minLength": 1},
                "learning_rate": {"type": "number", "exclusiveMinimum": 0},
                "lr_schedule": {"enum": ["constant", "cosine"]},
                "lr_final_fraction": {"type": "number", "minimum": 0, "maximum": 1},
                "velocity_batch": _COUNT,
                "velocity_n_tau": _COUNT,
                "velocity_pool": {"type": ["integer", "null"], "minimum": 1},
                "init_from_pretrained": {"type": "boolean"},
                "log_every": _COUNT,
                "resume_from": {"type": "string", "minLength": 1},
            },
            "if": {"properties": {"method": {"enum": ["hrf2-v", "hrf2-dv"]}}},
            "then": {"required": ["pretrained_path"]},
        },
        "checkpoint": {"type": "string", "minLength": 1},
        "checkpoints": {"type": "object", "minProperties": 1,
                        "propertyNames": {"enum": list(METHODS)},
                        "additionalProperties": {"type": "string", "minLength": 1}},
        "budget": _BUDGET,
        "budgets": {"type": "array", "items": _BUDGET, "minItems": 1},
        "n_samples": _COUNT,
        "gen": {"type": "object", "additionalProperties": False,
                "properties": {"n": _COUNT, "which": {"enum": ["source", "target"]}}},
        "sample": {"type": "object", "additionalProperties": False,
                   "properties": {"record_trajectories": {"type": "boolean"}, "n_trajectories": _COUNT}},
        "probe": {"type": "object", "additionalProperties": False,
                  "properties": {"x_t": {"type": "array", "items": {"type": "number"}, "minItems": 1},
                                 "t": {"type": "number", "minimum": 0, "maximum": 1},
                                 "modes": {"type": "array", "items": {"enum": list(PROBE_MODES)}, "minItems": 1},
                                 "n": {"type": "integer", "minimum": 100},
                                 "n_tau": _COUNT,
                                 "window": {"type": "number", "exclusiveMinimum": 0},
                                 "ot_batch": _COUNT,
                                 "bins": _COUNT}},
    },
}


class ConfigError(ValueError):
    pass


class InputError(OSError):
    pass


# -- config -----------------------------------------------------------------

def load_config(path, overrides: dict | None = None) -> dict:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: not valid JSON ({e})") from e
    for key, val in (overrides or {}).items():
        node = doc
        *parents, leaf = key.split(".")
        for p in parents:
            node = node.setdefault(p, {})
        node[leaf] = val
    errors = sorted(jsonschema.Draft202012Validator(SCHEMA).iter_errors(doc), key=lambda e: list(e.path))
    if errors:
        lines = []
        for e in errors:
            where = "/".join(map(str, e.absolute_path)) or "<root>"
            lines.append(f"  {where}: {e.message}")
        raise ConfigError("invalid config:\n" + "\n".join(lines))
    return doc


def _dists(cfg):
    data = cfg["data"]
    if "preset" in data:
        return preset(data["preset"])
    return spec_from_dict(data["source"]), spec_from_dict(data["target"])


def _digest(cfg) -> str:
    return config_digest(cfg)


def _out_dir(cfg) -> Path:
    out = Path(cfg["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _require(cfg, key, verb):
    if key not in cfg:
        raise ConfigError(f"{verb} needs '{key}' in the config")
    return cfg[key]


# -- CSV ---------------------------------------------------------------------

def _coord_names(d):
    return [f"dim{i}" for i in range(d)]


def write_csv(path: Path, header, rows, comments=()):
    with Path(path).open("w", newline="") as fh:
        for c in comments:
            fh.write(f"# {c}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])


def read_points(path) -> np.ndarray:
    """Coordinates from a CSV written by this tool (``dim*`` columns) or any all-numeric CSV."""
    path = Path(path)
    try:
        with path.open(newline="") as fh:
            lines = [ln for ln in fh if ln.strip() and not ln.startswith("#")]
    except OSError as e:
        raise InputError(f"cannot read {path}: {e}") from e
    reader = csv.reader(lines)
    try:
        header = next(reader)
    except StopIteration:
        raise InputError(f"{path}: empty file") from None
    cols = [i for i, h in enumerate(header) if h.startswith("dim")] or list(range(len(header)))
    out = []
    for lineno, row in enumerate(reader, start=2):
        if len(row) != len(header):
            raise InputError(f"{path}: row {lineno} has {len(row)} fields, expected {len(header)}")
        try:
            out.append([float(row[i]) for i in cols])
        except ValueError:
            raise InputError(f"{path}: non-numeric value in row {lineno}") from None
    if not out:
        raise InputError(f"{path}: no data rows")
    return np.array(out)


# -- verbs -------------------------------------------------------------------

def cmd_gen_data(cfg) -> int:
    source, target = _dists(cfg)
    gen = cfg.get("gen", {})
    which = gen.get("which", "target")
    n = gen.get("n", 1000)
    spec = target if which == "target" else source
    x = spec.draw(n, make_rng(cfg["seed"], 51))
    path = _out_dir(cfg) / f"data_{which}.csv"
    write_csv(path, ["id", *_coord_names(x.shape[1])], ([i, *row] for i, row in enumerate(x)),
              [f"config_sha256={_digest(cfg)}"])
    print(path)
    return EXIT_OK


def cmd_train(cfg) -> int:
    source, target = _dists(cfg)
    tdoc = dict(_require(cfg, "train", "train"))
    out = _out_dir(cfg)
    if "validation_budget" in tdoc:
        tdoc["validation_budget"] = tuple(tdoc["validation_budget"])
    tcfg = TrainConfig(seed=cfg["seed"], out_dir=str(out), **tdoc)
    res = train(source, target, tcfg)
    best = res.checkpoints.best()
    print(f"best iteration {best.iteration}: validation metric {best.validation_metric!r}")
    print(f"final checkpoint {res.checkpoints.entries[-1].path}")
    return EXIT_OK


def _model(cfg, key="checkpoint"):
    path = _require(cfg, key, "this command")
    try:
        return load_checkpoint(path)[0]
    except FileNotFoundError as e:
        raise InputError(f"missing checkpoint {path}") from e


def cmd_sample(cfg) -> int:
    source, target = _dists(cfg)
    model = _model(cfg)
    budget = NfeBudget(*cfg.get("budget", (10, 10)))
    n = cfg.get("n_samples", 1000)
    opts = cfg.get("sample", {})
    record = opts.get("record_trajectories", False)
    z0 = source.draw(n, make_rng(cfg["seed"], 52))
    if model.config.variant == "velocity":
        budget = NfeBudget(budget.total, 1)
        z, traj = sample_rf(model, z0, budget.n_t, record=record)
    else:
        z, traj = sample_hrf2(model, z0, budget, cfg["seed"], record=record)
    out = _out_dir(cfg)
    comments = [f"config_sha256={_digest(cfg)}",
                f"nfe={budget.total} (n_t={budget.n_t}, n_tau={budget.n_tau})"]
    d = z.shape[1]
    write_csv(out / "samples.csv", ["id", *_coord_names(d)], ([i, *r] for i, r in enumerate(z)), comments)
    if traj is not None:
        keep = opts.get("n_trajectories", min(n, 64))
        rows = (r for r in traj.rows() if r[0] < keep)
        write_csv(out / "trajectories.csv", ["sample_id", "step", "t", *_coord_names(d)], rows, comments)
    ref = target.draw(n, make_rng(cfg["seed"], 53))
    if d == 1:
        hist = {name: _hist(v[:, 0], _edges(np.concatenate([z[:, 0], ref[:, 0]])))
                for name, v in (("generated", z), ("target", ref))}
        (out / "samples.svg").write_text(svg.histogram_overlay(hist, f"samples, NFE={budget.total}", "x"))
    else:
        (out / "samples.svg").write_text(svg.scatter({"generated": z, "target": ref},
                                                      f"samples, NFE={budget.total}"))
    print(out / "samples.csv")
    return EXIT_OK


def cmd_eval(a_path, b_path, metric="auto", n_projections=128, seed=0, out=None) -> int:
    a, b = read_points(a_path), read_points(b_path)
    if a.shape[1] != b.shape[1]:
        raise ConfigError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    if metric == "auto":
        metric = "w1" if a.shape[1] == 1 else "sliced_w2"
    if metric == "w1":
        value = w1_1d(a, b)
        rep = MetricReport("w1", value, min(len(a), len(b)), None, None)
    elif metric == "sliced_w2":
        value = sliced_w2(a, b, n_projections, seed)
        rep = MetricReport("sliced_w2", value, min(len(a), len(b)), n_projections, seed)
    else:
        raise ConfigError(f"unknown metric {metric!r}")
    if out:
        digest = config_digest({"a": str(a_path), "b": str(b_path), "metric": metric,
                                "n_projections": n_projections, "seed": seed})
        write_csv(Path(out), ["name", "value", "n_samples", "n_projections", "seed"],
                  [[rep.name, rep.value, rep.n_samples, rep.n_projections or "", "" if rep.seed is None else rep.seed]],
                  [f"config_sha256={digest}"])
    print(repr(value))
    return EXIT_OK


def _edges(values, bins=60):
    lo, hi = np.quantile(values, [0.001, 0.999])
    pad = 0.05 * (hi - lo + 1e-9)
    return np.linspace(lo - pad, hi + pad, bins + 1)


def _hist(values, edges):
    h, _ = np.histogram(values, bins=edges, density=False)
    return edges, h / (len(values) * np.diff(edges))


def _check_support(source, target, anchor):
    mixtures = (GaussianMixture, StandardGaussian)
    if isinstance(source, mixtures) and isinstance(target, mixtures):
        if not rho_t(source, target, anchor.x_t, anchor.t) > UNDERFLOW:
            raise UndefinedVelocityLaw(f"rho_t vanishes at x_t={anchor.x_t.tolist()}, t={anchor.t}")


def cmd_probe_velocity(cfg) -> int:
    source, target = _dists(cfg)
    p = cfg.get("probe", {})
    d = source.dim
    x_t = p.get("x_t", [-1.0] * d)
    if len(x_t) != d:
        raise ConfigError(f"probe.x_t has {len(x_t)} coordinates, data has {d}")
    anchor = SpaceTimePoint(x_t, p.get("t", 0.0))
    modes = p.get("modes", ["analytic"])
    n = p.get("n", 10_000)
    seed = cfg["seed"]
    _check_support(source, target, anchor)
    samples = {}
    law = None
    for mode in modes:
        if mode == "analytic":
            law = velocity_law(source, target, anchor)
            samples[mode] = law.sample(n, make_rng(seed, 61))
        elif mode == "empirical-independent":
            try:
                samples[mode] = empirical_velocity_law(independent_sampler(source, target), anchor,
                                                       p.get("window", 0.05), n, seed)
            except RuntimeError as e:
                raise UndefinedVelocityLaw(str(e)) from e
        elif mode == "empirical-coupled":
            try:
                samples[mode] = empirical_velocity_law(ot_coupled_sampler(source, target, p.get("ot_batch", 100)),
                                                       anchor, p.get("window", 0.05), n, seed)
            except RuntimeError as e:
                raise UndefinedVelocityLaw(str(e)) from e
        else:
            model = _model(cfg)
            if model.config.variant != "accel":
                raise ConfigError("model probing needs an HRF2 checkpoint")
            v0 = make_rng(seed, 62).standard_normal((n, d))
            samples[mode] = integrate_velocity(model, anchor, v0, p.get("n_tau", 100))
    out = _out_dir(cfg)
    digest = _digest(cfg)
    for mode, v in samples.items():
        write_csv(out / f"probe_{mode}.csv", ["id", *_coord_names(d)], ([i, *r] for i, r in enumerate(v)),
                  [f"config_sha256={digest}", f"anchor x_t={anchor.x_t.tolist()} t={anchor.t}"])
    summary = []
    if d == 1:
        edges = _edges(np.concatenate([v[:, 0] for v in samples.values()]), p.get("bins", 60))
        hists = {m: _hist(v[:, 0], edges) for m, v in samples.items()}
        centers = 0.5 * (edges[:-1] + edges[1:])
        cols = list(hists)
        header = ["bin_lo", "bin_hi"] + cols
        if law is not None:
            header.append("analytic_density")
            exact = law.density(centers[:, None])
        rows = []
        for k in range(len(centers)):
            row = [edges[k], edges[k + 1]] + [hists[m][1][k] for m in cols]
            if law is not None:
                row.append(exact[k])
            rows.append(row)
        write_csv(out / "probe_hist.csv", header, rows, [f"config_sha256={digest}"])
        (out / "probe.svg").write_text(svg.histogram_overlay(
            hists, f"velocity at x_t={anchor.x_t.tolist()}, t={anchor.t}", "v"))
        for m, v in samples.items():
            summary.append([m, float(np.mean(v)), float(np.std(v)), dip_bimodality(v)])
        write_csv(out / "probe_summary.csv", ["mode", "mean", "stdev", "dip"], summary,
                  [f"config_sha256={digest}"])
    else:
        (out / "probe.svg").write_text(svg.scatter(samples, f"velocity at x_t={anchor.x_t.tolist()}, t={anchor.t}",
                                                   "v_x", "v_y"))
    for m, v in samples.items():
        print(f"{m}: mean={np.mean(v, axis=0).tolist()} stdev={np.std(v, axis=0).tolist()}")
    return EXIT_OK


def cmd_sweep_nfe(cfg) -> int:
    source, target = _dists(cfg)
    ckpts = _require(cfg, "checkpoints", "sweep-nfe")
    budgets = [tuple(b) for b in cfg.get("budgets", [[1, 1], [5, 1], [10, 10], [100, 1]])]
    n = cfg.get("n_samples", 10_000)
    seed = cfg["seed"]
    rows, series = [], {}
    for method, path in ckpts.items():
        try:
            model = load_checkpoint(path)[0]
        except FileNotFoundError as e:
            raise InputError(f"missing checkpoint for {method}: {path}") from e
        xs, ys = [], []
        for n_t, n_tau in budgets:
            if model.config.variant == "velocity":
                n_t, n_tau = n_t * n_tau, 1
            metric = validate(model, source, target, NfeBudget(n_t, n_tau), n, seed)
            rows.append([method, n_t, n_tau, n_t * n_tau, metric, seed])
            xs.append(n_t * n_tau)
            ys.append(metric)
        series[method] = (xs, ys)
    out = _out_dir(cfg)
    write_csv(out / "sweep.csv", ["method", "n_t", "n_tau", "total", "metric", "seed"], rows,
              [f"config_sha256={_digest(cfg)}"])
    label = "W1" if source.dim == 1 else "sliced W2"
    (out / "sweep.svg").write_text(svg.line_chart(series, "metric vs total NFE", "total NFE", label, log_x=True))
    for r in rows:
        print(",".join(map(str, r)))
    return EXIT_OK


# -- entry point -------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="hrflow", description="hierarchical rectified flow toolkit")
    ap.add_argument("--threads", type=int, default=None, help="cap BLAS / OpenMP worker threads")
    sub = ap.add_subparsers(dest="verb", required=True)
    for verb in ("gen-data", "train", "sample", "sweep-nfe"):
        sp = sub.add_parser(verb)
        sp.add_argument("config")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--output-dir")
        if verb == "sample":
            sp.add_argument("--checkpoint")
            sp.add_argument("--budget", type=int, nargs=2, metavar=("N_T", "N_TAU"))
            sp.add_argument("--n", type=int, dest="n_samples")
        if verb == "gen-data":
            sp.add_argument("--n", type=int)
            sp.add_argument("--which", choices=["source", "target"])
    sp = sub.add_parser("probe-velocity")
    sp.add_argument("config")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--output-dir")
    sp.add_argument("--checkpoint")
    sp.add_argument("--anchor", type=float, nargs="+", metavar="X",
                    help="coordinates of x_t followed by t")
    sp.add_argument("--mode", action="append", choices=PROBE_MODES)
    sp.add_argument("--n-tau", type=int)
    sp = sub.add_parser("eval")
    sp.add_argument("a")
    sp.add_argument("b")
    sp.add_argument("--metric", choices=["auto", "w1", "sliced_w2"], default="auto")
    sp.add_argument("--n-projections", type=int, default=128)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out")
    return ap


def _overrides(args) -> dict:
    o = {}
    for attr, key in (("seed", "seed"), ("output_dir", "output_dir"), ("checkpoint", "checkpoint"),
                      ("n_samples", "n_samples"), ("n", "gen.n"), ("which", "gen.which"),
                      ("n_tau", "probe.n_tau"), ("mode", "probe.modes")):
        val = getattr(args, attr, None)
        if val is not None:
            o[key] = val
    if getattr(args, "budget", None):
        o["budget"] = list(args.budget)
    if getattr(args, "anchor", None):
        *x, t = args.anchor
        if not x:
            raise ConfigError("--anchor needs at least one coordinate and a time")
        o["probe.x_t"], o["probe.t"] = x, t
    return o


VERBS = {"gen-data": cmd_gen_data, "train": cmd_train, "sample": cmd_sample,
         "probe-velocity": cmd_probe_velocity, "sweep-nfe": cmd_sweep_nfe}


def run(args) -> int:
    if args.verb == "eval":
        return cmd_eval(args.a, args.b, args.metric, args.n_projections, args.seed, args.out)
    cfg = load_config(args.config, _overrides(args))
    return VERBS[args.verb](copy.deepcopy(cfg))


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        with threadpool_limits(limits=args.threads):
            return run(args)
    except UndefinedVelocityLaw as e:
        print(f"undefined velocity law: {e}", file=sys.stderr)
        return EXIT_UNDEFINED
    except NonFiniteError as e:
        print(f"numeric divergence: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except (InputError, OSError) as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, ValueError, TypeError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
