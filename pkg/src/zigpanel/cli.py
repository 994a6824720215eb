"""Command-line pipeline: ``ingest``, ``fit``, ``bootstrap``, ``summarize``, ``simulate``.

Configuration is a flat JSON object whose keys mirror :class:`RunConfig`;
command-line flags override the file, which overrides the defaults. Every
command writes ``manifests/<command>.json`` and a copy of the resolved
configuration under the output directory.
"""
import argparse
import dataclasses
import hashlib
import json
import math
import os
import platform
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy

from . import __version__, kernels
from .analysis import DEFAULT_WINDOWS, export_plot_data, format_window_table, window_summary, write_csv
from .basis import make_basis
from .bootstrap import BandResult, BootstrapInstabilityError, simultaneous_band, simulate
from .fit import DegenerateStreamError, FitOptions, FitResult, fit
from .ingest import (IngestError, build_panel, load_covariates, load_panel, load_registry,
                     parse_transfers, save_panel)
from .model import STREAM_LABELS, STREAMS, VARIANTS, ModelSpec, ParameterSet

OUT_ENV = "ZIGPANEL_OUT"

EXIT_OK = 0
EXIT_CRASH = 1
EXIT_INPUT = 2
EXIT_NONCONVERGED = 3
EXIT_UNSTABLE = 4


class InputError(Exception):
    pass


@dataclass
class RunConfig:
    transfers: str = None
    transfers_format: str = None
    covariates: str = None
    registry: str = None
    out: str = None
    n_days: int = None
    activity_threshold: int = 5
    df: int = 10
    variants: list = field(default_factory=lambda: list(VARIANTS))
    streams: list = field(default_factory=lambda: list(STREAMS))
    gtol: float = 1e-6
    ftol: float = 1e-10
    max_iters: int = 2000
    ridge: float = 1e-4
    B: int = 1000
    alpha: float = 0.05
    seed: int = 0
    which: str = "f"
    freeze_intercepts: bool = False
    summary_variant: str = "Full"
    windows: list = field(default_factory=lambda: [list(w) for w in DEFAULT_WINDOWS])
    ma_window: int = 10
    phi: str = None

    def fit_options(self):
        return FitOptions(gtol=self.gtol, ftol=self.ftol, max_iters=self.max_iters, ridge=self.ridge)

    def to_dict(self):
        return dataclasses.asdict(self)


def load_config(path=None, overrides=None):
    base = {}
    if path:
        try:
            with open(path, encoding="utf-8") as fh:
                base = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise InputError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(base, dict):
            raise InputError(f"config {path} must be a JSON object")
        cfg_dir = os.path.dirname(os.path.abspath(path))
        for key in ("transfers", "covariates", "registry", "out", "phi"):
            if base.get(key) and not os.path.isabs(base[key]):
                base[key] = os.path.join(cfg_dir, base[key])
    known = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = sorted(set(base) - known)
    if unknown:
        raise InputError(f"unknown config keys {unknown}")
    merged = {**base, **{k: v for k, v in (overrides or {}).items() if v is not None}}
    cfg = RunConfig(**merged)
    if cfg.out is None:
        cfg.out = os.environ.get(OUT_ENV, "zigpanel_out")
    bad = [s for s in cfg.streams if s not in STREAMS]
    if bad:
        raise InputError(f"unknown streams {bad}")
    bad = [v for v in cfg.variants if v not in VARIANTS]
    if bad:
        raise InputError(f"unknown variants {bad}")
    return cfg


# -- output helpers ------------------------------------------------------------

def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return float(obj) if math.isfinite(obj) else None
    return obj


def dump_json(path, obj):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(_clean(obj), fh, indent=2, sort_keys=True, allow_nan=False)
        fh.write("\n")


def _read_json(path, what):
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise InputError(f"missing {what}: {path}") from None
    except (OSError, json.JSONDecodeError) as exc:
        raise InputError(f"cannot read {what} {path}: {exc}") from exc


def _config_hash(cfg):
    blob = json.dumps(_clean(cfg.to_dict()), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()


def write_manifest(cfg, command, outputs):
    dump_json(os.path.join(cfg.out, "config.json"), cfg.to_dict())
    rel = sorted(os.path.relpath(p, cfg.out) for p in outputs)
    dump_json(os.path.join(cfg.out, "manifests", f"{command}.json"), {
        "command": command,
        "config_sha256": _config_hash(cfg),
        "seed": cfg.seed,
        "versions": {"zigpanel": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
                     "python": platform.python_version()},
        "kernel_backend": kernels.BACKEND,
        "outputs": rel,
    })


def panel_dir(cfg):
    return os.path.join(cfg.out, "panel")


def _load_panel(cfg):
    if not os.path.exists(os.path.join(panel_dir(cfg), "manifest.json")):
        raise InputError(f"missing panel artifact: {panel_dir(cfg)} (run ingest first)")
    return load_panel(panel_dir(cfg))


def fit_path(cfg, stream, variant):
    return os.path.join(cfg.out, "fits", f"{stream}__{variant}.json")


def band_path(cfg, stream, variant, which):
    return os.path.join(cfg.out, "bands", f"{stream}__{variant}__{which}.json")


def _load_fit(cfg, stream, variant):
    return FitResult.from_dict(_read_json(fit_path(cfg, stream, variant), f"fit result for {stream}/{variant}"))


# -- commands ------------------------------------------------------------------

def cmd_ingest(cfg, workers=1):
    if not cfg.transfers:
        raise InputError("missing input: transfers file not configured")
    if not cfg.n_days:
        raise InputError("missing input: n_days not configured")
    registry = load_registry(cfg.registry)
    parsed = parse_transfers(cfg.transfers, cfg.transfers_format, registry)
    panel = build_panel(parsed.records, cfg.n_days, cfg.activity_threshold)
    if cfg.covariates:
        matrix, stats = load_covariates(cfg.covariates, cfg.n_days)
        panel = panel.with_covariates(matrix, stats)
    out = panel_dir(cfg)
    save_panel(panel, out)
    rejects = os.path.join(cfg.out, "rejects.csv")
    write_csv(rejects, ["line", "reason", "row"],
              [(r.line, r.reason, json.dumps(r.row, sort_keys=True)) for r in parsed.rejects])
    outputs = [os.path.join(out, f) for f in sorted(os.listdir(out))] + [rejects]
    write_manifest(cfg, "ingest", outputs)
    return 0


def _fit_stream(args):
    panel, stream, basis, variants, opts = args
    results = {}
    prev = None
    for variant in VARIANTS:
        if variant not in variants:
            continue
        spec = ModelSpec(variant, stream, basis)
        res = fit(spec, panel, opts, init=prev.phi_hat if prev is not None else None)
        results[variant] = res
        prev = res
    return stream, results


def _map(fn, items, workers):
    if workers > 1 and len(items) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            return list(ex.map(fn, items))
    return [fn(x) for x in items]


def cmd_fit(cfg, workers=1):
    panel = _load_panel(cfg)
    if any(v != "A" for v in cfg.variants) and panel.covariates is None:
        raise InputError("missing input: variants B/Full need covariates in the panel")
    basis = make_basis(panel.n_days, cfg.df)
    opts = cfg.fit_options()
    jobs = [(panel, s, basis, cfg.variants, opts) for s in cfg.streams]
    outputs = []
    all_converged = True
    comparison = []
    for stream, results in _map(_fit_stream, jobs, workers):
        for variant, res in results.items():
            path = fit_path(cfg, stream, variant)
            dump_json(path, res.to_dict())
            coef = path[:-5] + "_coef.csv"
            write_csv(coef, ["component", "term", "estimate", "std_error", "z_value", "p_value"],
                      res.coefficient_rows())
            outputs += [path, coef]
            all_converged &= res.converged
            comparison.append((STREAM_LABELS[stream], variant, res.nll, res.residual_df, res.aic,
                               res.bic, res.n_params, res.converged))
    table = os.path.join(cfg.out, "fits", "model_comparison.csv")
    write_csv(table, ["model", "variant", "negative_log_likelihood", "residual_df", "aic", "bic",
                      "n_params", "converged"], comparison)
    outputs.append(table)
    write_manifest(cfg, "fit", outputs)
    if not all_converged:
        raise NonConvergence("one or more fits did not converge; see fits/*.json")
    return 0


class NonConvergence(Exception):
    pass


def cmd_bootstrap(cfg, workers=1):
    panel = _load_panel(cfg)
    outputs = []
    for stream in cfg.streams:
        for variant in cfg.variants:
            res = _load_fit(cfg, stream, variant)
            if not res.converged:
                raise NonConvergence(f"fit {stream}/{variant} did not converge; cannot bootstrap")
            band = simultaneous_band(res.spec, res, panel, which=cfg.which, B=cfg.B, alpha=cfg.alpha,
                                     seed=cfg.seed, workers=workers,
                                     freeze_intercepts=cfg.freeze_intercepts, opts=cfg.fit_options())
            path = band_path(cfg, stream, variant, cfg.which)
            dump_json(path, band.to_dict())
            csv_path = path[:-5] + ".csv"
            write_csv(csv_path, ["t", "f_hat", "lower", "upper"], band.rows())
            outputs += [path, csv_path]
    write_manifest(cfg, "bootstrap", outputs)
    return 0


def cmd_summarize(cfg, workers=1):
    panel = _load_panel(cfg)
    fits = {}
    for stream in cfg.streams:
        for variant in VARIANTS:
            path = fit_path(cfg, stream, variant)
            if os.path.exists(path):
                fits[(stream, variant)] = _load_fit(cfg, stream, variant)
    missing = [s for s in cfg.streams if (s, cfg.summary_variant) not in fits]
    if missing:
        raise InputError(f"missing fit artifact for {cfg.summary_variant} model: {missing} (run fit first)")
    bands = {}
    bdir = os.path.join(cfg.out, "bands")
    if os.path.isdir(bdir):
        for name in sorted(os.listdir(bdir)):
            if name.endswith(".json"):
                stream, variant, which = name[:-5].split("__")
                bands[(stream, variant, which)] = BandResult.from_dict(_read_json(os.path.join(bdir, name), "band"))
    sdir = os.path.join(cfg.out, "summary")
    windows = [tuple(w) for w in cfg.windows]
    summaries = {s: window_summary(fits[(s, cfg.summary_variant)], panel, windows) for s in cfg.streams}
    rows = [(STREAM_LABELS[s], w.name, w.start_day, w.end_day, w.prob_txn, w.cond_mean,
             w.raw_prob_txn, w.raw_cond_mean) for s in cfg.streams for w in summaries[s]]
    outputs = []
    path = os.path.join(sdir, "window_summary.csv")
    write_csv(path, ["model", "window", "start_day", "end_day", "prob_txn", "cond_mean",
                     "raw_prob_txn", "raw_cond_mean"], rows)
    outputs.append(path)
    path = os.path.join(sdir, "window_table.txt")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(format_window_table(summaries))
    outputs.append(path)
    outputs += export_plot_data(os.path.join(sdir, "plots"), panel, fits, bands, cfg.ma_window)
    write_manifest(cfg, "summarize", outputs)
    return 0


def cmd_simulate(cfg, phi_file=None, workers=1):
    phi_file = phi_file or cfg.phi
    if not phi_file:
        raise InputError("missing input: --phi parameter file")
    data = _read_json(phi_file, "parameter file")
    if "spec" not in data or "phi_hat" not in data and "phi" not in data:
        raise InputError(f"schema mismatch: {phi_file} needs 'spec' and 'phi_hat'")
    spec = ModelSpec.from_dict(data["spec"])
    phi = ParameterSet.from_dict(data.get("phi_hat") or data["phi"])
    panel = _load_panel(cfg)
    if spec.per_wallet and phi.alpha.size != panel.m:
        raise InputError(f"schema mismatch: parameters cover {phi.alpha.size} wallets, panel has {panel.m}")
    y = simulate(spec, phi, (panel.m, panel.n_days, panel.covariates), cfg.seed)
    sim = panel
    for s in STREAMS:
        sim = sim.with_stream(s, y if s == spec.stream else np.zeros_like(y))
    sim.counts = (y > 0).astype(np.int64)
    out = os.path.join(cfg.out, "simulated")
    save_panel(sim, out)
    write_manifest(cfg, "simulate", [os.path.join(out, f) for f in sorted(os.listdir(out))])
    return 0


COMMANDS = {
    "ingest": cmd_ingest,
    "fit": cmd_fit,
    "bootstrap": cmd_bootstrap,
    "summarize": cmd_summarize,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="zigpanel", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("ingest", "fit", "bootstrap", "summarize", "simulate"):
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--out", help=f"output directory (default ${OUT_ENV} or ./zigpanel_out)")
        p.add_argument("--seed", type=int)
        p.add_argument("--workers", type=int, default=1, help="worker processes (results do not depend on it)")
        p.add_argument("--stream", action="append", choices=STREAMS, help="repeatable")
        p.add_argument("--variant", action="append", choices=VARIANTS, help="repeatable")
        p.add_argument("--B", type=int, dest="B")
        p.add_argument("--alpha", type=float)
        if name == "ingest":
            p.add_argument("--transfers")
            p.add_argument("--covariates")
            p.add_argument("--registry")
            p.add_argument("--n-days", type=int, dest="n_days")
            p.add_argument("--activity-threshold", type=int, dest="activity_threshold")
        if name == "fit":
            p.add_argument("--df", type=int)
            p.add_argument("--max-iters", type=int, dest="max_iters")
            p.add_argument("--ridge", type=float)
        if name == "bootstrap":
            p.add_argument("--which", choices=("f", "g"))
            p.add_argument("--freeze-intercepts", action="store_true", default=None, dest="freeze_intercepts")
        if name == "simulate":
            p.add_argument("--phi", help="FitResult JSON providing spec and parameters")
    return parser


def _fail(kind, message, code):
    print(json.dumps({"error": kind, "message": str(message)}), file=sys.stderr)
    return code


def main(argv=None):
    args = build_parser().parse_args(argv)
    overrides = {k: v for k, v in vars(args).items()
                 if k not in ("command", "config", "workers", "stream", "variant")}
    overrides["streams"] = args.stream
    overrides["variants"] = args.variant
    try:
        cfg = load_config(args.config, overrides)
        if args.command == "simulate":
            return cmd_simulate(cfg, args.phi, args.workers)
        return COMMANDS[args.command](cfg, max(1, args.workers))
    except NonConvergence as exc:
        return _fail("nonconvergence", exc, EXIT_NONCONVERGED)
    except BootstrapInstabilityError as exc:
        return _fail("bootstrap_instability", exc, EXIT_UNSTABLE)
    except (InputError, IngestError, DegenerateStreamError, FileNotFoundError) as exc:
        return _fail("input", exc, EXIT_INPUT)
    except ValueError as exc:
        return _fail("invalid", exc, EXIT_INPUT)
    except Exception as exc:  # noqa: BLE001 - single-line report for any crash
        return _fail("crash", f"{type(exc).__name__}: {exc}", EXIT_CRASH)


if __name__ == "__main__":
    sys.exit(main())
