"""Command-line pipeline.

Every subcommand writes its outputs plus a ``manifest.json`` into ``--out``.
Outputs are staged and only moved into place once the whole command has
succeeded, so a failing run leaves no partial files behind.  Errors are
reported as one line on stderr, ``error <Class>: <message>``, with an exit
status specific to the error class.
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import hashlib
import json
import os
import shutil
import sys
import tempfile
import warnings
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__, kernels
from .config import load_config, override, resolve_threads
from .errors import ConfigError, IoError, KPError, MissingArtifact, NonConvergence, PrevalenceOutOfRange

FIT_FILES = ("draws.csv", "panel.csv", "countries.csv", "manifest.json")
CORR_HEADER = ["kind", "name", "mean", "q2.5", "q97.5"]


# --------------------------------------------------------------------------
# plumbing


def _now():
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


class Staging:
    """Collect outputs in a scratch directory and publish them together."""

    def __init__(self, out_dir):
        self.out = Path(out_dir)
        self.dir = Path(tempfile.mkdtemp(prefix=".kpgmrf-stage-"))
        self.names = []

    def path(self, name):
        self.names.append(name)
        return self.dir / name

    def commit(self):
        try:
            self.out.mkdir(parents=True, exist_ok=True)
            for name in self.names:
                shutil.move(str(self.dir / name), str(self.out / name))
        except OSError as exc:
            raise IoError(f"cannot write to {self.out}: {exc.strerror}") from exc
        finally:
            shutil.rmtree(self.dir, ignore_errors=True)

    def abort(self):
        shutil.rmtree(self.dir, ignore_errors=True)


def _require(path, what):
    p = Path(path)
    if not p.is_file():
        raise IoError(f"{what} not found: {path}")
    return p


def _new_seed():
    return int(np.random.SeedSequence().entropy % (2 ** 32))


class Run:
    def __init__(self, args, cfg, command):
        self.command = command
        self.cfg = cfg
        self.started = _now()
        self.inputs = {}
        self.seeds = {}
        self.extra = {}
        if cfg["run"]["seed"] is None:
            cfg["run"]["seed"] = _new_seed()
            self.seeds["sampled"] = True
        self.seeds["seed"] = cfg["run"]["seed"]
        self.stage = Staging(args.out)

    def input(self, path):
        self.inputs[str(path)] = sha256(path)

    def finish(self):
        outputs = {n: sha256(self.stage.dir / n) for n in self.stage.names}
        manifest = {
            "subcommand": self.command,
            "version": __version__,
            "backend": kernels.BACKEND,
            "config": self.cfg,
            "seeds": self.seeds,
            "inputs": self.inputs,
            "outputs": outputs,
            "started": self.started,
            "finished": _now(),
            **self.extra,
        }
        with open(self.stage.path("manifest.json"), "w", encoding="utf-8") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True, default=_json_default)
            fh.write("\n")
        self.stage.commit()
        return manifest


def _json_default(obj):
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return str(obj)


def _load_panel(run, path):
    from .panel import load_country_table, load_panel

    d = run.cfg["data"]
    _require(path, "panel file")
    run.input(path)
    table = None
    if d["countries"]:
        _require(d["countries"], "country table")
        run.input(d["countries"])
        table = load_country_table(d["countries"])
    return load_panel(path, table, percent=bool(d["percent"]), dup_tol=d["dup_tol"])


def _sampler_config(cfg, threads):
    from .posterior import SamplerConfig

    s = cfg["sampler"]
    return SamplerConfig(chains=s["chains"], draws=s["draws"], warmup=s["warmup"], thin=s["thin"],
                         seed=cfg["run"]["seed"], threads=threads)


def _prior(cfg):
    from .posterior import PriorSpec

    try:
        return PriorSpec.parse(cfg["sampler"]["prior"])
    except ValueError as exc:
        raise ConfigError(f"bad prior {cfg['sampler']['prior']!r}: {exc}") from exc


def _write_rows(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _f(x):
    return repr(float(x))


# --------------------------------------------------------------------------
# subcommands


def cmd_ingest(args, run):
    from .panel import POPULATIONS, sparsity_profile, write_country_table, write_panel

    panel = _load_panel(run, args.panel)
    write_panel(panel, run.stage.path("panel.csv"))
    write_country_table(panel, run.stage.path("countries.csv"))
    prof = sparsity_profile(panel)
    _write_rows(run.stage.path("sparsity.csv"), ["population", "n_zero", "n_1_4", "n_5_plus"],
                [[p, *prof[p]] for p in POPULATIONS])
    run.extra["n_observed"] = panel.n_observed


def cmd_simulate(args, run):
    from .gmrf import PARAM_NAMES
    from .panel import write_country_table, write_panel
    from .simulate import ScenarioSpec, load_scenario, simulate_panel, write_scenario

    if args.scenario:
        _require(args.scenario, "scenario file")
        run.input(args.scenario)
        spec = load_scenario(args.scenario)
    else:
        spec = ScenarioSpec()
    if args.n_countries is not None:
        spec.n_countries = args.n_countries
    if args.seed is not None or not args.scenario:
        spec.seed = run.cfg["run"]["seed"]
    run.seeds["scenario"] = spec.seed
    panel, truth = simulate_panel(spec)
    bad = int(np.sum(panel.y[panel.mask] >= 0))
    if bad:
        raise PrevalenceOutOfRange(f"{bad} simulated observed cells have prevalence >= 1; "
                                   "use lower regional means or another seed")
    write_panel(panel, run.stage.path("panel.csv"))
    write_country_table(panel, run.stage.path("countries.csv"))
    write_scenario(spec, run.stage.path("scenario.ini"))
    _write_rows(run.stage.path("truth_params.csv"), ["name", "value"],
                [[n, _f(v)] for n, v in zip(PARAM_NAMES, spec.params.to_vector())])
    _write_rows(run.stage.path("truth_cells.csv"), ["country", "population", "year", "log_prevalence"],
                [[*panel.cell(j), _f(truth[j])] for j in range(panel.n_cells)])


def _fixed_from_args(args, cfg):
    from .gmrf import PARAM_NAMES
    from .posterior import ModelSpec

    model = ModelSpec.ablation(args.ablation or "full", _prior(cfg))
    fixed = dict(model.fixed)
    for item in args.fix or []:
        name, _, val = item.partition("=")
        if name not in PARAM_NAMES:
            raise ConfigError(f"--fix: unknown parameter {name!r}")
        try:
            fixed[PARAM_NAMES.index(name)] = float(val)
        except ValueError:
            raise ConfigError(f"--fix: bad value in {item!r}") from None
    return ModelSpec(model.prior, tuple(sorted(fixed.items())), model.tag)


def cmd_fit(args, run):
    from .diagnostics import diagnostics
    from .panel import write_country_table, write_panel
    from .posterior import sample_posterior, write_draws

    panel = _load_panel(run, args.panel)
    model = _fixed_from_args(args, run.cfg)
    threads = resolve_threads(run.cfg)
    cfg = _sampler_config(run.cfg, threads)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", NonConvergence)
        post = sample_posterior(panel, model, cfg)
    write_draws(post, run.stage.path("draws.csv"))
    write_panel(panel, run.stage.path("panel.csv"))
    write_country_table(panel, run.stage.path("countries.csv"))
    if post.n_chains >= 2 and cfg.draws >= 4:
        _write_diagnostics(diagnostics(post), run.stage.path("diagnostics.csv"))
    run.extra["model"] = {"tag": model.tag, "prior": str(model.prior),
                          "fixed": [[int(j), float(v)] for j, v in model.fixed]}
    run.extra["sampler"] = asdict(cfg)
    run.extra["max_rhat"] = post.meta.get("max_rhat")
    run.extra["accept_rate"] = post.meta.get("accept_rate")
    flagged = [str(w.message) for w in caught if issubclass(w.category, NonConvergence)]
    run.extra["nonconvergence"] = bool(flagged)
    for msg in flagged:
        print(f"warning NonConvergence: {msg}", file=sys.stderr)


def _write_diagnostics(rep, path):
    from .gmrf import PARAM_NAMES

    rows = [[n, _f(r), _f(e), int(z)] for n, r, e, z in zip(PARAM_NAMES, rep.rhat, rep.n_eff, rep.zero_variance)]
    rows.append(["summary_n_eff", "", _f(rep.n_eff_median), ""])
    _write_rows(path, ["name", "rhat", "n_eff", "zero_variance"], rows)


def cmd_diagnose(args, run):
    from .diagnostics import diagnostics
    from .posterior import read_draws

    _require(args.draws_file, "draws file")
    run.input(args.draws_file)
    post = read_draws(args.draws_file)
    rep = diagnostics(post)
    _write_diagnostics(rep, run.stage.path("diagnostics.csv"))
    run.extra["max_rhat"] = rep.max_rhat
    run.extra["n_eff"] = {"median": rep.n_eff_median, "min": rep.n_eff_min, "max": rep.n_eff_max}
    if rep.max_rhat > 1.01:
        run.extra["nonconvergence"] = True
        print(f"warning NonConvergence: max split R-hat {rep.max_rhat:.4f} exceeds 1.01", file=sys.stderr)


def _load_fit(run, fit_dir):
    from .panel import load_country_table, load_panel
    from .posterior import read_draws

    fit = Path(fit_dir)
    for name in FIT_FILES:
        if not (fit / name).is_file():
            raise MissingArtifact(f"{fit / name} is missing; run `fit` first")
    for name in FIT_FILES[:3]:
        run.input(fit / name)
    table = load_country_table(fit / "countries.csv")
    panel = load_panel(fit / "panel.csv", table)
    post = read_draws(fit / "draws.csv")
    return panel, post


def _cells(run, panel, post):
    from .impute import full_posterior

    p = run.cfg["predict"]
    return full_posterior(post, panel, seed=run.cfg["run"]["seed"], thin=p["thin"], sweeps=p["sweeps"])


def _contrast(run, cells):
    from .impute import change_contrast

    c = run.cfg["contrast"]
    return change_contrast(cells, c["year_a"], c["year_b"], c["ratio_up"], c["ratio_down"], c["prob"])


def cmd_predict(args, run):
    from .impute import write_estimates

    panel, post = _load_fit(run, args.fit_dir)
    cells = _cells(run, panel, post)
    write_estimates(cells, run.stage.path("estimates.csv"))
    np.savez(run.stage.path("cells.npz"), flat=cells.flat, draws=cells.draws,
             draw_index=cells.draw_index, countries=np.array(cells.countries),
             first_year=cells.first_year, n_years=cells.n_years)


def cmd_contrast(args, run):
    from .impute import CellPosterior, write_changes

    path = Path(args.cells)
    if path.is_dir():
        path = path / "cells.npz"
    if not path.is_file():
        raise MissingArtifact(f"{path} is missing; run `predict` first")
    run.input(path)
    with np.load(path) as z:
        cells = CellPosterior(z["flat"], z["draws"], z["draw_index"], tuple(str(c) for c in z["countries"]),
                              int(z["first_year"]), int(z["n_years"]))
    write_changes(_contrast(run, cells), run.stage.path("changes.csv"))


def correlation_summary(post, n_years):
    """Six rows: lag-1 temporal per population and same-year cross correlations."""
    from .gmrf import PAIRS, implied_correlations
    from .panel import POPULATIONS
    from .posterior import sigma_from_theta

    vals = []
    for d in range(post.n_draws):
        sigma = sigma_from_theta(post.draws[d], n_years)
        if sigma is None:
            continue
        vals.append(implied_correlations(None, n_years, sigma=sigma))
    vals = np.array(vals)
    rows = []
    for k, pop in enumerate(POPULATIONS):
        v = vals[:, k, k]
        rows.append(["temporal", pop, _f(v.mean()), *(_f(q) for q in np.quantile(v, [0.025, 0.975]))])
    for a, b in PAIRS:
        v = vals[:, a, b]
        rows.append(["cross", f"{POPULATIONS[a]}_{POPULATIONS[b]}", _f(v.mean()),
                     *(_f(q) for q in np.quantile(v, [0.025, 0.975]))])
    return rows


def cmd_report(args, run):
    from .impute import export_estimates

    panel, post = _load_fit(run, args.fit_dir)
    cells = _cells(run, panel, post)
    changes = _contrast(run, cells)
    export_estimates(cells, changes, run.stage.path("estimates.csv"), run.stage.path("changes.csv"))
    _write_rows(run.stage.path("correlations.csv"), CORR_HEADER, correlation_summary(post, panel.n_years))


def _folds(run, panel):
    from .evaluate import make_folds

    c = run.cfg["cv"]
    return make_folds(panel, c["folds"], seed=run.cfg["run"]["seed"], by_series=bool(c["by_series"]))


def _predictor(run, which, threads):
    from .evaluate import BaselinePredictor, BayesPredictor
    from .posterior import ModelSpec

    if which == "baseline":
        return BaselinePredictor(run.cfg["cv"]["window"])
    model = ModelSpec.ablation(which, _prior(run.cfg))
    return BayesPredictor(model, _sampler_config(run.cfg, 1), run.cfg["run"]["seed"], run.cfg["predict"]["thin"])


def _eval_run(run, panel, tags):
    from .evaluate import run_cv

    threads = resolve_threads(run.cfg)
    folds = _folds(run, panel)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", NonConvergence)
        return [run_cv(panel, _predictor(run, t, threads), folds, threads, tag=t) for t in tags]


def cmd_cv(args, run):
    from .evaluate import write_eval_report

    panel = _load_panel(run, args.panel)
    results = _eval_run(run, panel, [args.model])
    write_eval_report(results, run.stage.path("cv.csv"))
    run.extra["cv_mse"] = {r.tag: r.cv_mse for r in results}


def cmd_ablate(args, run):
    from .evaluate import write_eval_report

    panel = _load_panel(run, args.panel)
    results = _eval_run(run, panel, ["full", "no_cross_pop", "no_country", "no_time", "baseline"])
    write_eval_report(results, run.stage.path("ablation.csv"))
    run.extra["cv_mse"] = {r.tag: r.cv_mse for r in results}


def cmd_sensitivity(args, run):
    from .evaluate import prior_sensitivity
    from .posterior import PriorSpec

    panel = _load_panel(run, args.panel)
    try:
        priors = [PriorSpec.parse(p) for p in args.priors.split(",")]
    except ValueError as exc:
        raise ConfigError(f"--priors: {exc}") from exc
    threads = resolve_threads(run.cfg)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", NonConvergence)
        rows = prior_sensitivity(panel, priors, _folds(run, panel), _sampler_config(run.cfg, 1),
                                 seed=run.cfg["run"]["seed"], threads=threads)
    _write_rows(run.stage.path("sensitivity.csv"),
                ["prior", "cv_mse", "coverage95", "rho_MSM_FSW", "rho_MSM_PWID", "rho_FSW_PWID", "max_rhat"],
                [[r.tag, _f(r.cv_mse), _f(r.coverage95), *(_f(v) for v in r.extra["rho_mean"]),
                  _f(r.extra["max_rhat"] if r.extra["max_rhat"] is not None else float("nan"))] for r in rows])


COMMANDS = {
    "ingest": cmd_ingest, "simulate": cmd_simulate, "fit": cmd_fit, "diagnose": cmd_diagnose,
    "predict": cmd_predict, "contrast": cmd_contrast, "cv": cmd_cv, "ablate": cmd_ablate,
    "sensitivity": cmd_sensitivity, "report": cmd_report,
}


# --------------------------------------------------------------------------
# argument parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(f"{self.prog}: {message}")


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    g = common.add_argument_group("global options")
    g.add_argument("--seed", type=int, default=None, help="master seed (sampled and recorded if omitted)")
    g.add_argument("--threads", type=int, default=None, help="worker processes (default: available cores)")
    g.add_argument("--config", default=None, help="INI file with [run], [sampler], ... sections")
    g.add_argument("--out", default=".", help="output directory")

    sampler = argparse.ArgumentParser(add_help=False)
    s = sampler.add_argument_group("sampler")
    s.add_argument("--prior", default=None, help="laplace:SCALE or normal:SCALE")
    s.add_argument("--chains", type=int, default=None)
    s.add_argument("--draws", type=int, default=None, help="retained draws per chain")
    s.add_argument("--warmup", type=int, default=None)
    s.add_argument("--thin", type=int, default=None, help="sweeps per retained draw")

    data = argparse.ArgumentParser(add_help=False)
    d = data.add_argument_group("data")
    d.add_argument("--countries", default=None, help="country,region table (default: bundled)")
    d.add_argument("--percent", action="store_true", default=None, help="prevalence given in percent")
    d.add_argument("--dup-tol", type=float, default=None)

    predict = argparse.ArgumentParser(add_help=False)
    p = predict.add_argument_group("prediction")
    p.add_argument("--predict-thin", type=int, default=None, help="use every n-th parameter draw")
    p.add_argument("--sweeps", type=int, default=None, help="Gibbs sweeps per parameter draw")

    contrast = argparse.ArgumentParser(add_help=False)
    c = contrast.add_argument_group("contrast")
    c.add_argument("--ratio-up", type=float, default=None)
    c.add_argument("--ratio-down", type=float, default=None)
    c.add_argument("--prob", type=float, default=None)
    c.add_argument("--year-a", type=int, default=None)
    c.add_argument("--year-b", type=int, default=None)

    cvp = argparse.ArgumentParser(add_help=False)
    v = cvp.add_argument_group("cross-validation")
    v.add_argument("--folds", type=int, default=None)
    v.add_argument("--by-series", action="store_true", default=None)
    v.add_argument("--window", type=int, default=None, help="baseline uses only the last N years")

    parser = _Parser(prog="kpgmrf", description=__doc__.splitlines()[0], parents=[common])
    parser.add_argument("--version", action="version", version=f"kpgmrf {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sp = sub.add_parser("ingest", parents=[common, data], help="validate an observation file")
    sp.add_argument("panel")
    sp = sub.add_parser("simulate", parents=[common], help="draw a synthetic panel")
    sp.add_argument("--scenario", default=None, help="scenario INI file")
    sp.add_argument("--n-countries", type=int, default=None)
    sp = sub.add_parser("fit", parents=[common, data, sampler], help="sample the posterior")
    sp.add_argument("panel")
    sp.add_argument("--ablation", choices=["full", "no_cross_pop", "no_country", "no_time"], default=None)
    sp.add_argument("--fix", action="append", metavar="NAME=VALUE", help="pin a parameter")
    sp = sub.add_parser("diagnose", parents=[common], help="R-hat and n_eff for a draws file")
    sp.add_argument("draws_file", metavar="draws")
    sp = sub.add_parser("predict", parents=[common, predict], help="cell draws from a fit")
    sp.add_argument("fit_dir")
    sp = sub.add_parser("contrast", parents=[common, contrast], help="change classes from cell draws")
    sp.add_argument("cells", help="cells.npz or the predict output directory")
    sp = sub.add_parser("cv", parents=[common, data, sampler, cvp, predict], help="cross-validate one model")
    sp.add_argument("panel")
    sp.add_argument("--model", default="full",
                    choices=["full", "no_cross_pop", "no_country", "no_time", "baseline"])
    sp = sub.add_parser("ablate", parents=[common, data, sampler, cvp, predict], help="CV of all model variants")
    sp.add_argument("panel")
    sp = sub.add_parser("sensitivity", parents=[common, data, sampler, cvp, predict], help="CV across priors")
    sp.add_argument("panel")
    sp.add_argument("--priors", default="laplace:0.1,laplace:0.5,normal:0.1")
    sp = sub.add_parser("report", parents=[common, predict, contrast], help="estimates, changes, correlations")
    sp.add_argument("fit_dir")
    return parser


def _resolve(args):
    cfg = load_config(args.config)
    get = lambda name: getattr(args, name, None)  # noqa: E731
    override(cfg, "run", "seed", get("seed"))
    override(cfg, "run", "threads", get("threads"))
    for key in ("prior", "chains", "draws", "warmup", "thin"):
        override(cfg, "sampler", key, get(key))
    override(cfg, "predict", "thin", get("predict_thin"))
    override(cfg, "predict", "sweeps", get("sweeps"))
    for key in ("ratio_up", "ratio_down", "prob", "year_a", "year_b"):
        override(cfg, "contrast", key, get(key))
    override(cfg, "cv", "folds", get("folds"))
    override(cfg, "cv", "by_series", get("by_series"))
    override(cfg, "cv", "window", get("window"))
    override(cfg, "data", "countries", get("countries"))
    override(cfg, "data", "percent", get("percent"))
    override(cfg, "data", "dup_tol", get("dup_tol"))
    return cfg


def main(argv=None):
    run = None
    try:
        args = build_parser().parse_args(argv)
        run = Run(args, _resolve(args), args.command)
        if args.config:
            run.input(args.config)
        COMMANDS[args.command](args, run)
        run.finish()
        return 0
    except KPError as exc:
        if run is not None:
            run.stage.abort()
        msg = " ".join(str(exc).split())
        print(f"error {exc.code}: {msg}", file=sys.stderr)
        return exc.exit_status
    except (ValueError, OSError) as exc:
        if run is not None:
            run.stage.abort()
        kind = "IoError" if isinstance(exc, OSError) else "ConfigError"
        status = IoError.exit_status if kind == "IoError" else ConfigError.exit_status
        print(f"error {kind}: {' '.join(str(exc).split())}", file=sys.stderr)
        return status
    except KeyboardInterrupt:
        if run is not None:
            run.stage.abort()
        print("error Interrupted: stopped by user", file=sys.stderr)
        return 130


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
