"""Command-line interface: ``cdlcr {simulate,fit,summarize,diag,export}``.

Exit codes: 0 success, 2 invalid input or configuration, 3 sampler failure,
4 diagnostics precondition (for example psrf with a single chain).
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import math
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .covariates import SCALE_MAX, DataValidationError
from .data import file_checksum, read_captures, write_captures
from .diagnostics import (
    DiagnosticsError,
    psrf,
    read_draws,
    resolve_names,
    summarize,
    write_draws,
    write_summary,
)
from .model import ModelSpec, Priors
from .popstate import StructuralError
from .sampler import DEFAULT_SCALES, PosteriorDraws, SamplerConfig, SamplerError, run
from .simulate import finch_scenario, generate_scenario, vole_scenario, write_truth

__all__ = ["RunConfig", "fit", "load_run", "export_plot_data", "main", "SEED_ENV"]

log = logging.getLogger("cdlcr")

SEED_ENV = "CDLCR_SEED"
EXIT_OK, EXIT_INVALID, EXIT_SAMPLER, EXIT_DIAG = 0, 2, 3, 4


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    data: str = ""
    out: str = ""
    model: str = "standard"
    covariate: str = "none"
    M: int | None = None
    seed: int | None = None
    n_chains: int = 3
    n_adapt: int = 1000
    n_iter: int = 1000
    thin: int = 1
    censoring: bool = True
    loc: float | None = None
    scale: float | None = None
    scale_max: float = SCALE_MAX
    n_states: int = 2
    k1: int | None = None
    k2: list | None = None
    priors: dict = field(default_factory=dict)
    proposal_scales: dict = field(default_factory=dict)
    n_workers: int = 1
    progress_every: int = 0
    check_identities: bool = False
    data_sha256: str | None = None

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        extra = set(d) - known - {"version", "resolved"}
        if extra:
            raise ConfigError(f"unknown config keys {sorted(extra)}")
        return cls(**{k: v for k, v in d.items() if k in known})

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def validate(self):
        if not self.data:
            raise ConfigError("no data file given (--data or 'data' in the config)")
        if self.model not in ("standard", "robust"):
            raise ConfigError("model must be 'standard' or 'robust'")
        if self.covariate not in ("none", "mass", "categorical"):
            raise ConfigError("covariate must be 'none', 'mass' or 'categorical'")
        for name in ("n_chains", "n_iter", "thin", "n_workers"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be at least 1")
        if self.n_adapt < 0:
            raise ConfigError("n_adapt must be non-negative")
        if self.seed is not None and not 0 <= int(self.seed) < 2 ** 64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        if self.M is not None and self.M < 1:
            raise ConfigError("M must be positive")
        try:
            Priors(**self.priors)
        except TypeError as exc:
            raise ConfigError(f"bad prior override: {exc}") from None
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        bad = set(self.proposal_scales) - set(DEFAULT_SCALES)
        if bad:
            raise ConfigError(f"unknown proposal scales {sorted(bad)}")


def resolve_seed(flag, config_value, env=None) -> int:
    """Seed precedence: command-line flag, then config file, then environment."""
    env = os.environ if env is None else env
    for v in (flag, config_value):
        if v is not None:
            return int(v)
    if env.get(SEED_ENV):
        try:
            return int(env[SEED_ENV])
        except ValueError:
            raise ConfigError(f"{SEED_ENV}={env[SEED_ENV]!r} is not an integer") from None
    return 0


def _load_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None


def build_config(args) -> RunConfig:
    base = _load_json(args.config) if args.config else {}
    config_seed = base.pop("seed", None)
    cfg = RunConfig.from_dict(base)
    overrides = {
        "data": args.data, "out": args.out, "model": args.model, "covariate": args.covariate,
        "M": args.M, "n_chains": args.chains, "n_adapt": args.adapt, "n_iter": args.iter,
        "thin": args.thin, "n_workers": args.workers, "progress_every": args.progress,
        "scale_max": args.scale_max,
    }
    for k, v in overrides.items():
        if v is not None:
            setattr(cfg, k, v)
    if args.no_censoring:
        cfg.censoring = False
    if args.check_identities:
        cfg.check_identities = True
    cfg.seed = resolve_seed(args.seed, config_seed)
    cfg.validate()
    return cfg


# -- run directory -----------------------------------------------------------

def _run_logger(path: Path) -> logging.Handler:
    handler = logging.FileHandler(path, mode="w")
    handler.setFormatter(logging.Formatter("%(message)s"))
    handler.setLevel(logging.INFO)
    log.addHandler(handler)
    log.setLevel(logging.INFO)
    return handler


def fit(cfg: RunConfig) -> Path:
    """Run the sampler and persist everything needed to reproduce and inspect the run."""
    cfg.validate()
    data_path = Path(cfg.data)
    data = read_captures(data_path, cfg.covariate, k1=cfg.k1, k2=cfg.k2, scale_max=cfg.scale_max)
    checksum = file_checksum(data_path)
    if cfg.data_sha256 and cfg.data_sha256 != checksum:
        log.warning("data checksum differs from the one recorded in the config")
    if data.k2_max > 1 and cfg.model == "standard":
        raise ConfigError("data have several secondary samples per primary; use --model robust")
    M = cfg.M if cfg.M is not None else 2 * data.n
    spec = ModelSpec(M=M, design=cfg.model, covariate=cfg.covariate, censoring=cfg.censoring,
                     loc=cfg.loc, scale=cfg.scale, n_states=cfg.n_states)
    scfg = SamplerConfig(n_adapt=cfg.n_adapt, n_iter=cfg.n_iter, n_chains=cfg.n_chains, seed=cfg.seed,
                         thin=cfg.thin, proposal_scales=dict(cfg.proposal_scales),
                         check_identities=cfg.check_identities, progress_every=cfg.progress_every,
                         n_workers=cfg.n_workers)
    out = Path(cfg.out or "run")
    out.mkdir(parents=True, exist_ok=True)
    snapshot = cfg.to_dict()
    snapshot.update(data=str(data_path.resolve()), M=M, data_sha256=checksum, k1=data.k1, k2=list(data.k2))
    handler = _run_logger(out / "run.log")
    try:
        log.info("cdlcr %s: %d observed individuals, k1=%d, k2=%s, M=%d", __version__, data.n, data.k1,
                 list(data.k2), M)
        draws = run(data, spec, scfg, Priors(**cfg.priors))
        if cfg.covariate == "mass":
            snapshot.update(loc=draws.meta["loc"], scale=draws.meta["scale"])
        snapshot["version"] = __version__
        (out / "config.json").write_text(json.dumps(snapshot, indent=2, sort_keys=True) + "\n")
        (out / "data.sha256").write_text(f"{checksum}  {data_path.name}\n")
        (out / "meta.json").write_text(json.dumps(draws.meta, indent=2, sort_keys=True) + "\n")
        for c, (chain, res) in enumerate(zip(draws.chains, draws.results)):
            write_draws(out / f"draws_chain{c + 1}.csv", draws.columns, chain)
            rates = " ".join(f"{k}={v:.3f}" for k, v in sorted(res.acceptance.items()))
            log.info("chain %d: %d draws in %.1f s; acceptance %s", c + 1, len(chain), res.seconds, rates)
            if cfg.check_identities:
                log.info("chain %d: %d identity violations", c + 1, res.violations)
        at_limit = float(np.mean(draws.column("N_total") >= M))
        if at_limit > 0.01:
            log.warning("N_total reached M=%d in %.1f%% of draws; refit with a larger --M", M, 100 * at_limit)
        rows = summarize(draws)
        write_summary(out / "summary.csv", rows)
        if draws.n_chains < 2:
            log.warning("single chain: psrf not available (reported as NA)")
        else:
            worst = max((r.psrf for r in rows if not math.isnan(r.psrf)), default=1.0)
            log.info("largest psrf %.4f", worst)
    finally:
        log.removeHandler(handler)
        handler.close()
    return out


def load_run(run_dir) -> PosteriorDraws:
    run_dir = Path(run_dir)
    files = sorted(run_dir.glob("draws_chain*.csv"), key=lambda p: int(p.stem.removeprefix("draws_chain")))
    if not files:
        raise DiagnosticsError(f"{run_dir}: no draw files")
    columns, chains = None, []
    for f in files:
        cols, arr = read_draws(f)
        if columns is not None and cols != columns:
            raise DiagnosticsError(f"{f}: columns differ between chains")
        columns = cols
        chains.append(arr)
    meta_path = run_dir / "meta.json"
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    return PosteriorDraws(columns=columns, chains=chains, meta=meta)


# -- export -----------------------------------------------------------------

EXPORT_COLUMNS = ("quantity", "index", "median", "lo50", "hi50", "lo95", "hi95")
_ALIASES = {"N_j": "N", "Delta_bar": "mean_lifetime", "lifetime": "mean_lifetime"}


def _quantity_labels(quantity: str, columns) -> list[str]:
    quantity = _ALIASES.get(quantity, quantity)
    if quantity == "N_by_state":
        labels = [c for c in columns if c.startswith("N_s")]
        if not labels:
            raise DiagnosticsError("N_by_state needs a fit with a categorical covariate")
        return labels
    if quantity == "scalars":
        return [c for c in columns if "[" not in c]
    groups = sorted({c.split("[")[0] for c in columns})
    try:
        return resolve_names([quantity], columns)
    except DiagnosticsError:
        raise DiagnosticsError(
            f"unknown quantity {quantity!r}; choices: N_by_state, scalars, {', '.join(groups)}") from None


def _split_label(label: str):
    if "[" not in label:
        return label, ""
    base, idx = label[:-1].split("[", 1)
    return base, idx


def export_plot_data(run_dir, quantity: str, out=None, plot: bool = True) -> Path:
    """Tidy interval table for one quantity, plus a PNG next to it.

    Medians and intervals are per-quantity marginals, so for example the
    exported medians of ``beta`` need not sum to one.
    """
    draws = load_run(run_dir)
    labels = _quantity_labels(quantity, draws.columns)
    rows = summarize(draws, labels)
    table = []
    for r in rows:
        base, idx = _split_label(r.name)
        table.append({"quantity": base, "index": idx, "median": r.median, "lo50": r.q25, "hi50": r.q75,
                      "lo95": r.q2_5, "hi95": r.q97_5})
    out = Path(out) if out else Path(run_dir) / f"export_{quantity}.csv"
    with out.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=EXPORT_COLUMNS, lineterminator="\n")
        w.writeheader()
        for row in table:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    if plot:
        from .plotting import plot_intervals

        numeric = [dict(r, index=int(r["index"]) if r["index"].isdigit() else 0) for r in table]
        if quantity == "scalars" or any(not r["index"].isdigit() for r in table):
            numeric = [dict(r, quantity=f"{r['quantity']}[{r['index']}]" if r["index"] else r["quantity"])
                       for r in numeric]
        plot_intervals(numeric, out.with_suffix(".png"), title=quantity)
    return out


# -- argument parsing ----------------------------------------------------------

def _add_run_flags(p: argparse.ArgumentParser):
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--data", help="capture CSV")
    p.add_argument("--out", help="output run directory")
    p.add_argument("--seed", type=int, help=f"random seed (overrides config and ${SEED_ENV})")
    p.add_argument("--chains", type=int)
    p.add_argument("--adapt", type=int, help="adaptation iterations per chain (discarded)")
    p.add_argument("--iter", type=int, help="recorded iterations per chain (before thinning)")
    p.add_argument("--thin", type=int)
    p.add_argument("--model", choices=["standard", "robust"])
    p.add_argument("--covariate", choices=["none", "mass", "categorical"])
    p.add_argument("--M", type=int, help="size of the augmented list (default 2 x observed)")
    p.add_argument("--scale-max", dest="scale_max", type=float, help="maximum scale reading for masses")
    p.add_argument("--no-censoring", action="store_true", help="treat recorded masses as exact")
    p.add_argument("--workers", type=int, help="processes used to run chains")
    p.add_argument("--progress", type=int, help="report every this many iterations")
    p.add_argument("--check-identities", action="store_true", help="verify derived identities on every draw")


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cdlcr", description="Bayesian open-population capture-recapture "
                                     "with individual time-varying covariates")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="simulate a vole-like or finch-like dataset")
    p.add_argument("--scenario", choices=["vole", "finch"], default="vole")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--M", type=int)
    p.add_argument("--scale-max", dest="scale_max", type=float)
    p.add_argument("--miss-rate", dest="miss_rate", type=float, help="fraction of states hidden (finch)")

    p = sub.add_parser("fit", help="fit a model and write a run directory")
    _add_run_flags(p)

    p = sub.add_parser("summarize", help="write summary.csv for a run")
    p.add_argument("run", help="run directory")
    p.add_argument("--names", nargs="*", help="labels or label groups to include")

    p = sub.add_parser("diag", help="report psrf for every scalar of a run")
    p.add_argument("run", help="run directory")
    p.add_argument("--threshold", type=float, default=1.1)

    p = sub.add_parser("export", help="export interval table and plot for one quantity")
    p.add_argument("run", help="run directory")
    p.add_argument("--quantity", required=True, help="e.g. N, N_by_state, beta, eta, scalars")
    p.add_argument("--out", help="CSV path (PNG written alongside)")
    p.add_argument("--no-plot", action="store_true")
    return parser


def _cmd_simulate(args) -> int:
    seed = resolve_seed(args.seed, None)
    scn = vole_scenario() if args.scenario == "vole" else finch_scenario()
    if args.scale_max is not None:
        scn.scale_max = args.scale_max
    if args.miss_rate is not None:
        scn.miss_rate = args.miss_rate
    if args.M is not None:
        scn.design = dataclasses.replace(scn.design, M=args.M)
    truth, data = generate_scenario(scn, seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_captures(data, out / "captures.csv")
    write_truth(truth, out / "truth.json")
    print(f"{data.n} individuals captured out of {int(truth.w.sum())}; wrote {out / 'captures.csv'}")
    return EXIT_OK


def _cmd_fit(args) -> int:
    cfg = build_config(args)
    out = fit(cfg)
    print(f"run written to {out}")
    return EXIT_OK


def _cmd_summarize(args) -> int:
    draws = load_run(args.run)
    rows = summarize(draws, args.names or None)
    path = write_summary(Path(args.run) / "summary.csv", rows)
    if draws.n_chains < 2:
        print("warning: psrf needs at least 2 chains; reported as NA", file=sys.stderr)
    print(f"summary of {len(rows)} quantities written to {path}")
    return EXIT_OK


def _cmd_diag(args) -> int:
    draws = load_run(args.run)
    if draws.n_chains < 2:
        print("error: psrf needs at least 2 chains; rerun fit with --chains 2 or more", file=sys.stderr)
        return EXIT_DIAG
    worst = 1.0
    for k, name in enumerate(draws.columns):
        r = psrf([c[:, k] for c in draws.chains])
        if math.isnan(r):
            continue
        worst = max(worst, r)
        flag = "  (not converged)" if r >= args.threshold else ""
        print(f"{name}\t{r:.4f}{flag}")
    print(f"max psrf {worst:.4f} over {draws.n_chains} chains")
    return EXIT_OK


def _cmd_export(args) -> int:
    out = export_plot_data(args.run, args.quantity, args.out, plot=not args.no_plot)
    print(f"wrote {out}")
    return EXIT_OK


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    args = make_parser().parse_args(argv)
    handlers = {"simulate": _cmd_simulate, "fit": _cmd_fit, "summarize": _cmd_summarize,
                "diag": _cmd_diag, "export": _cmd_export}
    try:
        return handlers[args.command](args)
    except (ConfigError, DataValidationError, StructuralError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except DiagnosticsError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIAG
    except SamplerError as exc:
        print(f"sampler failure: {exc}", file=sys.stderr)
        return EXIT_SAMPLER


if __name__ == "__main__":
    sys.exit(main())
