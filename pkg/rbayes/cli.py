"""Command-line workflows: simulate, fit, plan and diagnose.

Every command reads a `RunConfig` (built from flags, optionally layered on a
`--config` JSON file) and writes its results under `--out-dir`. Exit codes:
0 success, 1 finished with inference warnings, 2 user error.
"""

import argparse
import importlib
import logging
import math
import os
import re
from typing import Any, Optional, Sequence

import numpy as np
import pandas as pd
from pydantic import ValidationError
from scipy import stats

from . import design, freq
from .errors import ConfigError, FitError, InitializationError, RBayesError
from .model import centering_from_fit
from .models import build_model
from .protocol import Protocol
from .protocols import AVAILABLE_PROTOCOLS, make_protocol
from .qsim import average_gate_fidelity, build_noise, simulate_dataset
from .recorder import Recorder, read_chains, write_chains, write_frame, write_json
from .sampler import PosteriorChains, hmc_nuts, metropolis_hastings
from .structs import (
    BootstrapKind,
    Command,
    CostModel,
    FitMethod,
    ModelFamily,
    NoiseOrder,
    NoiseSpec,
    RunConfig,
)

# Bind the submodule explicitly: the package re-exports a function named
# `diagnostics`, which shadows the submodule attribute on `rbayes`.
diagnostics = importlib.import_module(".diagnostics", __package__)

logger = logging.getLogger()

EXIT_OK = 0
EXIT_WARNING = 1
EXIT_USER_ERROR = 2

DATASET_FILE = "dataset.jsonl"
ENVELOPE_GRID = 199
ENVELOPE_DRAWS = 1000
CELL_COLUMN = re.compile(r"^(\w+)\[(\d+),([^,\]]+)(?:,(\d+))?\]$")


def _csv_floats(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def _csv_ints(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v.strip()]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rbayes", description="Bayesian and frequentist analysis of RB+ experiments"
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="RunConfig JSON file; flags override its values")
    common.add_argument("--protocol", choices=sorted(AVAILABLE_PROTOCOLS), default=None)
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--out-dir", dest="out_dir", default=None)
    common.add_argument("--workers", type=int, default=None, help="worker cap, overrides RBAYES_THREADS")
    common.add_argument("--interleave", type=int, default=None, help="interleaved gate index (irb)")

    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", parents=[common], help="simulate an RB+ dataset")
    sim.add_argument("--noise", default=None, help="e.g. 'depolarizing:0.0002', 'dle:0.003,0.1,0.001,0.0015'")
    sim.add_argument("--noise-order", dest="noise_order", choices=[o.value for o in NoiseOrder], default=None)
    sim.add_argument("--lengths", type=_csv_ints, default=None, help="comma-separated sequence lengths")
    sim.add_argument("--sequences", type=int, default=None, help="random sequences I per (M, e)")
    sim.add_argument("--shots", type=int, default=None, help="shots N per sequence")
    sim.add_argument("--spam-effect", dest="spam_effect", type=float, default=None)
    sim.add_argument("--shuffle", action="store_true", default=None)
    sim.add_argument("--burn-in-gates", dest="burn_in_gates", type=int, default=None)
    sim.add_argument("--nv-rates", dest="nv_rates", type=_csv_floats, default=None, help="alpha,beta")
    sim.add_argument("--auto-mmax", dest="auto_mmax", action="store_true", default=None)

    fit = sub.add_parser("fit", parents=[common], help="fit a dataset")
    fit.add_argument("--input", default=None)
    fit.add_argument("--model", choices=[m.value for m in ModelFamily], default=None)
    fit.add_argument("--nv-family", dest="nv_family", choices=["beta", "cdpbm"], default=None)
    fit.add_argument("--method", choices=[m.value for m in FitMethod], default=None)
    fit.add_argument("--chains", type=int, default=None)
    fit.add_argument("--warmup", type=int, default=None)
    fit.add_argument("--draws", type=int, default=None)
    fit.add_argument("--alpha-levels", dest="alpha_levels", type=_csv_floats, default=None)
    fit.add_argument("--components", type=int, default=None, help="CDPBM truncation K")
    fit.add_argument("--latent", action="store_true", default=None)
    fit.add_argument("--prior-preset", dest="prior_preset", choices=["flat", "tighter", "pal"], default=None)
    fit.add_argument("--pal", type=_csv_floats, default=None, help="p0,z of the PAL prior")
    fit.add_argument(
        "--bootstrap-kind", dest="bootstrap_kind", choices=[k.value for k in BootstrapKind], default=None
    )
    fit.add_argument("--replicates", type=int, default=None)
    fit.add_argument("--center", action="store_true", default=None, help="center transforms on a WLSF fit")

    plan = sub.add_parser("plan", parents=[common], help="choose shots per sequence")
    plan.add_argument("--moment", type=int, choices=[1, 2], default=None)
    plan.add_argument("--qbar", type=float, default=None)
    plan.add_argument("--t", type=float, default=None)
    plan.add_argument("--t-pick", dest="t_pick", type=float, default=None)
    plan.add_argument("--t-flip", dest="t_flip", type=float, default=None)
    plan.add_argument("--n-max", dest="n_max", type=int, default=None)
    plan.add_argument("--budget", type=float, default=None)
    plan.add_argument("--tau", type=float, default=None)
    plan.add_argument("--lower", type=float, default=None)

    diag = sub.add_parser("diagnose", parents=[common], help="diagnose a chains file")
    diag.add_argument("--input", default=None)
    diag.add_argument("--alpha-levels", dest="alpha_levels", type=_csv_floats, default=None)
    return parser


SAMPLER_FLAGS = {"chains": "chains", "warmup": "warmup", "draws": "keep"}


def config_from_args(args: argparse.Namespace) -> RunConfig:
    base: dict[str, Any] = {}
    if args.config:
        try:
            with open(args.config, "r", encoding="utf-8") as f:
                base = RunConfig.model_validate_json(f.read()).model_dump()
        except OSError as e:
            raise ConfigError(f"cannot read config {args.config}: {e}") from e
    base["command"] = args.command
    given = {k: v for k, v in vars(args).items() if v is not None and k not in ("config", "command")}

    sampler = dict(base.get("sampler") or {})
    for flag, field in SAMPLER_FLAGS.items():
        if flag in given:
            sampler[field] = given.pop(flag)
    if "seed" in given:
        sampler["seed"] = given["seed"]
    base["sampler"] = sampler

    if "noise" in given or "noise_order" in given:
        current = NoiseSpec.model_validate(base.get("noise") or {})
        order = NoiseOrder(given.pop("noise_order", current.order))
        text = given.pop("noise", None)
        try:
            noise = NoiseSpec.parse(text, order) if text else current.model_copy(update={"order": order})
        except ValueError as e:
            raise ConfigError(str(e)) from e
        base["noise"] = noise.model_dump()
    if "pal" in given:
        if len(given["pal"]) != 2:
            raise ConfigError("--pal takes p0,z")
        given["pal"] = tuple(given["pal"])
    if "nv_rates" in given:
        if len(given["nv_rates"]) != 2:
            raise ConfigError("--nv-rates takes alpha,beta")
        given["nv_rates"] = tuple(given["nv_rates"])
    base.update(given)
    return RunConfig.model_validate(base)


def protocol_from_config(config: RunConfig) -> Protocol:
    options: dict[str, Any] = {}
    if config.protocol == "irb":
        options["interleave"] = config.interleave
    return make_protocol(config.protocol, **options)


def _out(config: RunConfig, name: str) -> str:
    return os.path.join(config.out_dir, name)


# simulate


def auto_lengths(protocol: Protocol, config: RunConfig) -> list[int]:
    """Lengths spread geometrically from 1 to ⌈1/(1 - F)⌉ with F the mean gate fidelity."""
    noise = build_noise(config.noise, protocol.gateset)
    d1 = getattr(protocol, "d1", None)
    F = float(
        np.mean([average_gate_fidelity(noise.channel(r), d1) for r in range(protocol.gateset.size)])
    )
    if F >= 1:
        raise ConfigError("--auto-mmax needs noise with average gate fidelity below 1")
    m_max = math.ceil(1 / (1 - F))
    lengths = np.unique(np.round(np.geomspace(1, m_max, num=len(config.lengths))).astype(int))
    logger.info(f"average gate fidelity {F:.6f}: lengths up to M_max={m_max}")
    return [int(m) for m in lengths]


def cmd_simulate(config: RunConfig) -> int:
    protocol = protocol_from_config(config)
    lengths = auto_lengths(protocol, config) if config.auto_mmax else config.lengths
    noise = build_noise(config.noise, protocol.gateset)
    records = simulate_dataset(
        protocol,
        noise,
        protocol.default_spam(config.spam_effect),
        lengths,
        config.sequences,
        config.shots,
        config.seed,
        shuffle=config.shuffle,
        burn_in_gates=config.burn_in_gates,
        nv_rates=config.nv_rates,
        workers=config.workers,
    )
    path = _out(config, DATASET_FILE)
    Recorder(path).write(records)
    write_json(_out(config, "run_config.json"), config)
    shots = sum(r.N or 0 for r in records)
    logger.info(f"simulated {len(records)} records ({shots} shots) for {protocol.name} into {path}")
    return EXIT_OK


# fit


def _load_records(config: RunConfig) -> list[Any]:
    path = config.input or _out(config, DATASET_FILE)
    records = Recorder(path).get()
    if not records:
        raise ConfigError(f"{path} holds no records")
    return records


def _fit_frequentist(config: RunConfig, protocol: Protocol, records: list[Any]) -> int:
    if config.method == FitMethod.WLSF:
        fit = freq.wlsf_fit(protocol, records)
        write_json(_out(config, "fit.json"), fit)
    elif config.method == FitMethod.MLE:
        fit = freq.mle_fit(protocol, records, seed=config.seed)
        write_json(_out(config, "fit.json"), fit)
    else:
        boot = freq.bootstrap(
            protocol,
            records,
            kind=config.bootstrap_kind,
            B=config.replicates,
            seed=config.seed,
            alpha_levels=config.alpha_levels,
            workers=config.workers,
        )
        fit = boot.point
        write_frame(_out(config, "bootstrap.csv"), boot.frame())
        write_json(_out(config, "bootstrap.json"), boot.model_dump(exclude={"estimates"}))
    for name, value in fit.params.items():
        se = fit.standard_errors.get(name, math.nan)
        logger.info(f"{config.method.value}: {name} = {value:.6g} (se {se:.2g})")
    return EXIT_WARNING if fit.boundary or not fit.converged else EXIT_OK


def _fit_bayesian(config: RunConfig, protocol: Protocol, records: list[Any]) -> int:
    try:
        priors = protocol.prior_preset(config.prior_preset, config.pal)
    except ValueError as e:
        raise ConfigError(str(e)) from e
    centering = None
    if config.center:
        try:
            centering = centering_from_fit(protocol, freq.wlsf_fit(protocol, records))
        except FitError as e:
            logger.warning(f"WLSF pre-fit failed, transforms stay uncentered: {e}")

    options: dict[str, Any] = {}
    cdpbm = config.model == ModelFamily.CDPBM or (
        config.model == ModelFamily.NV and config.nv_family == ModelFamily.CDPBM
    )
    if cdpbm:
        options.update(components=config.components, latent=config.latent)
    if config.model == ModelFamily.NV and config.nv_rates is not None:
        options["rates"] = config.nv_rates
    model = build_model(config.model, protocol, records, priors, centering, config.nv_family, **options)

    sample = hmc_nuts if config.method == FitMethod.NUTS else metropolis_hastings
    chains = sample(model, config=config.sampler, workers=config.workers)
    report = diagnostics.diagnostics(chains)
    rows = diagnostics.summarize(chains, config.alpha_levels, report=report)

    write_chains(_out(config, "chains.csv"), chains)
    write_json(_out(config, "diagnostics.json"), report)
    write_frame(_out(config, "summary.csv"), diagnostics.summary_frame(rows), index=True)
    write_json(_out(config, "summary.json"), {"rows": [r.model_dump() for r in rows]})
    write_json(_out(config, "run_config.json"), config)
    for row in rows:
        if row.name in model.param_names:
            bounds = ", ".join(f"p_{a:g}={v:.6g}" for a, v in row.lower_bounds.items())
            logger.info(f"{row.name}: mean {row.mean:.6g} sd {row.sd:.2g} {bounds}")
    if model.nonfinite_count:
        logger.warning(f"{model.nonfinite_count} non-finite density evaluations during sampling")
    return EXIT_WARNING if report.warnings else EXIT_OK


def cmd_fit(config: RunConfig) -> int:
    protocol = protocol_from_config(config)
    records = _load_records(config)
    if config.method.is_bayesian:
        return _fit_bayesian(config, protocol, records)
    return _fit_frequentist(config, protocol, records)


# plan


def cmd_plan(config: RunConfig) -> int:
    if config.moment == 1:
        try:
            cost = CostModel(t_pick=config.t_pick, t_flip=config.t_flip)
        except ValidationError as e:
            raise ConfigError(f"invalid cost model: {e}") from e
        curve = design.wcrb_curve(config.qbar, config.t, cost, config.n_max)
        n_opt = int(curve["N"].iloc[int(np.argmin(curve["wcrb"].to_numpy()))])
        write_frame(_out(config, "plan.csv"), curve)
        write_json(
            _out(config, "plan.json"),
            {
                "moment": 1,
                "n_opt": n_opt,
                "qbar": config.qbar,
                "t": config.t,
                "t_pick": config.t_pick,
                "t_flip": config.t_flip,
                "tau": cost.tau,
            },
        )
        logger.info(f"first-moment plan: N_opt={n_opt} (tau={cost.tau:g})")
        return EXIT_OK
    plan = design.optimal_N_second_moment(config.budget, config.tau, config.lower)
    write_frame(_out(config, "plan.csv"), plan.frame())
    write_json(_out(config, "plan.json"), plan.model_dump(exclude={"curve"}))
    return EXIT_OK


# diagnose


def _cell_columns(names: Sequence[str]) -> dict[tuple[int, str], dict[str, list[int]]]:
    """Column indices per (M, e) cell and quantity, components in order."""
    cells: dict[tuple[int, str], dict[str, list[int]]] = {}
    for k, name in enumerate(names):
        m = CELL_COLUMN.match(name)
        if m is None:
            continue
        qty, M, e = m.group(1), int(m.group(2)), m.group(3)
        cells.setdefault((M, e), {}).setdefault(qty, []).append(k)
    return cells


def _cell_densities(
    protocol: Optional[Protocol],
    cell: tuple[int, str],
    cols: dict[str, list[int]],
    rows: np.ndarray,
    names: Sequence[str],
    grid: np.ndarray,
) -> Optional[np.ndarray]:
    """Survival density of one cell on `grid` for every draw row, or None."""
    if {"w", "nu", "r"} <= set(cols):
        w, nu, r = (rows[:, cols[q]] for q in ("w", "nu", "r"))
        a = 1 / (r * (1 - nu)) - nu
        b = 1 / (r * nu) + nu - 1
        dens = stats.beta.pdf(grid[None, None, :], a[:, :, None], b[:, :, None])
        return np.asarray(np.sum(w[:, :, None] * dens, axis=1))
    if "t" not in cols:
        return None
    t = rows[:, cols["t"][0]]
    if "mu1" in cols:
        mu = rows[:, cols["mu1"][0]]
    elif protocol is not None:
        params = protocol.param_names
        index = {n: k for k, n in enumerate(names)}
        if not all(p in index for p in params):
            return None
        M, e = cell
        mu = np.array(
            [float(protocol.tying(1, M, e, {p: row[index[p]] for p in params})) for row in rows]
        )
    else:
        return None
    s = 1 / t - 1
    return np.asarray(stats.beta.pdf(grid[None, :], (mu * s)[:, None], ((1 - mu) * s)[:, None]))


def survival_envelopes(
    chains: PosteriorChains, protocol: Optional[Protocol] = None, seed: int = 0
) -> pd.DataFrame:
    """Posterior mean survival density per (M, e) with 2.5/97.5 % pointwise envelopes."""
    grid = (np.arange(ENVELOPE_GRID) + 1) / (ENVELOPE_GRID + 1)
    flat = chains.draws.reshape(-1, len(chains.names))
    if flat.shape[0] > ENVELOPE_DRAWS:
        pick = np.random.default_rng(seed).choice(flat.shape[0], ENVELOPE_DRAWS, replace=False)
        flat = flat[np.sort(pick)]
    frames = []
    for cell, cols in sorted(_cell_columns(chains.names).items()):
        dens = _cell_densities(protocol, cell, cols, flat, chains.names, grid)
        if dens is None:
            continue
        lo, hi = np.nanpercentile(dens, [2.5, 97.5], axis=0)
        frames.append(
            pd.DataFrame(
                {"M": cell[0], "e": cell[1], "q": grid, "mean": np.nanmean(dens, axis=0), "lo": lo, "hi": hi}
            )
        )
    if not frames:
        return pd.DataFrame(columns=["M", "e", "q", "mean", "lo", "hi"])
    return pd.concat(frames, ignore_index=True)


def cmd_diagnose(config: RunConfig) -> int:
    path = config.input or _out(config, "chains.csv")
    chains = read_chains(path)
    report = diagnostics.diagnostics(chains)
    write_json(_out(config, "diagnostics.json"), report)
    rows = diagnostics.summarize(chains, config.alpha_levels, report=report)
    write_frame(_out(config, "summary.csv"), diagnostics.summary_frame(rows), index=True)
    try:
        protocol: Optional[Protocol] = protocol_from_config(config)
    except RBayesError:
        protocol = None
    envelopes = survival_envelopes(chains, protocol, config.seed)
    if envelopes.empty:
        logger.info("no per-cell survival columns found; envelopes skipped")
    write_frame(_out(config, "survival_envelopes.csv"), envelopes)
    if report.max_rhat is not None:
        logger.info(f"max R-hat {report.max_rhat:.4f} over {len(report.params)} quantities")
    return EXIT_WARNING if report.warnings else EXIT_OK


COMMANDS = {
    Command.SIMULATE: cmd_simulate,
    Command.FIT: cmd_fit,
    Command.PLAN: cmd_plan,
    Command.DIAGNOSE: cmd_diagnose,
}


def run(argv: Optional[Sequence[str]] = None) -> int:
    """Parse `argv`, run the command and return its exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USER_ERROR if e.code else EXIT_OK
    try:
        config = config_from_args(args)
        os.makedirs(config.out_dir, exist_ok=True)
        return int(COMMANDS[config.command](config))
    except (ConfigError, ValidationError, FileNotFoundError) as e:
        logger.error(f"invalid configuration: {e}")
        return EXIT_USER_ERROR
    except (FitError, InitializationError) as e:
        logger.error(f"inference failed: {e}")
        return EXIT_WARNING
    except (RBayesError, ValueError) as e:
        logger.error(f"{type(e).__name__}: {e}")
        return EXIT_USER_ERROR
