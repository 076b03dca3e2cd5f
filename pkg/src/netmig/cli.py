"""Command-line interface.

Every subcommand reads one JSON run configuration, writes CSV artifacts under
the output directory and stamps them in ``manifest_<command>.json`` with the
config hash and master seed.
"""
import argparse
import hashlib
import json
import logging
import os
from pathlib import Path
import sys
from typing import Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
import pydantic

from . import data_io
from .choice import ModelSpec, build_choice_sets, fit_logit, gravity_curve, gravity_decomposition
from .choice.gravity import moving_costs, mwtp_distance, mwtp_wages
from .equilibrium import SCENARIOS, EquilibriumParams, make_economy, run_scenarios, solve_equilibrium
from .exceptions import (CollinearityError, EquilibriumError, EstimationError, NetmigError,
                         SeparationError, ValidationError)
from .geo import transition_matrix, wage_quartiles
from .instruments import (WAGE_MODES, amenities_from_survey, bartik, classify_shocks,
                          control_function_fit, destination_weights, first_stage, instrument_rows,
                          wage_elasticity_two_step)
from .simulate import DgpConfig, simulate
from .utility import ParameterSet

log = logging.getLogger("netmig")

OUTPUT_ENV = "NETMIG_OUTPUT_DIR"
EXIT_OK, EXIT_OTHER, EXIT_CONFIG, EXIT_ESTIMATION, EXIT_EQUILIBRIUM = 0, 1, 2, 3, 4
TABLE_SPECS = ("no_fe", "dest_fe", "dest_year_fe", "bct", "drought_iv", "heat_iv", "survey")
EXIT_TABLE = """exit codes:
  0  success
  1  unexpected error
  2  invalid configuration or input data (schema, missing file)
  3  estimation failure (non-convergence, separation, collinearity)
  4  equilibrium failure (non-convergence)"""

DATA_FILES = {"cities": "cities.csv", "locations": "locations.csv", "agents": "agents.csv",
              "networks": "networks.csv", "weather": "weather.csv", "industries": "industries.csv",
              "survey": "survey.csv", "city_covariates": "city_covariates.csv",
              "amenities": "amenities.csv"}


# --------------------------------------------------------------------------- #
# configuration
# --------------------------------------------------------------------------- #

class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class DataPaths(_Strict):
    cities: str
    locations: str
    agents: str
    networks: str
    weather: Optional[str] = None
    industries: Optional[str] = None
    survey: Optional[str] = None
    city_covariates: Optional[str] = None
    amenities: Optional[str] = None
    weather_window: Optional[tuple[int, int]] = None


class ParamOverrides(_Strict):
    wage_coef: Optional[float] = None
    network_coef: Optional[float] = None
    stay_bonus: Optional[float] = None
    log_distance_coef: Optional[float] = None
    out_of_state_coef: Optional[float] = None
    stay_network_coef: Optional[float] = None
    distance_network_coef: Optional[float] = None
    out_of_state_network_coef: Optional[float] = None
    agglomeration: Optional[float] = None
    price_congestion: Optional[float] = None
    amenity_congestion: Optional[float] = None


class EstimateOptions(_Strict):
    specs: list[Literal[TABLE_SPECS]] = Field(default_factory=lambda: list(TABLE_SPECS))
    n_extra: Optional[int] = Field(default=10, ge=0)
    interactions: bool = False
    optimizer: Literal["newton", "bfgs"] = "newton"
    max_iter: int = Field(default=500, gt=0)
    separation: Literal["raise", "drop"] = "drop"


class InstrumentOptions(_Strict):
    shock_type: Literal["drought", "heat"] = "drought"
    form: Literal["simplified", "full"] = "simplified"
    lag: int = Field(default=2, ge=1)
    wage_modes: list[Literal[WAGE_MODES]] = Field(default_factory=lambda: list(WAGE_MODES))
    base_year: Optional[int] = None
    end_year: Optional[int] = None


class EquilibriumOptions(_Strict):
    damping: float = Field(default=0.5, gt=0, le=1)
    tol: float = Field(default=1e-8, gt=0)
    max_iter: int = Field(default=10_000, gt=0)
    labor_floor: float = Field(default=1.0, gt=0)
    top_share: float = Field(default=0.10, gt=0, le=1)
    scenarios: list[Literal[SCENARIOS]] = Field(default_factory=lambda: list(SCENARIOS))
    amenity_source: Literal["auto", "truth", "file", "estimated"] = "auto"


class ReportOptions(_Strict):
    friends_grid: list[float] = Field(default_factory=lambda: [0, 1, 2, 5, 10, 20, 50, 100, 200, 500])
    movers_only: bool = True


class RunConfig(_Strict):
    seed: int = 0
    output_dir: Optional[str] = None
    data: Optional[DataPaths] = None
    dgp: Optional[dict] = None
    params: ParamOverrides = ParamOverrides()
    estimate: EstimateOptions = EstimateOptions()
    instrument: InstrumentOptions = InstrumentOptions()
    equilibrium: EquilibriumOptions = EquilibriumOptions()
    report: ReportOptions = ReportOptions()
    n_survey: int = Field(default=2000, ge=0)

    @field_validator("dgp")
    @classmethod
    def _dgp_keys(cls, v):
        if v is None:
            return v
        if "seed" in v:
            raise ValueError("the dgp section takes its seed from the top-level 'seed'")
        DgpConfig.from_dict(v)
        return v

    @model_validator(mode="after")
    def _one_source(self):
        if (self.data is None) == (self.dgp is None):
            raise ValueError("exactly one of 'data' (input paths) or 'dgp' must be given")
        return self

    def dgp_config(self):
        return DgpConfig.from_dict({**self.dgp, "seed": self.seed})

    def parameter_set(self):
        kw = {k: v for k, v in self.params.model_dump().items() if v is not None}
        return ParameterSet().replace(**kw)

    def canonical(self):
        """Canonical JSON of everything that affects results (output dir excluded)."""
        d = self.model_dump(mode="json")
        d.pop("output_dir")
        return json.dumps(d, sort_keys=True, separators=(",", ":"))

    def digest(self):
        return hashlib.sha256(self.canonical().encode()).hexdigest()


def load_config(path, seed=None, output_dir=None):
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ValidationError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ValidationError(f"config is not valid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise ValidationError("config must be a JSON object")
    if seed is not None:
        raw["seed"] = seed
    if output_dir is not None:
        raw["output_dir"] = output_dir
    try:
        return RunConfig.model_validate(raw)
    except pydantic.ValidationError as exc:
        msg = "; ".join(f"{'.'.join(map(str, e['loc'])) or 'config'}: {e['msg']}" for e in exc.errors())
        raise ValidationError(f"invalid config: {msg}") from None


# --------------------------------------------------------------------------- #
# inputs and outputs
# --------------------------------------------------------------------------- #

class Inputs:
    """All tables of one run, simulated or loaded, plus the parameters."""

    def __init__(self, world, agents, networks, params, weather=None, industries=None, survey=None,
                 covariates=None, amenity=None, amenity_is_truth=False):
        self.world = world
        self.agents = agents
        self.networks = networks
        self.params = params
        self.weather = weather
        self.industries = industries
        self.survey = survey
        self.covariates = covariates
        self.amenity = amenity
        self.amenity_is_truth = amenity_is_truth

    def need(self, name):
        v = getattr(self, name)
        if v is None:
            raise ValidationError(f"this command needs the {name} table")
        return v


def _resolve(base, p):
    p = Path(p)
    return p if p.is_absolute() else base / p


def load_inputs(cfg, base_dir, n_jobs=1):
    params = cfg.parameter_set()
    if cfg.dgp is not None:
        d = simulate(cfg.dgp_config(), params=params, n_survey=cfg.n_survey, n_jobs=n_jobs)
        return Inputs(d.world, d.agents, d.networks, d.params, d.weather, d.industries, d.survey,
                      d.covariates, d.params.amenity, amenity_is_truth=True)
    paths = cfg.data
    p = lambda name: _resolve(base_dir, getattr(paths, name))
    world = data_io.load_world(p("cities"))
    agents = data_io.load_agent_panel(p("locations"), p("agents"), world)
    networks = data_io.load_network_panel(p("networks"), world, agents)
    opt = lambda name, fn, *a: fn(p(name), world, *a) if getattr(paths, name) else None
    weather = opt("weather", data_io.load_weather, paths.weather_window)
    amenity = opt("amenities", data_io.load_amenities)
    if amenity is not None:
        world = world.replace(amenity=amenity)
    return Inputs(world, agents, networks, params, weather, opt("industries", data_io.load_industries),
                  opt("survey", data_io.load_survey), opt("city_covariates", data_io.load_city_covariates),
                  amenity)


class Output:
    """Writes artifacts and keeps the manifest entries."""

    def __init__(self, root, cfg, command):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.cfg = cfg
        self.command = command
        self.files = {}

    def table(self, rel, columns):
        path = self.root / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        data_io.write_table(path, columns)
        self.files[str(Path(rel).as_posix())] = hashlib.sha256(path.read_bytes()).hexdigest()

    def finish(self):
        manifest = {"command": self.command, "config_sha256": self.cfg.digest(), "seed": self.cfg.seed,
                    "artifacts": dict(sorted(self.files.items())),
                    "config": json.loads(self.cfg.canonical())}
        name = f"manifest_{self.command}.json"
        (self.root / name).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


# --------------------------------------------------------------------------- #
# estimation helpers
# --------------------------------------------------------------------------- #

def choice_data(inputs, cfg):
    return build_choice_sets(inputs.agents, inputs.networks, inputs.world,
                             n_extra=cfg.estimate.n_extra, seed=cfg.seed)


def _fit_options(cfg):
    return {"optimizer": cfg.estimate.optimizer, "max_iter": cfg.estimate.max_iter}


def _dest_spec(cfg, interactions=False):
    return ModelSpec(fe="destination", interactions=interactions, separation=cfg.estimate.separation)


def survey_amenities(inputs, cfg):
    return amenities_from_survey(inputs.need("survey"), inputs.world, **_fit_options(cfg))


def first_stage_for(inputs, data, cfg, shock_type):
    shocks = classify_shocks(inputs.need("weather"), shock_type)
    rows = instrument_rows(data, inputs.networks, shocks, inputs.world, lag=cfg.instrument.lag)
    return first_stage(rows, form=cfg.instrument.form)


def fit_table_spec(name, inputs, data, cfg, cache):
    """Fit one of the named specifications of the estimate grid."""
    inter = cfg.estimate.interactions
    sep = cfg.estimate.separation
    opts = _fit_options(cfg)
    simple = {"no_fe": "none", "dest_fe": "destination", "dest_year_fe": "destination_year", "bct": "bct"}
    if name in simple:
        spec = ModelSpec(fe=simple[name], interactions=inter, separation=sep)
        return fit_logit(data, spec, inputs.world, inputs.covariates, **opts)
    if name in ("drought_iv", "heat_iv"):
        shock = name.split("_")[0]
        first = first_stage_for(inputs, data, cfg, shock)
        cache[f"first_stage_{shock}"] = first
        spec = ModelSpec(fe="destination", interactions=inter, control_function=True, separation=sep)
        return control_function_fit(first, spec, inputs.world, inputs.covariates, **opts)
    if name == "survey":
        if "survey" not in cache:
            cache["survey"] = survey_amenities(inputs, cfg)
        spec = ModelSpec(fe="none", interactions=inter, amenity_offset=cache["survey"].amenity,
                         wage_offset=inputs.params.wage_coef)
        return fit_logit(data, spec, inputs.world, inputs.covariates, **opts)
    raise ValidationError(f"unknown specification {name!r}")


def estimated_amenity(inputs, data, cfg):
    """Amenities implied by destination effects net of the wage term."""
    fit = fit_logit(data, _dest_spec(cfg), inputs.world, inputs.covariates, **_fit_options(cfg))
    xi = fit.destination_effects(inputs.world.ids)
    return np.nan_to_num(xi - inputs.params.wage_coef * np.log(inputs.world.wage), nan=0.0)


def equilibrium_amenity(inputs, cfg):
    src = cfg.equilibrium.amenity_source
    if src == "auto":
        src = "truth" if inputs.amenity_is_truth else ("file" if inputs.amenity is not None else "estimated")
    if src in ("truth", "file"):
        if inputs.amenity is None:
            raise ValidationError(f"amenity source {src!r} requested but no amenities are available")
        return inputs.amenity
    return estimated_amenity(inputs, choice_data(inputs, cfg), cfg)


def economy_for(inputs, cfg, n_jobs=1):
    amen = equilibrium_amenity(inputs, cfg)
    params = inputs.params.with_amenity(amen)
    EquilibriumParams.from_parameter_set(params)
    last = int(inputs.agents.years[-1])
    net_year = max(y for y in inputs.networks.years if y <= last)
    return make_economy(inputs.world, params, inputs.agents.residence[:, -1],
                        inputs.networks.dense(net_year), seed=cfg.seed,
                        agent_ids=inputs.agents.agent_ids, n_jobs=n_jobs,
                        labor_floor=cfg.equilibrium.labor_floor)


def _state_table(world, state):
    return {"city_id": world.ids, "L": state.labor, "Y": state.wage, "xiA": state.amenity,
            "A": state.A, "a": state.a}


# --------------------------------------------------------------------------- #
# subcommands
# --------------------------------------------------------------------------- #

def cmd_simulate(cfg, out, inputs, n_jobs):
    if cfg.dgp is None:
        raise ValidationError("simulate needs a 'dgp' section")
    r = out.root
    data_io.write_world(r / "cities.csv", inputs.world)
    data_io.write_agent_panel(r / "locations.csv", r / "agents.csv", inputs.agents)
    data_io.write_network_panel(r / "networks.csv", inputs.networks)
    data_io.write_weather(r / "weather.csv", inputs.weather)
    data_io.write_industries(r / "industries.csv", inputs.industries)
    data_io.write_survey(r / "survey.csv", inputs.survey)
    data_io.write_city_covariates(r / "city_covariates.csv", inputs.covariates)
    data_io.write_amenities(r / "amenities.csv", inputs.world, inputs.amenity)
    for f in DATA_FILES.values():
        out.files[f] = hashlib.sha256((r / f).read_bytes()).hexdigest()


def cmd_estimate(cfg, out, inputs, n_jobs):
    data = choice_data(inputs, cfg)
    cache = {}
    est = {k: [] for k in ("spec", "name", "coef", "se", "cluster_count")}
    mc = {k: [] for k in ("spec", "agent", "year", "city", "mc")}
    for name in cfg.estimate.specs:
        log.info("fitting %s", name)
        fit = fit_table_spec(name, inputs, data, cfg, cache)
        for k, nm in enumerate(fit.names):
            est["spec"].append(name)
            est["name"].append(nm)
            est["coef"].append(fit.coef[k])
            est["se"].append(fit.se[k])
            est["cluster_count"].append(fit.n_clusters)
        rows = moving_costs(fit)
        n = len(rows["mc"])
        mc["spec"] += [name] * n
        mc["agent"] += list(rows["agent_id"])
        mc["year"] += list(rows["year"])
        mc["city"] += list(rows["city_id"])
        mc["mc"] += list(rows["mc"])
    out.table("estimates.csv", est)
    out.table("moving_costs.csv", mc)


def cmd_instrument(cfg, out, inputs, n_jobs):
    data = choice_data(inputs, cfg)
    first = first_stage_for(inputs, data, cfg, cfg.instrument.shock_type)
    reg = first.regression
    out.table("first_stage.csv", {
        "shock_type": [cfg.instrument.shock_type] * len(reg.names), "form": [first.form] * len(reg.names),
        "name": list(reg.names), "coef": reg.coef, "se": reg.se,
        "tstat": [reg.tstat(n) for n in reg.names], "n": [reg.n] * len(reg.names),
        "cluster_count": [reg.n_clusters] * len(reg.names), "r2": [reg.r2] * len(reg.names),
        "dropped_obs": [first.rows.n_dropped_obs] * len(reg.names)})
    inds = inputs.need("industries")
    bv = bartik(inds, cfg.instrument.base_year, cfg.instrument.end_year)
    out.table("bartik.csv", {"district_id": bv.district_ids, "bartik_wage": bv.wage,
                             "bartik_labor": bv.labor})
    if inputs.survey is not None:
        am = survey_amenities(inputs, cfg)
        out.table("amenities.csv", {"city_id": am.city_ids, "amenity": am.amenity, "se": am.se})
    fit = fit_logit(data, _dest_spec(cfg), inputs.world, inputs.covariates, **_fit_options(cfg))
    xi = fit.destination_effects(inputs.world.ids)
    w = destination_weights(fit.design.data, len(inputs.world))
    rows = {k: [] for k in ("mode", "beta", "se", "first_stage_f", "n_cities", "mwtp_wages")}
    for mode in cfg.instrument.wage_modes:
        we = wage_elasticity_two_step(xi, inputs.world, bv, mode=mode, weights=w)
        rows["mode"].append(mode)
        rows["beta"].append(we.beta)
        rows["se"].append(we.se)
        rows["first_stage_f"].append(we.first_stage_f)
        rows["n_cities"].append(we.n_cities)
        rows["mwtp_wages"].append(mwtp_wages(fit["log_friends"], we.beta))
    out.table("wage_elasticity.csv", rows)


def cmd_equilibrium(cfg, out, inputs, n_jobs):
    eco = economy_for(inputs, cfg, n_jobs)
    e = cfg.equilibrium
    state = solve_equilibrium(eco, e.damping, e.tol, e.max_iter)
    out.table("equilibrium.csv", _state_table(inputs.world, state))
    out.table("equilibrium_diagnostics.csv", {
        "iterations": [state.iterations], "wage_residual": [state.wage_residual],
        "amenity_residual": [state.amenity_residual], "labor_total": [int(state.labor.sum())]})


def cmd_counterfactual(cfg, out, inputs, n_jobs):
    eco = economy_for(inputs, cfg, n_jobs)
    e = cfg.equilibrium
    res = run_scenarios(eco, tuple(e.scenarios), e.damping, e.tol, e.max_iter, e.top_share)
    for tag, (_, state, rep) in res.items():
        out.table(f"counterfactual/{tag}/equilibrium.csv", _state_table(inputs.world, state))
        cols = {"group": [], "metric": [], "baseline": [], "value": [], "multiple": []}
        for g, m, b, v, x in rep.rows:
            for k, val in zip(cols, (g, m, b, v, x)):
                cols[k].append(val)
        out.table(f"counterfactual/{tag}/report.csv", cols)


def cmd_report(cfg, out, inputs, n_jobs):
    q = wage_quartiles(inputs.world)
    years = [int(y) for y in inputs.agents.years]
    tm = {k: [] for k in ("year_from", "year_to", "quartile_from", "quartile_to", "probability", "row_mass")}
    for t0, t1 in zip(years[:-1], years[1:]):
        m = transition_matrix(inputs.agents, q, t0, t1)
        for r in range(4):
            for c in range(4):
                tm["year_from"].append(t0)
                tm["year_to"].append(t1)
                tm["quartile_from"].append(r + 1)
                tm["quartile_to"].append(c + 1)
                tm["probability"].append(m.matrix[r, c])
                tm["row_mass"].append(int(m.counts[r].sum()))
    out.table("transition_matrix.csv", tm)

    data = choice_data(inputs, cfg)
    opts = _fit_options(cfg)
    mw = {k: [] for k in ("spec", "network_coef", "mwtp_distance", "mwtp_wages")}
    for name, spec in (("dest_fe", _dest_spec(cfg)),
                       ("dest_fe_interactions", _dest_spec(cfg, interactions=True))):
        fit = fit_logit(data, spec, inputs.world, inputs.covariates, **opts)
        mw["spec"].append(name)
        mw["network_coef"].append(fit["log_friends"])
        mw["mwtp_distance"].append(mwtp_distance(fit, movers_only=cfg.report.movers_only))
        mw["mwtp_wages"].append(mwtp_wages(fit["log_friends"], inputs.params.wage_coef))
    out.table("mwtp.csv", mw)

    dec = gravity_decomposition(fit)
    terms = ("fixed", "log_distance", "out_of_state")
    out.table("gravity_decomposition.csv", {
        "term": list(terms), "full": [dec.full[t] for t in terms],
        "no_interaction": [dec.no_interaction[t] for t in terms],
        "no_network": [dec.no_network[t] for t in terms],
        "reduction_full": [dec.reduction_full[t] for t in terms],
        "reduction_no_interaction": [dec.reduction_no_interaction[t] for t in terms]})
    curve = gravity_curve(fit, dec, cfg.report.friends_grid, inputs.params.wage_coef)
    out.table("gravity_curve.csv", curve)


COMMANDS = {"simulate": cmd_simulate, "estimate": cmd_estimate, "instrument": cmd_instrument,
            "equilibrium": cmd_equilibrium, "counterfactual": cmd_counterfactual, "report": cmd_report}


# --------------------------------------------------------------------------- #
# entry point
# --------------------------------------------------------------------------- #

def build_parser():
    p = argparse.ArgumentParser(prog="netmig", description=__doc__.splitlines()[0],
                                epilog=EXIT_TABLE + f"\n\nThe default output directory is read from ${OUTPUT_ENV}.",
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True)
    helps = {"simulate": "write a synthetic CSV bundle",
             "estimate": "fit the specification grid (estimates.csv, moving_costs.csv)",
             "instrument": "first stage, shift-share and survey amenities",
             "equilibrium": "solve the calibrated baseline equilibrium",
             "counterfactual": "solve counterfactual scenarios and report multiples",
             "report": "transition matrices, willingness-to-pay and gravity decomposition"}
    for name, h in helps.items():
        s = sub.add_parser(name, help=h, epilog=EXIT_TABLE, formatter_class=argparse.RawDescriptionHelpFormatter)
        s.add_argument("config", help="JSON run configuration")
        s.add_argument("--output-dir", help="overrides output_dir of the config")
        s.add_argument("--seed", type=int, help="overrides the master seed")
        s.add_argument("--threads", type=int, default=1, help="cap on worker threads (results do not depend on it)")
        s.add_argument("-v", "--verbose", action="store_true")
    return p


def _fail(code, kind, exc):
    msg = " ".join(str(exc).split())
    sys.stderr.write(json.dumps({"error": kind, "exit_code": code, "message": msg}) + "\n")
    return code


def run(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        if args.threads < 1:
            raise ValidationError("--threads must be >= 1")
        cfg = load_config(args.config, seed=args.seed, output_dir=args.output_dir)
        root = cfg.output_dir or os.environ.get(OUTPUT_ENV)
        if not root:
            raise ValidationError(f"no output directory: set output_dir, --output-dir or ${OUTPUT_ENV}")
        if args.command == "simulate" and cfg.dgp is None:
            raise ValidationError("simulate needs a 'dgp' section")
        inputs = load_inputs(cfg, Path(args.config).resolve().parent, args.threads)
        out = Output(root, cfg, args.command)
        COMMANDS[args.command](cfg, out, inputs, args.threads)
        out.finish()
    except (EstimationError, SeparationError, CollinearityError) as exc:
        return _fail(EXIT_ESTIMATION, "estimation", exc)
    except EquilibriumError as exc:
        return _fail(EXIT_EQUILIBRIUM, "equilibrium", exc)
    except (ValidationError, FileNotFoundError) as exc:
        return _fail(EXIT_CONFIG, "config", exc)
    except NetmigError as exc:
        return _fail(EXIT_OTHER, "error", exc)
    except Exception as exc:  # noqa: BLE001 - the CLI reports every failure as one line
        return _fail(EXIT_OTHER, type(exc).__name__, exc)
    return EXIT_OK


def main(argv=None):
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
