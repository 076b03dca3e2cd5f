import csv
import json
from pathlib import Path
import subprocess
import sys
import time

import numpy as np
import pytest

from netmig import data_io
from netmig.cli import EXIT_CONFIG, EXIT_EQUILIBRIUM, EXIT_ESTIMATION, TABLE_SPECS, RunConfig, load_config, run
from netmig.exceptions import ValidationError

DGP = {"n_cities": 12, "n_states": 3, "n_agents": 400, "n_years": 4}


def write_config(path, **kw):
    cfg = {"seed": 5, "dgp": DGP, "n_survey": 1000}
    cfg.update(kw)
    path.write_text(json.dumps(cfg))
    return path


def snapshot(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(Path(root).rglob("*")) if p.is_file()}


def read_csv(path):
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    return {k: [r[k] for r in rows] for k in rows[0]}


def last_error(capsys):
    err = capsys.readouterr().err.strip().splitlines()
    return json.loads(err[-1])


class TestConfig:
    def test_both_sources_rejected(self, tmp_path, capsys):
        cfg = write_config(tmp_path / "c.json", data={"cities": "a", "locations": "b", "agents": "c",
                                                      "networks": "d"})
        out = tmp_path / "out"
        assert run(["simulate", str(cfg), "--output-dir", str(out)]) == EXIT_CONFIG
        assert "exactly one" in last_error(capsys)["message"]
        assert not out.exists()

    def test_neither_source_rejected(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text("{}")
        with pytest.raises(ValidationError, match="exactly one"):
            load_config(p)

    @pytest.mark.parametrize("extra", [{"colour": 1}, {"estimate": {"n_extra": 10, "fe": "x"}},
                                       {"dgp": {**DGP, "n_town": 2}}])
    def test_unknown_keys(self, tmp_path, extra):
        with pytest.raises(ValidationError):
            load_config(write_config(tmp_path / "c.json", **extra))

    def test_dgp_seed_is_top_level(self, tmp_path):
        with pytest.raises(ValidationError, match="seed"):
            load_config(write_config(tmp_path / "c.json", dgp={**DGP, "seed": 3}))

    def test_flag_overrides_and_hash(self, tmp_path):
        p = write_config(tmp_path / "c.json")
        a = load_config(p)
        b = load_config(p, seed=9, output_dir="/elsewhere")
        assert b.seed == 9 and b.output_dir == "/elsewhere"
        assert a.digest() != b.digest()
        assert load_config(p, output_dir="/x").digest() == a.digest()
        assert a.dgp_config().seed == 5

    def test_defaults(self):
        c = RunConfig(dgp={})
        assert c.estimate.n_extra == 10
        assert tuple(c.estimate.specs) == TABLE_SPECS
        assert c.equilibrium.damping == 0.5

    def test_missing_config_file(self, tmp_path, capsys):
        assert run(["estimate", str(tmp_path / "nope.json"), "--output-dir", str(tmp_path)]) == EXIT_CONFIG
        e = last_error(capsys)
        assert e["exit_code"] == EXIT_CONFIG and e["error"] == "config"

    def test_no_output_dir(self, tmp_path, capsys, monkeypatch):
        monkeypatch.delenv("NETMIG_OUTPUT_DIR", raising=False)
        assert run(["simulate", str(write_config(tmp_path / "c.json"))]) == EXIT_CONFIG
        assert "output directory" in last_error(capsys)["message"]


@pytest.fixture(scope="module")
def bundle(tmp_path_factory):
    root = tmp_path_factory.mktemp("bundle")
    cfg = write_config(root / "sim.json")
    assert run(["simulate", str(cfg), "--output-dir", str(root / "data")]) == 0
    return root


class TestCommands:
    def test_simulate_bundle_loads(self, bundle):
        d = bundle / "data"
        world = data_io.load_world(d / "cities.csv")
        agents = data_io.load_agent_panel(d / "locations.csv", d / "agents.csv", world)
        assert len(world) == 12 and agents.n_agents == 400
        m = json.loads((d / "manifest_simulate.json").read_text())
        assert m["seed"] == 5 and len(m["config_sha256"]) == 64
        assert set(m["artifacts"]) >= {"cities.csv", "locations.csv", "networks.csv", "weather.csv"}

    def test_env_output_dir(self, tmp_path, monkeypatch):
        monkeypatch.setenv("NETMIG_OUTPUT_DIR", str(tmp_path / "env"))
        cfg = write_config(tmp_path / "c.json", estimate={"specs": ["dest_fe"]})
        assert run(["estimate", str(cfg)]) == 0
        assert (tmp_path / "env" / "estimates.csv").exists()

    def test_estimate_from_files(self, bundle, tmp_path):
        d = bundle / "data"
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"seed": 5, "data": {
            "cities": str(d / "cities.csv"), "locations": str(d / "locations.csv"),
            "agents": str(d / "agents.csv"), "networks": str(d / "networks.csv"),
            "weather": str(d / "weather.csv"), "survey": str(d / "survey.csv")},
            "estimate": {"specs": ["no_fe", "dest_fe", "bct", "drought_iv"]}}))
        assert run(["estimate", str(cfg), "--output-dir", str(tmp_path / "o")]) == 0
        est = read_csv(tmp_path / "o" / "estimates.csv")
        assert set(est["spec"]) == {"no_fe", "dest_fe", "bct", "drought_iv"}
        dest = {n: c for s, n, c in zip(est["spec"], est["name"], est["coef"]) if s == "dest_fe"}
        assert "log_friends" in dest
        m = json.loads((tmp_path / "o" / "manifest_estimate.json").read_text())
        assert set(m["artifacts"]) == {"estimates.csv", "moving_costs.csv"}

    def test_inputs_not_mutated(self, bundle, tmp_path):
        before = snapshot(bundle / "data")
        d = bundle / "data"
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"seed": 5, "data": {
            "cities": str(d / "cities.csv"), "locations": str(d / "locations.csv"),
            "agents": str(d / "agents.csv"), "networks": str(d / "networks.csv")},
            "equilibrium": {"amenity_source": "estimated"}}))
        assert run(["equilibrium", str(cfg), "--output-dir", str(tmp_path / "o")]) == 0
        assert snapshot(bundle / "data") == before

    def test_estimation_failure_exit_code(self, tmp_path, capsys):
        cfg = write_config(tmp_path / "c.json", estimate={"specs": ["dest_fe"], "max_iter": 1})
        assert run(["estimate", str(cfg), "--output-dir", str(tmp_path / "o")]) == EXIT_ESTIMATION
        e = last_error(capsys)
        assert e["error"] == "estimation"

    def test_equilibrium_failure_exit_code(self, tmp_path, capsys):
        # the calibrated baseline is a fixed point at once, so perturb it
        cfg = write_config(tmp_path / "c.json", equilibrium={"max_iter": 1, "scenarios": ["double_top_wages"]})
        assert run(["counterfactual", str(cfg), "--output-dir", str(tmp_path / "o")]) == EXIT_EQUILIBRIUM
        err = capsys.readouterr().err.strip()
        assert len(err.splitlines()) == 1
        assert json.loads(err)["exit_code"] == EXIT_EQUILIBRIUM

    def test_unstable_parameters_are_config_errors(self, tmp_path, capsys):
        cfg = write_config(tmp_path / "c.json", params={"agglomeration": 1.5})
        assert run(["equilibrium", str(cfg), "--output-dir", str(tmp_path / "o")]) == EXIT_CONFIG

    def test_counterfactual_layout(self, tmp_path):
        cfg = write_config(tmp_path / "c.json", equilibrium={"scenarios": ["baseline", "equal_networks"]})
        assert run(["counterfactual", str(cfg), "--output-dir", str(tmp_path / "o")]) == 0
        rep = read_csv(tmp_path / "o" / "counterfactual" / "equal_networks" / "report.csv")
        assert {"group", "metric", "baseline", "value", "multiple"} <= set(rep)
        base = read_csv(tmp_path / "o" / "counterfactual" / "baseline" / "report.csv")
        assert np.allclose(np.asarray(base["multiple"], dtype=float), 1.0)

    def test_help_lists_exit_codes(self):
        r = subprocess.run([sys.executable, "-m", "netmig.cli", "--help"], capture_output=True, text=True)
        assert r.returncode == 0
        for code in ("0  success", "2  invalid", "3  estimation", "4  equilibrium"):
            assert code in r.stdout
        assert "NETMIG_OUTPUT_DIR" in r.stdout


@pytest.mark.parametrize("command, extra", [
    ("simulate", {}),
    ("estimate", {"estimate": {"specs": ["dest_fe", "drought_iv", "survey"]}}),
    ("instrument", {}),
    ("equilibrium", {}),
    ("counterfactual", {"equilibrium": {"scenarios": ["baseline", "network_reallocation"]}}),
    ("report", {}),
])
def test_byte_identical_across_runs_and_threads(tmp_path, command, extra):
    cfg = write_config(tmp_path / "c.json", **extra)
    outs = []
    for k, threads in enumerate((1, 1, 3)):
        o = tmp_path / f"o{k}"
        assert run([command, str(cfg), "--output-dir", str(o), "--threads", str(threads)]) == 0
        outs.append(snapshot(o))
    assert outs[0] and outs[0] == outs[1] == outs[2]
    assert f"manifest_{command}.json" in outs[0]


def test_desk_scale_end_to_end(tmp_path):
    start = time.perf_counter()
    sim = tmp_path / "sim.json"
    sim.write_text(json.dumps({"seed": 1, "dgp": {}}))
    assert run(["simulate", str(sim), "--output-dir", str(tmp_path / "desk")]) == 0
    est = tmp_path / "est.json"
    names = ("cities", "locations", "agents", "networks", "weather", "survey", "city_covariates")
    est.write_text(json.dumps({"seed": 1, "data": {n: f"desk/{n}.csv" for n in names}}))
    assert run(["estimate", str(est), "--output-dir", str(tmp_path / "out")]) == 0
    assert time.perf_counter() - start < 300
    assert set(read_csv(tmp_path / "out" / "estimates.csv")["spec"]) == set(TABLE_SPECS)
