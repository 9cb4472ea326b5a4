import json

import numpy as np
import pytest

from drillsim.cli import EXIT_CONFIG, EXIT_INFEASIBLE, EXIT_NUMERICAL, EXIT_OK, main
from drillsim.config import ConfigError, build_config, load_config, parse_signal, validate

SMALL = {
    "geometry": {"L": 20.0},
    "mesh": {"n_elem": 40},
    "reduction": {"flex_cutoff_hz": 60.0},
    "integrator": {"t_end": 0.02},
    "static": {"enabled": False},
}


def write(tmp_path, data, name="cfg.json"):
    path = tmp_path / name
    path.write_text(data if isinstance(data, str) else json.dumps(data, indent=2))
    return str(path)


def merged(**blocks):
    data = json.loads(json.dumps(SMALL))
    for key, val in blocks.items():
        data.setdefault(key, {}).update(val)
    return data


def read_header(path):
    return path.read_text().splitlines()[:3]


def read_table(path):
    lines = path.read_text().splitlines()
    return lines[:3], np.loadtxt(lines[3:], delimiter=",", ndmin=2)


class TestValidation:
    def test_empty_config_is_valid(self):
        assert validate({}) == []
        assert validate("") == []

    def test_inverted_radii_names_the_field(self):
        text = '{\n  "geometry": {\n    "R_int": 0.09,\n    "R_ext": 0.08\n  }\n}\n'
        problems = validate(text)
        assert len(problems) == 1
        assert "geometry.R_int" in problems[0] and "line 3" in problems[0]

    def test_out_of_range_dispersion(self):
        problems = validate({"stochastic": {"delta_alpha": 0.8}})
        assert len(problems) == 1 and "stochastic.delta_alpha" in problems[0]

    def test_violations_are_aggregated(self):
        problems = validate({"geometry": {"R_int": 0.09}, "stochastic": {"delta_alpha": 0.8},
                             "integrator": {"t_end": -1.0}, "nonsense": 1})
        assert len(problems) == 4

    def test_type_errors(self):
        with pytest.raises(ConfigError) as err:
            build_config({"mesh": {"n_elem": 2.5}, "switches": {"contact": "yes"}})
        assert len(err.value.violations) == 2

    def test_broken_json(self):
        problems = validate('{\n  "mesh": {\n    "n_elem": 10,\n  }\n}')
        assert problems and "line 4" in problems[0]

    def test_defaults_filled_in(self, tmp_path):
        cfg = load_config(write(tmp_path, {"operating": {"V0": 0.01}}), "simulate")
        assert cfg.model.operating.V0 == 0.01
        assert cfg["integrator"]["alpha"] == 0.015
        assert cfg.stochastic.delta_alpha == 0.005
        assert cfg.kind == "simulate"

    def test_digest_tracks_content(self):
        a, b = build_config({}), build_config({"seed": 3})
        assert a.digest() == build_config({}).digest()
        assert a.digest() != b.digest() and len(a.digest()) == 16

    @pytest.mark.parametrize("spec,parsed", [("bit_velocity", ("bit_velocity", None, None)),
                                             ("w_dot@50", ("w", 50.0, 1)),
                                             ("tx@12.5", ("tx", 12.5, 0))])
    def test_signals(self, spec, parsed):
        assert parse_signal(spec) == parsed

    @pytest.mark.parametrize("spec", ["q@1", "w@x", "speed"])
    def test_bad_signals(self, spec):
        with pytest.raises(ValueError):
            parse_signal(spec)


class TestCommandLine:
    def test_validate_ok(self, tmp_path, capsys):
        assert main(["validate", "-c", write(tmp_path, SMALL)]) == EXIT_OK
        assert "valid" in capsys.readouterr().out

    def test_validate_reports_each_error(self, tmp_path, capsys):
        data = {"geometry": {"R_int": 0.09}, "stochastic": {"delta_alpha": 0.8}}
        assert main(["validate", "-c", write(tmp_path, data)]) == EXIT_CONFIG
        err = capsys.readouterr().err
        assert err.count("config error") == 2

    def test_missing_config_file(self, tmp_path):
        assert main(["simulate", "-c", str(tmp_path / "none.json"), "-o", str(tmp_path)]) == EXIT_CONFIG

    def test_modal_nominal_size(self, tmp_path, capsys):
        assert main(["modal", "-o", str(tmp_path)]) == EXIT_OK
        summary = json.loads(capsys.readouterr().out)
        assert summary["n_red"] == 49
        header = read_header(tmp_path / "modes.csv")
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        assert header[0].startswith("# drillsim") and manifest["config_hash"] in header[0]
        assert header[1].startswith("# units:")
        assert "modes.csv" in manifest["artifacts"]

    def test_zero_loading_gives_zero_trajectory(self, tmp_path):
        cfg = merged(operating={"V0": 0.0, "Omega": 0.0}, material={"g": 0.0})
        assert main(["simulate", "-c", write(tmp_path, cfg), "-o", str(tmp_path)]) == EXIT_OK
        header, data = read_table(tmp_path / "trajectory.csv")
        cols = header[2].split(",")
        assert data.shape[0] > 10
        assert np.all(data[:, cols.index("t") + 1:] == 0)

    def test_simulate_writes_bit_load(self, tmp_path):
        assert main(["simulate", "-c", write(tmp_path, SMALL), "-o", str(tmp_path)]) == EXIT_OK
        header, data = read_table(tmp_path / "trajectory.csv")
        cols = header[2].split(",")
        assert data[:, cols.index("F_br")].min() < 0
        assert (tmp_path / "shocks.csv").exists()

    def test_mc_is_reproducible_across_workers(self, tmp_path):
        cfg = merged(mc={"n_s": 3}, stochastic={"delta_alpha": 0.1})
        path = write(tmp_path, cfg)
        a, b = tmp_path / "a", tmp_path / "b"
        assert main(["mc", "-c", path, "-o", str(a), "--seed", "4"]) == EXIT_OK
        assert main(["mc", "-c", path, "-o", str(b), "--seed", "4", "-j", "2"]) == EXIT_OK
        assert (a / "conv.csv").read_bytes() == (b / "conv.csv").read_bytes()
        assert (a / "realizations.csv").read_bytes() == (b / "realizations.csv").read_bytes()

    def test_infeasible_window(self, tmp_path):
        cfg = merged(window={"V0": [0.005, 0.005], "Omega": [6.0, 6.0], "n_V0": 1, "n_Omega": 1,
                             "uts": 1.0, "stress_stride": 4})
        assert main(["optimize", "-c", write(tmp_path, cfg), "-o", str(tmp_path)]) == EXIT_INFEASIBLE

    def test_numerical_failure(self, tmp_path, capsys):
        cfg = merged(integrator={"tol": 1e-300, "max_iter": 1})
        assert main(["simulate", "-c", write(tmp_path, cfg), "-o", str(tmp_path)]) == EXIT_NUMERICAL
        assert "simulat" in capsys.readouterr().err

    def test_bad_jobs(self, tmp_path):
        assert main(["modal", "-j", "0", "-o", str(tmp_path)]) == EXIT_CONFIG
