import csv
import json

import numpy as np
import pytest

from penlab.cli import ConfigError, main, resolve_config

BASE = {
    "model": {"sigma": 0.4, "r": 0.05},
    "payoff": {"name": "put", "params": {"K": 100}},
    "grid": {"N": 99, "M": 50, "S_max": 200},
    "solver": {"mode": "penalty", "epsilon": 1e-3},
}


def write(tmp_path, cfg, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return str(path)


def read_csv(path):
    with open(path) as fh:
        first = fh.readline()
        assert first.startswith("# config: ")
        return json.loads(first[len("# config: "):]), list(csv.reader(fh))


class TestConfig:
    def test_defaults_are_recorded(self):
        cfg = resolve_config(BASE, "converge")
        assert cfg["schema_version"] == 1
        assert cfg["grid"]["theta"] == 0.5
        assert cfg["solver"]["newton_tol"] == 1e-9
        assert cfg["converge"]["eps"] == [4e-4, 2e-4, 1e-4, 5e-5]
        assert cfg["converge"]["reference"]["mode"] == "lcp"

    @pytest.mark.parametrize("patch", [
        {"extra": 1},
        {"grid": {"N": 99, "dx": 1}},
        {"solver": {"mode": "penalty", "epsilon": 0}},
        {"solver": {"mode": "penalty", "epsilon": 1e-3, "speed": 2}},
        {"schema_version": 7},
        {"model": {"sigma": -1}},
        {"payoff": {"name": "put", "params": {"strike": 100}}},
        {"converge": {"eps": [1e-3, 1e-4, 1e-5]}},
        {"converge": {"eps": [1e-3, 1e-4, -1e-5, 1e-6]}},
        {"converge": {"reference": {"mode": "penalty", "epsilon": 1e-3}}},
    ])
    def test_rejected(self, patch):
        cfg = dict(BASE)
        cfg.update(patch)
        with pytest.raises(ConfigError):
            resolve_config(cfg, "converge")

    def test_resolution_is_idempotent(self):
        cfg = resolve_config(BASE, "price")
        raw = {k: v for k, v in cfg.items() if k != "command"}
        assert resolve_config(raw, "price") == cfg


class TestCommands:
    def test_price_outputs(self, tmp_path):
        out = tmp_path / "out"
        assert main(["price", "--config", write(tmp_path, BASE), "--out", str(out), "--quiet"]) == 0
        cfg, rows = read_csv(out / "surface.csv")
        assert rows[0] == ["t", "S", "value", "delta"]
        table = np.array(rows[1:], float)
        assert np.unique(table[:, 0]).size == 51
        assert table.shape[0] == 51 * 101
        assert cfg["solver"]["epsilon"] == 1e-3
        meta = json.loads((out / "metadata.json").read_text())
        assert meta["config"] == cfg

    def test_rerun_from_embedded_config_is_identical(self, tmp_path):
        out1, out2 = tmp_path / "a", tmp_path / "b"
        main(["price", "--config", write(tmp_path, BASE), "--out", str(out1), "--quiet"])
        cfg, _ = read_csv(out1 / "surface.csv")
        cfg.pop("command")
        main(["price", "--config", write(tmp_path, cfg, "again.json"), "--out", str(out2), "--quiet"])
        assert (out1 / "surface.csv").read_bytes() == (out2 / "surface.csv").read_bytes()

    def test_jump_metadata(self, tmp_path):
        cfg = dict(BASE, model={"sigma": 0.4, "r": 0.05, "lambda": 0.5,
                                "jump_density": {"kind": "lognormal", "mu_J": -0.02, "sigma_J": 0.2}})
        out = tmp_path / "out"
        assert main(["price", "--config", write(tmp_path, cfg), "--out", str(out), "--quiet"]) == 0
        meta = json.loads((out / "metadata.json").read_text())["meta"]
        assert "omega" in meta and "jump_truncation" in meta

    def test_config_error_exit_code(self, tmp_path):
        cfg = dict(BASE, solver={"mode": "penalty", "epsilon": -1.0})
        assert main(["price", "--config", write(tmp_path, cfg), "--out", str(tmp_path), "--quiet"]) == 1

    def test_missing_file_exit_code(self, tmp_path):
        assert main(["price", "--config", str(tmp_path / "nope.json"), "--quiet"]) == 1

    def test_solver_failure_exit_code(self, tmp_path):
        cfg = dict(BASE, solver={"mode": "penalty", "epsilon": 1e-8, "newton_max_iter": 1})
        assert main(["price", "--config", write(tmp_path, cfg), "--out", str(tmp_path), "--quiet"]) == 2

    def test_converge(self, tmp_path):
        cfg = dict(BASE, converge={"eps": [4e-3, 2e-3, 1e-3, 5e-4]})
        out = tmp_path / "out"
        assert main(["converge", "--config", write(tmp_path, cfg), "--out", str(out), "--quiet",
                     "--parallel"]) == 0
        _, rows = read_csv(out / "orders.csv")
        assert rows[0] == ["norm", "0.4", "0.9", "all"]
        assert [r[0] for r in rows[1:]] == ["value", "delta", "l2", "h1"]
        _, errs = read_csv(out / "errors.csv")
        assert len(errs) == 5

    def test_bounds(self, tmp_path):
        cfg = dict(BASE, bounds={"eps": [1e-3]})
        out = tmp_path / "out"
        assert main(["bounds", "--config", write(tmp_path, cfg), "--out", str(out), "--quiet"]) == 0
        report = json.loads((out / "bounds.json").read_text())["bounds"][0]
        assert report["holds"]
        _, rows = read_csv(out / "bounds_eps_0.001.csv")
        assert rows[0] == ["S", "payoff", "lower", "upper", "lcp"]

    def test_asymptotics(self, tmp_path):
        cfg = dict(BASE, asymptotics={"eps": [1e-3], "tau": [1.0]})
        out = tmp_path / "out"
        assert main(["asymptotics", "--config", write(tmp_path, cfg), "--out", str(out), "--quiet"]) == 0
        _, rows = read_csv(out / "asymptotics.csv")
        assert [r[2] for r in rows[1:]] == ["exercise_region", "hold_region_boundary", "exercise_boundary"]

    def test_extrapolate(self, tmp_path):
        cfg = dict(BASE, grid={"N": 63, "M": 32, "S_max": 200},
                   extrapolate={"N_finest": 255, "eps_finest": 1e-3, "levels": 3})
        out = tmp_path / "out"
        assert main(["extrapolate", "--config", write(tmp_path, cfg), "--out", str(out), "--quiet"]) == 0
        _, rows = read_csv(out / "extrapolation.csv")
        assert [r[:2] for r in rows[1:]] == [["penalty", "value"], ["penalty", "delta"],
                                             ["extrapolated", "value"], ["extrapolated", "delta"]]
