import json
import struct
from pathlib import Path

import numpy as np
import pytest

from stochcl.checkpoint import MAGIC, Checkpoint, CheckpointError
from stochcl.cli import dumps, main, run_experiment
from stochcl.config import ConfigError, ExperimentConfig, config_diff, parse_text

CONFIGS = Path(__file__).resolve().parent.parent / "configs"

SIMULATE = """\
# stochastic Burgers
schema_version = 1
experiment = simulate
model_name = burgers
grid.dim = 1
grid.cells = 64
solver.max_speed_estimate = 3.0
noise.modes = [[1, 0.3], [2, 0.2, "sin"]]
noise.seed = 7
initial.u0.modes = [[1, 0.8, "sin"]]
horizon.t_end = 0.5
output.checkpoint_every = 100
"""


def config(text=SIMULATE, **overrides):
    flat = parse_text(text)
    flat.update(overrides)
    return ExperimentConfig.from_text("".join(f"{k} = {json.dumps(v)}\n" for k, v in flat.items()))


def results(out):
    return (Path(out) / "results.json").read_text()


class TestConfig:
    def test_round_trip(self):
        cfg = config()
        again = ExperimentConfig.from_text(cfg.to_text())
        assert again == cfg
        assert again.to_text() == cfg.to_text()
        assert again.hash() == cfg.hash()

    def test_comments_and_whitespace_do_not_change_hash(self):
        spaced = SIMULATE.replace(" = ", "   =   ") + "\n# trailing comment\n"
        assert ExperimentConfig.from_text(spaced).hash() == config().hash()

    def test_hash_sensitive_to_settings(self):
        assert config(**{"noise.seed": 8}).hash() != config().hash()

    def test_hash_in_quoted_string(self):
        flat = parse_text('name = "a # b"  # comment')
        assert flat == {"name": "a # b"}

    def test_bare_strings(self):
        assert parse_text("experiment = simulate")["experiment"] == "simulate"

    def test_builders(self):
        cfg = config()
        grid = cfg.build_grid()
        u0 = cfg.build_field(grid)
        np.testing.assert_allclose(u0.values, 0.8 * np.sin(2 * np.pi * grid.coordinates()[0]), atol=1e-15)
        assert cfg.build_solver().max_speed_estimate == 3.0
        assert cfg.build_noise(grid).sup_norm > 0

    def test_inline_model(self):
        cfg = config(model_name="inline", **{"model.flux": [[0, 0, 0.5]], "model.diffusion": [[0.01]]})
        model = cfg.build_model()
        assert model.has_diffusion
        np.testing.assert_allclose(model.flux(np.array([2.0]))[0], [2.0])

    def test_inline_diffusion_must_be_nonnegative(self):
        with pytest.raises(ConfigError, match="nonnegative"):
            config(model_name="inline", **{"model.flux": [[0, 1]], "model.diffusion": [[0, 1]]})

    @pytest.mark.parametrize(
        "override,message",
        [
            ({"model_name": "burgerz"}, "valid keys"),
            ({"experiment": "simulat"}, "valid keys"),
            ({"schema_version": 2}, "schema_version"),
            ({"grid.cellz": 3}, "unknown grid key"),
            ({"solver.cfl": 2.0}, "cfl"),
            ({"horizon.t_end": -1}, "positive"),
            ({"grid.dim": 2}, "dimension"),
            ({"noise.modes": [[0, 1.0]]}, "zero-frequency"),
            ({"params.kappa": 1}, "params"),
            ({"noise.seed": 1.5}, "integer"),
        ],
    )
    def test_validation_errors(self, override, message):
        with pytest.raises(ConfigError, match=message):
            config(**override)

    def test_seed_is_mandatory(self):
        with pytest.raises(ConfigError, match="noise.seed"):
            ExperimentConfig.from_text(SIMULATE.replace("noise.seed = 7\n", ""))

    def test_duplicate_and_malformed_lines(self):
        with pytest.raises(ConfigError, match="duplicate"):
            ExperimentConfig.from_text(SIMULATE + "noise.seed = 8\n")
        with pytest.raises(ConfigError, match="key = value"):
            ExperimentConfig.from_text(SIMULATE + "oops\n")

    def test_couple_needs_second_datum(self):
        text = (CONFIGS / "couple_burgers.cfg").read_text()
        with pytest.raises(ConfigError, match="v0"):
            ExperimentConfig.from_text("\n".join(l for l in text.splitlines() if not l.startswith("initial.v0")))

    def test_diff_lists_changed_keys(self):
        diff = config_diff(config().to_text(), config(**{"noise.seed": 9}).to_text())
        assert diff == ["noise.seed: 7 -> 9"]

    @pytest.mark.parametrize("path", sorted(CONFIGS.glob("*.cfg")), ids=lambda p: p.name)
    def test_shipped_configs_validate(self, path):
        ExperimentConfig.from_file(path)


class TestDumps:
    def test_sorted_keys_and_full_precision(self):
        text = dumps({"b": 0.1, "a": [1, True, None], "c": float("inf")})
        assert text == '{\n  "a": [1, true, null],\n  "b": 0.10000000000000001,\n  "c": "inf"\n}\n'
        assert json.loads(text)["b"] == 0.1


class TestCheckpoint:
    def make(self, text=None):
        return Checkpoint(b"\x01" * 32, 0.25, 12, np.arange(8.0).reshape(2, 4), 7, 12,
                          np.array([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]), text)

    @pytest.mark.parametrize("text", [None, "noise.seed = 7\n"])
    def test_round_trip(self, text, tmp_path):
        ck = self.make(text)
        ck.save(tmp_path / "c.bin")
        back = Checkpoint.load(tmp_path / "c.bin")
        np.testing.assert_array_equal(back.fields, ck.fields)
        np.testing.assert_array_equal(back.ledgers, ck.ledgers)
        assert (back.config_hash, back.time, back.step_count, back.seed, back.step_index, back.config_text) == (
            ck.config_hash, ck.time, ck.step_count, ck.seed, ck.step_index, text)

    def test_layout(self):
        data = self.make().to_bytes()
        assert data[:8] == MAGIC
        assert struct.unpack_from("<I", data, 8)[0] == 1
        assert struct.unpack_from("<d", data, 44)[0] == 0.25
        assert len(data) == 8 + 4 + 32 + 8 + 8 + 4 + 8 + 64 + 16 + 48

    def test_bad_magic(self):
        data = bytearray(self.make().to_bytes())
        data[0:8] = b"NOTACKPT"
        with pytest.raises(CheckpointError, match="magic"):
            Checkpoint.from_bytes(bytes(data))

    def test_truncated(self):
        with pytest.raises(CheckpointError, match="truncated"):
            Checkpoint.from_bytes(self.make().to_bytes()[:100])

    def test_unsupported_version(self):
        data = bytearray(self.make().to_bytes())
        data[8:12] = struct.pack("<I", 99)
        with pytest.raises(CheckpointError, match="version"):
            Checkpoint.from_bytes(bytes(data))


class TestExperiments:
    def test_simulate_constant_without_noise(self, tmp_path):
        cfg = config(**{"noise.modes": [], "initial.u0.modes": [], "initial.u0.constant": 0.5})
        status, res = run_experiment(cfg, tmp_path)
        assert status == 0
        assert res["final"]["l1"] == res["initial"]["l1"] == 0.5
        for name in ("results.json", "metadata.json", "config.txt", "series.csv", "final_state.bin"):
            assert (tmp_path / name).exists()

    def test_couple_identical_data(self, tmp_path):
        text = (CONFIGS / "couple_burgers.cfg").read_text()
        cfg = config(text, **{"initial.v0.modes": [[1, 0.8, "sin"]]})
        status, res = run_experiment(cfg, tmp_path)
        assert status == 0
        assert res["final_gap"] == 0.0 and res["initial_gap"] == 0.0
        assert (tmp_path / "gap.csv").read_text().startswith("time,gap\n")

    def test_nondegeneracy_exponent(self, tmp_path):
        text = (CONFIGS / "nondegeneracy_burgers.cfg").read_text()
        cfg = ExperimentConfig.from_text("\n".join(l for l in text.splitlines() if "epsilons" not in l))
        status, _ = run_experiment(cfg, tmp_path)
        stored = json.loads(results(tmp_path))
        assert status == 0
        assert stored["eta"]["exponent"] == pytest.approx(0.25, abs=0.02)

    def test_averaging_and_kinetic_checks(self, tmp_path):
        status, res = run_experiment(ExperimentConfig.from_file(CONFIGS / "averaging_burgers.cfg"), tmp_path / "a")
        assert status == 0 and res["max_ratio"] > 0 and res["data"] == 8
        status, res = run_experiment(ExperimentConfig.from_file(CONFIGS / "kinetic_check_burgers.cfg"), tmp_path / "k")
        assert status == 0
        assert abs(res["terms"]["residual"]) < 1e-2
        assert res["l1_identity"]["error"] <= res["l1_identity"]["bound"]

    def test_kb_measure(self, tmp_path):
        status, res = run_experiment(ExperimentConfig.from_file(CONFIGS / "kb_measure_burgers.cfg"), tmp_path)
        assert status == 0
        assert set(res["observables"]) == {"l1", "sobolev"}
        assert res["observables"]["l1"]["q05"] <= res["observables"]["l1"]["median"] <= res["observables"]["l1"]["q95"]

    def test_numerical_abort_exit_status(self, tmp_path):
        status, res = run_experiment(config(**{"solver.max_speed_estimate": 0.5}), tmp_path)
        assert status == 3
        assert res["status"] == "numerical_abort"
        assert json.loads(results(tmp_path))["step"] == 0

    def test_invalid_parameters_exit_status(self, tmp_path):
        text = (CONFIGS / "averaging_burgers.cfg").read_text().replace("params.beta = 1.5", "params.beta = 2.5")
        status, res = run_experiment(ExperimentConfig.from_text(text), tmp_path)
        assert status == 2 and "beta" in res["error"]


class TestDeterminismAndResume:
    def test_repeat_runs_are_byte_identical(self, tmp_path):
        cfg = config()
        run_experiment(cfg, tmp_path / "a")
        run_experiment(cfg, tmp_path / "b")
        assert results(tmp_path / "a") == results(tmp_path / "b")
        assert (tmp_path / "a" / "final_state.bin").read_bytes() == (tmp_path / "b" / "final_state.bin").read_bytes()
        assert (tmp_path / "a" / "series.csv").read_bytes() == (tmp_path / "b" / "series.csv").read_bytes()

    @pytest.mark.parametrize("step", [0, 100, 200])
    def test_resume_matches_uninterrupted_run(self, tmp_path, step):
        cfg = config()
        run_experiment(cfg, tmp_path / "a")
        ck = tmp_path / "a" / f"checkpoint_{step:010d}.bin"
        status, _ = run_experiment(cfg, tmp_path / "b", resume=ck)
        assert status == 0
        assert results(tmp_path / "a") == results(tmp_path / "b")
        assert (tmp_path / "a" / "final_state.bin").read_bytes() == (tmp_path / "b" / "final_state.bin").read_bytes()

    def test_resume_refuses_other_config(self, tmp_path):
        run_experiment(config(), tmp_path / "a")
        status, res = run_experiment(config(**{"noise.seed": 8}), tmp_path / "b",
                                     resume=tmp_path / "a" / "checkpoint_0000000100.bin")
        assert status == 2
        assert "noise.seed: 7 -> 8" in res["error"]

    def test_resume_rejects_corrupted_checkpoint(self, tmp_path):
        bad = tmp_path / "bad.bin"
        bad.write_bytes(b"JUNKJUNK" + bytes(200))
        status, res = run_experiment(config(), tmp_path / "b", resume=bad)
        assert status == 2 and "magic" in res["error"]

    def test_resume_only_for_simulate(self, tmp_path):
        cfg = ExperimentConfig.from_file(CONFIGS / "couple_burgers.cfg")
        status, res = run_experiment(cfg, tmp_path, resume=tmp_path / "x.bin")
        assert status == 2 and "simulate" in res["error"]


class TestMain:
    def test_validate(self, capsys):
        assert main(["validate", str(CONFIGS / "simulate_burgers.cfg")]) == 0
        assert capsys.readouterr().out.startswith("ok ")

    def test_invalid_config_lists_valid_keys(self, tmp_path, capsys):
        path = tmp_path / "bad.cfg"
        path.write_text(SIMULATE.replace("burgers", "burgerz"))
        assert main(["validate", str(path)]) == 2
        err = capsys.readouterr().err
        assert "burgerz" in err and "'burgers'" in err

    def test_missing_file(self, tmp_path):
        assert main(["run", str(tmp_path / "none.cfg")]) == 2

    def test_catalog(self, capsys):
        assert main(["catalog"]) == 0
        out = capsys.readouterr().out
        assert "model burgers:" in out and "experiment kinetic_check" in out

    def test_run(self, tmp_path, capsys):
        assert main(["run", str(CONFIGS / "simulate_burgers.cfg"), "--out", str(tmp_path)]) == 0
        assert json.loads(results(tmp_path))["status"] == "ok"
