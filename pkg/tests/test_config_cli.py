from __future__ import annotations

import json

import numpy as np
import pytest

from fedvi import cli
from fedvi.cli import load_params, main, read_metrics, save_params
from fedvi.config import ConfigError, parse_config_text
from fedvi.model import init_params

from conftest import small_arch

MINIMAL = """
[run]
seed = 4
"""

SMALL_RUN = """
[data]
clients = 8
holdout = 2
n_min = 40
n_max = 60
input_dim = 5
num_classes = 3
sigma_beta = 1.0
input_shift_scale = 0.5

[arch]
embed_widths = 8,6
local_dim = 2
global_dim = 4
posterior_widths = 8,8

[train]
rounds = 4
cohort_size = 3
batch_size = 16
eval_every = 2
client_lr = 0.01

[bound]
slack_samples = 20
posterior_samples = 4
trials = 4

[run]
seed = 9
label = t
"""


class TestParseConfig:
    def test_minimal_file_gets_all_defaults(self):
        cfg = parse_config_text(MINIMAL)
        assert cfg.seed == 4
        assert cfg.train.rounds == 200
        assert cfg.train.algorithm == "fedvi"
        assert cfg.arch.support_fraction == 0.5
        assert cfg.gen is not None and cfg.gen.holdout_count == 8
        rendered = cfg.render()
        assert "client_lr = " in rendered and "scale_floor = " in rendered

    def test_unknown_key_names_key_and_line(self):
        text = "[train]\nrounds = 5\nwarmup = 3\n"
        with pytest.raises(ConfigError, match=r":3: unknown key 'train.warmup'"):
            parse_config_text(text)

    def test_type_error_names_key_and_line(self):
        text = "[train]\nrounds = soon\n"
        with pytest.raises(ConfigError, match=r":2: key 'train.rounds'"):
            parse_config_text(text)

    def test_unknown_section_rejected(self):
        with pytest.raises(ConfigError, match=r":1: unknown section"):
            parse_config_text("[optimizer]\nlr = 1\n")

    def test_duplicate_key_rejected(self):
        with pytest.raises(ConfigError, match="duplicate key"):
            parse_config_text("[train]\nrounds = 1\nrounds = 2\n")

    def test_cohort_larger_than_participants(self):
        text = "[data]\nclients = 10\nholdout = 4\n[train]\ncohort_size = 7\n"
        with pytest.raises(ConfigError, match="cohort_size = 7 exceeds"):
            parse_config_text(text)

    def test_reference_hyperparameters_round_trip(self):
        text = (
            "[data]\nclients = 3400\nholdout = 20\n"
            "[train]\ntau = 1e-9\nclient_lr = 0.02\nserver_lr = 3.0\n"
            "server_momentum = 0.9\nrounds = 1500\nbatch_size = 256\ncohort_size = 100\n"
        )
        cfg = parse_config_text(text)
        assert cfg.train.tau == 1e-9
        assert cfg.train.client_lr == 0.02
        assert cfg.train.server_lr == 3.0
        assert cfg.train.server_momentum == 0.9
        assert cfg.train.rounds == 1500
        assert cfg.train.batch_size == 256
        again = parse_config_text(cfg.render())
        assert again.values == cfg.values

    def test_render_parse_is_identity(self):
        cfg = parse_config_text(SMALL_RUN)
        again = parse_config_text(cfg.render())
        assert again.values == cfg.values

    def test_overrides_apply(self):
        cfg = parse_config_text(
            SMALL_RUN, seed_override=77, algorithm_override="fedavg", tau_override=0.5
        )
        assert cfg.seed == 77 and cfg.train.seed == 77
        assert cfg.train.algorithm == "fedavg"
        assert cfg.train.tau == 0.5

    def test_file_source_requires_path(self):
        with pytest.raises(ConfigError, match="data.path"):
            parse_config_text("[data]\nsource = file\n")


class TestParamsFile:
    def test_round_trip(self, tmp_path, rng):
        params = init_params(small_arch(), rng)
        path = tmp_path / "p.bin"
        save_params(params, path)
        loaded = load_params(path)
        assert loaded.arch == params.arch
        for a, b in zip(params.all_blocks(), loaded.all_blocks()):
            assert a.name == b.name
            assert np.array_equal(a.value.array, b.value.array)

    def test_truncation_detected(self, tmp_path, rng):
        params = init_params(small_arch(), rng)
        path = tmp_path / "p.bin"
        save_params(params, path)
        blob = path.read_bytes()
        path.write_bytes(blob[:-20])
        with pytest.raises(cli.ParamsFormatError):
            load_params(path)

    def test_version_bump_detected(self, tmp_path, rng):
        params = init_params(small_arch(), rng)
        path = tmp_path / "p.bin"
        save_params(params, path)
        blob = bytearray(path.read_bytes())
        blob[4] = 42  # version word follows the 4-byte magic
        path.write_bytes(bytes(blob))
        with pytest.raises(cli.ParamsFormatError, match="version"):
            load_params(path)

    def test_bad_magic_detected(self, tmp_path):
        path = tmp_path / "junk.bin"
        path.write_bytes(b"XXXX" + b"\x00" * 32)
        with pytest.raises(cli.ParamsFormatError, match="magic"):
            load_params(path)


def write_cfg(tmp_path, text=SMALL_RUN):
    path = tmp_path / "exp.cfg"
    path.write_text(text, encoding="utf-8")
    return str(path)


class TestCliCommands:
    def test_generate_then_train_then_eval(self, tmp_path, capsys):
        cfg = write_cfg(tmp_path)
        out = str(tmp_path / "run")
        assert main(["generate", "--config", cfg, "--out", out]) == 0
        assert main(["train", "--config", cfg, "--out", out]) == 0
        assert (
            main(
                [
                    "eval",
                    "--config",
                    cfg,
                    "--out",
                    out,
                    "--params",
                    str(tmp_path / "run" / "params.bin"),
                ]
            )
            == 0
        )
        summary = json.loads((tmp_path / "run" / "summary.json").read_text())
        assert summary["rounds"] == 4
        rows = read_metrics(tmp_path / "run" / "metrics.csv")
        assert [r["round"] for r in rows] == [2, 4]

    def test_train_twice_is_byte_identical(self, tmp_path):
        cfg = write_cfg(tmp_path)
        out1, out2 = str(tmp_path / "a"), str(tmp_path / "b")
        assert main(["train", "--config", cfg, "--out", out1]) == 0
        assert main(["train", "--config", cfg, "--out", out2]) == 0
        m1 = (tmp_path / "a" / "metrics.csv").read_bytes()
        m2 = (tmp_path / "b" / "metrics.csv").read_bytes()
        assert m1 == m2
        p1 = (tmp_path / "a" / "params.bin").read_bytes()
        p2 = (tmp_path / "b" / "params.bin").read_bytes()
        assert p1 == p2

    def test_zero_rounds_gives_header_only_metrics(self, tmp_path):
        text = SMALL_RUN.replace("rounds = 4", "rounds = 0")
        cfg = write_cfg(tmp_path, text)
        out = str(tmp_path / "run")
        assert main(["train", "--config", cfg, "--out", out]) == 0
        rows = read_metrics(tmp_path / "run" / "metrics.csv")
        assert rows == []
        summary = json.loads((tmp_path / "run" / "summary.json").read_text())
        assert summary["eval_rounds"] == 0

    def test_metrics_header_carries_resolved_config(self, tmp_path):
        cfg = write_cfg(tmp_path)
        out = str(tmp_path / "run")
        main(["train", "--config", cfg, "--out", out])
        text = (tmp_path / "run" / "metrics.csv").read_text()
        assert "# seed = 9" in text
        assert "# tau = 0.01" in text
        assert "round,loss,part_acc,nonpart_acc,kl_mean,timestamp" in text

    def test_unknown_schema_rejected_by_reader(self, tmp_path):
        bad = tmp_path / "m.csv"
        bad.write_text("round,loss,acc\n1,2,3\n")
        with pytest.raises(ValueError, match="unknown metrics schema"):
            read_metrics(bad)

    def test_ablate_single_zero_tau_gives_one_row(self, tmp_path):
        cfg = write_cfg(tmp_path)
        out = str(tmp_path / "run")
        assert main(["ablate", "--config", cfg, "--out", out, "--taus", "0"]) == 0
        lines = [
            line
            for line in (tmp_path / "run" / "ablation.csv").read_text().splitlines()
            if line and not line.startswith("#")
        ]
        assert len(lines) == 2  # header plus the single zero row
        assert lines[1].startswith("0.0,")

    def test_ablate_writes_sorted_table_with_zero(self, tmp_path):
        cfg = write_cfg(tmp_path)
        out = str(tmp_path / "run")
        assert main(
            ["ablate", "--config", cfg, "--out", out, "--taus", "1e-2,1e-4"]
        ) == 0
        lines = [
            line
            for line in (tmp_path / "run" / "ablation.csv").read_text().splitlines()
            if line and not line.startswith("#")
        ]
        assert lines[0] == "tau,part_acc,nonpart_acc,gap"
        taus = [float(line.split(",")[0]) for line in lines[1:]]
        assert taus == [0.0, 1e-4, 1e-2]

    def test_bound_reports_identity(self, tmp_path):
        cfg = write_cfg(tmp_path)
        out = str(tmp_path / "run")
        main(["train", "--config", cfg, "--out", out])
        assert (
            main(
                [
                    "bound",
                    "--config",
                    cfg,
                    "--out",
                    out,
                    "--params",
                    str(tmp_path / "run" / "params.bin"),
                ]
            )
            == 0
        )
        report = json.loads((tmp_path / "run" / "bound.json").read_text())
        lhs = report["rhs"]
        rhs = report["empirical_risk"] + (
            report["kl_local"]
            + np.log(1.0 / report["delta"])
            + report["slack_moment"]
        ) / report["eta"]
        assert abs(lhs - rhs) < 1e-10

    def test_seed_override_changes_outputs(self, tmp_path):
        cfg = write_cfg(tmp_path)
        out1, out2 = str(tmp_path / "a"), str(tmp_path / "b")
        main(["train", "--config", cfg, "--out", out1, "--seed", "1"])
        main(["train", "--config", cfg, "--out", out2, "--seed", "2"])
        assert (tmp_path / "a" / "metrics.csv").read_bytes() != (
            tmp_path / "b" / "metrics.csv"
        ).read_bytes()

    def test_data_seed_pins_dataset_across_run_seeds(self, tmp_path):
        from fedvi.datagen import generate_hierarchical

        text = SMALL_RUN.replace("sigma_beta = 1.0", "sigma_beta = 1.0\ndata_seed = 123")
        cfg1 = parse_config_text(text, seed_override=1)
        cfg2 = parse_config_text(text, seed_override=2)
        ds1, _ = generate_hierarchical(cfg1.gen)
        ds2, _ = generate_hierarchical(cfg2.gen)
        assert ds1 == ds2
        assert cfg1.train.seed != cfg2.train.seed


class TestExitCodes:
    def test_config_error(self, tmp_path):
        bad = tmp_path / "bad.cfg"
        bad.write_text("[train]\nrounds = soon\n")
        assert main(["train", "--config", str(bad)]) == cli.EXIT_CONFIG

    def test_io_error_missing_dataset(self, tmp_path):
        text = "[data]\nsource = file\npath = /nonexistent/ds.bin\n"
        cfg = tmp_path / "f.cfg"
        cfg.write_text(text)
        out = str(tmp_path / "run")
        assert main(["train", "--config", str(cfg), "--out", out]) == cli.EXIT_IO

    @pytest.mark.filterwarnings("ignore:overflow encountered")
    def test_numeric_failure(self, tmp_path):
        text = SMALL_RUN.replace("client_lr = 0.01", "client_lr = 50000.0")
        cfg = write_cfg(tmp_path, text)
        out = str(tmp_path / "run")
        assert main(["train", "--config", cfg, "--out", out]) == cli.EXIT_NUMERIC

    def test_missing_params_file(self, tmp_path):
        cfg = write_cfg(tmp_path)
        out = str(tmp_path / "run")
        code = main(
            ["eval", "--config", cfg, "--out", out, "--params", "/nonexistent.bin"]
        )
        assert code == cli.EXIT_IO

    def test_bound_requires_generator(self, tmp_path):
        text = "[data]\nsource = file\npath = whatever.bin\n"
        cfg = tmp_path / "f.cfg"
        cfg.write_text(text)
        code = main(
            ["bound", "--config", str(cfg), "--out", str(tmp_path), "--params", "x.bin"]
        )
        assert code == cli.EXIT_CONFIG
