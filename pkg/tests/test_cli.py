"""CLI subcommands: synth, sample, verify, bounds, regret."""

import csv
import json

import numpy as np
import pytest

from lccnn.cli import (
    ConfigError,
    ExperimentConfig,
    config_hash,
    load_dataset_csv,
    main,
    synthesize,
)


def _write(path, obj):
    path.write_text(json.dumps(obj))
    return str(path)


SYNTH_SPEC = {
    "N": 40, "d": 3, "seed": 5,
    "g": {"kind": "teacher", "K": 1, "V": 1.0, "activation": {"kind": "tanh"}},
    "noise": {"kind": "none"},
}

SAMPLE_CONFIG = {
    "network": {"K": 1, "d": 2, "V": 1.0, "activation": {"kind": "tanh"}},
    "prior": {"kind": "continuous"},
    "data": {"synthetic": {"N": 4, "d": 2, "seed": 2,
                           "g": {"kind": "teacher", "K": 1, "V": 1.0,
                                 "activation": {"kind": "tanh"}},
                           "noise": {"kind": "gaussian", "sigma": 0.1}}},
    "beta": {"mode": "fixed", "value": 2.0},
    "sampler": {"outer": {"step_size": 0.3, "iterations": 100, "burn_in": 30},
                "inner": {"step_size": 0.3, "iterations": 50, "burn_in": 20},
                "conditional": {"step_size": 0.3, "iterations": 40,
                                "burn_in": 20, "thinning": 10}},
    "seed": 3,
}


class TestSynth:
    def test_csv_format_and_intercept(self, tmp_path):
        spec = _write(tmp_path / "spec.json", SYNTH_SPEC)
        rc = main(["--output-dir", str(tmp_path), "synth", "--spec", spec,
                   "--out", "data.csv"])
        assert rc == 0
        data = load_dataset_csv(tmp_path / "data.csv")
        assert data.N == 40 and data.d == 3
        assert np.all(data.X[:, 0] == 1.0)
        assert np.max(np.abs(data.X)) <= 1.0
        meta = json.loads((tmp_path / "data.csv.teacher.json").read_text())
        assert meta["kind"] == "teacher" and "weights" in meta

    def test_noiseless_teacher_exact(self, tmp_path):
        data, meta, g = synthesize(SYNTH_SPEC)
        assert np.array_equal(data.y, g)

    def test_gaussian_noise_sd(self):
        spec = dict(SYNTH_SPEC, N=10_000,
                    noise={"kind": "gaussian", "sigma": 0.5})
        data, meta, g = synthesize(spec)
        sd = np.std(data.y - g)
        assert abs(sd - 0.5) / 0.5 < 0.05

    def test_bad_spec_exit_code(self, tmp_path):
        spec = _write(tmp_path / "bad.json", {"N": 10})
        assert main(["synth", "--spec", spec]) == 2

    def test_seed_reproducibility(self):
        a, _, _ = synthesize(SYNTH_SPEC)
        b, _, _ = synthesize(SYNTH_SPEC)
        assert np.array_equal(a.X, b.X) and np.array_equal(a.y, b.y)


class TestExperimentConfig:
    def test_round_trip_lossless(self):
        ec = ExperimentConfig.from_dict(SAMPLE_CONFIG)
        assert ec.as_dict() == SAMPLE_CONFIG
        assert config_hash(ec.as_dict()) == config_hash(SAMPLE_CONFIG)

    def test_unknown_keys_rejected(self):
        bad = dict(SAMPLE_CONFIG, extra=1)
        with pytest.raises(ConfigError, match="unknown keys"):
            ExperimentConfig.from_dict(bad)
        bad2 = json.loads(json.dumps(SAMPLE_CONFIG))
        bad2["network"]["frobnicate"] = True
        with pytest.raises(ConfigError, match="unknown keys"):
            ExperimentConfig.from_dict(bad2)

    def test_discrete_prior_requires_M(self):
        bad = json.loads(json.dumps(SAMPLE_CONFIG))
        bad["prior"] = {"kind": "discrete"}
        with pytest.raises(ConfigError, match="requires M"):
            ExperimentConfig.from_dict(bad)

    def test_data_source_exclusive(self):
        bad = json.loads(json.dumps(SAMPLE_CONFIG))
        bad["data"]["path"] = "x.csv"
        with pytest.raises(ConfigError, match="exactly one"):
            ExperimentConfig.from_dict(bad)


class TestSample:
    def test_outputs_and_certificate(self, tmp_path):
        cfg_path = _write(tmp_path / "exp.json", SAMPLE_CONFIG)
        rc = main(["--output-dir", str(tmp_path), "sample", "--config", cfg_path])
        assert rc == 0
        h = config_hash(SAMPLE_CONFIG)
        cert = json.loads((tmp_path / f"certificate_{h}.json").read_text())
        from lccnn.cli import network_from_dict, _get_data
        from lccnn.coupling import check_logconcavity_conditions
        ec = ExperimentConfig.from_dict(SAMPLE_CONFIG)
        net = network_from_dict(ec.network)
        data = _get_data(ec)
        report = check_logconcavity_conditions(net, data, 2.0, N=4)
        for key, val in report.as_dict().items():
            assert cert["condition_report"][key] == pytest.approx(val)
        chains = (tmp_path / f"chains_{h}.jsonl").read_text().strip().split("\n")
        assert json.loads(chains[0])["meta"]["config_hash"] == h
        assert len(chains) > 1

    def test_rerun_byte_identical(self, tmp_path):
        cfg_path = _write(tmp_path / "exp.json", SAMPLE_CONFIG)
        h = config_hash(SAMPLE_CONFIG)
        main(["--output-dir", str(tmp_path), "sample", "--config", cfg_path])
        first = (tmp_path / f"chains_{h}.jsonl").read_bytes()
        main(["--output-dir", str(tmp_path), "sample", "--config", cfg_path])
        assert (tmp_path / f"chains_{h}.jsonl").read_bytes() == first

    def test_discrete_prior_rejected(self, tmp_path):
        bad = json.loads(json.dumps(SAMPLE_CONFIG))
        bad["prior"] = {"kind": "discrete", "M": 1}
        cfg_path = _write(tmp_path / "exp.json", bad)
        assert main(["--output-dir", str(tmp_path), "sample",
                     "--config", cfg_path]) == 2


class TestVerify:
    def test_telescope_selector(self, capsys):
        rc = main(["verify", "telescope"])
        out = capsys.readouterr().out
        assert rc == 0
        assert "PASS telescope" in out
        assert "residual" in out

    def test_unknown_selector(self):
        assert main(["verify", "nope"]) == 2


class TestBounds:
    INPUTS = {"a0": 1.0, "a1": 1.0, "a2": 1.0, "V": 1.0, "b": 1.0,
              "sigma": 1.0, "C_N": 2.0, "d": 2, "N": 10_000, "M": 3,
              "K": 3, "beta": 1.0}

    def test_table_and_closed_form(self, tmp_path, capsys):
        path = _write(tmp_path / "inputs.json", self.INPUTS)
        rc = main(["--output-dir", str(tmp_path), "bounds", "--inputs", path])
        assert rc == 0
        h = config_hash(self.INPUTS)
        rows = list(csv.DictReader((tmp_path / f"bounds_{h}.csv").open(),
                                   skipinitialspace=True))
        kinds = {r["kind"] for r in rows}
        assert {"log_regret", "square_regret", "msr", "kl", "m2_msr"} <= kinds
        sq = next(r for r in rows if r["kind"] == "square_regret")
        assert abs(float(sq["bound_at_opt"]) - float(sq["closed_form"])) \
            <= 1e-9 * float(sq["closed_form"])
        # monotonicity spot rows present
        assert any("N_doubled" in r["kind"] for r in rows)

    def test_kl_consistency_warning(self, tmp_path, capsys):
        path = _write(tmp_path / "inputs.json", dict(self.INPUTS, beta=3.0))
        main(["--output-dir", str(tmp_path), "bounds", "--inputs", path])
        out = capsys.readouterr().out
        assert "1/sigma" in out

    def test_invalid_inputs(self, tmp_path):
        path = _write(tmp_path / "inputs.json", dict(self.INPUTS, d=1))
        assert main(["--output-dir", str(tmp_path), "bounds",
                     "--inputs", path]) == 2


class TestRegret:
    CONFIG = {
        "network": {"K": 1, "d": 2, "V": 1.0, "activation": {"kind": "tanh"}},
        "prior": {"kind": "discrete", "M": 1},
        "data": {"synthetic": {"N": 16, "d": 2, "seed": 4,
                               "g": {"kind": "teacher", "K": 1, "V": 1.0,
                                     "activation": {"kind": "tanh"},
                                     "weights": [[0.0, 1.0]]},
                               "noise": {"kind": "gaussian", "sigma": 0.2}}},
        "beta": {"mode": "fourth-root"},
        "seed": 1,
    }

    def test_ledger_and_bound_rows(self, tmp_path):
        cfg_path = _write(tmp_path / "cfg.json", self.CONFIG)
        rc = main(["--output-dir", str(tmp_path), "regret", "--config", cfg_path])
        assert rc == 0
        h = config_hash(self.CONFIG)
        with (tmp_path / f"regret_vs_bound_{h}.csv").open() as fh:
            fh.readline()  # hash comment
            rows = list(csv.DictReader(fh))
        assert len(rows) >= 3
        bounds = [float(r["bound"]) for r in rows]
        for r in rows:
            assert float(r["R_square"]) <= float(r["bound"])
        # fourth-root schedule: the bound decays along dyadic N
        assert all(b2 < b1 for b1, b2 in zip(bounds, bounds[1:]))
        with (tmp_path / f"ledger_{h}.csv").open() as fh:
            fh.readline()
            led = list(csv.DictReader(fh))
        assert len(led) == 16
        for row in led:
            assert float(row["r_square"]) <= float(row["r_rand"]) + 1e-12
            assert float(row["r_log"]) <= float(row["r_rand"]) + 1e-12

    def test_empty_dataset_edge(self, tmp_path):
        cfg = json.loads(json.dumps(self.CONFIG))
        cfg["data"]["synthetic"]["N"] = 0
        cfg_path = _write(tmp_path / "cfg.json", cfg)
        rc = main(["--output-dir", str(tmp_path), "regret", "--config", cfg_path])
        assert rc == 0
        h = config_hash(cfg)
        text = (tmp_path / f"ledger_{h}.csv").read_text()
        assert "r_square" in text  # header written, no data rows
        assert len(text.strip().split("\n")) == 2

    def test_continuous_prior_rejected(self, tmp_path):
        cfg = json.loads(json.dumps(self.CONFIG))
        cfg["prior"] = {"kind": "continuous"}
        cfg_path = _write(tmp_path / "cfg.json", cfg)
        assert main(["--output-dir", str(tmp_path), "regret",
                     "--config", cfg_path]) == 2
