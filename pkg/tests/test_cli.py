import json

import numpy as np
import yaml

from conftest import bs_model_dict, embedding_model_dict, rank1_model_dict
from degenhedge.cli import main


def write_config(path, model_dict, payoff, run, output=None):
    cfg = {"model": model_dict, "payoff": payoff, "run": run}
    if output:
        cfg["output"] = output
    path.write_text(yaml.safe_dump(cfg))
    return str(path)


def bs_config(tmp_path, **run_overrides):
    run = {"paths": 2000, "steps": 8, "seed": 5, "regression": {"degree": 2, "ridge": 0.0}}
    run.update(run_overrides)
    return write_config(
        tmp_path / "cfg.yaml",
        bs_model_dict(),
        {"kind": "european_call", "strike": 100.0},
        run,
    )


def payload_of(path):
    with open(path) as fh:
        return json.load(fh)["payload"]


class TestRoundTrip:
    def test_validate_price_hedge_backtest(self, tmp_path):
        cfg = bs_config(tmp_path)
        out = str(tmp_path / "out")
        assert main(["validate", "--config", cfg, "--out", out]) == 0
        assert main(["price", "--config", cfg, "--out", out]) == 0
        assert main(["hedge", "--config", cfg, "--out", out]) == 0
        assert main(["backtest", "--config", cfg, "--out", out, "--seed", "6"]) == 0
        for name in (
            "price.json",
            "price.csv",
            "plan.json",
            "plan_coefs.npz",
            "plan.csv",
            "hedge_summary.json",
            "backtest.json",
            "backtest_errors.csv",
        ):
            assert (tmp_path / "out" / name).exists(), name
        price = payload_of(tmp_path / "out" / "price.json")
        hedge = payload_of(tmp_path / "out" / "hedge_summary.json")
        back = payload_of(tmp_path / "out" / "backtest.json")
        # price and hedge share the same paths (same seed): identical v0
        np.testing.assert_allclose(hedge["v0"], price["v0"], rtol=1e-12)
        assert back["v0"] == hedge["v0"]
        assert back["relative_rmse"] < 0.5

    def test_model_in_separate_file(self, tmp_path):
        (tmp_path / "model.yaml").write_text(yaml.safe_dump(bs_model_dict()))
        cfg = tmp_path / "cfg.yaml"
        cfg.write_text(
            yaml.safe_dump(
                {
                    "model": "model.yaml",
                    "payoff": {"kind": "european_call", "strike": 100.0},
                    "run": {"paths": 500, "steps": 4, "seed": 1},
                }
            )
        )
        assert main(["price", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 0


class TestExitCodes:
    def test_malformed_config(self, tmp_path):
        cfg = tmp_path / "bad.yaml"
        cfg.write_text("model: {n: 1}\nbogus_section: 1\n")
        assert main(["validate", "--config", str(cfg)]) == 2

    def test_missing_config_file(self, tmp_path):
        assert main(["price", "--config", str(tmp_path / "nope.yaml")]) == 2

    def test_missing_seed_rejected(self, tmp_path):
        cfg = bs_config(tmp_path)
        doc = yaml.safe_load(open(cfg))
        del doc["run"]["seed"]
        (tmp_path / "noseed.yaml").write_text(yaml.safe_dump(doc))
        assert main(["price", "--config", str(tmp_path / "noseed.yaml")]) == 2

    def test_inconsistent_model_fails_validation(self, tmp_path):
        bad = rank1_model_dict()
        bad["drift"]["params"]["rates"] = [0.07, 0.20]
        cfg = write_config(
            tmp_path / "bad.yaml", bad, {"kind": "exchange", "assets": [0, 1]},
            {"paths": 500, "steps": 4, "seed": 1},
        )
        assert main(["validate", "--config", cfg]) == 1

    def test_backtest_seed_reuse(self, tmp_path):
        cfg = bs_config(tmp_path)
        out = str(tmp_path / "out")
        assert main(["hedge", "--config", cfg, "--out", out]) == 0
        assert main(["backtest", "--config", cfg, "--out", out]) == 2  # same seed as training

    def test_backtest_threshold(self, tmp_path):
        cfg = bs_config(tmp_path)
        out = str(tmp_path / "out")
        assert main(["hedge", "--config", cfg, "--out", out]) == 0
        rc = main(
            ["backtest", "--config", cfg, "--out", out, "--seed", "6", "--max-relative-rmse", "1e-9"]
        )
        assert rc == 1


class TestDeterminism:
    def test_price_payload_byte_identical(self, tmp_path):
        cfg = bs_config(tmp_path)
        for d in ("a", "b"):
            assert main(["price", "--config", cfg, "--out", str(tmp_path / d)]) == 0
        pa = json.dumps(payload_of(tmp_path / "a" / "price.json"), sort_keys=True)
        pb = json.dumps(payload_of(tmp_path / "b" / "price.json"), sort_keys=True)
        assert pa == pb

    def test_workers_flag_does_not_change_results(self, tmp_path):
        cfg = bs_config(tmp_path)
        assert main(["price", "--config", cfg, "--out", str(tmp_path / "w1"), "--workers", "1"]) == 0
        assert main(["price", "--config", cfg, "--out", str(tmp_path / "w4"), "--workers", "4"]) == 0
        assert payload_of(tmp_path / "w1" / "price.json") == payload_of(tmp_path / "w4" / "price.json")

    def test_cli_flags_override_config(self, tmp_path):
        cfg = bs_config(tmp_path)
        assert main(["price", "--config", cfg, "--out", str(tmp_path / "o1"), "--seed", "9"]) == 0
        assert payload_of(tmp_path / "o1" / "price.json")["seed"] == 9


class TestDegenerateHedge:
    def test_embedding_plan_second_theta_zero(self, tmp_path):
        cfg = write_config(
            tmp_path / "emb.yaml",
            embedding_model_dict(),
            {"kind": "european_call", "strike": 100.0, "assets": [0]},
            {"paths": 3000, "steps": 8, "seed": 7, "regression": {"degree": 2, "ridge": 0.0}},
        )
        out = tmp_path / "out"
        assert main(["hedge", "--config", cfg, "--out", str(out)]) == 0
        rows = (out / "plan.csv").read_text().splitlines()
        header = rows[0].split(",")
        i1, i2 = header.index("theta_1"), header.index("theta_2")
        theta2 = np.array([float(r.split(",")[i2]) for r in rows[1:]])
        theta1 = np.array([float(r.split(",")[i1]) for r in rows[1:]])
        np.testing.assert_allclose(theta2, 0.0, atol=1e-12)
        assert np.abs(theta1).max() > 0.1
