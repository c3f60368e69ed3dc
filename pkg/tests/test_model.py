import numpy as np
import pytest

from conftest import bs_model_dict, embedding_model_dict, rank1_model_dict, smooth_model_dict
from degenhedge.errors import (
    DimensionMismatch,
    SchemaError,
    UnsupportedFamily,
    UnsupportedJacobian,
)
from degenhedge.model import (
    PiecewiseTable,
    evaluate_coefficients,
    parse_model,
    parse_model_dict,
    validate_no_arbitrage,
)


class TestParsing:
    def test_bs_roundtrip(self, bs_model):
        assert bs_model.n == 1 and bs_model.d == 1
        b, sig, r = evaluate_coefficients(bs_model, 0.0, np.array([100.0]))
        np.testing.assert_allclose(b, [8.0])
        np.testing.assert_allclose(sig, [[20.0]])
        assert r == 0.03

    def test_yaml_text(self):
        text = """
model: {n: 1, d: 1, horizon: 1.0, x0: [1.0]}
rate:
  table:
    - {t_start: 0.0, value: 0.0}
drift: {family: constant, params: {values: [0.1]}}
vol: {family: constant, params: {matrix: [[0.3]]}}
"""
        m = parse_model(text)
        np.testing.assert_allclose(m.drift(0.0, np.array([[2.0]])), [[0.1]])

    def test_unknown_key_rejected(self):
        cfg = bs_model_dict()
        cfg["model"]["extra"] = 1
        with pytest.raises(SchemaError):
            parse_model_dict(cfg)

    def test_unknown_family_rejected(self):
        cfg = bs_model_dict()
        cfg["drift"]["family"] = "quadratic"
        with pytest.raises(UnsupportedFamily):
            parse_model_dict(cfg)

    def test_shape_mismatch_rejected(self):
        cfg = bs_model_dict()
        cfg["vol"]["params"]["matrix"] = [[0.2, 0.1]]
        with pytest.raises(DimensionMismatch):
            parse_model_dict(cfg)

    def test_missing_section_rejected(self):
        cfg = bs_model_dict()
        del cfg["rate"]
        with pytest.raises(SchemaError):
            parse_model_dict(cfg)

    def test_nonfinite_rejected(self):
        cfg = bs_model_dict()
        cfg["model"]["x0"] = [float("nan")]
        with pytest.raises(SchemaError):
            parse_model_dict(cfg)

    def test_expression_grammar_whitelist(self):
        cfg = smooth_model_dict()
        cfg["drift"]["params"]["exprs"] = ["exp(x1)", "x2"]
        with pytest.raises(SchemaError):
            parse_model_dict(cfg)
        cfg["drift"]["params"]["exprs"] = ["x1/x2", "x2"]
        with pytest.raises(SchemaError):
            parse_model_dict(cfg)
        cfg["drift"]["params"]["exprs"] = ["import_os", "x2"]
        with pytest.raises(SchemaError):
            parse_model_dict(cfg)

    def test_expression_evaluators_and_jacobians(self, smooth_model):
        x = np.array([[1.0, 2.0], [0.5, -0.3]])
        b = smooth_model.drift(0.0, x)
        np.testing.assert_allclose(b[:, 0], 0.05 * x[:, 0] + 0.02 * np.tanh(x[:, 1]))
        jb = smooth_model.drift_jac(0.0, x)
        np.testing.assert_allclose(jb[:, 0, 1], 0.02 / np.cosh(x[:, 1]) ** 2, rtol=1e-12)
        jsig = smooth_model.vol_jac(0.0, x)
        np.testing.assert_allclose(jsig[:, 0, 0, 0], 0.05 / np.cosh(x[:, 0]) ** 2, rtol=1e-12)


class TestPiecewiseTable:
    def test_lookup_and_integral(self):
        tab = PiecewiseTable(np.array([0.0, 0.5]), np.array([0.02, 0.04]))
        assert tab.at(0.0) == 0.02
        assert tab.at(0.49999) == 0.02
        assert tab.at(0.5) == 0.04
        np.testing.assert_allclose(tab.integral(0.0, 1.0), 0.02 * 0.5 + 0.04 * 0.5)
        np.testing.assert_allclose(tab.integral(0.25, 0.75), 0.02 * 0.25 + 0.04 * 0.25)

    def test_time_dependent_vol_table(self):
        cfg = bs_model_dict()
        cfg["vol"] = {
            "family": "time-dependent-linear",
            "params": {
                "table": [
                    {"t_start": 0.0, "matrix": [[0.2]]},
                    {"t_start": 0.5, "matrix": [[0.4]]},
                ]
            },
        }
        m = parse_model_dict(cfg)
        np.testing.assert_allclose(m.vol(0.25, np.array([[100.0]])), [[[20.0]]])
        np.testing.assert_allclose(m.vol(0.75, np.array([[100.0]])), [[[40.0]]])


class TestStructureFlags:
    def test_bs_flags(self, bs_model):
        assert bs_model.vol_state_independent_range
        assert bs_model.pu_state_independent
        # u = (mu - r) / sigma
        np.testing.assert_allclose(bs_model.pu_deterministic(0.3), [(0.08 - 0.03) / 0.2])

    def test_rank1_pu_closed_form(self, rank1_model):
        # Pu = (b1 - r)/(s11^2 + s12^2) * (s11, s12)
        u = rank1_model.pu_deterministic(0.0)
        expected = (0.07 - 0.03) / (0.2**2 + 0.1**2) * np.array([0.2, 0.1])
        np.testing.assert_allclose(u, expected, atol=1e-12)

    def test_smooth_model_jacobian_unsupported(self, smooth_model):
        assert not smooth_model.pu_state_independent
        with pytest.raises(UnsupportedJacobian):
            smooth_model.pu_jacobian(0.0, np.array([[1.0, 1.0]]))

    def test_constant_vol_jacobian(self):
        cfg = {
            "model": {"n": 1, "d": 1, "horizon": 1.0, "x0": [1.0]},
            "rate": {"table": [{"t_start": 0.0, "value": 0.01}]},
            "drift": {"family": "affine", "params": {"matrix": [[-0.5]], "offset": [0.2]}},
            "vol": {"family": "constant", "params": {"matrix": [[0.3]]}},
        }
        m = parse_model_dict(cfg)
        assert not m.pu_state_independent
        jf = m.pu_jacobian(0.0, np.array([[1.0]]))
        # u(x) = (-0.5 x + 0.2 - 0.01 x)/0.3, so du/dx = -0.51/0.3
        np.testing.assert_allclose(jf, [[[-0.51 / 0.3]]], atol=1e-12)


class TestHashing:
    def test_hash_stable_and_sensitive(self, bs_model):
        assert bs_model.config_hash() == parse_model_dict(bs_model_dict()).config_hash()
        other = parse_model_dict(bs_model_dict(sigma=0.25))
        assert other.config_hash() != bs_model.config_hash()


class TestValidation:
    def test_bs_ok(self, bs_model):
        rep = validate_no_arbitrage(bs_model)
        assert rep.arbitrage_ok
        assert rep.max_residual <= 1e-10
        assert rep.rank_profile == {1: sum(rep.rank_profile.values())}

    def test_embedding_ok_rank_one(self, embedding_model):
        rep = validate_no_arbitrage(embedding_model)
        assert rep.arbitrage_ok
        assert set(rep.rank_profile) == {1}

    def test_incompatible_drift_detected(self):
        cfg = rank1_model_dict()
        # break the proportionality between excess drifts and vol rows
        cfg["drift"]["params"]["rates"] = [0.07, 0.20]
        rep = validate_no_arbitrage(parse_model_dict(cfg))
        assert not rep.arbitrage_ok
        assert rep.max_residual > 1e-3
        assert rep.warnings

    def test_rank1_consistent_ok(self, rank1_model):
        rep = validate_no_arbitrage(rank1_model)
        assert rep.arbitrage_ok
