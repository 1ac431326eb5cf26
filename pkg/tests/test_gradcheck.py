import numpy as np
import pytest

from daqn import gradcheck, tensor as T


class TestGradcheckSuite:
    def test_single_seed_passes(self):
        results = gradcheck.run_suite(seeds=[3])
        failed = [r.line() for r in results if not r.passed]
        assert not failed, failed

    def test_every_parameter_is_listed(self):
        rng = np.random.default_rng(0)
        results = gradcheck.network_checks(rng)
        names = {n for r in results for n in r.errors}
        assert any(n.startswith("block0.Wq") for n in names)
        assert any(n.startswith("lstm.Wh") for n in names)
        assert any(n.startswith("fc2.W") for n in names)

    def test_corrupted_rule_is_reported_by_op(self, monkeypatch):
        good = T.BACKWARD["tanh"]
        monkeypatch.setitem(T.BACKWARD, "tanh", lambda out, g: tuple(1.1 * x for x in good(out, g)))
        results = gradcheck.primitive_checks(np.random.default_rng(0))
        failing = [r for r in results if not r.passed]
        assert failing
        assert all("tanh" in r.op for r in failing)
        assert "FAIL" in failing[0].line() and "tanh" in failing[0].line()

    def test_relative_error_scale_free(self):
        a = np.array([1.0, 2.0])
        assert gradcheck.relative_error(a, a) == 0.0
        assert gradcheck.relative_error(1e6 * a, 1e6 * a * (1 + 1e-8)) == pytest.approx(1e-8, rel=1e-3)
