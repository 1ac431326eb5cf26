import re

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from daqn.cohort import Episode, Normalizer
from daqn.interpret import (TraceRecord, correlate, extract_traces, marker_series, pearson, received_attention,
                            render_trace_figure, write_trace_dump)
from daqn.net import DaqnConfig, QNetwork
from daqn.tensor import ContractError
from daqn.train import TrainedPolicy


def untrained_policy(arch, episodes, lookback=3, seed=0):
    norm = Normalizer.fit(episodes)
    cfg = DaqnConfig(obs_dim=episodes[0].features.shape[1] + 25, static_dim=len(episodes[0].static),
                     num_actions=25, lookback=lookback, num_blocks=2, embed_dim=8, ff_dim=8, hidden_dim=8)
    return TrainedPolicy(QNetwork.create(arch, cfg, seed), norm, 25)


@pytest.fixture(scope="module")
def episodes(small_cohort):
    return small_cohort.episodes[:20]


@pytest.fixture(scope="module")
def records(episodes):
    return extract_traces(untrained_policy("daqn", episodes), episodes)


class TestExtraction:
    def test_one_record_per_decision(self, records, episodes):
        assert len(records) == sum(len(e) for e in episodes)

    def test_traces_sum_to_one(self, records):
        for r in records:
            assert r.weights.shape[0] == 2
            np.testing.assert_allclose(r.weights.sum(axis=1), 1.0, atol=1e-12)

    def test_first_timestep_has_single_full_weight(self, records):
        first = [r for r in records if r.timestep == 0]
        assert first and all(r.valid_len == 1 and np.all(r.weights == 1.0) for r in first)

    def test_source_timesteps(self, records):
        r = next(r for r in records if r.timestep == 6)
        np.testing.assert_array_equal(r.source_timesteps, [3, 4, 5, 6])

    def test_sentinel_alignment(self, episodes):
        """A huge value injected at one timestep must dominate exactly the positions mapped to it."""
        ep = episodes[0]
        feats = ep.features.copy()
        feats[:, 0] = 0.0
        feats[2, 0] = 1.0
        probe = Episode(ep.patient_id, ep.static, feats, ep.actions, ep.rewards)
        policy = untrained_policy("daqn", [probe])
        # key weights read only the sentinel channel so the sentinel position dominates every layer
        net = policy.net
        net.params["embed.W"].data[:] = 0.0
        net.params["embed.W"].data[0, :] = 1.0
        net.params["embed.b"].data[:] = 0.0
        net.params["pos"].data[:] = 0.0
        for j in range(net.config.num_blocks):
            net.params[f"block{j}.Wk"].data[:] = 1.0
            net.params[f"block{j}.Wq"].data[:] = 0.0
        net.params["start"].data[:] = 1.0
        net.params["block0.Wq"].data[:] = 1.0
        recs = extract_traces(policy, [probe])
        for r in recs:
            if 2 in r.source_timesteps:
                p = int(np.flatnonzero(r.source_timesteps == 2)[0])
                assert np.argmax(r.weights[0]) == p

    def test_per_head_average_commutes(self, records):
        r = records[10]
        np.testing.assert_allclose(r.heads.mean(axis=1), r.weights)

    @pytest.mark.parametrize("arch", ["dqn-mlp", "drqn-lstm"])
    def test_non_attention_architectures_rejected(self, episodes, arch):
        with pytest.raises(ContractError):
            extract_traces(untrained_policy(arch, episodes), episodes)

    def test_dump_format(self, records, tmp_path):
        path = write_trace_dump(tmp_path / "t.tsv", records[:5])
        lines = path.read_text().splitlines()
        assert lines[0].split("\t")[:6] == ["patient_id", "timestep", "layer", "head", "position",
                                            "source_timestep"]
        expected = sum(r.heads.size for r in records[:5])
        assert len(lines) == 1 + expected


def textbook_pearson(x, y):
    n = len(x)
    mx, my = sum(x) / n, sum(y) / n
    sxy = sum((a - mx) * (b - my) for a, b in zip(x, y))
    sxx = sum((a - mx) ** 2 for a in x)
    syy = sum((b - my) ** 2 for b in y)
    return sxy / (sxx * syy) ** 0.5


class TestCorrelation:
    @settings(max_examples=40, deadline=None)
    @given(hnp.arrays(np.float64, st.integers(3, 60), elements=st.floats(-1e3, 1e3)),
           st.integers(0, 2 ** 31 - 1))
    def test_matches_textbook(self, x, seed):
        y = np.random.default_rng(seed).standard_normal(len(x))
        got = pearson(x, y)
        if np.ptp(x) == 0:
            assert got is None
        else:
            ref = textbook_pearson(list(x), list(y))
            assert got == pytest.approx(ref, abs=1e-12)
            assert -1.0 <= got <= 1.0

    def test_affine_relation(self, rng):
        x = rng.standard_normal(50)
        assert pearson(x, 3 * x + 2) == pytest.approx(1.0, abs=1e-12)
        assert pearson(x, -x) == pytest.approx(-1.0, abs=1e-12)

    def test_zero_variance_is_absent(self):
        assert pearson(np.arange(5.0), np.ones(5)) is None

    def test_too_few_samples(self):
        with pytest.raises(ContractError):
            pearson(np.ones(2), np.ones(2))

    def test_pooled_over_positions(self, records, episodes):
        markers = marker_series(episodes, ["severity", "delta_severity"], ["severity", "cue"] +
                                [f"aux_{i}" for i in range(10)])
        corr = correlate(records, markers)
        assert corr.n_samples == sum(r.valid_len for r in records)
        assert set(corr.coefficients[0]) == {"severity", "delta_severity"}

    def test_weights_as_marker_correlate_perfectly(self, records, episodes):
        # a marker equal to the layer-0 weight for single-record episodes is exactly proportional
        one = [r for r in records if r.episode == 0 and r.timestep == len(episodes[0]) - 1]
        marker = np.zeros(len(episodes[0]))
        marker[one[0].source_timesteps] = 2.0 * one[0].weights[0] + 1.0
        corr = correlate(one, {"m": [marker] + [np.zeros(len(e)) for e in episodes[1:]]})
        assert corr.get(0, "m") == pytest.approx(1.0, abs=1e-12)

    def test_independent_marker_null(self, rng):
        recs = []
        for e in range(3000):
            for t in range(4):
                vl = min(t + 1, 4)
                w = rng.dirichlet(np.ones(vl), size=(1, 2))
                recs.append(TraceRecord(str(e), e, t, w))
        corr = correlate(recs, {"m": [rng.standard_normal(4) for _ in range(3000)]})
        assert corr.n_samples >= 10000
        assert abs(corr.get(0, "m")) < 0.1

    def test_received_attention(self, records, episodes):
        t, w = received_attention(records, episodes[0].patient_id, 0)
        assert len(t) == len(episodes[0]) and np.all(w > 0)


class TestFigure:
    def test_structure(self, tmp_path):
        path = render_trace_figure(np.arange(10), np.linspace(0, 3, 10), np.linspace(0.1, 0.5, 10),
                                   tmp_path / "f.svg", marker_label="SOFA")
        text = path.read_text()
        assert text.count("<polyline") == 2
        assert 'class="legend"' in text and "SOFA" in text and "attention weight" in text

    def test_deterministic(self, tmp_path):
        args = (np.arange(7), np.sin(np.arange(7)), np.cos(np.arange(7)))
        a = render_trace_figure(*args, tmp_path / "a.svg").read_bytes()
        b = render_trace_figure(*args, tmp_path / "b.svg").read_bytes()
        assert a == b

    def test_empty_series(self, tmp_path):
        with pytest.raises(ContractError):
            render_trace_figure([], [], [], tmp_path / "e.svg")

    def test_unwritable_path_named(self, tmp_path):
        with pytest.raises(OSError, match="missing"):
            render_trace_figure([0, 1], [0, 1], [1, 0], tmp_path / "missing" / "f.svg")
