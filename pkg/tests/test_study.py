import dataclasses
import json
import math
from statistics import NormalDist

import numpy as np
import pytest

from nirs_speech.classifier import decision_scores, train_rlda
from nirs_speech.epoching import LabeledDataset, write_events
from nirs_speech.study import (
    ProtocolError,
    StudyConfig,
    StudyState,
    chance_threshold,
    make_schedule,
    recording_filename,
    run_block,
    run_study,
    significance_stars,
)
from nirs_speech.synth import generate_session, load_scenario


def exact_quantile_threshold(n, alpha):
    # smallest q with P(X > q) <= alpha for X ~ Binomial(n, 1/3), by direct summation
    tail = 1.0
    for q in range(n + 1):
        tail -= math.comb(n, q) * (1 / 3) ** q * (2 / 3) ** (n - q)
        if tail <= alpha + 1e-15:
            return q / n


class TestSchedule:
    def test_structure(self):
        s = make_schedule(0)
        assert [p.n_trials for p in s] == [36, 24, 24, 24, 24, 24, 24]
        # 36 + 6 x 24
        assert sum(p.n_trials for p in s) == 180
        assert [(p.session, p.mode) for p in s] == [(1, "offline"), (1, "online"), (1, "online")] + [(2, "online")] * 4
        for p in s:
            assert sorted(set(p.labels.count(lab) for lab in ("yes", "no", "rest"))) == [p.trials_per_class]

    def test_deterministic(self):
        assert make_schedule(5) == make_schedule(5)
        assert make_schedule(5) != make_schedule(6)


class TestChance:
    @pytest.mark.parametrize("n", [24, 72])
    @pytest.mark.parametrize("alpha", [0.05, 0.01, 0.001])
    def test_normal_closed_form(self, n, alpha):
        want = 1 / 3 + NormalDist().inv_cdf(1 - alpha) * math.sqrt(2 / 9 / n)
        assert chance_threshold(n, alpha) == pytest.approx(want, rel=1e-12)

    def test_quoted_n72_values(self):
        # quoted figures were rounded from z = 1.645 / 3.090; exact values are 42.471 and 50.501
        assert 100 * chance_threshold(72, 0.05) == pytest.approx(42.46, abs=0.05)
        assert 100 * chance_threshold(72, 0.001) == pytest.approx(50.48, abs=0.05)
        assert 100 * math.sqrt(2 / 9 / 72) == pytest.approx(5.556, abs=0.001)

    def test_half_alpha_is_chance(self):
        assert chance_threshold(24, 0.5) == pytest.approx(1 / 3, abs=1e-15)

    @pytest.mark.parametrize("alpha", [0, 1, -0.1, 2])
    def test_invalid_alpha(self, alpha):
        with pytest.raises(ValueError):
            chance_threshold(24, alpha)

    @pytest.mark.parametrize("n", [24, 72, 100])
    @pytest.mark.parametrize("alpha", [0.05, 0.01, 0.001])
    def test_exact_method(self, n, alpha):
        assert chance_threshold(n, alpha, "exact") == exact_quantile_threshold(n, alpha)

    def test_star_consistency(self):
        assert significance_stars(0.444, 72) == "*"
        assert significance_stars(0.528, 72) == "***"
        assert significance_stars(1 / 3, 72) == ""


class TestRunBlock:
    def _data(self, plan, seed=0):
        rng = np.random.default_rng(seed)
        return LabeledDataset(rng.standard_normal((plan.n_trials, 44)), plan.labels)

    def test_offline_then_online(self):
        s = make_schedule(1)
        state, res = run_block(StudyState(), s[0], self._data(s[0]), next_session=1)
        assert res.trials == () and res.accuracy is None and state.model is not None
        state, res = run_block(state, s[1], self._data(s[1], 1), next_session=1)
        assert len(res.trials) == 24
        assert res.accuracy == sum(t.correct for t in res.trials) / 24
        state, _ = run_block(state, s[2], self._data(s[2], 2), next_session=2)
        assert state.dataset.N == 84

    def test_online_without_model(self):
        s = make_schedule(1)
        with pytest.raises(ProtocolError):
            run_block(StudyState(), s[1], self._data(s[1]))

    def test_labels_must_match_plan(self):
        s = make_schedule(1)
        plan = dataclasses.replace(s[0], labels=tuple(reversed(s[0].labels)))
        if plan.labels != s[0].labels:
            with pytest.raises(ProtocolError):
                run_block(StudyState(), s[0], self._data(plan))

    def test_no_leakage(self):
        s = make_schedule(2)
        state, _ = run_block(StudyState(), s[0], self._data(s[0]), next_session=1)
        data = self._data(s[1], 1)
        _, a = run_block(state, s[1], data, next_session=1)
        perm = tuple(np.random.default_rng(0).permutation(list(s[1].labels)))
        plan2 = dataclasses.replace(s[1], labels=perm)
        _, b = run_block(state, plan2, LabeledDataset(data.X, perm), next_session=1)
        assert [t.predicted for t in a.trials] == [t.predicted for t in b.trials]


class TestStudy:
    def test_high_snr(self, high_snr_report):
        r = high_snr_report
        assert len(r.blocks) == 7 and len(r.online) == 6
        assert r.online[0].accuracy > chance_threshold(24, 0.05)
        assert r.online[-1].accuracy >= 0.90

    def test_constraints_and_monotone_trace(self, high_snr_report, realistic_report):
        for r in (high_snr_report, realistic_report):
            history = []  # (target session, gamma)
            for i, b in enumerate(r.blocks):
                target = r.blocks[i + 1].session if i + 1 < len(r.blocks) else b.session
                lo, hi = b.tune.grid.bounds
                same = [g for s, g in history if s == target]
                if same:
                    assert hi == same[-1] and b.gamma_selected <= same[-1]
                elif target == 2:
                    assert lo == 0.3 and hi == 1.0 and b.gamma_selected >= 0.3
                else:
                    assert (lo, hi) == (0.0, 1.0)
                history.append((target, b.gamma_selected))
            for sess in (1, 2):
                trace = [g for s, g in history if s == sess]
                assert all(b <= a for a, b in zip(trace, trace[1:]))

    def test_models_used_match_trace(self, realistic_report):
        r = realistic_report
        for prev, b in zip(r.blocks, r.blocks[1:]):
            assert b.gamma_used == prev.gamma_selected

    def test_cumulative_retrain_reproduces_model(self, realistic_report):
        st = realistic_report.final_state
        assert st.dataset.N == 180
        again = train_rlda(st.dataset, st.model.gamma, st.model.loading)
        Xt = np.random.default_rng(0).standard_normal((20, 44))
        assert np.array_equal(decision_scores(again, Xt), decision_scores(st.model, Xt))

    def test_bookkeeping(self, realistic_report):
        for b in realistic_report.online:
            assert b.accuracy == sum(t.true_label == t.predicted for t in b.trials) / b.n_trials
            assert b.stars == significance_stars(b.accuracy, b.n_trials, "normal")
            assert b.stars_exact == significance_stars(b.accuracy, b.n_trials, "exact")

    def test_report_echoes_configuration(self, realistic_report):
        d = json.loads(json.dumps(realistic_report.to_dict()))
        assert d["extinction_table"]["note"]
        assert d["filter"]["order"] == 3
        assert d["config"]["loading"] == 1e-5
        assert len(d["blocks"]) == 7 and len(d["gamma_trace"]) == 7

    def test_recorded_source_matches_synthetic(self, tmp_path, high_snr_report):
        schedule = make_schedule(0)
        blocks = generate_session(schedule, load_scenario("high-snr"), 0)
        for blk in blocks:
            blk.recording.write_csv(tmp_path / recording_filename(blk.plan.session, blk.plan.block))
        write_events(tmp_path / "events.csv", [e for blk in blocks for e in blk.events])
        rec = run_study(StudyConfig(input_dir=str(tmp_path)))
        for a, b in zip(rec.blocks, high_snr_report.blocks):
            assert a.gamma_selected == b.gamma_selected
            assert [t.predicted for t in a.trials] == [t.predicted for t in b.trials]

    def test_config_validation(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps({"scenario": "null", "colour": 1}))
        with pytest.raises(ValueError, match="colour"):
            StudyConfig.from_file(path)
        with pytest.raises(ValueError):
            StudyConfig(threshold_method="bayes").validate()
        with pytest.raises(FileNotFoundError):
            StudyConfig(input_dir=str(tmp_path / "missing")).validate()
