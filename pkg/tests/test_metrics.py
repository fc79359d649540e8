"""Metric tests: analytic values, recount oracles, planted-structure recovery."""

import math

import numpy as np
import pytest

from lobnet.data import (
    FEATURE_DIM,
    N_LEVELS,
    Dataset,
    NormalizationStats,
    build_dataset,
)
from lobnet.metrics import (
    MetricsError,
    build_eval_report,
    coeff_ratio_study,
    cross_entropy,
    direction_comparison,
    estimate_increment_correlation,
    pct_decrease,
    pct_decrease_matrix,
    tail_cross_entropy,
    theoretical_pup,
    topk_accuracy,
    win_matrix,
)
from lobnet.models import naive_fit
from lobnet.synthetic import SyntheticGenConfig, synth_generate


def dataset_from_labels(labels):
    labels = np.asarray(labels, dtype=np.int64)
    n = labels.shape[0]
    return Dataset(
        features=np.zeros((n, FEATURE_DIM)),
        imbalances=np.zeros((n, N_LEVELS)),
        labels=labels,
    )


class TestCrossEntropy:
    def test_uniform_marginal_is_log101(self):
        # an unfit smoothed naive model is uniform over each component
        model = naive_fit(np.array([(0, 0)]), smoothing=True)
        model.marg_counts[:] = 0
        model.cond_counts[:] = 0
        model.n_total = 0
        ds = dataset_from_labels([(3, -2), (0, 0), (-7, 1)])
        ce = cross_entropy(model, ds)
        assert ce == pytest.approx(2 * math.log(101), rel=1e-12)
        marg = model.marginal_distribution(None)
        assert -np.log(marg.probs[0]) == pytest.approx(math.log(101), rel=1e-12)

    def test_perfect_point_mass_is_zero(self):
        model = naive_fit(np.array([(1, 0)]), smoothing=False)
        ds = dataset_from_labels([(1, 0)] * 5)
        assert cross_entropy(model, ds) == pytest.approx(0.0, abs=1e-12)

    def test_matches_pmf_oracle(self):
        labels = np.array([(1, 0), (1, 0), (0, 2), (-1, 0), (0, 2)])
        model = naive_fit(labels, smoothing=True)
        ds = dataset_from_labels(labels)
        dist = model.joint_pmf(None)
        lookup = {tuple(o): p for o, p in zip(dist.outcomes, dist.probs)}
        want = -np.mean([np.log(lookup[tuple(l)]) for l in labels])
        assert cross_entropy(model, ds) == pytest.approx(want, abs=1e-10)

    def test_infinite_loglik_reported(self):
        model = naive_fit(np.array([(1, 0)]), smoothing=False)
        ds = dataset_from_labels([(2, 0)])
        with pytest.raises(MetricsError, match="non-finite"):
            cross_entropy(model, ds)


class TestPairwise:
    def test_pct_decrease_examples(self):
        assert pct_decrease(9, 10) == pytest.approx(10.0)
        assert pct_decrease(10, 10) == 0.0

    def test_pct_decrease_antisymmetry_identity(self):
        # pct(a,b)*b = (b-a)*100 = -pct(b,a)*a, so pct(a,b) = -pct(b,a)*a/b
        rng = np.random.Generator(np.random.PCG64(0))
        for _ in range(100):
            a, b = rng.uniform(0.1, 10, size=2)
            assert pct_decrease(a, b) == pytest.approx(
                -pct_decrease(b, a) * a / b, rel=1e-10
            )

    def test_pct_decrease_rejects_nonpositive(self):
        with pytest.raises(MetricsError):
            pct_decrease(1.0, 0.0)

    def test_win_matrix_single_run(self):
        wins = win_matrix([[1.0, 2.0]])
        assert wins[0, 1] == 1 and wins[1, 0] == 0
        assert np.isnan(wins[0, 0])

    def test_win_matrix_ties_are_losses(self):
        wins = win_matrix([[1.0, 1.0]])
        assert wins[0, 1] == 0 and wins[1, 0] == 0

    def test_win_matrix_recount_oracle(self):
        rng = np.random.Generator(np.random.PCG64(1))
        errors = rng.uniform(1, 2, size=(20, 4))
        wins = win_matrix(errors)
        for i in range(4):
            for j in range(4):
                if i == j:
                    continue
                want = sum(1 for r in range(20) if errors[r, i] < errors[r, j])
                assert wins[i, j] == want
                assert wins[i, j] + wins[j, i] <= 20


class TestTopK:
    def test_point_mass_model_all_hits(self):
        model = naive_fit(np.array([(1, 0)]), smoothing=False)
        ds = dataset_from_labels([(1, 0)] * 10)
        accs = topk_accuracy(model, ds, k_max=5)
        np.testing.assert_allclose(accs, 100.0)

    def test_uniform_tie_break_prefix(self):
        model = naive_fit(np.array([(0, 0)]), smoothing=True)
        model.marg_counts[:] = 0
        model.cond_counts[:] = 0
        model.n_total = 0
        # tie-break order starts (0,0), (0,1), (0,-1), ...
        ds = dataset_from_labels([(0, 0), (0, 1)])
        accs = topk_accuracy(model, ds, k_max=2)
        assert accs[0] == pytest.approx(50.0)
        assert accs[1] == pytest.approx(100.0)

    def test_monotone_in_k(self):
        rng = np.random.Generator(np.random.PCG64(2))
        labels = rng.integers(-3, 4, size=(60, 2))
        model = naive_fit(labels, smoothing=True)
        ds = dataset_from_labels(labels)
        accs = topk_accuracy(model, ds, k_max=10)
        assert np.all(np.diff(accs) >= 0)


class TestTailMetrics:
    def test_subset_selection_and_uniform_floor(self):
        labels = np.array([(2, 0)] * 3 + [(-1, 0)] * 2 + [(0, 1)] * 2)
        model = naive_fit(labels, smoothing=True)
        ds = dataset_from_labels(labels)
        ce = tail_cross_entropy(model, ds, "ask_up")
        # naive conditional on up: mass concentrated at magnitude 2
        dist_p = model.marginal_distribution(None).probs
        pos = dist_p[model.grid.index(1) :]
        want = -math.log(pos[1] / pos.sum())
        assert ce == pytest.approx(want, rel=1e-9)

    def test_no_event_samples(self):
        model = naive_fit(np.array([(1, 0)]), smoothing=True)
        ds = dataset_from_labels([(-1, 0)])
        with pytest.raises(MetricsError, match="no samples"):
            tail_cross_entropy(model, ds, "ask_up")


class TestCoeffRatio:
    def test_ratio_definition(self):
        # direct check of the ratio arithmetic via a planted theta
        from lobnet.metrics import CoeffRatioResult

        theta = np.zeros(21)
        theta[10] = 6.0
        theta[9] = 1.0
        theta[11] = 1.0
        center = theta[10:11].max()
        rest = np.concatenate([np.abs(theta[:10]), np.abs(theta[11:])])
        assert center / rest.max() == pytest.approx(6.0)

    def test_planted_recovery(self):
        cfg = SyntheticGenConfig(n_samples=25_000, case_mode=2, seed=42)
        samples, _ = synth_generate(cfg)
        stats = NormalizationStats.fit([s.state for s in samples])
        ds = build_dataset(samples, stats)
        result = coeff_ratio_study(ds, K=10, y_max=20, seed=1)
        assert result.theta[10] > 0  # positive center coefficient
        assert result.ratios[0] > 3.0
        assert result.ratios[1] >= result.ratios[0]

    def test_null_control(self):
        cfg = SyntheticGenConfig(
            n_samples=25_000, case_mode=2, seed=43,
            hazard_size_coeff=0.0, away_hazard_size_coeff=0.0,
        )
        samples, _ = synth_generate(cfg)
        stats = NormalizationStats.fit([s.state for s in samples])
        ds = build_dataset(samples, stats)
        result = coeff_ratio_study(ds, K=10, y_max=20, seed=2)
        assert abs(result.ratios[0]) < 2.0

    def test_scale_invariance_of_argmax(self):
        cfg = SyntheticGenConfig(n_samples=15_000, case_mode=2, seed=44)
        samples, _ = synth_generate(cfg)
        stats = NormalizationStats.fit([s.state for s in samples])
        ds = build_dataset(samples, stats)
        r1 = coeff_ratio_study(ds, K=6, y_max=15, seed=3)
        scaled = Dataset(
            features=ds.features * 3.0, imbalances=ds.imbalances, labels=ds.labels
        )
        r2 = coeff_ratio_study(scaled, K=6, y_max=15, seed=3)
        assert int(np.argmax(r1.theta)) == int(np.argmax(r2.theta))

    def test_requires_tail_events(self):
        ds = dataset_from_labels([(1, 0)] * 10)
        with pytest.raises(MetricsError, match="magnitude"):
            coeff_ratio_study(ds)


class TestTheoreticalPup:
    def test_equal_sizes(self):
        assert theoretical_pup(10, 10, 0.0) == pytest.approx(0.5)

    def test_zero_bid_size(self):
        assert theoretical_pup(10, 0, 0.0) == pytest.approx(0.0)

    def test_hand_evaluated_ratio_half(self):
        # (a-b)/(a+b) = 0.5, rho = 0: 0.5 - atan(0.5)/(2 atan(1))
        want = 0.5 - math.atan(0.5) / (2 * math.atan(1.0))
        assert theoretical_pup(3, 1, 0.0) == pytest.approx(want, abs=1e-15)
        assert want == pytest.approx(0.2048, abs=1e-4)

    def test_symmetry(self):
        rng = np.random.Generator(np.random.PCG64(3))
        for _ in range(200):
            a, b = rng.uniform(0.1, 100, size=2)
            rho = rng.uniform(-0.95, 0.95)
            assert theoretical_pup(a, b, rho) + theoretical_pup(b, a, rho) == pytest.approx(
                1.0, abs=1e-12
            )

    def test_validation(self):
        with pytest.raises(MetricsError):
            theoretical_pup(1, 1, 1.0)
        with pytest.raises(MetricsError):
            theoretical_pup(0, 0, 0.0)


class TestDirectionComparison:
    def test_coin_flip_floor(self):
        cfg = SyntheticGenConfig(
            n_samples=8000, case_mode=2, seed=45,
            direction_imbalance_coeff=0.0, direction_spread_coeff=0.0,
        )
        samples, _ = synth_generate(cfg)
        stats = NormalizationStats.fit([s.state for s in samples[:6000]])
        res = direction_comparison(samples[:6000], samples[6000:], stats, seed=4, epochs=15)
        for key in ("logistic", "standard", "theoretical"):
            assert res[key] >= math.log(2) - 0.02

    def test_planted_directions_beat_coin_flip(self):
        cfg = SyntheticGenConfig(n_samples=12_000, case_mode=2, seed=46)
        samples, _ = synth_generate(cfg)
        stats = NormalizationStats.fit([s.state for s in samples[:9000]])
        res = direction_comparison(samples[:9000], samples[9000:], stats, seed=5, epochs=20)
        # the arctan model captures the planted imbalance dependence
        assert res["theoretical"] < math.log(2) - 0.05
        assert res["logistic"] < math.log(2) - 0.05

    def test_increment_correlation_range(self):
        cfg = SyntheticGenConfig(n_samples=2000, case_mode=2, seed=47)
        samples, _ = synth_generate(cfg)
        rho = estimate_increment_correlation([s.state for s in samples])
        assert -1.0 < rho < 1.0


class TestEvalReport:
    def test_structure_and_consistency(self):
        labels = np.array([(1, 0)] * 30 + [(0, -1)] * 20 + [(2, 0)] * 10)
        model_a = naive_fit(labels, case_mode=2, smoothing=True)
        model_b = naive_fit(labels[:40], case_mode=2, smoothing=True)
        ds = dataset_from_labels(labels)
        report = build_eval_report({"a": model_a, "b": model_b}, ds, k_max=3)
        d = report.to_dict()
        assert set(d["cross_entropy"]) == {"a", "b"}
        assert d["topk_accuracy"]["a"][0] == d["accuracy"]["a"]
        assert all(
            x <= y for x, y in zip(d["topk_accuracy"]["a"], d["topk_accuracy"]["a"][1:])
        )
        assert d["win_matrix"][0][0] is None

    def test_self_comparison_zero(self):
        labels = np.array([(1, 0)] * 20)
        model = naive_fit(labels, smoothing=True)
        ds = dataset_from_labels(labels)
        report = build_eval_report({"m1": model, "m2": model}, ds, k_max=2)
        assert report.pct_matrix[0, 1] == pytest.approx(0.0)
        assert report.wins[0, 1] == 0 and report.wins[1, 0] == 0
