import math

import numpy as np
import pytest

from decode.metrics import (
    ForecastResult,
    ablation_report,
    crps,
    curve_trend,
    gaussian_crps,
    horizon_curve,
    mae,
    write_ablation_csv,
    write_horizon_csv,
)


def brute_crps(X, y):
    S = len(X)
    a = sum(abs(x - y) for x in X) / S
    b = sum(abs(xi - xj) for xi in X for xj in X) / (2 * S * S)
    return a - b


class TestMAE:
    def test_exact(self):
        truth = np.random.default_rng(0).standard_normal((5, 3))
        assert mae(ForecastResult(np.stack([truth] * 3), truth)) == 0

    def test_offset(self):
        truth = np.zeros((4, 2))
        assert mae(ForecastResult(np.ones((3, 4, 2)), truth)) == 1.0

    def test_brute_force(self):
        rng = np.random.default_rng(1)
        ens, truth = rng.standard_normal((8, 4, 2)), rng.standard_normal((4, 2))
        total = 0.0
        for i in range(4):
            for j in range(2):
                total += abs(float(np.median(ens[:, i, j])) - truth[i, j])
        assert mae(ForecastResult(ens, truth)) == pytest.approx(total / 8, abs=1e-12)

    def test_per_channel(self):
        truth = np.zeros((4, 2))
        ens = np.zeros((1, 4, 2))
        ens[..., 1] = 2
        np.testing.assert_array_equal(mae(ForecastResult(ens, truth), per_channel=True), [0, 2])

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            ForecastResult(np.zeros((2, 3, 2)), np.zeros((4, 2)))


class TestCRPS:
    def test_degenerate_zero(self):
        truth = np.random.default_rng(2).standard_normal((3, 2))
        assert crps(ForecastResult(np.stack([truth] * 5), truth)) == 0.0

    def test_two_point(self):
        a = 0.7
        res = ForecastResult(np.array([[[1 - a]], [[1 + a]]]), np.array([[1.0]]))
        assert crps(res) == pytest.approx(a / 2, abs=1e-15)

    def test_brute_force(self):
        rng = np.random.default_rng(3)
        for S in (2, 3, 7, 10):
            ens, truth = rng.standard_normal((S, 3, 2)), rng.standard_normal((3, 2))
            expected = np.mean([brute_crps(ens[:, i, j].tolist(), truth[i, j]) for i in range(3) for j in range(2)])
            assert crps(ForecastResult(ens, truth)) == pytest.approx(expected, abs=1e-10)

    def test_gaussian_closed_form(self):
        expected = 2 * (1 / math.sqrt(2 * math.pi)) - 1 / math.sqrt(math.pi)
        assert gaussian_crps(0, 1, 0) == pytest.approx(expected, abs=1e-15)
        assert expected == pytest.approx(0.2337, abs=1e-4)
        ens = np.random.default_rng(4).standard_normal((10000, 1, 1))
        assert abs(crps(ForecastResult(ens, np.zeros((1, 1)))) - expected) / expected < 0.02

    def test_single_member_warns(self):
        with pytest.warns(UserWarning):
            v = crps(ForecastResult(np.ones((1, 2, 1)), np.zeros((2, 1))))
        assert v == 1.0

    def test_per_step(self):
        rng = np.random.default_rng(5)
        res = ForecastResult(rng.standard_normal((4, 6, 2)), rng.standard_normal((6, 2)))
        assert crps(res, per_step=True).shape == (6,)
        assert crps(res, per_step=True).mean() == pytest.approx(crps(res))

    def test_channel_permutation(self):
        rng = np.random.default_rng(6)
        ens, truth = rng.standard_normal((5, 4, 3)), rng.standard_normal((4, 3))
        perm = [2, 0, 1]
        a, b = ForecastResult(ens, truth), ForecastResult(ens[..., perm], truth[..., perm])
        assert crps(a) == pytest.approx(crps(b), abs=1e-14)
        assert mae(a) == pytest.approx(mae(b), abs=1e-14)


class TestHorizon:
    def test_flat_zero(self):
        truth = np.zeros((6, 2))
        lead, curve, n = horizon_curve([ForecastResult(np.zeros((2, 6, 2)), truth)] * 3)
        assert lead.tolist() == [1, 2, 3, 4, 5, 6] and np.all(curve == 0) and n == 3

    def test_mixed(self):
        with pytest.raises(ValueError, match="mixed"):
            horizon_curve([ForecastResult(np.zeros((1, 3, 1)), np.zeros((3, 1))),
                           ForecastResult(np.zeros((1, 4, 1)), np.zeros((4, 1)))])

    def test_random_walk_increasing(self):
        results = []
        for seed in range(100):
            rng = np.random.default_rng(seed)
            walk = np.cumsum(rng.standard_normal(21))
            truth = walk[1:, None]
            frozen = np.full((1, 20, 1), walk[0])  # persistence forecast
            results.append(ForecastResult(frozen, truth))
        _, curve, _ = horizon_curve(results)
        assert curve_trend(curve) > 0.5

    def test_csv(self, tmp_path):
        write_horizon_csv([ForecastResult(np.ones((1, 3, 1)), np.zeros((3, 1)))], tmp_path / "h.csv")
        lines = (tmp_path / "h.csv").read_text().splitlines()
        assert lines[0] == "lead,mae_uv,n" and len(lines) == 4


class TestAblation:
    def results(self, seed, n=6):
        rng = np.random.default_rng(seed)
        truth = [np.random.default_rng(100 + i).standard_normal((4, 2)) for i in range(n)]
        return [ForecastResult(t + rng.standard_normal((3, 4, 2)), t) for t in truth]

    def test_duplicate_variant(self):
        r = self.results(0)
        rows = ablation_report({"a": r, "b": list(r)})
        assert len(rows) == 2
        assert rows[1].mean_diff == 0 and rows[1].p_sign == 1.0

    def test_better_variant(self):
        base = self.results(0, n=12)
        better = [ForecastResult(r.truth + 0.1 * (r.ensemble - r.truth), r.truth) for r in base]
        rows = ablation_report({"history": base, "dual": better})
        assert rows[1].n_better == 12 and rows[1].p_sign < 0.001
        assert rows[1].relative_improvement > 0.5

    def test_task_mismatch(self):
        with pytest.raises(ValueError, match="same tasks"):
            ablation_report({"a": self.results(0), "b": self.results(1, n=5)})

    def test_csv(self, tmp_path):
        rows = ablation_report({"a": self.results(0), "b": self.results(1), "c": self.results(2)})
        write_ablation_csv(rows, tmp_path / "a.csv")
        assert len((tmp_path / "a.csv").read_text().splitlines()) == 4
