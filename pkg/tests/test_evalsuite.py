import numpy as np
import pytest

from anisoalign.errors import DegenerateSpectrum, InvalidInput, PairMismatch
from anisoalign.evalsuite import (
    build_metric_report,
    delta_mu,
    instance_consistency,
    method_residual,
    metric_report_csv_row,
    metric_report_to_json,
    mixing_scores,
    neighborhood_consistency,
    relative_geometry,
)
from anisoalign.numerics import haar_subspace
from anisoalign.store import EmbeddingSet, l2_normalize


def unit_cloud(rng, n, d, mean=0.4, spread=1.0):
    raw = spread * rng.standard_normal((n, d)) + mean
    return l2_normalize(EmbeddingSet(data=raw)).data


@pytest.fixture
def clouds():
    rng = np.random.default_rng(0)
    y = unit_cloud(rng, 500, 16)
    x = unit_cloud(rng, 500, 16)
    return y, x


class TestInstanceConsistency:
    def test_self(self, clouds):
        y, _ = clouds
        assert instance_consistency(y, y) == pytest.approx(1.0)

    def test_negation(self, clouds):
        y, _ = clouds
        assert instance_consistency(y, -y) == pytest.approx(-1.0)

    def test_shape_mismatch(self, clouds):
        y, x = clouds
        with pytest.raises(PairMismatch):
            instance_consistency(y, x[:-1])

    def test_requires_unit(self, clouds):
        y, _ = clouds
        with pytest.raises(InvalidInput):
            instance_consistency(2.0 * y, y)


class TestRelativeGeometry:
    def test_self(self, clouds):
        y, _ = clouds
        assert relative_geometry(y, y, seed=1) == pytest.approx(1.0)

    def test_orthogonal_invariance(self, clouds):
        y, _ = clouds
        q = haar_subspace(16, 16, np.random.default_rng(2))
        assert relative_geometry(y, y @ q.T, seed=1) == pytest.approx(1.0, abs=1e-9)

    def test_permuted_near_zero_on_clustered_data(self):
        rng = np.random.default_rng(3)
        centers = rng.standard_normal((5, 12)) * 2.0
        labels = rng.integers(0, 5, 600)
        raw = centers[labels] + 0.2 * rng.standard_normal((600, 12))
        y = l2_normalize(EmbeddingSet(data=raw)).data
        z = y[rng.permutation(600)]
        psi = relative_geometry(y, z, seed=4)
        assert abs(psi) < 0.1

    def test_degenerate_variance(self):
        y = np.tile([1.0, 0.0], (10, 1))
        with pytest.raises(DegenerateSpectrum):
            relative_geometry(y, y, seed=0)

    def test_small_n_uses_all_pairs(self):
        rng = np.random.default_rng(5)
        y = unit_cloud(rng, 40, 8)
        a = relative_geometry(y, y, seed=0)
        b = relative_geometry(y, y, seed=99)
        assert a == b == pytest.approx(1.0)


class TestNeighborhoodConsistency:
    def test_self(self, clouds):
        y, _ = clouds
        assert neighborhood_consistency(y, y, k=10) == pytest.approx(1.0)

    def test_orthogonal_invariance(self, clouds):
        y, _ = clouds
        q = haar_subspace(16, 16, np.random.default_rng(6))
        assert neighborhood_consistency(y, y @ q.T, k=10) == pytest.approx(1.0)

    def test_permuted_near_random_overlap(self, clouds):
        y, _ = clouds
        rng = np.random.default_rng(7)
        z = y[rng.permutation(len(y))]
        k, n = 20, len(y)
        omega = neighborhood_consistency(y, z, k=k)
        assert omega < 3 * k / (n - 1)

    def test_k_too_large(self, clouds):
        y, _ = clouds
        with pytest.raises(InvalidInput):
            neighborhood_consistency(y[:10], y[:10], k=10)


class TestMixingScores:
    def test_identical_distribution_near_ceiling(self):
        rng = np.random.default_rng(8)
        x = unit_cloud(rng, 800, 12)
        z = unit_cloud(rng, 800, 12)
        m_z, m_x = mixing_scores(z, x, permutations=10, seed=9)
        assert m_z >= 0.9 and m_x >= 0.9
        assert m_z <= 1.05 and m_x <= 1.05

    def test_separated_cluster_zero(self):
        rng = np.random.default_rng(10)
        x = unit_cloud(rng, 400, 12, mean=2.0, spread=0.1)
        z = unit_cloud(rng, 400, 12, mean=-2.0, spread=0.1)
        m_z, m_x = mixing_scores(z, x, permutations=10, seed=11)
        assert m_z == pytest.approx(0.0, abs=1e-9)
        assert m_x == pytest.approx(0.0, abs=1e-9)

    def test_deterministic(self):
        rng = np.random.default_rng(12)
        x = unit_cloud(rng, 300, 8)
        z = unit_cloud(rng, 300, 8)
        assert mixing_scores(z, x, seed=3) == mixing_scores(z, x, seed=3)

    def test_k_bounds(self):
        rng = np.random.default_rng(13)
        x = unit_cloud(rng, 5, 4)
        z = unit_cloud(rng, 5, 4)
        with pytest.raises(InvalidInput):
            mixing_scores(z, x, k=9)


class TestMethodResidual:
    def test_exact_match_flagged(self, clouds):
        _, x = clouds
        a_r, spectrum, degenerate = method_residual(x, x.copy())
        assert degenerate
        assert a_r == 1.0
        assert np.allclose(spectrum, 0.0)

    def test_uncentered_convention(self):
        rng = np.random.default_rng(14)
        x = unit_cloud(rng, 300, 8)
        z = unit_cloud(rng, 300, 8)
        a_r, spectrum, _ = method_residual(x, z)
        r = x - z
        sigma = r.T @ r / len(r)
        from anisoalign.numerics import sym_eig

        vals = np.maximum(sym_eig(sigma).values, 0)
        assert a_r == pytest.approx(vals[0] / (vals.sum() / 8), rel=1e-9)
        assert spectrum.sum() == pytest.approx(1.0)

    def test_planted_full_rank_correction_leaves_nothing(self):
        rng = np.random.default_rng(15)
        x = unit_cloud(rng, 200, 6)
        a_r, spectrum, degenerate = method_residual(x, x + 0.0)
        assert degenerate and a_r == 1.0


class TestOrthogonalInvariance:
    def test_all_metrics_invariant(self):
        rng = np.random.default_rng(16)
        y = unit_cloud(rng, 400, 10)
        z = unit_cloud(rng, 400, 10, mean=0.3)
        x = unit_cloud(rng, 400, 10, mean=0.5)
        q = haar_subspace(10, 10, np.random.default_rng(17))
        a = build_metric_report(y, z, x, permutations=5, seed=18)
        b = build_metric_report(y @ q.T, z @ q.T, x @ q.T, permutations=5, seed=18)
        for field in ("phi", "psi", "omega_k", "m_z", "m_x", "a_r_t", "delta_mu"):
            assert getattr(a, field) == pytest.approx(getattr(b, field), abs=1e-9)


class TestReportSerialization:
    def test_deterministic_json_and_csv(self):
        rng = np.random.default_rng(19)
        y = unit_cloud(rng, 200, 6)
        z = unit_cloud(rng, 200, 6)
        x = unit_cloud(rng, 200, 6)
        a = build_metric_report(y, z, x, method="m", permutations=5, seed=20)
        b = build_metric_report(y, z, x, method="m", permutations=5, seed=20)
        assert metric_report_to_json(a) == metric_report_to_json(b)
        assert metric_report_csv_row(a) == metric_report_csv_row(b)

    def test_delta_mu(self):
        z = np.tile([1.0, 0.0], (5, 1))
        x = np.tile([0.0, 1.0], (5, 1))
        assert delta_mu(z, x) == pytest.approx(np.sqrt(2.0))
