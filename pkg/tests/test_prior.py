import numpy as np
import pytest

from app.core.exceptions import ArtifactError
from app.core.random import derive_rng
from app.models.grid import Grid
from app.services.prior_service import PrecisionOperator, neumann_laplacian, prior_service


class TestGrid:
    def test_spacing_and_size(self):
        grid = Grid(nx=5, ny=3, lx=2.0, ly=1.0)
        assert grid.n == 15
        assert grid.hx == pytest.approx(0.5)
        assert grid.hy == pytest.approx(0.5)

    def test_row_major_ordering(self):
        grid = Grid(nx=4, ny=3)
        xy = grid.coordinates()
        np.testing.assert_allclose(xy[1], [1.0 / 3.0, 0.0])
        np.testing.assert_allclose(xy[4], [0.0, 0.5])

    def test_nearest_node_snaps(self):
        grid = Grid(nx=5, ny=5)
        assert grid.nearest_node(0.26, 0.49) == 2 * 5 + 1

    def test_point_outside_domain(self):
        with pytest.raises(ValueError, match="outside the domain"):
            Grid(nx=5, ny=5).nearest_node(1.2, 0.5)


class TestPrecisionOperator:
    def test_laplacian_annihilates_constants(self):
        lap = neumann_laplacian(Grid(nx=6, ny=5))
        np.testing.assert_allclose(lap @ np.ones(30), 0.0, atol=1e-12)

    def test_symmetric_with_delta_on_constants(self):
        op = PrecisionOperator(Grid(nx=6, ny=6), gamma=0.7, delta=3.0)
        a = op.matrix.toarray()
        np.testing.assert_allclose(a, a.T)
        np.testing.assert_allclose(a @ np.ones(36), 3.0)

    @pytest.mark.parametrize("gamma, delta", [(-1.0, 1.0), (1.0, 0.0)])
    def test_rejects_invalid_coefficients(self, gamma, delta):
        with pytest.raises(ValueError):
            PrecisionOperator(Grid(nx=3, ny=3), gamma, delta)


class TestBuildPrior:
    def test_gamma_zero_closed_form(self):
        prior = prior_service.build_prior(Grid(nx=2, ny=2), gamma=0.0, delta=2.0)
        np.testing.assert_allclose(prior.covariance(), 0.25 * np.identity(4), atol=1e-14)

    def test_matches_dense_inverse(self):
        grid = Grid(nx=8, ny=8)
        prior = prior_service.build_prior(grid, gamma=1.0, delta=5.0)
        a = prior.precision_op.matrix.toarray()
        a_inv = np.linalg.inv(a)
        expected = a_inv @ np.diag(prior.mass_diag) @ a_inv
        np.testing.assert_allclose(prior.covariance(), expected, rtol=1e-10)

    def test_covariance_is_symmetric_positive_definite(self, field_prior):
        cov = field_prior.covariance()
        np.testing.assert_allclose(cov, cov.T, atol=1e-14)
        assert np.linalg.eigvalsh(cov).min() > 0

    def test_mean_length_checked(self):
        with pytest.raises(ValueError, match="mean has length"):
            prior_service.build_prior(Grid(nx=3, ny=3), 0.1, 1.0, mean=[0.0, 1.0])

    def test_precision_inverts_covariance(self, field_prior):
        product = field_prior.precision() @ field_prior.covariance()
        np.testing.assert_allclose(product, np.identity(field_prior.n), atol=1e-8)


class TestSampling:
    def test_same_stream_same_draw(self, field_prior):
        a = prior_service.prior_sample(field_prior, derive_rng(3, 0, 1))
        b = prior_service.prior_sample(field_prior, derive_rng(3, 0, 1))
        np.testing.assert_array_equal(a, b)

    def test_batch_shape(self, field_prior):
        block = prior_service.prior_sample(field_prior, derive_rng(1), count=5)
        assert block.shape == (5, field_prior.n)

    def test_whitened_samples_have_identity_covariance(self):
        prior = prior_service.build_prior(Grid(nx=8, ny=8), gamma=0.1, delta=1.0)
        samples = prior.sample(derive_rng(11), count=100_000)
        white = prior.whiten(samples)
        sample_cov = np.cov(white, rowvar=False)
        assert np.max(np.abs(sample_cov - np.identity(prior.n))) < 0.05

    def test_whiten_unwhiten_inverse(self, field_prior):
        m = field_prior.sample(derive_rng(5))
        np.testing.assert_allclose(field_prior.unwhiten(field_prior.whiten(m)), m, atol=1e-10)

    def test_whiten_length_mismatch(self, field_prior):
        with pytest.raises(ValueError, match="does not match prior dimension"):
            field_prior.whiten(np.zeros(field_prior.n + 1))


class TestDensePrior:
    def test_cholesky_factor(self):
        cov = np.array([[2.0, 0.5], [0.5, 1.0]])
        prior = prior_service.build_dense_prior([1.0, -1.0], cov)
        np.testing.assert_allclose(prior.cov_factor @ prior.cov_factor.T, cov)
        np.testing.assert_allclose(prior.mean, [1.0, -1.0])

    def test_rejects_indefinite(self):
        with pytest.raises(ValueError, match="positive definite"):
            prior_service.build_dense_prior(0.0, [[1.0, 2.0], [2.0, 1.0]])


class TestPriorPersistence:
    def test_field_prior_round_trip(self, tmp_path, field_prior):
        prior_service.save_prior(field_prior, tmp_path / "prior")
        loaded = prior_service.load_prior(tmp_path / "prior")
        assert loaded.grid == field_prior.grid
        assert loaded.gamma == field_prior.gamma
        np.testing.assert_allclose(loaded.covariance(), field_prior.covariance())

    def test_dense_prior_round_trip(self, tmp_path):
        prior = prior_service.build_dense_prior(0.5, np.diag([1.0, 4.0]))
        prior_service.save_prior(prior, tmp_path / "prior")
        loaded = prior_service.load_prior(tmp_path / "prior")
        np.testing.assert_allclose(loaded.covariance(), np.diag([1.0, 4.0]))

    def test_truncated_payload(self, tmp_path, field_prior):
        paths = prior_service.save_prior(field_prior, tmp_path / "prior")
        payload = paths[1]
        payload.write_bytes(payload.read_bytes()[:-8])
        with pytest.raises(ArtifactError, match="truncated"):
            prior_service.load_prior(tmp_path / "prior")
