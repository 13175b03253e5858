"""Quantizer training: k-means, rotation updates, encoding, persistence."""

import numpy as np
import pytest

from sidrec.core import ConfigurationError, DataError, SemanticScheme
from sidrec.opq import (
    OPQModel,
    OPQTrainConfig,
    encode_items,
    kmeans_subspace,
    load_catalog,
    load_opq_model,
    load_vectors,
    quantization_error,
    save_catalog,
    save_opq_model,
    save_vectors,
    train_opq,
)


def _blob_points(rng, centers, per_blob, spread):
    points = np.concatenate([
        c + spread * rng.normal(size=(per_blob, centers.shape[1]))
        for c in centers
    ])
    rng.shuffle(points)
    return points


class TestKMeans:
    def test_recovers_separated_blob_means(self):
        """With well-separated blobs, the fitted centroids converge to the
        per-blob sample means (independently recomputed here)."""
        rng = np.random.default_rng(3)
        true_centers = np.asarray([[0.0, 0.0], [10.0, 0.0], [0.0, 10.0], [10.0, 10.0]])
        points = _blob_points(rng, true_centers, per_blob=50, spread=0.2)
        centroids, assignments = kmeans_subspace(points, M=4, iters=50, seed=0)

        # oracle: group points by nearest true center, compare means
        true_assign = np.linalg.norm(
            points[:, None, :] - true_centers[None], axis=2).argmin(axis=1)
        for g in range(4):
            blob_mean = points[true_assign == g].mean(axis=0)
            nearest = np.linalg.norm(centroids - blob_mean, axis=1).argmin()
            np.testing.assert_allclose(centroids[nearest], blob_mean, atol=1e-8)

        # every blob maps to exactly one cluster
        assert len({frozenset(np.flatnonzero(true_assign == g))
                    for g in range(4)}) == 4
        assert assignments.shape == (200,)

    def test_assignment_is_argmin_distance(self):
        rng = np.random.default_rng(0)
        points = rng.normal(size=(60, 3))
        centroids, assignments = kmeans_subspace(points, M=5, iters=10, seed=1)
        d2 = ((points[:, None, :] - centroids[None]) ** 2).sum(axis=2)
        np.testing.assert_array_equal(assignments, d2.argmin(axis=1))

    def test_rejects_fewer_points_than_centroids(self):
        with pytest.raises(ConfigurationError):
            kmeans_subspace(np.zeros((3, 2)), M=4, iters=5, seed=0)

    def test_rejects_non_finite(self):
        pts = np.zeros((10, 2))
        pts[0, 0] = np.nan
        with pytest.raises(DataError):
            kmeans_subspace(pts, M=2, iters=5, seed=0)

    def test_n_equals_m_distinct_points_zero_error(self):
        """With exactly M distinct points each becomes its own centroid."""
        rng = np.random.default_rng(4)
        points = rng.normal(size=(6, 3)) * 5.0
        centroids, assignments = kmeans_subspace(points, M=6, iters=30, seed=0)
        err = ((points - centroids[assignments]) ** 2).sum()
        assert err < 1e-12
        assert len(set(assignments.tolist())) == 6

    def test_more_iterations_never_hurt(self):
        rng = np.random.default_rng(5)
        points = rng.normal(size=(200, 4))

        def error(iters):
            centroids, assignments = kmeans_subspace(points, M=8, iters=iters,
                                                     seed=3)
            return ((points - centroids[assignments]) ** 2).sum()

        assert error(20) <= error(1) + 1e-9

    def test_no_empty_clusters_on_duplicates(self):
        """Heavy duplication forces empty clusters during Lloyd; reseeding
        must still return M used-or-valid centroids without NaNs."""
        points = np.repeat(np.asarray([[0.0, 0.0], [5.0, 5.0]]), 30, axis=0)
        centroids, assignments = kmeans_subspace(points, M=4, iters=20, seed=2)
        assert np.isfinite(centroids).all()
        assert assignments.max() < 4


class TestTrainOPQ:
    SCHEME = SemanticScheme(m=4, M=8, d=16)

    def _vectors(self, n=400, seed=0):
        rng = np.random.default_rng(seed)
        centers = rng.normal(size=(8, 16)) * 3.0
        return centers[rng.integers(8, size=n)] + 0.1 * rng.normal(size=(n, 16))

    def test_error_log_non_increasing(self):
        model = train_opq(self._vectors(), self.SCHEME,
                          OPQTrainConfig(outer_iters=8, kmeans_iters=10, seed=0))
        errors = np.asarray(model.error_log)
        assert len(errors) == 8
        assert (np.diff(errors) <= 1e-9).all()

    def test_error_log_matches_brute_force_oracle(self):
        """Final logged error equals an independently recomputed mean of
        min-over-centroids squared subvector distances."""
        vectors = self._vectors(n=200)
        model = train_opq(vectors, self.SCHEME,
                          OPQTrainConfig(outer_iters=3, kmeans_iters=5, seed=1))
        rotated = vectors @ model.rotation.T
        w = self.SCHEME.sub_dim
        total = np.zeros(len(vectors))
        for j in range(self.SCHEME.m):
            sub = rotated[:, j * w:(j + 1) * w]
            d2 = ((sub[:, None, :] - model.codebooks[j][None]) ** 2).sum(axis=2)
            total += d2.min(axis=1)
        assert abs(total.mean() - model.error_log[-1]) < 1e-8
        assert abs(quantization_error(model, vectors) - model.error_log[-1]) < 1e-8

    def test_rotation_is_orthogonal(self):
        model = train_opq(self._vectors(), self.SCHEME,
                          OPQTrainConfig(outer_iters=5, kmeans_iters=8, seed=0))
        d = self.SCHEME.d
        np.testing.assert_allclose(model.rotation.T @ model.rotation,
                                   np.eye(d), atol=1e-10)

    def test_rotate_false_keeps_identity(self):
        model = train_opq(self._vectors(), self.SCHEME,
                          OPQTrainConfig(outer_iters=4, kmeans_iters=8,
                                         seed=0, rotate=False))
        np.testing.assert_array_equal(model.rotation, np.eye(self.SCHEME.d))

    def test_rotation_helps_on_mixed_subspaces(self):
        """Product-structured data scrambled by a random orthogonal mixing
        is much harder for plain per-subspace coding; the learned rotation
        recovers most of the gap."""
        rng = np.random.default_rng(7)
        scheme = SemanticScheme(m=4, M=8, d=16)
        centers = rng.normal(size=(scheme.m, 8, scheme.sub_dim)) * 2.0
        n = 600
        x = np.empty((n, scheme.d))
        for j in range(scheme.m):
            pick = rng.integers(8, size=n)
            x[:, j * 4:(j + 1) * 4] = (
                centers[j][pick] + 0.05 * rng.normal(size=(n, 4))
            )
        q, _ = np.linalg.qr(rng.normal(size=(scheme.d, scheme.d)))
        mixed = x @ q.T
        cfg = dict(outer_iters=12, kmeans_iters=20, seed=7)
        with_rot = train_opq(mixed, scheme, OPQTrainConfig(**cfg, rotate=True))
        without = train_opq(mixed, scheme, OPQTrainConfig(**cfg, rotate=False))
        assert with_rot.error_log[-1] < 0.8 * without.error_log[-1]

    def test_deterministic_per_seed(self):
        vectors = self._vectors()
        cfg = OPQTrainConfig(outer_iters=4, kmeans_iters=8, seed=5)
        a = train_opq(vectors, self.SCHEME, cfg)
        b = train_opq(vectors, self.SCHEME, cfg)
        np.testing.assert_array_equal(a.rotation, b.rotation)
        np.testing.assert_array_equal(a.codebooks, b.codebooks)

    def test_rejects_too_few_vectors(self):
        with pytest.raises(ConfigurationError):
            train_opq(np.zeros((4, 16)), self.SCHEME, OPQTrainConfig(seed=0))

    def test_rejects_wrong_width(self):
        with pytest.raises(DataError):
            train_opq(np.zeros((50, 12)), self.SCHEME, OPQTrainConfig(seed=0))

    def test_invalid_schedule_rejected(self):
        with pytest.raises(ConfigurationError):
            OPQTrainConfig(outer_iters=0)
        with pytest.raises(ConfigurationError):
            OPQTrainConfig(kmeans_iters=0)

    def test_normalize_flag_scales_inputs(self):
        vectors = self._vectors()
        model = train_opq(vectors, self.SCHEME,
                          OPQTrainConfig(outer_iters=3, kmeans_iters=5,
                                         seed=0, normalize=True))
        assert model.normalize
        # unit-norm inputs: per-vector reconstruction error is bounded by 4
        assert quantization_error(model, vectors) < 4.0


class TestEncodeItems:
    SCHEME = SemanticScheme(m=2, M=4, d=4)

    def test_codes_are_nearest_centroids(self):
        rng = np.random.default_rng(1)
        vectors = rng.normal(size=(50, 4))
        model = train_opq(vectors, self.SCHEME,
                          OPQTrainConfig(outer_iters=3, kmeans_iters=10, seed=0))
        catalog = encode_items(model, vectors)
        rotated = vectors @ model.rotation.T
        for j in range(2):
            sub = rotated[:, j * 2:(j + 1) * 2]
            d2 = ((sub[:, None, :] - model.codebooks[j][None]) ** 2).sum(axis=2)
            np.testing.assert_array_equal(catalog.codes[:, j], d2.argmin(axis=1))

    def test_digit_depends_only_on_its_subspace_without_rotation(self):
        """With rotation disabled, perturbing subspace 0 cannot change any
        other digit's code."""
        rng = np.random.default_rng(2)
        vectors = rng.normal(size=(80, 4))
        model = train_opq(vectors, self.SCHEME,
                          OPQTrainConfig(outer_iters=3, kmeans_iters=10,
                                         seed=0, rotate=False))
        bumped = vectors.copy()
        bumped[:, :2] += rng.normal(size=(80, 2))
        before = encode_items(model, vectors).codes
        after = encode_items(model, bumped).codes
        np.testing.assert_array_equal(before[:, 1], after[:, 1])

    def test_tie_breaks_to_lower_centroid_index(self):
        """A point equidistant from two centroids gets the lower index."""
        model = OPQModel(
            scheme=self.SCHEME,
            rotation=np.eye(4),
            codebooks=np.asarray([
                [[-1.0, 0.0], [1.0, 0.0], [9.0, 9.0], [9.0, -9.0]],
                [[0.0, -1.0], [0.0, 1.0], [9.0, 9.0], [9.0, -9.0]],
            ]),
        )
        catalog = encode_items(model, np.zeros((1, 4)))
        np.testing.assert_array_equal(catalog.codes, [[0, 0]])


class TestPersistence:
    SCHEME = SemanticScheme(m=2, M=4, d=4)

    def _model(self):
        rng = np.random.default_rng(0)
        vectors = rng.normal(size=(40, 4))
        return train_opq(vectors, self.SCHEME,
                         OPQTrainConfig(outer_iters=3, kmeans_iters=5, seed=0)), vectors

    def test_model_round_trip(self, tmp_path):
        model, _ = self._model()
        path = tmp_path / "quantizer.bin"
        save_opq_model(path, model)
        loaded, digest = load_opq_model(path)
        assert loaded.scheme == model.scheme
        assert digest
        np.testing.assert_allclose(loaded.rotation, model.rotation, atol=1e-7)
        np.testing.assert_allclose(loaded.codebooks, model.codebooks, atol=1e-6)
        np.testing.assert_allclose(loaded.error_log, model.error_log, rtol=1e-6)

    def test_catalog_round_trip_records_upstream_digest(self, tmp_path):
        model, vectors = self._model()
        catalog = encode_items(model, vectors)
        model_digest = save_opq_model(tmp_path / "quantizer.bin", model)
        save_catalog(tmp_path / "catalog.bin", catalog, model_digest=model_digest)
        loaded, _ = load_catalog(tmp_path / "catalog.bin")
        np.testing.assert_array_equal(loaded.codes, catalog.codes)
        from sidrec.container import read_container
        _, _, meta = read_container(tmp_path / "catalog.bin", "sidrec-catalog")
        assert meta["opq_digest"] == model_digest

    def test_vectors_round_trip(self, tmp_path):
        vectors = np.random.default_rng(0).normal(size=(10, 4))
        save_vectors(tmp_path / "vectors.bin", vectors)
        loaded = load_vectors(tmp_path / "vectors.bin")
        np.testing.assert_allclose(loaded, vectors, atol=1e-6)


class TestQuantizationError:
    SCHEME = SemanticScheme(m=2, M=4, d=4)

    def _model_with_codebooks(self, codebooks):
        return OPQModel(scheme=self.SCHEME, rotation=np.eye(4),
                        codebooks=np.asarray(codebooks, dtype=np.float64))

    def test_centroid_exact_inputs_give_zero(self):
        codebooks = np.random.default_rng(0).normal(size=(2, 4, 2))
        model = self._model_with_codebooks(codebooks)
        vectors = np.concatenate([codebooks[0, 1], codebooks[1, 3]])[None, :]
        assert quantization_error(model, vectors) == 0.0

    def test_analytic_single_subspace_value(self):
        """One input whose second subvector has norm 2 while the nearest
        centroid sits at the origin: squared error is exactly 4."""
        codebooks = np.zeros((2, 4, 2))
        codebooks[0, 0] = [1.0, 1.0]
        codebooks[0, 1:] = 50.0  # keep other centroids far away
        codebooks[1, 1:] = 50.0
        vec = np.asarray([[1.0, 1.0, 2.0, 0.0]])
        model = self._model_with_codebooks(codebooks)
        assert quantization_error(model, vec) == pytest.approx(4.0)


def test_opq_model_rejects_non_orthogonal_rotation():
    scheme = SemanticScheme(m=2, M=4, d=4)
    with pytest.raises(DataError):
        OPQModel(scheme=scheme, rotation=np.eye(4) * 2.0,
                 codebooks=np.zeros((2, 4, 2)))
