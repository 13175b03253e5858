"""Optimized product quantization: rotation + per-subspace codebooks.

Training alternates Lloyd updates of the m subspace codebooks with an
orthogonal-Procrustes update of the rotation, so the total quantization
error is non-increasing across outer iterations. With rotation disabled
(rotate=False) this degenerates to plain PQ.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import (
    ConfigurationError,
    DataError,
    ItemCatalog,
    SemanticScheme,
    check_finite,
)
from . import container


@dataclass(frozen=True)
class OPQTrainConfig:
    outer_iters: int = 10
    kmeans_iters: int = 25
    seed: int = 0
    rotate: bool = True
    normalize: bool = False  # optional L2 pre-normalization of item vectors

    def __post_init__(self):
        if self.outer_iters < 1:
            raise ConfigurationError(f"outer_iters must be >= 1, got {self.outer_iters}")
        if self.kmeans_iters < 1:
            raise ConfigurationError(f"kmeans_iters must be >= 1, got {self.kmeans_iters}")


@dataclass(frozen=True)
class OPQModel:
    """Orthogonal rotation plus m codebooks of M centroids each."""

    scheme: SemanticScheme
    rotation: np.ndarray = field(repr=False)    # (d, d)
    codebooks: np.ndarray = field(repr=False)   # (m, M, d/m)
    error_log: tuple[float, ...] = ()           # per outer iteration MSE
    normalize: bool = False

    def __post_init__(self):
        rot = np.asarray(self.rotation, dtype=np.float64)
        cbs = np.asarray(self.codebooks, dtype=np.float64)
        d, m, M = self.scheme.d, self.scheme.m, self.scheme.M
        if rot.shape != (d, d):
            raise DataError(f"rotation shape {rot.shape} != ({d}, {d})")
        if np.abs(rot.T @ rot - np.eye(d)).max() > 1e-4:
            raise DataError("rotation is not orthogonal within 1e-4")
        if cbs.shape != (m, M, self.scheme.sub_dim):
            raise DataError(
                f"codebooks shape {cbs.shape} != ({m}, {M}, {self.scheme.sub_dim})"
            )
        check_finite(cbs, "codebooks")
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "codebooks", cbs)


def _prep_vectors(vectors: np.ndarray, d: int, normalize: bool) -> np.ndarray:
    x = np.asarray(vectors, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != d:
        raise DataError(f"vectors shape {x.shape} incompatible with d={d}")
    check_finite(x, "item vectors")
    if normalize:
        norms = np.linalg.norm(x, axis=1, keepdims=True)
        x = x / np.where(norms == 0.0, 1.0, norms)
    return x


def _sq_dists(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Pairwise squared distances, (N, M)."""
    # ||p||^2 - 2 p.c + ||c||^2; clip tiny negatives from cancellation
    d2 = (
        (points * points).sum(axis=1)[:, None]
        - 2.0 * points @ centroids.T
        + (centroids * centroids).sum(axis=1)[None, :]
    )
    return np.maximum(d2, 0.0)


def _kmeanspp_init(points: np.ndarray, M: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    centroids = np.empty((M, points.shape[1]), dtype=points.dtype)
    centroids[0] = points[rng.integers(n)]
    closest = _sq_dists(points, centroids[:1]).ravel()
    for i in range(1, M):
        total = closest.sum()
        if total <= 0.0:
            # all remaining points coincide with chosen centroids
            idx = rng.integers(n)
        else:
            idx = rng.choice(n, p=closest / total)
        centroids[i] = points[idx]
        closest = np.minimum(closest, _sq_dists(points, centroids[i:i + 1]).ravel())
    return centroids


def _lloyd(points: np.ndarray, centroids: np.ndarray, iters: int):
    """Lloyd iterations with farthest-point reseeding of empty clusters."""
    M = centroids.shape[0]
    assignments = None
    for _ in range(iters):
        d2 = _sq_dists(points, centroids)
        assignments = d2.argmin(axis=1)
        new = np.zeros_like(centroids)
        counts = np.bincount(assignments, minlength=M)
        np.add.at(new, assignments, points)
        nonempty = counts > 0
        new[nonempty] /= counts[nonempty, None]
        if not nonempty.all():
            # reseed each empty cluster from the point farthest from its centroid
            point_err = d2[np.arange(points.shape[0]), assignments]
            order = np.argsort(-point_err)
            for slot, cid in enumerate(np.flatnonzero(~nonempty)):
                new[cid] = points[order[slot % points.shape[0]]]
        centroids = new
    d2 = _sq_dists(points, centroids)
    assignments = d2.argmin(axis=1)
    return centroids, assignments


def kmeans_subspace(vectors: np.ndarray, M: int, iters: int, seed: int):
    """k-means with k-means++ seeding on one subspace.

    Returns (centroids (M, w), assignments (N,)). Assignments are the
    argmin-distance centroids at the final step, ties to the lowest index.
    """
    points = np.asarray(vectors, dtype=np.float64)
    if points.ndim != 2:
        raise DataError("kmeans input must be 2-D")
    check_finite(points, "kmeans input")
    if points.shape[0] < M:
        raise ConfigurationError(
            f"need at least M={M} points, got {points.shape[0]}"
        )
    if iters < 1:
        raise ConfigurationError(f"iters must be >= 1, got {iters}")
    rng = np.random.default_rng(seed)
    centroids = _kmeanspp_init(points, M, rng)
    return _lloyd(points, centroids, iters)


def _split(x: np.ndarray, scheme: SemanticScheme) -> np.ndarray:
    """(N, d) -> (m, N, d/m) subspace view."""
    n = x.shape[0]
    return x.reshape(n, scheme.m, scheme.sub_dim).transpose(1, 0, 2)


def _assign_codes(rotated: np.ndarray, codebooks: np.ndarray, scheme: SemanticScheme):
    subs = _split(rotated, scheme)
    codes = np.empty((rotated.shape[0], scheme.m), dtype=np.uint32)
    recon = np.empty_like(rotated)
    w = scheme.sub_dim
    for j in range(scheme.m):
        a = _sq_dists(subs[j], codebooks[j]).argmin(axis=1)
        codes[:, j] = a
        recon[:, j * w:(j + 1) * w] = codebooks[j][a]
    return codes, recon


def train_opq(vectors: np.ndarray, scheme: SemanticScheme,
              config: OPQTrainConfig | None = None) -> OPQModel:
    """Fit rotation and codebooks by alternating minimization.

    Each outer iteration: Lloyd-refine all m subspace codebooks on the
    rotated data, then (unless disabled) update the rotation with the
    orthogonal-Procrustes solution of min ||X R^T - Q||_F over the d x d
    cross-covariance between reconstructions and inputs.
    """
    config = config or OPQTrainConfig()
    x = _prep_vectors(vectors, scheme.d, config.normalize)
    n = x.shape[0]
    if n < scheme.M:
        raise ConfigurationError(f"need at least M={scheme.M} vectors, got {n}")

    rng = np.random.default_rng(config.seed)
    sub_seeds = rng.integers(0, 2**31 - 1, size=scheme.m)

    rotation = np.eye(scheme.d)
    codebooks = None
    errors = []
    for it in range(config.outer_iters):
        rotated = x @ rotation.T
        subs = _split(rotated, scheme)
        if codebooks is None:
            codebooks = np.empty((scheme.m, scheme.M, scheme.sub_dim))
            for j in range(scheme.m):
                cb, _ = kmeans_subspace(
                    subs[j], scheme.M, config.kmeans_iters, int(sub_seeds[j])
                )
                codebooks[j] = cb
        else:
            for j in range(scheme.m):
                codebooks[j], _ = _lloyd(subs[j], codebooks[j], config.kmeans_iters)
        _, recon = _assign_codes(rotated, codebooks, scheme)
        errors.append(float(((rotated - recon) ** 2).sum(axis=1).mean()))

        if config.rotate and it + 1 < config.outer_iters:
            # Procrustes: maximize tr(R^T A) with A = Q^T X
            a = recon.T @ x
            u, _, vt = np.linalg.svd(a)
            rotation = u @ vt

    return OPQModel(
        scheme=scheme,
        rotation=rotation,
        codebooks=codebooks,
        error_log=tuple(errors),
        normalize=config.normalize,
    )


def encode_items(model: OPQModel, vectors: np.ndarray) -> ItemCatalog:
    """Quantize each vector's rotated subvectors to nearest centroids."""
    x = _prep_vectors(vectors, model.scheme.d, model.normalize)
    rotated = x @ model.rotation.T
    codes, _ = _assign_codes(rotated, model.codebooks, model.scheme)
    return ItemCatalog(scheme=model.scheme, codes=codes)


def quantization_error(model: OPQModel, vectors: np.ndarray) -> float:
    """Mean squared reconstruction error (1/N) sum ||R x - q(R x)||^2."""
    x = _prep_vectors(vectors, model.scheme.d, model.normalize)
    rotated = x @ model.rotation.T
    _, recon = _assign_codes(rotated, model.codebooks, model.scheme)
    return float(((rotated - recon) ** 2).sum(axis=1).mean())


MODEL_MAGIC = "sidrec-opq"
CATALOG_MAGIC = "sidrec-catalog"
VECTORS_MAGIC = "sidrec-vectors"


def save_opq_model(path, model: OPQModel) -> str:
    return container.write_container(
        path, MODEL_MAGIC, model.scheme,
        arrays={"rotation": model.rotation, "codebooks": model.codebooks},
        meta={"normalize": model.normalize, "error_log": list(model.error_log)},
    )


def load_opq_model(path) -> tuple[OPQModel, str]:
    scheme, arrays, meta = container.read_container(path, MODEL_MAGIC)
    model = OPQModel(
        scheme=scheme,
        rotation=arrays["rotation"],
        codebooks=arrays["codebooks"],
        error_log=tuple(meta.get("error_log", ())),
        normalize=bool(meta.get("normalize", False)),
    )
    return model, meta["digest"]


def save_catalog(path, catalog: ItemCatalog, model_digest: str | None = None) -> str:
    meta = {}
    if model_digest is not None:
        meta["opq_digest"] = model_digest
    return container.write_container(
        path, CATALOG_MAGIC, catalog.scheme, arrays={"codes": catalog.codes}, meta=meta
    )


def load_catalog(path) -> tuple[ItemCatalog, str]:
    scheme, arrays, meta = container.read_container(path, CATALOG_MAGIC)
    return ItemCatalog(scheme=scheme, codes=arrays["codes"]), meta["digest"]


def save_vectors(path, vectors: np.ndarray) -> str:
    vectors = check_finite(np.asarray(vectors, dtype=np.float64), "item vectors")
    return container.write_container(
        path, VECTORS_MAGIC, None, arrays={"vectors": vectors}
    )


def load_vectors(path) -> np.ndarray:
    _, arrays, _ = container.read_container(path, VECTORS_MAGIC)
    return np.asarray(arrays["vectors"], dtype=np.float64)
