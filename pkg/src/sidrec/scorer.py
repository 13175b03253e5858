"""Candidate scoring: per-digit log-probability cache and exact top-K.

Once the per-digit log-softmax vectors are cached for a query, any
candidate's logit is an O(m) sum of table entries; the exact top-K scan
over the whole catalog is the brute-force oracle the graph decoder
approximates. All accumulation is in log space.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import (
    ConfigurationError,
    ContractViolation,
    DataError,
    ItemCatalog,
    SemanticID,
    SemanticScheme,
    validate_semantic_id,
)
from .model import ModelCheckpoint, log_softmax, project_heads


@dataclass(frozen=True)
class LogitCache:
    """Per-digit log-probabilities (m, M) for one encoded sequence."""

    logp: np.ndarray = field(repr=False)
    checkpoint_digest: str | None = None

    def __post_init__(self):
        logp = np.asarray(self.logp, dtype=np.float64)
        if logp.ndim != 2:
            raise DataError("logit cache must be (m, M)")
        if not np.isfinite(logp).all():
            raise DataError("logit cache contains non-finite entries")
        sums = np.exp(logp).sum(axis=1)
        if np.abs(sums - 1.0).max() > 1e-5:
            raise DataError("logit cache rows do not exponentiate to 1")
        logp.setflags(write=False)
        object.__setattr__(self, "logp", logp)


def build_logit_cache(s: np.ndarray, ckpt: ModelCheckpoint,
                      checkpoint_digest: str | None = None) -> LogitCache:
    """Log-softmax of E_j . g_j(s) / tau per digit, max-subtracted."""
    s = np.asarray(s, dtype=np.float64)
    if not np.isfinite(s).all():
        raise DataError("sequence representation contains non-finite values")
    g = project_heads(s, ckpt)
    z = np.einsum("jMd,jd->jM", ckpt.token_tables, g) / ckpt.temperature
    return LogitCache(logp=log_softmax(z, axis=1),
                      checkpoint_digest=checkpoint_digest)


def _check_id(sid: SemanticID, scheme_m: int, scheme_M: int):
    if len(sid.codes) != scheme_m:
        raise ContractViolation(f"semantic id length {len(sid.codes)} != {scheme_m}")
    if any(c < 0 or c >= scheme_M for c in sid.codes):
        raise ContractViolation(f"semantic id {sid.codes} has out-of-range codes")


def score_id_cached(cache: LogitCache, sid: SemanticID) -> float:
    """Sum of the m cached log-probabilities along the candidate's codes."""
    m, M = cache.logp.shape
    _check_id(sid, m, M)
    return float(cache.logp[np.arange(m), sid.as_array()].sum())


def score_codes(cache: LogitCache, codes: np.ndarray) -> np.ndarray:
    """Vectorized cached scoring for a (K, m) code matrix."""
    m = cache.logp.shape[0]
    return cache.logp[np.arange(m)[None, :], codes].sum(axis=1)


def score_id_naive(s: np.ndarray, sid: SemanticID, ckpt: ModelCheckpoint) -> float:
    """Recompute each digit's softmax from scratch for this one candidate.

    Deliberately does not share the cached path so the two stay mutual
    oracles.
    """
    bad = validate_semantic_id(sid, ckpt.scheme)
    if bad is not None:
        raise ContractViolation(f"invalid semantic id: {bad}")
    g = project_heads(np.asarray(s, dtype=np.float64), ckpt)
    total = 0.0
    for j, c in enumerate(sid.codes):
        z = ckpt.token_tables[j] @ g[j] / ckpt.temperature
        zmax = z.max()
        total += (z[c] - zmax) - np.log(np.exp(z - zmax).sum())
    return float(total)


def exact_topk(cache: LogitCache, catalog: ItemCatalog, k: int):
    """Exact descending-logit top-K over all items, ties by lower item id."""
    n = catalog.count
    if k > n:
        raise ConfigurationError(f"K={k} exceeds catalog size {n}")
    if k < 1:
        raise ConfigurationError(f"K must be >= 1, got {k}")
    scores = score_codes(cache, catalog.codes)
    order = np.lexsort((np.arange(n), -scores))[:k]
    return [(int(i), float(scores[i])) for i in order]


def crossover_threshold(scheme: SemanticScheme) -> float:
    """Catalog size above which cached scoring beats per-item enumeration."""
    if scheme.d < 2:
        raise ConfigurationError("crossover threshold needs d >= 2")
    return scheme.d / (scheme.d - 1) * scheme.M
