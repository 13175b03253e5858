"""Decoding graph: per-item top-k neighbors under token-embedding similarity.

Similarity between two semantic IDs is the sum over digits of the dot
products of their token-embedding rows. Each node's adjacency list holds
itself first plus its k-1 most similar other items, so degree is exactly
min(k, N) and propagation can never lose the current beam.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import (
    ConfigurationError,
    ContractViolation,
    ItemCatalog,
    SemanticID,
    DataError,
)
from . import container

GRAPH_MAGIC = "sidrec-graph"


@dataclass(frozen=True)
class DecodingGraph:
    """Fixed-degree directed adjacency; row i lists node i's neighbors, self first."""

    adjacency: np.ndarray = field(repr=False)   # (N, degree) uint32
    k: int
    checkpoint_digest: str | None = None
    catalog_digest: str | None = None

    def __post_init__(self):
        adj = np.ascontiguousarray(np.asarray(self.adjacency, dtype=np.uint32))
        if adj.ndim != 2:
            raise DataError("adjacency must be 2-D")
        n = adj.shape[0]
        if adj.shape[1] != min(self.k, n):
            raise DataError(
                f"adjacency degree {adj.shape[1]} != min(k={self.k}, N={n})"
            )
        if n and (adj[:, 0] != np.arange(n, dtype=np.uint32)).any():
            raise DataError("every adjacency row must start with its own node")
        adj.setflags(write=False)
        object.__setattr__(self, "adjacency", adj)

    @property
    def num_items(self) -> int:
        return self.adjacency.shape[0]

    @property
    def degree(self) -> int:
        return self.adjacency.shape[1]


def id_similarity(a: SemanticID, b: SemanticID, tables: np.ndarray) -> float:
    """Sum over digits of token-embedding dot products; symmetric."""
    m = tables.shape[0]
    for sid in (a, b):
        if len(sid.codes) != m or any(c >= tables.shape[1] for c in sid.codes):
            raise ContractViolation(f"semantic id {sid.codes} invalid for tables")
    ea = tables[np.arange(m), a.as_array()]
    eb = tables[np.arange(m), b.as_array()]
    return float((ea * eb).sum())


def _token_features(catalog: ItemCatalog, tables: np.ndarray) -> np.ndarray:
    """Per-item concatenation of its token-embedding rows, (N, m*d) float32.

    Dot products of these features equal id_similarity exactly (up to
    float32 rounding), which turns graph construction into blocked GEMMs.
    """
    m = tables.shape[0]
    n = catalog.count
    feats = np.empty((n, m * tables.shape[2]), dtype=np.float32)
    d = tables.shape[2]
    for j in range(m):
        feats[:, j * d:(j + 1) * d] = tables[j][catalog.codes[:, j]]
    return feats


def _top_rows(sims: np.ndarray, row_ids: np.ndarray, k: int, n: int) -> np.ndarray:
    """Per-row [self] + top (k-1) others by similarity desc, id asc."""
    # stable sort on -sims keeps ascending-id order among exact ties
    sims = sims.copy()
    sims[np.arange(sims.shape[0]), row_ids] = np.inf  # pin self to front
    order = np.argsort(-sims, axis=1, kind="stable")
    return order[:, :min(k, n)].astype(np.uint32)


def build_decoding_graph(catalog: ItemCatalog, tables: np.ndarray, k: int,
                         checkpoint_digest: str | None = None,
                         catalog_digest: str | None = None,
                         block_size: int = 512) -> DecodingGraph:
    """Exact O(N^2 m) construction, blocked to bound working memory."""
    if k < 1:
        raise ConfigurationError(f"k must be >= 1, got {k}")
    n = catalog.count
    feats = _token_features(catalog, np.asarray(tables, dtype=np.float64))
    rows = []
    for start in range(0, n, block_size):
        stop = min(start + block_size, n)
        sims = feats[start:stop] @ feats.T
        rows.append(_top_rows(sims, np.arange(start, stop), k, n))
    adjacency = np.vstack(rows) if rows else np.empty((0, min(k, n)), dtype=np.uint32)
    return DecodingGraph(adjacency=adjacency, k=k,
                         checkpoint_digest=checkpoint_digest,
                         catalog_digest=catalog_digest)


def build_decoding_graph_sampled(catalog: ItemCatalog, tables: np.ndarray, k: int,
                                 pool_size: int = 512, seed: int = 0,
                                 checkpoint_digest: str | None = None,
                                 catalog_digest: str | None = None,
                                 block_size: int = 4096) -> DecodingGraph:
    """Approximate builder for large catalogs: each node keeps its top
    (k-1) among a uniformly sampled candidate pool plus itself.

    Timing-faithful stand-in for the exact builder when N^2 similarity is
    impractical (scaling benchmarks); degree and self-loop invariants are
    identical. Requires pool_size >= k - 1.
    """
    if k < 1:
        raise ConfigurationError(f"k must be >= 1, got {k}")
    n = catalog.count
    if min(k, n) > pool_size + 1:
        raise ConfigurationError(
            f"pool_size={pool_size} too small for degree min(k={k}, N={n})"
        )
    tables = np.asarray(tables, dtype=np.float64)
    m, M, _ = tables.shape
    # digit-wise centroid-pair similarity tables: sim(a,b) = sum_j G[j, a_j, b_j]
    gram = np.einsum("jad,jbd->jab", tables, tables).astype(np.float32)

    rng = np.random.default_rng(seed)
    codes = catalog.codes
    adj = np.empty((n, min(k, n)), dtype=np.uint32)
    for start in range(0, n, block_size):
        stop = min(start + block_size, n)
        bsz = stop - start
        cand = rng.integers(0, n, size=(bsz, pool_size), dtype=np.int64)
        sims = np.zeros((bsz, pool_size), dtype=np.float32)
        own = codes[start:stop]
        for j in range(m):
            sims += gram[j][own[:, j][:, None], codes[cand, j]]
        # exclude accidental self-hits; self is prepended explicitly
        self_ids = np.arange(start, stop)[:, None]
        sims[cand == self_ids] = -np.inf
        # the pool is drawn with replacement: keep one copy per candidate id
        sort_idx = np.argsort(cand, axis=1, kind="stable")
        sorted_cand = np.take_along_axis(cand, sort_idx, axis=1)
        dup_sorted = np.zeros(cand.shape, dtype=bool)
        dup_sorted[:, 1:] = sorted_cand[:, 1:] == sorted_cand[:, :-1]
        dup = np.zeros(cand.shape, dtype=bool)
        np.put_along_axis(dup, sort_idx, dup_sorted, axis=1)
        sims[dup] = -np.inf
        distinct = pool_size - dup.sum(axis=1) - (cand == self_ids).any(axis=1)
        if (distinct < min(k, n) - 1).any():
            raise ConfigurationError(
                "candidate pool too small after deduplication; "
                "increase pool_size"
            )
        order = np.argsort(-sims, axis=1, kind="stable")[:, :min(k, n) - 1]
        picked = np.take_along_axis(cand, order, axis=1)
        adj[start:stop, 0] = np.arange(start, stop)
        if min(k, n) > 1:
            adj[start:stop, 1:] = picked
    return DecodingGraph(adjacency=adj, k=k,
                         checkpoint_digest=checkpoint_digest,
                         catalog_digest=catalog_digest)


def neighbors(graph: DecodingGraph, item: int) -> np.ndarray:
    """Stored adjacency row for one item, self first."""
    if not 0 <= item < graph.num_items:
        raise ContractViolation(
            f"item {item} out of range [0, {graph.num_items})"
        )
    return graph.adjacency[item]


def save_graph(path, graph: DecodingGraph) -> str:
    meta = {"k": graph.k}
    if graph.checkpoint_digest is not None:
        meta["checkpoint_digest"] = graph.checkpoint_digest
    if graph.catalog_digest is not None:
        meta["catalog_digest"] = graph.catalog_digest
    return container.write_container(
        path, GRAPH_MAGIC, None, arrays={"adjacency": graph.adjacency}, meta=meta
    )


def load_graph(path) -> tuple[DecodingGraph, str]:
    _, arrays, meta = container.read_container(path, GRAPH_MAGIC)
    graph = DecodingGraph(
        adjacency=arrays["adjacency"],
        k=int(meta["k"]),
        checkpoint_digest=meta.get("checkpoint_digest"),
        catalog_digest=meta.get("catalog_digest"),
    )
    return graph, meta["digest"]
