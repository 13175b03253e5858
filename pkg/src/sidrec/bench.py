"""Evaluation and benchmarking: synthetic worlds, leave-last-out metrics,
cold-start buckets, logit-vs-digit-distance trend, and catalog scaling.

The synthetic generator builds cluster-structured item vectors and user
sequences driven by a cluster-level Markov chain, so the next item is
statistically predictable from history; with zero noise and one item per
cluster the next item is a deterministic function of the last one.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .core import (
    ConfigurationError,
    InteractionDataset,
    ItemCatalog,
    StalenessError,
)
from .decoder import DecodeConfig, decode, decode_unconstrained
from .graph import DecodingGraph, build_decoding_graph_sampled
from .model import ModelCheckpoint, aggregate_batch, encode_sequence
from .scorer import build_logit_cache, exact_topk, score_codes


# ---------------------------------------------------------------------------
# synthetic world
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SyntheticConfig:
    n_items: int = 1000
    n_users: int = 500
    seq_len_min: int = 6
    seq_len_max: int = 12
    n_clusters: int = 50
    noise: float = 0.1
    d: int = 64
    seed: int = 0
    item_jitter: float = 0.15   # within-cluster spread of item vectors

    def __post_init__(self):
        if self.n_items < 1 or self.n_users < 1 or self.n_clusters < 1:
            raise ConfigurationError("counts must be positive")
        if self.n_clusters > self.n_items:
            raise ConfigurationError("more clusters than items")
        if not 3 <= self.seq_len_min <= self.seq_len_max:
            raise ConfigurationError("need 3 <= seq_len_min <= seq_len_max")
        if not 0.0 <= self.noise <= 1.0:
            raise ConfigurationError("noise must be in [0, 1]")
        if self.d < 1:
            raise ConfigurationError("d must be >= 1")


def gen_synthetic(config: SyntheticConfig):
    """Returns (item vectors (N, d), InteractionDataset), deterministic per seed."""
    rng = np.random.default_rng(config.seed)
    c = config.n_clusters
    centers = rng.normal(size=(c, config.d))
    item_cluster = np.arange(config.n_items) % c
    vectors = centers[item_cluster] + config.item_jitter * rng.normal(
        size=(config.n_items, config.d)
    )

    # items of each cluster, and a fixed cluster-cycle for transitions
    members = [np.flatnonzero(item_cluster == g) for g in range(c)]
    cycle = rng.permutation(c)
    next_cluster = np.empty(c, dtype=np.int64)
    next_cluster[cycle] = np.roll(cycle, -1)

    sequences = []
    for _ in range(config.n_users):
        length = int(rng.integers(config.seq_len_min, config.seq_len_max + 1))
        cur = int(rng.integers(c))
        seq = []
        for _ in range(length):
            group = members[cur]
            seq.append(int(group[rng.integers(len(group))]))
            if rng.random() < config.noise:
                cur = int(rng.integers(c))
            else:
                cur = int(next_cluster[cur])
        sequences.append(seq)
    return vectors, InteractionDataset(num_items=config.n_items, sequences=sequences)


# ---------------------------------------------------------------------------
# leave-last-out split
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SplitDataset:
    """Per retained user: train prefix region, validation pair, test pair."""

    train_sequences: tuple[np.ndarray, ...]
    valid_prefixes: tuple[np.ndarray, ...]
    valid_targets: np.ndarray
    test_prefixes: tuple[np.ndarray, ...]
    test_targets: np.ndarray
    excluded_count: int

    @property
    def num_users(self) -> int:
        return len(self.test_prefixes)


def split_leave_last_out(dataset: InteractionDataset) -> SplitDataset:
    """Last item per user is the test target, second-to-last the validation
    target; the remainder supplies training prefixes. Sequences shorter
    than 3 are excluded and counted."""
    train, vp, vt, tp, tt = [], [], [], [], []
    excluded = 0
    for seq in dataset.sequences:
        if len(seq) < 3:
            excluded += 1
            continue
        train.append(seq[:-2])
        vp.append(seq[:-2])
        vt.append(int(seq[-2]))
        tp.append(seq[:-1])
        tt.append(int(seq[-1]))
    return SplitDataset(
        train_sequences=tuple(train),
        valid_prefixes=tuple(vp),
        valid_targets=np.asarray(vt, dtype=np.int64),
        test_prefixes=tuple(tp),
        test_targets=np.asarray(tt, dtype=np.int64),
        excluded_count=excluded,
    )


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def recall_at_k(ranked, truth: int, k: int) -> float:
    """1.0 iff the ground-truth item appears in the top k."""
    if k < 1:
        raise ConfigurationError("K must be >= 1")
    return 1.0 if truth in list(ranked)[:k] else 0.0


def ndcg_at_k(ranked, truth: int, k: int) -> float:
    """1/log2(1+rank) for the single ground truth, 0 if outside the top k."""
    if k < 1:
        raise ConfigurationError("K must be >= 1")
    for pos, item in enumerate(list(ranked)[:k], start=1):
        if item == truth:
            return 1.0 / math.log2(1.0 + pos)
    return 0.0


def random_recall_at_k(n_items: int, k: int) -> float:
    """Expected recall@K of a uniformly random ranking."""
    return min(k, n_items) / n_items


def random_ndcg_at_k(n_items: int, k: int) -> float:
    """Expected NDCG@K of a uniformly random ranking (closed form)."""
    return sum(1.0 / math.log2(1.0 + r) for r in range(1, min(k, n_items) + 1)) / n_items


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

@dataclass
class EvalReport:
    recall5: float
    recall10: float
    ndcg5: float
    ndcg10: float
    oracle_recall5: float
    oracle_recall10: float
    oracle_ndcg5: float
    oracle_ndcg10: float
    query_count: int
    config: dict = field(default_factory=dict)
    per_query: list = field(default_factory=list)   # (target, rank lists) logs

    def to_dict(self) -> dict:
        return {
            "recall@5": self.recall5, "recall@10": self.recall10,
            "ndcg@5": self.ndcg5, "ndcg@10": self.ndcg10,
            "oracle_recall@5": self.oracle_recall5,
            "oracle_recall@10": self.oracle_recall10,
            "oracle_ndcg@5": self.oracle_ndcg5,
            "oracle_ndcg@10": self.oracle_ndcg10,
            "query_count": self.query_count,
            "config": self.config,
        }


def _query_cache(prefix, catalog, ckpt, max_seq_len=50, digest=None):
    items = np.asarray(prefix, dtype=np.int64)[-max_seq_len:]
    v, _ = aggregate_batch(catalog.codes[items], ckpt.token_tables, ckpt.aggregation)
    s = encode_sequence(v, ckpt)
    return build_logit_cache(s, ckpt, checkpoint_digest=digest)


def evaluate(ckpt: ModelCheckpoint, graph: DecodingGraph, catalog: ItemCatalog,
             prefixes, targets, decode_config: DecodeConfig,
             max_seq_len: int = 50, check_digests: bool = True) -> EvalReport:
    """Average leave-last-out metrics over (prefix, target) queries.

    Scores both the graph decoder and the exact full-scan oracle on the
    same cached logits; the oracle columns are the attainable ceiling.
    """
    ckpt_digest = ckpt.digest()
    if check_digests:
        if graph.checkpoint_digest is not None and graph.checkpoint_digest != ckpt_digest:
            raise StalenessError(
                "decoding graph was built for a different checkpoint; rebuild it"
            )
    rng = np.random.default_rng(decode_config.seed)
    k_eval = max(10, decode_config.top_k)

    sums = np.zeros(8)
    per_query = []
    for prefix, target in zip(prefixes, targets):
        cache = _query_cache(prefix, catalog, ckpt, max_seq_len, ckpt_digest)
        ranked, _ = decode(graph, cache, catalog, decode_config, rng)
        ranked_ids = [i for i, _ in ranked]
        oracle_ids = [i for i, _ in exact_topk(cache, catalog, min(k_eval, catalog.count))]
        sums += [
            recall_at_k(ranked_ids, target, 5), recall_at_k(ranked_ids, target, 10),
            ndcg_at_k(ranked_ids, target, 5), ndcg_at_k(ranked_ids, target, 10),
            recall_at_k(oracle_ids, target, 5), recall_at_k(oracle_ids, target, 10),
            ndcg_at_k(oracle_ids, target, 5), ndcg_at_k(oracle_ids, target, 10),
        ]
        per_query.append((int(target), ranked_ids, oracle_ids))

    n = max(len(per_query), 1)
    avg = sums / n
    return EvalReport(
        recall5=avg[0], recall10=avg[1], ndcg5=avg[2], ndcg10=avg[3],
        oracle_recall5=avg[4], oracle_recall10=avg[5],
        oracle_ndcg5=avg[6], oracle_ndcg10=avg[7],
        query_count=len(per_query),
        config={"b": decode_config.b, "q": decode_config.q,
                "top_k": decode_config.top_k, "seed": decode_config.seed,
                "checkpoint_digest": ckpt_digest},
        per_query=per_query,
    )


DEFAULT_COLDSTART_BUCKETS = ((0, 5), (6, 10), (11, 15), (16, 20))


def cold_start_report(report: EvalReport, train_sequences, n_items: int,
                      buckets=DEFAULT_COLDSTART_BUCKETS) -> dict:
    """Group per-query metrics by how often the target item occurs in the
    training sequences; empty buckets are absent from the result."""
    freq = np.zeros(n_items, dtype=np.int64)
    for seq in train_sequences:
        np.add.at(freq, np.asarray(seq, dtype=np.int64), 1)

    out = {}
    for lo, hi in buckets:
        rows = [
            (t, ranked) for t, ranked, _ in report.per_query
            if lo <= freq[t] <= hi
        ]
        if not rows:
            continue
        out[f"[{lo},{hi}]"] = {
            "count": len(rows),
            "recall@10": float(np.mean([recall_at_k(r, t, 10) for t, r in rows])),
            "ndcg@10": float(np.mean([ndcg_at_k(r, t, 10) for t, r in rows])),
        }
    return out


# ---------------------------------------------------------------------------
# logit difference vs. differing-digit count
# ---------------------------------------------------------------------------

def _rank(values: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values))
    ranks[order] = np.arange(1, len(values) + 1)
    # average ranks over ties
    for v in np.unique(values):
        mask = values == v
        ranks[mask] = ranks[mask].mean()
    return ranks


def spearman(x, y) -> float:
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    rx, ry = _rank(x), _rank(y)
    rx -= rx.mean()
    ry -= ry.mean()
    denom = np.sqrt((rx * rx).sum() * (ry * ry).sum())
    return float((rx * ry).sum() / denom) if denom > 0 else 0.0


def hamming_logit_trend(ckpt: ModelCheckpoint, catalog: ItemCatalog,
                        caches, sample_count: int,
                        rng: np.random.Generator,
                        pool_size: int = 2000,
                        min_group: int = 10):
    """Mean |logit difference| of item pairs grouped by the number of
    differing semantic-ID digits, plus the rank correlation between the
    group index and the group mean over populated groups.

    `caches` are per-query LogitCaches (one is sampled per anchor).
    Pair sampling is stratified: for each anchor item, one partner is
    drawn per differing-digit count realized inside a random candidate
    pool, so small distances are represented even when catalog-wide pair
    distances concentrate near m. Unrealized distances are absent from
    the table, as are groups with fewer than min_group sampled pairs
    (their means would be noise, not a trend signal).
    """
    caches = list(caches)
    m = ckpt.scheme.m
    n = catalog.count
    groups: dict[int, list[float]] = {h: [] for h in range(m + 1)}
    groups[0].append(0.0)  # identical IDs share every cached term exactly
    pool_size = min(pool_size, n)
    for _ in range(sample_count):
        a = int(rng.integers(n))
        cache = caches[int(rng.integers(len(caches)))]
        pool = rng.integers(0, n, size=pool_size)
        dists = (catalog.codes[pool] != catalog.codes[a]).sum(axis=1)
        score_a = float(score_codes(cache, catalog.codes[[a]])[0])
        partners = []
        for h in np.unique(dists):
            members = pool[dists == h]
            partners.append((int(h), int(members[rng.integers(len(members))])))
        ids = [b for _, b in partners]
        scores = score_codes(cache, catalog.codes[ids])
        for (h, _), sb in zip(partners, scores):
            groups[h].append(abs(score_a - float(sb)))

    table = {
        h: float(np.mean(vals)) for h, vals in groups.items()
        if vals and (h == 0 or len(vals) >= min_group)
    }
    dists = sorted(h for h in table if h >= 1)
    corr = spearman(dists, [table[h] for h in dists]) if len(dists) > 1 else 1.0
    return table, corr


# ---------------------------------------------------------------------------
# catalog scaling benchmark
# ---------------------------------------------------------------------------

@dataclass
class ScalingRow:
    n_items: int
    decode_ms: float
    exact_ms: float
    visited: int


def _median_time(fn, repeats: int = 5) -> float:
    fn()  # warm-up
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append((time.perf_counter() - t0) * 1000.0)
    return float(np.median(times))


def extend_catalog_with_dummies(catalog: ItemCatalog, total_items: int,
                                rng: np.random.Generator) -> ItemCatalog:
    """Append uniformly random semantic IDs up to total_items."""
    extra = total_items - catalog.count
    if extra < 0:
        raise ConfigurationError("target size smaller than base catalog")
    dummy = rng.integers(0, catalog.scheme.M, size=(extra, catalog.scheme.m),
                         dtype=np.uint32)
    return ItemCatalog(scheme=catalog.scheme,
                       codes=np.vstack([catalog.codes, dummy]))


def bench_decode_scaling(base_catalog: ItemCatalog, ckpt: ModelCheckpoint,
                         caches, sizes, graph_k: int,
                         decode_config: DecodeConfig, seed: int = 0,
                         repeats: int = 5,
                         graph_pool_size: int = 512) -> list[ScalingRow]:
    """Timing/visited table across dummy-extended catalog sizes.

    Graphs for the extended catalogs are built with the sampled
    neighbor builder: dummy IDs are random, so only graph degree (which
    is identical to the exact builder's) affects decode cost. Early exit
    is disabled so every decode runs the full q steps and the pre-dedup
    visit count b + q*b*k is the same at every catalog size.
    """
    rng = np.random.default_rng(seed)
    caches = list(caches)
    decode_config = replace(decode_config, early_exit=False, collect_stats=False)
    rows = []
    for size in sizes:
        catalog = extend_catalog_with_dummies(base_catalog, size, rng)
        graph = build_decoding_graph_sampled(
            catalog, ckpt.token_tables, graph_k,
            pool_size=graph_pool_size, seed=seed,
        )

        def run_decode():
            q_rng = np.random.default_rng(seed + 1)
            visited = 0
            for cache in caches:
                _, stats = decode(graph, cache, catalog, decode_config, q_rng)
                visited += stats.candidate_visits
            return visited

        def run_exact():
            for cache in caches:
                exact_topk(cache, catalog, decode_config.top_k)

        visited = run_decode()
        rows.append(ScalingRow(
            n_items=int(size),
            decode_ms=_median_time(run_decode, repeats),
            exact_ms=_median_time(run_exact, repeats),
            visited=int(visited),
        ))
    return rows


def scaling_table_tsv(rows: list[ScalingRow]) -> str:
    lines = ["n_items\tdecode_ms\texact_topk_ms\tvisited"]
    for r in rows:
        lines.append(f"{r.n_items}\t{r.decode_ms:.3f}\t{r.exact_ms:.3f}\t{r.visited}")
    return "\n".join(lines) + "\n"


def scaling_chart_svg(rows: list[ScalingRow], path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    sizes = [r.n_items for r in rows]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(sizes, [r.decode_ms for r in rows], "o-", label="graph decode")
    ax.plot(sizes, [r.exact_ms for r in rows], "s-", label="exact top-K scan")
    ax.set_xscale("log")
    ax.set_yscale("log")
    ax.set_xlabel("catalog size")
    ax.set_ylabel("median wall time per query batch (ms)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
