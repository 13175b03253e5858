"""Pipeline entry point: gen-data, tokenize, train, build-graph,
recommend, score, eval, bench-scaling.

Commands read a TOML config (flags override file values), check artifact
digests before trusting upstream files, and write outputs atomically.
Exit codes: 0 ok, 2 missing/corrupt artifact, 3 stale digest, 4 config
error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import tempfile

EXIT_OK = 0
EXIT_ARTIFACT = 2
EXIT_STALE = 3
EXIT_CONFIG = 4


def _load_toml(path: str) -> dict:
    try:
        import tomllib  # Python >= 3.11
    except ModuleNotFoundError:
        import tomli as tomllib
    from .core import ConfigurationError

    if not os.path.exists(path):
        raise ConfigurationError(f"config file not found: {path}")
    try:
        with open(path, "rb") as f:
            return tomllib.load(f)
    except tomllib.TOMLDecodeError as e:
        raise ConfigurationError(f"cannot parse config {path}: {e}") from e


def _atomic_write_text(path: str, text: str) -> None:
    directory = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory)
    try:
        with os.fdopen(fd, "w") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class Pipeline:
    """Config-driven access to schemes, paths and sub-configs."""

    def __init__(self, config: dict, seed_override: int | None = None):
        from .core import ConfigurationError, SemanticScheme

        self.raw = config
        try:
            self.scheme = SemanticScheme.from_dict(config["scheme"])
            self.paths = dict(config["paths"])
        except KeyError as e:
            raise ConfigurationError(f"config missing required section/key: {e}")
        self.seed = int(config.get("seed", 0))
        env_seed = os.environ.get("RPG_SEED")
        if env_seed is not None:
            self.seed = int(env_seed)
        if seed_override is not None:
            self.seed = seed_override

    def path(self, key: str) -> str:
        from .core import ConfigurationError

        if key not in self.paths:
            raise ConfigurationError(f"config [paths] missing {key!r}")
        return self.paths[key]

    def section(self, name: str) -> dict:
        return dict(self.raw.get(name, {}))


def _pipeline(args) -> Pipeline:
    return Pipeline(_load_toml(args.config),
                    seed_override=getattr(args, "seed", None))


def _load_artifacts(pipe, need=("catalog", "checkpoint", "graph")):
    """Load and cross-check the catalog / checkpoint / graph chain."""
    from . import graph as graphmod
    from . import model as modelmod
    from . import opq as opqmod
    from .core import StalenessError

    out = {}
    if "catalog" in need:
        out["catalog"], out["catalog_digest"] = opqmod.load_catalog(pipe.path("catalog"))
    if "checkpoint" in need:
        ckpt, digest = modelmod.load_checkpoint(pipe.path("checkpoint"))
        out["checkpoint"], out["checkpoint_digest"] = ckpt, digest
        if "catalog" in need and ckpt.catalog_digest is not None \
                and ckpt.catalog_digest != out["catalog_digest"]:
            raise StalenessError(
                "checkpoint was trained against a different catalog; re-run train"
            )
    if "graph" in need:
        g, _ = graphmod.load_graph(pipe.path("graph"))
        out["graph"] = g
        if "checkpoint" in need and g.checkpoint_digest is not None \
                and g.checkpoint_digest != out["checkpoint_digest"]:
            raise StalenessError(
                "graph was built for a different checkpoint; re-run build-graph"
            )
        if "catalog" in need and g.catalog_digest is not None \
                and g.catalog_digest != out["catalog_digest"]:
            raise StalenessError(
                "graph was built for a different catalog; re-run build-graph"
            )
    return out


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    from . import bench, opq
    from .core import save_interactions

    pipe = _pipeline(args)
    syn = pipe.section("synthetic")
    config = bench.SyntheticConfig(
        n_items=int(syn.get("n_items", 1000)),
        n_users=int(syn.get("n_users", 500)),
        seq_len_min=int(syn.get("seq_len_min", 6)),
        seq_len_max=int(syn.get("seq_len_max", 12)),
        n_clusters=int(syn.get("n_clusters", 50)),
        noise=float(syn.get("noise", 0.1)),
        d=pipe.scheme.d,
        seed=pipe.seed,
    )
    vectors, dataset = bench.gen_synthetic(config)
    opq.save_vectors(pipe.path("vectors"), vectors)
    save_interactions(pipe.path("dataset"), dataset)
    print(f"wrote {pipe.path('vectors')} ({config.n_items}x{config.d}) "
          f"and {pipe.path('dataset')} ({config.n_users} users)")
    return EXIT_OK


def cmd_tokenize(args) -> int:
    from . import opq

    pipe = _pipeline(args)
    section = pipe.section("opq")
    config = opq.OPQTrainConfig(
        outer_iters=int(section.get("outer_iters", 10)),
        kmeans_iters=int(section.get("kmeans_iters", 25)),
        seed=pipe.seed,
        rotate=bool(section.get("rotate", True)),
        normalize=bool(section.get("normalize", False)),
    )
    vectors = opq.load_vectors(pipe.path("vectors"))
    model = opq.train_opq(vectors, pipe.scheme, config)
    catalog = opq.encode_items(model, vectors)
    model_digest = opq.save_opq_model(pipe.path("opq_model"), model)
    opq.save_catalog(pipe.path("catalog"), catalog, model_digest=model_digest)
    print(f"quantization error: {model.error_log[-1]:.6f} "
          f"over {config.outer_iters} iterations")
    return EXIT_OK


def cmd_train(args) -> int:
    from . import bench, model, opq
    from .core import load_interactions

    pipe = _pipeline(args)
    catalog, catalog_digest = opq.load_catalog(pipe.path("catalog"))
    dataset = load_interactions(pipe.path("dataset"), catalog.count)
    split = bench.split_leave_last_out(dataset)

    section = pipe.section("train")
    config = model.TrainConfig(
        learning_rate=args.lr if args.lr is not None else float(section.get("lr", 0.05)),
        epochs=args.epochs if args.epochs is not None else int(section.get("epochs", 30)),
        batch_size=args.batch if args.batch is not None else int(section.get("batch", 256)),
        seed=pipe.seed,
        encoder=args.encoder or section.get("encoder", "reference"),
        optimizer=section.get("optimizer", "sgd"),
        aggregation=args.agg or section.get("agg", "mean"),
        temperature=args.tau if args.tau is not None else float(section.get("tau", 0.03)),
        patience=int(section.get("patience", 20)),
        max_seq_len=int(section.get("max_seq_len", 50)),
        valid_user_cap=int(section.get("valid_user_cap", 2000)),
        head_hidden=int(section["head_hidden"]) if "head_hidden" in section else None,
    )
    result = model.train(split, catalog, config)
    result.checkpoint.catalog_digest = catalog_digest
    model.save_checkpoint(pipe.path("checkpoint"), result.checkpoint)
    print(f"epochs run: {len(result.epoch_losses)}  "
          f"final train loss: {result.epoch_losses[-1]:.4f}  "
          f"best valid ndcg@10: {max(result.valid_ndcg):.4f} "
          f"(epoch {result.best_epoch})")
    return EXIT_OK


def cmd_build_graph(args) -> int:
    from . import graph as graphmod

    pipe = _pipeline(args)
    arts = _load_artifacts(pipe, need=("catalog", "checkpoint"))
    k = args.k if args.k is not None else int(pipe.section("graph").get("k", 50))
    g = graphmod.build_decoding_graph(
        arts["catalog"], arts["checkpoint"].token_tables, k,
        checkpoint_digest=arts["checkpoint_digest"],
        catalog_digest=arts["catalog_digest"],
    )
    graphmod.save_graph(pipe.path("graph"), g)
    print(f"graph: {g.num_items} nodes, degree {g.degree}")
    return EXIT_OK


def _decode_config(pipe, args):
    from .decoder import DecodeConfig

    section = pipe.section("decode")
    return DecodeConfig(
        b=args.b if getattr(args, "b", None) is not None else int(section.get("b", 10)),
        q=args.q if getattr(args, "q", None) is not None else int(section.get("q", 3)),
        top_k=args.topk if getattr(args, "topk", None) is not None
        else int(section.get("topk", 10)),
        seed=pipe.seed,
    )


def _read_sequence(args) -> list[int]:
    from .core import DataError

    if args.input and args.input != "-":
        with open(args.input) as f:
            text = f.read()
    else:
        text = sys.stdin.read()
    try:
        return [int(p) for p in text.split()]
    except ValueError as e:
        raise DataError("input sequence must be whitespace-separated item ids") from e


def cmd_recommend(args) -> int:
    import numpy as np

    from .bench import _query_cache
    from .core import DataError
    from .decoder import decode

    pipe = _pipeline(args)
    arts = _load_artifacts(pipe)
    sequence = _read_sequence(args)
    if not sequence:
        raise DataError("empty input sequence")
    cache = _query_cache(sequence, arts["catalog"], arts["checkpoint"],
                         digest=arts["checkpoint_digest"])
    config = _decode_config(pipe, args)
    ranked, stats = decode(arts["graph"], cache, arts["catalog"], config,
                           np.random.default_rng(config.seed))
    for item, logit in ranked:
        print(f"{item}\t{logit:.6f}")
    print(f"# visited {stats.visited_count}", file=sys.stderr)
    return EXIT_OK


def cmd_score(args) -> int:
    from .bench import _query_cache
    from .core import DataError
    from .scorer import exact_topk

    pipe = _pipeline(args)
    arts = _load_artifacts(pipe, need=("catalog", "checkpoint"))
    sequence = _read_sequence(args)
    if not sequence:
        raise DataError("empty input sequence")
    cache = _query_cache(sequence, arts["catalog"], arts["checkpoint"],
                         digest=arts["checkpoint_digest"])
    top_k = args.topk if args.topk is not None else 10
    for item, logit in exact_topk(cache, arts["catalog"], top_k):
        print(f"{item}\t{logit:.6f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from . import bench
    from .core import load_interactions

    pipe = _pipeline(args)
    arts = _load_artifacts(pipe)
    dataset = load_interactions(pipe.path("dataset"), arts["catalog"].count)
    split = bench.split_leave_last_out(dataset)
    config = _decode_config(pipe, args)
    report = bench.evaluate(
        arts["checkpoint"], arts["graph"], arts["catalog"],
        split.test_prefixes, split.test_targets, config,
    )
    cold = bench.cold_start_report(report, split.train_sequences,
                                   arts["catalog"].count)
    payload = report.to_dict()
    payload["cold_start"] = cold
    payload["excluded_users"] = split.excluded_count
    text = json.dumps(payload, indent=2, sort_keys=True) + "\n"
    out = pipe.paths.get("eval_report")
    if out:
        _atomic_write_text(out, text)
    print(text, end="")
    return EXIT_OK


def cmd_bench(args) -> int:
    import numpy as np

    from . import bench
    from .core import ConfigurationError, load_interactions

    pipe = _pipeline(args)
    arts = _load_artifacts(pipe, need=("catalog", "checkpoint"))
    dataset = load_interactions(pipe.path("dataset"), arts["catalog"].count)
    split = bench.split_leave_last_out(dataset)

    section = pipe.section("bench")
    if args.dummy:
        sizes = [int(float(s)) for s in args.dummy.split(",")]
    else:
        sizes = [int(float(s)) for s in section.get("dummy_sizes", [20000, 100000])]
    if any(s < arts["catalog"].count for s in sizes):
        raise ConfigurationError("dummy sizes must be >= base catalog size")
    config = _decode_config(pipe, args)
    graph_k = int(pipe.section("graph").get("k", 50))
    n_queries = int(section.get("queries", 10))

    rng = np.random.default_rng(pipe.seed)
    idx = rng.choice(split.num_users, size=min(n_queries, split.num_users),
                     replace=False)
    caches = [
        bench._query_cache(split.test_prefixes[i], arts["catalog"],
                           arts["checkpoint"], digest=arts["checkpoint_digest"])
        for i in idx
    ]
    rows = bench.bench_decode_scaling(
        arts["catalog"], arts["checkpoint"], caches, sizes, graph_k, config,
        seed=pipe.seed, repeats=int(section.get("repeats", 5)),
    )
    tsv = bench.scaling_table_tsv(rows)
    _atomic_write_text(pipe.path("scaling_tsv"), tsv)
    bench.scaling_chart_svg(rows, pipe.path("scaling_svg"))
    summary = {
        "sizes": sizes,
        "rows": [vars(r) for r in rows],
        "decode": {"b": config.b, "q": config.q, "top_k": config.top_k},
        "graph_k": graph_k,
        "checkpoint_digest": arts["checkpoint_digest"],
        "catalog_digest": arts["catalog_digest"],
    }
    if "scaling_json" in pipe.paths:
        _atomic_write_text(pipe.path("scaling_json"),
                           json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(tsv, end="")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sidrec",
        description="Semantic-ID recommendation pipeline",
    )
    parser.add_argument("--config", "-c", required=True, help="TOML config file")
    parser.add_argument("--threads", type=int, default=None,
                        help="bound BLAS worker threads")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("gen-data", help="generate the synthetic vectors + interactions")

    p = sub.add_parser("tokenize", help="train OPQ and encode the catalog")
    p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("train", help="train the sequence model")
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--tau", type=float, default=None)
    p.add_argument("--agg", choices=["mean", "max"], default=None)
    p.add_argument("--encoder", choices=["reference"], default=None)

    p = sub.add_parser("build-graph", help="build the decoding graph")
    p.add_argument("--k", type=int, default=None, help="edges per node incl. self")

    for name, helptext in (("recommend", "decode top-K for one input sequence"),
                           ("score", "exact top-K scan for one input sequence")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--input", "-i", default="-",
                       help="sequence file of item ids ('-' = stdin)")
        p.add_argument("--topk", type=int, default=None)
        if name == "recommend":
            p.add_argument("--b", type=int, default=None)
            p.add_argument("--k-graph", dest="k_graph", type=int, default=None,
                           help="informational; the graph artifact fixes k")
            p.add_argument("--q", type=int, default=None)
            p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("eval", help="leave-last-out evaluation report")
    p.add_argument("--b", type=int, default=None)
    p.add_argument("--q", type=int, default=None)
    p.add_argument("--topk", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("bench-scaling", help="catalog-size scaling benchmark")
    p.add_argument("--dummy", default=None,
                   help="comma list of catalog sizes, e.g. 2e4,1e5,5e5")
    p.add_argument("--seed", type=int, default=None)

    return parser


_COMMANDS = {
    "gen-data": cmd_gen_data,
    "tokenize": cmd_tokenize,
    "train": cmd_train,
    "build-graph": cmd_build_graph,
    "recommend": cmd_recommend,
    "score": cmd_score,
    "eval": cmd_eval,
    "bench-scaling": cmd_bench,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads is not None:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(args.threads)

    from .core import (
        ConfigurationError,
        ContractViolation,
        DataError,
        StalenessError,
    )

    try:
        return _COMMANDS[args.command](args)
    except (DataError, ContractViolation) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_ARTIFACT
    except StalenessError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_STALE
    except ConfigurationError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
