"""Shared fixtures.

The "reference instance" (10k items, 16 digits over 64-entry codebooks,
cluster-structured user sequences, seed 7) is expensive to build, so its
stages are session-scoped and shared by the behavioral and acceptance
tests. Unit tests construct their own tiny inputs instead.
"""

import numpy as np
import pytest

from sidrec.bench import SyntheticConfig, gen_synthetic, split_leave_last_out
from sidrec.core import SemanticScheme
from sidrec.graph import build_decoding_graph
from sidrec.model import TrainConfig, train
from sidrec.opq import OPQTrainConfig, encode_items, train_opq

REF_SCHEME = SemanticScheme(m=16, M=64, d=64)

REF_SYNTHETIC = SyntheticConfig(
    n_items=10_000,
    n_users=5_000,
    seq_len_min=6,
    seq_len_max=12,
    n_clusters=1_000,
    noise=0.1,
    d=64,
    seed=7,
)

REF_OPQ_CONFIG = OPQTrainConfig(outer_iters=10, kmeans_iters=25, seed=7)

REF_TRAIN_CONFIG = TrainConfig(
    learning_rate=0.003,
    epochs=8,
    batch_size=256,
    seed=7,
    optimizer="adam",
    temperature=0.03,
    valid_user_cap=500,
)

REF_GRAPH_K = 100


@pytest.fixture(scope="session")
def ref_world():
    """(item vectors, interaction dataset) of the reference instance."""
    return gen_synthetic(REF_SYNTHETIC)


@pytest.fixture(scope="session")
def ref_split(ref_world):
    return split_leave_last_out(ref_world[1])


@pytest.fixture(scope="session")
def ref_opq(ref_world):
    return train_opq(ref_world[0], REF_SCHEME, REF_OPQ_CONFIG)


@pytest.fixture(scope="session")
def ref_catalog(ref_opq, ref_world):
    return encode_items(ref_opq, ref_world[0])


@pytest.fixture(scope="session")
def ref_train_result(ref_split, ref_catalog):
    return train(ref_split, ref_catalog, REF_TRAIN_CONFIG)


@pytest.fixture(scope="session")
def ref_checkpoint(ref_train_result):
    return ref_train_result.checkpoint


@pytest.fixture(scope="session")
def ref_graph(ref_catalog, ref_checkpoint):
    return build_decoding_graph(
        ref_catalog,
        ref_checkpoint.token_tables,
        REF_GRAPH_K,
        checkpoint_digest=ref_checkpoint.digest(),
    )
