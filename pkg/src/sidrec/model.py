"""Sequence model: token tables, aggregation, encoder, heads, MTP training.

The loss treats the m digits of the target semantic ID as independent
classification problems over their own codebooks; total loss is the sum
of per-digit cross-entropies at temperature tau. All forward/backward
math is explicit numpy so gradients stay auditable and finite-difference
checkable in float64.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from .core import (
    ConfigurationError,
    ContractViolation,
    DataError,
    ItemCatalog,
    SemanticID,
    SemanticScheme,
    check_finite,
    validate_semantic_id,
)
from . import container

CHECKPOINT_MAGIC = "sidrec-checkpoint"


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.05
    epochs: int = 30
    batch_size: int = 256
    seed: int = 0
    encoder: str = "reference"
    head_hidden: int | None = None   # default 2*d
    optimizer: str = "sgd"           # "sgd" | "adam"
    aggregation: str = "mean"
    temperature: float = 0.03
    patience: int = 20
    max_seq_len: int = 50
    valid_user_cap: int = 2000       # users sampled for per-epoch validation

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigurationError("learning rate must be > 0")
        if self.epochs < 1:
            raise ConfigurationError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigurationError("batch size must be >= 1")
        if self.encoder not in ("reference",):
            raise ConfigurationError(f"unknown encoder kind {self.encoder!r}")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigurationError(f"unknown optimizer {self.optimizer!r}")
        if self.aggregation not in ("mean", "max"):
            raise ConfigurationError(f"unknown aggregation {self.aggregation!r}")
        if self.temperature <= 0:
            raise ConfigurationError("temperature must be > 0")
        if self.max_seq_len < 1:
            raise ConfigurationError("max_seq_len must be >= 1")


@dataclass
class ModelCheckpoint:
    """All learnable state plus the fixed hyperparameters it was built with."""

    scheme: SemanticScheme
    aggregation: str
    temperature: float
    token_tables: np.ndarray = field(repr=False)  # (m, M, d)
    enc_w1: np.ndarray = field(repr=False)        # (h, 2d)
    enc_b1: np.ndarray = field(repr=False)        # (h,)
    enc_w2: np.ndarray = field(repr=False)        # (d, h)
    enc_b2: np.ndarray = field(repr=False)        # (d,)
    head_w1: np.ndarray = field(repr=False)       # (m, h, d)
    head_b1: np.ndarray = field(repr=False)       # (m, h)
    head_w2: np.ndarray = field(repr=False)       # (m, d, h)
    head_b2: np.ndarray = field(repr=False)       # (m, d)
    catalog_digest: str | None = None

    def __post_init__(self):
        if self.temperature <= 0:
            raise ConfigurationError("temperature must be > 0")
        if self.aggregation not in ("mean", "max"):
            raise ConfigurationError(f"unknown aggregation {self.aggregation!r}")
        m, M, d = self.scheme.m, self.scheme.M, self.scheme.d
        if self.token_tables.shape != (m, M, d):
            raise DataError(
                f"token tables shape {self.token_tables.shape} != ({m}, {M}, {d})"
            )
        for name, arr in self.parameters().items():
            check_finite(arr, name)

    @property
    def head_hidden(self) -> int:
        return self.head_w1.shape[1]

    def parameters(self) -> dict[str, np.ndarray]:
        """Name -> live array views; SGD updates these in place."""
        return {
            "token_tables": self.token_tables,
            "enc_w1": self.enc_w1, "enc_b1": self.enc_b1,
            "enc_w2": self.enc_w2, "enc_b2": self.enc_b2,
            "head_w1": self.head_w1, "head_b1": self.head_b1,
            "head_w2": self.head_w2, "head_b2": self.head_b2,
        }

    def copy(self) -> "ModelCheckpoint":
        return copy.deepcopy(self)

    def digest(self) -> str:
        """Content digest; matches the digest save_checkpoint would record."""
        meta = {"aggregation": self.aggregation, "temperature": self.temperature}
        if self.catalog_digest is not None:
            meta["catalog_digest"] = self.catalog_digest
        return container.content_digest(
            CHECKPOINT_MAGIC, self.scheme, meta, self.parameters()
        )


def init_checkpoint(scheme: SemanticScheme, seed: int = 0, *,
                    aggregation: str = "mean", temperature: float = 0.03,
                    head_hidden: int | None = None,
                    catalog_digest: str | None = None,
                    zero: bool = False) -> ModelCheckpoint:
    """Uniform(-1/sqrt(d), 1/sqrt(d)) init for all tables and weights."""
    m, M, d = scheme.m, scheme.M, scheme.d
    h = head_hidden if head_hidden is not None else 2 * d
    rng = np.random.default_rng(seed)
    bound = 1.0 / np.sqrt(d)

    def u(*shape):
        if zero:
            return np.zeros(shape)
        return rng.uniform(-bound, bound, size=shape)

    return ModelCheckpoint(
        scheme=scheme,
        aggregation=aggregation,
        temperature=float(temperature),
        token_tables=u(m, M, d),
        enc_w1=u(h, 2 * d), enc_b1=u(h),
        enc_w2=u(d, h), enc_b2=u(d),
        head_w1=u(m, h, d), head_b1=u(m, h),
        head_w2=u(m, d, h), head_b2=u(m, d),
        catalog_digest=catalog_digest,
    )


# ---------------------------------------------------------------------------
# forward pieces
# ---------------------------------------------------------------------------

def aggregate_item(sid: SemanticID, tables: np.ndarray,
                   aggregation: str = "mean") -> np.ndarray:
    """Pool the m token-embedding rows of one semantic ID into a d-vector."""
    m = tables.shape[0]
    if len(sid.codes) != m or any(c >= tables.shape[1] for c in sid.codes):
        raise ContractViolation(f"semantic id {sid.codes} invalid for tables")
    rows = tables[np.arange(m), np.asarray(sid.codes)]
    if aggregation == "mean":
        return rows.mean(axis=0)
    if aggregation == "max":
        return rows.max(axis=0)
    raise ConfigurationError(f"unknown aggregation {aggregation!r}")


def aggregate_batch(codes: np.ndarray, tables: np.ndarray, aggregation: str):
    """Vectorized pooling for codes (..., m) -> vectors (..., d).

    For max pooling also returns the winning digit per output dimension
    (needed for backprop); for mean that slot is None.
    """
    m, _, d = tables.shape
    acc = None
    argmax = None
    if aggregation == "mean":
        acc = np.zeros(codes.shape[:-1] + (d,))
        for j in range(m):
            acc += tables[j][codes[..., j]]
        return acc / m, None
    # max: track which digit supplied each output dimension
    acc = tables[0][codes[..., 0]].copy()
    argmax = np.zeros(acc.shape, dtype=np.int16)
    for j in range(1, m):
        rows = tables[j][codes[..., j]]
        better = rows > acc
        acc = np.where(better, rows, acc)
        argmax = np.where(better, np.int16(j), argmax)
    return acc, argmax


def encode_sequence(item_vectors: np.ndarray, ckpt: ModelCheckpoint) -> np.ndarray:
    """Reference encoder: MLP over [mean(v_1..v_t) || v_t].

    The mean term is permutation-invariant; only the final item breaks
    symmetry. Any deterministic differentiable map with this signature
    can be substituted.
    """
    v = np.asarray(item_vectors, dtype=np.float64)
    if v.ndim != 2 or v.shape[0] == 0:
        raise ContractViolation("encode_sequence requires a non-empty (t, d) array")
    u = np.concatenate([v.mean(axis=0), v[-1]])
    a1 = ckpt.enc_w1 @ u + ckpt.enc_b1
    return ckpt.enc_w2 @ np.maximum(a1, 0.0) + ckpt.enc_b2


def project_heads(s: np.ndarray, ckpt: ModelCheckpoint) -> np.ndarray:
    """Apply all m projection heads to a sequence representation: (m, d)."""
    h1 = np.einsum("jhd,d->jh", ckpt.head_w1, s) + ckpt.head_b1
    hr = np.maximum(h1, 0.0)
    return np.einsum("jdh,jh->jd", ckpt.head_w2, hr) + ckpt.head_b2


def digit_logits(s: np.ndarray, ckpt: ModelCheckpoint) -> np.ndarray:
    """Raw per-digit token logits (m, M): E_j . g_j(s) / tau."""
    g = project_heads(s, ckpt)
    return np.einsum("jMd,jd->jM", ckpt.token_tables, g) / ckpt.temperature


def log_softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    zmax = z.max(axis=axis, keepdims=True)
    shifted = z - zmax
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def mtp_loss(s: np.ndarray, target: SemanticID,
             ckpt: ModelCheckpoint) -> tuple[float, np.ndarray]:
    """Sum over digits of -log softmax probability of the target code.

    Returns (total loss, per-digit losses); the total is exactly the sum
    of the per-digit terms.
    """
    bad = validate_semantic_id(target, ckpt.scheme)
    if bad is not None:
        raise ContractViolation(f"invalid target semantic id: {bad}")
    logp = log_softmax(digit_logits(s, ckpt), axis=1)
    per_digit = -logp[np.arange(ckpt.scheme.m), target.as_array()]
    return float(per_digit.sum()), per_digit


# ---------------------------------------------------------------------------
# batched forward/backward
# ---------------------------------------------------------------------------

def _pad_batch(sequences: list[np.ndarray], catalog: ItemCatalog):
    """Pad variable-length item-id prefixes into (B, T, m) code tensors."""
    lengths = np.asarray([len(s) for s in sequences], dtype=np.int64)
    tmax = int(lengths.max())
    b = len(sequences)
    codes = np.zeros((b, tmax, catalog.scheme.m), dtype=np.uint32)
    mask = np.zeros((b, tmax), dtype=bool)
    for i, seq in enumerate(sequences):
        codes[i, :len(seq)] = catalog.codes[seq]
        mask[i, :len(seq)] = True
    return codes, mask, lengths


def batch_forward(codes: np.ndarray, mask: np.ndarray, lengths: np.ndarray,
                  targets: np.ndarray, ckpt: ModelCheckpoint,
                  want_cache: bool = False):
    """Mean MTP loss over a padded batch; optionally keeps intermediates."""
    m, M, d = ckpt.scheme.m, ckpt.scheme.M, ckpt.scheme.d
    bsz, tmax = mask.shape
    tables = ckpt.token_tables

    v, agg_argmax = aggregate_batch(codes, tables, ckpt.aggregation)
    v = v * mask[..., None]
    last_idx = lengths - 1
    v_last = v[np.arange(bsz), last_idx]
    v_mean = v.sum(axis=1) / lengths[:, None]
    u = np.concatenate([v_mean, v_last], axis=1)            # (B, 2d)

    a1 = u @ ckpt.enc_w1.T + ckpt.enc_b1                    # (B, h)
    r = np.maximum(a1, 0.0)
    s = r @ ckpt.enc_w2.T + ckpt.enc_b2                     # (B, d)

    # batched GEMMs over the m heads: axes are (m, B, .) internally
    h1 = (s @ ckpt.head_w1.reshape(-1, d).T).reshape(bsz, m, -1) + ckpt.head_b1
    hr = np.maximum(h1, 0.0)
    g = np.matmul(hr.transpose(1, 0, 2), ckpt.head_w2.transpose(0, 2, 1))
    g = g.transpose(1, 0, 2) + ckpt.head_b2                 # (B, m, d)
    z = np.matmul(g.transpose(1, 0, 2), tables.transpose(0, 2, 1))
    z = z.transpose(1, 0, 2) / ckpt.temperature             # (B, m, M)

    logp = log_softmax(z, axis=2)
    bidx = np.arange(bsz)[:, None]
    jidx = np.arange(m)[None, :]
    per_digit = -logp[bidx, jidx, targets]                  # (B, m)
    loss = float(per_digit.sum(axis=1).mean())

    if not want_cache:
        return loss, None
    cache = {
        "codes": codes, "mask": mask, "lengths": lengths, "targets": targets,
        "agg_argmax": agg_argmax, "u": u, "a1": a1, "r": r, "s": s,
        "h1": h1, "hr": hr, "g": g, "logp": logp,
    }
    return loss, cache


def batch_backward(cache: dict, ckpt: ModelCheckpoint) -> dict[str, np.ndarray]:
    """Analytic gradients of the mean batch MTP loss for every parameter.

    The token tables get contributions from two paths: as the softmax
    output vocabulary and as the input item embeddings through pooling.
    """
    m, M, d = ckpt.scheme.m, ckpt.scheme.M, ckpt.scheme.d
    tables = ckpt.token_tables
    tau = ckpt.temperature
    codes, mask, lengths = cache["codes"], cache["mask"], cache["lengths"]
    targets = cache["targets"]
    bsz = mask.shape[0]

    grads = {name: np.zeros_like(arr) for name, arr in ckpt.parameters().items()}

    # softmax/vocabulary path
    dz = np.exp(cache["logp"])                              # (B, m, M)
    bidx = np.arange(bsz)[:, None]
    jidx = np.arange(m)[None, :]
    dz[bidx, jidx, targets] -= 1.0
    dz /= bsz

    g = cache["g"]
    dz_j = dz.transpose(1, 0, 2)                            # (m, B, M)
    grads["token_tables"] += np.matmul(
        dz_j.transpose(0, 2, 1), g.transpose(1, 0, 2)) / tau
    dg = np.matmul(dz_j, tables).transpose(1, 0, 2) / tau   # (B, m, d)

    # projection heads
    hr = cache["hr"]
    dg_j = dg.transpose(1, 0, 2)                            # (m, B, d)
    grads["head_w2"] += np.matmul(dg_j.transpose(0, 2, 1), hr.transpose(1, 0, 2))
    grads["head_b2"] += dg.sum(axis=0)
    dhr = np.matmul(dg_j, ckpt.head_w2).transpose(1, 0, 2)  # (B, m, h)
    dh1 = dhr * (cache["h1"] > 0.0)
    dh1_j = dh1.transpose(1, 0, 2)                          # (m, B, h)
    grads["head_w1"] += np.matmul(dh1_j.transpose(0, 2, 1), cache["s"])
    grads["head_b1"] += dh1.sum(axis=0)
    ds = np.matmul(dh1_j, ckpt.head_w1).sum(axis=0)         # (B, d)

    # encoder
    r = cache["r"]
    grads["enc_w2"] += ds.T @ r
    grads["enc_b2"] += ds.sum(axis=0)
    dr = ds @ ckpt.enc_w2
    da1 = dr * (cache["a1"] > 0.0)
    grads["enc_w1"] += da1.T @ cache["u"]
    grads["enc_b1"] += da1.sum(axis=0)
    du = da1 @ ckpt.enc_w1                                  # (B, 2d)

    # back to per-position item vectors
    dmean = du[:, :d] / lengths[:, None]
    dv = np.where(mask[..., None], dmean[:, None, :], 0.0)  # (B, T, d)
    last_idx = lengths - 1
    dv[np.arange(bsz), last_idx] += du[:, d:]

    # pooling path into the token tables
    flat_codes = codes[mask]                                # (P, m)
    flat_dv = dv[mask]                                      # (P, d)
    if ckpt.aggregation == "mean":
        contrib = flat_dv / m
        for j in range(m):
            np.add.at(grads["token_tables"][j], flat_codes[:, j], contrib)
    else:
        flat_arg = cache["agg_argmax"][mask]                # (P, d)
        for j in range(m):
            routed = np.where(flat_arg == j, flat_dv, 0.0)
            np.add.at(grads["token_tables"][j], flat_codes[:, j], routed)
    return grads


def batch_loss_and_grads(batch: list[tuple[np.ndarray, int]], catalog: ItemCatalog,
                         ckpt: ModelCheckpoint):
    """Convenience wrapper: (prefix item ids, target item id) pairs in,
    (mean loss, gradient dict) out."""
    sequences = [np.asarray(seq, dtype=np.int64) for seq, _ in batch]
    targets = catalog.codes[np.asarray([t for _, t in batch], dtype=np.int64)]
    targets = targets.astype(np.int64)
    codes, mask, lengths = _pad_batch(sequences, catalog)
    loss, cache = batch_forward(codes, mask, lengths, targets, ckpt, want_cache=True)
    return loss, batch_backward(cache, ckpt)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

def _make_pairs(train_sequences, max_seq_len: int):
    """Every prefix of length >= 1 predicts its next item, capped history."""
    pairs = []
    for seq in train_sequences:
        for n in range(1, len(seq)):
            start = max(0, n - max_seq_len)
            pairs.append((seq[start:n], int(seq[n])))
    return pairs


class _Adam:
    def __init__(self, params: dict[str, np.ndarray], lr: float,
                 beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params, grads):
        self.t += 1
        for k, p in params.items():
            g = grads[k]
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            mhat = self.m[k] / (1 - self.b1 ** self.t)
            vhat = self.v[k] / (1 - self.b2 ** self.t)
            p -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


@dataclass
class TrainResult:
    checkpoint: ModelCheckpoint
    epoch_losses: list[float]
    valid_ndcg: list[float]
    best_epoch: int


def train(split, catalog: ItemCatalog, config: TrainConfig) -> TrainResult:
    """SGD/Adam training with early stopping on validation NDCG@10.

    `split` is a bench.SplitDataset (train prefixes plus per-user valid
    pairs). Returns the checkpoint with the best validation NDCG@10.
    """
    from . import scorer
    from .bench import ndcg_at_k

    pairs = _make_pairs(split.train_sequences, config.max_seq_len)
    if not pairs:
        raise DataError("no training pairs: all sequences too short")

    ckpt = init_checkpoint(
        catalog.scheme, seed=config.seed, aggregation=config.aggregation,
        temperature=config.temperature, head_hidden=config.head_hidden,
        catalog_digest=None,
    )
    params = ckpt.parameters()
    opt = _Adam(params, config.learning_rate) if config.optimizer == "adam" else None

    rng = np.random.default_rng(config.seed + 1)
    n_valid = len(split.valid_prefixes)
    if n_valid > config.valid_user_cap:
        valid_idx = rng.choice(n_valid, size=config.valid_user_cap, replace=False)
        valid_idx.sort()
    else:
        valid_idx = np.arange(n_valid)

    def valid_ndcg10(c: ModelCheckpoint) -> float:
        total = 0.0
        for i in valid_idx:
            prefix = split.valid_prefixes[i][-config.max_seq_len:]
            v, _ = aggregate_batch(catalog.codes[prefix], c.token_tables,
                                   c.aggregation)
            s = encode_sequence(v, c)
            cache = scorer.build_logit_cache(s, c)
            ranked = scorer.exact_topk(cache, catalog, 10)
            total += ndcg_at_k([item for item, _ in ranked],
                               split.valid_targets[i], 10)
        return total / max(len(valid_idx), 1)

    best = ckpt.copy()
    best_score = -1.0
    best_epoch = -1
    since_improve = 0
    epoch_losses: list[float] = []
    valid_scores: list[float] = []

    order = np.arange(len(pairs))
    for epoch in range(config.epochs):
        rng.shuffle(order)
        total_loss = 0.0
        nb = 0
        for start in range(0, len(order), config.batch_size):
            batch = [pairs[i] for i in order[start:start + config.batch_size]]
            loss, grads = batch_loss_and_grads(batch, catalog, ckpt)
            total_loss += loss
            nb += 1
            if opt is None:
                for k, p in params.items():
                    p -= config.learning_rate * grads[k]
            else:
                opt.step(params, grads)
        epoch_losses.append(total_loss / max(nb, 1))

        score = valid_ndcg10(ckpt)
        valid_scores.append(score)
        if score > best_score:
            best_score = score
            best = ckpt.copy()
            best_epoch = epoch
            since_improve = 0
        else:
            since_improve += 1
            if since_improve >= config.patience:
                break

    return TrainResult(checkpoint=best, epoch_losses=epoch_losses,
                       valid_ndcg=valid_scores, best_epoch=best_epoch)


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def save_checkpoint(path, ckpt: ModelCheckpoint) -> str:
    meta = {
        "aggregation": ckpt.aggregation,
        "temperature": ckpt.temperature,
    }
    if ckpt.catalog_digest is not None:
        meta["catalog_digest"] = ckpt.catalog_digest
    return container.write_container(
        path, CHECKPOINT_MAGIC, ckpt.scheme,
        arrays=ckpt.parameters(), meta=meta,
    )


def load_checkpoint(path) -> tuple[ModelCheckpoint, str]:
    scheme, arrays, meta = container.read_container(path, CHECKPOINT_MAGIC)
    arrays = {k: np.asarray(v, dtype=np.float64) for k, v in arrays.items()}
    ckpt = ModelCheckpoint(
        scheme=scheme,
        aggregation=meta["aggregation"],
        temperature=float(meta["temperature"]),
        catalog_digest=meta.get("catalog_digest"),
        **arrays,
    )
    return ckpt, meta["digest"]
