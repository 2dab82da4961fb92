"""Dense-retrieval training: frozen-embedding matching and contrastive tuning.

The indirect scheme trains a separate scoring model over frozen query and
target embeddings assembled into candidate sets with one planted match.
The direct scheme fine-tunes the embedding model itself with a
temperature-scaled cosine contrastive loss. Inference ranks targets by
batched cosine similarity.
"""

import csv
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .models import embedding_graph, retrieval_mixer_forward, sequence_embedding
from .tensor import Tensor, backward, multinomial_sample
from .training import EvalRecord, TrainReport, adamw_state, adamw_step, clip_global_norm

log = logging.getLogger(__name__)


@dataclass
class EmbeddingStore:
    """Paired query/target embedding rows from one frozen source model."""

    queries: np.ndarray
    targets: np.ndarray
    source_model_id: str = ""
    convention: str = "second-to-last-token last hidden layer"

    def __post_init__(self):
        if self.queries.shape != self.targets.shape:
            raise ValueError(f"query/target tables must pair by index: {self.queries.shape} vs {self.targets.shape}")
        if not (np.all(np.isfinite(self.queries)) and np.all(np.isfinite(self.targets))):
            raise ValueError("embedding store contains non-finite rows")

    def __len__(self):
        return self.queries.shape[0]


@dataclass
class RetrievalBatch:
    """One candidate set: row 0 is the query, row m holds the true target."""

    a: np.ndarray
    q: np.ndarray
    m: int

    def __post_init__(self):
        c = self.a.shape[0]
        if not 1 <= self.m <= c - 1:
            raise ValueError(f"match index {self.m} outside [1, {c - 1}]")
        if self.q.shape != (c,) or self.q[self.m] != 1 or self.q.sum() != 1:
            raise ValueError("label must be one-hot at the match index")


@dataclass(frozen=True)
class InfoNCEConfig:
    tau: float = 0.02
    negatives: int = 31
    batches_per_update: int = 4
    lr: float = 1e-4
    steps: int = 500
    seed: int = 0
    eval_every: int = 100
    weight_decay: float = 0.01
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    grad_clip: float = 1.0

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.negatives < 1:
            raise ValueError("need at least one negative")


# ---------------------------------------------------------------------------
# embedding extraction

def embed_corpus(model, sequences, workers=1):
    """Embed each sequence with the frozen model; skipped items are logged.

    Returns (rows, kept_indices): one row per sequence that carries at
    least two non-pad tokens.
    """
    def one(item):
        i, seq = item
        try:
            return i, sequence_embedding(model, seq)
        except ValueError as e:
            log.warning("skipping sequence %d: %s", i, e)
            return i, None

    items = list(enumerate(sequences))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one, items))
    else:
        results = [one(it) for it in items]
    kept = [(i, row) for i, row in results if row is not None]
    if not kept:
        return np.zeros((0, model.config.d_model)), []
    rows = np.stack([row for _, row in kept])
    return rows, [i for i, _ in kept]


def embed_pair_store(model, query_seqs, target_seqs, model_id=""):
    """EmbeddingStore from paired sequences; a skip on either side drops the pair."""
    q_rows, q_idx = embed_corpus(model, query_seqs)
    t_rows, t_idx = embed_corpus(model, target_seqs)
    common = sorted(set(q_idx) & set(t_idx))
    qmap = {i: r for i, r in zip(q_idx, q_rows)}
    tmap = {i: r for i, r in zip(t_idx, t_rows)}
    return EmbeddingStore(
        queries=np.stack([qmap[i] for i in common]) if common else np.zeros((0, model.config.d_model)),
        targets=np.stack([tmap[i] for i in common]) if common else np.zeros((0, model.config.d_model)),
        source_model_id=model_id,
    )


def split_store(store, holdout):
    """Split the last `holdout` pairs off as an evaluation store."""
    if not 0 < holdout < len(store):
        raise ValueError(f"holdout must lie in (0, {len(store)}), got {holdout}")
    cut = len(store) - holdout
    return (
        EmbeddingStore(store.queries[:cut], store.targets[:cut], store.source_model_id, store.convention),
        EmbeddingStore(store.queries[cut:], store.targets[cut:], store.source_model_id, store.convention),
    )


def center_and_normalize(train_store, *others):
    """Subtract the training means and scale rows to unit length.

    Raw last-hidden-layer rows share a large common direction that swamps
    the pair signal; centering on the training statistics removes it.
    """
    mu_q = train_store.queries.mean(axis=0)
    mu_t = train_store.targets.mean(axis=0)

    def prep(store):
        q = store.queries - mu_q
        t = store.targets - mu_t
        q = q / np.linalg.norm(q, axis=1, keepdims=True)
        t = t / np.linalg.norm(t, axis=1, keepdims=True)
        return EmbeddingStore(q, t, store.source_model_id, store.convention)

    out = [prep(train_store)] + [prep(s) for s in others]
    return out[0] if not others else tuple(out)


def pca_project(train_store, *others, dim=16):
    """Project stores onto the training rows' top principal directions.

    The scoring model's match-detection circuit sits behind an optimization
    plateau whose length grows with input dimension; concentrating the
    pair signal into a few directions shortens it dramatically. Rows are
    re-normalized to unit length after projection.
    """
    x = np.concatenate([train_store.queries, train_store.targets])
    _, _, vt = np.linalg.svd(x, full_matrices=False)
    basis = vt[: min(dim, vt.shape[0])].T

    def prep(store):
        q = store.queries @ basis
        t = store.targets @ basis
        q = q / np.linalg.norm(q, axis=1, keepdims=True)
        t = t / np.linalg.norm(t, axis=1, keepdims=True)
        return EmbeddingStore(q, t, store.source_model_id, store.convention)

    out = [prep(train_store)] + [prep(s) for s in others]
    return out[0] if not others else tuple(out)


def normalize_store(store, _unused=None, holdout=None, dim=16):
    """Split, center+normalize, then PCA-project; the CLI's scorer input prep."""
    train_store, eval_store = split_store(store, holdout)
    train_store, eval_store = center_and_normalize(train_store, eval_store)
    return pca_project(train_store, eval_store, dim=dim)


# ---------------------------------------------------------------------------
# candidate-set sampling

def sample_retrieval_batch(store, n, c, rng):
    """Assemble one c-row candidate set for query n with a planted match.

    Negatives are drawn without replacement from all target indices except
    the match; the match lands at a uniform random slot in [1, c-1].
    """
    size = len(store)
    if c - 1 > size - 1:
        raise ValueError(f"candidate count {c} needs at least {c} stored pairs, have {size}")
    weights = np.ones(size)
    weights[n] = 0.0
    r = multinomial_sample(weights, c - 1, rng)
    a = np.empty((c, store.queries.shape[1]), dtype=store.targets.dtype)
    a[0] = store.queries[n]
    a[1:] = store.targets[r]
    m = int(rng.integers(1, c))
    a[m] = store.targets[n]
    q = np.zeros(c, dtype=np.int64)
    q[m] = 1
    return RetrievalBatch(a=a, q=q, m=m)


def sample_sequence_batch(query_seqs, target_seqs, n, count, rng):
    """Token-level analogue: the query sequence, its target, and `count` negatives."""
    size = len(target_seqs)
    weights = np.ones(size)
    weights[n] = 0.0
    negatives = multinomial_sample(weights, count, rng)
    return query_seqs[n], target_seqs[n], [target_seqs[j] for j in negatives]


# ---------------------------------------------------------------------------
# indirect training (frozen embeddings, trainable scorer)

def train_indirect(model, store, eval_store, steps=200, batch_size=16, lr=1e-4, seed=0, eval_every=50, lr_schedule="constant"):
    """Cross-entropy training of the scoring model over frozen embeddings.

    The match-detection circuit sits behind a long optimization plateau, so
    the default keeps the learning rate constant; "linear" decays to zero.
    """
    from .training import TrainConfig

    cfg = TrainConfig(steps=steps, lr=lr, seed=seed, eval_every=eval_every, batch_size=batch_size)
    lr_at = (lambda s: cfg.lr_at(s, lr)) if lr_schedule == "linear" else (lambda s: lr)
    c = model.config.n_ctx
    rng = np.random.default_rng(seed)
    state = adamw_state(model)
    report = TrainReport()

    def eval_ce():
        losses = []
        eval_rng = np.random.default_rng(seed + 1)
        with T.no_grad():
            for n in range(len(eval_store)):
                batch = sample_retrieval_batch(eval_store, n, c, eval_rng)
                logits, _ = retrieval_mixer_forward(model, Tensor(batch.a.astype(model.dtype)))
                ce = T.cross_entropy(T.reshape(logits, (1, c)), [batch.m])
                losses.append(ce.item())
        return float(np.mean(losses))

    def record(step, train_loss, tokens):
        report.records.append(EvalRecord(step, float(train_loss), eval_ce(), lr_at(step), tokens))

    record(0, float("nan"), 0)
    for step in range(steps):
        losses = []
        for _ in range(batch_size):
            n = int(rng.integers(0, len(store)))
            batch = sample_retrieval_batch(store, n, c, rng)
            logits, _ = retrieval_mixer_forward(model, Tensor(batch.a.astype(model.dtype)))
            losses.append(T.cross_entropy(T.reshape(logits, (1, c)), [batch.m]))
        loss = T.mul(losses[0] if len(losses) == 1 else _sum_tensors(losses), 1.0 / len(losses))
        backward(loss)
        grads = {name: p.grad for name, p in model.params.items() if p.grad is not None}
        if cfg.grad_clip is not None:
            clip_global_norm(grads, cfg.grad_clip)
        adamw_step(model.params, grads, state, cfg, step + 1, lr_at(step))
        for p in model.params.values():
            p.grad = None
        report.step_losses.append((step + 1, loss.item(), lr_at(step), (step + 1) * batch_size * c))
        if (step + 1) % eval_every == 0 or step + 1 == steps:
            record(step + 1, loss.item(), (step + 1) * batch_size * c)
    report.final_step = steps
    return report


def _sum_tensors(ts):
    out = ts[0]
    for t in ts[1:]:
        out = T.add(out, t)
    return out


# ---------------------------------------------------------------------------
# InfoNCE

def _cosine(a, b):
    num = T.tsum(T.mul(a, b))
    na = T.sqrt(T.tsum(T.mul(a, a)))
    nb = T.sqrt(T.tsum(T.mul(b, b)))
    if na.item() == 0.0 or nb.item() == 0.0:
        raise ValueError("cosine similarity undefined for a zero-norm vector")
    return T.div(num, T.mul(na, nb))


def infonce_loss(q_emb, pos_emb, neg_embs, tau=0.02):
    """Contrastive loss -log f+/(f+ + sum fi) with f = exp(cos/tau).

    Evaluated in log space: at tau = 0.02 the raw exponentials overflow,
    the log-sum-exp form is exact.
    """
    sims = [T.mul(_cosine(q_emb, pos_emb), 1.0 / tau)]
    for neg in neg_embs:
        sims.append(T.mul(_cosine(q_emb, neg), 1.0 / tau))
    stacked = T.concat([T.reshape(s, (1,)) for s in sims], axis=0)
    peak = float(np.max(stacked.data))
    lse = T.add(T.log(T.tsum(T.exp(T.add(stacked, -peak)))), peak)
    return T.add(lse, T.neg(sims[0]))


def train_infonce(model, pair_corpus, cfg, eval_pairs=None):
    """Contrastive fine-tuning of the embedding model on query/target pairs.

    `pair_corpus` is (query_seqs, target_seqs); gradients flow through the
    embedding extraction into the model itself.
    """
    query_seqs, target_seqs = pair_corpus
    if len(query_seqs) != len(target_seqs):
        raise ValueError("query/target sequence lists must pair by index")
    if len(target_seqs) < cfg.negatives + 1:
        raise ValueError(f"need at least {cfg.negatives + 1} pairs for {cfg.negatives} negatives")
    rng = np.random.default_rng(cfg.seed)
    state = adamw_state(model)
    report = TrainReport()

    def one_loss(n):
        q_emb = embedding_graph(model, query_seqs[n])
        pos = embedding_graph(model, target_seqs[n])
        _, _, neg_seqs = sample_sequence_batch(query_seqs, target_seqs, n, cfg.negatives, rng)
        negs = [embedding_graph(model, s) for s in neg_seqs]
        return infonce_loss(q_emb, pos, negs, cfg.tau)

    def eval_loss():
        if eval_pairs is None:
            return float("nan")
        eq, et = eval_pairs
        eval_rng = np.random.default_rng(cfg.seed + 1)
        losses = []
        with T.no_grad():
            for n in range(len(eq)):
                q_emb = embedding_graph(model, eq[n])
                pos = embedding_graph(model, et[n])
                weights = np.ones(len(et)) if len(et) > cfg.negatives else None
                if weights is None:
                    break
                weights[n] = 0.0
                neg_idx = multinomial_sample(weights, cfg.negatives, eval_rng)
                negs = [embedding_graph(model, et[j]) for j in neg_idx]
                losses.append(infonce_loss(q_emb, pos, negs, cfg.tau).item())
        return float(np.mean(losses)) if losses else float("nan")

    lr0 = cfg.lr
    lr_at = lambda s: lr0 * (1.0 - s / cfg.steps)
    report.records.append(EvalRecord(0, float("nan"), eval_loss(), lr0, 0))
    for step in range(cfg.steps):
        losses = [one_loss(int(rng.integers(0, len(query_seqs)))) for _ in range(cfg.batches_per_update)]
        loss = T.mul(_sum_tensors(losses), 1.0 / len(losses))
        loss_val = loss.item()
        if not np.isfinite(loss_val):
            raise RuntimeError(f"non-finite contrastive loss at step {step}")
        backward(loss)
        grads = {name: p.grad for name, p in model.params.items() if p.grad is not None}
        if cfg.grad_clip is not None:
            clip_global_norm(grads, cfg.grad_clip)
        adamw_step(model.params, grads, state, cfg, step + 1, lr_at(step))
        for p in model.params.values():
            p.grad = None
        report.step_losses.append((step + 1, loss_val, lr_at(step), (step + 1) * cfg.batches_per_update))
        if (step + 1) % cfg.eval_every == 0 or step + 1 == cfg.steps:
            report.records.append(
                EvalRecord(step + 1, loss_val, eval_loss(), lr_at(step), (step + 1) * cfg.batches_per_update)
            )
    report.final_step = cfg.steps
    return report


# ---------------------------------------------------------------------------
# inference and evaluation

def retrieve_topk(query_emb, target_matrix, k):
    """Indices of the k most cosine-similar target rows, ties to lower index.

    Batched form: normalize every row to unit length, then reduce the
    products in one vectorized pass. The reduction order per row matches a
    plain per-pair cosine loop, so the two agree bit-for-bit.
    """
    q = np.asarray(query_emb, dtype=np.float64)
    y = np.asarray(target_matrix, dtype=np.float64)
    qn = np.sqrt(np.sum(q * q))
    yn = np.sqrt(np.sum(y * y, axis=1))
    if qn == 0 or np.any(yn == 0):
        raise ValueError("zero-norm vector has no cosine direction")
    z = np.sum((y / yn[:, None]) * (q / qn), axis=1)
    order = np.lexsort((np.arange(len(z)), -z))
    return order[:k].tolist(), z


ACCURACY_CSV_HEADER = ["n", "trials", "top1_accuracy"]


def write_accuracy_csv(path, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(ACCURACY_CSV_HEADER)
        for n, trials, acc in rows:
            writer.writerow([n, trials, repr(acc)])


def eval_topk_accuracy(store, sample_sizes, trials, rng=None):
    """Top-1 accuracy per candidate-set size n over seeded random draws.

    Each trial scores one query against its true target plus n-2 distractor
    targets. Sizes needing more targets than available are skipped with a
    notice. Monotone non-increase in n is reported, not asserted.
    """
    rng = rng or np.random.default_rng(0)
    size = len(store)
    rows = []
    for n in sample_sizes:
        if n - 2 > size - 1:
            log.warning("skipping n=%d: only %d pairs available", n, size)
            continue
        hits = 0
        for _ in range(trials):
            idx = int(rng.integers(0, size))
            weights = np.ones(size)
            weights[idx] = 0.0
            distractors = multinomial_sample(weights, n - 2, rng)
            candidates = np.concatenate([store.targets[idx:idx + 1], store.targets[distractors]])
            top, _ = retrieve_topk(store.queries[idx], candidates, 1)
            hits += top[0] == 0
        rows.append((n, trials, hits / trials))
    return rows
