"""Training objectives, the AdamW optimizer, and the shared step driver.

Objectives differ only in how a batch becomes a scalar loss: shifted
all-next-token prediction (optionally at several shift widths summed),
suffix prediction from a learned placeholder, two-sided prediction, and
sequence reconstruction. Every variant masks pad-token targets and
averages per token, so inserting pad-only sequences never moves the loss.
"""

import csv
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import PAD_ID
from .models import (
    autoencoder_forward,
    bidirectional_forward,
    forward,
    forward_from_embedding,
)
from .tensor import Tensor, backward

OBJECTIVES = ("clm", "multi_token", "many_token", "bidirectional", "autoencoder")

MIXER_LR = 5e-4
TRANSFORMER_LR = 2e-4


def default_lr(family):
    return TRANSFORMER_LR if "transformer" in family else MIXER_LR


@dataclass(frozen=True)
class TrainConfig:
    objective: str = "clm"
    batch_size: int = 8
    steps: int = 100
    lr: float = None  # per-family default when None
    betas: tuple = (0.9, 0.999)
    weight_decay: float = 0.01
    eps: float = 1e-8
    seed: int = 0
    eval_every: int = 50
    multi_m: int = 1
    prefix_len: int = None
    grad_clip: float = 1.0  # None disables

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise ValueError(f"unknown objective {self.objective!r}")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.multi_m < 1 or self.multi_m > 4:
            raise ValueError("multi-token width must lie in [1, 4]")

    def lr_at(self, step_index, lr0):
        return lr0 * (1.0 - step_index / self.steps)


@dataclass
class EvalRecord:
    step: int
    train_loss: float
    eval_loss: float
    lr: float
    tokens_seen: int


@dataclass
class TrainReport:
    records: list = field(default_factory=list)
    step_losses: list = field(default_factory=list)  # (step, loss, lr, tokens_seen)
    final_step: int = 0
    checkpoint_id: str = ""

    def final_eval_loss(self):
        return self.records[-1].eval_loss


class TrainingDiverged(RuntimeError):
    """Raised on a non-finite loss; the model is restored to the last-good state."""

    def __init__(self, step, report):
        super().__init__(f"non-finite loss at step {step}; model restored to last checkpointed state")
        self.step = step
        self.report = report


METRICS_CSV_HEADER = ["step", "split", "loss", "lr", "tokens_seen"]


def write_metrics_csv(path, report):
    """One train row per optimizer step, one eval row per evaluation point."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRICS_CSV_HEADER)
        for step, loss, lr, tokens in report.step_losses:
            writer.writerow([step, "train", repr(loss), repr(lr), tokens])
        for r in report.records:
            writer.writerow([r.step, "eval", repr(r.eval_loss), repr(r.lr), r.tokens_seen])


# ---------------------------------------------------------------------------
# optimizer

def adamw_state(model):
    return {
        name: {"m": np.zeros_like(p.data), "v": np.zeros_like(p.data)}
        for name, p in model.params.items()
    }


def adamw_step(params, grads, state, cfg, step, lr_t):
    """Decoupled-weight-decay Adam update; `step` is 1-based for bias correction."""
    b1, b2 = cfg.betas
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        s = state[name]
        s["m"] = b1 * s["m"] + (1.0 - b1) * g
        s["v"] = b2 * s["v"] + (1.0 - b2) * (g * g)
        m_hat = s["m"] / (1.0 - b1**step)
        v_hat = s["v"] / (1.0 - b2**step)
        p.data = p.data - lr_t * (m_hat / (np.sqrt(v_hat) + cfg.eps) + cfg.weight_decay * p.data)


def clip_global_norm(grads, max_norm):
    total = np.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))
    if total > max_norm and total > 0:
        scale = max_norm / total  # applied in each grad's own dtype
        for name in grads:
            grads[name] = grads[name] * grads[name].dtype.type(scale)
    return total


# ---------------------------------------------------------------------------
# objective losses

def _accumulate_mean(pairs):
    """Combine (sum_tensor, count) pairs into one mean loss over all tokens."""
    total_count = sum(c for _, c in pairs if c > 0)
    if total_count == 0:
        raise ValueError("empty loss: batch contains no unmasked target positions")
    total = None
    for s, c in pairs:
        if c == 0:
            continue
        total = s if total is None else T.add(total, s)
    return T.mul(total, 1.0 / total_count)


def _shifted_loss(model, batch, shifts):
    """All-next-token loss; several shift widths share one forward pass each."""
    per_shift = {s: [] for s in shifts}
    n = model.config.n_ctx
    for ids in batch:
        logits, _ = forward(model, ids)
        for s in shifts:
            targets = ids[s:]
            count = int(np.sum(targets != PAD_ID))
            if count == 0:
                per_shift[s].append((None, 0))
                continue
            ce = T.cross_entropy(T.narrow(logits, 0, 0, n - s), targets, ignore_id=PAD_ID, reduction="sum")
            per_shift[s].append((ce, count))
    loss = None
    for s in shifts:
        shift_loss = _accumulate_mean(per_shift[s])
        loss = shift_loss if loss is None else T.add(loss, shift_loss)
    return loss


def many_token_logits(model, ids, prefix_len):
    """Forward pass with suffix positions fed the learned placeholder vector.

    Suffix logits cannot depend on the suffix ground-truth tokens: those
    token ids never enter the forward pass.
    """
    cfg = model.config
    n = cfg.n_ctx
    if prefix_len is None or not 1 <= prefix_len < n:
        raise ValueError(f"prefix_len must lie in [1, n_ctx), got {prefix_len}")
    placeholder = model.params["many_token_placeholder"]
    ones = Tensor(np.ones((n - prefix_len, 1), dtype=model.dtype))
    prefix_e = T.embedding_lookup(model.params["wte"], ids[:prefix_len])
    e = T.concat([prefix_e, T.matmul(ones, placeholder)], axis=0)
    logits, _ = forward_from_embedding(model, e, ids=None)
    return logits


def _many_token_loss(model, batch, prefix_len):
    n = model.config.n_ctx
    pairs = []
    for ids in batch:
        logits = many_token_logits(model, ids, prefix_len)
        targets = ids[prefix_len:]
        count = int(np.sum(targets != PAD_ID))
        if count == 0:
            pairs.append((None, 0))
            continue
        ce = T.cross_entropy(
            T.narrow(logits, 0, prefix_len - 1, n - prefix_len), targets, ignore_id=PAD_ID, reduction="sum"
        )
        pairs.append((ce, count))
    return _accumulate_mean(pairs)


def _unshifted_loss(forward_fn):
    def loss_fn(model, batch):
        pairs = []
        for ids in batch:
            logits, _ = forward_fn(model, ids)
            count = int(np.sum(ids != PAD_ID))
            if count == 0:
                pairs.append((None, 0))
                continue
            pairs.append((T.cross_entropy(logits, ids, ignore_id=PAD_ID, reduction="sum"), count))
        return _accumulate_mean(pairs)

    return loss_fn


def batch_loss(model, batch, cfg):
    if cfg.objective == "clm":
        return _shifted_loss(model, batch, [1])
    if cfg.objective == "multi_token":
        return _shifted_loss(model, batch, list(range(1, cfg.multi_m + 1)))
    if cfg.objective == "many_token":
        return _many_token_loss(model, batch, cfg.prefix_len)
    if cfg.objective == "bidirectional":
        return _unshifted_loss(bidirectional_forward)(model, batch)
    return _unshifted_loss(autoencoder_forward)(model, batch)


def _check_family(model, cfg):
    fam = model.config.family
    wants = {
        "clm": ("masked_mixer", "transformer"),
        "multi_token": ("masked_mixer", "transformer"),
        "many_token": ("masked_mixer", "transformer"),
        "bidirectional": ("bidirectional_mixer", "bidirectional_transformer"),
        "autoencoder": ("mixer_autoencoder", "transformer_autoencoder"),
    }[cfg.objective]
    if fam not in wants:
        raise ValueError(f"objective {cfg.objective!r} expects family in {wants}, got {fam!r}")


# ---------------------------------------------------------------------------
# driver

def _batches(store, batch_size, rng):
    """Deterministic epoch stream: reshuffle chunk order each epoch, no replacement."""
    n = len(store)
    b = min(batch_size, n)
    while True:
        order = rng.permutation(n)
        for start in range(0, n - b + 1, b):
            yield store.ids[order[start:start + b]]


def evaluate(model, store, cfg, max_batches=None):
    losses = []
    counts = []
    n = len(store)
    b = min(cfg.batch_size, n)
    with T.no_grad():
        for start in range(0, n, b):
            batch = store.ids[start:start + b]
            losses.append(batch_loss(model, batch, cfg).item())
            counts.append(len(batch))
            if max_batches and len(losses) >= max_batches:
                break
    return float(np.average(losses, weights=counts))


def train(model, corpus, cfg, checkpoint_path=None, save_fn=None):
    """Run one training job and return its per-eval report.

    `corpus` is a (train_store, eval_store) pair. A non-finite loss aborts
    with the model restored to the last recorded state. When `save_fn` is
    given it is called as save_fn(model, tag) at every eval point.
    """
    _check_family(model, cfg)
    train_store, eval_store = corpus
    if len(train_store) == 0:
        raise ValueError("training split is empty")
    if cfg.objective == "many_token" and "many_token_placeholder" not in model.params:
        rng0 = np.random.default_rng(cfg.seed)
        model.params["many_token_placeholder"] = Tensor(
            rng0.normal(0.0, 0.02, size=(1, model.config.d_model)).astype(model.dtype), requires_grad=True
        )

    lr0 = cfg.lr if cfg.lr is not None else default_lr(model.config.family)
    rng = np.random.default_rng(cfg.seed)
    stream = _batches(train_store, cfg.batch_size, rng)
    state = adamw_state(model)
    report = TrainReport()

    def snapshot():
        return {name: p.data.copy() for name, p in model.params.items()}

    def record(step, train_loss, tokens):
        eval_loss = evaluate(model, eval_store, cfg) if len(eval_store) else float("nan")
        report.records.append(EvalRecord(step, float(train_loss), eval_loss, cfg.lr_at(step, lr0), tokens))
        if save_fn:
            save_fn(model, f"step{step:06d}")

    with T.no_grad():
        first_loss = batch_loss(model, train_store.ids[: min(cfg.batch_size, len(train_store))], cfg).item()
    record(0, first_loss, 0)
    last_good = snapshot()

    tokens = 0
    since_eval = []
    for step in range(cfg.steps):
        batch = next(stream)
        loss = batch_loss(model, batch, cfg)
        loss_val = loss.item()
        if not np.isfinite(loss_val):
            for name, p in model.params.items():
                p.data = last_good[name]
            raise TrainingDiverged(step, report)
        backward(loss)
        grads = {name: p.grad for name, p in model.params.items() if p.grad is not None}
        if cfg.grad_clip is not None:
            clip_global_norm(grads, cfg.grad_clip)
        adamw_step(model.params, grads, state, cfg, step + 1, cfg.lr_at(step, lr0))
        for p in model.params.values():
            p.grad = None
        tokens += batch.shape[0] * batch.shape[1]
        since_eval.append(loss_val)
        report.step_losses.append((step + 1, loss_val, cfg.lr_at(step, lr0), tokens))
        if (step + 1) % cfg.eval_every == 0 or step + 1 == cfg.steps:
            record(step + 1, float(np.mean(since_eval)), tokens)
            since_eval = []
            last_good = snapshot()

    report.final_step = cfg.steps
    if checkpoint_path:
        from .checkpoint import save_checkpoint

        save_checkpoint(model, checkpoint_path)
        report.checkpoint_id = str(checkpoint_path)
    return report


def train_clm(model, corpus, cfg):
    if cfg.objective != "clm":
        raise ValueError("cfg.objective must be 'clm'")
    return train(model, corpus, cfg)


def train_multi_token(model, corpus, cfg):
    if cfg.objective != "multi_token":
        raise ValueError("cfg.objective must be 'multi_token'")
    return train(model, corpus, cfg)


def train_many_token(model, corpus, cfg):
    if cfg.objective != "many_token":
        raise ValueError("cfg.objective must be 'many_token'")
    return train(model, corpus, cfg)


def train_bidirectional(model, corpus, cfg):
    if cfg.objective != "bidirectional":
        raise ValueError("cfg.objective must be 'bidirectional'")
    return train(model, corpus, cfg)


def train_autoencoder(model, corpus, cfg):
    if cfg.objective != "autoencoder":
        raise ValueError("cfg.objective must be 'autoencoder'")
    return train(model, corpus, cfg)
