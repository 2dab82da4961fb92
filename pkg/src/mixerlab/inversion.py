"""Gradient-based input recovery from hidden-layer activations.

Starting from a random embedding, plain gradient descent minimizes the L1
distance between the running iterate's activations at a chosen layer and
those of the true input. The best iterate is decoded back to tokens with
the embedding matrix's pseudoinverse, and agreement is scored with a
pad-aware normalized Hamming distance. Convergence is judged against an
epsilon calibrated from the activation shift under tiny Gaussian noise.
"""

import csv
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import PAD_ID
from .models import _as_ids, forward_from_embedding
from .tensor import Tensor, backward, pinv


@dataclass(frozen=True)
class InversionConfig:
    n_iters: int = 500
    eta: float = 0.1  # tuned once on the untrained flat mixer, then frozen
    init_mean: float = 0.5
    init_std: float = 1.0 / 20.0
    calib_noise_std: float = 1.0 / 20.0
    target_layer: int = -2  # last block output; -1 selects the post-norm state
    last_token_only: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.n_iters < 1:
            raise ValueError("n_iters must be >= 1")
        if self.eta <= 0:
            raise ValueError("eta must be positive")

    def eta_at(self, n):
        """Linear schedule from eta down to eta/10 across the run."""
        if self.n_iters == 1:
            return self.eta
        return self.eta * (1.0 - 0.9 * n / (self.n_iters - 1))


@dataclass
class InversionReport:
    final_distance: float
    epsilon: float
    converged: bool
    decoded: np.ndarray
    hamming: float
    best_iter: int
    distances: list = field(repr=False, default_factory=list)
    calibration_decode_stable: bool = True
    seed: int = 0
    model_id: str = ""
    layer: int = -1
    n_ctx: int = 0


INVERSION_CSV_HEADER = ["seed", "model_id", "layer", "n_ctx", "final_distance", "epsilon", "converged", "hamming"]


def csv_row(report):
    return [
        report.seed,
        report.model_id,
        report.layer,
        report.n_ctx,
        repr(report.final_distance),
        repr(report.epsilon),
        int(report.converged),
        repr(report.hamming),
    ]


def write_csv(path, reports):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(INVERSION_CSV_HEADER)
        for r in reports:
            writer.writerow(csv_row(r))


def normalized_hamming(x, y, pad_id=PAD_ID):
    """Fraction of non-pad positions of x where y disagrees."""
    x = np.asarray(x)
    y = np.asarray(y)
    if x.shape != y.shape:
        raise ValueError(f"length mismatch: {x.shape} vs {y.shape}")
    keep = x != pad_id
    if not keep.any():
        return 0.0
    return float(np.sum(x[keep] != y[keep]) / keep.sum())


def decode_embedding(w, e):
    """Map embedding rows back to tokens via pseudoinverse and argmax.

    w is the (d_model, vocab) embedding matrix; e holds one embedding row
    per position. No positional encoding is subtracted because none of the
    model families add any to their embeddings.
    """
    w = w.data if isinstance(w, Tensor) else np.asarray(w)
    e = e.data if isinstance(e, Tensor) else np.asarray(e)
    scores = pinv(w) @ e.T
    return np.argmax(scores, axis=0).astype(np.int32)


def _true_embedding(model, ids):
    return model.params["wte"].data[:, ids].T.copy()


def _target_slice(hiddens, cfg_inv):
    layer = hiddens[cfg_inv.target_layer]
    if cfg_inv.last_token_only:
        return T.narrow(layer, 0, layer.data.shape[0] - 1, 1)
    return layer


def _activations(model, e_data, ids, cfg_inv, as_leaf=False):
    e = Tensor(e_data, requires_grad=as_leaf)
    hiddens = forward_from_embedding(model, e, ids=ids)[1]
    return e, _target_slice(hiddens, cfg_inv)


@dataclass
class CalibrationResult:
    epsilon: float
    decode_stable: bool


def calibrate_epsilon(model, tokens, cfg, rng=None):
    """Activation shift caused by tiny Gaussian noise on the true embedding.

    Also checks that the noise leaves the pseudoinverse decode unchanged;
    a violation is recorded, not fatal.
    """
    cfg_m = model.config
    ids = _as_ids(tokens, cfg_m)
    if not -(cfg_m.n_layers + 2) <= cfg.target_layer < cfg_m.n_layers + 2:
        raise ValueError(f"target layer {cfg.target_layer} out of range")
    rng = rng or np.random.default_rng(cfg.seed + 1)
    dtype = model.dtype
    e_true = _true_embedding(model, ids)
    noise = rng.normal(0.0, cfg.calib_noise_std, size=e_true.shape).astype(dtype)
    with T.no_grad():
        _, base = _activations(model, e_true, ids, cfg)
        _, shifted = _activations(model, e_true + noise, ids, cfg)
    epsilon = float(np.abs(shifted.data - base.data).sum())
    w = model.params["wte"]
    stable = bool(np.array_equal(decode_embedding(w, e_true), decode_embedding(w, e_true + noise)))
    return CalibrationResult(epsilon=epsilon, decode_stable=stable)


def invert_input(model, tokens, cfg, model_id=""):
    """Recover input tokens by descending the L1 activation gap (frozen model).

    Returns the best iterate's decode, its Hamming distance to the truth,
    and the epsilon-calibrated convergence verdict.
    """
    cfg_m = model.config
    ids = _as_ids(tokens, cfg_m)
    if not -(cfg_m.n_layers + 2) <= cfg.target_layer < cfg_m.n_layers + 2:
        raise ValueError(f"target layer {cfg.target_layer} out of range")
    rng = np.random.default_rng(cfg.seed)
    dtype = model.dtype

    was_grad = {name: p.requires_grad for name, p in model.params.items()}
    model.freeze()
    try:
        e_true = _true_embedding(model, ids)
        with T.no_grad():
            _, target = _activations(model, e_true, ids, cfg)
        target = Tensor(target.data.copy())

        iterate = (cfg.init_mean + rng.normal(0.0, cfg.init_std, size=e_true.shape)).astype(dtype)
        best_dist = np.inf
        best_iter = 0
        best_e = iterate.copy()
        distances = []
        for n in range(cfg.n_iters):
            e, acts = _activations(model, iterate, ids, cfg, as_leaf=True)
            loss = T.l1_distance(acts, target)
            dist = float(loss.item())
            distances.append(dist)
            if dist < best_dist:
                best_dist, best_iter, best_e = dist, n, iterate.copy()
            backward(loss)
            if e.grad is None or not np.all(np.isfinite(e.grad)):
                raise FloatingPointError(f"non-finite inversion gradient at iteration {n}")
            iterate = iterate - (cfg.eta_at(n) * e.grad).astype(dtype)

        with T.no_grad():
            _, acts = _activations(model, iterate, ids, cfg)
        final = float(np.abs(acts.data - target.data).sum())
        distances.append(final)
        if final < best_dist:
            best_dist, best_iter, best_e = final, cfg.n_iters, iterate.copy()

        calib = calibrate_epsilon(model, ids, cfg, rng=np.random.default_rng(cfg.seed + 1))
        decoded = decode_embedding(model.params["wte"], best_e)
        return InversionReport(
            final_distance=best_dist,
            epsilon=calib.epsilon,
            converged=best_dist < calib.epsilon,
            decoded=decoded,
            hamming=normalized_hamming(ids, decoded),
            best_iter=best_iter,
            distances=distances,
            calibration_decode_stable=calib.decode_stable,
            seed=cfg.seed,
            model_id=model_id,
            layer=cfg.target_layer,
            n_ctx=cfg_m.n_ctx,
        )
    finally:
        for name, p in model.params.items():
            p.requires_grad = was_grad[name]
