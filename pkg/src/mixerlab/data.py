"""Byte-level tokenization, fixed-context chunking, and corpus splits."""

import hashlib
import queue
import threading
from dataclasses import dataclass

import numpy as np

PAD_ID = 256
BOS_ID = 257
EOS_ID = 258
VOCAB_SIZE = 259


class Tokenizer:
    """Byte-level tokenizer: ids 0..255 are raw bytes, plus pad/bos/eos.

    Round-trips arbitrary UTF-8 text exactly; pad is never produced by
    tokenize and special ids are dropped on detokenize.
    """

    pad_id = PAD_ID
    bos_id = BOS_ID
    eos_id = EOS_ID
    vocab_size = VOCAB_SIZE

    def tokenize(self, text):
        return list(text.encode("utf-8"))

    def detokenize(self, ids):
        return bytes(i for i in ids if i < 256).decode("utf-8", errors="replace")


@dataclass(frozen=True)
class TokenSequence:
    """Fixed-length integer token vector with a declared pad side."""

    ids: np.ndarray
    pad_side: str = "right"

    def __post_init__(self):
        ids = np.asarray(self.ids, dtype=np.int32)
        object.__setattr__(self, "ids", ids)
        if self.pad_side not in ("left", "right"):
            raise ValueError(f"pad_side must be 'left' or 'right', got {self.pad_side!r}")
        if ids.size and (ids.min() < 0 or ids.max() >= VOCAB_SIZE):
            raise ValueError(f"token id out of range for vocab {VOCAB_SIZE}")
        pads = ids == PAD_ID
        if pads.any():
            run = np.flatnonzero(pads)
            if self.pad_side == "right":
                contiguous = run[0] + len(run) == len(ids)
            else:
                contiguous = run[-1] + 1 == len(run)
            if not contiguous or (run[-1] - run[0] + 1) != len(run):
                raise ValueError(f"pads must be contiguous on the {self.pad_side}")

    def __len__(self):
        return len(self.ids)

    def nonpad(self):
        return self.ids[self.ids != PAD_ID]


def chunk_and_pad(ids, n_ctx, side="right"):
    """Split ids into length-n_ctx chunks, padding the final partial chunk.

    No token is lost or duplicated; an empty input gives an empty list.
    """
    if n_ctx < 2:
        raise ValueError(f"n_ctx must be >= 2, got {n_ctx}")
    ids = list(ids)
    chunks = []
    for start in range(0, len(ids), n_ctx):
        part = ids[start:start + n_ctx]
        pad = [PAD_ID] * (n_ctx - len(part))
        full = pad + part if side == "left" else part + pad
        chunks.append(TokenSequence(np.asarray(full, dtype=np.int32), pad_side=side))
    return chunks


class ChunkStore:
    """Immutable collection of fixed-length token sequences."""

    def __init__(self, sequences, pad_side="right"):
        self.pad_side = pad_side
        self.ids = (
            np.stack([s.ids for s in sequences]).astype(np.int32)
            if sequences
            else np.zeros((0, 0), dtype=np.int32)
        )

    def __len__(self):
        return self.ids.shape[0]

    def __getitem__(self, i):
        return TokenSequence(self.ids[i], pad_side=self.pad_side)


def _split_fraction(index, seed):
    digest = hashlib.sha256(f"corpus:{seed}:{index}".encode()).digest()
    return int.from_bytes(digest[:8], "little") / 2**64


def build_corpus(source, n_ctx, split_ratio=0.9, side="right", seed=0, inline=False):
    """Tokenize a text file (or inline text) into train/eval chunk stores.

    The split is deterministic: each chunk goes to train when the hash of
    (seed, chunk index) falls below split_ratio. Both splits are guaranteed
    non-empty whenever the input yields at least two chunks.
    """
    if not 0.0 < split_ratio < 1.0:
        raise ValueError(f"split_ratio must lie strictly inside (0, 1), got {split_ratio}")
    if inline:
        text = source
    else:
        try:
            with open(source, "r", encoding="utf-8") as fh:
                text = fh.read()
        except OSError as e:
            raise IOError(f"cannot read corpus {source}: {e}") from e
    chunks = chunk_and_pad(Tokenizer().tokenize(text), n_ctx, side)
    if not chunks:
        return ChunkStore([], side), ChunkStore([], side)

    fractions = [_split_fraction(i, seed) for i in range(len(chunks))]
    to_train = [f < split_ratio for f in fractions]
    if len(chunks) >= 2:
        if all(to_train):
            to_train[int(np.argmax(fractions))] = False
        elif not any(to_train):
            to_train[int(np.argmin(fractions))] = True
    train = [c for c, t in zip(chunks, to_train) if t]
    evals = [c for c, t in zip(chunks, to_train) if not t]
    return ChunkStore(train, side), ChunkStore(evals, side)


def synthetic_pairs(count, rng, key_len=6, payload_len=2, value_style="copy"):
    """Query/target text pairs sharing a random key prefix.

    Queries look like "qwerty?" and targets like "qwerty=qwerty" (the value
    echoes the key, the default) or "qwerty=xs" (random value). The echoed
    value forces a language model trained on these lines to carry the key
    through its hidden states, which is what makes the pairs matchable from
    embeddings.
    """
    letters = "abcdefghijklmnopqrstuvwxyz"
    pairs = []
    for _ in range(count):
        key = "".join(letters[i] for i in rng.integers(0, 26, size=key_len))
        if value_style == "copy":
            value = key
        else:
            value = "".join(letters[i] for i in rng.integers(0, 26, size=payload_len))
        pairs.append((f"{key}?", f"{key}={value}"))
    return pairs


def write_pairs(path, pairs):
    """Persist pairs as UTF-8 lines `query<TAB>target`."""
    with open(path, "w", encoding="utf-8") as fh:
        for q, t in pairs:
            fh.write(f"{q}\t{t}\n")


def load_pairs(path):
    pairs = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            if "\t" not in line:
                raise ValueError(f"{path}:{lineno}: expected `query<TAB>target`")
            q, t = line.split("\t", 1)
            pairs.append((q, t))
    return pairs


def pair_line_chunks(pairs, n_ctx, side="left"):
    """One pretraining chunk per pair: the line "query target", padded.

    Keeping each pair on its own chunk preserves the query-to-target copy
    structure that chunked concatenation would straddle.
    """
    tok = Tokenizer()
    seqs = []
    for q, t in pairs:
        ids = tok.tokenize(f"{q} {t}")[:n_ctx]
        pad = [PAD_ID] * (n_ctx - len(ids))
        full = pad + ids if side == "left" else ids + pad
        seqs.append(TokenSequence(np.asarray(full, dtype=np.int32), pad_side=side))
    return ChunkStore(seqs, pad_side=side)


def pairs_to_sequences(pairs, n_ctx, side="left"):
    """Tokenize and pad each side of the pairs to fixed-length sequences."""
    tok = Tokenizer()

    def prep(text):
        ids = tok.tokenize(text)
        if len(ids) > n_ctx:
            ids = ids[:n_ctx]
        pad = [PAD_ID] * (n_ctx - len(ids))
        full = pad + ids if side == "left" else ids + pad
        return np.asarray(full, dtype=np.int32)

    queries = [prep(q) for q, _ in pairs]
    targets = [prep(t) for _, t in pairs]
    return queries, targets


def iter_prefetch(iterable, depth=4):
    """Yield items of `iterable` read ahead on a worker thread, order preserved."""
    q = queue.Queue(maxsize=depth)
    done = object()

    def pump():
        for item in iterable:
            q.put(item)
        q.put(done)

    threading.Thread(target=pump, daemon=True).start()
    while True:
        item = q.get()
        if item is done:
            return
        yield item
