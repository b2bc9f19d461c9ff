"""Synthetic transduction tasks, vocabulary, batching and padding.

Token ids 0..3 are reserved (PAD, EOS, BOS, UNK); task symbols start at 4.
Every sequence in a batch ends with EOS, and padding only appears as a
suffix.
"""

from dataclasses import dataclass

import numpy as np

PAD_ID = 0
EOS_ID = 1
BOS_ID = 2
UNK_ID = 3
NUM_RESERVED = 4

TASK_KINDS = ("copy", "reverse", "rotate")


@dataclass(frozen=True)
class Vocab:
    size: int

    def __post_init__(self):
        if self.size < NUM_RESERVED + 1:
            raise ValueError(f"vocab size must be >= {NUM_RESERVED + 1}, got {self.size}")

    @property
    def num_symbols(self):
        return self.size - NUM_RESERVED

    def symbol_ids(self):
        return range(NUM_RESERVED, self.size)


@dataclass(frozen=True)
class TaskSpec:
    kind: str = "reverse"
    symbols: int = 16
    min_len: int = 4
    max_len: int = 16
    rotate: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ValueError(f"unknown task kind {self.kind!r}")
        if not 1 <= self.min_len <= self.max_len:
            raise ValueError(f"bad length range [{self.min_len}, {self.max_len}]")
        if self.symbols < 1:
            raise ValueError("need at least one symbol")

    def vocab(self):
        return Vocab(NUM_RESERVED + self.symbols)


@dataclass
class Batch:
    src_ids: np.ndarray  # [b, n] int64
    tgt_ids: np.ndarray  # [b, m] int64
    src_mask: np.ndarray  # [b, n] bool, True at real tokens
    tgt_mask: np.ndarray  # [b, m] bool

    @property
    def size(self):
        return self.src_ids.shape[0]


def generate_pair(spec, rng):
    """One (source, target) pair of symbol ids, without EOS or padding."""
    length = int(rng.integers(spec.min_len, spec.max_len + 1))
    src = rng.integers(NUM_RESERVED, NUM_RESERVED + spec.symbols, size=length)
    src = [int(v) for v in src]
    if spec.kind == "copy":
        tgt = list(src)
    elif spec.kind == "reverse":
        tgt = src[::-1]
    else:  # rotate
        tgt = [
            (v - NUM_RESERVED + spec.rotate) % spec.symbols + NUM_RESERVED
            for v in src
        ]
    return src, tgt


def generate_pairs(spec, rng, count):
    return [generate_pair(spec, rng) for _ in range(count)]


def make_batch(pairs, vocab=None, max_length=None):
    """Pad a list of (src, tgt) pairs into id matrices with masks.

    EOS is appended to every sequence before padding; all rows are padded
    to the batch maxima with PAD.
    """
    if not pairs:
        raise ValueError("cannot batch an empty pair list")
    srcs = [list(s) + [EOS_ID] for s, _ in pairs]
    tgts = [list(t) + [EOS_ID] for _, t in pairs]
    n = max(len(s) for s in srcs)
    m = max(len(t) for t in tgts)
    if max_length is not None and max(n, m) > max_length:
        raise ValueError(
            f"sequence length {max(n, m)} exceeds model max_length {max_length}"
        )
    if vocab is not None:
        top = max(max(s) for s in srcs + tgts)
        if top >= vocab.size:
            raise ValueError(f"id {top} out of vocabulary of size {vocab.size}")
    batch = len(pairs)
    src_ids = np.full((batch, n), PAD_ID, dtype=np.int64)
    tgt_ids = np.full((batch, m), PAD_ID, dtype=np.int64)
    for i, (s, t) in enumerate(zip(srcs, tgts)):
        src_ids[i, : len(s)] = s
        tgt_ids[i, : len(t)] = t
    return Batch(
        src_ids=src_ids,
        tgt_ids=tgt_ids,
        src_mask=src_ids != PAD_ID,
        tgt_mask=tgt_ids != PAD_ID,
    )


def strip_ids(ids):
    """Strip BOS/EOS/PAD, keeping symbols up to the first EOS."""
    out = []
    for v in np.asarray(ids).tolist():
        if v == EOS_ID:
            break
        if v in (PAD_ID, BOS_ID):
            continue
        out.append(int(v))
    return out


def train_batch(spec, batch_size, seed, step):
    """The training batch for a given step, a pure function of
    (spec, batch_size, seed, step): resuming a run regenerates the exact
    same stream."""
    rng = np.random.default_rng([seed, step, spec.seed])
    return make_batch(generate_pairs(spec, rng, batch_size))


def eval_pairs(spec, count, seed):
    """Held-out pairs from a seed stream separate from all training steps."""
    rng = np.random.default_rng([seed, 0x5EED, spec.seed])
    return generate_pairs(spec, rng, count)


def overlap_rate(spec, batch_size, train_seed, eval_seed, steps, eval_count):
    """Fraction of held-out pairs colliding with the first ``steps`` training
    batches. Diagnostic only: streams are seeded apart, not deduplicated."""
    seen = set()
    for step in range(1, steps + 1):
        rng = np.random.default_rng([train_seed, step, spec.seed])
        for src, _ in generate_pairs(spec, rng, batch_size):
            seen.add(tuple(src))
    held = eval_pairs(spec, eval_count, eval_seed)
    hits = sum(1 for src, _ in held if tuple(src) in seen)
    return hits / eval_count


def write_corpus(path, pairs):
    """One example per line: space-separated src ids, TAB, tgt ids."""
    with open(path, "w", encoding="utf-8") as fh:
        for src, tgt in pairs:
            fh.write(" ".join(map(str, src)) + "\t" + " ".join(map(str, tgt)) + "\n")


def read_corpus(path):
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            src_part, tgt_part = line.split("\t")
            pairs.append(
                ([int(v) for v in src_part.split()], [int(v) for v in tgt_part.split()])
            )
    return pairs
