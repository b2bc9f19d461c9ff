"""Evaluation metrics: token accuracy (top-1 / top-5), negative log
perplexity, loss, and corpus-level approximate BLEU on token ids."""

import math
from dataclasses import dataclass

import numpy as np

from posenet import data
from posenet.model import greedy_generate
from posenet.training import cross_entropy_loss, neg_log_perplexity

LOG_FIELDS = (
    "step",
    "loss",
    "accuracy",
    "accuracy_top5",
    "neg_log_perplexity",
    "approx_bleu_score",
)


@dataclass
class MetricsRecord:
    step: int
    loss: float
    accuracy: float
    accuracy_top5: float
    neg_log_perplexity: float
    approx_bleu_score: float

    def __post_init__(self):
        if not 0.0 <= self.accuracy <= self.accuracy_top5 <= 1.0:
            raise ValueError(
                f"accuracy bounds violated: {self.accuracy} vs {self.accuracy_top5}"
            )
        if not 0.0 <= self.approx_bleu_score <= 1.0:
            raise ValueError(f"approx_bleu_score out of [0, 1]: {self.approx_bleu_score}")

    def log_line(self):
        """One space-separated key=value line, fields in LOG_FIELDS order."""
        parts = [f"step={self.step}"]
        for name in LOG_FIELDS[1:]:
            parts.append(f"{name}={getattr(self, name):.6f}")
        return " ".join(parts)


def token_accuracy(logits, targets, pad_mask, k=1):
    """Fraction of unpadded positions whose target is among the k highest
    logits, ties broken toward the lower id."""
    if k < 1:
        raise ValueError("k must be >= 1")
    logits = np.asarray(logits.data if hasattr(logits, "data") else logits)
    targets = np.asarray(targets)
    pad_mask = np.asarray(pad_mask, dtype=bool)
    count = int(pad_mask.sum())
    if count == 0:
        raise ValueError("token_accuracy: no unpadded positions")
    k = min(k, logits.shape[-1])
    # stable sort on -logits keeps ascending-id order among equal logits
    order = np.argsort(-logits, axis=-1, kind="stable")[..., :k]
    hits = (order == targets[..., None]).any(axis=-1)
    return float(hits[pad_mask].sum() / count)


def _ngram_counts(seq, n):
    counts = {}
    for i in range(len(seq) - n + 1):
        gram = tuple(seq[i : i + n])
        counts[gram] = counts.get(gram, 0) + 1
    return counts


def approx_bleu(candidates, references, max_order=4):
    """Corpus-level BLEU over token ids.

    Clipped n-gram matches are summed over the corpus for n = 1..max_order;
    an order with zero matches is smoothed to (matches+1)/(total+1). The
    brevity penalty is min(1, exp(1 - ref_len/cand_len)). An empty candidate
    corpus scores 0.
    """
    if len(candidates) != len(references):
        raise ValueError(
            f"corpus size mismatch: {len(candidates)} candidates vs "
            f"{len(references)} references"
        )
    cand_len = sum(len(c) for c in candidates)
    ref_len = sum(len(r) for r in references)
    if cand_len == 0:
        return 0.0
    log_precision_sum = 0.0
    for order in range(1, max_order + 1):
        matches = 0
        total = 0
        for cand, ref in zip(candidates, references):
            cand_counts = _ngram_counts(cand, order)
            ref_counts = _ngram_counts(ref, order)
            total += sum(cand_counts.values())
            matches += sum(
                min(cnt, ref_counts.get(gram, 0))
                for gram, cnt in cand_counts.items()
            )
        if matches > 0:
            precision = matches / total
        else:
            precision = (matches + 1) / (total + 1)
        log_precision_sum += math.log(precision)
    brevity = min(1.0, math.exp(1.0 - ref_len / cand_len))
    return brevity * math.exp(log_precision_sum / max_order)


def evaluate(model_cfg, params, pairs, step=0, label_smoothing=0.0):
    """Score a held-out set: teacher-forced logits feed accuracy, loss and
    perplexity; greedy generations feed approximate BLEU."""
    from posenet.model import forward_train

    if not pairs:
        raise ValueError("evaluate: empty dataset")
    batch = data.make_batch(pairs, max_length=model_cfg.max_length)
    logits = forward_train(batch.src_ids, batch.tgt_ids, model_cfg, params)
    loss = cross_entropy_loss(
        logits, batch.tgt_ids, batch.tgt_mask, label_smoothing
    ).item()
    generated = greedy_generate(batch.src_ids, model_cfg, params)
    candidates = [data.strip_ids(g) for g in generated]
    references = [list(tgt) for _, tgt in pairs]
    return MetricsRecord(
        step=step,
        loss=loss,
        accuracy=token_accuracy(logits, batch.tgt_ids, batch.tgt_mask, k=1),
        accuracy_top5=token_accuracy(logits, batch.tgt_ids, batch.tgt_mask, k=5),
        neg_log_perplexity=neg_log_perplexity(logits, batch.tgt_ids, batch.tgt_mask),
        approx_bleu_score=approx_bleu(candidates, references),
    )
