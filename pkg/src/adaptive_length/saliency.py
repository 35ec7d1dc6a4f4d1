"""Gradient x input saliency targets and attention-based comparison scores.

Saliency cache format: one JSON object per line,
``{"id": <example id>, "pool": <checkpoint-pool hash>, "scores": [...]}``,
where ``scores`` is the normalized token-level map including ``[CLS]``.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Value
from .encoder import pad_batch
from .errors import ConfigError, UsageError

logger = logging.getLogger(__name__)

STRATEGIES = ("rollout", "accumulate", "cls_attention")


@dataclass
class SaliencyMap:
    scores: np.ndarray
    normalized: bool
    target_class: int


def normalize_scores(scores, valid=None):
    """Normalize rows to sum to one; all-zero rows become uniform over ``valid``."""
    scores = np.atleast_2d(np.asarray(scores, dtype=np.float64))
    valid = np.ones_like(scores, dtype=bool) if valid is None else np.atleast_2d(valid)
    scores = np.where(valid, scores, 0.0)
    totals = scores.sum(axis=-1, keepdims=True)
    degenerate = totals[:, 0] <= 0
    if degenerate.any():
        logger.warning("%d degenerate (all-zero) saliency maps replaced by uniform", int(degenerate.sum()))
    uniform = valid / valid.sum(axis=-1, keepdims=True)
    return np.where(totals > 0, scores / np.where(totals > 0, totals, 1.0), uniform)


def gradient_times_input(grad, inputs):
    """``|| grad * inputs ||_2`` over the feature axis."""
    g = np.asarray(grad, dtype=np.float64)
    x = np.asarray(inputs, dtype=np.float64)
    return np.sqrt(((g * x) ** 2).sum(axis=-1))


def saliency_batch(encoder, ids, classes, mask=None, normalize=True):
    """Per-token ``|| dy_c/dh0 * h0 ||_2`` for a padded batch.

    One backward pass from ``sum_b y_{c_b}``; examples do not interact, so each
    row receives its own gradient. Backbone parameters are frozen meanwhile.
    """
    ids = np.atleast_2d(np.asarray(ids))
    classes = np.asarray(classes, dtype=np.int64).reshape(-1)
    with ad.no_grad():
        h0_data = encoder.embed(ids).data
    h0 = Value(h0_data, requires_grad=True)
    with ad.frozen(encoder.parameters().values()), ad.Tape() as tape:
        h = h0
        for l in range(encoder.config.num_layers):
            h = encoder.block(l, h, mask)
        logits = encoder.classify(h)
        picked = logits[np.arange(len(classes)), classes]
        tape.backward(ad.sum(picked))
    raw = gradient_times_input(h0.grad, h0_data)
    if not normalize:
        return raw
    valid = None if mask is None else np.asarray(mask) == 0
    return normalize_scores(raw, valid)


def compute_saliency(encoder, ids, target_class, normalize=True):
    """Saliency map of a single example for logit ``target_class``."""
    scores = saliency_batch(encoder, np.asarray(ids)[None, :], [target_class], normalize=normalize)[0]
    return SaliencyMap(scores=scores, normalized=normalize, target_class=int(target_class))


@dataclass
class CheckpointPool:
    """Top-``k`` checkpoints by dev accuracy, best first."""

    k: int = 3
    entries: list = field(default_factory=list)  # (path, accuracy, epoch)

    def offer(self, path, accuracy, epoch):
        self.entries.append((str(path), float(accuracy), int(epoch)))
        # ties prefer the later (longer-trained) checkpoint
        self.entries.sort(key=lambda e: (-e[1], -e[2]))
        dropped = self.entries[self.k :]
        self.entries = self.entries[: self.k]
        return [e[0] for e in dropped]

    @property
    def paths(self):
        return [e[0] for e in self.entries]

    def digest(self):
        h = hashlib.sha256()
        for path, _, _ in self.entries:
            h.update(Path(path).read_bytes())
        return h.hexdigest()[:16]

    def to_json(self):
        return {"k": self.k, "entries": [list(e) for e in self.entries]}

    @classmethod
    def from_json(cls, d, base=None):
        entries = []
        for path, acc, epoch in d["entries"]:
            p = Path(path)
            if base is not None and not p.is_absolute():
                p = Path(base) / p
            entries.append((str(p), acc, epoch))
        return cls(k=d["k"], entries=entries)


def average_maps(maps):
    """Mean of normalized maps, renormalized."""
    if not maps:
        raise UsageError("need at least one saliency map to average")
    stacked = np.mean([np.asarray(m, dtype=np.float64) for m in maps], axis=0)
    return normalize_scores(stacked)[0] if stacked.ndim == 1 else normalize_scores(stacked)


def average_checkpoint_saliencies(encoders, ids, target_class):
    """Average the single-example saliency over a pool of backbones."""
    maps = [compute_saliency(e, ids, target_class).scores for e in encoders]
    return SaliencyMap(scores=average_maps(maps), normalized=True, target_class=int(target_class))


def extract_dataset_saliency(encoders, sequences, labels, batch_size=64):
    """Pool-averaged normalized saliency for every sequence (list of arrays)."""
    out = []
    for start in range(0, len(sequences), batch_size):
        chunk = sequences[start : start + batch_size]
        ids, mask = pad_batch(chunk)
        mask_arg = None if (mask == 0).all() else mask
        maps = [saliency_batch(e, ids, labels[start : start + batch_size], mask_arg) for e in encoders]
        avg = np.mean(maps, axis=0)
        avg = normalize_scores(avg, mask == 0)
        out.extend(row[: len(seq)].copy() for row, seq in zip(avg, chunk))
    return out


def aggregate_to_words(token_scores, alignment):
    """Sum token scores per word; ``alignment[i]`` is token i's word index or None for [CLS]."""
    token_scores = np.asarray(token_scores, dtype=np.float64)
    if len(alignment) != len(token_scores):
        raise UsageError(f"alignment covers {len(alignment)} tokens, scores cover {len(token_scores)}")
    words = [w for w in alignment if w is not None]
    if any(w is None for w in alignment[1:]):
        raise UsageError("every non-[CLS] token must be aligned to a word")
    out = np.zeros(max(words) + 1 if words else 0)
    for score, w in zip(token_scores, alignment):
        if w is not None:
            out[w] += score
    return out


# ---------------------------------------------------------------- attention baselines


def attention_matrices(encoder, ids):
    """Head-averaged attention of every block for one example, each ``(n, n)``."""
    with ad.no_grad():
        state, _ = encoder.encode(np.asarray(ids)[None, :], capture_attention=True)
    return [a[0].mean(axis=0) for a in state.attentions]


def rollout(matrices):
    """Cumulative products of ``0.5 A + 0.5 I`` (row-renormalized), one per layer."""
    out = []
    acc = None
    for a in matrices:
        mixed = 0.5 * a + 0.5 * np.eye(a.shape[0])
        mixed = mixed / mixed.sum(axis=-1, keepdims=True)
        acc = mixed if acc is None else mixed @ acc
        out.append(acc)
    return out


def attention_scores_from_matrices(matrices, strategy, layer):
    if strategy not in STRATEGIES:
        raise ConfigError(f"unknown attention strategy {strategy!r}; choose from {STRATEGIES}")
    if not 0 <= layer < len(matrices):
        raise UsageError(f"layer {layer} out of range for {len(matrices)} attention layers")
    if strategy == "rollout":
        return rollout(matrices)[layer][0].copy()
    a = matrices[layer]
    if strategy == "accumulate":
        return a.sum(axis=0) / a.shape[0]
    return a[0].copy()


def attention_scores(encoder, ids, strategy, layer):
    """Per-token attention importance at 0-based block ``layer``.

    ``rollout``: [CLS] row of the rolled-out matrix; ``accumulate``: attention
    each token receives, averaged over queries; ``cls_attention``: raw [CLS] row.
    All three are distributions over tokens.
    """
    return attention_scores_from_matrices(attention_matrices(encoder, ids), strategy, layer)


# ---------------------------------------------------------------- cache


def write_cache(path, pool_hash, ids, maps):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for ex_id, scores in zip(ids, maps):
            fh.write(json.dumps({"id": ex_id, "pool": pool_hash, "scores": [float(s) for s in scores]}) + "\n")


def read_cache(path, pool_hash=None):
    cache = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            d = json.loads(line)
            if pool_hash is not None and d["pool"] != pool_hash:
                raise ConfigError(f"saliency cache {path} was built from a different checkpoint pool")
            cache[d["id"]] = np.asarray(d["scores"], dtype=np.float64)
    return cache
