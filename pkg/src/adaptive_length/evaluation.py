"""Speedup, static retention-config FLOPs, and agreement with word-level rationales."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .encoder import tokenize, word_alignment
from .errors import UsageError
from .inference import FlopsReport, count_flops, infer_adaptive, speedup  # noqa: F401 - re-exported
from .saliency import aggregate_to_words, attention_matrices, attention_scores_from_matrices, saliency_batch

logger = logging.getLogger(__name__)

COMPARED = ("cp", "saliency", "attention", "rollout")


def clip_retention_config(config, input_len):
    """Per-layer ``min(retained, input_len)`` for single-instance FLOPs of a static config."""
    if input_len < 1:
        raise UsageError("input length must be >= 1")
    return tuple(min(int(c), int(input_len)) for c in config)


def static_config_flops(model_config, retention, input_lengths):
    """FLOPs of a fixed retention configuration applied to each input length (no predictors)."""
    reports = []
    for n in input_lengths:
        clipped = clip_retention_config(retention, n)
        reports.append(count_flops(model_config, clipped, include_cp=False, input_len=n))
    return FlopsReport.combine(reports)


def average_precision(word_scores, rationale):
    """AP of ranking words by descending score; ``None`` when no word is relevant.

    Ties keep original word order (stable sort), so results are deterministic.
    """
    scores = np.asarray(word_scores, dtype=np.float64)
    relevant = np.asarray(rationale, dtype=bool)
    if scores.shape != relevant.shape:
        raise UsageError(f"{len(scores)} word scores for {len(relevant)} rationale labels")
    if not relevant.any():
        return None
    order = np.argsort(-scores, kind="stable")
    hits = relevant[order]
    ranks = np.flatnonzero(hits) + 1
    precision_at_hits = np.arange(1, len(ranks) + 1) / ranks
    return float(precision_at_hits.mean())


def mean_average_precision(pairs):
    """Macro mean of per-example AP; returns ``(mAP, skipped)``."""
    values, skipped = [], 0
    for scores, rationale in pairs:
        ap = average_precision(scores, rationale)
        if ap is None:
            skipped += 1
        else:
            values.append(ap)
    return (float(np.mean(values)) if values else float("nan")), skipped


def false_positive_rate(selected, rationale):
    """``|selected - rationale| / |non-rationale|``; returns ``(fpr, degenerate)``.

    ``selected`` is a 0/1 vector over words, or a set of selected word indices.
    With no non-rationale words the rate is reported as 0 and flagged.
    """
    relevant = np.asarray(rationale, dtype=bool)
    if isinstance(selected, (set, frozenset)):
        sel = np.zeros(len(relevant), dtype=bool)
        sel[sorted(selected)] = True
    else:
        sel = np.asarray(selected).astype(bool)
    if sel.shape != relevant.shape:
        raise UsageError("selection and rationale lengths differ")
    negatives = int((~relevant).sum())
    if negatives == 0:
        return 0.0, True
    return float((sel & ~relevant).sum() / negatives), False


def uniform_selection(token_scores):
    """Binarize token scores at the uniform level ``1/n`` (score >= 1/n is selected)."""
    s = np.asarray(token_scores, dtype=np.float64)
    return s >= 1.0 / len(s)


def words_selected(token_mask, alignment, num_words):
    out = np.zeros(num_words, dtype=bool)
    for keep, w in zip(token_mask, alignment):
        if keep and w is not None:
            out[w] = True
    return out


@dataclass
class StrategyCurves:
    """Per-layer mAP and mean FPR for each strategy."""

    num_layers: int
    ap: dict = field(default_factory=dict)  # strategy -> list of per-layer lists of AP values
    fpr: dict = field(default_factory=dict)
    skipped: int = 0

    def mean_ap(self, strategy):
        return [float(np.mean(v)) if v else float("nan") for v in self.ap[strategy]]

    def mean_fpr(self, strategy):
        return [float(np.mean(v)) if v else float("nan") for v in self.fpr[strategy]]

    def rows(self):
        out = []
        for strategy in self.ap:
            maps, fprs = self.mean_ap(strategy), self.mean_fpr(strategy)
            for l in range(self.num_layers):
                out.append({"strategy": strategy, "layer": l, "map": maps[l], "fpr": fprs[l]})
        return out


def strategy_comparison(model, backbone, records, vocab=None, max_len=None):
    """Per-layer AP/FPR of predictor, saliency, raw attention, and rollout scores.

    ``model`` is the trained adaptive model (its predictors and retention
    traces); ``backbone`` is a plain fine-tuned :class:`Encoder` supplying
    saliency and attention. Predictor FPR uses the retention trace directly;
    the soft strategies are binarized at ``1/n``. Raw attention scores a token
    by the attention it receives (mean over queries); rollout uses the [CLS] row.
    """
    vocab = vocab or model.vocab
    max_len = max_len or model.config.max_len
    L = model.config.num_layers
    curves = StrategyCurves(num_layers=L)
    for name in COMPARED:
        curves.ap[name] = [[] for _ in range(L)]
        curves.fpr[name] = [[] for _ in range(L)]
    for rec in records:
        if rec.rationale is None:
            raise UsageError(f"record {rec.id} has no rationale")
        ids = np.asarray(tokenize(rec.text, vocab, max_len))
        align = word_alignment(len(ids))
        num_words = len(ids) - 1
        rationale = np.asarray(rec.rationale[:num_words], dtype=bool)
        if not rationale.any():
            curves.skipped += 1
            continue
        n = len(ids)

        def add(name, layer, token_scores, selected_tokens):
            words = aggregate_to_words(token_scores, align)
            curves.ap[name][layer].append(average_precision(words, rationale))
            fpr, _ = false_positive_rate(words_selected(selected_tokens, align, num_words), rationale)
            curves.fpr[name][layer].append(fpr)

        _, trace = infer_adaptive(model, ids)
        for l in range(L):
            full = np.zeros(n)
            full[trace.scored[l]] = trace.scores[l]
            kept = np.zeros(n, dtype=bool)
            kept[trace.survivors[l]] = True
            add("cp", l, full, kept)

        sal = saliency_batch(backbone, ids[None, :], [rec.label])[0]
        sal_sel = uniform_selection(sal)
        mats = attention_matrices(backbone, ids)
        for l in range(L):
            add("saliency", l, sal, sal_sel)
            att = attention_scores_from_matrices(mats, "accumulate", l)
            add("attention", l, att, uniform_selection(att))
            roll = attention_scores_from_matrices(mats, "rollout", l)
            add("rollout", l, roll, uniform_selection(roll))
    return curves
