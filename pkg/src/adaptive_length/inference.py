"""Single-instance adaptive inference with hard token removal, and FLOPs metering.

FLOPs convention (one multiply-accumulate = 2 FLOPs). With hidden size ``d``,
``H`` heads, FFN width ``f``, predictor width ``c``, ``C`` classes, for a
sequence of ``n`` tokens:

==================  ==========================================
embedding           ``n*d`` (position add) + ``5*n*d`` (layer norm)
encoder block       ``8*n*d^2`` (Q, K, V, output projections)
                    + ``4*n^2*d`` (scores and context)
                    + ``4*n*d*f`` (feed-forward)
                    + ``2 * 5*n*d`` (two layer norms)
                    + ``3*n^2*H`` (softmax)
predictor           ``2*n*d*c + 2*n*c + 3*n``
classifier head     ``2*d*C``
==================  ==========================================

Block ``l + 1`` runs at the survivor count after predictor ``l``; predictor
``l`` runs at the length it scores (the input length for ``l = 0``).

Trace dump format: one JSON object per line,
``{"id": ..., "length": n, "survivors": [[positions after predictor 0], ...]}``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .encoder import ClassifierOutput
from .errors import UsageError


@dataclass
class RetentionTrace:
    input_len: int
    survivors: list = field(default_factory=list)  # per layer, original positions kept for the next block
    scored: list = field(default_factory=list)  # per layer, positions the predictor scored
    scores: list = field(default_factory=list)  # per layer, predictor output over ``scored``

    @property
    def lengths(self):
        return [len(s) for s in self.survivors]

    def check(self):
        prev = set(range(self.input_len))
        for layer, kept in enumerate(self.survivors):
            if 0 not in kept:
                raise AssertionError(f"[CLS] missing at layer {layer}")
            if not set(kept) <= prev:
                raise AssertionError(f"survivors at layer {layer} are not nested")
            prev = set(kept)
        return True

    def to_json(self, example_id):
        return json.dumps({"id": example_id, "length": self.input_len, "survivors": [list(map(int, s)) for s in self.survivors]})


def retained(scores, delta):
    """Boolean keep-mask: score >= delta, with position 0 ([CLS]) always kept."""
    keep = np.asarray(scores) >= delta
    keep[0] = True
    return keep


def infer_adaptive(model, ids, eta_override=None, label=None):
    """Classify one example while removing low-contribution tokens before each block.

    Before block ``l + 1`` predictor ``l`` scores the current survivors and
    tokens with score below ``eta_l / n_l`` (``n_l`` = current survivor count)
    are physically dropped. ``eta_override`` replaces the learned ``eta``
    (a scalar or per-layer sequence); ``0`` keeps every token.
    """
    enc, cps = model.encoder, model.predictors
    L = model.config.num_layers
    ids = np.asarray(ids)
    if ids.ndim != 1 or len(ids) == 0:
        raise UsageError("infer_adaptive expects one non-empty id sequence")
    if eta_override is None:
        eta = model.thresholds.eta_values()
    else:
        eta = np.broadcast_to(np.asarray(eta_override, dtype=np.float64), (L,))
    trace = RetentionTrace(input_len=len(ids))
    positions = np.arange(len(ids))
    with ad.no_grad():
        h = enc.embed(ids[None, :])
        for l in range(L):
            scores = cps.predict(l, h).data[0]
            keep = retained(scores, eta[l] / len(positions))
            trace.scored.append(positions.copy())
            trace.scores.append(scores)
            if not keep.all():
                h = ad.Value(h.data[:, keep, :])
                positions = positions[keep]
            trace.survivors.append(positions.copy())
            h = enc.block(l, h)
        logits = enc.classify(h).data[0]
    return ClassifierOutput(logits=logits, label=label), trace


def backbone_logits(encoder, ids):
    with ad.no_grad():
        _, logits = encoder.encode(np.asarray(ids)[None, :])
    return logits.data[0]


# ---------------------------------------------------------------- FLOPs


def embedding_flops(config, n):
    return n * config.hidden_dim + 5 * n * config.hidden_dim


def block_flops(config, n):
    d, f, H = config.hidden_dim, config.ffn_dim, config.num_heads
    return 8 * n * d * d + 4 * n * n * d + 4 * n * d * f + 2 * 5 * n * d + 3 * n * n * H


def predictor_flops(config, n, cp_dim):
    d = config.hidden_dim
    return 2 * n * d * cp_dim + 2 * n * cp_dim + 3 * n


def head_flops(config):
    return 2 * config.hidden_dim * config.num_classes


@dataclass
class FlopsReport:
    per_example: list  # per example: per-layer FLOPs (block + predictor overhead)
    totals: list  # per example totals
    baseline_totals: list

    @property
    def total(self):
        return int(sum(self.totals))

    @property
    def baseline_total(self):
        return int(sum(self.baseline_totals))

    @property
    def speedup(self):
        return speedup(self.baseline_total, self.total)

    @classmethod
    def combine(cls, reports):
        out = cls([], [], [])
        for r in reports:
            out.per_example.extend(r.per_example)
            out.totals.extend(r.totals)
            out.baseline_totals.extend(r.baseline_totals)
        return out

    def to_json(self):
        return {
            "examples": len(self.totals),
            "total_flops": self.total,
            "baseline_total_flops": self.baseline_total,
            "speedup": self.speedup,
        }


def speedup(baseline_total, model_total):
    if model_total <= 0:
        raise UsageError("model FLOPs must be positive")
    if baseline_total <= 0:
        raise UsageError("baseline FLOPs must be positive")
    return baseline_total / model_total


def count_flops(config, lengths, include_cp=True, input_len=None, cp_dim=None):
    """FLOPs of one single-instance pass whose block ``l+1`` runs on ``lengths[l]`` tokens.

    The baseline is the plain backbone at ``input_len`` (default
    ``lengths[0]``) without predictors.
    """
    lengths = [int(n) for n in lengths]
    if len(lengths) != config.num_layers:
        raise UsageError(f"need {config.num_layers} layer lengths, got {len(lengths)}")
    if min(lengths) < 1:
        raise UsageError("layer lengths must be >= 1")
    input_len = lengths[0] if input_len is None else int(input_len)
    cp_dim = cp_dim or max(1, config.hidden_dim // 2)
    per_layer = []
    scored = input_len
    for n in lengths:
        cost = block_flops(config, n)
        if include_cp:
            cost += predictor_flops(config, scored, cp_dim)
        per_layer.append(cost)
        scored = n
    total = embedding_flops(config, input_len) + sum(per_layer) + head_flops(config)
    baseline = embedding_flops(config, input_len) + config.num_layers * block_flops(config, input_len) + head_flops(config)
    return FlopsReport(per_example=[per_layer], totals=[total], baseline_totals=[baseline])


def flops_for_trace(model, trace, include_cp=True):
    return count_flops(model.config, trace.lengths, include_cp, trace.input_len, model.cp_dim)


@dataclass
class AdaptiveRun:
    outputs: list
    traces: list
    flops: FlopsReport

    @property
    def predictions(self):
        return [o.prediction for o in self.outputs]

    def accuracy(self, labels):
        labels = np.asarray(labels)
        return float(np.mean(np.asarray(self.predictions) == labels)) if len(labels) else float("nan")


def run_adaptive(model, sequences, eta_override=None, include_cp=True, labels=None):
    outputs, traces, reports = [], [], []
    for i, seq in enumerate(sequences):
        out, trace = infer_adaptive(model, seq, eta_override, None if labels is None else int(labels[i]))
        outputs.append(out)
        traces.append(trace)
        reports.append(flops_for_trace(model, trace, include_cp))
    return AdaptiveRun(outputs, traces, FlopsReport.combine(reports))


def write_traces(path, example_ids, traces):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for ex_id, trace in zip(example_ids, traces):
            fh.write(trace.to_json(ex_id) + "\n")


def read_traces(path):
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                d = json.loads(line)
                out[d["id"]] = RetentionTrace(input_len=d["length"], survivors=[np.asarray(s) for s in d["survivors"]])
    return out
