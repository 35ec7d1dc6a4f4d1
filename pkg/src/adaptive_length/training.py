"""Backbone fine-tuning and adaptive length-reduction training.

Adaptive training fades tokens out with a piecewise-linear negative mask
instead of dropping them, so whole batches stay rectangular and the effect of
removal is differentiable. Each batch takes two optimizer steps:

* step A updates backbone and predictors on ``CE + gamma * L_cp``;
* step B updates ``eta`` and ``theta`` on ``CE + phi * L_length``.

Training log format: tab-separated, one header line then one row per epoch.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import PROB_EPS, Value
from .encoder import pad_batch
from .errors import ConfigError, NumericDomainError, UsageError
from .optim import AdamW, warmup_linear
from .saliency import CheckpointPool

logger = logging.getLogger(__name__)

LAMBDA_CAP = 1e9


# ---------------------------------------------------------------- hyperparameters


@dataclass
class SoftRemovalSchedule:
    lambda0: float = 10.0
    growth: float = 10.0
    beta: float = 0.01

    def __post_init__(self):
        self.validate()

    def validate(self):
        if not self.lambda0 > 0:
            raise ConfigError(f"schedule.lambda0 must be > 0 (soft-removal slope), got {self.lambda0}")
        if not self.growth >= 1:
            raise ConfigError(f"schedule.growth must be >= 1 so lambda never decreases, got {self.growth}")
        if not 0 < self.beta < 0.1:
            raise ConfigError(f"schedule.beta must satisfy 0 < beta < 0.1, got {self.beta}")

    def at(self, epoch):
        return lambda_step(self.lambda0, self.growth, epoch)


@dataclass
class TrainingHyperparams:
    gamma: float = 0.1
    phi: float = 0.01
    lr: float = 1e-3
    threshold_lr: float = 2e-2
    epochs: int = 4
    batch_size: int = 32
    seed: int = 0
    weight_decay: float = 0.01
    warmup: float = 0.06
    clip_norm: float | None = 1.0

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.gamma < 0 or self.phi < 0:
            raise ConfigError(f"gamma and phi must be >= 0, got gamma={self.gamma}, phi={self.phi}")
        if self.lr <= 0 or self.threshold_lr <= 0:
            raise ConfigError("learning rates must be > 0")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if not 0 <= self.warmup < 1:
            raise ConfigError("warmup fraction must lie in [0, 1)")


@dataclass
class LossBreakdown:
    ce: float
    cp: float
    length: float

    def main(self, gamma):
        return self.ce + gamma * self.cp

    def speedup_objective(self, phi):
        return self.ce + phi * self.length


# ---------------------------------------------------------------- differentiable pieces


def lambda_step(lambda0, growth, epoch):
    """``lambda0 * growth**epoch``, capped at 1e9."""
    if epoch < 0:
        raise UsageError("epoch must be >= 0")
    try:
        value = float(lambda0) * float(growth) ** epoch
    except OverflowError:
        return LAMBDA_CAP
    return min(value, LAMBDA_CAP)


def soft_removal_mask(scores, delta, lam, beta, keep_first=True):
    """Negative mask increments for contribution ``scores`` at threshold ``delta``.

    Below the threshold the increment falls with slope ``lam / delta`` starting
    from ``-beta / lam``; at or above it, it rises with slope
    ``beta / ((1 - delta) lam)`` to zero at score 1. Position 0 ([CLS]) gets no
    increment when ``keep_first``. Accepts arrays or Values.
    """
    scores, delta = ad.as_value(scores), ad.as_value(delta)
    if np.any(delta.data >= 1):
        raise ConfigError("soft removal threshold delta must be < 1")
    if np.any(delta.data <= 0):
        raise ConfigError("soft removal threshold delta must be > 0")
    if not lam > 0:
        raise ConfigError(f"lambda must be > 0, got {lam}")
    if not 0 < beta < 0.1:
        raise ConfigError(f"beta must satisfy 0 < beta < 0.1, got {beta}")
    below = ad.sub(ad.scale(ad.div(ad.sub(scores, delta), delta), lam), beta / lam)
    above = ad.div(ad.scale(ad.sub(scores, 1.0), beta / lam), ad.sub(1.0, delta))
    inc = ad.where(scores.data < delta.data, below, above)
    if keep_first:
        keep = np.ones(scores.shape[-1])
        keep[0] = 0.0
        inc = ad.mul(inc, keep)
    return inc


def amplified_target(scores, theta):
    """Scale position 0 by ``theta`` and renormalize (arrays or Values)."""
    if isinstance(scores, Value) or isinstance(theta, Value):
        scores = ad.as_value(scores)
        first = ad.mul(scores[..., 0:1], theta)
        num = ad.concat([first, scores[..., 1:]], axis=-1)
        return ad.div(num, ad.sum(num, axis=-1, keepdims=True))
    s = np.array(scores, dtype=np.float64)
    s[..., 0] = s[..., 0] * np.asarray(theta)
    return s / s.sum(axis=-1, keepdims=True)


def cp_loss(targets, predictions):
    """``sum_l (L - l) * KL(target_l || prediction_l)``, averaged over the batch.

    ``targets`` are constants (arrays); ``predictions`` are Values or arrays.
    Predictions are clamped below at 1e-12 before the logarithm.
    """
    if len(targets) != len(predictions):
        raise UsageError("need one target per predicted layer")
    L = len(predictions)
    total = None
    for l, (t, p) in enumerate(zip(targets, predictions)):
        kl = ad.kl_divergence(ad.as_value(t), ad.clamp_min(p, PROB_EPS))
        term = ad.scale(ad.mean(kl) if kl.ndim else kl, L - l)
        total = term if total is None else ad.add(total, term)
    return total


def length_loss(masks):
    """Expected number of retained representations: ``sum_l sum_i exp(m_i^l)`` (batch mean)."""
    total = None
    for m in masks:
        m = ad.as_value(m)
        per_example = ad.sum(ad.exp(m), axis=-1)
        term = ad.mean(per_example) if per_example.ndim else per_example
        total = term if total is None else ad.add(total, term)
    return total


def theta_gradient(scores, theta):
    """Closed-form dummy-variable gradient and its ``1/theta``-scaled version.

    Returns ``(dummy, applied)`` where ``dummy_i = d S_i / d theta_d`` at
    ``theta_d = 1``: ``S_1 (1 - S_1)`` for ``i = 1`` and ``-S_1 S_i`` otherwise.
    """
    if theta <= 0:
        raise ConfigError(f"theta must be positive, got {theta}")
    s = np.asarray(scores, dtype=np.float64)
    dummy = -s[..., :1] * s
    dummy[..., 0] = s[..., 0] * (1.0 - s[..., 0])
    return dummy, dummy / theta


# ---------------------------------------------------------------- forward passes


@dataclass
class SoftForward:
    logits: Value
    scores: list  # predictor outputs per layer, Values (B, n)
    masks: list  # cumulative masks entering block l+1, Values (B, n)
    support: list  # soft retention exp(M) seen by predictor l, arrays (B, n)


def soft_forward(model, ids, pad_mask, lam, beta, dummies=None):
    """Training-mode forward with soft removal accumulated before every block.

    ``delta_l = eta_l / n_eff`` where ``n_eff = sum_i exp(M_i)`` is the soft
    count of live tokens; at the hard limit this is the survivor count used at
    inference. ``support`` (the soft live set seen by each predictor) is
    returned as plain arrays because it only shapes the constant CP targets.
    """
    enc, cps, th = model.encoder, model.predictors, model.thresholds
    eta = th.eta()
    h = enc.embed(ids)
    M = Value(np.asarray(pad_mask, dtype=np.float64))
    scores, masks, support = [], [], []
    for l in range(model.config.num_layers):
        s = cps.predict(l, h, M)
        support.append(np.exp(M.data))
        gate = s if dummies is None else amplified_target(s, dummies[l])
        n_eff = ad.sum(ad.exp(M), axis=-1, keepdims=True)
        delta = ad.div(eta[l], n_eff)
        M = ad.add(M, soft_removal_mask(gate, delta, lam, beta))
        scores.append(s)
        masks.append(M)
        h = enc.block(l, h, M)
    return SoftForward(enc.classify(h), scores, masks, support)


def layer_targets(saliency, support, thetas):
    """Per-layer predictor targets: saliency restricted to the soft live set, then amplified."""
    out = []
    for live, theta in zip(support, thetas):
        restricted = saliency * live
        totals = restricted.sum(axis=-1, keepdims=True)
        restricted = np.where(totals > 0, restricted / np.where(totals > 0, totals, 1.0), saliency)
        out.append(amplified_target(restricted, theta))
    return out


# ---------------------------------------------------------------- loops


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def _check_finite(value, what):
    if not math.isfinite(value):
        raise NumericDomainError(f"{what} became non-finite ({value})")


def predict_batch(encoder, sequences, batch_size=256):
    preds = []
    with ad.no_grad():
        for start in range(0, len(sequences), batch_size):
            ids, mask = pad_batch(sequences[start : start + batch_size])
            _, logits = encoder.encode(ids, mask)
            preds.append(logits.data.argmax(axis=-1))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=int)


def accuracy(encoder, sequences, labels):
    return float(np.mean(predict_batch(encoder, sequences) == np.asarray(labels)))


def finetune(model, train, dev, hp, out_dir, pool_k=3, log_path=None):
    """Phase 1: train the backbone on cross-entropy; keep the top-``pool_k`` epochs.

    ``train``/``dev`` are ``(sequences, labels)``. Returns a
    :class:`CheckpointPool` of checkpoint files in ``out_dir``.
    """
    seqs, labels = train
    labels = np.asarray(labels)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(hp.seed)
    params = model.backbone_parameters()
    opt = AdamW(params, lr=hp.lr, weight_decay=hp.weight_decay, clip_norm=hp.clip_norm)
    steps_per_epoch = math.ceil(len(seqs) / hp.batch_size)
    total_steps = steps_per_epoch * hp.epochs
    pool = CheckpointPool(k=pool_k)
    rows = []
    step = 0
    for epoch in range(hp.epochs):
        losses = []
        for idx in _batches(len(seqs), hp.batch_size, rng):
            ids, mask = pad_batch([seqs[i] for i in idx])
            opt.zero_grad()
            with ad.Tape() as tape:
                _, logits = model.encoder.encode(ids, mask)
                loss = ad.cross_entropy(logits, labels[idx])
                tape.backward(loss)
            _check_finite(loss.item(), "fine-tuning loss")
            opt.step(warmup_linear(step, total_steps, hp.warmup))
            losses.append(loss.item())
            step += 1
        dev_acc = accuracy(model.encoder, *dev)
        path = out_dir / f"epoch{epoch}.ckpt"
        model.save(path, meta={"phase": "finetune", "epoch": epoch, "dev_accuracy": dev_acc})
        for dropped in pool.offer(path, dev_acc, epoch):
            Path(dropped).unlink(missing_ok=True)
        rows.append({"epoch": epoch, "loss": float(np.mean(losses)), "dev_accuracy": dev_acc})
        logger.info("finetune epoch %d loss %.4f dev acc %.4f", epoch, rows[-1]["loss"], dev_acc)
    if log_path is not None:
        write_log(log_path, rows)
    return pool


def main_parameters(model):
    return {**model.backbone_parameters(), **model.predictor_parameters()}


def main_step(model, ids, pad_mask, labels, saliency, lam, beta, gamma, opt, lr_scale=1.0):
    """Step A: update backbone and predictors on ``CE + gamma * L_cp``; thresholds frozen."""
    th = model.thresholds
    opt.zero_grad()
    with ad.frozen(model.threshold_parameters().values()), ad.Tape() as tape:
        fwd = soft_forward(model, ids, pad_mask, lam, beta)
        ce = ad.cross_entropy(fwd.logits, labels)
        targets = layer_targets(saliency, fwd.support, th.theta_values())
        lcp = cp_loss(targets, fwd.scores)
        loss = ad.add(ce, ad.scale(lcp, gamma))
        tape.backward(loss)
    _check_finite(loss.item(), "main loss")
    opt.step(lr_scale)
    return ce.item(), lcp.item()


def threshold_step(model, ids, pad_mask, labels, lam, beta, phi, opt, lr_scale=1.0):
    """Step B: update eta and theta on ``CE + phi * L_length``; backbone and predictors frozen.

    theta enters through per-layer dummy nodes fixed at 1; its gradient is the
    dummy gradient divided by theta.
    """
    th = model.thresholds
    opt.zero_grad()
    dummies = th.dummies()
    with ad.frozen(main_parameters(model).values()), ad.Tape() as tape:
        fwd = soft_forward(model, ids, pad_mask, lam, beta, dummies)
        ce = ad.cross_entropy(fwd.logits, labels)
        llen = length_loss(fwd.masks)
        loss = ad.add(ce, ad.scale(llen, phi))
        tape.backward(loss)
    _check_finite(loss.item(), "speedup loss")
    th.theta.grad = np.array([float(d.grad) for d in dummies]) / th.theta.data
    opt.step(lr_scale)
    th.project()
    return llen.item()


def train_adaptive(model, train, saliency, hp, schedule, log_path=None, eval_fn=None):
    """Phase 3: alternating step-A / step-B training with soft removal.

    ``train`` is ``(example_ids, sequences, labels)``; ``saliency`` maps
    example id to its normalized token-level saliency. A missing record is an
    error. ``eval_fn(model) -> dict`` is called after each epoch for logging.
    """
    ex_ids, seqs, labels = train
    labels = np.asarray(labels)
    missing = [i for i in ex_ids if i not in saliency]
    if missing:
        raise ConfigError(f"saliency cache has no record for {len(missing)} examples, e.g. {missing[0]!r}")
    rng = np.random.default_rng(hp.seed)
    opt_main = AdamW(main_parameters(model), lr=hp.lr, weight_decay=hp.weight_decay, clip_norm=hp.clip_norm)
    opt_thr = AdamW(model.threshold_parameters(), lr=hp.threshold_lr)
    steps_per_epoch = math.ceil(len(seqs) / hp.batch_size)
    total_steps = steps_per_epoch * hp.epochs
    th = model.thresholds
    rows = []
    step = 0
    for epoch in range(hp.epochs):
        lam = schedule.at(epoch)
        sums = np.zeros(3)
        count = 0
        for idx in _batches(len(seqs), hp.batch_size, rng):
            batch = [seqs[i] for i in idx]
            ids, pad_mask = pad_batch(batch)
            sal = np.zeros(ids.shape)
            for row, i in enumerate(idx):
                s = saliency[ex_ids[i]]
                if len(s) != len(seqs[i]):
                    raise ConfigError(f"saliency record {ex_ids[i]!r} has wrong length")
                sal[row, : len(s)] = s
            y = labels[idx]
            scale = warmup_linear(step, total_steps, hp.warmup)

            ce, lcp = main_step(model, ids, pad_mask, y, sal, lam, schedule.beta, hp.gamma, opt_main, scale)
            llen = threshold_step(model, ids, pad_mask, y, lam, schedule.beta, hp.phi, opt_thr, scale)
            sums += (ce, lcp, llen)
            count += 1
            step += 1
        ce_m, cp_m, len_m = sums / max(count, 1)
        row = {"epoch": epoch, "lambda": float(lam), "ce": float(ce_m), "cp": float(cp_m), "length": float(len_m)}
        for l, (e, t) in enumerate(zip(th.eta_values(), th.theta_values())):
            row[f"eta{l}"] = float(e)
            row[f"theta{l}"] = float(t)
        if eval_fn is not None:
            row.update(eval_fn(model))
        rows.append(row)
        logger.info("adaptive epoch %d %s", epoch, {k: round(v, 4) if isinstance(v, float) else v for k, v in row.items()})
    if log_path is not None:
        write_log(log_path, rows)
    return rows


def write_log(path, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    keys = list(rows[0]) if rows else []
    for r in rows:
        keys += [k for k in r if k not in keys]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\t".join(keys) + "\n")
        for r in rows:
            fh.write("\t".join(_fmt(r.get(k, "")) for k in keys) + "\n")


def read_log(path):
    with open(path, encoding="utf-8") as fh:
        keys = fh.readline().rstrip("\n").split("\t")
        rows = []
        for line in fh:
            vals = line.rstrip("\n").split("\t")
            rows.append({k: _parse(v) for k, v in zip(keys, vals)})
    return rows


def _fmt(v):
    return repr(float(v)) if isinstance(v, float) else str(v)


def _parse(v):
    for cast in (int, float):
        try:
            return cast(v)
        except ValueError:
            pass
    return v


def hyperparams_dict(hp):
    return asdict(hp)
