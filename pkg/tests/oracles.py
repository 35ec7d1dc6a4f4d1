"""Brute-force reference implementations, written independently of the package."""

import math


def soft_removal_scalar(s, delta, lam, beta):
    if s < delta:
        return (lam / delta) * (s - delta) - beta / lam
    return (s - 1.0) * beta / ((1.0 - delta) * lam)


def kl_loops(p, q):
    total = 0.0
    for pi, qi in zip(p, q):
        if pi > 0:
            total += pi * math.log(pi / max(qi, 1e-12))
    return total


def layer_weighted_kl(targets, preds):
    L = len(targets)
    return sum((L - l) * kl_loops(t, p) for l, (t, p) in enumerate(zip(targets, preds)))


def amplify_loops(s, theta):
    denom = theta * s[0] + sum(s[1:])
    return [theta * s[0] / denom] + [x / denom for x in s[1:]]


def average_precision_loops(scores, rationale):
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    hits, precisions = 0, []
    for rank, i in enumerate(order, 1):
        if rationale[i]:
            hits += 1
            precisions.append(hits / rank)
    return sum(precisions) / len(precisions) if precisions else None


def flops_by_hand(L, d, H, f, c, C, lengths, n0, include_cp=True):
    """Literal expansion of the documented counting table."""
    def block(n):
        return 8 * n * d * d + 4 * n * n * d + 4 * n * d * f + 10 * n * d + 3 * n * n * H

    total = n0 * d + 5 * n0 * d + 2 * d * C
    scored = n0
    for n in lengths:
        total += block(n)
        if include_cp:
            total += 2 * scored * d * c + 2 * scored * c + 3 * scored
        scored = n
    baseline = n0 * d + 5 * n0 * d + 2 * d * C + L * block(n0)
    return total, baseline
