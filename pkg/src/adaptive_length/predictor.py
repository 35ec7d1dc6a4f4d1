"""Per-layer contribution predictors: a token-wise MLP and a softmax over positions."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Value
from .errors import UsageError


@dataclass
class ContributionDistribution:
    scores: np.ndarray  # (n,) or (B, n)
    layer: int


class ContributionPredictors:
    """One independent ``d -> d_cp -> 1`` tanh MLP per layer ``0..L-1``.

    The predictor at layer ``l`` reads ``h^l`` and gates the input of block
    ``l + 1``. The output projection starts at zero, so an untrained predictor
    returns the uniform distribution over live positions.
    """

    def __init__(self, num_layers, hidden_dim, cp_dim=None, rng=None, init_std=0.02):
        self.num_layers = num_layers
        self.hidden_dim = hidden_dim
        self.cp_dim = cp_dim or max(1, hidden_dim // 2)
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params = {}
        for l in range(num_layers):
            self.params[f"cp{l}.w1"] = Value(rng.normal(0.0, init_std, (hidden_dim, self.cp_dim)), requires_grad=True)
            self.params[f"cp{l}.b1"] = Value(np.zeros(self.cp_dim), requires_grad=True)
            self.params[f"cp{l}.w2"] = Value(np.zeros((self.cp_dim, 1)), requires_grad=True)
            self.params[f"cp{l}.b2"] = Value(np.zeros(1), requires_grad=True)
        for name, v in self.params.items():
            v.name = name

    def parameters(self):
        return self.params

    def logits(self, layer, h):
        p = self.params
        hid = ad.tanh(ad.linear(h, p[f"cp{layer}.w1"], p[f"cp{layer}.b1"]))
        out = ad.linear(hid, p[f"cp{layer}.w2"], p[f"cp{layer}.b2"])
        return ad.reshape(out, out.shape[:-1])

    def predict(self, layer, h, mask=None):
        """Contribution scores for every position of ``h`` (``(B, n, d)`` or ``(n, d)``).

        The cumulative attention mask is added to the logits so faded tokens get
        vanishing probability.
        """
        if not 0 <= layer < self.num_layers:
            raise UsageError(f"predictor layer {layer} out of range")
        h = ad.as_value(h)
        if h.shape[-2] == 0:
            raise UsageError("contribution predictor called on an empty sequence")
        z = self.logits(layer, h)
        if mask is not None:
            z = ad.add(z, mask)
        return ad.softmax(z, axis=-1)

    def state_dict(self):
        return {k: v.data.copy() for k, v in self.params.items()}


def predict_contributions(predictors, layer, h, mask=None):
    """Functional form returning a :class:`ContributionDistribution` (no graph)."""
    with ad.no_grad():
        scores = predictors.predict(layer, h, mask).data
    return ContributionDistribution(scores=scores, layer=layer)
