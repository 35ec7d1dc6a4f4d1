"""Model bundle (backbone + predictors + thresholds) and its checkpoint format.

Checkpoint layout, version 1 (all integers ASCII, arrays little-endian float64)::

    ADAPTIVE-LENGTH-CHECKPOINT 1\\n
    <header byte length>\\n
    <header: UTF-8 JSON, sorted keys>
    <array bytes, concatenated in header order>

The header holds ``config`` (EncoderConfig fields), ``cp_dim``, ``vocab``
(id-ordered word list), free-form ``meta``, and ``arrays``: a list of
``{"name", "shape", "offset", "nbytes"}`` with offsets relative to the end
of the header. Writing is deterministic so identical models hash identically.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Value
from .encoder import Encoder, EncoderConfig, Vocabulary, load_into
from .errors import ConfigError
from .predictor import ContributionPredictors

MAGIC = b"ADAPTIVE-LENGTH-CHECKPOINT"
FORMAT_VERSION = 1


class ThresholdParams:
    """Per-layer threshold scale ``eta`` in (0, 1) and [CLS] amplification ``theta >= 1``.

    ``eta = sigmoid(eta_raw)``; ``theta`` is stored directly and projected back
    onto ``[1, inf)`` after every update.
    """

    def __init__(self, num_layers, eta=0.5, theta=1.0):
        if not 0.0 < eta < 1.0:
            raise ConfigError(f"initial eta must lie in (0, 1), got {eta}")
        if theta < 1.0:
            raise ConfigError(f"initial theta must be >= 1, got {theta}")
        self.num_layers = num_layers
        self.eta_raw = Value(np.full(num_layers, np.log(eta / (1.0 - eta))), requires_grad=True, name="eta_raw")
        self.theta = Value(np.full(num_layers, float(theta)), requires_grad=True, name="theta")

    def parameters(self):
        return {"eta_raw": self.eta_raw, "theta": self.theta}

    def eta(self):
        return ad.sigmoid(self.eta_raw)

    def eta_values(self):
        return 0.5 * (1.0 + np.tanh(0.5 * self.eta_raw.data))

    def theta_values(self):
        return self.theta.data.copy()

    def project(self):
        self.theta.data = np.maximum(self.theta.data, 1.0)

    def dummies(self):
        """Fresh ``theta_d = 1`` nodes, one per layer, for gradient routing."""
        return [Value(1.0, requires_grad=True, name=f"theta_d{l}") for l in range(self.num_layers)]


class AdaptiveModel:
    def __init__(self, config, vocab, cp_dim=None, seed=0, eta=0.5, theta=1.0):
        rng = np.random.default_rng(seed)
        self.config = config
        self.vocab = vocab
        self.encoder = Encoder(config, rng)
        self.predictors = ContributionPredictors(config.num_layers, config.hidden_dim, cp_dim, rng)
        self.thresholds = ThresholdParams(config.num_layers, eta, theta)

    @property
    def cp_dim(self):
        return self.predictors.cp_dim

    def backbone_parameters(self):
        return dict(self.encoder.parameters())

    def predictor_parameters(self):
        return dict(self.predictors.parameters())

    def threshold_parameters(self):
        return dict(self.thresholds.parameters())

    def all_parameters(self):
        return {**self.backbone_parameters(), **self.predictor_parameters(), **self.threshold_parameters()}

    def state_dict(self):
        return {k: v.data.copy() for k, v in self.all_parameters().items()}

    def load_state_dict(self, arrays):
        load_into(self.all_parameters(), arrays)

    def fingerprint(self):
        h = hashlib.sha256()
        for name, arr in sorted(self.state_dict().items()):
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        return h.hexdigest()

    def save(self, path, meta=None):
        save_checkpoint(path, self, meta)

    @classmethod
    def load(cls, path):
        return load_checkpoint(path)[0]

    def copy(self):
        other = AdaptiveModel(self.config, self.vocab, self.cp_dim)
        other.load_state_dict(self.state_dict())
        return other


def save_checkpoint(path, model, meta=None):
    arrays = sorted(model.state_dict().items())
    entries, offset = [], 0
    for name, arr in arrays:
        nbytes = arr.size * 8
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": nbytes})
        offset += nbytes
    header = {
        "version": FORMAT_VERSION,
        "config": model.config.to_dict(),
        "cp_dim": model.cp_dim,
        "vocab": model.vocab.itos,
        "meta": meta or {},
        "arrays": entries,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC + b" " + str(FORMAT_VERSION).encode() + b"\n")
        fh.write(str(len(blob)).encode() + b"\n")
        fh.write(blob)
        for _, arr in arrays:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path):
    """Returns ``(model, meta)``."""
    raw = Path(path).read_bytes()
    first, rest = raw.split(b"\n", 1)
    magic, _, version = first.partition(b" ")
    if magic != MAGIC:
        raise ConfigError(f"{path}: not a checkpoint file")
    if int(version) != FORMAT_VERSION:
        raise ConfigError(f"{path}: unsupported checkpoint version {int(version)}")
    size_line, rest = rest.split(b"\n", 1)
    size = int(size_line)
    header = json.loads(rest[:size].decode("utf-8"))
    body = rest[size:]
    config = EncoderConfig(**header["config"])
    vocab = Vocabulary(header["vocab"][3:])
    if vocab.itos != header["vocab"]:
        raise ConfigError(f"{path}: malformed vocabulary")
    arrays = {}
    for e in header["arrays"]:
        chunk = body[e["offset"] : e["offset"] + e["nbytes"]]
        arrays[e["name"]] = np.frombuffer(chunk, dtype="<f8").reshape(e["shape"]).astype(np.float64)
    model = AdaptiveModel(config, vocab, header["cp_dim"])
    model.load_state_dict(arrays)
    return model, header["meta"]


def file_sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
