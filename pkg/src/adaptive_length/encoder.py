"""Small post-norm BERT-style encoder classifier with a per-key additive mask."""

from __future__ import annotations

import logging
import math
from collections import Counter
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Value
from .errors import ConfigError, UsageError

logger = logging.getLogger(__name__)

PAD, CLS, UNK = "[PAD]", "[CLS]", "[UNK]"
SPECIALS = (PAD, CLS, UNK)
PAD_ID, CLS_ID, UNK_ID = 0, 1, 2

# additive mask value for padded or removed keys
MASK_VALUE = -10000.0


@dataclass
class EncoderConfig:
    num_layers: int = 4
    hidden_dim: int = 32
    num_heads: int = 2
    ffn_dim: int = 64
    vocab_size: int = 256
    max_len: int = 32
    num_classes: int = 2
    activation: str = "gelu"

    def __post_init__(self):
        self.validate()

    def validate(self):
        for name in ("num_layers", "hidden_dim", "num_heads", "ffn_dim", "vocab_size", "max_len", "num_classes"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise ConfigError(f"encoder.{name} must be a positive integer, got {value!r}")
        if self.hidden_dim % self.num_heads:
            raise ConfigError(
                f"encoder.hidden_dim ({self.hidden_dim}) must be divisible by num_heads ({self.num_heads})"
            )
        if self.activation not in ("gelu", "tanh"):
            raise ConfigError(f"encoder.activation must be 'gelu' or 'tanh', got {self.activation!r}")

    @property
    def head_dim(self):
        return self.hidden_dim // self.num_heads

    def to_dict(self):
        return asdict(self)


class Vocabulary:
    """Lowercased whitespace vocabulary with ``[PAD]``, ``[CLS]``, ``[UNK]`` specials."""

    def __init__(self, words=()):
        self.itos = list(SPECIALS)
        for w in words:
            if w not in SPECIALS:
                self.itos.append(w)
        self.stoi = {w: i for i, w in enumerate(self.itos)}

    @classmethod
    def build(cls, texts, max_size=None):
        counts = Counter(w for t in texts for w in split_words(t))
        ordered = sorted(counts, key=lambda w: (-counts[w], w))
        if max_size is not None:
            ordered = ordered[: max(0, max_size - len(SPECIALS))]
        return cls(ordered)

    def __len__(self):
        return len(self.itos)

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.itos == other.itos

    def id(self, word):
        return self.stoi.get(word, UNK_ID)


def split_words(text):
    return text.lower().split()


def tokenize(text, vocab, max_len=None):
    """Map text to ids with ``[CLS]`` first; one token per whitespace word.

    Token ``i >= 1`` is aligned to word ``i - 1``. Sequences longer than
    ``max_len`` (counting ``[CLS]``) are truncated with a warning.
    """
    ids = [CLS_ID] + [vocab.id(w) for w in split_words(text)]
    if max_len is not None and len(ids) > max_len:
        logger.warning("truncating sequence of %d tokens to max_len=%d", len(ids), max_len)
        ids = ids[:max_len]
    return ids


def word_alignment(num_tokens):
    """Alignment for :func:`tokenize` output: ``[None, 0, 1, ...]`` (``[CLS]`` unaligned)."""
    return [None] + list(range(num_tokens - 1))


def pad_batch(sequences, length=None):
    """Right-pad id lists; returns ``(ids, mask)`` with ``MASK_VALUE`` on padding."""
    length = length or max(len(s) for s in sequences)
    ids = np.full((len(sequences), length), PAD_ID, dtype=np.int64)
    mask = np.full((len(sequences), length), MASK_VALUE)
    for i, s in enumerate(sequences):
        ids[i, : len(s)] = s
        mask[i, : len(s)] = 0.0
    return ids, mask


@dataclass
class EncoderState:
    hidden: list  # h^0..h^L as Values, each (B, n, d)
    mask: np.ndarray  # (B, n) cumulative additive mask, entries <= 0
    attentions: list = field(default_factory=list)  # per block, (B, H, n, n)
    alive: np.ndarray | None = None


@dataclass
class ClassifierOutput:
    logits: np.ndarray
    label: int | None = None

    @property
    def prediction(self):
        return int(np.argmax(self.logits))


class Encoder:
    """Token + learned position embeddings, ``L`` post-norm blocks, [CLS] head."""

    def __init__(self, config, rng=None, init_std=0.02):
        self.config = config
        rng = rng if rng is not None else np.random.default_rng(0)
        c = config
        d, f = c.hidden_dim, c.ffn_dim

        def normal(*shape):
            return Value(rng.normal(0.0, init_std, size=shape), requires_grad=True)

        def zeros(*shape):
            return Value(np.zeros(shape), requires_grad=True)

        def ones(*shape):
            return Value(np.ones(shape), requires_grad=True)

        p = {
            "emb.tok": normal(c.vocab_size, d),
            "emb.pos": normal(c.max_len, d),
            "emb.ln.g": ones(d),
            "emb.ln.b": zeros(d),
        }
        for l in range(c.num_layers):
            pre = f"layer{l}."
            for proj in ("q", "k", "v", "o"):
                p[pre + proj + ".w"] = normal(d, d)
                p[pre + proj + ".b"] = zeros(d)
            p[pre + "ln1.g"] = ones(d)
            p[pre + "ln1.b"] = zeros(d)
            p[pre + "ff1.w"] = normal(d, f)
            p[pre + "ff1.b"] = zeros(f)
            p[pre + "ff2.w"] = normal(f, d)
            p[pre + "ff2.b"] = zeros(d)
            p[pre + "ln2.g"] = ones(d)
            p[pre + "ln2.b"] = zeros(d)
        p["cls.w"] = normal(d, c.num_classes)
        p["cls.b"] = zeros(c.num_classes)
        for name, v in p.items():
            v.name = name
        self.params = p

    def parameters(self):
        return self.params

    def embed(self, ids):
        ids = np.asarray(ids)
        if ids.ndim == 1:
            ids = ids[None, :]
        n = ids.shape[1]
        if n == 0:
            raise UsageError("cannot embed an empty sequence")
        if n > self.config.max_len:
            raise ConfigError(f"sequence length {n} exceeds max_len {self.config.max_len}")
        p = self.params
        x = ad.add(ad.embedding(p["emb.tok"], ids), p["emb.pos"][:n])
        return ad.layer_norm(x, p["emb.ln.g"], p["emb.ln.b"])

    def _activation(self, x):
        return ad.gelu(x) if self.config.activation == "gelu" else ad.tanh(x)

    def attention(self, layer, h, mask=None, capture=None):
        """Masked multi-head self-attention sublayer, residual and layer norm included."""
        c = self.config
        p = self.params
        pre = f"layer{layer}."
        B, n, d = h.shape
        if n == 0:
            raise UsageError("attention over an empty sequence")
        H, dh = c.num_heads, c.head_dim

        def heads(x):
            return ad.transpose(ad.reshape(x, (B, n, H, dh)), (0, 2, 1, 3))

        q = heads(ad.linear(h, p[pre + "q.w"], p[pre + "q.b"]))
        k = heads(ad.linear(h, p[pre + "k.w"], p[pre + "k.b"]))
        v = heads(ad.linear(h, p[pre + "v.w"], p[pre + "v.b"]))
        scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
        if mask is not None:
            mask = ad.as_value(mask)
            if mask.shape != (B, n):
                raise ConfigError(f"mask shape {mask.shape} does not match sequence {(B, n)}")
            scores = ad.add(scores, ad.reshape(mask, (B, 1, 1, n)))
        probs = ad.softmax(scores, axis=-1)
        if capture is not None:
            capture.append(probs.data)
        context = ad.reshape(ad.transpose(ad.matmul(probs, v), (0, 2, 1, 3)), (B, n, d))
        out = ad.linear(context, p[pre + "o.w"], p[pre + "o.b"])
        return ad.layer_norm(ad.add(h, out), p[pre + "ln1.g"], p[pre + "ln1.b"])

    def block(self, layer, h, mask=None, capture=None):
        """``h^{layer+1} = Encoder_{layer+1}(h^layer)``; layers are 0-based here."""
        if not 0 <= layer < self.config.num_layers:
            raise UsageError(f"layer {layer} out of range")
        p = self.params
        pre = f"layer{layer}."
        h1 = self.attention(layer, h, mask, capture)
        ff = ad.linear(self._activation(ad.linear(h1, p[pre + "ff1.w"], p[pre + "ff1.b"])), p[pre + "ff2.w"], p[pre + "ff2.b"])
        return ad.layer_norm(ad.add(h1, ff), p[pre + "ln2.g"], p[pre + "ln2.b"])

    def classify(self, h):
        return ad.linear(h[:, 0, :], self.params["cls.w"], self.params["cls.b"])

    def encode(self, ids, mask=None, capture_attention=False):
        """Full forward pass; returns ``(EncoderState, logits Value)``."""
        ids = np.asarray(ids)
        if ids.ndim == 1:
            ids = ids[None, :]
        if ids.shape[1] > self.config.max_len:
            logger.warning("truncating batch of length %d to max_len=%d", ids.shape[1], self.config.max_len)
            ids = ids[:, : self.config.max_len]
            if mask is not None:
                mask = np.asarray(mask)[:, : self.config.max_len]
        mask_arr = np.zeros(ids.shape) if mask is None else np.asarray(mask, dtype=float)
        h = self.embed(ids)
        hidden = [h]
        captured = [] if capture_attention else None
        for l in range(self.config.num_layers):
            h = self.block(l, h, mask, captured)
            hidden.append(h)
        logits = self.classify(h)
        return EncoderState(hidden=hidden, mask=mask_arr, attentions=captured or []), logits

    def state_dict(self):
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, arrays):
        load_into(self.params, arrays)


def load_into(params, arrays):
    missing = set(params) - set(arrays)
    if missing:
        raise ConfigError(f"checkpoint is missing parameters: {sorted(missing)}")
    for name, value in params.items():
        arr = np.asarray(arrays[name], dtype=np.float64)
        if arr.shape != value.shape:
            raise ConfigError(f"parameter {name}: checkpoint shape {arr.shape} != model shape {value.shape}")
        value.data = arr.copy()
        value.zero_grad()
