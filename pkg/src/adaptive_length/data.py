"""Dataset records, line-delimited JSON IO, and synthetic task generators.

Each line of a dataset file is one JSON object::

    {"id": "kt-train-0", "text": "baku soccer ...", "label": 0, "rationale": [0, 1, ...]}

``rationale`` is optional; when present it has one 0/1 entry per
whitespace-separated word of ``text``. The same layout doubles as the
ERASER-style rationale format consumed by evaluation.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .encoder import split_words
from .errors import ConfigError

TASKS = ("keyword-topic", "sentiment-lexicon")

TOPIC_KEYWORDS = ("soccer", "election", "galaxy", "guitar", "recipe", "stock", "virus", "castle")
POSITIVE_WORDS = ("good", "great", "superb", "lovely", "fun", "brilliant", "charming", "moving")
NEGATIVE_WORDS = ("bad", "awful", "dull", "boring", "weak", "clumsy", "tedious", "bland")


@dataclass
class DatasetRecord:
    id: str
    text: str
    label: int
    rationale: list | None = None

    @property
    def words(self):
        return split_words(self.text)

    def validate(self, num_classes=None):
        if num_classes is not None and not 0 <= self.label < num_classes:
            raise ConfigError(f"record {self.id}: label {self.label} outside [0, {num_classes})")
        if self.rationale is not None and len(self.rationale) != len(self.words):
            raise ConfigError(
                f"record {self.id}: rationale has {len(self.rationale)} entries for {len(self.words)} words"
            )

    def to_json(self):
        d = {"id": self.id, "text": self.text, "label": self.label}
        if self.rationale is not None:
            d["rationale"] = list(self.rationale)
        return json.dumps(d, sort_keys=True)


def read_records(path, num_classes=None):
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                d = json.loads(line)
                rec = DatasetRecord(str(d["id"]), d["text"], int(d["label"]), d.get("rationale"))
            except (KeyError, ValueError, TypeError) as exc:
                raise ConfigError(f"{path}:{lineno}: malformed record ({exc})") from exc
            rec.validate(num_classes)
            records.append(rec)
    return records


def write_records(path, records):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(r.to_json() + "\n")


def has_rationales(records):
    return bool(records) and all(r.rationale is not None for r in records)


def rationale_only(records):
    """Keep only rationale words of each record (upper-bound probe inputs)."""
    out = []
    for r in records:
        if r.rationale is None:
            raise ConfigError(f"record {r.id} has no rationale")
        kept = [w for w, z in zip(r.words, r.rationale) if z]
        out.append(DatasetRecord(r.id, " ".join(kept), r.label, [1] * len(kept)))
    return out


def filler_words(count=200):
    syllables = ["ba", "ko", "mi", "tu", "re", "sa", "lo", "ne", "pi", "du", "fa", "ge", "hu", "ji"]
    words = ("".join(p) for p in itertools.product(syllables, repeat=2))
    return list(itertools.islice(words, count))


def generate_synthetic(task, size, seed, length=32, num_classes=4, num_filler=200, split="train"):
    """Generate ``size`` records; ``length`` counts tokens including ``[CLS]``.

    keyword-topic: ``length - 1`` filler words with exactly one class keyword
    at a uniformly random position; label = keyword class; rationale = keyword.

    sentiment-lexicon: an odd number (1, 3 or 5) of polarity words among
    fillers; label = majority polarity (1 positive); rationale = polarity words.
    """
    if task not in TASKS:
        raise ConfigError(f"unknown synthetic task {task!r}; choose from {TASKS}")
    if length < 2:
        raise ConfigError("synthetic length must be >= 2 (one word plus [CLS])")
    rng = np.random.default_rng(seed)
    fillers = filler_words(num_filler)
    num_words = length - 1
    records = []
    if task == "keyword-topic":
        if not 2 <= num_classes <= len(TOPIC_KEYWORDS):
            raise ConfigError(f"keyword-topic supports 2..{len(TOPIC_KEYWORDS)} classes")
        for i in range(size):
            label = int(rng.integers(num_classes))
            words = [fillers[j] for j in rng.integers(len(fillers), size=num_words)]
            pos = int(rng.integers(num_words))
            words[pos] = TOPIC_KEYWORDS[label]
            rationale = [0] * num_words
            rationale[pos] = 1
            records.append(DatasetRecord(f"kt-{split}-{i}", " ".join(words), label, rationale))
    else:
        for i in range(size):
            k = int(rng.choice([1, 3, 5]))
            k = min(k, num_words if num_words % 2 else num_words - 1)
            positive = int(rng.integers(k + 1))
            label = int(positive > k - positive)
            words = [fillers[j] for j in rng.integers(len(fillers), size=num_words)]
            slots = rng.choice(num_words, size=k, replace=False)
            rationale = [0] * num_words
            polarity = [True] * positive + [False] * (k - positive)
            rng.shuffle(polarity)
            for slot, is_pos in zip(slots, polarity):
                lexicon = POSITIVE_WORDS if is_pos else NEGATIVE_WORDS
                words[slot] = lexicon[int(rng.integers(len(lexicon)))]
                rationale[slot] = 1
            records.append(DatasetRecord(f"sl-{split}-{i}", " ".join(words), label, rationale))
    return records
