import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from adaptive_length.encoder import EncoderConfig, Vocabulary
from adaptive_length.model import AdaptiveModel

settings.register_profile(
    "default", max_examples=100, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


def tiny_config(**overrides):
    base = dict(num_layers=2, hidden_dim=8, num_heads=2, ffn_dim=12, vocab_size=20, max_len=10, num_classes=3)
    base.update(overrides)
    return EncoderConfig(**base)


def tiny_vocab(size=17):
    return Vocabulary([f"w{i}" for i in range(size)])


@pytest.fixture
def tiny_model():
    cfg = tiny_config()
    return AdaptiveModel(cfg, tiny_vocab(cfg.vocab_size - 3), seed=3)


def random_ids(rng, n, vocab_size=20):
    ids = rng.integers(3, vocab_size, size=n)
    ids[0] = 1
    return ids


# ---------------------------------------------------------------- desk-scale runs shared by acceptance checks

DESK_SCALE = {
    "data": {"task": "keyword-topic", "train_size": 10000, "dev_size": 1000, "test_size": 2000, "length": 32, "num_classes": 4},
    "encoder": {"num_layers": 4, "hidden_dim": 32, "num_heads": 2, "ffn_dim": 64, "max_len": 32},
    "finetune": {"epochs": 3},
    "adaptive": {"epochs": 4},
    "eval": {"include_cp_flops": True},
}
DESK_SEEDS = (0, 1, 2)


class DeskRuns:
    """Lazily executes the full pipeline once per seed and remembers wall time."""

    def __init__(self, root):
        self.root = root
        self.seconds = {}

    def config(self, seed):
        from adaptive_length.config import config_from_dict

        return config_from_dict({**DESK_SCALE, "seed": seed})

    def run(self, seed):
        import time

        from adaptive_length.pipeline import Pipeline

        out = self.root / f"seed{seed}"
        if seed not in self.seconds:
            start = time.perf_counter()
            Pipeline(self.config(seed), out).run()
            self.seconds[seed] = time.perf_counter() - start
        return out


@pytest.fixture(scope="session")
def desk_runs(tmp_path_factory):
    return DeskRuns(tmp_path_factory.mktemp("desk"))
