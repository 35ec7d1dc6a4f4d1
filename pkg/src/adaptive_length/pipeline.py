"""Phase driver: data, fine-tuning, saliency, adaptive training, inference, evaluation.

Every phase writes its artifacts under ``<out>/<phase dir>/`` plus a
``DONE.json`` stamp recording the config digest and the sha256 of each
output. A phase whose stamp matches the current config and whose outputs
still hash identically is skipped, so re-running is cheap and idempotent.
"""

from __future__ import annotations

import dataclasses
import itertools
import json
import logging
import time
from pathlib import Path

import numpy as np

from .config import PHASES
from .data import generate_synthetic, has_rationales, rationale_only, read_records, write_records
from .encoder import EncoderConfig, Vocabulary, tokenize
from .errors import ConfigError, MissingPrerequisiteError
from .evaluation import strategy_comparison
from .inference import FlopsReport, flops_for_trace, read_traces, run_adaptive, write_traces
from .model import AdaptiveModel, file_sha256, load_checkpoint
from .report import plot_pareto, plot_strategy_curves, write_table
from .saliency import CheckpointPool, extract_dataset_saliency, read_cache, write_cache
from .training import TrainingHyperparams, accuracy, finetune, read_log, train_adaptive

logger = logging.getLogger(__name__)

SPLITS = ("train", "dev", "test")


def parse_grid(text):
    """``"gamma=0.1,1;phi=0,0.01"`` -> list of ``{"gamma": .., "phi": ..}`` (cartesian product)."""
    axes = {}
    for part in filter(None, (p.strip() for p in text.split(";"))):
        key, sep, values = part.partition("=")
        key = key.strip()
        if not sep or key not in ("gamma", "phi"):
            raise ConfigError(f"grid axis must look like gamma=... or phi=..., got {part!r}")
        try:
            axes[key] = [float(v) for v in values.split(",") if v.strip()]
        except ValueError as exc:
            raise ConfigError(f"grid axis {key}: {exc}") from exc
        if not axes[key]:
            raise ConfigError(f"grid axis {key} has no values")
        if any(v < 0 for v in axes[key]):
            raise ConfigError(f"grid axis {key} values must be >= 0")
    if not axes:
        raise ConfigError("empty grid")
    keys = sorted(axes)
    return [dict(zip(keys, combo)) for combo in itertools.product(*(axes[k] for k in keys))]


class Pipeline:
    def __init__(self, config, out_dir, eta_override=None, grid=None):
        self.cfg = config
        self.out = Path(out_dir)
        self.eta_override = eta_override
        self.grid = grid
        self._data = None
        self._vocab = None

    # ------------------------------------------------------------ plumbing

    def path(self, *parts):
        return self.out.joinpath(*parts)

    def require(self, phase, *paths):
        for p in paths:
            if not Path(p).exists():
                raise MissingPrerequisiteError(phase, str(p))

    def _stamp_ok(self, directory, key):
        stamp = directory / "DONE.json"
        if not stamp.exists():
            return False
        d = json.loads(stamp.read_text())
        if d.get("key") != key:
            return False
        return all((directory / f).exists() and file_sha256(directory / f) == h for f, h in d["outputs"].items())

    def _write_stamp(self, directory, key):
        outputs = {
            str(p.relative_to(directory)): file_sha256(p)
            for p in sorted(directory.rglob("*"))
            if p.is_file() and p.name != "DONE.json"
        }
        (directory / "DONE.json").write_text(json.dumps({"key": key, "outputs": outputs}, indent=1, sort_keys=True))

    def _stamped(self, name, directory, key, fn):
        directory.mkdir(parents=True, exist_ok=True)
        if self._stamp_ok(directory, key):
            logger.info("%s: up to date, skipping", name)
            return
        start = time.perf_counter()
        fn()
        self._write_stamp(directory, key)
        logger.info("%s: done in %.1fs", name, time.perf_counter() - start)

    def _key(self, *sections, **extra):
        d = {"seed": self.cfg.seed, "sections": self.cfg.digest(*sections), **extra}
        return json.dumps(d, sort_keys=True)

    # ------------------------------------------------------------ data

    def data(self):
        if self._data is None:
            self.require("finetune", *(self.path("data", f"{s}.jsonl") for s in SPLITS))
            k = self.cfg.data.num_classes
            self._data = {s: read_records(self.path("data", f"{s}.jsonl"), k) for s in SPLITS}
        return self._data

    def vocab(self):
        if self._vocab is None:
            self._vocab = Vocabulary.build(r.text for r in self.data()["train"])
        return self._vocab

    def encoded(self, split, vocab=None):
        vocab = vocab or self.vocab()
        recs = self.data()[split]
        seqs = [np.asarray(tokenize(r.text, vocab, self.cfg.encoder.max_len)) for r in recs]
        return [r.id for r in recs], seqs, np.array([r.label for r in recs], dtype=int)

    def encoder_config(self):
        e = self.cfg.encoder
        return EncoderConfig(
            num_layers=e.num_layers,
            hidden_dim=e.hidden_dim,
            num_heads=e.num_heads,
            ffn_dim=e.ffn_dim,
            vocab_size=len(self.vocab()),
            max_len=e.max_len,
            num_classes=self.cfg.data.num_classes,
            activation=e.activation,
        )

    # ------------------------------------------------------------ phases

    def generate_data(self):
        d = self.cfg.data

        def run():
            for offset, split in enumerate(SPLITS):
                given = getattr(d, split)
                if given:
                    records = read_records(given, d.num_classes)
                else:
                    size = getattr(d, f"{split}_size")
                    seed = self.cfg.seed * 1000 + offset
                    records = generate_synthetic(d.task, size, seed, d.length, d.num_classes, split=split)
                if d.rationale_only:
                    records = rationale_only(records)
                write_records(self.path("data", f"{split}.jsonl"), records)

        self._stamped("generate-data", self.path("data"), self._key("data"), run)
        self._data = None

    def finetune(self):
        directory = self.path("finetune")
        self.require("finetune", *(self.path("data", f"{s}.jsonl") for s in SPLITS))

        def run():
            for old in directory.glob("epoch*.ckpt"):
                old.unlink()
            f = self.cfg.finetune
            model = self.fresh_model()
            hp = TrainingHyperparams(
                lr=f.lr, epochs=f.epochs, batch_size=f.batch_size, seed=self.cfg.seed, weight_decay=f.weight_decay
            )
            _, seqs, labels = self.encoded("train")
            _, dseqs, dlabels = self.encoded("dev")
            pool = finetune(model, (seqs, labels), (dseqs, dlabels), hp, directory, f.top_k, directory / "log.tsv")
            rel = {"k": pool.k, "entries": [[Path(p).name, a, e] for p, a, e in pool.entries]}
            (directory / "pool.json").write_text(json.dumps(rel, indent=1))

        self._stamped("finetune", directory, self._key("data", "encoder", "finetune", "init"), run)

    def fresh_model(self):
        i = self.cfg.init
        return AdaptiveModel(self.encoder_config(), self.vocab(), self.cfg.encoder.cp_dim, self.cfg.seed, i.eta, i.theta)

    def pool(self, phase):
        pool_file = self.path("finetune", "pool.json")
        self.require(phase, pool_file)
        pool = CheckpointPool.from_json(json.loads(pool_file.read_text()), base=self.path("finetune"))
        self.require(phase, *pool.paths)
        return pool

    def best_backbone(self, phase):
        model, _ = load_checkpoint(self.pool(phase).paths[0])
        return model

    def extract_saliency(self):
        directory = self.path("saliency")
        pool = self.pool("extract-saliency")

        def run():
            encoders = [load_checkpoint(p)[0].encoder for p in pool.paths]
            ids, seqs, labels = self.encoded("train", load_checkpoint(pool.paths[0])[0].vocab)
            maps = extract_dataset_saliency(encoders, seqs, labels)
            write_cache(directory / "cache.jsonl", pool.digest(), ids, maps)

        self._stamped("extract-saliency", directory, self._key(pool=pool.digest()), run)

    def _train_adaptive_into(self, directory, hp):
        pool = self.pool("train-adaptive")
        cache_file = self.path("saliency", "cache.jsonl")
        self.require("train-adaptive", cache_file)
        saliency = read_cache(cache_file, pool.digest())
        model = self.best_backbone("train-adaptive")
        fresh = self.fresh_model()
        # predictors and thresholds start fresh; the backbone comes from the best checkpoint
        model.predictors = fresh.predictors
        model.thresholds = fresh.thresholds
        train = self.encoded("train", model.vocab)
        train_adaptive(model, train, saliency, hp, self.cfg.schedule, log_path=directory / "train_log.tsv")
        model.save(directory / "model.ckpt", meta={"phase": "train-adaptive", "hyperparams": dataclasses.asdict(hp)})

    def train_adaptive(self):
        directory = self.path("adaptive")
        pool = self.pool("train-adaptive")
        self.require("train-adaptive", self.path("saliency", "cache.jsonl"))
        hp = dataclasses.replace(self.cfg.adaptive, seed=self.cfg.seed)
        key = self._key("adaptive", "schedule", "init", "encoder", pool=pool.digest())
        self._stamped("train-adaptive", directory, key, lambda: self._train_adaptive_into(directory, hp))

    def _infer_into(self, directory, model_path, phase="infer"):
        self.require(phase, model_path)
        model, _ = load_checkpoint(model_path)
        ids, seqs, labels = self.encoded("test", model.vocab)
        run = run_adaptive(model, seqs, self.eta_override, self.cfg.eval.include_cp_flops, labels)
        with open(directory / "predictions.jsonl", "w", encoding="utf-8") as fh:
            for ex_id, y, out in zip(ids, labels, run.outputs):
                fh.write(json.dumps({"id": ex_id, "label": int(y), "prediction": out.prediction}) + "\n")
        write_traces(directory / "traces.jsonl", ids, run.traces)
        summary = {"accuracy": run.accuracy(labels), **run.flops.to_json(), "eta_override": self.eta_override}
        (directory / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True))
        return summary

    def infer(self):
        directory = self.path("infer")
        model_path = self.path("adaptive", "model.ckpt")
        self.require("infer", model_path)
        key = self._key("eval", model=file_sha256(model_path), eta=self.eta_override)
        self._stamped("infer", directory, key, lambda: self._infer_into(directory, model_path))

    def evaluate(self):
        directory = self.path("eval")
        model_path = self.path("adaptive", "model.ckpt")
        summary_path = self.path("infer", "summary.json")
        self.require("evaluate", model_path, summary_path)
        pool = self.pool("evaluate")

        def run():
            backbone = self.best_backbone("evaluate")
            model, _ = load_checkpoint(model_path)
            _, seqs, labels = self.encoded("test", backbone.vocab)
            summary = json.loads(summary_path.read_text())
            metrics = {
                "backbone_accuracy": accuracy(backbone.encoder, seqs, labels),
                "adaptive_accuracy": summary["accuracy"],
                "speedup": summary["speedup"],
                "test_examples": len(seqs),
            }
            test = self.data()["test"]
            if has_rationales(test):
                limit = self.cfg.eval.max_examples
                curves = strategy_comparison(model, backbone.encoder, test[:limit] if limit else test)
                rows = curves.rows()
                write_table(directory / "strategies.tsv", rows, ["strategy", "layer", "map", "fpr"])
                plot_strategy_curves(directory / "strategies.svg", curves)
                metrics["rationale"] = {
                    s: {"map": curves.mean_ap(s), "fpr": curves.mean_fpr(s)} for s in curves.ap
                }
                metrics["rationale_skipped"] = curves.skipped
            else:
                logger.info("evaluate: test split has no rationales; AP/FPR omitted")
            (directory / "metrics.json").write_text(json.dumps(metrics, indent=1, sort_keys=True))

        key = self._key("eval", model=file_sha256(model_path), infer=file_sha256(summary_path), pool=pool.digest())
        self._stamped("evaluate", directory, key, run)

    def flops_report(self):
        directory = self.path("flops")
        model_path = self.path("adaptive", "model.ckpt")
        traces_path = self.path("infer", "traces.jsonl")
        self.require("flops-report", model_path, traces_path)

        def run():
            model, _ = load_checkpoint(model_path)
            traces = read_traces(traces_path)
            report = FlopsReport.combine(
                flops_for_trace(model, t, self.cfg.eval.include_cp_flops) for t in traces.values()
            )
            d = report.to_json()
            d["include_cp_flops"] = self.cfg.eval.include_cp_flops
            d["mean_layer_lengths"] = np.mean([t.lengths for t in traces.values()], axis=0).tolist()
            (directory / "report.json").write_text(json.dumps(d, indent=1, sort_keys=True))

        key = self._key("eval", model=file_sha256(model_path), traces=file_sha256(traces_path))
        self._stamped("flops-report", directory, key, run)
        if self.grid:
            self.pareto(self.grid)

    def pareto(self, grid):
        """Retrain and infer for every ``(gamma, phi)`` point; emit the speedup/accuracy table and plot."""
        points = []
        for point in grid:
            hp = dataclasses.replace(self.cfg.adaptive, seed=self.cfg.seed, **point)
            hp.validate()
            name = "_".join(f"{k}{v:g}" for k, v in sorted(point.items()))
            directory = self.path("pareto", name)
            pool = self.pool("flops-report")
            self.require("flops-report", self.path("saliency", "cache.jsonl"))
            key = self._key("schedule", "init", "encoder", "eval", hp=dataclasses.asdict(hp), pool=pool.digest())

            def run(directory=directory, hp=hp):
                self._train_adaptive_into(directory, hp)
                self._infer_into(directory, directory / "model.ckpt", "flops-report")

            self._stamped(f"pareto {name}", directory, key, run)
            summary = json.loads((directory / "summary.json").read_text())
            points.append({**point, "accuracy": summary["accuracy"], "speedup": summary["speedup"], "label": name})
        columns = sorted(grid[0]) + ["accuracy", "speedup"]
        write_table(self.path("pareto", "pareto.tsv"), points, columns)
        plot_pareto(self.path("pareto", "pareto.svg"), points)
        return points

    # ------------------------------------------------------------ driver

    def run(self, phases=None):
        phases = list(phases or self.cfg.phases)
        handlers = {
            "generate-data": self.generate_data,
            "finetune": self.finetune,
            "extract-saliency": self.extract_saliency,
            "train-adaptive": self.train_adaptive,
            "infer": self.infer,
            "evaluate": self.evaluate,
            "flops-report": self.flops_report,
        }
        for phase in sorted(phases, key=PHASES.index):
            handlers[phase]()


def read_pareto(path):
    return read_log(path)
