"""Full class-incremental run orchestration and metric reporting.

Base task: train the denoiser, the convnet, and the feature adapter (as
enabled), then freeze everything. Every task: extract, project, accumulate,
re-select the ridge parameter (unless frozen), solve prototypes, and evaluate
over all seen classes.
"""

import csv
import hashlib
import json
import os
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import cnn as cnn_mod
from . import rpca as rpca_mod
from .datahub import Dataset, ScenarioSpec, augment_array, load_dataset, make_scenario, synth_dataset
from .features import FeatureMatrix, ingest_features
from .fusion import late_fuse, single_predict
from .projector import (DEFAULT_LAMBDA_GRID, PrototypeState, accumulate, init_projection,
                        project, score, select_lambda, solve_prototypes)
from .seeding import derive_seed
from .ssf import ssf_apply, ssf_train


class ConfigError(ValueError):
    pass


class StageFailure(RuntimeError):
    def __init__(self, stage, cause):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class RunConfig:
    dataset: dict                 # {"synth": {...}} or {"manifest": path}
    schedule: list
    class_order: list = None      # default: dataset class order
    portion: float = 1.0
    cnn_branch: bool = False
    ingested_branch: bool = True
    ingested_source: dict = field(default_factory=lambda: {"kind": "raw_pixels"})
    rpca: dict = field(default_factory=lambda: {"enabled": False})
    ssf: dict = field(default_factory=lambda: {"enabled": False})
    fusion: str = "single"        # "late" | "single"
    projection_dim: int = 1000
    lambda_grid: list = None
    freeze_lambda: bool = False
    cnn_train: dict = field(default_factory=dict)
    output_dir: str = None
    seed: int = 0
    threads: int = 1  # intra-task feature-extraction fan-out only

    def __post_init__(self):
        if not (self.cnn_branch or self.ingested_branch):
            raise ConfigError("at least one branch must be enabled")
        if self.fusion not in ("late", "single"):
            raise ConfigError(f"fusion must be late|single, got {self.fusion!r}")
        if self.fusion == "late" and not (self.cnn_branch and self.ingested_branch):
            raise ConfigError("fusion=late requires both branches enabled")
        if self.fusion == "single" and self.cnn_branch and self.ingested_branch:
            raise ConfigError("fusion=single requires exactly one branch enabled")
        if self.fusion == "late" and self.ingested_source.get("kind") == "csv":
            raise ConfigError("fusion=late requires ingested_source raw_pixels "
                              "(csv rows do not align with image test samples)")
        if self.projection_dim < 1:
            raise ConfigError("projection_dim must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return {
            "dataset": self.dataset, "schedule": self.schedule,
            "class_order": self.class_order, "portion": self.portion,
            "cnn_branch": self.cnn_branch, "ingested_branch": self.ingested_branch,
            "ingested_source": self.ingested_source, "rpca": self.rpca,
            "ssf": self.ssf, "fusion": self.fusion,
            "projection_dim": self.projection_dim, "lambda_grid": self.lambda_grid,
            "freeze_lambda": self.freeze_lambda, "cnn_train": self.cnn_train,
            "output_dir": self.output_dir, "seed": self.seed, "threads": self.threads,
        }

    def fingerprint(self) -> str:
        d = self.to_dict()
        d.pop("output_dir")
        d.pop("threads")  # fan-out never changes results
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()


@dataclass
class MetricsReport:
    task_accuracies: list        # A_t, percent
    balanced_accuracies: list
    eval_sizes: list
    lambdas: dict                # branch name -> per-task lambda
    config_fingerprint: str
    wall_clock: list = None      # seconds per task; kept out of metrics.json

    @property
    def base_accuracy(self) -> float:
        return self.task_accuracies[0]

    @property
    def final_accuracy(self) -> float:
        return self.task_accuracies[-1]

    @property
    def avg_accuracy(self) -> float:
        return avg_acc(self.task_accuracies)

    @property
    def perf_drops(self) -> list:
        return [perf_drop(self.base_accuracy, a) for a in self.task_accuracies]

    @property
    def perf_drop(self) -> float:
        return self.perf_drops[-1]

    def to_dict(self) -> dict:
        return {
            "task_accuracies": self.task_accuracies,
            "base_accuracy": self.base_accuracy,
            "avg_accuracy": self.avg_accuracy,
            "final_accuracy": self.final_accuracy,
            "perf_drop": self.perf_drop,
            "perf_drops": self.perf_drops,
            "balanced_accuracies": self.balanced_accuracies,
            "eval_sizes": self.eval_sizes,
            "lambdas": self.lambdas,
            "config_fingerprint": self.config_fingerprint,
        }

    @classmethod
    def from_dict(cls, d: dict, wall_clock=None) -> "MetricsReport":
        return cls(task_accuracies=d["task_accuracies"],
                   balanced_accuracies=d["balanced_accuracies"],
                   eval_sizes=d["eval_sizes"], lambdas=d["lambdas"],
                   config_fingerprint=d["config_fingerprint"], wall_clock=wall_clock)

    def __eq__(self, other):
        return isinstance(other, MetricsReport) and self.to_dict() == other.to_dict()


# ---------------------------------------------------------------------------
# metric formulas

def accuracy(predicted_labels, true_labels) -> float:
    """Top-1 accuracy in percent."""
    if len(predicted_labels) != len(true_labels):
        raise ValueError("prediction/label length mismatch")
    if len(true_labels) == 0:
        raise ValueError("accuracy of empty input is undefined")
    correct = sum(p == t for p, t in zip(predicted_labels, true_labels))
    return 100.0 * correct / len(true_labels)


def balanced_accuracy(predicted_labels, true_labels) -> float:
    """Mean of per-class recalls, percent."""
    if len(true_labels) == 0:
        raise ValueError("accuracy of empty input is undefined")
    per_class = {}
    for p, t in zip(predicted_labels, true_labels):
        hits, total = per_class.get(t, (0, 0))
        per_class[t] = (hits + (p == t), total + 1)
    return 100.0 * float(np.mean([h / n for h, n in per_class.values()]))


def avg_acc(accuracies) -> float:
    """Arithmetic mean of per-task accuracies (base task included)."""
    if len(accuracies) == 0:
        raise ValueError("avg_acc of empty list is undefined")
    return float(np.mean(accuracies))


def perf_drop(a0: float, a_t: float) -> float:
    """Accuracy lost relative to the base task; may be negative."""
    for v in (a0, a_t):
        if not 0 <= v <= 100:
            raise ValueError(f"accuracy {v} outside [0,100]")
    return a0 - a_t


# ---------------------------------------------------------------------------
# branch feature pipelines

class _CnnBranch:
    name = "cnn"

    def __init__(self, config: RunConfig, base_task):
        self.seed = config.seed
        self.threads = max(1, int(config.threads))
        self.rpca_model = None
        hp = dict(config.cnn_train)
        if config.rpca.get("enabled"):
            flat = np.stack([im.pixels.ravel() for im in base_task.train])
            self.rpca_model = rpca_mod.rpca_train(
                flat, r=int(config.rpca.get("rank", 2)),
                epochs=int(config.rpca.get("epochs", 100)),
                lr=float(config.rpca.get("lr", 0.01)),
                seed=derive_seed(config.seed, "rpca"))
        train_imgs = self._prepare(base_task.train, "cnn_train")
        labels = [im.label for im in base_task.train]
        model = cnn_mod.cnn_init(d_cnn=int(hp.get("d_cnn", 256)),
                                 dropout=float(hp.get("dropout", 0.5)),
                                 seed=derive_seed(config.seed, "cnn"),
                                 num_classes=len(set(labels)))
        self.model = cnn_mod.cnn_train(
            model, train_imgs, labels,
            epochs=int(hp.get("epochs", 30)), lr=float(hp.get("lr", 0.01)),
            momentum=float(hp.get("momentum", 0.9)),
            weight_decay=float(hp.get("weight_decay", 0.0005)),
            seed=derive_seed(config.seed, "cnn", 1))

    def _prepare(self, samples, mode):
        out = []
        for i, im in enumerate(samples):
            px = im.pixels
            if self.rpca_model is not None:
                px = rpca_mod.rpca_apply(self.rpca_model, px.ravel()).sparse.reshape(px.shape)
            out.append(augment_array(px, mode, derive_seed(self.seed, "augment", i)))
        return np.stack(out)

    def features(self, samples) -> FeatureMatrix:
        labels = [im.label for im in samples]
        if self.threads == 1 or len(samples) < 2 * self.threads:
            imgs = self._prepare(samples, "cnn_eval")
            return cnn_mod.cnn_extract(self.model, imgs, labels)
        # chunk fan-out; chunks are independent and re-concatenated in order,
        # so the result is identical to the sequential path
        from concurrent.futures import ThreadPoolExecutor

        chunk = (len(samples) + self.threads - 1) // self.threads
        offsets = list(range(0, len(samples), chunk))

        def work(off):
            sub = samples[off : off + chunk]
            imgs = np.stack([
                augment_array(
                    rpca_mod.rpca_apply(self.rpca_model, im.pixels.ravel()).sparse
                    .reshape(im.pixels.shape) if self.rpca_model is not None else im.pixels,
                    "cnn_eval", derive_seed(self.seed, "augment", off + j))
                for j, im in enumerate(sub)])
            return cnn_mod.cnn_extract(self.model, imgs, [im.label for im in sub]).rows

        with ThreadPoolExecutor(max_workers=self.threads) as pool:
            parts = list(pool.map(work, offsets))
        return FeatureMatrix(rows=np.concatenate(parts, axis=0), labels=labels, source="cnn")


class _IngestedBranch:
    name = "ingested"

    def __init__(self, config: RunConfig, base_task):
        self.kind = config.ingested_source.get("kind", "raw_pixels")
        if self.kind == "csv":
            self.train_fm = ingest_features(config.ingested_source["train"])
            self.test_fm = ingest_features(config.ingested_source["test"])
        elif self.kind != "raw_pixels":
            raise ConfigError(f"unknown ingested_source kind {self.kind!r}")
        self.adapter = None
        if config.ssf.get("enabled"):
            base = self.train_features(base_task.classes, base_task.train)
            self.adapter = ssf_train(base, epochs=int(config.ssf.get("epochs", 50)),
                                     lr=float(config.ssf.get("lr", 0.1)),
                                     seed=derive_seed(config.seed, "ssf"))

    def _adapt(self, fm: FeatureMatrix) -> FeatureMatrix:
        return fm if self.adapter is None else ssf_apply(self.adapter, fm)

    def _rows_for(self, fm: FeatureMatrix, classes) -> FeatureMatrix:
        keep = [i for i, c in enumerate(fm.labels) if c in set(classes)]
        return FeatureMatrix(rows=fm.rows[keep], labels=[fm.labels[i] for i in keep],
                             source=fm.source)

    def train_features(self, classes, samples) -> FeatureMatrix:
        if self.kind == "raw_pixels":
            fm = FeatureMatrix(rows=np.stack([im.pixels.ravel() for im in samples]),
                               labels=[im.label for im in samples], source="ingested")
        else:
            fm = self._rows_for(self.train_fm, classes)
        return self._adapt(fm)

    def test_features(self, classes, samples) -> FeatureMatrix:
        if self.kind == "raw_pixels":
            fm = FeatureMatrix(rows=np.stack([im.pixels.ravel() for im in samples]),
                               labels=[im.label for im in samples], source="ingested")
        else:
            fm = self._rows_for(self.test_fm, classes)
        return self._adapt(fm)


# ---------------------------------------------------------------------------
# scenario run

def _resolve_dataset(config: RunConfig) -> Dataset:
    spec = config.dataset
    if "synth" in spec:
        s = dict(spec["synth"])
        s.setdefault("seed", config.seed)
        return synth_dataset(**s)
    if "manifest" in spec:
        return load_dataset(spec["manifest"])
    raise ConfigError("dataset must specify 'synth' or 'manifest'")


def run_scenario(config: RunConfig) -> MetricsReport:
    """Execute the configured CIL run. Any stage failure raises StageFailure;
    metrics for completed tasks are flushed to the output directory first."""
    stage = "setup"
    accs, baccs, sizes = [], [], []
    lambdas = {}
    clocks = []
    try:
        dataset = _resolve_dataset(config)
        order = config.class_order or list(dataset.classes)
        seq = make_scenario(dataset, ScenarioSpec(
            schedule=list(config.schedule), class_order=list(order),
            portion=config.portion, seed=derive_seed(config.seed, "scenario")))
        base = seq.tasks[0]
        if len(base.classes) < 2:
            raise ConfigError("base task needs >= 2 classes for backbone/probe training")

        branches = []
        if config.cnn_branch:
            stage = "base-training(cnn)"
            branches.append(_CnnBranch(config, base))
        if config.ingested_branch:
            stage = "base-training(ingested)"
            branches.append(_IngestedBranch(config, base))

        stage = "projection-init"
        grid = config.lambda_grid or list(DEFAULT_LAMBDA_GRID)
        layers, states = {}, {}
        for bi, br in enumerate(branches):
            if isinstance(br, _CnnBranch):
                probe = br.features(base.train[:1])
            else:
                probe = br.train_features(base.classes, base.train[:1])
            layers[br.name] = init_projection(
                probe.dim, config.projection_dim,
                seed=derive_seed(config.seed, "projection_a", bi))
            states[br.name] = PrototypeState(M=config.projection_dim)
            lambdas[br.name] = []

        for t, task in enumerate(seq.tasks):
            t0 = time.perf_counter()
            stage = f"task{t}-train"
            for br in branches:
                if isinstance(br, _CnnBranch):
                    fm = br.features(task.train)
                else:
                    fm = br.train_features(task.classes, task.train)
                H = project(layers[br.name], fm)
                st = states[br.name]
                if config.freeze_lambda and t > 0:
                    lam = lambdas[br.name][0]
                else:
                    lam = select_lambda(st, H, grid=grid,
                                        seed=derive_seed(config.seed, "lambda_split", t))
                lambdas[br.name].append(lam)
                accumulate(st, H)
                solve_prototypes(st, lam)

            stage = f"task{t}-eval"
            eval_samples = seq.eval_set(t)
            seen = seq.seen_classes(t)
            scores = []
            true_labels = None
            for br in branches:
                if isinstance(br, _CnnBranch):
                    fm = br.features(eval_samples)
                else:
                    fm = br.test_features(seen, eval_samples)
                true_labels = fm.labels
                He = project(layers[br.name], fm)
                scores.append(score(states[br.name], He))
            if config.fusion == "late":
                preds = late_fuse(scores[0], scores[1])
            else:
                preds = single_predict(scores[0])
            pred_labels = [p.label for p in preds]
            accs.append(accuracy(pred_labels, true_labels))
            baccs.append(balanced_accuracy(pred_labels, true_labels))
            sizes.append(len(true_labels))
            clocks.append(time.perf_counter() - t0)
    except Exception as exc:
        if accs and config.output_dir:
            partial = MetricsReport(task_accuracies=accs, balanced_accuracies=baccs,
                                    eval_sizes=sizes, lambdas=lambdas,
                                    config_fingerprint=config.fingerprint(),
                                    wall_clock=clocks)
            try:
                report(partial, config.output_dir, config, partial_after_stage=stage)
            except OSError:
                pass
        if isinstance(exc, StageFailure):
            raise
        raise StageFailure(stage, exc) from exc

    metrics = MetricsReport(task_accuracies=accs, balanced_accuracies=baccs,
                            eval_sizes=sizes, lambdas=lambdas,
                            config_fingerprint=config.fingerprint(), wall_clock=clocks)
    if config.output_dir:
        report(metrics, config.output_dir, config)
    return metrics


# ---------------------------------------------------------------------------
# reporting

def _atomic_write(path: Path, text: str) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    try:
        with os.fdopen(fd, "w") as f:
            f.write(text)
        os.replace(tmp, path)
    except OSError:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def report(metrics: MetricsReport, out_dir, config: RunConfig = None,
           partial_after_stage: str = None) -> dict:
    """Write metrics.json, accuracy_curve.csv, config.json (and timings.json).

    metrics.json is fully deterministic for a fixed config+seed; wall-clock
    goes to timings.json so reruns stay byte-identical.
    """
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        body = metrics.to_dict()
        if partial_after_stage is not None:
            body["partial_after_stage"] = partial_after_stage
        _atomic_write(out_dir / "metrics.json",
                      json.dumps(body, sort_keys=True, indent=2) + "\n")
        rows = ["task,accuracy,perf_drop"]
        for t, (a, pd) in enumerate(zip(metrics.task_accuracies, metrics.perf_drops)):
            rows.append(f"{t},{a!r},{pd!r}")
        _atomic_write(out_dir / "accuracy_curve.csv", "\n".join(rows) + "\n")
        if config is not None:
            _atomic_write(out_dir / "config.json",
                          json.dumps(config.to_dict(), sort_keys=True, indent=2) + "\n")
        if metrics.wall_clock is not None:
            _atomic_write(out_dir / "timings.json",
                          json.dumps({"per_task_seconds": metrics.wall_clock}, indent=2) + "\n")
    except OSError as exc:
        raise OSError(f"failed writing report under {out_dir}: {exc}") from exc
    return {"metrics": out_dir / "metrics.json",
            "curve": out_dir / "accuracy_curve.csv"}


def load_report(out_dir) -> MetricsReport:
    out_dir = Path(out_dir)
    body = json.loads((out_dir / "metrics.json").read_text())
    timings = None
    tpath = out_dir / "timings.json"
    if tpath.exists():
        timings = json.loads(tpath.read_text())["per_task_seconds"]
    return MetricsReport.from_dict(body, wall_clock=timings)
