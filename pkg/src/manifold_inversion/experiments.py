"""Experiment orchestration: configs, benchmark construction and report emission.

Every report file carries the config hash and package version. All numbers
in report files are pure functions of the config; wall-clock timings go to a
separate ``timing.csv`` that is excluded from that guarantee.
"""

from __future__ import annotations

import contextlib
import copy
import hashlib
import json
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .autodiff import MLP
from .data import DatasetConfig, ManifoldDataset, build_generator, load_dataset, make_dataset, save_dataset
from .errors import ConfigError, DatasetFormatError, ManifoldInversionError, MissingArtifactError
from .geometry import random_baseline
from .inversion import InversionConfig, InversionRun, Smoothing, alignment_dynamics, invert_batch
from .metrics import (
    EvalModel,
    as_distribution,
    attack_report,
    final_scores,
    write_csv,
)
from .models import Classifier, Generator
from .training import (
    DecoderConfig,
    ProjectorCache,
    TrainConfig,
    append_metrics_csv,
    measure_as_tr,
    precompute_projectors,
    train_aligned,
    train_classifier,
    train_decoder,
)

log = logging.getLogger(__name__)

OUTPUT_ENV = "MANIFOLD_INVERSION_OUT"
KINDS = ("measure-alignment", "hypothesis", "alignmi-eval")

DEFAULTS = {
    "kind": "hypothesis",
    "seed": 0,
    "dataset": {
        "latent_dim": 4,
        "grid": 8,
        "generator_hidden": 64,
        "generator_input_scale": 2.5,
        "private_classes": 8,
        "aux_classes": 8,
        "samples_per_class": 200,
        "noise_sigma": 0.0,
        "separation": 1.0,
        "center_radius": 2.0,
        "cluster_std": 0.3,
    },
    "test_fraction": 0.2,
    "target": {"hidden": [64], "activation": "tanh", "init_scale": 2.0},
    "eval": {"hidden": [128], "activation": "tanh", "init_scale": 1.0, "floor": 0.9, "epochs": 30},
    "train": {"epochs": 20, "learning_rate": 0.05},
    "finetune": {"epochs": 20, "learning_rate": 0.02},
    "beta": 0.5,
    "betas": [0.1, 0.5, 1.0, 2.0],
    "projector_source": "oracle",
    "attack_generator": "oracle",
    "decoder": {},
    "inversion": {
        "steps": 100,
        "step_size": 0.015,
        "lam": 0.01,
        "loss_kind": "logit",
        "K": 50,
        "alpha": 0.05,
        "track_every": 10,
        "optimizer": "gd",
        "init_scale": 1.0,
    },
    "runs_per_class": 32,
    "methods": ["none", "paa", "taa"],
    "timing_repeats": 3,
    "timing_runs_per_class": 4,
    "per_run_json": False,
    "train_from_scratch": True,
    "target_path": None,
    "output_dir": None,
}

# keys that change how a result is computed but not what it is
_UNHASHED = ("output_dir", "jobs")


# ---------------------------------------------------------------- configs


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(doc: dict, assignment: str) -> dict:
    """Set a dotted key, e.g. ``inversion.K=20``; the value is parsed as JSON when possible."""
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} is not of the form key=value")
    key, _, raw = assignment.partition("=")
    parts = key.strip().split(".")
    if not all(parts):
        raise ConfigError(f"malformed override key {key!r}")
    node = doc
    for p in parts[:-1]:
        if not isinstance(node.get(p), dict):
            node[p] = {}
        node = node[p]
    node[parts[-1]] = _parse_value(raw.strip())
    return doc


def load_config(path: str | Path | None = None, overrides=(), base: dict | None = None) -> dict:
    doc = copy.deepcopy(DEFAULTS if base is None else base)
    if path is not None:
        try:
            user = json.loads(Path(path).read_text())
        except FileNotFoundError as exc:
            raise MissingArtifactError(f"config file {path} not found") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc.msg} (byte offset {exc.pos})") from exc
        if not isinstance(user, dict):
            raise ConfigError("config must be a JSON object")
        doc = _merge(doc, user)
    for o in overrides:
        apply_override(doc, o)
    validate_config(doc)
    return doc


def validate_config(doc: dict) -> None:
    unknown = set(doc) - set(DEFAULTS) - set(_UNHASHED)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    if doc["kind"] not in KINDS:
        raise ConfigError(f"kind must be one of {KINDS}, got {doc['kind']!r}")
    # constructing the typed configs runs their own validation
    dataset_config(doc)
    train_config(doc, "train")
    train_config(doc, "finetune")
    inversion_config(doc)
    DecoderConfig.from_dict(doc["decoder"])
    if doc["projector_source"] not in ("oracle", "learned-decoder"):
        raise ConfigError(f"unknown projector_source {doc['projector_source']!r}")
    if doc["attack_generator"] not in ("oracle", "learned-decoder"):
        raise ConfigError(f"unknown attack_generator {doc['attack_generator']!r}")
    if any(b <= 0 for b in doc["betas"]) or doc["beta"] < 0:
        raise ConfigError("betas must be positive and beta non-negative")
    if int(doc["runs_per_class"]) < 1:
        raise ConfigError("runs_per_class must be >= 1")
    methods = {s.value for s in Smoothing}
    for m in doc["methods"]:
        if m not in methods:
            raise ConfigError(f"unknown smoothing method {m!r}")


def config_hash(doc: dict) -> str:
    clean = {k: v for k, v in doc.items() if k not in _UNHASHED}
    text = json.dumps(clean, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def dataset_config(doc: dict) -> DatasetConfig:
    return DatasetConfig.from_dict(doc["dataset"])


def train_config(doc: dict, section: str, **extra) -> TrainConfig:
    return TrainConfig.from_dict({**doc[section], **extra})


def inversion_config(doc: dict, **extra) -> InversionConfig:
    return InversionConfig.from_dict({**doc["inversion"], **extra})


def output_dir(doc: dict) -> Path:
    if doc.get("output_dir"):
        return Path(doc["output_dir"])
    root = Path(os.environ.get(OUTPUT_ENV, "runs"))
    return root / f"{doc['kind']}-{config_hash(doc)}"


@contextlib.contextmanager
def stage(name: str):
    """Prefix any failure inside the block with the stage name."""
    try:
        yield
    except ManifoldInversionError as exc:
        exc.args = (f"[{name}] {exc}",)
        raise


class Reporter:
    """Writes report files stamped with config hash and package version."""

    def __init__(self, root: Path, doc: dict):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.hash = config_hash(doc)
        self.stamp = f"config_hash={self.hash} version={__version__}"

    def csv(self, name: str, header, rows) -> Path:
        path = self.root / name
        path.parent.mkdir(parents=True, exist_ok=True)
        write_csv(path, header, rows, comment=self.stamp)
        return path

    def json(self, name: str, doc: dict) -> Path:
        path = self.root / name
        path.parent.mkdir(parents=True, exist_ok=True)
        out = {"config_hash": self.hash, "version": __version__}
        out.update(doc)
        path.write_text(json.dumps(out, indent=2, sort_keys=True, default=_jsonable) + "\n")
        return path


def _jsonable(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"cannot serialise {type(obj).__name__}")


# ---------------------------------------------------------------- benchmark pieces


@dataclass
class Benchmark:
    seed: int
    train: ManifoldDataset
    test: ManifoldDataset
    private: ManifoldDataset
    aux: ManifoldDataset
    oracle: Generator
    cache: ProjectorCache | None = None
    decoder: Generator | None = None
    encoder: MLP | None = None
    decoder_metrics: dict | None = None

    @property
    def num_classes(self) -> int:
        return len(self.private.label_set)


def build_benchmark(doc: dict, seed: int) -> Benchmark:
    dc = dataset_config(doc)
    with stage("dataset"):
        private, aux = make_dataset(dc, seed)
        train, test = private.split(doc["test_fraction"], seed)
    return Benchmark(seed, train, test, private, aux, build_generator(dc, seed))


def ensure_decoder(doc: dict, bench: Benchmark) -> None:
    if bench.decoder is None:
        with stage("train-decoder"):
            cfg = DecoderConfig.from_dict({"seed": bench.seed, **doc["decoder"]})
            bench.decoder, bench.encoder, bench.decoder_metrics = train_decoder(bench.aux, bench.oracle.latent_dim, cfg)


def ensure_cache(doc: dict, bench: Benchmark) -> ProjectorCache:
    if bench.cache is None:
        with stage("projectors"):
            if doc["projector_source"] == "oracle":
                bench.cache = precompute_projectors(bench.train, bench.oracle)
            else:
                ensure_decoder(doc, bench)
                bench.cache = precompute_projectors(bench.train, bench.decoder, bench.encoder)
    return bench.cache


def attack_generator(doc: dict, bench: Benchmark) -> Generator:
    if doc["attack_generator"] == "oracle":
        return bench.oracle
    ensure_decoder(doc, bench)
    return bench.decoder


def new_classifier(arch: dict, d: int, classes: int, rng_key) -> Classifier:
    rng = np.random.default_rng(rng_key)
    sizes = [d, *arch["hidden"], classes]
    return Classifier(MLP.create(sizes, arch["activation"], rng, arch["init_scale"]), classes)


def train_target(doc: dict, bench: Benchmark) -> tuple[Classifier, Classifier, list[dict]]:
    """``(pretrained, vanilla, history)``: the vanilla model is the pretrained one after plain fine-tuning.

    Aligned variants fine-tune the same pretrained model with the same seed,
    so ``beta = 0`` reproduces the vanilla model exactly.
    """
    pre = pretrain_target(doc, bench)
    with stage("train-target"):
        cfg = train_config(doc, "finetune", seed=bench.seed * 1000 + 2)
        vanilla, hist = train_classifier(pre, bench.train, cfg, bench.test)
    return pre, vanilla, hist


def pretrain_target(doc: dict, bench: Benchmark) -> Classifier:
    c = new_classifier(doc["target"], bench.train.ambient_dim, bench.num_classes, [bench.seed, 11])
    with stage("pretrain-target"):
        c, _ = train_classifier(c, bench.train, train_config(doc, "train", seed=bench.seed * 1000 + 1), bench.test)
    return c


def finetune_aligned(doc: dict, bench: Benchmark, pre: Classifier, beta: float, checkpoint_dir=None):
    cache = ensure_cache(doc, bench)
    cfg = train_config(doc, "finetune", seed=bench.seed * 1000 + 2, beta=beta)
    with stage(f"train-aligned beta={beta:g}"):
        return train_aligned(pre, bench.train, cache, cfg, bench.test, checkpoint_dir)


def train_eval_model(doc: dict, bench: Benchmark) -> EvalModel:
    arch = doc["eval"]
    c = new_classifier(arch, bench.train.ambient_dim, bench.num_classes, [bench.seed, 12])
    cfg = train_config(doc, "train", seed=bench.seed * 1000 + 3, epochs=arch["epochs"])
    with stage("train-eval-model"):
        c, _ = train_classifier(c, bench.train, cfg)
        ev = EvalModel(c, floor=arch["floor"])
        ev.certify(bench.test.x, bench.test.y)
    return ev


def _attack_chunk(args):
    c, g, targets, cfg, seeds = args
    return invert_batch(c, g, targets, cfg, seeds)


def attack(doc: dict, c: Classifier, g: Generator, cfg: InversionConfig, jobs: int = 1, runs_per_class=None):
    """``runs_per_class`` runs toward every private class.

    Work is split by class whatever ``jobs`` is, so results do not depend on
    the degree of parallelism.
    """
    per = int(runs_per_class or doc["runs_per_class"])
    chunks = [
        (c, g, np.full(per, k), cfg, np.arange(k * per, (k + 1) * per))
        for k in range(c.num_classes)
    ]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            parts = list(pool.map(_attack_chunk, chunks))
    else:
        parts = [_attack_chunk(ch) for ch in chunks]
    return [r for part in parts for r in part]


# ---------------------------------------------------------------- report helpers


def runs_rows(runs: list[InversionRun]):
    for r in runs:
        mean_as = r.mean_as_inv()
        yield (
            r.target,
            r.seed,
            "" if r.final_confidence is None else r.final_confidence,
            "" if r.final_loss is None else r.final_loss,
            "" if mean_as is None else mean_as,
            "" if r.aborted_at is None else r.aborted_at,
        )


RUN_HEADER = ("class", "seed", "final_confidence", "final_loss", "mean_as_inv", "aborted_at")


def dist_row(tag: str, dist: dict):
    return (tag, dist["count"], dist["mean"], dist["median"], dist["q25"], dist["q75"])


DIST_HEADER = ("tag", "count", "mean", "median", "q25", "q75")


def write_runs(rep: Reporter, prefix: str, runs, per_run_json: bool) -> None:
    rep.csv(f"{prefix}runs.csv", RUN_HEADER, runs_rows(runs))
    if per_run_json:
        for r in runs:
            rep.json(f"{prefix}runs/class{r.target:02d}_seed{r.seed:04d}.json", r.to_dict())


def spearman(values) -> float:
    """Rank correlation between ``values`` and their position."""
    v = np.asarray(values, dtype=np.float64)
    if v.size < 2:
        return float("nan")
    ranks = np.argsort(np.argsort(v, kind="stable"), kind="stable").astype(np.float64)
    pos = np.arange(v.size, dtype=np.float64)
    ranks -= ranks.mean()
    pos -= pos.mean()
    return float(ranks @ pos / math.sqrt((ranks @ ranks) * (pos @ pos)))


# ---------------------------------------------------------------- experiments


def _target_for(doc: dict, bench: Benchmark) -> Classifier:
    if doc.get("target_path"):
        return load_classifier(Path(doc["target_path"]), bench.train.ambient_dim)
    if not doc["train_from_scratch"]:
        raise MissingArtifactError("no target_path given and train_from_scratch is off")
    return train_target(doc, bench)[1]


def run_measure_alignment(doc: dict, seed: int | None = None, out: Path | None = None, jobs: int = 1) -> dict:
    """Inversion-time alignment of a vanilla target: distribution, dynamics, baseline."""
    seed = doc["seed"] if seed is None else seed
    bench = build_benchmark(doc, seed)
    target = _target_for(doc, bench)
    gen = attack_generator(doc, bench)
    cfg = inversion_config(doc, seed=seed)
    with stage("attack"):
        runs = attack(doc, target, gen, cfg, jobs)
    k, d = gen.latent_dim, gen.ambient_dim
    analytic, _ = random_baseline(k, d, 1, seed)
    dist = as_distribution(runs)
    dyn = alignment_dynamics(runs)
    tracked = [len(r.tracked()) for r in runs]
    result = {
        "seed": seed,
        "latent_dim": k,
        "ambient_dim": d,
        "random_baseline": analytic,
        "as_inv": {key: v for key, v in dist.items() if key != "histogram"},
        "dynamics": [{"step": s, "mean_as_inv": a, "mean_confidence": cf} for s, a, cf in dyn],
        "tracked_per_run": sorted(set(tracked)),
        "confidence_trend": spearman([cf for _, _, cf in dyn]),
    }
    if out is not None:
        rep = Reporter(out, doc)
        rep.json("alignment.json", result)
        rep.csv("as_inv_histogram.csv", ("bin_left", "count"), dist["histogram"])
        rep.csv("dynamics.csv", ("step", "mean_as_inv", "mean_confidence"), dyn)
        write_runs(rep, "", runs, doc["per_run_json"])
    result["runs"] = runs
    return result


def interior_maximum(acc: list[float]) -> bool:
    """True when the largest value sits strictly inside the sequence and beats both ends."""
    if len(acc) < 3:
        return False
    return max(acc[1:-1]) > max(acc[0], acc[-1])


def run_hypothesis(doc: dict, seed: int | None = None, out: Path | None = None, jobs: int = 1) -> dict:
    """Vanilla vs alignment-aware targets: AS_tr, accuracy and attack success per model."""
    seed = doc["seed"] if seed is None else seed
    bench = build_benchmark(doc, seed)
    ensure_cache(doc, bench)
    ev = train_eval_model(doc, bench)
    pre, vanilla, _ = train_target(doc, bench)
    models = [("vanilla", 0.0, vanilla)]
    for beta in [0.0, *doc["betas"]]:
        m, _ = finetune_aligned(doc, bench, pre, beta)
        models.append((f"beta={beta:g}", beta, m))
    gen = attack_generator(doc, bench)
    cfg = inversion_config(doc, seed=seed)
    rows, dists, runs_by = [], {}, {}
    for tag, beta, m in models:
        with stage(f"attack {tag}"):
            runs = attack(doc, m, gen, cfg, jobs)
        report = attack_report(runs, ev, bench.private)
        as_tr = measure_as_tr(m, bench.train, bench.cache)
        acc = float(np.mean(m.predict(bench.test.x) == bench.test.y))
        dists[tag] = as_distribution(runs)
        runs_by[tag] = runs
        rows.append(
            {"model": tag, "beta": beta, "as_tr": as_tr["mean"], "as_tr_median": as_tr["median"],
             "test_acc": acc, "acc1": report.acc1, "acc5": report.acc5, "knn_dist": report.knn_dist,
             "as_inv_median": dists[tag]["median"]}
        )
    rows.sort(key=lambda r: (r["as_tr"], r["model"]))
    sweep = [r for r in rows if r["model"] != "beta=0"]
    aligned_tag = f"beta={doc['beta']:g}"
    if aligned_tag not in dists:
        m, _ = finetune_aligned(doc, bench, pre, doc["beta"])
        runs_by[aligned_tag] = attack(doc, m, gen, cfg, jobs)
        dists[aligned_tag] = as_distribution(runs_by[aligned_tag])
    by_tag = {r["model"]: r for r in rows}
    result = {
        "seed": seed,
        "eval_test_acc": ev.test_accuracy,
        "table": rows,
        "aligned_model": aligned_tag,
        "as_tr_gap": by_tag[aligned_tag]["as_tr_median"] - by_tag["vanilla"]["as_tr_median"]
        if aligned_tag in by_tag else None,
        "as_inv_gap": dists[aligned_tag]["median"] - dists["vanilla"]["median"],
        "interior_maximum": interior_maximum([r["acc1"] for r in sweep]),
    }
    if out is not None:
        rep = Reporter(out, doc)
        cols = ("model", "beta", "as_tr", "test_acc", "acc1", "acc5", "knn_dist", "as_inv_median")
        rep.csv("table.csv", cols, [[r[c] for c in cols] for r in rows])
        rep.csv("as_inv.csv", DIST_HEADER, [dist_row(t, dists[t]) for t in sorted(dists)])
        for t in sorted(dists):
            rep.csv(f"as_inv_histogram_{t}.csv", ("bin_left", "count"), dists[t]["histogram"])
        rep.json("hypothesis.json", {k: v for k, v in result.items()})
    result["runs"] = runs_by
    return result


def _timed(fn, repeats: int) -> float:
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def run_alignmi_eval(doc: dict, seed: int | None = None, out: Path | None = None, jobs: int = 1) -> dict:
    """Baseline vs PAA vs TAA attacks on one vanilla target with shared run seeds."""
    seed = doc["seed"] if seed is None else seed
    bench = build_benchmark(doc, seed)
    ev = train_eval_model(doc, bench)
    target = _target_for(doc, bench)
    gen = attack_generator(doc, bench)
    rows, timing, runs_by = [], [], {}
    for method in doc["methods"]:
        cfg = inversion_config(doc, seed=seed, smoothing=method)
        with stage(f"attack {method}"):
            runs = attack(doc, target, gen, cfg, jobs)
        report = attack_report(runs, ev, bench.private)
        fin = final_scores(runs)
        runs_by[method] = runs
        rows.append(
            {"method": method, "acc1": report.acc1, "acc5": report.acc5, "knn_dist": report.knn_dist,
             "final_as_inv_median": float(np.median(fin)) if fin.size else None,
             "final_confidence_median": float(np.median([r.final_confidence for r in runs if r.completed]))}
        )
    repeats, per = int(doc["timing_repeats"]), int(doc["timing_runs_per_class"])
    if repeats > 0:
        base = None
        for method in doc["methods"]:
            cfg = inversion_config(doc, seed=seed, smoothing=method)
            t = _timed(lambda: attack(doc, target, gen, cfg, 1, runs_per_class=per), repeats)
            base = t if method == "none" else base
            timing.append({"method": method, "seconds": t})
        for row in timing:
            row["runtime_ratio"] = row["seconds"] / base if base else None
    result = {"seed": seed, "eval_test_acc": ev.test_accuracy, "table": rows, "timing": timing}
    if out is not None:
        rep = Reporter(out, doc)
        cols = ("method", "acc1", "acc5", "knn_dist", "final_as_inv_median", "final_confidence_median")
        rep.csv("table.csv", cols, [[("" if r[c] is None else r[c]) for c in cols] for r in rows])
        rep.json("alignmi.json", {"seed": seed, "eval_test_acc": ev.test_accuracy, "table": rows})
        for method, runs in runs_by.items():
            write_runs(rep, f"{method}_", runs, doc["per_run_json"])
        if timing:
            # wall-clock numbers are not reproducible, so they live apart from the report
            rep.csv("timing.csv", ("method", "seconds", "runtime_ratio"),
                    [(t["method"], t["seconds"], t["runtime_ratio"]) for t in timing])
    result["runs"] = runs_by
    return result


RUNNERS = {
    "measure-alignment": run_measure_alignment,
    "hypothesis": run_hypothesis,
    "alignmi-eval": run_alignmi_eval,
}


def run_experiment(doc: dict, out: Path | None = None, jobs: int = 1) -> dict:
    out = output_dir(doc) if out is None else Path(out)
    result = RUNNERS[doc["kind"]](doc, out=out, jobs=jobs)
    Reporter(out, doc).json("config.json", {"config": {k: v for k, v in doc.items() if k not in _UNHASHED}})
    return result


# ---------------------------------------------------------------- artifact stages


def save_benchmark_data(doc: dict, out: Path) -> dict:
    seed = doc["seed"]
    private, aux = make_dataset(dataset_config(doc), seed)
    extra = {"config_hash": config_hash(doc), "version": __version__}
    save_dataset(private, out / "private", extra)
    save_dataset(aux, out / "auxiliary", extra)
    return {"private": len(private), "auxiliary": len(aux)}


def load_benchmark(doc: dict, data_dir: Path | None) -> Benchmark:
    """Benchmark from a saved data directory, or regenerated from the config."""
    if data_dir is None:
        return build_benchmark(doc, doc["seed"])
    if not (Path(data_dir) / "private" / "manifest.json").exists():
        raise MissingArtifactError(f"no dataset under {data_dir}")
    private = load_dataset(Path(data_dir) / "private")
    aux = load_dataset(Path(data_dir) / "auxiliary")
    dc = dataset_config(doc)
    gen = build_generator(dc, private.generator_seed)
    train, test = private.split(doc["test_fraction"], doc["seed"])
    return Benchmark(doc["seed"], train, test, private, aux, gen)


def manifest_path(path: Path) -> Path:
    return path.with_name(path.stem + ".manifest.json")


def save_classifier(c: Classifier, path: Path, doc: dict | None = None, kind: str = "classifier") -> None:
    """Checkpoint plus a manifest recording kind, dims, seed and config hash."""
    path.parent.mkdir(parents=True, exist_ok=True)
    c.net.save(path)
    manifest = {
        "kind": kind,
        "input_dim": c.net.input_dim,
        "num_classes": c.num_classes,
        "seed": None if doc is None else doc["seed"],
        "config_hash": None if doc is None else config_hash(doc),
        "version": __version__,
    }
    manifest_path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_classifier(path: Path, input_dim: int | None = None) -> Classifier:
    """Reload a checkpoint, checking dims against its manifest when one exists."""
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"checkpoint {path} not found")
    try:
        net = MLP.load(path)
    except (ValueError, KeyError) as exc:
        raise DatasetFormatError(f"unreadable checkpoint {path}: {exc}") from exc
    mpath = manifest_path(path)
    if mpath.exists():
        manifest = json.loads(mpath.read_text())
        if manifest.get("input_dim") != net.input_dim or manifest.get("num_classes") != net.output_dim:
            raise DatasetFormatError(f"checkpoint {path} does not match its manifest dims")
    if input_dim is not None and net.input_dim != input_dim:
        raise ConfigError(f"checkpoint {path} expects input dim {net.input_dim}, data has {input_dim}")
    return Classifier(net, net.output_dim)


def write_epoch_metrics(doc: dict, path: Path, rows) -> None:
    if path.exists():
        path.unlink()
    append_metrics_csv(path, rows, header_comment=f"config_hash={config_hash(doc)} version={__version__}")


def summary_text(root: Path) -> str:
    """Plain-text digest of every CSV table and JSON summary under ``root``."""
    root = Path(root)
    if not root.exists():
        raise MissingArtifactError(f"no report directory {root}")
    parts = []
    for path in sorted(root.glob("*.json")):
        doc = json.loads(path.read_text())
        keep = {k: v for k, v in doc.items() if not isinstance(v, (list, dict)) or k in ("as_inv",)}
        parts.append(f"== {path.name}\n" + json.dumps(keep, indent=2, sort_keys=True))
    for path in sorted(root.glob("*table*.csv")) + sorted(root.glob("as_inv.csv")) + sorted(root.glob("timing.csv")):
        parts.append(f"== {path.name}\n" + path.read_text().rstrip())
    if not parts:
        raise MissingArtifactError(f"no report files in {root}")
    return "\n\n".join(parts) + "\n"
