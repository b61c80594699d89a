"""Attack-success metrics and alignment-score distribution statistics."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad

HIST_BINS = 20


def summarize(values) -> dict:
    """mean / median / quartiles of a 1-D sample, plus its size."""
    v = np.asarray(list(values), dtype=np.float64)
    if v.size == 0:
        raise ValueError("cannot summarize an empty sample")
    return {
        "count": int(v.size),
        "mean": math.fsum(v.tolist()) / v.size,
        "median": float(np.median(v)),
        "q25": float(np.quantile(v, 0.25)),
        "q75": float(np.quantile(v, 0.75)),
    }


@dataclass
class EvalModel:
    """Held-out classifier used to score reconstructions.

    It must pass ``certify`` (test accuracy at or above ``floor``) before any
    scoring function accepts it.
    """

    classifier: object
    floor: float = 0.9
    test_accuracy: float | None = None

    @property
    def certified(self) -> bool:
        return self.test_accuracy is not None and self.test_accuracy >= self.floor

    def certify(self, test_x, test_y) -> float:
        self.test_accuracy = float(np.mean(self.classifier.predict(test_x) == np.asarray(test_y)))
        if not self.certified:
            raise ValueError(f"evaluation model accuracy {self.test_accuracy:.3f} is below the floor {self.floor}")
        return self.test_accuracy

    def logits(self, X) -> np.ndarray:
        with ad.no_grad():
            return self.classifier.net(np.atleast_2d(X)).data

    def features(self, X) -> np.ndarray:
        with ad.no_grad():
            return self.classifier.net.features(np.atleast_2d(np.asarray(X, dtype=np.float64))).data


def _require_certified(ev: EvalModel) -> None:
    if not ev.certified:
        raise ValueError("evaluation model has not passed its accuracy floor")


def _unpack(recons) -> tuple[np.ndarray, np.ndarray]:
    recons = list(recons)
    if not recons:
        raise ValueError("no reconstructions to evaluate")
    X = np.stack([np.asarray(x, dtype=np.float64) for x, _ in recons])
    y = np.asarray([int(t) for _, t in recons])
    return X, y


def topk_hits(logits: np.ndarray, y: np.ndarray, k: int) -> np.ndarray:
    k = min(k, logits.shape[1])
    top = np.argsort(-logits, axis=1, kind="stable")[:, :k]
    return np.any(top == y[:, None], axis=1)


def attack_accuracy(recons: Iterable[tuple], ev: EvalModel) -> tuple[float, float]:
    """Top-1 and top-min(5, C) hit rates of the evaluation model on ``(x_hat, y)`` pairs."""
    _require_certified(ev)
    X, y = _unpack(recons)
    logits = ev.logits(X)
    return float(np.mean(topk_hits(logits, y, 1))), float(np.mean(topk_hits(logits, y, 5)))


def knn_distances(recons, private_x, private_y, ev: EvalModel) -> np.ndarray:
    """Per-reconstruction nearest-neighbour feature distance to private samples of its class."""
    _require_certified(ev)
    X, y = _unpack(recons)
    private_y = np.asarray(private_y)
    fr = ev.features(X)
    fp = ev.features(private_x)
    out = np.empty(len(y))
    for label in np.unique(y):
        pool = fp[private_y == label]
        if len(pool) == 0:
            raise ValueError(f"class {label} has no private samples")
        sel = np.flatnonzero(y == label)
        diff = fr[sel, None, :] - pool[None, :, :]
        out[sel] = np.sqrt(np.min(np.einsum("ijk,ijk->ij", diff, diff), axis=1))
    return out


def knn_distance(recons, private, ev: EvalModel) -> float:
    """Mean over reconstructions of the nearest private-sample distance in feature space.

    ``fsum`` makes the mean independent of reconstruction order.
    """
    d = knn_distances(recons, private.x, private.y, ev)
    return math.fsum(d.tolist()) / len(d)


def tracked_scores(runs) -> np.ndarray:
    return np.asarray([r.as_inv for run in runs for r in run.records if r.as_inv is not None], dtype=np.float64)


def final_scores(runs) -> np.ndarray:
    """Last tracked alignment score of every run that has one."""
    out = []
    for run in runs:
        tracked = [r.as_inv for r in run.records if r.as_inv is not None]
        if tracked:
            out.append(tracked[-1])
    return np.asarray(out, dtype=np.float64)


def histogram(values, bins: int = HIST_BINS) -> list[tuple[float, int]]:
    counts, edges = np.histogram(np.asarray(values, dtype=np.float64), bins=bins, range=(0.0, 1.0))
    return [(float(e), int(c)) for e, c in zip(edges[:-1], counts)]


def as_distribution(runs_or_values) -> dict:
    """Summary of all tracked alignment scores with a 20-bin histogram over [0, 1].

    Accepts inversion runs or a plain sequence of scores.
    """
    items = list(runs_or_values)
    if items and hasattr(items[0], "records"):
        values = tracked_scores(items)
    else:
        values = np.asarray(items, dtype=np.float64)
    if values.size == 0:
        raise ValueError("no tracked alignment scores")
    out = summarize(values)
    out["histogram"] = histogram(values)
    return out


@dataclass
class AttackReport:
    acc1: float
    acc5: float
    knn_dist: float
    per_class: dict = field(default_factory=dict)
    as_inv: dict | None = None

    def __post_init__(self):
        if not (0.0 <= self.acc1 <= self.acc5 <= 1.0):
            raise ValueError(f"inconsistent accuracies acc1={self.acc1}, acc5={self.acc5}")

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self, **extra) -> str:
        doc = dict(extra)
        doc.update(self.to_dict())
        return json.dumps(doc, indent=2, sort_keys=True)


def attack_report(runs, ev: EvalModel, private) -> AttackReport:
    """Acc@1/Acc@5/KNN over completed runs, with a per-class breakdown."""
    done = [r for r in runs if r.final_x is not None]
    recons = [(r.final_x, r.target) for r in done]
    X, y = _unpack(recons)
    logits = ev.logits(X)
    hit1, hit5 = topk_hits(logits, y, 1), topk_hits(logits, y, 5)
    dists = knn_distances(recons, private.x, private.y, ev)
    per_class = {}
    for label in np.unique(y):
        sel = y == label
        per_class[int(label)] = {
            "runs": int(sel.sum()),
            "acc1": float(hit1[sel].mean()),
            "acc5": float(hit5[sel].mean()),
            "knn_dist": math.fsum(dists[sel].tolist()) / int(sel.sum()),
        }
    scores = tracked_scores(done)
    return AttackReport(
        acc1=float(hit1.mean()),
        acc5=float(hit5.mean()),
        knn_dist=math.fsum(dists.tolist()) / len(dists),
        per_class=per_class,
        as_inv=summarize(scores) if scores.size else None,
    )


def write_csv(path: str | Path, header: Sequence[str], rows: Iterable[Sequence], comment: str | None = None) -> None:
    """CSV with ``repr`` floats so values round-trip exactly."""
    with Path(path).open("w", newline="") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])


def read_csv(path: str | Path) -> list[dict]:
    with Path(path).open() as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(lines))
