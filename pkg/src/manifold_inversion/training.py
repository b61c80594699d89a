"""Classifier and autoencoder training, including alignment-aware training.

The alignment-aware objective is ``CE - beta * ||P g|| / ||g||`` per sample,
where ``g`` is the sum over classes of the logit input gradients and ``P`` the
cached tangent projector of that sample. ``g`` is obtained by a backward pass
recorded on the tape, so the parameter gradient of the objective involves
second derivatives of the network.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import MLP, Tensor
from .data import ManifoldDataset
from .errors import ConfigError, DegenerateDecoderError, NumericError, TrainingDivergedError
from .geometry import Projector, alignment_score, alignment_scores, tangent_bases
from .metrics import summarize
from .models import Classifier, Generator, GeneratorKind, LossKind, input_gradients, loss_tensor

log = logging.getLogger(__name__)

_TINY = 1e-30


@dataclass(frozen=True)
class TrainConfig:
    optimizer: str = "sgd"
    learning_rate: float = 0.05
    momentum: float = 0.9
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 1e-4
    epochs: int = 20
    batch_size: int = 64
    beta: float = 0.0
    seed: int = 0
    projector_source: str = "oracle"

    def __post_init__(self):
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"optimizer must be 'sgd' or 'adam', got {self.optimizer!r}")
        if self.beta < 0:
            raise ConfigError("beta must be >= 0")
        if self.projector_source not in ("oracle", "learned-decoder"):
            raise ConfigError(f"unknown projector source {self.projector_source!r}")

    @classmethod
    def from_dict(cls, doc: dict) -> TrainConfig:
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(doc) - names
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        doc = dict(doc)
        if "betas" in doc:
            doc["betas"] = tuple(doc["betas"])
        return cls(**doc)


class SGD:
    def __init__(self, params: dict[str, Tensor], lr: float, momentum: float = 0.0, weight_decay: float = 0.0):
        self.params = params
        self.lr, self.momentum, self.weight_decay = lr, momentum, weight_decay
        self.velocity = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        for k, p in self.params.items():
            g = grads[k] + self.weight_decay * p.data
            v = self.velocity[k]
            v *= self.momentum
            v += g
            p.data = p.data - self.lr * v


class Adam:
    def __init__(self, params: dict[str, Tensor], lr: float, betas=(0.9, 0.999), weight_decay: float = 0.0, eps=1e-8):
        self.params = params
        self.lr, self.betas, self.weight_decay, self.eps = lr, betas, weight_decay, eps
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.betas
        for k, p in self.params.items():
            g = grads[k] + self.weight_decay * p.data
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            mhat = self.m[k] / (1 - b1**self.t)
            vhat = self.v[k] / (1 - b2**self.t)
            p.data = p.data - self.lr * mhat / (np.sqrt(vhat) + self.eps)


def make_optimizer(params: dict[str, Tensor], cfg: TrainConfig):
    if cfg.optimizer == "adam":
        return Adam(params, cfg.learning_rate, cfg.betas, cfg.weight_decay)
    return SGD(params, cfg.learning_rate, cfg.momentum, cfg.weight_decay)


# ---------------------------------------------------------------- projector cache


@dataclass
class ProjectorCache:
    """Tangent bases for the samples of one dataset, keyed by sample index."""

    index: np.ndarray
    bases: np.ndarray
    anchors: np.ndarray
    source: str

    def __post_init__(self):
        self._pos = {int(i): j for j, i in enumerate(self.index)}

    def __len__(self) -> int:
        return len(self.index)

    def __contains__(self, sample: int) -> bool:
        return int(sample) in self._pos

    def __getitem__(self, sample: int) -> Projector:
        j = self._pos[int(sample)]
        return Projector(basis=self.bases[j], anchor=self.anchors[j])

    def dense(self, n: int) -> tuple[np.ndarray, np.ndarray]:
        """Bases laid out by sample index for ``n`` samples, plus a coverage mask."""
        out = np.zeros((n,) + self.bases.shape[1:])
        mask = np.zeros(n, dtype=bool)
        out[self.index] = self.bases
        mask[self.index] = True
        return out, mask

    def to_dict(self) -> dict:
        return {
            "source": self.source,
            "index": self.index.tolist(),
            "projectors": [self[i].to_dict() for i in self.index],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> ProjectorCache:
        projectors = [Projector.from_dict(p) for p in doc["projectors"]]
        return cls(
            index=np.asarray(doc["index"], dtype=np.int64),
            bases=np.stack([p.basis for p in projectors]),
            anchors=np.stack([p.anchor for p in projectors]),
            source=doc["source"],
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path: str | Path) -> ProjectorCache:
        return cls.from_dict(json.loads(Path(path).read_text()))


def precompute_projectors(
    ds: ManifoldDataset, generator: Generator, encoder: MLP | None = None, max_skip_fraction: float = 0.05
) -> ProjectorCache:
    """Tangent projector for every sample.

    An oracle generator is evaluated at the true latents; a learned decoder at
    ``encoder(x)``. Rank-deficient samples are skipped and logged; more than
    ``max_skip_fraction`` of them is an error.
    """
    if generator.kind is GeneratorKind.ORACLE:
        Z = ds.z
    else:
        if encoder is None:
            raise ValueError("a learned decoder needs its encoder to compute latent codes")
        with ad.no_grad():
            Z = encoder(ds.x).data
    with ad.no_grad():
        anchors = generator(Z).data
    bases, ok = tangent_bases(generator.jacobians(Z))
    skipped = np.flatnonzero(~ok)
    for i in skipped:
        log.warning("sample %d: rank-deficient tangent, skipped", i)
    if len(skipped) > max_skip_fraction * len(ds):
        raise DegenerateDecoderError(f"{len(skipped)} of {len(ds)} samples have rank-deficient tangents")
    keep = np.flatnonzero(ok)
    return ProjectorCache(index=keep, bases=bases[keep], anchors=anchors[keep], source=generator.kind.value)


# ---------------------------------------------------------------- alignment term


def summed_input_gradient(net: MLP, xt: Tensor, create_graph: bool) -> Tensor:
    """Rows of ``sum_i grad_x f_i(x)`` for a batch ``xt`` (which must require grad)."""
    return ad.grad(net(xt).sum(), xt, create_graph=create_graph)


def alignment_terms(g: Tensor, bases: np.ndarray, mask: np.ndarray | None = None) -> tuple[Tensor, np.ndarray]:
    """Differentiable ``||U U^T g|| / ||g||`` per row.

    Rows outside ``mask`` or with a vanishing gradient get a zero term and are
    reported as invalid; the guards keep their backward pass finite.
    """
    n = g.shape[0]
    sq = (g * g).sum(axis=1)
    valid = sq.data > _TINY
    vanished = ~valid if mask is None else (mask & ~valid)
    if mask is not None:
        valid &= mask
    for i in np.flatnonzero(vanished):
        log.info("sample %d: vanishing summed input gradient, alignment term skipped", i)
    coeff = ad.reshape(ad.matmul(ad.reshape(g, (n, 1, g.shape[1])), Tensor(bases)), (n, bases.shape[2]))
    proj = ad.reshape(ad.matmul(Tensor(bases), ad.reshape(coeff, (n, bases.shape[2], 1))), g.shape)
    psq = (proj * proj).sum(axis=1)
    vf = valid.astype(np.float64)
    gnorm = ad.sqrt(sq + Tensor(np.where(valid, 0.0, 1.0)))
    pnorm = ad.sqrt(psq + Tensor(np.where(psq.data > 0, 0.0, _TINY)))
    return pnorm / gnorm * Tensor(vf), valid


def alignment_term(c: Classifier, x, p: Projector) -> float | None:
    """Alignment of the summed input gradient at ``x`` with ``p``'s tangent space.

    Returns None (and logs) when the summed gradient vanishes.
    """
    xt = Tensor(np.atleast_2d(np.asarray(x, dtype=np.float64)), requires_grad=True)
    g = summed_input_gradient(c.net, xt, create_graph=False)
    terms, valid = alignment_terms(g, p.basis[None])
    if not valid[0]:
        return None
    return float(min(terms.data[0], 1.0))


@dataclass(frozen=True)
class BoundCheck:
    lhs: float
    rhs: float
    holds: bool


def bound_sides(grads: np.ndarray, operator, equalize: bool = True) -> BoundCheck:
    """Both sides of ``-|Q sum g_i|/|sum g_i| >= -(1/C) sum |Q g_i|/|g_i|``.

    ``operator`` is a Projector or any ``(d, d)`` matrix ``Q`` (e.g. ``J J^T``).
    With ``equalize`` the rows are first rescaled to unit norm. The inequality
    is tight for colinear gradients but is not implied by equal norms alone:
    two orthogonal unit gradients with ``Q`` projecting onto one of them give
    ``-1/sqrt(2) < -1/2``.
    """
    grads = np.asarray(grads, dtype=np.float64)
    if equalize:
        grads = grads / np.linalg.norm(grads, axis=1, keepdims=True)
    apply = operator.project if isinstance(operator, Projector) else (lambda v: v @ np.asarray(operator).T)
    total = grads.sum(axis=0)
    lhs = -np.linalg.norm(apply(total)) / np.linalg.norm(total)
    rhs = -np.mean(np.linalg.norm(apply(grads), axis=1) / np.linalg.norm(grads, axis=1))
    return BoundCheck(float(lhs), float(rhs), bool(lhs >= rhs - 1e-12))


def check_bound(c: Classifier, x, p, equalize: bool = True) -> BoundCheck:
    """Check the single-projection relaxation on the logit input gradients at ``x``."""
    return bound_sides(input_gradients(c, x), p, equalize=equalize)


def per_class_alignment(c: Classifier, x, p: Projector) -> float:
    """Mean over logits of the per-logit alignment (the C-projection objective term)."""
    G = input_gradients(c, x)
    return float(np.mean([alignment_score(p, row).value for row in G]))


# ---------------------------------------------------------------- training loops


def _accuracy(c: Classifier, ds: ManifoldDataset | None) -> float | None:
    if ds is None or len(ds) == 0:
        return None
    return float(np.mean(c.predict(ds.x) == ds.y))


def _batch_step(model: Classifier, names, X, y, bases, mask, beta) -> tuple[float, dict[str, np.ndarray]]:
    params = model.net.parameters()
    xt = Tensor(X, requires_grad=bases is not None)
    logits = model.net(xt)
    total = loss_tensor(logits, y, LossKind.CE).mean()
    if bases is not None:
        g = ad.grad(logits.sum(), xt, create_graph=True)
        terms, _ = alignment_terms(g, bases, mask)
        total = total - beta * terms.mean()
    value = float(total.data)
    grads = ad.grad(total, [params[k] for k in names])
    return value, {k: gk.data for k, gk in zip(names, grads)}


def _fit(
    c: Classifier,
    ds: ManifoldDataset,
    cfg: TrainConfig,
    cache: ProjectorCache | None,
    test: ManifoldDataset | None,
    on_epoch: Callable[[int, Classifier], dict] | None = None,
) -> tuple[Classifier, list[dict]]:
    model = c.copy()
    params = model.net.parameters()
    names = sorted(params)
    opt = make_optimizer(params, cfg)
    rng = np.random.default_rng(cfg.seed)
    n = len(ds)
    if cache is not None:
        all_bases, covered = cache.dense(n)
    history = []
    for epoch in range(cfg.epochs):
        perm = rng.permutation(n)
        losses = []
        for start in range(0, n, cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            bases = mask = None
            if cache is not None:
                bases, mask = all_bases[idx], covered[idx]
            try:
                value, grads = _batch_step(model, names, ds.x[idx], ds.y[idx], bases, mask, cfg.beta)
            except NumericError as exc:
                raise TrainingDivergedError(epoch, float("nan")) from exc
            if not np.isfinite(value) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                raise TrainingDivergedError(epoch, value)
            opt.step(grads)
            losses.append(value * len(idx))
        row = {
            "epoch": epoch + 1,
            "train_loss": float(np.sum(losses) / n),
            "train_acc": _accuracy(model, ds),
            "test_acc": _accuracy(model, test),
        }
        if on_epoch is not None:
            row.update(on_epoch(epoch + 1, model))
        history.append(row)
    return model, history


def train_classifier(
    c: Classifier, ds: ManifoldDataset, cfg: TrainConfig, test: ManifoldDataset | None = None
) -> tuple[Classifier, list[dict]]:
    """Plain cross-entropy training. Returns a trained copy and per-epoch metrics."""
    if cfg.beta != 0:
        raise ConfigError("train_classifier is the beta=0 objective; use train_aligned for beta > 0")
    return _fit(c, ds, cfg, None, test)


def train_aligned(
    c: Classifier,
    ds: ManifoldDataset,
    cache: ProjectorCache,
    cfg: TrainConfig,
    test: ManifoldDataset | None = None,
    checkpoint_dir: str | Path | None = None,
) -> tuple[Classifier, list[dict]]:
    """Minimise ``CE - beta * alignment`` using the cached projectors.

    Every epoch records ``as_tr`` (mean alignment term over ``ds``) and, if
    ``checkpoint_dir`` is given, writes ``epoch_XXX.json`` there.
    """
    if len(cache.index) == 0:
        raise ValueError("projector cache is empty")
    if cache.index.max() >= len(ds):
        raise ValueError("projector cache does not belong to this dataset")
    ckpt = Path(checkpoint_dir) if checkpoint_dir is not None else None
    if ckpt is not None:
        ckpt.mkdir(parents=True, exist_ok=True)

    def on_epoch(epoch: int, model: Classifier) -> dict:
        if ckpt is not None:
            model.net.save(ckpt / f"epoch_{epoch:03d}.json")
        return {"as_tr": training_alignment(model, ds, cache).mean()}

    return _fit(c, ds, cfg, cache, test, on_epoch)


def training_alignment(c: Classifier, ds: ManifoldDataset, cache: ProjectorCache) -> np.ndarray:
    """Per-sample alignment terms over the cached samples (NaN where undefined)."""
    xt = Tensor(ds.x[cache.index], requires_grad=True)
    g = summed_input_gradient(c.net, xt, create_graph=False).data
    return alignment_scores(cache.bases, g)


def measure_as_tr(c: Classifier, ds: ManifoldDataset, cache: ProjectorCache) -> dict:
    """Distribution summary of training-time alignment scores; no parameters change."""
    values = training_alignment(c, ds, cache)
    return summarize(values[np.isfinite(values)])


def append_metrics_csv(path: str | Path, rows: list[dict], header_comment: str | None = None) -> None:
    """Write per-epoch metrics (epoch, train-loss, test-acc, AS_tr-mean)."""
    path = Path(path)
    fields = ["epoch", "train_loss", "test_acc", "as_tr"]
    new = not path.exists()
    with path.open("a", newline="") as fh:
        if new and header_comment:
            fh.write(f"# {header_comment}\n")
        w = csv.DictWriter(fh, fieldnames=fields, extrasaction="ignore", lineterminator="\n")
        if new:
            w.writeheader()
        for r in rows:
            w.writerow({k: ("" if r.get(k) is None else repr(r[k]) if isinstance(r.get(k), float) else r[k]) for k in fields})


# ---------------------------------------------------------------- autoencoder


@dataclass(frozen=True)
class DecoderConfig:
    hidden: int = 64
    learning_rate: float = 3e-3
    epochs: int = 300
    batch_size: int = 64
    seed: int = 0
    heldout_fraction: float = 0.1
    mse_threshold: float = 1e-3
    max_rank_failure: float = 0.01

    @classmethod
    def from_dict(cls, doc: dict) -> DecoderConfig:
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(doc) - names
        if unknown:
            raise ConfigError(f"unknown decoder config keys: {sorted(unknown)}")
        return cls(**doc)


def train_decoder(ds: ManifoldDataset, k: int, cfg: DecoderConfig = DecoderConfig()) -> tuple[Generator, MLP, dict]:
    """Train a tanh autoencoder with a ``k``-dimensional bottleneck.

    Returns ``(decoder, encoder, metrics)``. ``metrics`` holds train and
    held-out reconstruction MSE and the fraction of training points where the
    decoder Jacobian is rank deficient.
    """
    rng = np.random.default_rng(cfg.seed)
    d = ds.ambient_dim
    train, held = ds.split(cfg.heldout_fraction, cfg.seed)
    enc = MLP.create([d, cfg.hidden, k], "tanh", rng)
    dec = MLP.create([k, cfg.hidden, d], "tanh", rng)
    params = {f"enc.{n}": p for n, p in enc.parameters().items()}
    params.update({f"dec.{n}": p for n, p in dec.parameters().items()})
    names = sorted(params)
    opt = Adam(params, cfg.learning_rate)
    n = len(train)

    def mse(X) -> float:
        with ad.no_grad():
            R = dec(enc(X)).data
        return float(np.mean((R - X) ** 2))

    for epoch in range(cfg.epochs):
        perm = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            X = Tensor(train.x[perm[start : start + cfg.batch_size]])
            diff = dec(enc(X)) - X
            loss = (diff * diff).mean()
            if not np.isfinite(loss.data):
                raise TrainingDivergedError(epoch, float(loss.data))
            grads = ad.grad(loss, [params[k_] for k_ in names])
            opt.step({k_: g.data for k_, g in zip(names, grads)})

    decoder = Generator(GeneratorKind.DECODER, dec)
    with ad.no_grad():
        Z = enc(train.x).data
    _, ok = tangent_bases(decoder.jacobians(Z))
    fail = float(np.mean(~ok))
    if fail > cfg.max_rank_failure:
        raise DegenerateDecoderError(f"decoder Jacobian rank deficient at {fail:.1%} of training points")
    metrics = {"train_mse": mse(train.x), "heldout_mse": mse(held.x) if len(held) else None, "rank_failure": fail}
    if metrics["heldout_mse"] is not None and metrics["heldout_mse"] > cfg.mse_threshold:
        log.warning("held-out reconstruction MSE %.3e above threshold %.1e", metrics["heldout_mse"], cfg.mse_threshold)
    return decoder, enc, metrics
