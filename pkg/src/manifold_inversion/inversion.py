"""Generative model inversion in latent space, with optional gradient smoothing.

Each step evaluates ``x = G(z)``, takes the ambient gradient of the class loss
(optionally averaged over Gaussian perturbations or image transformations of
``x``), pulls it back through ``J_G(z)^T`` and adds the gradient of the
Gaussian latent prior ``lam * |z|^2 / 2``.
"""

from __future__ import annotations

import dataclasses
import enum
import functools
import json
import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DimensionError
from .geometry import alignment_scores, tangent_bases
from .models import Classifier, Generator, LossKind, loss_tensor

log = logging.getLogger(__name__)


class Smoothing(str, enum.Enum):
    NONE = "none"
    PAA = "paa"
    TAA = "taa"


# ---------------------------------------------------------------- transforms


def _resize_matrix(src: int, dst: int) -> np.ndarray:
    """1-D bilinear (align-corners) interpolation from ``src`` to ``dst`` samples."""
    R = np.zeros((dst, src))
    if src == 1:
        R[:, 0] = 1.0
        return R
    pos = np.arange(dst) * (src - 1) / max(dst - 1, 1)
    lo = np.minimum(np.floor(pos).astype(int), src - 2)
    frac = pos - lo
    R[np.arange(dst), lo] = 1.0 - frac
    R[np.arange(dst), lo + 1] += frac
    return R


def _shift(img: np.ndarray, dy: int, dx: int) -> np.ndarray:
    g = img.shape[0]
    out = np.zeros_like(img)
    ys, yd = slice(max(0, -dy), g - max(0, dy)), slice(max(0, dy), g - max(0, -dy))
    xs, xd = slice(max(0, -dx), g - max(0, dx)), slice(max(0, dx), g - max(0, -dx))
    out[yd, xd] = img[ys, xs]
    return out


@dataclass(frozen=True)
class TransformSet:
    """Random image transformations on a ``grid x grid`` image, all linear.

    A draw crops a ``(grid-1)`` square at a random corner and resizes it back
    (with probability ``crop_prob``), then mirrors horizontally (with
    probability ``flip_prob``), then translates by a uniformly chosen
    ``(dy, dx)`` from ``shifts x shifts`` with zero padding. Every composite is
    cached as a dense ``d x d`` matrix.
    """

    grid: int
    flip_prob: float = 0.5
    shifts: tuple[int, ...] = (-1, 0, 1)
    crop_prob: float = 0.25

    def __post_init__(self):
        object.__setattr__(self, "shifts", tuple(int(s) for s in self.shifts))
        if self.grid < 2:
            raise ConfigError("transform grid must be at least 2")
        if not (0 <= self.flip_prob <= 1 and 0 <= self.crop_prob <= 1):
            raise ConfigError("transform probabilities must lie in [0, 1]")
        if not self.shifts or any(abs(s) >= self.grid for s in self.shifts):
            raise ConfigError(f"shifts {self.shifts} incompatible with grid {self.grid}")
        object.__setattr__(self, "_matrices", self._build())

    @classmethod
    def identity(cls, grid: int) -> TransformSet:
        return cls(grid, flip_prob=0.0, shifts=(0,), crop_prob=0.0)

    @classmethod
    def from_dict(cls, doc: dict) -> TransformSet:
        return cls(**doc)

    def to_dict(self) -> dict:
        return {"grid": self.grid, "flip_prob": self.flip_prob, "shifts": list(self.shifts), "crop_prob": self.crop_prob}

    @property
    def dim(self) -> int:
        return self.grid * self.grid

    @property
    def matrices(self) -> np.ndarray:
        """``(5, 2, S*S, d, d)``: crop state (none or corner 0..3), flip, shift pair."""
        return self._matrices

    def _op(self, img, crop, flip, dy, dx):
        g = self.grid
        if crop:
            oy, ox = divmod(crop - 1, 2)
            R = _resize_matrix(g - 1, g)
            img = R @ img[oy : oy + g - 1, ox : ox + g - 1] @ R.T
        if flip:
            img = img[:, ::-1]
        return _shift(img, dy, dx)

    def _build(self) -> np.ndarray:
        g, d = self.grid, self.grid * self.grid
        basis = np.eye(d).reshape(d, g, g)
        pairs = [(dy, dx) for dy in self.shifts for dx in self.shifts]
        M = np.empty((5, 2, len(pairs), d, d))
        for crop in range(5):
            for flip in range(2):
                for s, (dy, dx) in enumerate(pairs):
                    cols = [self._op(e, crop, flip, dy, dx).ravel() for e in basis]
                    M[crop, flip, s] = np.stack(cols, axis=1)
        return M.reshape(-1, d, d)

    def sample(self, K: int, rng: np.random.Generator) -> np.ndarray:
        """Indices into the flattened matrix stack for ``K`` draws."""
        crop = np.where(rng.random(K) < self.crop_prob, rng.integers(1, 5, K), 0)
        flip = (rng.random(K) < self.flip_prob).astype(int)
        s = rng.integers(0, len(self.shifts) ** 2, K)
        return (crop * 2 + flip) * len(self.shifts) ** 2 + s

    def apply(self, index: int, x) -> np.ndarray:
        return self._matrices[index] @ np.asarray(x, dtype=np.float64)


# ---------------------------------------------------------------- config and records


@dataclass(frozen=True)
class InversionConfig:
    steps: int = 100
    step_size: float = 0.05
    lam: float = 0.01
    loss_kind: LossKind = LossKind.CE
    smoothing: Smoothing = Smoothing.NONE
    K: int = 50
    alpha: float = 0.05
    transforms: dict = field(default_factory=lambda: {"flip_prob": 0.5, "shifts": [-1, 0, 1], "crop_prob": 0.25})
    track_every: int = 10
    seed: int = 0
    optimizer: str = "gd"
    init_scale: float = 1.0

    def __post_init__(self):
        try:
            object.__setattr__(self, "loss_kind", LossKind(self.loss_kind))
            object.__setattr__(self, "smoothing", Smoothing(self.smoothing))
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if self.steps < 1 or self.K < 1 or self.track_every < 1:
            raise ConfigError("steps, K and track_every must all be >= 1")
        if self.alpha < 0 or self.lam < 0:
            raise ConfigError("alpha and lam must be >= 0")
        if self.optimizer not in ("gd", "adam"):
            raise ConfigError(f"optimizer must be 'gd' or 'adam', got {self.optimizer!r}")

    @classmethod
    def from_dict(cls, doc: dict) -> InversionConfig:
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(doc) - names
        if unknown:
            raise ConfigError(f"unknown inversion config keys: {sorted(unknown)}")
        return cls(**doc)

    def to_dict(self) -> dict:
        doc = dataclasses.asdict(self)
        doc["loss_kind"] = self.loss_kind.value
        doc["smoothing"] = self.smoothing.value
        return doc

    def transform_set(self, grid: int) -> TransformSet:
        t = self.transforms
        return _cached_transform_set(grid, t["flip_prob"], tuple(t["shifts"]), t["crop_prob"])


@functools.lru_cache(maxsize=8)
def _cached_transform_set(grid, flip_prob, shifts, crop_prob) -> TransformSet:
    return TransformSet(grid, flip_prob, shifts, crop_prob)


@dataclass
class StepRecord:
    """State at the start of step ``step`` (1-based), before its update.

    ``as_inv`` scores the gradient that drives the update (the smoothed one
    when smoothing is on); ``as_raw`` scores the plain loss gradient.
    """

    step: int
    z: np.ndarray
    loss: float
    confidence: float
    as_inv: float | None = None
    as_raw: float | None = None
    tracked: bool = False

    def to_dict(self) -> dict:
        return {
            "step": self.step,
            "tracked": self.tracked,
            "z": self.z.tolist(),
            "loss": self.loss,
            "confidence": self.confidence,
            "as_inv": self.as_inv,
            "as_raw": self.as_raw,
        }


@dataclass
class InversionRun:
    target: int
    seed: int
    records: list[StepRecord] = field(default_factory=list)
    final_x: np.ndarray | None = None
    final_z: np.ndarray | None = None
    final_loss: float | None = None
    final_confidence: float | None = None
    aborted_at: int | None = None

    @property
    def completed(self) -> bool:
        return self.aborted_at is None and self.final_x is not None

    def tracked(self) -> list[StepRecord]:
        return [r for r in self.records if r.as_inv is not None]

    def mean_as_inv(self) -> float | None:
        vals = [r.as_inv for r in self.tracked()]
        return float(np.mean(vals)) if vals else None

    def to_dict(self) -> dict:
        return {
            "target": self.target,
            "seed": self.seed,
            "aborted_at": self.aborted_at,
            "final_loss": self.final_loss,
            "final_confidence": self.final_confidence,
            "final_x": None if self.final_x is None else self.final_x.tolist(),
            "final_z": None if self.final_z is None else self.final_z.tolist(),
            "records": [r.to_dict() for r in self.records],
        }

    def to_json(self, **extra) -> str:
        doc = dict(extra)
        doc.update(self.to_dict())
        return json.dumps(doc, sort_keys=True)


# ---------------------------------------------------------------- losses


def _class_losses(c: Classifier, X: Tensor, y: np.ndarray, kind: LossKind) -> tuple[Tensor, Tensor]:
    logits = c.logits(X)
    return loss_tensor(logits, y, kind), logits


def inversion_loss(z, y: int, c: Classifier, g: Generator, lam: float, kind: LossKind = LossKind.CE) -> float:
    """Class loss at ``G(z)`` plus ``lam * |z|^2 / 2``."""
    z = np.asarray(z, dtype=np.float64)
    if z.shape != (g.latent_dim,):
        raise DimensionError(f"latent shape {z.shape} != ({g.latent_dim},)")
    with ad.no_grad():
        x = g(z[None])
        cls = loss_tensor(c.logits(x), [y], kind).data[0]
    return float(cls + lam * 0.5 * np.dot(z, z))


def inversion_loss_gradient(z, y: int, c: Classifier, g: Generator, lam: float, kind: LossKind = LossKind.CE):
    """Gradient of ``inversion_loss`` w.r.t. ``z`` by direct differentiation through ``G``."""
    zt = Tensor(np.asarray(z, dtype=np.float64)[None], requires_grad=True)
    cls = loss_tensor(c.logits(g(zt)), [y], kind)
    total = cls.sum() + (zt * zt).sum() * (0.5 * lam)
    return ad.grad(total, zt).data[0]


def _loss_grads(lossfn, X: np.ndarray) -> np.ndarray:
    xt = Tensor(X, requires_grad=True)
    return ad.grad(lossfn(xt).sum(), xt).data


# ---------------------------------------------------------------- smoothing


def _paa_rows(X: np.ndarray, base: np.ndarray, lossfn, K: int, alpha: float, rngs) -> np.ndarray:
    n, d = X.shape
    sigma = alpha * (X.max(axis=1) - X.min(axis=1))
    out = base.copy()
    live = np.flatnonzero(sigma > 0)
    for i in np.flatnonzero(sigma <= 0):
        log.info("row %d: zero perturbation scale, using the plain gradient", i)
    if live.size == 0:
        return out
    noise = np.stack([rngs[i].normal(0.0, sigma[i], size=(K, d)) for i in live])
    P = (X[live, None, :] + noise).reshape(-1, d)
    grads = _loss_grads(lambda t: lossfn(t, np.repeat(live, K)), P).reshape(live.size, K, d)
    out[live] = grads.mean(axis=1)
    return out


def _taa_rows(X: np.ndarray, lossfn, K: int, tset: TransformSet, rngs) -> np.ndarray:
    n, d = X.shape
    if d != tset.dim:
        raise DimensionError(f"transform set acts on {tset.dim}-pixel images, input has dimension {d}")
    owner, tid, weight = [], [], []
    for i in range(n):
        ids, counts = np.unique(tset.sample(K, rngs[i]), return_counts=True)
        owner.append(np.full(ids.size, i))
        tid.append(ids)
        weight.append(counts / K)
    owner, tid, weight = np.concatenate(owner), np.concatenate(tid), np.concatenate(weight)
    P = np.einsum("mij,mj->mi", tset.matrices[tid], X[owner])
    grads = _loss_grads(lambda t: lossfn(t, owner), P)
    out = np.zeros((n, d))
    np.add.at(out, owner, grads * weight[:, None])
    return out


def _as_rows_fn(lossfn):
    return lambda t, rows: lossfn(t)


def paa_gradient(x, lossfn, K: int, alpha: float, rng: np.random.Generator) -> np.ndarray:
    """Mean of ``grad L(x + eps)`` over ``K`` draws, ``eps ~ N(0, sigma^2 I)``.

    ``sigma = alpha * (max(x) - min(x))``; with ``sigma = 0`` the plain
    gradient is returned. ``lossfn`` maps an ``(m, d)`` Tensor to ``m`` losses.
    """
    if K < 1 or alpha < 0:
        raise ConfigError("need K >= 1 and alpha >= 0")
    X = np.asarray(x, dtype=np.float64)[None]
    base = _loss_grads(lossfn, X)
    return _paa_rows(X, base, _as_rows_fn(lossfn), K, alpha, [rng])[0]


def taa_gradient(x, lossfn, K: int, tset: TransformSet, rng: np.random.Generator) -> np.ndarray:
    """Mean of ``grad L`` evaluated at ``tau(x)`` over ``K`` sampled transforms.

    Each gradient is taken with respect to the transformed input itself, not
    pulled back through ``tau``. Repeated draws are evaluated once and weighted
    by their multiplicity.
    """
    if K < 1:
        raise ConfigError("need K >= 1")
    X = np.asarray(x, dtype=np.float64)[None]
    return _taa_rows(X, _as_rows_fn(lossfn), K, tset, [rng])[0]


# ---------------------------------------------------------------- inversion loop


def run_rng(cfg: InversionConfig, seed: int) -> np.random.Generator:
    return np.random.default_rng([cfg.seed, int(seed)])


def _grid(d: int) -> int:
    g = int(round(np.sqrt(d)))
    if g * g != d:
        raise DimensionError(f"ambient dim {d} is not a square image")
    return g


def invert_batch(c: Classifier, g: Generator, targets, cfg: InversionConfig, seeds=None) -> list[InversionRun]:
    """Independent inversion runs for ``targets[i]`` with per-run random streams.

    Run ``i`` draws its initial latent and all smoothing noise from
    ``default_rng([cfg.seed, seeds[i]])``, so its trajectory does not depend on
    which other runs share the batch (up to floating-point summation order in
    the shared matrix products).
    """
    targets = np.atleast_1d(np.asarray(targets)).astype(np.int64)
    n = targets.size
    seeds = np.arange(n) if seeds is None else np.atleast_1d(np.asarray(seeds)).astype(np.int64)
    if seeds.size != n:
        raise ValueError("need one seed per target")
    if np.any((targets < 0) | (targets >= c.num_classes)):
        raise ValueError(f"target label out of range [0, {c.num_classes})")
    if g.ambient_dim != c.input_dim:
        raise DimensionError(f"generator emits {g.ambient_dim}-dim images, classifier expects {c.input_dim}")
    tset = cfg.transform_set(_grid(g.ambient_dim)) if cfg.smoothing is Smoothing.TAA else None

    rngs = [run_rng(cfg, s) for s in seeds]
    Z = np.stack([r.normal(0.0, cfg.init_scale, g.latent_dim) for r in rngs])
    runs = [InversionRun(int(t), int(s)) for t, s in zip(targets, seeds)]
    active = np.ones(n, dtype=bool)
    m = np.zeros_like(Z)
    v = np.zeros_like(Z)

    for step in range(1, cfg.steps + 1):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        tracked = step % cfg.track_every == 0
        y = targets[idx]
        zt = Tensor(Z[idx], requires_grad=True)
        xt = g(zt)
        X = xt.data
        xin = Tensor(X, requires_grad=True)
        losses, logits = _class_losses(c, xin, y, cfg.loss_kind)
        raw = ad.grad(losses.sum(), xin).data
        with ad.no_grad():
            conf = np.exp(ad.log_softmax(logits.detach(), axis=1).data[np.arange(idx.size), y])
        bad = ~np.isfinite(losses.data)
        if bad.any():
            for j in np.flatnonzero(bad):
                i = idx[j]
                runs[i].aborted_at = step
                active[i] = False
                log.warning("run %d (class %d): non-finite loss at step %d, aborted", i, targets[i], step)
            keep = ~bad
            idx, y, X, raw, conf = idx[keep], y[keep], X[keep], raw[keep], conf[keep]
            loss_vals = losses.data[keep]
            if idx.size == 0:
                break
            zt = Tensor(Z[idx], requires_grad=True)
            xt = g(zt)
        else:
            loss_vals = losses.data

        def lossfn(t, rows, y=y):
            return loss_tensor(c.logits(t), y[rows], cfg.loss_kind)

        if cfg.smoothing is Smoothing.PAA:
            amb = _paa_rows(X, raw, lossfn, cfg.K, cfg.alpha, [rngs[i] for i in idx])
        elif cfg.smoothing is Smoothing.TAA:
            amb = _taa_rows(X, lossfn, cfg.K, tset, [rngs[i] for i in idx])
        else:
            amb = raw

        as_inv = as_raw = [None] * idx.size
        if tracked:
            bases, ok = tangent_bases(g.jacobians(Z[idx]))
            s_inv = alignment_scores(bases, amb)
            s_raw = alignment_scores(bases, raw)
            as_inv = [float(a) if o and np.isfinite(a) else None for a, o in zip(s_inv, ok)]
            as_raw = [float(a) if o and np.isfinite(a) else None for a, o in zip(s_raw, ok)]

        for j, i in enumerate(idx):
            runs[i].records.append(
                StepRecord(step, Z[i].copy(), float(loss_vals[j]), float(conf[j]), as_inv[j], as_raw[j], tracked)
            )

        direction = ad.grad(xt, zt, amb).data + cfg.lam * Z[idx]
        if cfg.optimizer == "adam":
            b1, b2 = 0.9, 0.999
            m[idx] = b1 * m[idx] + (1 - b1) * direction
            v[idx] = b2 * v[idx] + (1 - b2) * direction**2
            mh = m[idx] / (1 - b1**step)
            vh = v[idx] / (1 - b2**step)
            Z[idx] = Z[idx] - cfg.step_size * mh / (np.sqrt(vh) + 1e-8)
        else:
            Z[idx] = Z[idx] - cfg.step_size * direction

    done = np.flatnonzero(active)
    if done.size:
        with ad.no_grad():
            Xf = g(Z[done]).data
            logits = c.logits(Xf)
            lf = loss_tensor(logits, targets[done], cfg.loss_kind).data
            cf = np.exp(ad.log_softmax(logits, axis=1).data[np.arange(done.size), targets[done]])
        for j, i in enumerate(done):
            runs[i].final_x = Xf[j]
            runs[i].final_z = Z[i].copy()
            runs[i].final_loss = float(lf[j])
            runs[i].final_confidence = float(cf[j])
    return runs


def invert(c: Classifier, g: Generator, y: int, cfg: InversionConfig, seed: int = 0) -> InversionRun:
    """Single inversion run toward class ``y``."""
    return invert_batch(c, g, [y], cfg, [seed])[0]


def alignment_dynamics(runs, by_class: bool = False):
    """Mean tracked alignment score and mean confidence per tracked step.

    Returns a list of ``(step, mean_as_inv, mean_confidence)``; with
    ``by_class`` a dict from target class to such a list. Missing scores are
    left out of the mean; a step with none yields NaN.
    """
    runs = list(runs)
    if by_class:
        classes = sorted({r.target for r in runs})
        return {k: alignment_dynamics([r for r in runs if r.target == k]) for k in classes}
    steps: dict[int, tuple[list, list]] = {}
    for run in runs:
        for rec in run.records:
            if not rec.tracked:
                continue
            a, cf = steps.setdefault(rec.step, ([], []))
            if rec.as_inv is not None:
                a.append(rec.as_inv)
            cf.append(rec.confidence)
    if not steps:
        raise ValueError("runs have no tracked records")
    out = []
    for s in sorted(steps):
        a, cf = steps[s]
        out.append((s, float(np.mean(a)) if a else float("nan"), float(np.mean(cf))))
    return out

