"""Classifiers, generators and the inversion-time classification losses."""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import MLP, Tensor
from .errors import DegenerateTangentError, DimensionError
from .geometry import RANK_TOL, thin_svd


class LossKind(str, enum.Enum):
    CE = "cross-entropy"
    LOGIT = "logit"


@dataclass
class Classifier:
    net: MLP
    num_classes: int

    def __post_init__(self):
        if self.net.output_dim != self.num_classes:
            raise DimensionError(f"net has {self.net.output_dim} outputs for {self.num_classes} classes")

    @property
    def input_dim(self) -> int:
        return self.net.input_dim

    def logits(self, x) -> Tensor:
        return self.net(x)

    def predict(self, X) -> np.ndarray:
        with ad.no_grad():
            return np.argmax(self.net(np.atleast_2d(X)).data, axis=1)

    def copy(self) -> Classifier:
        return Classifier(self.net.copy(), self.num_classes)


def _check_labels(y, num_classes: int) -> np.ndarray:
    y = np.atleast_1d(np.asarray(y))
    if y.dtype.kind not in "iu":
        raise ValueError(f"labels must be integers, got dtype {y.dtype}")
    if np.any((y < 0) | (y >= num_classes)):
        raise ValueError(f"label out of range [0, {num_classes})")
    return y.astype(np.int64)


def loss_tensor(logits: Tensor, y, kind: LossKind) -> Tensor:
    """Per-sample classification loss for a ``(n, C)`` batch of logits."""
    kind = LossKind(kind)
    y = _check_labels(y, logits.shape[-1])
    rows = np.arange(logits.shape[0])
    if kind is LossKind.CE:
        return -ad.log_softmax(logits, axis=1)[rows, y]
    return -logits[rows, y]


def class_loss(c: Classifier, x, y: int, kind: LossKind) -> float:
    """Scalar loss of a single input; lower means more evidence for class ``y``."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (c.input_dim,):
        raise DimensionError(f"expected input shape ({c.input_dim},), got {x.shape}")
    _check_labels(y, c.num_classes)
    with ad.no_grad():
        return float(loss_tensor(c.logits(x[None]), [y], kind).data[0])


def loss_gradient(c: Classifier, X, y, kind: LossKind) -> np.ndarray:
    """Rows of ``grad_x L`` for a batch of inputs (one reverse pass)."""
    xt = Tensor(np.atleast_2d(X), requires_grad=True)
    losses = loss_tensor(c.logits(xt), y, kind)
    return ad.grad(losses.sum(), xt).data


def input_gradients(c: Classifier, x) -> np.ndarray:
    """``(C, d)`` matrix whose row ``i`` is the gradient of logit ``i`` w.r.t. the input."""
    return ad.jacobian(c.net, x)


def loss_weights(logits: np.ndarray, y: int, kind: LossKind) -> np.ndarray:
    """``dL/df_i`` for a single logit vector."""
    kind = LossKind(kind)
    w = np.zeros(logits.shape[-1])
    if kind is LossKind.CE:
        shifted = logits - logits.max()
        w = np.exp(shifted) / np.exp(shifted).sum()
    w[y] -= 1.0
    return w


def decompose_loss_gradient(c: Classifier, x, y: int, kind: LossKind) -> tuple[np.ndarray, np.ndarray]:
    """Loss gradient rebuilt as the weighted sum of per-logit input gradients.

    Returns ``(weights, reconstructed)`` with ``weights[i] = dL/df_i`` and
    ``reconstructed = weights @ input_gradients(c, x)``.
    """
    x = np.asarray(x, dtype=np.float64)
    _check_labels(y, c.num_classes)
    with ad.no_grad():
        logits = c.logits(x).data
    weights = loss_weights(logits, y, kind)
    return weights, weights @ input_gradients(c, x)


class GeneratorKind(str, enum.Enum):
    ORACLE = "oracle-analytic"
    DECODER = "learned-decoder"


@dataclass
class Generator:
    kind: GeneratorKind
    net: MLP

    @property
    def latent_dim(self) -> int:
        return self.net.input_dim

    @property
    def ambient_dim(self) -> int:
        return self.net.output_dim

    def __call__(self, z) -> Tensor:
        return self.net(z)

    def jacobians(self, Z) -> np.ndarray:
        """``(n, d, k)`` Jacobians at each latent row."""
        return ad.batch_jacobian(self.net, Z)


def sample_generator(g: Generator, z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-1] != g.latent_dim:
        raise DimensionError(f"latent has length {z.shape[-1]}, generator expects {g.latent_dim}")
    with ad.no_grad():
        return g(z).data


def check_full_rank(g: Generator, n: int = 100, seed: int = 0, scale: float = 1.0, rank_tol: float = RANK_TOL) -> None:
    """Raise ``DegenerateTangentError`` unless the Jacobian has rank k at ``n`` random latents."""
    Z = np.random.default_rng(seed).normal(0.0, scale, size=(n, g.latent_dim))
    _, sv, _ = thin_svd(g.jacobians(Z))
    bad = np.flatnonzero(sv[:, -1] <= rank_tol * sv[:, 0])
    if bad.size:
        raise DegenerateTangentError(sv[bad[0]], rank_tol)


def smooth_patterns(grid: int, count: int, rng: np.random.Generator, width: float = 1.5) -> np.ndarray:
    """``count`` unit-norm, spatially smooth ``grid x grid`` patterns, flattened to rows."""
    r = np.arange(grid)
    # Gaussian blur as a row-normalised banded matrix, applied along both axes
    B = np.exp(-0.5 * ((r[:, None] - r[None, :]) / width) ** 2)
    B /= B.sum(axis=1, keepdims=True)
    noise = rng.standard_normal((count, grid, grid))
    blur = B @ noise @ B.T
    flat = blur.reshape(count, grid * grid)
    flat -= flat.mean(axis=1, keepdims=True)
    return flat / np.linalg.norm(flat, axis=1, keepdims=True)


def oracle_generator(
    latent_dim: int,
    grid: int,
    hidden: int,
    seed: int,
    input_scale: float = 0.6,
    output_scale: float = 1.0,
    basepoint=None,
) -> Generator:
    """Frozen 2-layer tanh map ``z -> A tanh(W z) + basepoint`` onto ``grid x grid`` images.

    Columns of ``A`` are smooth random images, so the manifold consists of
    smooth images and ``G(0)`` is exactly ``basepoint``.
    """
    rng = np.random.default_rng(seed)
    d = grid * grid
    W = rng.normal(0.0, input_scale, size=(hidden, latent_dim))
    A = smooth_patterns(grid, hidden, rng).T * output_scale
    base = np.zeros(d) if basepoint is None else np.asarray(basepoint, dtype=np.float64)
    if base.shape != (d,):
        raise DimensionError(f"basepoint shape {base.shape} != ({d},)")
    layers = [
        {"type": "linear", "in": latent_dim, "out": hidden},
        {"type": "tanh"},
        {"type": "linear", "in": hidden, "out": d},
    ]
    params = {"0.weight": W, "0.bias": np.zeros(hidden), "2.weight": A, "2.bias": base}
    g = Generator(GeneratorKind.ORACLE, MLP(layers, params))
    check_full_rank(g, seed=seed)
    return g
