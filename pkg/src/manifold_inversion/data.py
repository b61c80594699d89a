"""Synthetic private/auxiliary datasets on a known generator manifold.

Both splits share one oracle generator but occupy disjoint class regions of
its latent space, and their label sets never intersect.

On-disk layout of a dataset directory::

    manifest.json    metadata (see ``REQUIRED_FIELDS``)
    samples.f64le    n*d float64 little-endian, row-major x
    labels.u32le     n uint32 little-endian
    latents.f64le    n*k float64 little-endian, row-major z
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DatasetFormatError, DimensionError, MissingFieldError
from .models import Generator, oracle_generator, sample_generator

FORMAT_VERSION = 1
REQUIRED_FIELDS = (
    "format_version",
    "role",
    "num_samples",
    "ambient_dim",
    "latent_dim",
    "noise_sigma",
    "generator_seed",
    "label_set",
)


@dataclass(frozen=True)
class DatasetConfig:
    latent_dim: int = 4
    grid: int = 8
    generator_hidden: int = 64
    generator_input_scale: float = 2.5
    generator_output_scale: float = 1.0
    private_classes: int = 8
    aux_classes: int = 8
    samples_per_class: int = 200
    noise_sigma: float = 0.0
    separation: float = 1.0
    center_radius: float = 2.0
    cluster_std: float = 0.3
    generator_seed: int | None = None

    @property
    def ambient_dim(self) -> int:
        return self.grid * self.grid

    @classmethod
    def from_dict(cls, doc: dict) -> DatasetConfig:
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(doc) - names
        if unknown:
            raise ConfigError(f"unknown dataset config keys: {sorted(unknown)}")
        return cls(**doc)


@dataclass
class ManifoldDataset:
    x: np.ndarray
    y: np.ndarray
    z: np.ndarray
    generator_seed: int
    noise_sigma: float
    role: str
    label_set: list[int] = field(default_factory=list)

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.z = np.asarray(self.z, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        n = len(self.y)
        if self.x.ndim != 2 or self.x.shape[0] != n or self.z.ndim != 2 or self.z.shape[0] != n:
            raise DimensionError(f"inconsistent sample counts: x {self.x.shape}, y {self.y.shape}, z {self.z.shape}")
        if self.role not in ("private", "auxiliary"):
            raise ValueError(f"role must be 'private' or 'auxiliary', got {self.role!r}")
        if not self.label_set:
            self.label_set = sorted(set(self.y.tolist()))
        if not set(self.y.tolist()) <= set(self.label_set):
            raise ValueError("labels outside the declared label set")

    def __len__(self) -> int:
        return len(self.y)

    @property
    def ambient_dim(self) -> int:
        return self.x.shape[1]

    @property
    def latent_dim(self) -> int:
        return self.z.shape[1]

    @property
    def samples(self):
        return list(zip(self.x, self.y.tolist(), self.z))

    def subset(self, idx) -> ManifoldDataset:
        idx = np.asarray(idx)
        return ManifoldDataset(
            self.x[idx], self.y[idx], self.z[idx], self.generator_seed, self.noise_sigma, self.role, list(self.label_set)
        )

    def split(self, test_fraction: float, seed: int) -> tuple[ManifoldDataset, ManifoldDataset]:
        """Stratified split into (train, test)."""
        rng = np.random.default_rng(seed)
        train, test = [], []
        for label in self.label_set:
            idx = np.flatnonzero(self.y == label)
            idx = idx[rng.permutation(len(idx))]
            cut = int(round(len(idx) * test_fraction))
            test.extend(idx[:cut])
            train.extend(idx[cut:])
        return self.subset(np.sort(train)), self.subset(np.sort(test))


def build_generator(config: DatasetConfig, seed: int) -> Generator:
    """The oracle generator shared by both splits of ``make_dataset(config, seed)``."""
    gseed = config.generator_seed if config.generator_seed is not None else seed
    return oracle_generator(
        config.latent_dim,
        config.grid,
        config.generator_hidden,
        gseed,
        input_scale=config.generator_input_scale,
        output_scale=config.generator_output_scale,
    )


def _cluster_centers(count: int, dim: int, separation: float, radius: float, rng, max_tries: int = 20000):
    centers: list[np.ndarray] = []
    for _ in range(max_tries):
        c = rng.standard_normal(dim)
        c *= radius * rng.uniform() ** (1.0 / dim) / np.linalg.norm(c)
        if all(np.linalg.norm(c - o) >= separation for o in centers):
            centers.append(c)
            if len(centers) == count:
                return np.array(centers)
    raise ConfigError(
        f"could not place {count} centers with separation {separation} inside radius {radius}; "
        "lower the separation or raise center_radius"
    )


def make_dataset(config: DatasetConfig, seed: int) -> tuple[ManifoldDataset, ManifoldDataset]:
    """Deterministic (private, auxiliary) pair on one oracle manifold.

    Class latents are ``center + offsets`` with the offsets re-centred, so the
    latent class means equal the cluster centers exactly and are pairwise at
    least ``config.separation`` apart.
    """
    if config.latent_dim < 1 or config.grid < 1 or config.latent_dim > config.ambient_dim:
        raise DimensionError(f"latent dim {config.latent_dim} incompatible with ambient dim {config.ambient_dim}")
    if config.noise_sigma < 0:
        raise ConfigError("noise_sigma must be >= 0")
    gen = build_generator(config, seed)
    if gen.ambient_dim != config.ambient_dim or gen.latent_dim != config.latent_dim:
        raise DimensionError("oracle generator dimensions disagree with the dataset config")

    rng = np.random.default_rng([seed, 1])
    total = config.private_classes + config.aux_classes
    centers = _cluster_centers(total, config.latent_dim, config.separation, config.center_radius, rng)
    centers = centers[rng.permutation(total)]

    splits = []
    for role, labels in (
        ("private", range(config.private_classes)),
        ("auxiliary", range(config.private_classes, total)),
    ):
        zs, ys = [], []
        for label in labels:
            off = rng.normal(0.0, config.cluster_std, size=(config.samples_per_class, config.latent_dim))
            off -= off.mean(axis=0)
            zs.append(centers[label] + off)
            ys.append(np.full(config.samples_per_class, label))
        z = np.concatenate(zs)
        x = sample_generator(gen, z)
        if config.noise_sigma > 0:
            x = x + rng.normal(0.0, config.noise_sigma, size=x.shape)
        splits.append(
            ManifoldDataset(x, np.concatenate(ys), z, gen_seed(config, seed), config.noise_sigma, role, list(labels))
        )
    private, aux = splits
    if set(private.label_set) & set(aux.label_set):
        raise AssertionError("private and auxiliary label sets intersect")
    return private, aux


def gen_seed(config: DatasetConfig, seed: int) -> int:
    return config.generator_seed if config.generator_seed is not None else seed


def save_dataset(ds: ManifoldDataset, path: str | Path, extra: dict | None = None) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format_version": FORMAT_VERSION,
        "role": ds.role,
        "num_samples": len(ds),
        "ambient_dim": ds.ambient_dim,
        "latent_dim": ds.latent_dim,
        "noise_sigma": ds.noise_sigma,
        "generator_seed": ds.generator_seed,
        "label_set": list(map(int, ds.label_set)),
    }
    if extra:
        manifest.update(extra)
    (path / "samples.f64le").write_bytes(ds.x.astype("<f8").tobytes())
    (path / "labels.u32le").write_bytes(ds.y.astype("<u4").tobytes())
    (path / "latents.f64le").write_bytes(ds.z.astype("<f8").tobytes())
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def _read_block(path: Path, dtype: str, count: int) -> np.ndarray:
    if not path.exists():
        raise DatasetFormatError(f"missing payload file {path.name}")
    raw = path.read_bytes()
    need = count * np.dtype(dtype).itemsize
    if len(raw) != need:
        raise DatasetFormatError(f"{path.name}: expected {need} bytes, found {len(raw)}", offset=min(len(raw), need))
    return np.frombuffer(raw, dtype=dtype).copy()


def load_dataset(path: str | Path) -> ManifoldDataset:
    """Load a dataset directory. Nothing is returned unless every check passes."""
    path = Path(path)
    try:
        text = (path / "manifest.json").read_text()
    except FileNotFoundError as exc:
        raise DatasetFormatError(f"no manifest.json in {path}") from exc
    try:
        manifest = json.loads(text)
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(f"manifest.json is not valid JSON: {exc.msg}", offset=exc.pos) from exc
    for name in REQUIRED_FIELDS:
        if name not in manifest:
            raise MissingFieldError(name)
    if manifest["format_version"] != FORMAT_VERSION:
        raise DatasetFormatError(f"unsupported format_version {manifest['format_version']}")
    n, d, k = int(manifest["num_samples"]), int(manifest["ambient_dim"]), int(manifest["latent_dim"])
    x = _read_block(path / "samples.f64le", "<f8", n * d).reshape(n, d)
    y = _read_block(path / "labels.u32le", "<u4", n).astype(np.int64)
    z = _read_block(path / "latents.f64le", "<f8", n * k).reshape(n, k)
    return ManifoldDataset(
        x, y, z, int(manifest["generator_seed"]), float(manifest["noise_sigma"]), manifest["role"],
        list(manifest["label_set"]),
    )
