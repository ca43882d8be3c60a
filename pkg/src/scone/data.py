"""Datasets: synthetic shift generators, IDX ingestion, wild-mixture sampling.

The wild distribution is a three-way mixture: with probability ``1 - pi_c -
pi_s`` an example is in-distribution, with ``pi_c`` covariate-shifted (same
label space, shifted inputs) and with ``pi_s`` semantic-shifted (unknown
classes). Training code only ever sees :class:`WildBatch` (features, no
labels, no provenance); component tags travel separately for evaluation.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, FormatError

IDX_MAGIC_LABELS = 0x00000801
IDX_MAGIC_IMAGES = 0x00000803

COMP_ID = 0
COMP_COV = 1
COMP_SEM = 2
COMP_NAMES = ("id", "cov", "sem")


@dataclass
class LabeledSet:
    """Feature matrix plus 1-based class labels."""

    xs: np.ndarray
    ys: np.ndarray

    def __post_init__(self):
        self.xs = np.atleast_2d(np.asarray(self.xs, dtype=np.float64))
        self.ys = np.asarray(self.ys, dtype=np.int64)
        if self.xs.shape[0] != self.ys.shape[0]:
            raise ValueError(
                f"{self.xs.shape[0]} feature rows but {self.ys.shape[0]} labels"
            )
        if self.ys.size and self.ys.min() < 1:
            raise ValueError("labels must be 1-based class indices")

    def __len__(self):
        return self.xs.shape[0]

    @property
    def dim(self):
        return self.xs.shape[1]

    def subset(self, indices) -> "LabeledSet":
        return LabeledSet(self.xs[indices], self.ys[indices])


@dataclass
class WildConfig:
    """Mixture weights of the wild distribution."""

    pi_c: float
    pi_s: float

    def __post_init__(self):
        if not (0.0 <= self.pi_c <= 1.0 and 0.0 <= self.pi_s <= 1.0):
            raise ConfigError(f"pi_c={self.pi_c}, pi_s={self.pi_s} must lie in [0,1]")
        if self.pi_c + self.pi_s > 1.0 + 1e-12:
            raise ConfigError(f"pi_c + pi_s = {self.pi_c + self.pi_s} exceeds 1")

    @property
    def pi_id(self):
        return max(0.0, 1.0 - self.pi_c - self.pi_s)


@dataclass
class WildBatch:
    """What the training objective is allowed to see: features only."""

    features: np.ndarray

    def __len__(self):
        return self.features.shape[0]


@dataclass
class WildProvenance:
    """Evaluation-side record of which mixture component each example used."""

    components: np.ndarray  # COMP_ID / COMP_COV / COMP_SEM per example

    def counts(self):
        return {
            name: int(np.sum(self.components == code))
            for code, name in enumerate(COMP_NAMES)
        }


class WildMixture:
    """Sampler over (1-pi_c-pi_s)*ID + pi_c*covariate + pi_s*semantic.

    Labels of the ID and covariate pools are hidden from consumers; the
    covariate pool's labels are retained internally only so evaluation code
    can measure OOD accuracy. The sampler owns its RNG (seeded by
    ``rng_seed``) and is meant to be driven from a single training thread.
    """

    def __init__(self, id_pool: LabeledSet, cov_pool: LabeledSet, sem_pool,
                 config: WildConfig, rng_seed: int = 0):
        self.config = config
        self.rng_seed = rng_seed
        self._id_xs = np.atleast_2d(np.asarray(id_pool.xs, dtype=np.float64))
        self._cov_xs = np.atleast_2d(np.asarray(cov_pool.xs, dtype=np.float64))
        self._sem_xs = np.atleast_2d(np.asarray(sem_pool, dtype=np.float64))
        pools = (self._id_xs, self._cov_xs, self._sem_xs)
        weights = (config.pi_id, config.pi_c, config.pi_s)
        for name, pool, w in zip(COMP_NAMES, pools, weights):
            if w > 0.0 and pool.shape[0] == 0:
                raise ConfigError(f"{name} pool empty but its mixture weight is {w}")
        dims = {p.shape[1] for p in pools if p.shape[0]}
        if len(dims) > 1:
            raise ConfigError(f"pool feature dimensions disagree: {sorted(dims)}")
        self._rng = np.random.default_rng(rng_seed)

    def sample(self, batch_size: int):
        """Draw an i.i.d. wild batch; returns (WildBatch, WildProvenance)."""
        if batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
        cfg = self.config
        u = self._rng.random(batch_size)
        comps = np.full(batch_size, COMP_SEM, dtype=np.int8)
        comps[u < cfg.pi_id + cfg.pi_c] = COMP_COV
        comps[u < cfg.pi_id] = COMP_ID
        feats = np.empty((batch_size, self.dim), dtype=np.float64)
        for code, pool in ((COMP_ID, self._id_xs), (COMP_COV, self._cov_xs),
                           (COMP_SEM, self._sem_xs)):
            mask = comps == code
            k = int(mask.sum())
            if k:
                feats[mask] = pool[self._rng.integers(0, pool.shape[0], size=k)]
        return WildBatch(feats), WildProvenance(comps)

    @property
    def dim(self):
        for p in (self._id_xs, self._cov_xs, self._sem_xs):
            if p.shape[0]:
                return p.shape[1]
        raise ConfigError("all mixture pools are empty")


def sample_wild_batch(mix: WildMixture, batch_size: int):
    """Module-level alias for :meth:`WildMixture.sample`."""
    return mix.sample(batch_size)


# -- synthetic generator -------------------------------------------------------


@dataclass
class SyntheticSpec:
    """Gaussian-cluster stand-in for the image-shift benchmarks.

    ID data is K isotropic clusters; covariate data is the same clusters
    translated by ``cov_shift`` (labels preserved, slightly wider); semantic
    data is a single far-away cluster. The semantic mean must sit well off
    the ID manifold: distance > 5 * (id_std + sem_std) from every ID mean.
    """

    id_means: np.ndarray
    id_std: float
    cov_shift: np.ndarray
    cov_extra_std: float
    sem_mean: np.ndarray
    sem_std: float
    n_per_class: int

    def __post_init__(self):
        self.id_means = np.atleast_2d(np.asarray(self.id_means, dtype=np.float64))
        self.cov_shift = np.asarray(self.cov_shift, dtype=np.float64)
        self.sem_mean = np.asarray(self.sem_mean, dtype=np.float64)
        if self.id_std <= 0 or self.sem_std <= 0 or self.cov_extra_std < 0:
            raise ConfigError("cluster widths must be positive (cov_extra_std >= 0)")
        if self.n_per_class < 1:
            raise ConfigError("n_per_class must be positive")
        gap = 5.0 * (self.id_std + self.sem_std)
        dists = np.linalg.norm(self.id_means - self.sem_mean, axis=1)
        if np.any(dists <= gap):
            raise ConfigError(
                f"semantic mean too close to an ID mean ({dists.min():.3g} <= {gap:.3g})"
            )

    @property
    def n_classes(self):
        return self.id_means.shape[0]


def default_synthetic_spec(n_per_class: int = 500) -> SyntheticSpec:
    """Two well-separated ID clusters, a vertical covariate shift of 2.5,
    and a distant semantic cluster below."""
    return SyntheticSpec(
        id_means=np.array([[-2.0, 0.0], [2.0, 0.0]]),
        id_std=0.5,
        cov_shift=np.array([0.0, 2.5]),
        cov_extra_std=0.1,
        sem_mean=np.array([0.0, -8.0]),
        sem_std=0.5,
        n_per_class=n_per_class,
    )


def gen_synthetic(spec: SyntheticSpec, seed: int):
    """Draw (id: LabeledSet, cov: LabeledSet, sem: array) from the spec.

    Deterministic per seed. Clusters are emitted class-major with labels
    1..K; the covariate set reuses the label layout with fresh draws around
    the shifted means; the semantic set has K * n_per_class unlabeled rows.
    """
    rng = np.random.default_rng(seed)
    k = spec.n_classes
    n = spec.n_per_class
    d = spec.id_means.shape[1]
    labels = np.repeat(np.arange(1, k + 1), n)

    id_xs = np.empty((k * n, d))
    for c in range(k):
        id_xs[c * n : (c + 1) * n] = spec.id_means[c] + spec.id_std * rng.standard_normal((n, d))

    cov_std = spec.id_std + spec.cov_extra_std
    cov_xs = np.empty((k * n, d))
    for c in range(k):
        cov_xs[c * n : (c + 1) * n] = (
            spec.id_means[c] + spec.cov_shift + cov_std * rng.standard_normal((n, d))
        )

    sem_xs = spec.sem_mean + spec.sem_std * rng.standard_normal((k * n, d))
    return LabeledSet(id_xs, labels), LabeledSet(cov_xs, labels.copy()), sem_xs


# -- IDX binary format ---------------------------------------------------------


@dataclass
class IdxFile:
    """Parsed IDX file: big-endian magic, per-dimension sizes, raw bytes."""

    magic: int
    dims: tuple
    payload: bytes

    def images(self) -> np.ndarray:
        """(n, rows*cols) float array scaled to [0, 1]."""
        if self.magic != IDX_MAGIC_IMAGES:
            raise FormatError(f"not an image file (magic 0x{self.magic:08x})")
        n = self.dims[0]
        arr = np.frombuffer(self.payload, dtype=np.uint8).reshape(n, -1)
        return arr.astype(np.float64) / 255.0

    def labels(self) -> np.ndarray:
        """Raw label bytes as an int array (0-based, as stored in the file)."""
        if self.magic != IDX_MAGIC_LABELS:
            raise FormatError(f"not a label file (magic 0x{self.magic:08x})")
        return np.frombuffer(self.payload, dtype=np.uint8).astype(np.int64)


def load_idx(path) -> IdxFile:
    """Parse an IDX file; FormatError on bad magic or size mismatch."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise FormatError(f"{path}: truncated header")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic == IDX_MAGIC_LABELS:
        ndim = 1
    elif magic == IDX_MAGIC_IMAGES:
        ndim = 3
    else:
        raise FormatError(f"{path}: unsupported magic 0x{magic:08x}")
    header_len = 4 + 4 * ndim
    if len(raw) < header_len:
        raise FormatError(f"{path}: truncated dimension header")
    dims = struct.unpack(f">{ndim}I", raw[4:header_len])
    payload = raw[header_len:]
    expected = int(np.prod(dims)) if dims else 0
    if expected != len(payload):
        raise FormatError(
            f"{path}: payload of {len(payload)} bytes but dims {dims} need {expected}"
        )
    return IdxFile(magic, dims, payload)


def corrupt_gaussian(images, sigma: float, seed: int) -> np.ndarray:
    """Additive Gaussian pixel noise, clipped back to [0, 1].

    The corruption is applied once, offline: corrupt a pool and reuse it,
    rather than re-noising per epoch.
    """
    images = np.asarray(images, dtype=np.float64)
    if sigma <= 0:
        raise ConfigError(f"sigma must be positive, got {sigma}")
    if images.size and (images.min() < 0.0 or images.max() > 1.0):
        raise ValueError("pixel values must lie in [0, 1] before corruption")
    rng = np.random.default_rng(seed)
    return np.clip(images + rng.normal(0.0, sigma, size=images.shape), 0.0, 1.0)


# -- splitting ------------------------------------------------------------------


def split(items, fractions, seed: int):
    """Seed-deterministic shuffled partition into len(fractions) blocks.

    ``items`` may be a LabeledSet or an array; blocks are disjoint, their
    union is the input, and sizes follow cumulative rounding of the
    fractions (which must sum to 1).
    """
    fractions = [float(f) for f in fractions]
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError(f"fractions sum to {sum(fractions)}, expected 1")
    n = len(items)
    perm = np.random.default_rng(seed).permutation(n)
    bounds = [0]
    acc = 0.0
    for f in fractions:
        acc += f
        bounds.append(int(round(acc * n)))
    bounds[-1] = n
    parts = []
    for lo, hi in zip(bounds[:-1], bounds[1:]):
        idx = perm[lo:hi]
        if isinstance(items, LabeledSet):
            parts.append(items.subset(idx))
        else:
            parts.append(np.asarray(items)[idx])
    return parts


def export_synthetic_csv(path, id_set: LabeledSet, cov_set: LabeledSet, sem_xs) -> None:
    """Write ``x1,x2,label,role`` rows; semantic rows carry label -1."""
    sem_xs = np.atleast_2d(np.asarray(sem_xs, dtype=np.float64))
    with open(path, "w") as fh:
        fh.write("x1,x2,label,role\n")
        for role, xs, ys in (
            ("id", id_set.xs, id_set.ys),
            ("cov", cov_set.xs, cov_set.ys),
            ("sem", sem_xs, np.full(sem_xs.shape[0], -1)),
        ):
            for row, y in zip(xs, ys):
                fh.write(f"{float(row[0])!r},{float(row[1])!r},{int(y)},{role}\n")
