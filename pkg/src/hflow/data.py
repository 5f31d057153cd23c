"""Embedding datasets, synthetic generation, episodes, and on-disk formats.

Two text formats live here. `HFEMB1` embedding files:

    HFEMB1 <dim> <class 1> <class 2> ...
    <label>\t<source_id>\t<f1>,<f2>,...

and `HFLOW1` checkpoints:

    HFLOW1 1
    <key> <value>          (header entries)
    block <name> vec <n>   / block <name> mat <rows> <cols>
    <floats ...>

Floats are serialized with 17 significant digits so save -> load is
lossless for float64. Episode sampling uses a counter-based Philox stream
keyed on (seed, episode_index), so episodes are reproducible regardless of
worker scheduling.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .errors import (DimMismatch, EmptyDataset, InsufficientSamples, ParseError,
                     UnknownLabel, ValidationError)

EMB_MAGIC = "HFEMB1"
CKPT_MAGIC = "HFLOW1"
CKPT_VERSION = 1

SPLIT_TAGS = ("seen", "novel")


@dataclass(frozen=True)
class EmbeddingRecord:
    """One labelled vector; ``label`` indexes the dataset's class_names."""

    label: int
    vector: np.ndarray
    source_id: str


@dataclass
class EmbeddingDataset:
    """Validated set of labelled embedding vectors of one fixed dimension."""

    dim: int
    class_names: list[str]
    records: list[EmbeddingRecord]
    split_tag: str = "novel"

    def __post_init__(self):
        if self.split_tag not in SPLIT_TAGS:
            raise ValidationError(f"split_tag must be one of {SPLIT_TAGS}")
        if not self.records:
            raise EmptyDataset("dataset has no records")
        counts = np.zeros(len(self.class_names), dtype=int)
        for rec in self.records:
            if not 0 <= rec.label < len(self.class_names):
                raise UnknownLabel(f"label index {rec.label} outside the class set")
            if rec.vector.shape != (self.dim,):
                raise DimMismatch(
                    f"record {rec.source_id!r} has dim {rec.vector.size}, header says {self.dim}"
                )
            counts[rec.label] += 1
        for name, c in zip(self.class_names, counts):
            if c == 0:
                raise EmptyDataset(f"declared class {name!r} has no records")

    def by_class(self) -> list[list[int]]:
        """Record indices grouped by label."""
        groups: list[list[int]] = [[] for _ in self.class_names]
        for i, rec in enumerate(self.records):
            groups[rec.label].append(i)
        return groups

    def matrix(self) -> tuple[np.ndarray, np.ndarray]:
        """Stack all records into (vectors, labels) arrays."""
        xs = np.stack([r.vector for r in self.records])
        ys = np.array([r.label for r in self.records], dtype=np.int64)
        return xs, ys


def _fmt(x: float) -> str:
    return f"{x:.17g}"


def save_embeddings(path, ds: EmbeddingDataset) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(" ".join([EMB_MAGIC, str(ds.dim), *ds.class_names]) + "\n")
        for rec in ds.records:
            vals = ",".join(_fmt(v) for v in rec.vector)
            fh.write(f"{ds.class_names[rec.label]}\t{rec.source_id}\t{vals}\n")


def load_embeddings(path, split_tag: str = "novel") -> EmbeddingDataset:
    """Parse and validate an `HFEMB1` file; errors carry the offending line."""
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ParseError("empty file", line=1)
    head = lines[0].split()
    if len(head) < 3 or head[0] != EMB_MAGIC:
        raise ParseError(f"expected '{EMB_MAGIC} <dim> <classes...>' header", line=1)
    try:
        dim = int(head[1])
    except ValueError:
        raise ParseError(f"bad dimension {head[1]!r}", line=1) from None
    if dim < 1:
        raise ParseError("dimension must be positive", line=1)
    class_names = head[2:]
    if len(set(class_names)) != len(class_names):
        raise ParseError("duplicate class names in header", line=1)
    index = {name: i for i, name in enumerate(class_names)}

    records = []
    for ln, raw in enumerate(lines[1:], start=2):
        if not raw.strip():
            continue
        parts = raw.split("\t")
        if len(parts) != 3:
            raise ParseError("expected 'label<TAB>source_id<TAB>floats'", line=ln)
        label, source_id, payload = parts
        if label not in index:
            raise UnknownLabel(f"line {ln}: label {label!r} not in header class set")
        try:
            vec = np.array([float(tok) for tok in payload.split(",")], dtype=np.float64)
        except ValueError:
            raise ParseError("unparseable float in record", line=ln) from None
        if vec.size != dim:
            raise DimMismatch(f"line {ln}: record has {vec.size} values, header says {dim}")
        if not np.all(np.isfinite(vec)):
            raise ParseError("non-finite value in record", line=ln)
        records.append(EmbeddingRecord(label=index[label], vector=vec, source_id=source_id))
    if not records:
        raise EmptyDataset(f"{path}: no records after header")
    return EmbeddingDataset(dim=dim, class_names=class_names, records=records,
                            split_tag=split_tag)


# ---------------------------------------------------------------------------
# Synthetic generation
# ---------------------------------------------------------------------------

COVARIANCE_MODES = ("isotropic", "diagonal", "full")

MIN_FULL_CORRELATION = 0.3


@dataclass(frozen=True)
class SynthSpec:
    """Recipe for Gaussian class clusters with controlled covariance structure."""

    class_count: int = 5
    dim: int = 8
    samples_per_class: int = 100
    covariance_mode: str = "full"
    noise_scale: float = 1.0
    seed: int = 0
    mean_scale: float = 2.0
    # eigenvalue spread of the diagonal/full modes: largest/smallest = cov_spread^2
    cov_spread: float = 4.0

    def __post_init__(self):
        if self.covariance_mode not in COVARIANCE_MODES:
            raise ValidationError(f"covariance_mode must be one of {COVARIANCE_MODES}")
        if self.class_count < 2 or self.dim < 2 or self.samples_per_class < 1:
            raise ValidationError("need >= 2 classes, dim >= 2, samples >= 1")
        if self.noise_scale <= 0:
            raise ValidationError("noise_scale must be positive")
        if self.cov_spread < 1.0:
            raise ValidationError("cov_spread must be >= 1")


def _random_orthogonal(dim: int, rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((dim, dim)))
    return q * np.sign(np.diag(r))


def _class_covariance(spec: SynthSpec, rng: np.random.Generator) -> np.ndarray:
    scale_sq = spec.noise_scale**2
    if spec.covariance_mode == "isotropic":
        return scale_sq * np.eye(spec.dim)
    eigs = scale_sq * np.exp(rng.uniform(np.log(1.0 / spec.cov_spread),
                                         np.log(spec.cov_spread), size=spec.dim))
    if spec.covariance_mode == "diagonal":
        return np.diag(eigs)
    eigs = np.sort(eigs)[::-1]
    for _ in range(64):
        u = _random_orthogonal(spec.dim, rng)
        sigma = (u * eigs) @ u.T
        d = np.sqrt(np.diag(sigma))
        corr = sigma / np.outer(d, d)
        off = np.abs(corr - np.diag(np.diag(corr)))
        if off.max() >= MIN_FULL_CORRELATION:
            return sigma
    raise ValidationError("could not construct a sufficiently correlated covariance")


def generate_synthetic(spec: SynthSpec, split_tag: str = "novel") -> EmbeddingDataset:
    """Sample per-class Gaussian clusters x ~ N(mu_c, Sigma_c).

    Class means are drawn isotropically at ``mean_scale``; covariances are
    built per ``covariance_mode`` (the full mode via an eigendecomposition
    with a random orthogonal eigenvector matrix, retried until it carries
    off-diagonal correlation). Fully determined by ``spec.seed``.
    """
    rng = np.random.Generator(np.random.Philox(key=[np.uint64(spec.seed), np.uint64(0)]))
    class_names = [f"c{c:02d}" for c in range(spec.class_count)]
    records = []
    for c in range(spec.class_count):
        mu = spec.mean_scale * rng.standard_normal(spec.dim)
        sigma = _class_covariance(spec, rng)
        chol = np.linalg.cholesky(sigma)  # also proves SPD
        draws = mu + rng.standard_normal((spec.samples_per_class, spec.dim)) @ chol.T
        for i in range(spec.samples_per_class):
            records.append(EmbeddingRecord(label=c, vector=draws[i],
                                           source_id=f"synth-{c:02d}-{i:04d}"))
    return EmbeddingDataset(dim=spec.dim, class_names=class_names, records=records,
                            split_tag=split_tag)


# ---------------------------------------------------------------------------
# Episode sampling
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EpisodeSpec:
    """N-way / k-shot sampling contract."""

    n_way: int = 5
    k_shot: int = 5
    n_query: int = 15
    episode_count: int = 400
    seed: int = 0

    def __post_init__(self):
        if self.n_way < 2 or self.k_shot < 1 or self.n_query < 1 or self.episode_count < 1:
            raise ValidationError("need n_way >= 2, k_shot >= 1, n_query >= 1, episodes >= 1")


def episode_rng(seed: int, episode_index: int, stream: int = 0) -> np.random.Generator:
    """Counter-based generator fully determined by (seed, episode_index, stream).

    ``stream`` separates independent uses of the same episode key: 0 draws
    the episode's records, 1 drives per-episode fine-tuning, 2 seeds fresh
    per-episode model initialization. Episode indices below 2^33 never
    collide across streams.
    """
    key = np.array([seed, (stream << 33) + episode_index], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def sample_episode(ds: EmbeddingDataset, spec: EpisodeSpec, episode_index: int,
                   ) -> tuple[list[EmbeddingRecord], list[EmbeddingRecord]]:
    """Draw one episode: disjoint support/query records over n_way classes."""
    if spec.n_way > len(ds.class_names):
        raise InsufficientSamples(
            f"n_way {spec.n_way} exceeds the {len(ds.class_names)} dataset classes"
        )
    rng = episode_rng(spec.seed, episode_index)
    groups = ds.by_class()
    chosen = np.sort(rng.choice(len(ds.class_names), size=spec.n_way, replace=False))
    need = spec.k_shot + spec.n_query
    support, query = [], []
    for cls in chosen:
        idxs = groups[cls]
        if len(idxs) < need:
            raise InsufficientSamples(
                f"class {ds.class_names[cls]!r} has {len(idxs)} records, episode needs {need}"
            )
        perm = rng.permutation(len(idxs))
        support.extend(ds.records[idxs[i]] for i in perm[:spec.k_shot])
        query.extend(ds.records[idxs[i]] for i in perm[spec.k_shot:need])
    return support, query


def episode_arrays(ds: EmbeddingDataset, support, query):
    """Map one episode to arrays with episode-local labels 0..n_way-1.

    Episode labels follow the sorted order of the sampled dataset classes.
    Returns (xs_support, ys_support, xs_query, ys_query, class_names).
    """
    classes = sorted({rec.label for rec in support})
    local = {cls: i for i, cls in enumerate(classes)}
    xs_s = np.stack([r.vector for r in support])
    ys_s = np.array([local[r.label] for r in support], dtype=np.int64)
    xs_q = np.stack([r.vector for r in query])
    ys_q = np.array([local[r.label] for r in query], dtype=np.int64)
    return xs_s, ys_s, xs_q, ys_q, [ds.class_names[c] for c in classes]


# ---------------------------------------------------------------------------
# Split manifest (seen / novel declaration)
# ---------------------------------------------------------------------------

@dataclass
class SplitManifest:
    """Declares which file and classes belong to the seen vs novel split."""

    seen_path: str
    novel_path: str
    split_seed: int
    seen_classes: list[str]
    novel_classes: list[str]

    def __post_init__(self):
        overlap = set(self.seen_classes) & set(self.novel_classes)
        if overlap:
            raise ValidationError(f"seen/novel class sets overlap: {sorted(overlap)}")


def save_split_manifest(path, manifest: SplitManifest) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"seen_path {manifest.seen_path}\n")
        fh.write(f"novel_path {manifest.novel_path}\n")
        fh.write(f"split_seed {manifest.split_seed}\n")
        fh.write("seen_classes " + ",".join(manifest.seen_classes) + "\n")
        fh.write("novel_classes " + ",".join(manifest.novel_classes) + "\n")


def load_split_manifest(path) -> SplitManifest:
    entries = {}
    with open(path, "r", encoding="utf-8") as fh:
        for ln, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            key, _, value = raw.partition(" ")
            if not value.strip():
                raise ParseError(f"manifest entry {key!r} has no value", line=ln)
            entries[key.strip()] = value.strip()
    missing = {"seen_path", "novel_path", "split_seed", "seen_classes",
               "novel_classes"} - set(entries)
    if missing:
        raise ParseError(f"manifest missing keys: {sorted(missing)}", line=1)
    base = os.path.dirname(os.path.abspath(path))
    return SplitManifest(
        seen_path=os.path.join(base, entries["seen_path"]),
        novel_path=os.path.join(base, entries["novel_path"]),
        split_seed=int(entries["split_seed"]),
        seen_classes=entries["seen_classes"].split(","),
        novel_classes=entries["novel_classes"].split(","),
    )


def load_split(manifest: SplitManifest) -> tuple[EmbeddingDataset, EmbeddingDataset]:
    """Load both splits and enforce label-set disjointness against the files."""
    seen = load_embeddings(manifest.seen_path, split_tag="seen")
    novel = load_embeddings(manifest.novel_path, split_tag="novel")
    if sorted(seen.class_names) != sorted(manifest.seen_classes):
        raise ValidationError("seen file classes disagree with the manifest")
    if sorted(novel.class_names) != sorted(manifest.novel_classes):
        raise ValidationError("novel file classes disagree with the manifest")
    return seen, novel


# ---------------------------------------------------------------------------
# Checkpoint container
# ---------------------------------------------------------------------------

def write_checkpoint(path, header: dict, blocks: list[tuple[str, np.ndarray]]) -> None:
    """Write a versioned `HFLOW1` checkpoint: header entries then named blocks."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{CKPT_MAGIC} {CKPT_VERSION}\n")
        for key, value in header.items():
            fh.write(f"{key} {value}\n")
        for name, arr in blocks:
            arr = np.asarray(arr, dtype=np.float64)
            if arr.ndim == 1:
                fh.write(f"block {name} vec {arr.size}\n")
                fh.write(" ".join(_fmt(v) for v in arr) + "\n")
            elif arr.ndim == 2:
                fh.write(f"block {name} mat {arr.shape[0]} {arr.shape[1]}\n")
                for row in arr:
                    fh.write(" ".join(_fmt(v) for v in row) + "\n")
            else:
                raise ValidationError(f"block {name!r} must be 1-D or 2-D")


def read_checkpoint(path) -> tuple[dict, list[tuple[str, np.ndarray]]]:
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ParseError("empty checkpoint", line=1)
    magic = lines[0].split()
    if len(magic) != 2 or magic[0] != CKPT_MAGIC:
        raise ParseError(f"expected '{CKPT_MAGIC} <version>' header", line=1)
    if int(magic[1]) != CKPT_VERSION:
        raise ParseError(f"unsupported checkpoint version {magic[1]}", line=1)

    header: dict = {}
    blocks: list[tuple[str, np.ndarray]] = []
    ln = 1
    try:
        while ln < len(lines):
            parts = lines[ln].split()
            if not parts:
                ln += 1
                continue
            if parts[0] != "block":
                header[parts[0]] = " ".join(parts[1:])
                ln += 1
                continue
            name, kind = parts[1], parts[2]
            if kind == "vec":
                size = int(parts[3])
                arr = np.array([float(t) for t in lines[ln + 1].split()])
                if arr.size != size:
                    raise DimMismatch(f"block {name!r}: got {arr.size} values, header says {size}")
                blocks.append((name, arr))
                ln += 2
            elif kind == "mat":
                rows, cols = int(parts[3]), int(parts[4])
                arr = np.array([[float(t) for t in lines[ln + 1 + r].split()]
                                for r in range(rows)])
                if arr.shape != (rows, cols):
                    raise DimMismatch(f"block {name!r}: shape {arr.shape} != ({rows}, {cols})")
                blocks.append((name, arr))
                ln += 1 + rows
            else:
                raise ParseError(f"unknown block kind {kind!r}", line=ln + 1)
    except (IndexError, ValueError) as exc:
        raise ParseError(f"malformed checkpoint: {exc}", line=ln + 1) from None
    return header, blocks
