"""Datasets, few-shot episode sampling, and the embedding-store file format.

The on-disk store is a small binary container ("PTPE") holding one f32
matrix, with a sidecar UTF-8 JSON manifest (``<path>.json``) carrying
classes, labels, split tag, encoder tag, and the normalization flag.
Matrices are widened to f64 in memory.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError, DataError, StoreError

MAGIC = b"PTPE"
VERSION = 1
DTYPE_F32 = 1
_HEADER = struct.Struct("<4sIIIB3x")

# token ids 0..2 are reserved; category j maps to 3 + (j mod (vocab - 3))
SPECIAL_TOKENS = 3
DEFAULT_VOCAB = 1024


@dataclass(frozen=True)
class CategoryCatalog:
    """Ordered category names; order defines the label indices."""

    names: tuple
    token_ids: dict = field(hash=False, compare=False, default_factory=dict)

    def __post_init__(self):
        if len(set(self.names)) != len(self.names):
            raise DataError("catalog names must be unique")

    def __len__(self) -> int:
        return len(self.names)

    def ids_for(self, index: int) -> list:
        return self.token_ids[self.names[index]]

    @staticmethod
    def synthetic(names, vocab_size: int = DEFAULT_VOCAB) -> "CategoryCatalog":
        names = tuple(names)
        usable = vocab_size - SPECIAL_TOKENS
        ids = {n: [SPECIAL_TOKENS + (j % usable)] for j, n in enumerate(names)}
        return CategoryCatalog(names=names, token_ids=ids)


@dataclass
class DatasetSplit:
    """Examples as (id, latent row, label); ids unique within the split."""

    ids: np.ndarray        # (N,) int64
    latents: np.ndarray    # (N, d) float64
    labels: np.ndarray     # (N,) int64
    split: str

    def __post_init__(self):
        if len(set(self.ids.tolist())) != len(self.ids):
            raise DataError(f"duplicate ids in split {self.split!r}")

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def dim(self) -> int:
        return self.latents.shape[1]


@dataclass
class FewShotEpisode:
    """n labeled examples per category plus the untouched test split."""

    support: DatasetSplit
    test: DatasetSplit
    shots: int
    seed: int


@dataclass
class EmbeddingStore:
    matrix: np.ndarray     # (N, d) float64 in memory
    classes: list
    labels: list
    split: str
    encoder: str
    l2_normalized: bool

    @property
    def rows(self) -> int:
        return self.matrix.shape[0]

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]


def write_matrix(path, matrix: np.ndarray) -> None:
    """Write the bare PTPE binary (header + f32 matrix), no manifest."""
    matrix = np.asarray(matrix)
    if matrix.ndim != 2:
        raise ContractError(f"store matrices are 2-d, got {matrix.shape}")
    rows, dim = matrix.shape
    payload = matrix.astype("<f4").tobytes(order="C")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, rows, dim, DTYPE_F32))
        fh.write(payload)


def read_matrix(path) -> np.ndarray:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as err:
        raise StoreError("io", f"cannot read {path}: {err}") from err
    if len(blob) < _HEADER.size:
        raise StoreError("truncated", f"{path} shorter than header")
    magic, version, rows, dim, dtype = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise StoreError("magic", f"{path} has bad magic {magic!r}")
    if version != VERSION:
        raise StoreError("version", f"{path} version {version}, expected {VERSION}")
    if dtype != DTYPE_F32:
        raise StoreError("dtype", f"{path} dtype code {dtype}, expected {DTYPE_F32}")
    expected = _HEADER.size + rows * dim * 4
    if len(blob) != expected:
        raise StoreError(
            "truncated", f"{path} has {len(blob)} bytes, expected {expected}"
        )
    flat = np.frombuffer(blob, dtype="<f4", offset=_HEADER.size)
    return flat.reshape(rows, dim).astype(np.float64)


def manifest_path(path) -> Path:
    return Path(str(path) + ".json")


def save_store(path, store: EmbeddingStore) -> None:
    path = Path(path)
    if len(store.labels) != store.rows:
        raise StoreError(
            "mismatch",
            f"{path}: {len(store.labels)} labels but {store.rows} matrix rows",
        )
    write_matrix(path, store.matrix)
    manifest = {
        "classes": list(store.classes),
        "labels": [int(x) for x in store.labels],
        "split": store.split,
        "encoder": store.encoder,
        "l2_normalized": bool(store.l2_normalized),
    }
    manifest_path(path).write_text(json.dumps(manifest, sort_keys=True))


def load_store(path) -> EmbeddingStore:
    path = Path(path)
    matrix = read_matrix(path)
    mpath = manifest_path(path)
    try:
        manifest = json.loads(mpath.read_text())
    except OSError as err:
        raise StoreError("manifest", f"missing manifest {mpath}: {err}") from err
    except json.JSONDecodeError as err:
        raise StoreError("manifest", f"bad manifest {mpath}: {err}") from err
    labels = manifest.get("labels", [])
    if len(labels) != matrix.shape[0]:
        raise StoreError(
            "mismatch",
            f"{path}: {len(labels)} labels but {matrix.shape[0]} matrix rows",
        )
    return EmbeddingStore(
        matrix=matrix,
        classes=list(manifest.get("classes", [])),
        labels=[int(x) for x in labels],
        split=str(manifest.get("split", "")),
        encoder=str(manifest.get("encoder", "")),
        l2_normalized=bool(manifest.get("l2_normalized", False)),
    )


# ---------------------------------------------------------------------------
# synthetic Gaussian-mixture testbed
# ---------------------------------------------------------------------------

@dataclass
class SyntheticGmmConfig:
    clusters: int = 5          # latent clusters, categories assigned evenly
    categories: int = 10
    dim: int = 64
    per_category: int = 32     # samples per category per split
    separation: float = 10.0   # minimum pairwise centroid distance
    class_offset: float = 0.5
    noise: float = 0.3
    seed: int = 0

    def validate(self) -> None:
        if self.categories % self.clusters != 0:
            raise DataError(
                f"categories ({self.categories}) must divide evenly into "
                f"clusters ({self.clusters})"
            )
        for name in ("clusters", "categories", "dim", "per_category"):
            if getattr(self, name) <= 0:
                raise DataError(f"{name} must be positive")


PRESETS = {
    # separable: VM solvable to ~1.0; the main end-to-end testbed
    "separable": SyntheticGmmConfig(
        clusters=5, categories=10, dim=64, per_category=32,
        separation=10.0, class_offset=0.5, noise=0.3, seed=0,
    ),
    # tiny: fast plumbing checks
    "tiny": SyntheticGmmConfig(
        clusters=2, categories=4, dim=16, per_category=8,
        separation=8.0, class_offset=0.5, noise=0.3, seed=0,
    ),
}

_REJECTION_LIMIT = 10_000


def gen_synthetic_gmm(config: SyntheticGmmConfig):
    """Sample the synthetic mixture testbed.

    Centroids are drawn i.i.d. N(0, s^2 I) with s = max(1, separation/sqrt(dim))
    and rejected until all pairwise distances reach ``separation``. Category
    means sit at their assigned centroid plus a fixed N(0, class_offset^2)
    shift; samples add N(0, noise^2) noise. Returns (train, test, catalog,
    cluster map); everything is deterministic given the seed.
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    scale = max(1.0, config.separation / np.sqrt(config.dim))

    centroids = []
    attempts = 0
    while len(centroids) < config.clusters:
        candidate = rng.normal(0.0, scale, config.dim)
        attempts += 1
        if attempts > _REJECTION_LIMIT:
            raise DataError(
                f"centroid rejection sampling exceeded {_REJECTION_LIMIT} "
                f"attempts; separation {config.separation} infeasible for "
                f"dim {config.dim}"
            )
        if all(np.linalg.norm(candidate - c) >= config.separation for c in centroids):
            centroids.append(candidate)
    centroids = np.stack(centroids)

    per_cluster = config.categories // config.clusters
    cluster_of = {j: j // per_cluster for j in range(config.categories)}
    means = np.stack([
        centroids[cluster_of[j]] + rng.normal(0.0, config.class_offset, config.dim)
        for j in range(config.categories)
    ])

    def draw_split(tag, start_id):
        n = config.per_category * config.categories
        latents = np.empty((n, config.dim))
        labels = np.empty(n, dtype=np.int64)
        row = 0
        for j in range(config.categories):
            for _ in range(config.per_category):
                latents[row] = means[j] + rng.normal(0.0, config.noise, config.dim)
                labels[row] = j
                row += 1
        ids = np.arange(start_id, start_id + n, dtype=np.int64)
        return DatasetSplit(ids=ids, latents=latents, labels=labels, split=tag)

    train = draw_split("train", 0)
    test = draw_split("test", len(train))
    names = [f"class_{j:03d}" for j in range(config.categories)]
    catalog = CategoryCatalog.synthetic(names)
    return train, test, catalog, cluster_of


def sample_few_shot(train: DatasetSplit, shots: int, seed: int,
                    test: DatasetSplit) -> FewShotEpisode:
    """Draw exactly ``shots`` examples per category, uniformly without
    replacement; the test split passes through untouched."""
    if shots <= 0:
        raise DataError("shots must be positive")
    rng = np.random.default_rng(seed)
    categories = np.unique(train.labels)
    deficient = [
        int(c) for c in categories if np.sum(train.labels == c) < shots
    ]
    if deficient:
        raise DataError(
            f"{shots}-shot episode needs {shots} examples per category; "
            f"deficient categories: {deficient}"
        )
    picks = []
    for c in categories:
        rows = np.flatnonzero(train.labels == c)
        picks.append(rng.choice(rows, size=shots, replace=False))
    rows = np.concatenate(picks)
    support = DatasetSplit(
        ids=train.ids[rows].copy(),
        latents=train.latents[rows].copy(),
        labels=train.labels[rows].copy(),
        split="train",
    )
    return FewShotEpisode(support=support, test=test, shots=shots, seed=seed)


# ---------------------------------------------------------------------------
# dataset directories
# ---------------------------------------------------------------------------

@dataclass
class DatasetBundle:
    train: DatasetSplit
    test: DatasetSplit
    catalog: CategoryCatalog
    name: str
    encoder: str = "synthetic-gmm"
    l2_normalized: bool = False
    text_matrix: np.ndarray | None = None   # (C, d) frozen category text rows


def save_dataset(outdir, train: DatasetSplit, test: DatasetSplit,
                 catalog: CategoryCatalog, encoder: str = "synthetic-gmm",
                 cluster_map: dict | None = None) -> None:
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    for split in (train, test):
        save_store(outdir / f"{split.split}.ptpe", EmbeddingStore(
            matrix=split.latents,
            classes=list(catalog.names),
            labels=split.labels.tolist(),
            split=split.split,
            encoder=encoder,
            l2_normalized=False,
        ))
    if cluster_map is not None:
        (outdir / "clusters.json").write_text(
            json.dumps({str(k): int(v) for k, v in cluster_map.items()},
                       sort_keys=True)
        )


def load_dataset(datadir) -> DatasetBundle:
    datadir = Path(datadir)
    stores = {}
    for tag in ("train", "test"):
        stores[tag] = load_store(datadir / f"{tag}.ptpe")
    classes = stores["train"].classes
    if stores["test"].classes != classes:
        raise DataError(f"{datadir}: train/test manifests disagree on classes")
    catalog = CategoryCatalog.synthetic(classes)

    next_id = 0
    splits = {}
    for tag in ("train", "test"):
        st = stores[tag]
        n = st.rows
        splits[tag] = DatasetSplit(
            ids=np.arange(next_id, next_id + n, dtype=np.int64),
            latents=st.matrix,
            labels=np.asarray(st.labels, dtype=np.int64),
            split=tag,
        )
        next_id += n

    text_matrix = None
    text_path = datadir / "text.ptpe"
    if text_path.exists():
        text_store = load_store(text_path)
        if text_store.rows != len(classes):
            raise DataError(
                f"{text_path}: {text_store.rows} text rows for "
                f"{len(classes)} categories"
            )
        text_matrix = text_store.matrix

    return DatasetBundle(
        train=splits["train"],
        test=splits["test"],
        catalog=catalog,
        name=datadir.name,
        encoder=stores["train"].encoder,
        l2_normalized=stores["train"].l2_normalized,
        text_matrix=text_matrix,
    )
