"""Synthetic modality-incomplete benchmarks.

Samples are drawn from a latent Gaussian mixture.  Each modality renders a
fixed random linear view of a subset of latent coordinates (its
discriminability), optionally with additive noise.  Training splits expose
disjoint sample sets with different modality subsets; val/test expose all.
"""
from __future__ import annotations

import hashlib
import json
import math
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

FORMAT_VERSION = 1
TASKS = ("classification", "regression", "retrieval")


class InvalidSpecError(ValueError):
    pass


class ProtocolViolationError(ValueError):
    pass


class MissingModalityError(KeyError):
    pass


def stream(seed: int, purpose: str, index: int = 0) -> np.random.Generator:
    """Philox4x64 generator keyed by ``seed`` and a stream id for ``purpose``.

    The 128-bit key is ``seed | (crc32(purpose) << 96) | (index << 64)``, so
    every (seed, purpose, index) triple yields an independent, platform-
    stable sequence.
    """
    if not 0 <= seed < 2 ** 64 or not 0 <= index < 2 ** 32:
        raise ValueError("seed must fit in 64 bits and index in 32 bits")
    key = seed | (index << 64) | (zlib.crc32(purpose.encode()) << 96)
    return np.random.Generator(np.random.Philox(key=key))


@dataclass
class ModalitySpec:
    id: int
    name: str
    k: int
    d: int
    raw_dim: int
    sigma: float = 0.0
    discriminability: float = 1.0

    def __post_init__(self):
        if self.k < 1 or self.d < 1 or self.raw_dim < 1:
            raise InvalidSpecError(f"modality {self.name}: sizes must be positive")
        if not 0.0 < self.discriminability <= 1.0:
            raise InvalidSpecError(f"modality {self.name}: discriminability must be in (0, 1]")
        if self.sigma < 0:
            raise InvalidSpecError(f"modality {self.name}: sigma must be >= 0")


def default_modalities() -> list[ModalitySpec]:
    return [
        ModalitySpec(0, "a", k=6, d=24, raw_dim=32, sigma=1.0, discriminability=1.0),
        ModalitySpec(1, "b", k=10, d=32, raw_dim=32, sigma=0.5, discriminability=0.5),
        ModalitySpec(2, "c", k=12, d=40, raw_dim=32, sigma=0.5, discriminability=0.5),
        ModalitySpec(3, "d", k=16, d=48, raw_dim=32, sigma=0.5, discriminability=0.25),
    ]


@dataclass
class BenchmarkConfig:
    task: str = "classification"
    n_classes: int = 8
    latent_dim: int = 16
    target_dim: int = 4  # regression vector / retrieval embedding width
    n_train: int = 2000
    n_val: int = 400
    n_test: int = 400
    cluster_spread: float = 1.0
    modalities: list[ModalitySpec] = field(default_factory=default_modalities)
    seed: int = 0

    def __post_init__(self):
        self.modalities = [m if isinstance(m, ModalitySpec) else ModalitySpec(**m) for m in self.modalities]
        if self.task not in TASKS:
            raise InvalidSpecError(f"unknown task {self.task!r}")
        if len(self.modalities) < 2:
            raise InvalidSpecError("need at least two modalities")
        if min(self.n_train, self.n_val, self.n_test) < 1:
            raise InvalidSpecError("sample counts must be >= 1")
        ids = [m.id for m in self.modalities]
        if ids != list(range(len(ids))):
            raise InvalidSpecError("modality ids must be 0..M-1 in order")
        if len({m.name for m in self.modalities}) != len(ids):
            raise InvalidSpecError("modality names must be unique")
        if self.task == "classification" and self.n_classes < 2:
            raise InvalidSpecError("classification needs >= 2 classes")

    @property
    def n_total(self) -> int:
        return self.n_train + self.n_val + self.n_test

    @property
    def out_dim(self) -> int:
        return self.n_classes if self.task == "classification" else self.target_dim

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SyntheticSample:
    id: int
    latent: np.ndarray
    raw: dict[int, np.ndarray]
    target: object

    def modality(self, m: int) -> np.ndarray:
        try:
            return self.raw[m]
        except KeyError:
            raise MissingModalityError(f"sample {self.id} does not expose modality {m}") from None

    @property
    def modalities(self) -> tuple[int, ...]:
        return tuple(sorted(self.raw))


@dataclass
class SyntheticDataset:
    config: BenchmarkConfig
    ids: np.ndarray
    latent: np.ndarray
    labels: np.ndarray  # cluster id per sample
    targets: np.ndarray  # class ids, regression vectors or retrieval embeddings
    raw: dict[int, np.ndarray]

    @property
    def specs(self) -> list[ModalitySpec]:
        return self.config.modalities

    def sample(self, i: int) -> SyntheticSample:
        return SyntheticSample(int(self.ids[i]), self.latent[i],
                               {m: a[i] for m, a in self.raw.items()}, self.targets[i])


def _render_maps(cfg: BenchmarkConfig) -> dict[int, tuple[np.ndarray, np.ndarray]]:
    maps = {}
    for spec in cfg.modalities:
        rng = stream(cfg.seed, "render", spec.id)
        n_read = max(1, int(math.ceil(spec.discriminability * cfg.latent_dim - 1e-9)))
        coords = np.sort(rng.permutation(cfg.latent_dim)[:n_read])
        A = rng.normal(0.0, 1.0 / math.sqrt(n_read), (n_read, spec.raw_dim))
        maps[spec.id] = (coords, A)
    return maps


def generate(config: BenchmarkConfig) -> SyntheticDataset:
    """Draw ``config.n_total`` samples; fully determined by ``config.seed``."""
    cfg = config
    n, L = cfg.n_total, cfg.latent_dim
    centers = stream(cfg.seed, "centers").normal(0.0, 1.0, (cfg.n_classes, L))
    labels = stream(cfg.seed, "labels").integers(0, cfg.n_classes, n)
    latent = centers[labels] + cfg.cluster_spread * stream(cfg.seed, "latent").normal(0.0, 1.0, (n, L))
    if cfg.task == "classification":
        targets = labels.copy()
    else:
        W = stream(cfg.seed, "target-map").normal(0.0, 1.0 / math.sqrt(L), (L, cfg.target_dim))
        targets = latent @ W
    raw = {}
    maps = _render_maps(cfg)
    for spec in cfg.modalities:
        coords, A = maps[spec.id]
        x = latent[:, coords] @ A
        if spec.sigma > 0:
            x = x + spec.sigma * stream(cfg.seed, "modality-noise", spec.id).normal(0.0, 1.0, x.shape)
        raw[spec.id] = x.astype("<f4")
    return SyntheticDataset(cfg, np.arange(n, dtype=np.int64), latent, labels,
                            targets if cfg.task == "classification" else targets.astype("<f4"), raw)


# ----------------------------------------------------------------------------
# splits
# ----------------------------------------------------------------------------

@dataclass
class SplitDef:
    modalities: tuple[int, ...]
    sample_ids: np.ndarray


@dataclass
class SplitSpec:
    splits: dict[str, SplitDef]

    @property
    def train_names(self) -> list[str]:
        return sorted(n for n in self.splits if n.startswith("train"))

    def validate(self, all_modalities: Iterable[int]) -> None:
        full = set(all_modalities)
        for name in ("val", "test"):
            if name not in self.splits:
                raise ProtocolViolationError(f"missing split {name!r}")
            if set(self.splits[name].modalities) != full:
                raise ProtocolViolationError(f"{name} split must be modality-complete")
        train = self.train_names
        if not train:
            raise ProtocolViolationError("no training split")
        seen: set[int] = set()
        union: set[int] = set()
        for name in train:
            sd = self.splits[name]
            mods = set(sd.modalities)
            if not mods or not mods < full:
                raise ProtocolViolationError(f"{name}: modality set must be a non-empty proper subset of {sorted(full)}")
            ids = set(int(i) for i in sd.sample_ids)
            if seen & ids:
                raise ProtocolViolationError(f"{name}: training sample sets overlap")
            seen |= ids
            union |= mods
        if len(train) > 1 and union != full:
            raise ProtocolViolationError("training modality sets must cover the test modalities")

    def to_dict(self) -> dict:
        return {k: {"modalities": list(v.modalities), "sample_ids": [int(i) for i in v.sample_ids]}
                for k, v in self.splits.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "SplitSpec":
        return cls({k: SplitDef(tuple(v["modalities"]), np.asarray(v["sample_ids"], dtype=np.int64))
                    for k, v in d.items()})


def default_split_spec(config: BenchmarkConfig,
                       train_sets: Sequence[Sequence[int]] = ((0, 1), (2, 3))) -> SplitSpec:
    """Equal contiguous partitions of the training pool, one per modality set."""
    n_tr = config.n_train
    parts = np.array_split(np.arange(n_tr, dtype=np.int64), len(train_sets))
    splits = {f"train{i + 1}": SplitDef(tuple(sorted(s)), p) for i, (s, p) in enumerate(zip(train_sets, parts))}
    allm = tuple(m.id for m in config.modalities)
    splits["val"] = SplitDef(allm, np.arange(n_tr, n_tr + config.n_val, dtype=np.int64))
    splits["test"] = SplitDef(allm, np.arange(n_tr + config.n_val, config.n_total, dtype=np.int64))
    return SplitSpec(splits)


@dataclass
class SplitData:
    """Samples of one split, exposing only that split's modalities."""

    name: str
    config: BenchmarkConfig
    ids: np.ndarray
    modalities: tuple[int, ...]
    raw_arrays: dict[int, np.ndarray]
    targets: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def task(self) -> str:
        return self.config.task

    def raw(self, m: int) -> np.ndarray:
        try:
            return self.raw_arrays[m]
        except KeyError:
            raise MissingModalityError(f"split {self.name!r} does not expose modality {m}") from None

    def sample(self, i: int) -> SyntheticSample:
        return SyntheticSample(int(self.ids[i]), np.empty(0),
                               {m: a[i] for m, a in self.raw_arrays.items()}, self.targets[i])

    def with_raw(self, raw_arrays: dict[int, np.ndarray]) -> "SplitData":
        return SplitData(self.name, self.config, self.ids, tuple(sorted(raw_arrays)), raw_arrays,
                         self.targets, self.labels)


def split(dataset: SyntheticDataset, spec: SplitSpec) -> dict[str, SplitData]:
    spec.validate(m.id for m in dataset.specs)
    pos = {int(i): k for k, i in enumerate(dataset.ids)}
    out = {}
    for name, sd in spec.splits.items():
        try:
            rows = np.array([pos[int(i)] for i in sd.sample_ids], dtype=np.int64)
        except KeyError as e:
            raise ProtocolViolationError(f"{name}: unknown sample id {e}") from None
        raw = {m: dataset.raw[m][rows] for m in sd.modalities}
        out[name] = SplitData(name, dataset.config, dataset.ids[rows], tuple(sd.modalities), raw,
                              dataset.targets[rows], dataset.labels[rows])
    return out


def corrupt(sample: SyntheticSample, modality: int, sigma: float,
            rng: np.random.Generator) -> SyntheticSample:
    """Add N(0, sigma^2) noise to one modality; others are left bit-identical."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    x = sample.modality(modality)
    raw = dict(sample.raw)
    if sigma > 0:
        raw[modality] = (x + sigma * rng.normal(0.0, 1.0, x.shape)).astype(x.dtype)
    return SyntheticSample(sample.id, sample.latent, raw, sample.target)


def corrupt_split(data: SplitData, modality: int, sigma: float, seed: int) -> SplitData:
    """Batched :func:`corrupt` over a split with a deterministic noise stream."""
    x = data.raw(modality)
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    raw = dict(data.raw_arrays)
    if sigma > 0:
        noise = stream(seed, "corrupt", modality).normal(0.0, 1.0, x.shape)
        raw[modality] = (x + sigma * noise).astype(x.dtype)
    return data.with_raw(raw)


def subset_view(sample, modalities: Iterable[int]):
    """Restrict a sample (or a :class:`SplitData`) to ``modalities``."""
    req = set(modalities)
    if not req:
        raise ValueError("requested modality set is empty")
    have = set(sample.raw) if isinstance(sample, SyntheticSample) else set(sample.modalities)
    if not req <= have:
        raise MissingModalityError(f"modalities {sorted(req - have)} are not available")
    if isinstance(sample, SyntheticSample):
        return SyntheticSample(sample.id, sample.latent, {m: sample.raw[m] for m in sorted(req)}, sample.target)
    return sample.with_raw({m: sample.raw_arrays[m] for m in sorted(req)})


# ----------------------------------------------------------------------------
# file format
# ----------------------------------------------------------------------------

def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def save_benchmark(dataset: SyntheticDataset, spec: SplitSpec, path) -> Path:
    """Write ``manifest.json`` plus one little-endian float32 file per split.

    Within a split file the blocks are laid out modality by modality, then
    the target block; every (sample, modality) row has an index entry.
    """
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    parts = split(dataset, spec)
    files = {}
    for name, sd in parts.items():
        blobs, index, offset = [], [], 0
        blocks = [(str(m), sd.raw(m)) for m in sd.modalities]
        tgt = sd.targets.reshape(len(sd), -1).astype("<f4")
        blocks.append(("target", tgt))
        for key, arr in blocks:
            arr = np.ascontiguousarray(arr, dtype="<f4")
            width = arr.shape[1]
            for r, sid in enumerate(sd.ids):
                index.append([int(sid), key, offset + r * width * 4, [width]])
            blobs.append(arr.tobytes())
            offset += arr.nbytes
        fpath = path / f"{name}.bin"
        fpath.write_bytes(b"".join(blobs))
        files[name] = {"path": fpath.name, "sha256": _sha256(fpath), "index": index,
                       "labels": [int(x) for x in sd.labels]}
    manifest = {
        "format_version": FORMAT_VERSION,
        "config": dataset.config.to_dict(),
        "splits": spec.to_dict(),
        "seed": dataset.config.seed,
        "files": files,
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return path


def load_benchmark(path) -> tuple[BenchmarkConfig, SplitSpec, dict[str, SplitData]]:
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    if manifest.get("format_version") != FORMAT_VERSION:
        raise InvalidSpecError(f"unsupported benchmark format {manifest.get('format_version')}")
    cfg = BenchmarkConfig(**manifest["config"])
    spec = SplitSpec.from_dict(manifest["splits"])
    spec.validate(m.id for m in cfg.modalities)
    out = {}
    for name, meta in manifest["files"].items():
        fpath = path / meta["path"]
        if _sha256(fpath) != meta["sha256"]:
            raise InvalidSpecError(f"checksum mismatch for {fpath}")
        buf = fpath.read_bytes()
        ids = spec.splits[name].sample_ids
        pos = {int(s): r for r, s in enumerate(ids)}
        cols: dict[str, np.ndarray] = {}
        for sid, key, offset, shape in meta["index"]:
            width = shape[0]
            if key not in cols:
                cols[key] = np.empty((len(ids), width), dtype="<f4")
            cols[key][pos[sid]] = np.frombuffer(buf, dtype="<f4", count=width, offset=offset)
        tgt = cols.pop("target")
        targets = tgt[:, 0].astype(np.int64) if cfg.task == "classification" else tgt
        raw = {int(k): v for k, v in cols.items()}
        out[name] = SplitData(name, cfg, ids, tuple(sorted(raw)), raw, targets,
                              np.asarray(meta["labels"], dtype=np.int64))
    return cfg, spec, out
