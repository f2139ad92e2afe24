"""Checkpoints: a JSON manifest plus one flat little-endian binary blob.

Float arrays are written as ``<f4``; integer arrays (sample ids, modality
ids) as ``<i8`` so they round-trip exactly.
"""
from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from ..benchgen import BenchmarkConfig
from ..supervision import MissingPretrainingError, PseudoLabelStore, _ModalityBuffer
from .config import Config
from .models import UnimodalModel, build_model

CHECKPOINT_VERSION = 1
BLOB = "arrays.bin"


def save_arrays(path, arrays: dict[str, np.ndarray], meta: dict) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    index, chunks, offset = {}, [], 0
    for name in sorted(arrays):
        a = np.asarray(arrays[name])
        code = "<i8" if np.issubdtype(a.dtype, np.integer) else "<f4"
        raw = np.ascontiguousarray(a, dtype=code).tobytes()
        index[name] = {"offset": offset, "shape": list(a.shape), "dtype": code}
        chunks.append(raw)
        offset += len(raw)
    blob = b"".join(chunks)
    (path / BLOB).write_bytes(blob)
    manifest = {"format_version": CHECKPOINT_VERSION, "meta": meta, "index": index,
                "sha256": hashlib.sha256(blob).hexdigest()}
    (path / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return path


def load_arrays(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    mpath = path / "manifest.json"
    if not mpath.exists():
        raise FileNotFoundError(f"no checkpoint at {path}")
    manifest = json.loads(mpath.read_text())
    if manifest.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {manifest.get('format_version')}")
    blob = (path / BLOB).read_bytes()
    if hashlib.sha256(blob).hexdigest() != manifest["sha256"]:
        raise ValueError(f"checksum mismatch in {path}")
    arrays = {}
    for name, e in manifest["index"].items():
        count = int(np.prod(e["shape"], dtype=np.int64))
        arrays[name] = np.frombuffer(blob, dtype=e["dtype"], count=count,
                                     offset=e["offset"]).reshape(e["shape"]).copy()
    return arrays, manifest["meta"]


# ----------------------------------------------------------------------------
# trained models
# ----------------------------------------------------------------------------

def save_model(path, model, cfg: Config, bench: BenchmarkConfig, record: dict | None = None) -> Path:
    arrays = {f"param.{k}": v for k, v in model.state_dict().items()}
    meta = {"kind": "model", "config": cfg.to_dict(), "benchmark": bench.to_dict(), "record": record}
    return save_arrays(path, arrays, meta)


def load_model(path):
    arrays, meta = load_arrays(path)
    if meta.get("kind") != "model":
        raise ValueError(f"{path} is not a model checkpoint")
    cfg = Config.from_dict(meta["config"])
    bench = BenchmarkConfig(**meta["benchmark"])
    model = build_model(bench.modalities, cfg, bench.out_dim,
                        bench.n_classes if bench.task == "classification" else None,
                        np.random.default_rng(0))
    model.load_state_dict({k[len("param."):]: v for k, v in arrays.items() if k.startswith("param.")})
    return model, cfg, bench


# ----------------------------------------------------------------------------
# pretraining artifacts: unimodal models and the pseudo-label store
# ----------------------------------------------------------------------------

def save_pretrained(path, pretrained, cfg: Config, bench: BenchmarkConfig) -> Path:
    store = pretrained.store
    arrays: dict[str, np.ndarray] = {}
    buffers = {}
    for m, um in pretrained.models.items():
        for k, v in um.state_dict().items():
            arrays[f"unimodal.{m}.{k}"] = v
    for m in store.modalities:
        buf = store._buf[m]
        arrays[f"store.{m}.ids"] = buf.sample_ids
        arrays[f"store.{m}.ring"] = buf.ring
        if m in store.labels:
            arrays[f"store.{m}.labels"] = store.labels[m]
        buffers[str(m)] = {"count": buf.count, "epochs": buf.epochs}
    if hasattr(store, "selected_ids"):
        arrays["selected.ids"] = store.selected_ids
        arrays["selected.labels"] = store.selected_labels
        arrays["selected.modality"] = store.selected_modality
    meta = {"kind": "pretrained", "config": cfg.to_dict(), "benchmark": bench.to_dict(),
            "store": {"window": store.window, "task": store.task, "dim": store.dim, "buffers": buffers}}
    return save_arrays(path, arrays, meta)


def load_pretrained(path):
    from .train import Pretrained
    try:
        arrays, meta = load_arrays(path)
    except FileNotFoundError:
        raise MissingPretrainingError(f"no pretraining artifacts (pseudo-labels) found at {path}") from None
    if meta.get("kind") != "pretrained":
        raise MissingPretrainingError(f"{path} does not hold pretraining artifacts")
    cfg = Config.from_dict(meta["config"])
    bench = BenchmarkConfig(**meta["benchmark"])
    sm = meta["store"]
    store = PseudoLabelStore(sm["window"], sm["task"], sm["dim"])
    for key, info in sm["buffers"].items():
        m = int(key)
        store._buf[m] = _ModalityBuffer(arrays[f"store.{m}.ids"], arrays[f"store.{m}.ring"].astype(np.float64),
                                        list(info["epochs"]), info["count"])
        if f"store.{m}.labels" in arrays:
            store.labels[m] = arrays[f"store.{m}.labels"].astype(np.float64)
    if "selected.ids" in arrays:
        store.set_selection(arrays["selected.ids"], arrays["selected.labels"], arrays["selected.modality"])
    models = {}
    for spec in bench.modalities:
        prefix = f"unimodal.{spec.id}."
        state = {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}
        if state:
            um = UnimodalModel(spec, cfg, bench.out_dim, np.random.default_rng(0))
            um.load_state_dict(state)
            models[spec.id] = um
    return Pretrained(models, store), cfg, bench
