"""Run configuration and named presets."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

CONFIG_VERSION = 1
VARIANTS = ("full", "projection_only", "vanilla")


@dataclass
class Config:
    preset: str = "desk"
    task: str = "classification"
    variant: str = "full"
    # model sizes
    k_star: int = 8
    d_star: int = 64
    d_hidden: int = 64
    proj_layers: int = 2
    pred_layers: int = 2
    heads: int = 4
    ffn_mult: int = 2
    enc_hidden: int = 128
    n_u: int | None = None  # None: class count (classification) or 128
    # objective
    lam: float = 1e-2
    alpha: float = 1.0
    use_pseudo: bool = True
    ratio: float = 0.5
    window: int = 5
    # optimization
    lr: float = 1e-3
    lr_final: float | None = None
    lr_final_epochs: int = 0
    epochs: int = 30
    batch_size: int = 64
    pretrain_epochs: int = 30
    pretrain_lr: float = 1e-3
    freeze_encoders: bool = True
    param_parity: bool = False
    seed: int = 0
    benchmark: str | None = None
    version: int = CONFIG_VERSION

    def __post_init__(self):
        for name in ("k_star", "d_star", "d_hidden", "proj_layers", "pred_layers", "heads",
                     "enc_hidden", "window", "epochs", "batch_size", "pretrain_epochs"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if not 0.0 < self.ratio < 1.0:
            raise ValueError("ratio must lie in (0, 1)")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.task not in ("classification", "regression", "retrieval"):
            raise ValueError(f"unknown task {self.task!r}")
        if self.lam < 0 or self.alpha < 0:
            raise ValueError("loss weights must be non-negative")

    @property
    def dual_branch(self) -> bool:
        return self.variant == "full"

    def resolved_n_u(self, n_classes: int | None) -> int:
        if self.n_u is not None:
            return self.n_u
        if self.task == "classification" and n_classes:
            return n_classes
        return 128

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        """Digest of every field except the seed."""
        d = self.to_dict()
        d.pop("seed")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:12]

    def with_(self, **kw) -> "Config":
        return replace(self, **kw)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))

    @classmethod
    def load(cls, path) -> "Config":
        return cls.from_dict(json.loads(Path(path).read_text()))

    @classmethod
    def from_dict(cls, d: dict) -> "Config":
        d = dict(d)
        if d.get("version", CONFIG_VERSION) != CONFIG_VERSION:
            raise ValueError(f"unsupported config version {d['version']}")
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        base = PRESETS[d.get("preset", "desk")]
        return replace(base, **d)


PRESETS: dict[str, Config] = {
    "desk": Config(),
    "large-classification": Config(
        preset="large-classification", task="classification", k_star=512, d_star=256, d_hidden=256,
        proj_layers=6, pred_layers=6, heads=8, ffn_mult=4, n_u=3806, lam=1e-3, alpha=3000.0,
        window=10, lr=1e-4, lr_final=1e-5, lr_final_epochs=50, epochs=120, batch_size=96),
    "large-regression": Config(
        preset="large-regression", task="regression", k_star=16, d_star=256, d_hidden=256,
        proj_layers=6, pred_layers=6, heads=8, ffn_mult=4, n_u=128, lam=1e-3, alpha=1.0,
        window=20, lr=1e-2, epochs=50, batch_size=128),
    "large-retrieval": Config(
        preset="large-retrieval", task="retrieval", k_star=16, d_star=256, d_hidden=256,
        proj_layers=6, pred_layers=6, heads=8, ffn_mult=4, n_u=128, lam=1e-3, alpha=1.0,
        window=20, lr=1e-2, epochs=50, batch_size=128),
}


def preset(name: str, **overrides) -> Config:
    try:
        base = PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    return replace(base, **overrides)
