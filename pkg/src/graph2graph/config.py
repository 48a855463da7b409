"""Run configuration: one flat dataclass, persisted as ``key = value`` lines."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path


@dataclass
class RunConfig:
    # model
    hidden_dim: int = 300
    latent_dim: int = 8
    tree_iters: int = 6
    graph_iters: int = 3
    assm_iters: int = 3
    max_nodes: int = 60
    # optimisation
    epochs: int = 20
    lr: float = 1e-3
    lr_decay: float = 0.9
    batch_size: int = 32
    kl_weight: float = -1.0  # negative means 1 / latent_dim
    seed: int = 0
    # adversarial phase
    gan_weight: float = 1.0
    disc_iters: int = 5
    gp_weight: float = 10.0
    gan_start_epoch: int = -1  # negative disables the adversarial phase
    disc_hidden: int = 300
    disc_lr: float = 1e-3
    # translation / evaluation
    K: int = 20
    delta: float = 0.4
    # paths
    vocab: str = ""
    pairs: str = ""
    checkpoint_dir: str = ""
    report: str = ""

    @property
    def effective_kl_weight(self) -> float:
        return 1.0 / self.latent_dim if self.kl_weight < 0 else self.kl_weight

    @property
    def adversarial(self) -> bool:
        return self.gan_weight > 0 and 0 <= self.gan_start_epoch < self.epochs

    def replace(self, **changes) -> RunConfig:
        return dataclasses.replace(self, **_coerce_all(changes))

    def to_text(self) -> str:
        return "".join(f"{f.name} = {getattr(self, f.name)}\n" for f in fields(self))

    def save(self, path: str | Path) -> None:
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(self.to_text(), encoding="utf-8")
        tmp.replace(path)

    @classmethod
    def from_text(cls, text: str) -> RunConfig:
        values = {}
        for n, line in enumerate(text.splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"config line {n}: expected key = value")
            key, value = (s.strip() for s in line.split("=", 1))
            values[key] = value
        return cls().replace(**values)

    @classmethod
    def load(cls, path: str | Path) -> RunConfig:
        return cls.from_text(Path(path).read_text(encoding="utf-8"))


_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce_all(changes: dict) -> dict:
    out = {}
    for key, value in changes.items():
        if key not in _TYPES:
            raise KeyError(f"unknown config key {key!r}")
        out[key] = _coerce(key, value)
    return out


def _coerce(key: str, value):
    kind = _TYPES[key]
    if kind == "int":
        if isinstance(value, float) and not value.is_integer():
            raise ValueError(f"{key} expects an integer")
        return int(value)
    if kind == "float":
        return float(value)
    return str(value)
