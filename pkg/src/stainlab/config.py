"""Run configuration: TOML file plus dotted ``--set`` overrides, validated strictly."""

from __future__ import annotations

import json
import sys
from pathlib import Path
from typing import Any, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from stainlab.errors import ConfigError

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class CorpusSection(_Section):
    name: str = "synth"
    n_patches: int = Field(400, ge=0)
    side: int = Field(32, ge=8)
    stain: Literal["ruifrok", "custom"] = "ruifrok"
    stain_vectors: Optional[list[list[float]]] = None
    stain_jitter_deg: float = Field(12.0, ge=0)
    intensity_jitter: float = Field(0.4, ge=0, lt=1)
    magnification: Literal["20x", "40x"] = "20x"


class CurationSection(_Section):
    n_targets: int = Field(16, ge=1)
    n_sources: int = Field(64, ge=1)
    exclude_list: list[int] = []
    n_feature_clusters: int = Field(8, ge=1)


class NstSection(_Section):
    alpha: float = Field(1.0, ge=0)
    gamma: float = Field(1e4, ge=0)
    n_iters: int = Field(300, ge=1)
    lr: float = Field(0.02, gt=0)
    precision_mode: Literal["full", "mixed"] = "full"
    batch: int = Field(64, ge=1)


class ScheduleSection(_Section):
    T: int = Field(200, ge=1)
    # unset endpoints pick the rescaled defaults for short schedules
    beta_start: Optional[float] = None
    beta_end: Optional[float] = None


class ModelSection(_Section):
    downsample_factor: int = 4
    latent_channels: int = Field(4, ge=1)
    widths: list[int] = [32, 64, 128]
    d_tau: int = Field(32, ge=1)
    d_attn: int = Field(32, ge=1)
    control_mode: Literal["add", "concat"] = "add"
    ae_epochs: int = Field(40, ge=0)
    ae_lr: float = Field(2e-3, gt=0)


class TrainSection(_Section):
    lr: float = Field(2e-3, gt=0)
    lr_schedule: Literal["constant", "cosine"] = "cosine"
    min_lr_ratio: float = Field(0.05, ge=0, le=1)
    weight_decay: float = Field(1e-2, ge=0)
    epochs: int = Field(300, ge=0)
    batch: int = Field(32, ge=1)
    decoder_frozen: bool = False
    sample_every: int = Field(0, ge=0)
    sample_steps: int = Field(20, ge=1)
    max_seconds: Optional[float] = Field(None, gt=0)


class EvalSection(_Section):
    n_steps: int = Field(20, ge=1)


class WsiSection(_Section):
    normalizer: Literal["identity", "reinhard", "ruifrok", "macenko", "vahadane", "stainfuser"] = "macenko"
    tile_side: int = Field(512, ge=8)
    batch: int = Field(4, ge=1)
    n_steps: int = Field(20, ge=1)
    mask_downsample: int = Field(16, ge=1)
    min_tissue_fraction: float = Field(0.1, ge=0, le=1)


class RunConfig(_Section):
    seed: int = 0
    workers: Optional[int] = Field(None, ge=1)
    corpus: CorpusSection = CorpusSection()
    curation: CurationSection = CurationSection()
    nst: NstSection = NstSection()
    schedule: ScheduleSection = ScheduleSection()
    model: ModelSection = ModelSection()
    train: TrainSection = TrainSection()
    eval: EvalSection = EvalSection()
    wsi: WsiSection = WsiSection()

    @field_validator("seed")
    @classmethod
    def _seed_range(cls, v: int) -> int:
        if not 0 <= v < 2**32:
            raise ValueError("seed must be in [0, 2^32)")
        return v

    def snapshot(self) -> dict:
        return self.model_dump(mode="json")


def _parse_value(text: str) -> Any:
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def apply_override(tree: dict, assignment: str) -> None:
    """Set ``a.b.c=value`` inside ``tree``; the value is read as a TOML literal, else as a string."""
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} is not key=value")
    key, raw = assignment.split("=", 1)
    parts = [p for p in key.strip().split(".") if p]
    if not parts:
        raise ConfigError(f"override {assignment!r} has an empty key")
    node = tree
    for p in parts[:-1]:
        nxt = node.setdefault(p, {})
        if not isinstance(nxt, dict):
            raise ConfigError(f"{key}: {p} is not a section")
        node = nxt
    node[parts[-1]] = _parse_value(raw.strip())


def load_config(path: str | Path | None = None, overrides: list[str] = (), seed: int | None = None,
                workers: int | None = None) -> RunConfig:
    tree: dict = {}
    if path is not None:
        try:
            tree = tomllib.loads(Path(path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"config {path} is not valid TOML: {exc}") from exc
    for o in overrides:
        apply_override(tree, o)
    if seed is not None:
        tree["seed"] = seed
    if workers is not None:
        tree["workers"] = workers
    try:
        return RunConfig.model_validate(tree)
    except ValidationError as exc:
        problems = "; ".join(f"{'.'.join(str(x) for x in e['loc'])}: {e['msg']}" for e in exc.errors())
        raise ConfigError(f"invalid config: {problems}") from exc


def write_snapshot(config: RunConfig, out_dir: str | Path, command: str) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "resolved_config.json"
    path.write_text(json.dumps({"command": command, **config.snapshot()}, indent=2, sort_keys=True) + "\n")
    return path
