"""Run configuration: JSON file + flag overrides -> one validated object.

Precedence is built-in default < config file < explicit command-line flag.
Every run writes a manifest recording the effective configuration and sha256
hashes of inputs and outputs, so results stay attributable.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from .errors import ConfigError


@dataclass
class PipelineConfig:
    # preprocessing
    percentile_lo: float = 1.0
    percentile_hi: float = 99.0
    target_spacing_um: float = 1.0
    # registration
    demons_sigma: float = 1.3
    demons_max_iters: int = 50
    demons_mse_rel_tol: float = 1e-4
    demons_step_cap: float = 1.0
    # architecture
    arch: str = "3*C 3x3x3 - P - 2*C 3x3 - P - NN"
    fov: tuple[int, int, int] = (33, 33, 7)
    roi: tuple[int, int, int] = (5, 5, 1)
    hidden_width: int = 1024
    dropout_rate: float = 0.5
    # training
    epochs: int = 100
    learning_rate: float = 1e-4
    finetune_epochs: int = 0
    finetune_learning_rate: float = 1e-6
    batch_size: int = 1000
    n_train_patches: int = 20000
    n_val_patches: int = 2000
    patch_balance: float = 0.5
    # segmentation
    tile_batch: int = 256
    min_component_voxels: int = 100
    mc_samples: int = 20
    # morphometry
    capillary_max_diameter_um: float = 10.0
    # general
    rng_seed: int = 0

    def validate(self) -> None:
        if not 0.0 <= self.percentile_lo < self.percentile_hi <= 100.0:
            raise ConfigError(
                f"percentile band [{self.percentile_lo}, {self.percentile_hi}] invalid"
            )
        if self.target_spacing_um <= 0:
            raise ConfigError("target_spacing_um must be positive")
        if self.demons_sigma <= 0 or self.demons_max_iters < 1:
            raise ConfigError("demons parameters out of range")
        if len(self.fov) != 3 or len(self.roi) != 3:
            raise ConfigError("fov and roi must be 3 integers each")
        if any(f < r for f, r in zip(self.fov, self.roi)):
            raise ConfigError(f"roi {self.roi} exceeds fov {self.fov}")
        if any((f - r) % 2 for f, r in zip(self.fov, self.roi)):
            raise ConfigError("fov-roi margins must be symmetric (even gaps)")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError("dropout_rate must be in [0, 1)")
        if self.epochs < 0 or self.finetune_epochs < 0:
            raise ConfigError("epoch counts must be >= 0")
        if self.learning_rate <= 0 or self.finetune_learning_rate <= 0:
            raise ConfigError("learning rates must be positive")
        if self.batch_size < 1 or self.tile_batch < 1:
            raise ConfigError("batch sizes must be >= 1")
        if not 0.0 <= self.patch_balance <= 1.0:
            raise ConfigError("patch_balance must be in [0, 1]")
        if self.mc_samples < 2:
            raise ConfigError("mc_samples must be >= 2")
        if self.min_component_voxels < 1:
            raise ConfigError("min_component_voxels must be >= 1")
        if self.capillary_max_diameter_um <= 0:
            raise ConfigError("capillary_max_diameter_um must be positive")


_TUPLE_FIELDS = {"fov", "roi"}


def load_config(path=None, overrides: dict | None = None) -> PipelineConfig:
    """Merge defaults, an optional JSON file, and explicit overrides."""
    values: dict = {}
    if path is not None:
        path = Path(path)
        try:
            with open(path) as fh:
                data = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"config {path} must hold a JSON object")
        values.update(data)
    if overrides:
        values.update({k: v for k, v in overrides.items() if v is not None})

    known = {f.name for f in fields(PipelineConfig)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    for key in _TUPLE_FIELDS & set(values):
        try:
            values[key] = tuple(int(v) for v in values[key])
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"config key {key} must be a list of ints") from exc
    cfg = PipelineConfig(**values)
    cfg.validate()
    return cfg


def save_config(cfg: PipelineConfig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(config_dict(cfg), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def config_dict(cfg: PipelineConfig) -> dict:
    d = asdict(cfg)
    for key in _TUPLE_FIELDS:
        d[key] = list(d[key])
    return d


# ---------------------------------------------------------------------------
# run manifests
# ---------------------------------------------------------------------------


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(outdir, command: str, cfg: PipelineConfig,
                   inputs: list, outputs: list) -> Path:
    """Record what ran: command, effective config, input/output hashes."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "config": config_dict(cfg),
        "inputs": {str(p): sha256_file(p) for p in inputs if Path(p).is_file()},
        "outputs": {str(p): sha256_file(p) for p in outputs if Path(p).is_file()},
    }
    path = outdir / "manifest.json"
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path
