"""Flat key = value run configuration (UTF-8, ``#`` comments, one pair per
line) merged with command-line overrides.  Unknown keys are rejected; every
key has a documented default; the resolved config is echoed into each run's
output directory."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .nn import CrinConfig
from .synth import SynthConfig
from .train import TrainConfig, config_fingerprint


class ConfigError(ValueError):
    pass


# key -> (default string, help)
DEFAULTS: dict[str, tuple[str, str]] = {
    "model.stage_widths": ("12,24,48,96", "per-stage channel counts, shallow to deep"),
    "model.task_split": ("1,1,1", "building/shared/road channel proportions"),
    "model.branch_kernels": ("skip,7,11,21", "scale branch set (skip plus odd kernels)"),
    "model.init_kernel": ("5", "depthwise kernel of the scale block's initial conv"),
    "model.mlp_reduction": ("4", "hidden-width divisor of the attention MLP"),
    "model.in_channels": ("3", "input image channels"),
    "model.use_norm": ("true", "batch-norm + ReLU after convolutions"),
    "model.dtype": ("float32", "float32 or float64 (verification mode)"),
    "train.base_lr": ("0.001", "initial learning rate"),
    "train.poly_power": ("0.9", "poly schedule exponent"),
    "train.max_iters": ("2000", "total optimization iterations"),
    "train.batch_size": ("4", "samples per iteration"),
    "train.weight_decay": ("0.01", "decoupled weight decay"),
    "train.beta1": ("0.9", "Adam first-moment decay"),
    "train.beta2": ("0.999", "Adam second-moment decay"),
    "train.adam_eps": ("1e-8", "Adam denominator epsilon"),
    "train.seed": ("0", "training RNG seed"),
    "train.eval_interval": ("500", "iterations between validation passes"),
    "train.checkpoint_interval": ("500", "iterations between checkpoints"),
    "train.augment": ("true", "apply random rotate/flip/scale augmentation"),
    "synth.train_scenes": ("200", "synthetic training scenes"),
    "synth.val_scenes": ("50", "synthetic validation scenes"),
    "synth.test_scenes": ("0", "synthetic test scenes"),
    "synth.scene_size": ("128", "scene side length in pixels"),
    "synth.road_count": ("2", "road corridors per scene"),
    "synth.road_width": ("4,8", "road width range (pixels)"),
    "synth.building_count": ("8", "buildings per scene"),
    "synth.building_size": ("10,24", "building side-length range (pixels)"),
    "synth.adjacency_ratio": ("0.8", "fraction of buildings placed near a road"),
    "synth.noise": ("0.06", "per-pixel uniform noise amplitude"),
    "synth.seed": ("0", "scene generator seed"),
    "eval.threshold": ("0.5", "probability threshold for metric binarization"),
}


class RunConfig:
    def __init__(self, values: dict[str, str]):
        self.values = values

    @classmethod
    def resolve(cls, config_file: str | None = None,
                overrides: list[str] | None = None) -> "RunConfig":
        values = {k: v for k, (v, _) in DEFAULTS.items()}
        if config_file:
            for lineno, line in enumerate(
                    Path(config_file).read_text(encoding="utf-8").splitlines(), 1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ConfigError(f"{config_file}:{lineno}: expected key = value")
                key, val = (s.strip() for s in line.split("=", 1))
                if key not in DEFAULTS:
                    raise ConfigError(f"{config_file}:{lineno}: unknown key {key!r}")
                values[key] = val
        for ov in overrides or []:
            if "=" not in ov:
                raise ConfigError(f"override {ov!r}: expected key=value")
            key, val = (s.strip() for s in ov.split("=", 1))
            if key not in DEFAULTS:
                raise ConfigError(f"override: unknown key {key!r}")
            values[key] = val
        return cls(values)

    # typed getters -----------------------------------------------------
    def _get(self, key: str) -> str:
        try:
            return self.values[key]
        except KeyError:
            raise ConfigError(f"unknown key {key!r}") from None

    def get_int(self, key: str) -> int:
        try:
            return int(self._get(key))
        except ValueError:
            raise ConfigError(f"{key}: {self._get(key)!r} is not an integer") from None

    def get_float(self, key: str) -> float:
        try:
            return float(self._get(key))
        except ValueError:
            raise ConfigError(f"{key}: {self._get(key)!r} is not a number") from None

    def get_bool(self, key: str) -> bool:
        v = self._get(key).lower()
        if v in ("true", "1", "yes"):
            return True
        if v in ("false", "0", "no"):
            return False
        raise ConfigError(f"{key}: {self._get(key)!r} is not a boolean")

    def get_int_list(self, key: str) -> tuple[int, ...]:
        try:
            return tuple(int(s) for s in self._get(key).split(","))
        except ValueError:
            raise ConfigError(f"{key}: {self._get(key)!r} is not an integer list") from None

    # derived configs ----------------------------------------------------
    def to_text(self) -> str:
        lines = [f"{k} = {self.values[k]}" for k in sorted(self.values)]
        return "\n".join(lines) + "\n"

    def fingerprint(self) -> str:
        return config_fingerprint(self.to_text())

    def dtype(self):
        name = self._get("model.dtype")
        if name == "float32":
            return np.float32
        if name == "float64":
            return np.float64
        raise ConfigError(f"model.dtype: {name!r} must be float32 or float64")

    def crin_config(self) -> CrinConfig:
        split = self.get_int_list("model.task_split")
        total = sum(split)
        kernels = []
        for tok in self._get("model.branch_kernels").split(","):
            tok = tok.strip()
            kernels.append(tok if tok == "skip" else int(tok))
        try:
            return CrinConfig(
                stage_widths=self.get_int_list("model.stage_widths"),
                task_split=tuple(s / total for s in split),
                branch_kernels=tuple(kernels),
                init_kernel=self.get_int("model.init_kernel"),
                mlp_reduction=self.get_int("model.mlp_reduction"),
                in_channels=self.get_int("model.in_channels"),
                use_norm=self.get_bool("model.use_norm"),
            )
        except ValueError as e:
            raise ConfigError(str(e)) from e

    def train_config(self) -> TrainConfig:
        try:
            return TrainConfig(
                base_lr=self.get_float("train.base_lr"),
                poly_power=self.get_float("train.poly_power"),
                max_iters=self.get_int("train.max_iters"),
                batch_size=self.get_int("train.batch_size"),
                weight_decay=self.get_float("train.weight_decay"),
                beta1=self.get_float("train.beta1"),
                beta2=self.get_float("train.beta2"),
                adam_eps=self.get_float("train.adam_eps"),
                seed=self.get_int("train.seed"),
                eval_interval=self.get_int("train.eval_interval"),
                checkpoint_interval=self.get_int("train.checkpoint_interval"),
            )
        except ValueError as e:
            raise ConfigError(str(e)) from e

    def synth_config(self) -> SynthConfig:
        try:
            return SynthConfig(
                scene_size=self.get_int("synth.scene_size"),
                road_count=self.get_int("synth.road_count"),
                road_width=self.get_int_list("synth.road_width"),
                building_count=self.get_int("synth.building_count"),
                building_size=self.get_int_list("synth.building_size"),
                adjacency_ratio=self.get_float("synth.adjacency_ratio"),
                noise=self.get_float("synth.noise"),
                seed=self.get_int("synth.seed"),
            )
        except ValueError as e:
            raise ConfigError(str(e)) from e

    def echo(self, out_dir, tool_version: str) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "resolved_config.cfg").write_text(
            f"# crin {tool_version}\n" + self.to_text(), encoding="utf-8")
