"""Run configuration: a flat ``key = value`` text format with ``#`` comments."""
from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Optional


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    seed: int = 0
    threads: int = 0                  # 0: all cores and a separate back-end thread
    # sensor ingest
    pair_tolerance: float = 0.05
    normals_k: int = 10
    # tracking
    lambda_r: float = 0.1
    max_iterations: int = 30
    tolerance: float = 1e-5
    min_inliers: int = 50
    max_dist: float = 1.0
    robust: bool = True
    use_weights: bool = True
    weight_mode: str = "exact"
    covis_threshold: float = 0.85
    submap_window: int = 10
    # back-end
    lambda1: float = 0.5
    lambda2: float = 0.01
    pose_iters: int = 5
    map_iters: int = 30
    batch_size: int = 5
    backend_window: int = 5
    lr_pose: float = 5e-4            # small: the rendered loss is only cm-accurate here
    lr_means: float = 1.6e-4
    lr_log_scales: float = 5e-3
    lr_quats: float = 1e-3
    lr_opacity: float = 5e-2
    lr_colors: float = 2.5e-3
    opacity_floor: float = 0.05
    color_only_stride: int = 8
    cgc_children: int = 0
    freeze_anchored: bool = True
    skybox_count: int = 1000
    skybox_radius: float = 100.0

    def serialize(self) -> str:
        lines = []
        for f in fields(self):
            lines.append(f"{f.name} = {_format(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"

    @classmethod
    def parse(cls, text: str, base: Optional["RunConfig"] = None) -> "RunConfig":
        cfg = base if base is not None else cls()
        types = {f.name: f.type for f in fields(cls)}
        values = {f.name: getattr(cfg, f.name) for f in fields(cls)}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ConfigError(f"line {lineno}: unknown config key {key!r}")
            try:
                values[key] = _convert(value, types[key])
            except ValueError as exc:
                raise ConfigError(f"line {lineno}: {key}: {exc}") from None
        return cls(**values)

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path) as fh:
            return cls.parse(fh.read())

    def update(self, **overrides) -> "RunConfig":
        values = {f.name: getattr(self, f.name) for f in fields(self)}
        for k, v in overrides.items():
            if v is not None:
                values[k] = v
        return RunConfig(**values)


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def _convert(value: str, typ):
    typ = typ if isinstance(typ, str) else typ.__name__
    if typ == "bool":
        low = value.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {value!r}")
    if typ == "int":
        return int(value)
    if typ == "float":
        return float(value)
    return value


def help_epilog() -> str:
    cfg = RunConfig()
    width = max(len(f.name) for f in fields(cfg))
    rows = [f"  {f.name.ljust(width)}  {_format(getattr(cfg, f.name))}" for f in fields(cfg)]
    return "config keys (key = value) and defaults:\n" + "\n".join(rows)
