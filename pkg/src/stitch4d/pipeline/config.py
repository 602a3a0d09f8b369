"""Pipeline configuration loaded from plain ``key = value`` files.

Keys prefixed ``refine.`` are forwarded to :class:`RefineConfig`; every
other key must name a :class:`PipelineConfig` field.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from ..errors import InvalidArgumentError
from ..io import parse_value, read_config
from ..refine import RefineConfig

_TEXT_KEYS = {"data_dir", "work_dir", "out_dir", "source_view", "target_view", "completer"}


@dataclass
class PipelineConfig:
    data_dir: str = "data"
    work_dir: str = "work"
    out_dir: str = "out"
    source_view: str = "src"
    target_view: str = "tgt"
    frames: tuple | None = None  # None: every frame of the source view
    width: int = 672
    height: int = 384
    completer: str = "oracle"  # oracle | external
    exchange_timeout: float = 60.0
    poll_interval: float = 0.05
    # oracle depth corruption, D_ff = (D - ff_shift) / ff_scale * (1 + noise)
    ff_scale: float = 1.3
    ff_shift: float = 0.2
    ff_noise: float = 0.0
    seed: int = 0
    preprocess: bool = False
    spike_window: int = 7
    spike_mad_k: float = 3.0
    edge_map: bool = False
    mask_refine: bool = False
    use_bg_layers: bool = True
    curtain_free_ratio: float = 1.05
    curtain_thickness: int = 1
    curtain_visibility_tol: float = 0.01
    rel_depth_tol: float = 0.03
    min_component: int = 16
    curtain_min_component: int = 0
    curtain_smooth_sigma: float = 0.0
    depth_tol: float = 0.05
    vote_frac: float = 0.5
    occlusion_margin: float = 0.05
    workers: int = 1
    refine: RefineConfig = field(default_factory=RefineConfig)

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise InvalidArgumentError("resolution must be positive")
        if self.completer not in ("oracle", "external"):
            raise InvalidArgumentError("completer must be 'oracle' or 'external'")
        if self.workers < 1:
            raise InvalidArgumentError("workers must be >= 1")
        if isinstance(self.frames, int):
            self.frames = (self.frames,)

    def check_paths(self) -> None:
        manifest = Path(self.data_dir) / "cameras.json"
        if not manifest.exists():
            raise InvalidArgumentError(f"camera manifest not found: {manifest}")

    def summary(self) -> dict:
        d = asdict(self)
        d["refine"] = {k: list(v) if isinstance(v, tuple) else v for k, v in d["refine"].items()}
        if d["frames"] is not None:
            d["frames"] = list(d["frames"])
        # paths vary between otherwise identical runs
        for key in ("data_dir", "work_dir", "out_dir"):
            d.pop(key)
        return d

    @classmethod
    def from_dict(cls, values: dict, base_dir: Path | None = None) -> "PipelineConfig":
        own = {f.name for f in fields(cls)} - {"refine"}
        ref_names = {f.name for f in fields(RefineConfig)}
        kw, ref_kw = {}, {}
        for key, value in values.items():
            if key in _TEXT_KEYS:
                value = str(value)
            elif isinstance(value, str):
                value = parse_value(value)
            if key.startswith("refine."):
                name = key[len("refine."):]
                if name not in ref_names:
                    raise InvalidArgumentError(f"unknown refine option {name!r}")
                ref_kw[name] = value
            elif key in own:
                kw[key] = value
            else:
                raise InvalidArgumentError(f"unknown config key {key!r}")
        if base_dir is not None:
            for key in ("data_dir", "work_dir", "out_dir"):
                if key in kw and not Path(str(kw[key])).is_absolute():
                    kw[key] = str(Path(base_dir) / str(kw[key]))
        return cls(refine=RefineConfig(**ref_kw), **kw)

    @classmethod
    def from_file(cls, path, overrides: dict | None = None) -> "PipelineConfig":
        values = read_config(path)
        values.update(overrides or {})
        return cls.from_dict(values, Path(path).parent)
