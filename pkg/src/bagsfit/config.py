"""Experiment configuration as an INI file with fixed sections.

Every field has a default, so an empty file is a valid config. The
canonical text (all fields, fixed order) is what gets hashed and written
to run manifests; loading a manifest reproduces the run.
"""

from __future__ import annotations

import configparser
import hashlib
import math
from dataclasses import dataclass, field, fields, replace
from typing import Optional

from .rangeimage import BagsScheme, Intrinsics
from .ransac import RansacParams
from .scanner import ScannerConfig
from .segmentation import CorruptionConfig


class ConfigError(ValueError):
    pass


@dataclass
class DatasetConfig:
    seed: int = 0
    scenes: int = 4
    scans_per_scene: int = 9


@dataclass
class ScannerSection:
    sigma: float = 0.005
    noise_model: str = "constant"
    width: int = 640
    height: int = 480


@dataclass
class SegmentationSection:
    scheme: str = "k6"
    flip_rate: float = 0.0
    blur_radius: float = 0.0
    boundary_erode_dilate: int = 0
    temperature: Optional[float] = None
    corruption_seed: int = 0


@dataclass
class RansacSection:
    min_support: int = 1000
    inlier_dist: float = 0.03
    angle_score_deg: float = 30.0
    angle_expand_deg: float = 45.0
    p_outlook: float = 1e-4
    max_candidates_per_round: int = 20000
    locality_levels: int = 4
    refine: bool = True


@dataclass
class ExperimentConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    scanner: ScannerSection = field(default_factory=ScannerSection)
    segmentation: SegmentationSection = field(default_factory=SegmentationSection)
    ransac: RansacSection = field(default_factory=RansacSection)

    # -- derived component configs ---------------------------------------

    def scanner_config(self) -> ScannerConfig:
        s = self.scanner
        # Keep the default field of view at any resolution.
        base = ScannerConfig()
        k = Intrinsics(
            base.intrinsics.fx * s.width / base.width,
            base.intrinsics.fy * s.height / base.height,
            (s.width - 1) / 2,
            (s.height - 1) / 2,
        )
        return ScannerConfig(width=s.width, height=s.height, intrinsics=k, noise_sigma=s.sigma, noise_model=s.noise_model)

    def corruption(self) -> CorruptionConfig:
        s = self.segmentation
        return CorruptionConfig(
            flip_rate=s.flip_rate,
            blur_radius=s.blur_radius,
            boundary_erode_dilate=s.boundary_erode_dilate,
            temperature=s.temperature,
            seed=s.corruption_seed,
        )

    @property
    def scheme(self) -> BagsScheme:
        return BagsScheme(self.segmentation.scheme)

    def ransac_params(self, seed: int = 0) -> RansacParams:
        r = self.ransac
        return RansacParams(
            min_support=r.min_support,
            inlier_dist=r.inlier_dist,
            angle_score=math.radians(r.angle_score_deg),
            angle_expand=math.radians(r.angle_expand_deg),
            p_outlook=r.p_outlook,
            max_candidates_per_round=r.max_candidates_per_round,
            locality_levels=r.locality_levels,
            refine=r.refine,
            seed=seed,
        )

    def validate(self) -> "ExperimentConfig":
        """Build every component config once so bad values fail early."""
        d = self.dataset
        for name in ("scenes", "scans_per_scene"):
            if getattr(d, name) < 1:
                raise ConfigError(f"[dataset] {name}: must be >= 1")
        if d.scans_per_scene > 192:
            raise ConfigError("[dataset] scans_per_scene: at most 192 poses per scene")
        for section, build in (
            ("scanner", self.scanner_config),
            ("segmentation", self.corruption),
            ("segmentation", lambda: self.scheme),
            ("ransac", self.ransac_params),
        ):
            try:
                build()
            except ValueError as e:
                raise ConfigError(f"[{section}] {e}") from None
        return self

    # -- text form ----------------------------------------------------------

    def to_ini(self) -> str:
        lines = []
        for sec in fields(self):
            lines.append(f"[{sec.name}]")
            obj = getattr(self, sec.name)
            for f in fields(obj):
                lines.append(f"{f.name} = {_format(getattr(obj, f.name))}")
            lines.append("")
        return "\n".join(lines)

    @property
    def hash(self) -> str:
        return hashlib.sha256(self.to_ini().encode()).hexdigest()[:16]

    @classmethod
    def from_ini(cls, text: str, source: str = "<config>") -> "ExperimentConfig":
        parser = configparser.ConfigParser(interpolation=None)
        try:
            parser.read_string(text, source=source)
        except configparser.Error as e:
            raise ConfigError(f"{source}: {e}") from None
        cfg = cls()
        known = {f.name: f for f in fields(cls)}
        for section in parser.sections():
            if section == "manifest":
                continue
            if section not in known:
                raise ConfigError(f"{source}:{_line_of(text, section=section)}: unknown section [{section}]")
            obj = getattr(cfg, section)
            types = {f.name: f for f in fields(obj)}
            values = {}
            for key, raw in parser.items(section):
                where = f"{source}:{_line_of(text, section=section, key=key)}"
                if key not in types:
                    raise ConfigError(f"{where}: unknown key '{key}' in [{section}]")
                try:
                    values[key] = _parse(types[key].type, raw)
                except ValueError as e:
                    raise ConfigError(f"{where}: [{section}] {key} = {raw!r}: {e}") from None
            setattr(cfg, section, replace(obj, **values))
        return cfg.validate()

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            with open(path) as fh:
                text = fh.read()
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
        return cls.from_ini(text, str(path))


def _format(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse(type_name, raw: str):
    raw = raw.strip()
    t = str(type_name)
    if t.startswith("Optional"):
        if raw.lower() in ("none", ""):
            return None
        t = t[len("Optional[") : -1]
    if t == "bool":
        low = raw.lower()
        if low in ("true", "yes", "1", "on"):
            return True
        if low in ("false", "no", "0", "off"):
            return False
        raise ValueError("expected a boolean")
    if t == "int":
        try:
            return int(raw)
        except ValueError:
            raise ValueError("expected an integer") from None
    if t == "float":
        try:
            return float(raw)
        except ValueError:
            raise ValueError("expected a number") from None
    return raw


def _line_of(text: str, section: str, key: Optional[str] = None) -> int:
    current = None
    for n, line in enumerate(text.splitlines(), start=1):
        s = line.strip()
        if s.startswith("[") and s.endswith("]"):
            current = s[1:-1].strip()
            if key is None and current == section:
                return n
            continue
        if key is not None and current == section and "=" in s:
            if s.split("=", 1)[0].strip().lower() == key:
                return n
    return 0
