"""INI-style run configuration with typed, range-checked keys.

Every parse or validation error carries the offending line number and key.
``dump`` writes an effective configuration that ``loads`` reads back to an
equal ``Config``.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np

from . import detector as det_mod
from .acquisition import AcquisitionConfig
from .errors import DomainError
from .fusion import FusionConfig
from .scene import (
    BeamModel,
    Heightfield,
    Plane,
    ScanGrid,
    Scene,
    calibration_plate_scene,
    flat_plane_scene,
    objects_scene,
)


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None, key: str | None = None):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if key is not None:
            where.append(f"key '{key}'")
        super().__init__(f"{', '.join(where)}: {message}" if where else message)
        self.line = line
        self.key = key


@dataclass(frozen=True)
class Key:
    kind: str  # float | int | bool | str | choice | floats
    default: Any
    lo: float | None = None
    hi: float | None = None
    lo_open: bool = False
    choices: tuple[str, ...] = ()
    optional: bool = False  # default None means "take it from elsewhere"


def _f(default, lo=None, hi=None, lo_open=False, optional=False):
    return Key("float", default, lo, hi, lo_open, optional=optional)


def _i(default, lo=None, hi=None):
    return Key("int", default, lo, hi)


SCHEMA: dict[str, dict[str, Key]] = {
    "laser": {
        "rep_rate_hz": _f(10e6, 0, None, lo_open=True),
        "pulse_fwhm_ps": _f(0.1, 0),
        "nbar_at_target": _f(0.05, 0),
        "ghost_delays_ps": Key("floats", ()),
        "ghost_amplitudes": Key("floats", ()),
    },
    "detector": {
        "preset": Key("choice", "snspd1", choices=("snspd1", "snspd2")),
        "bias_ua": _f(20.0, 0, None, lo_open=True),
        "i_switch_ua": _f(None, 0, None, lo_open=True, optional=True),
        "ocde_max": _f(None, 0, 1, optional=True),
        "ocde_saturation_shape": _f(None, 0, None, lo_open=True, optional=True),
        "ocde_onset_exponent": _f(None, 0, None, lo_open=True, optional=True),
        "jitter_at_95pct_bias_ps": _f(None, 0, None, lo_open=True, optional=True),
        "jitter_bias_exponent": _f(None, 0, optional=True),
        "noise_voltage_scale": _f(None, 0, optional=True),
        "latency_shift_per_e_fold_ps": _f(None, 0, optional=True),
        "jitter_floor_ps": _f(None, 0, optional=True),
        "single_photon_jitter_ps": _f(None, 0, None, lo_open=True, optional=True),
        "fano_exponent": _f(None, 0, None, lo_open=True, optional=True),
    },
    "scene": {
        "kind": Key("choice", "plate", choices=("plane", "plate", "objects", "heightfield")),
        "distance_mm": _f(510.0, 0, None, lo_open=True),
        "reflectivity": _f(0.8, 0, 1),
        "lobe_exponent": _f(1.0, 0),
        "heightfield_csv": Key("str", ""),
        "heightfield_pitch_mm": _f(1.0, 0, None, lo_open=True),
        "heightfield_x0_mm": _f(0.0),
        "heightfield_y0_mm": _f(0.0),
        "spot_diameter_mm": _f(2.0, 0, None, lo_open=True),
        "subrays_per_pixel": _i(64, 1, 1_000_000),
    },
    "scan": {
        "vx_min": _f(-9.0),
        "vx_max": _f(9.0),
        "nx": _i(64, 1, 100_000),
        "vy_min": _f(-7.0),
        "vy_max": _f(7.0),
        "ny": _i(64, 1, 100_000),
        "volts_to_radians": _f(0.025, 0, None, lo_open=True),
        "t0_ps": _f(0.0),
        "mirror_separation_mm": _f(0.0, 0),
    },
    "tdc": {
        "bin_ps": _f(1.0, 1.0),
        "jitter_fwhm_ps": _f(1.5, 0),
        "sync_jitter_fwhm_ps": _f(1.0, 0),
        "fiber_broadening_fwhm_ps": _f(14.03, 0),
        "integration_time_s": _f(0.001, 0, None, lo_open=True),
        "background_rate_hz": _f(0.0, 0),
        "gate_duty": _f(0.1, 0, 1),
        "window_halfwidth_ps": _f(2000.0, 0, None, lo_open=True),
    },
    "analysis": {
        "method": Key("choice", "lsq", choices=("lsq", "poisson")),
        "min_prominence": _f(3.0, 0),
        "min_separation_ps": _f(50.0, 0),
        "smooth_ps": _f(3.0, 0),
        "gate_min_ps": _f(None, optional=True),
        "gate_max_ps": _f(None, optional=True),
        "tags_format": Key("choice", "csv", choices=("csv", "binary", "none")),
    },
    "fusion": {
        "median_radius": _i(1, 1, 50),
        "invert_jitter": Key("bool", True),
        "lowpass_jitter": _f(None, 0, None, lo_open=True, optional=True),
        "colormap": Key("choice", "grayscale", choices=("grayscale", "thermal")),
        "mesh_channel": Key("choice", "fused", choices=("fused", "peak_height", "fwhm_ps")),
        "max_edge_mm": _f(None, 0, None, lo_open=True, optional=True),
    },
    "study": {
        "bias_points": _i(20, 2, 10_000),
        "photons_per_point": _i(200_000, 1000, 10**9),
        "nbar_min": _f(0.01, 0, None, lo_open=True),
        "nbar_max": _f(1000.0, 0, None, lo_open=True),
        "points_per_decade": _i(25, 1, 1000),
        "nbar_extra": Key("floats", (545.0,)),
        "nbar_pulses_per_point": _i(100_000, 10_000, 10**10),
        "resolution_rows": _i(64, 4, 100_000),
        "resolution_flat_cols": _i(64, 4, 100_000),
        "resolution_feature_cols": _i(8, 0, 100_000),
        "resolution_pulses": _i(10_000, 1, 10**9),
        "resolution_factors": Key("floats", (1.0, 10.0, 100.0)),
        "resolution_nbar_at_target": _f(0.055, 0, None, lo_open=True),
        "resolution_window_halfwidth_ps": _f(300.0, 0, None, lo_open=True),
    },
}


def _parse_value(rule: Key, raw: str, line: int, key: str):
    raw = raw.strip()
    try:
        if rule.kind == "float":
            v = float(raw)
            if not math.isfinite(v):
                raise ValueError
        elif rule.kind == "int":
            f = float(raw)
            if not f.is_integer():
                raise ValueError
            v = int(f)
        elif rule.kind == "bool":
            low = raw.lower()
            if low not in ("true", "false", "yes", "no", "1", "0", "on", "off"):
                raise ValueError
            return low in ("true", "yes", "1", "on")
        elif rule.kind == "choice":
            if raw.lower() not in rule.choices:
                raise ConfigError(f"'{raw}' is not one of {', '.join(rule.choices)}", line, key)
            return raw.lower()
        elif rule.kind == "floats":
            if not raw:
                return ()
            v = tuple(float(x) for x in raw.split(","))
            if not all(math.isfinite(x) for x in v):
                raise ValueError
            return v
        else:
            return raw
    except ConfigError:
        raise
    except ValueError:
        raise ConfigError(f"cannot read '{raw}' as {rule.kind}", line, key) from None
    _check_range(rule, v, line, key)
    return v


def _check_range(rule: Key, v, line, key):
    if rule.lo is not None and (v < rule.lo or (rule.lo_open and v == rule.lo)):
        op = ">" if rule.lo_open else ">="
        raise ConfigError(f"value {v} out of range, must be {op} {rule.lo}", line, key)
    if rule.hi is not None and v > rule.hi:
        raise ConfigError(f"value {v} out of range, must be <= {rule.hi}", line, key)


def _format(rule: Key, v) -> str:
    if rule.kind == "bool":
        return "true" if v else "false"
    if rule.kind == "floats":
        return ", ".join(repr(float(x)) for x in v)
    if rule.kind == "float":
        return repr(float(v))
    return str(v)


@dataclass
class Config:
    values: dict[str, dict[str, Any]]
    source: str = "<defaults>"

    def __getitem__(self, section: str) -> dict[str, Any]:
        return self.values[section]

    def __eq__(self, other):
        return isinstance(other, Config) and self.values == other.values

    # --- builders -------------------------------------------------------
    def detector(self) -> det_mod.DetectorModel:
        d = self["detector"]
        model = det_mod.preset(d["preset"])
        mapping = {
            "i_switch_ua": "i_switch",
            "ocde_max": "ocde_max",
            "ocde_saturation_shape": "ocde_saturation_shape",
            "ocde_onset_exponent": "ocde_onset_exponent",
            "jitter_at_95pct_bias_ps": "jitter_at_95pct_bias",
            "jitter_bias_exponent": "jitter_bias_exponent",
            "noise_voltage_scale": "noise_voltage_scale",
            "latency_shift_per_e_fold_ps": "latency_shift_per_e_fold",
            "jitter_floor_ps": "jitter_floor",
            "single_photon_jitter_ps": "single_photon_jitter",
            "fano_exponent": "fano_exponent",
        }
        over = {mapping[k]: v for k, v in d.items() if k in mapping and v is not None}
        return model.with_overrides(**over) if over else model

    @property
    def bias(self) -> float:
        return self["detector"]["bias_ua"]

    def acquisition(self) -> AcquisitionConfig:
        las, tdc = self["laser"], self["tdc"]
        return AcquisitionConfig(
            rep_rate=las["rep_rate_hz"],
            integration_time=tdc["integration_time_s"],
            tdc_bin=tdc["bin_ps"],
            tdc_jitter_fwhm=tdc["jitter_fwhm_ps"],
            sync_jitter_fwhm=tdc["sync_jitter_fwhm_ps"],
            laser_pulse_fwhm=las["pulse_fwhm_ps"],
            fiber_broadening_fwhm=tdc["fiber_broadening_fwhm_ps"],
            background_rate=tdc["background_rate_hz"],
            gate_duty=tdc["gate_duty"],
            nbar_at_target=las["nbar_at_target"],
            window_halfwidth=tdc["window_halfwidth_ps"],
            ghosts=tuple(zip(las["ghost_delays_ps"], las["ghost_amplitudes"])),
        )

    def grid(self) -> ScanGrid:
        s = self["scan"]
        return ScanGrid(
            tuple(np.linspace(s["vx_min"], s["vx_max"], s["nx"])),
            tuple(np.linspace(s["vy_min"], s["vy_max"], s["ny"])),
            volts_to_radians=(s["volts_to_radians"], s["volts_to_radians"]),
            t_0=s["t0_ps"],
            mirror_separation=s["mirror_separation_mm"],
        )

    def beam(self) -> BeamModel:
        s = self["scene"]
        return BeamModel(s["spot_diameter_mm"], s["subrays_per_pixel"])

    def scene(self, base_dir: Path | None = None) -> Scene:
        s = self["scene"]
        d = s["distance_mm"]
        if s["kind"] == "plane":
            return flat_plane_scene(d, s["reflectivity"], s["lobe_exponent"])
        if s["kind"] == "plate":
            return calibration_plate_scene(d)
        if s["kind"] == "objects":
            return objects_scene(d)
        path = Path(s["heightfield_csv"])
        if not s["heightfield_csv"]:
            raise ConfigError("scene kind 'heightfield' needs heightfield_csv", key="heightfield_csv")
        if not path.is_absolute() and base_dir is not None:
            path = base_dir / path
        hf = Heightfield.from_csv(
            path,
            reflectivity=s["reflectivity"],
            lobe=s["lobe_exponent"],
            x0=s["heightfield_x0_mm"],
            y0=s["heightfield_y0_mm"],
            pitch=s["heightfield_pitch_mm"],
            base_z=d,
        )
        backdrop = Plane(s["reflectivity"], s["lobe_exponent"], (0.0, 0.0, d + 1.0), (0.0, 0.0, -1.0))
        return Scene((hf, backdrop))

    def fusion(self) -> FusionConfig:
        f = self["fusion"]
        return FusionConfig(f["median_radius"], f["invert_jitter"], f["lowpass_jitter"])

    def analysis_gate(self):
        a = self["analysis"]
        if a["gate_min_ps"] is None and a["gate_max_ps"] is None:
            return None
        return (-math.inf if a["gate_min_ps"] is None else a["gate_min_ps"], math.inf if a["gate_max_ps"] is None else a["gate_max_ps"])

    def with_values(self, **sections) -> "Config":
        """Copy with ``section={key: value}`` replacements (validated)."""
        vals = {s: dict(kv) for s, kv in self.values.items()}
        for sec, kv in sections.items():
            for k, v in kv.items():
                if sec not in SCHEMA or k not in SCHEMA[sec]:
                    raise ConfigError(f"unknown key in [{sec}]", key=k)
                vals[sec][k] = v
        out = Config(vals, self.source)
        validate(out)
        return out

    def text(self) -> str:
        return dumps(self)

    def digest(self) -> str:
        return hashlib.sha256(dumps(self).encode()).hexdigest()


def defaults() -> Config:
    return Config({sec: {k: rule.default for k, rule in keys.items()} for sec, keys in SCHEMA.items()})


def validate(cfg: Config, lines: dict[tuple[str, str], int] | None = None) -> None:
    """Cross-field checks, and a dry build of every object so constructor errors name a key."""
    lines = lines or {}

    def fail(sec, key, msg):
        raise ConfigError(msg, lines.get((sec, key)), key)

    for sec, keys in SCHEMA.items():
        for k, rule in keys.items():
            v = cfg.values[sec][k]
            if v is None:
                if not rule.optional:
                    fail(sec, k, "value required")
                continue
            if rule.kind in ("float", "int"):
                _check_range(rule, v, lines.get((sec, k)), k)
    las, s = cfg["laser"], cfg["scan"]
    if len(las["ghost_delays_ps"]) != len(las["ghost_amplitudes"]):
        fail("laser", "ghost_amplitudes", "needs one amplitude per ghost delay")
    if any(a < 0 for a in las["ghost_amplitudes"]):
        fail("laser", "ghost_amplitudes", "amplitudes must be >= 0")
    for axis in ("x", "y"):
        if s[f"n{axis}"] > 1 and not s[f"v{axis}_max"] > s[f"v{axis}_min"]:
            fail("scan", f"v{axis}_max", f"must exceed v{axis}_min")
    d = cfg["detector"]
    try:
        model = cfg.detector()
    except DomainError as e:
        overridden = [k for k in d if k not in ("preset", "bias_ua") and d[k] is not None]
        fail("detector", overridden[-1] if overridden else "preset", str(e))
    if d["bias_ua"] > model.i_switch:
        fail("detector", "bias_ua", f"bias {d['bias_ua']} uA exceeds the switching current {model.i_switch} uA")
    st = cfg["study"]
    if not st["nbar_max"] > st["nbar_min"]:
        fail("study", "nbar_max", "must exceed nbar_min")
    if not st["resolution_factors"] or any(f <= 0 for f in st["resolution_factors"]):
        fail("study", "resolution_factors", "need positive integration-time factors")


def loads(text: str, source: str = "<string>") -> Config:
    cfg = defaults()
    cfg.source = source
    section = None
    seen: dict[tuple[str, str], int] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line[0] in "#;":
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise ConfigError(f"malformed section header '{line}'", lineno)
            section = line[1:-1].strip().lower()
            if section not in SCHEMA:
                raise ConfigError(f"unknown section [{section}]", lineno)
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got '{line}'", lineno)
        key, value = (p.strip() for p in line.split("=", 1))
        key = key.lower()
        if section is None:
            raise ConfigError("key outside any section", lineno, key)
        if key not in SCHEMA[section]:
            raise ConfigError(f"unknown key in [{section}]", lineno, key)
        if (section, key) in seen:
            raise ConfigError(f"duplicate key (first set on line {seen[(section, key)]})", lineno, key)
        seen[(section, key)] = lineno
        rule = SCHEMA[section][key]
        if rule.optional and value.lower() in ("", "none"):
            cfg.values[section][key] = None
            continue
        cfg.values[section][key] = _parse_value(rule, value, lineno, key)
    validate(cfg, seen)
    return cfg


def load(path) -> Config:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise OSError(f"cannot read config {path}: {e.strerror}") from e
    return loads(text, str(path))


def dumps(cfg: Config) -> str:
    out = []
    for sec, keys in SCHEMA.items():
        out.append(f"[{sec}]")
        for k, rule in keys.items():
            v = cfg.values[sec][k]
            out.append(f"{k} = {'none' if v is None else _format(rule, v)}")
        out.append("")
    return "\n".join(out)


def paper_scale(cfg: Config) -> Config:
    """Full-scale acquisition: 100 ms per pixel and about 186,000 pixels."""
    return cfg.with_values(
        tdc={"integration_time_s": 0.1},
        scan={"nx": 432, "ny": 431},
        study={
            "resolution_rows": 431,
            "resolution_flat_cols": 432,
            "resolution_pulses": 1_000_000,
            "resolution_factors": (0.01, 0.1, 1.0),
        },
    )

