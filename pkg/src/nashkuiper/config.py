"""Run configuration as a flat ``key = value`` text file.

Grammar, one entry per line::

    # comment
    section.key = value

Blank lines and ``#`` comments are ignored.  Values are parsed as ``int``,
``float``, ``true``/``false`` or left as strings.  Known sections are
``grid``, ``metric``, ``immersion``, ``stage``, ``schedule``, ``run``,
``output`` and ``export``; unknown keys are an error so typos surface.
"""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .driver import Schedule
from .errors import NKError
from .stage import StageParams

OUTPUT_ENV = "NASHKUIPER_OUTPUT_DIR"

METRIC_PRESETS = ("flat",)
IMMERSION_PRESETS = ("flat-half", "flat-zero-defect")


def parse_value(text: str):
    t = text.strip()
    low = t.lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    if low in ("none", "null", ""):
        return None
    try:
        return int(t)
    except ValueError:
        pass
    try:
        return float(t)
    except ValueError:
        return t


def parse_lines(lines) -> dict[str, object]:
    out: dict[str, object] = {}
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise NKError("config-invalid", f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key or "." not in key:
            raise NKError("config-invalid", f"line {lineno}: key {key!r} needs a 'section.' prefix")
        out[key] = parse_value(value)
    return out


@dataclass
class RunConfig:
    n: int = 513
    max_deriv: int = 6
    metric: str = "flat"
    metric_file: str | None = None
    immersion: str = "flat-half"
    immersion_scale: float = 0.5
    immersion_file: str | None = None
    stage: StageParams = field(default_factory=StageParams)
    schedule: Schedule = field(default_factory=Schedule)
    alpha: float = 0.1
    epsilon: float = 1.0
    n_iters: int = 1
    initial_ratio: float | None = None
    measured_C: float = 1.0
    sigma_floor: float = 1.0
    g_seminorm: float | None = None
    check_schedule: bool = True
    output_dir: str = "nashkuiper-out"
    export_obj: bool = False
    export_vtk: bool = False
    snapshots: bool = True

    def resolved_output_dir(self) -> Path:
        return Path(os.environ.get(OUTPUT_ENV) or self.output_dir)

    def as_dict(self) -> dict:
        d = asdict(self)
        d["schedule"] = self.schedule.as_dict()
        return d

    def validate(self) -> None:
        if self.metric not in METRIC_PRESETS and not self.metric_file:
            raise NKError("config-invalid", f"metric preset {self.metric!r} unknown; choose {METRIC_PRESETS} or metric.file")
        if self.immersion not in IMMERSION_PRESETS and not self.immersion_file:
            raise NKError(
                "config-invalid", f"immersion preset {self.immersion!r} unknown; choose {IMMERSION_PRESETS} or immersion.file"
            )
        if self.n_iters < 0:
            raise NKError("config-invalid", "run.n_iters must be >= 0")
        if not (0 < self.immersion_scale < 1):
            raise NKError("config-invalid", "immersion.scale must lie in (0, 1) to be short")
        self.schedule.check_alpha(self.alpha)
        if self.stage.normalization not in ("delta", "increment"):
            raise NKError("config-invalid", f"stage.normalization {self.stage.normalization!r} unknown")


_TOP = {
    "grid.n": "n",
    "grid.max_deriv": "max_deriv",
    "metric.preset": "metric",
    "metric.file": "metric_file",
    "immersion.preset": "immersion",
    "immersion.scale": "immersion_scale",
    "immersion.file": "immersion_file",
    "run.alpha": "alpha",
    "run.epsilon": "epsilon",
    "run.n_iters": "n_iters",
    "run.initial_ratio": "initial_ratio",
    "run.check_schedule": "check_schedule",
    "schedule.C": "measured_C",
    "schedule.sigma_floor": "sigma_floor",
    "schedule.g_seminorm": "g_seminorm",
    "output.dir": "output_dir",
    "output.snapshots": "snapshots",
    "export.obj": "export_obj",
    "export.vtk": "export_vtk",
}
_STAGE_KEYS = {f.name for f in fields(StageParams)}
_SCHED_KEYS = {f.name for f in fields(Schedule)}


def build_config(entries: dict[str, object], base: RunConfig | None = None) -> RunConfig:
    cfg = base or RunConfig()
    top: dict[str, object] = {}
    stage_kw: dict[str, object] = {}
    sched_kw: dict[str, object] = {}
    for key, value in entries.items():
        if key in _TOP:
            top[_TOP[key]] = value
        elif key.startswith("stage.") and key[6:] in _STAGE_KEYS:
            stage_kw[key[6:]] = value
        elif key.startswith("schedule.") and key[9:] in _SCHED_KEYS:
            sched_kw[key[9:]] = value
        else:
            raise NKError("config-invalid", f"unknown configuration key {key!r}")
    try:
        cfg = replace(cfg, **top)
        if stage_kw:
            cfg.stage = replace(cfg.stage, **stage_kw)
        if sched_kw:
            cfg.schedule = replace(cfg.schedule, **sched_kw)
    except TypeError as exc:
        raise NKError("config-invalid", str(exc)) from None
    cfg.validate()
    return cfg


def load_config(path: str | Path | None, overrides: list[str] | None = None) -> RunConfig:
    """Read a config file (optional) and apply ``key=value`` overrides, then validate."""
    entries: dict[str, object] = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise NKError("config-invalid", f"config file {p} not found")
        entries.update(parse_lines(p.read_text().splitlines()))
    if overrides:
        entries.update(parse_lines(overrides))
    return build_config(entries)


def dump_config(cfg: RunConfig) -> str:
    """Render a config back to the ``key = value`` grammar (round-trips through ``load_config``)."""
    inv = {v: k for k, v in _TOP.items()}
    lines = []
    for name, key in inv.items():
        v = getattr(cfg, name)
        lines.append(f"{key} = {_fmt(v)}")
    for f in fields(StageParams):
        lines.append(f"stage.{f.name} = {_fmt(getattr(cfg.stage, f.name))}")
    for f in fields(Schedule):
        lines.append(f"schedule.{f.name} = {_fmt(getattr(cfg.schedule, f.name))}")
    return "\n".join(lines) + "\n"


def _fmt(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)
