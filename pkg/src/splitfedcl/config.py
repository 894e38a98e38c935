"""Run configuration: a flat, typed TOML file.

Every key is optional except ``config_version``, which must be 1. Unknown
keys, wrong types and out-of-range values are rejected with the offending
line number when it can be located. See ``RunConfig`` for the keys.
"""

from __future__ import annotations

import dataclasses
import re
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import annsim, data, nn, protocol
from .errors import ConfigError

CONFIG_VERSION = 1


@dataclass(frozen=True)
class RunConfig:
    """All knobs of one experiment.

    Defaults follow the reference training setup: Adam at 1e-4, 5 local
    epochs, 100 rounds, temperature 1 -> 5 and slack 3 -> 0 over 50 rounds,
    weight warm-up over 20 rounds, initial threshold 10, correction
    confidence 0.9, logit penalty 5e-4, teacher decay 0.99.
    """

    config_version: int = CONFIG_VERSION
    mode: str = "splitfed_cl"
    label: str = ""
    seed: int = 0
    # training
    global_rounds: int = 100
    local_epochs: int = 5
    batch_size: int = 8
    lr: float = 1e-4
    logit_lr: float = 1e-3
    schedule_rounds: int = 50
    gamma_max: float = 5.0
    lambda_max: float = 3.0
    warmup_rounds: int = 20
    tau0: float = 10.0
    label_threshold: float = 0.9
    eta: float = 5e-4
    logit_init: float = -10.0
    ema_decay: float = 0.99
    loss_ema_decay: float = 0.9
    loss_scale_floor: float = 1e-8
    perturb_noise: float = 0.05
    perturb_shift: float = 0.1
    train_dtype: str = "float32"
    wire_activations: bool = True
    workers: int = 1
    # architecture
    fe_width: int = 8
    s_width: int = 16
    # data
    image_size: int = 64
    n_classes: int = 3
    axis_min: float = 6.0
    axis_max: float = 11.0
    client_sizes: list = field(default_factory=lambda: [100, 150, 200, 50])
    corruption_ratios: list = field(default_factory=lambda: [0.2, 0.5, 0.8, 0.0])
    test_size: int = 100
    clean_labels: bool = False
    corrupt_rho: float = 2.0
    corrupt_amax_scale: float = 4.0
    # outputs
    dump_samples: int = 2
    out_dir: str = "runs/default"

    def __post_init__(self):
        if self.config_version != CONFIG_VERSION:
            raise ConfigError(f"field 'config_version': only version {CONFIG_VERSION} is supported")
        if self.global_rounds < 1:
            raise ConfigError("field 'global_rounds': must be >= 1")
        if not all(isinstance(n, int) for n in self.client_sizes):
            raise ConfigError("field 'client_sizes': sample counts must be integers")
        if self.dump_samples < 0:
            raise ConfigError("field 'dump_samples': must be >= 0")
        # the component configs carry the detailed range checks
        for build in (self.protocol, self.scene, self.layout, self.difficulty, self.architecture):
            try:
                build()
            except ConfigError:
                raise
            except (ValueError, TypeError) as exc:
                raise ConfigError(str(exc)) from exc

    @property
    def run_label(self) -> str:
        if self.label:
            return self.label
        return f"{self.mode}-clean" if self.clean_labels else self.mode

    def protocol(self) -> protocol.ProtocolConfig:
        names = {f.name for f in dataclasses.fields(protocol.ProtocolConfig)}
        return protocol.ProtocolConfig(**{k: getattr(self, k) for k in names})

    def scene(self) -> data.SceneConfig:
        c = self.n_classes
        # evenly spaced grey levels; the default three classes keep the stock values
        levels = data.SceneConfig.intensities if c == 3 else tuple(np.linspace(0.2, 0.85, max(c, 2))[:c])
        return data.SceneConfig(size=self.image_size, n_classes=c, intensities=levels,
                                axis_range=(self.axis_min, self.axis_max), seed=self.seed)

    def layout(self) -> data.FederationLayout:
        return data.FederationLayout(tuple(self.client_sizes), tuple(self.corruption_ratios), self.test_size)

    def difficulty(self) -> annsim.DifficultyParams:
        return annsim.DifficultyParams(rho=self.corrupt_rho, amax_scale=self.corrupt_amax_scale)

    def architecture(self) -> nn.Architecture:
        return nn.Architecture(in_channels=1, n_classes=self.n_classes, fe_width=self.fe_width,
                               s_width=self.s_width)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_toml(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            lines.append(f"{f.name} = {_toml_value(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, str):
        return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    return repr(v)


def _field_types() -> dict:
    types = {}
    for f in dataclasses.fields(RunConfig):
        default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
        types[f.name] = type(default)
    return types


def _check_type(name: str, value, expected):
    if expected is bool:
        ok = isinstance(value, bool)
    elif expected is int:
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif expected is float:
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif expected is list:
        ok = isinstance(value, list) and all(isinstance(x, (int, float)) and not isinstance(x, bool)
                                             for x in value)
    else:
        ok = isinstance(value, expected)
    if not ok:
        raise ConfigError(f"field '{name}': expected {expected.__name__}, got {type(value).__name__}")
    return value


def _line_of(text: str, key: str) -> int | None:
    m = re.search(rf"^[ \t]*{re.escape(key)}[ \t]*=", text, flags=re.MULTILINE)
    return text.count("\n", 0, m.start()) + 1 if m else None


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    """Parse and validate config text.

    Raises:
        ConfigError: with ``source:line:`` context where possible.
    """
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    if "config_version" not in raw:
        raise ConfigError(f"{source}: missing required field 'config_version'")
    types = _field_types()
    values = {}
    for key, value in raw.items():
        where = f"{source}:{_line_of(text, key) or '?'}"
        if key not in types:
            raise ConfigError(f"{where}: unknown field '{key}'")
        try:
            values[key] = _check_type(key, value, types[key])
        except ConfigError as exc:
            raise ConfigError(f"{where}: {exc}") from None
    try:
        return RunConfig(**values)
    except ConfigError as exc:
        line = None
        for key in re.findall(r"\w+", str(exc)):
            if key in types and key in values:
                line = _line_of(text, key)
                break
        raise ConfigError(f"{source}:{line or '?'}: {exc}") from None


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config ({exc.strerror})") from exc
    return parse_config(text, str(path))
