"""
Run Config Module
-----------------
Parses run configuration text into typed settings.

Two line forms are accepted:

    [train]              section header, followed by
    lr = 0.01            key = value lines

    train.lr = 0.01      dotted keys (the canonical form written by to_text)

Every key must exist in config.SECTION_DEFAULTS and is typed by its default:
integers, reals, booleans (true/false) or bare strings. Lines starting with
``#`` or ``;`` are comments.
"""
import re
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, Optional

# Add parent directory to path for imports
sys.path.insert(0, str(Path(__file__).parent.parent))
from config import SECTION_DEFAULTS
from modules.backbone import BackboneConfig
from modules.coarse2fine import TrainConfig
from modules.data_synth import SynthConfig
from modules.deconv_upsampler import UpsamplerConfig
from modules.errors import ConfigError


# ============================================================================
# PATTERNS
# ============================================================================

SECTION_PATTERN = re.compile(r"^\[\s*(\w+)\s*\]$")
ENTRY_PATTERN = re.compile(r"^(?:(\w+)\.)?(\w+)\s*=\s*(.*?)$")
INT_PATTERN = re.compile(r"^[+-]?\d+$")
BOOL_VALUES = {"true": True, "false": False}


def parse_value(raw: str, default: Any, where: str) -> Any:
    """
    Convert a raw string to the type of ``default``.

    Raises:
        ConfigError: if the string doesn't fit the type
    """
    text = raw.strip()
    if isinstance(default, bool):
        if text.lower() not in BOOL_VALUES:
            raise ConfigError(f"{where}: expected true/false, got {raw!r}")
        return BOOL_VALUES[text.lower()]
    if isinstance(default, int):
        if not INT_PATTERN.match(text):
            raise ConfigError(f"{where}: expected an integer, got {raw!r}")
        return int(text)
    if isinstance(default, float):
        try:
            return float(text)
        except ValueError:
            raise ConfigError(f"{where}: expected a number, got {raw!r}")
    if len(text) >= 2 and text[0] == text[-1] and text[0] in "\"'":
        text = text[1:-1]
    return text


def format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass
class RunConfig:
    """Typed values of every section, starting from the defaults."""
    values: Dict[str, Dict[str, Any]] = field(
        default_factory=lambda: {section: dict(defaults) for section, defaults in SECTION_DEFAULTS.items()})

    # ------------------------------------------------------------------------
    # Parsing
    # ------------------------------------------------------------------------

    def set(self, section: str, key: str, raw: str, where: str = "") -> None:
        """Set one key from its raw text."""
        where = where or f"{section}.{key}"
        if section not in SECTION_DEFAULTS:
            raise ConfigError(f"{where}: unknown section [{section}] (expected one of {list(SECTION_DEFAULTS)})")
        defaults = SECTION_DEFAULTS[section]
        if key not in defaults:
            raise ConfigError(f"{where}: unknown key {section}.{key}")
        self.values[section][key] = parse_value(raw, defaults[key], where)

    def apply_override(self, assignment: str) -> None:
        """Apply a ``section.key=value`` command-line override."""
        match = ENTRY_PATTERN.match(assignment.strip())
        if not match or match.group(1) is None:
            raise ConfigError(f"Override must look like section.key=value, got {assignment!r}")
        section, key, raw = match.groups()
        self.set(section, key, raw, where=f"--set {assignment}")

    def update_from_text(self, text: str, source: str = "<text>") -> None:
        section: Optional[str] = None
        for number, line in enumerate(text.splitlines(), start=1):
            stripped = line.strip()
            if not stripped or stripped[0] in "#;":
                continue
            where = f"{source}:{number}"
            header = SECTION_PATTERN.match(stripped)
            if header:
                section = header.group(1)
                if section not in SECTION_DEFAULTS:
                    raise ConfigError(f"{where}: unknown section [{section}]")
                continue
            entry = ENTRY_PATTERN.match(stripped)
            if not entry:
                raise ConfigError(f"{where}: cannot parse line {stripped!r}")
            prefix, key, raw = entry.groups()
            target = prefix or section
            if target is None:
                raise ConfigError(f"{where}: key {key!r} outside any section")
            self.set(target, key, raw, where)

    @classmethod
    def from_text(cls, text: str, source: str = "<text>") -> "RunConfig":
        config = cls()
        config.update_from_text(text, source)
        config.validate()
        return config

    @classmethod
    def load(cls, path=None, overrides: Iterable[str] = ()) -> "RunConfig":
        """
        Defaults, then the file (if given), then overrides.

        Raises:
            FileNotFoundError: if path doesn't exist
            ConfigError: on unknown keys, bad values or invalid settings
        """
        config = cls()
        if path is not None:
            path = Path(path)
            if not path.exists():
                raise FileNotFoundError(f"Config file not found: {path}")
            config.update_from_text(path.read_text(encoding="utf-8"), str(path))
        for assignment in overrides:
            config.apply_override(assignment)
        config.validate()
        return config

    def to_text(self) -> str:
        """Canonical ``section.key = value`` lines, sorted."""
        lines = [f"{section}.{key} = {format_value(self.values[section][key])}"
                 for section in sorted(self.values) for key in sorted(self.values[section])]
        return "\n".join(lines) + "\n"

    # ------------------------------------------------------------------------
    # Typed views
    # ------------------------------------------------------------------------

    def section(self, name: str) -> Dict[str, Any]:
        return dict(self.values[name])

    def synth_config(self) -> SynthConfig:
        return SynthConfig(**self.values["data"])

    def stage_widths(self) -> list:
        raw = self.values["backbone"]["stages"]
        parts = [p.strip() for p in raw.split(",") if p.strip()]
        if not parts or not all(INT_PATTERN.match(p) for p in parts):
            raise ConfigError(f"backbone.stages must be comma separated integers, got {raw!r}")
        return [int(p) for p in parts]

    def backbone_config(self) -> BackboneConfig:
        data = self.values["data"]
        return BackboneConfig.from_widths(self.stage_widths(), input_channels=data["channels"],
                                          input_size=data["image_size"],
                                          attention_maps=self.values["backbone"]["attention_maps"],
                                          num_classes=data["num_classes"])

    def upsampler_config(self, backbone: Optional[BackboneConfig] = None) -> UpsamplerConfig:
        backbone = backbone or self.backbone_config()
        return UpsamplerConfig(in_size=backbone.feature_size, out_size=backbone.input_size,
                               width=self.values["upsampler"]["width"])

    def train_config(self) -> TrainConfig:
        return TrainConfig(**self.values["train"])

    def validate(self) -> None:
        """Build every typed view so each module checks its own invariants."""
        self.synth_config()
        backbone = self.backbone_config()
        self.upsampler_config(backbone)
        self.train_config()
        localize = self.values["localize"]
        if not 0.0 < localize["threshold"] < 1.0:
            raise ConfigError(f"localize.threshold must be in (0, 1), got {localize['threshold']}")
        if not 0.0 <= localize["iou_threshold"] < 1.0:
            raise ConfigError(f"localize.iou_threshold must be in [0, 1), got {localize['iou_threshold']}")
        if localize["mode"] not in ("coarse", "fine", "average"):
            raise ConfigError(f"localize.mode must be coarse, fine or average, got {localize['mode']!r}")
        upsampler = self.values["upsampler"]
        if not 0 <= upsampler["held_out"] < upsampler["pairs"]:
            raise ConfigError("upsampler.held_out must be in [0, upsampler.pairs)")
