"""config.py — Rich console, run-config dataclasses, JSON config loading and overrides."""

import hashlib
import json
import os
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from rich.console import Console

# ── Console ────────────────────────────────────────────────────────────────────

if sys.platform == "win32" and hasattr(sys.stdout, "reconfigure"):
    try:
        sys.stdout.reconfigure(encoding="utf-8", errors="replace")  # type: ignore[union-attr]
        sys.stderr.reconfigure(encoding="utf-8", errors="replace")  # type: ignore[union-attr]
    except Exception:
        pass

# Machine-readable output (parse JSON) goes to stdout; everything human-facing
# goes through this console on stderr so the two never interleave.
_console = Console(stderr=True, legacy_windows=False)

# ── Paths ──────────────────────────────────────────────────────────────────────

# __file__ is gcm/config.py → parent is gcm/ → parent is the repo root.
REPO_ROOT = Path(__file__).parent.parent
DEFAULT_CONFIG = REPO_ROOT / "gcm.json"
PRESETS_DIR = REPO_ROOT / "configs"

FEATURES_FILENAME = "features.jsonl"
MANIFEST_FILENAME = "manifest.json"

# ── Grammar vocabulary ─────────────────────────────────────────────────────────

INTERACTIVE_TYPES = ("body", "object", "human")
LAYER_ORDER = ("primitive", "concurrent", "lrci")


# ── Config sections ────────────────────────────────────────────────────────────


@dataclass(frozen=True)
class GcmConfig:
    """Structure and sizes of the And-Or graph."""

    d_leaf: int = 2304
    d_entity: int = 512
    d_map: int = 1024
    n_obj_max: int = 5
    n_hum_max: int = 5
    t_window: int = 30
    n_classes: int = 80
    layers_enabled: tuple[str, ...] = LAYER_ORDER
    # One tag per class; empty means "all body" (filled in by __post_init__).
    interactive_types: tuple[str, ...] = ()
    class_names: tuple[str, ...] = ()
    dropout: float = 0.5
    aux_heads: bool = True
    role_embeddings: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "layers_enabled", tuple(self.layers_enabled))
        if not self.interactive_types:
            object.__setattr__(self, "interactive_types", ("body",) * self.n_classes)
        else:
            object.__setattr__(self, "interactive_types", tuple(self.interactive_types))
        if not self.class_names:
            names = tuple(f"class_{i}" for i in range(self.n_classes))
            object.__setattr__(self, "class_names", names)
        else:
            object.__setattr__(self, "class_names", tuple(self.class_names))
        from helpers.check_config import model_issues  # noqa: PLC0415

        errors = [i.message for i in model_issues(asdict(self)) if i.level == "ERROR"]
        if errors:
            raise ValueError("invalid model config: " + "; ".join(errors))

    @property
    def top_layer(self) -> str:
        """Name of the highest enabled layer, or ``"baseline"`` when none is."""
        return self.layers_enabled[-1] if self.layers_enabled else "baseline"

    def uses(self, layer: str) -> bool:
        return layer in self.layers_enabled

    def classes_of(self, kind: str) -> list[int]:
        return [i for i, t in enumerate(self.interactive_types) if t == kind]

    def with_layers(self, layers: tuple[str, ...]) -> "GcmConfig":
        return replace(self, layers_enabled=layers)


@dataclass(frozen=True)
class TrainConfig:
    """Stage-2 optimisation on precomputed leaf features."""

    epochs: int = 10
    batch_size: int = 16
    optimizer: str = "adam"
    # (first epoch, learning rate) pairs; the last pair whose epoch has been
    # reached is in force.
    lr_schedule: tuple[tuple[int, float], ...] = ((0, 1e-4), (3, 6.5e-5))
    seed: int = 0
    eval_threshold: float = 0.5
    bank_refresh: int = 1
    eval_every: int = 1

    def __post_init__(self) -> None:
        object.__setattr__(
            self,
            "lr_schedule",
            tuple((int(e), float(lr)) for e, lr in self.lr_schedule),
        )

    def learning_rate(self, epoch: int) -> float:
        """Return the rate in force at zero-based *epoch*."""
        lr = self.lr_schedule[0][1]
        for start, rate in self.lr_schedule:
            if epoch >= start:
                lr = rate
        return lr


@dataclass(frozen=True)
class DataConfig:
    """Knobs of the synthetic grammar sampler."""

    n_videos: int = 100
    clips_per_video: int = 61
    n_body: int = 3
    n_object: int = 3
    n_human: int = 2
    n_long_range: int = 0
    n_candidates: int = 5
    noise_sigma: float = 0.3
    marker_gain: float = 1.0
    cue_gain: float = 2.0
    p_object: float = 0.5
    p_human: float = 0.3
    p_long_range: float = 0.8
    segment_length: int = 5
    val_fraction: float = 0.2
    seed: int = 0


@dataclass(frozen=True)
class RunConfig:
    model: GcmConfig = field(default_factory=GcmConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def to_dict(self) -> dict:
        return {
            "model": _jsonable(asdict(self.model)),
            "train": _jsonable(asdict(self.train)),
            "data": _jsonable(asdict(self.data)),
        }


SECTIONS: dict[str, type] = {"model": GcmConfig, "train": TrainConfig, "data": DataConfig}


def section_fields(section: str) -> dict[str, type]:
    """Return ``{field name: declared type}`` for a config section."""
    return {f.name: f.type for f in fields(SECTIONS[section])}


def _jsonable(value):
    if isinstance(value, tuple):
        return [_jsonable(v) for v in value]
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    return value


# ── Loading ────────────────────────────────────────────────────────────────────


def parse_override(text: str) -> tuple[str, str, object]:
    """Split ``section.key=value``; the value is JSON when it parses, else a string.

    Raises:
        ValueError: *text* is not of the form ``section.key=value``.
    """
    if "=" not in text:
        raise ValueError(f"override {text!r} must look like section.key=value")
    dotted, raw = text.split("=", 1)
    if dotted.count(".") != 1:
        raise ValueError(f"override key {dotted!r} must look like section.key")
    section, key = dotted.split(".")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return section.strip(), key.strip(), value


def merge_overrides(data: dict, overrides: list[str]) -> dict:
    """Return a copy of *data* with every override applied (overrides win)."""
    merged = {k: dict(v) if isinstance(v, dict) else v for k, v in data.items()}
    for text in overrides:
        section, key, value = parse_override(text)
        merged.setdefault(section, {})[key] = value
    return merged


def read_config_file(path: Path | None) -> dict:
    """Load a config JSON file; *None* means the repo default (or nothing if absent).

    Raises:
        FileNotFoundError: an explicit *path* does not exist.
    """
    if path is None:
        if not DEFAULT_CONFIG.exists():
            return {}
        path = DEFAULT_CONFIG
    if not path.exists():
        raise FileNotFoundError(f"Config file not found: {path}")
    return json.loads(path.read_text(encoding="utf-8"))


def build_config(data: dict) -> RunConfig:
    """Turn a validated ``{section: {key: value}}`` dict into a :class:`RunConfig`."""
    kwargs = {}
    for section, cls in SECTIONS.items():
        values = dict(data.get(section, {}))
        for key, value in values.items():
            if isinstance(value, list):
                values[key] = tuple(tuple(v) if isinstance(v, list) else v for v in value)
        kwargs[section] = cls(**values)
    return RunConfig(**kwargs)


def load_config(path: Path | None = None, overrides: list[str] | None = None) -> RunConfig:
    """Read, merge, validate, and build the effective run config.

    Raises:
        FileNotFoundError: explicit config path missing.
        ValueError:        config has ERROR-level issues.
    """
    from helpers.check_config import collect_issues  # noqa: PLC0415

    data = merge_overrides(read_config_file(path), overrides or [])
    errors = [i for i in collect_issues(data) if i.level == "ERROR"]
    if errors:
        raise ValueError(
            "invalid config:\n" + "\n".join(f"  {i.where}: {i.message}" for i in errors)
        )
    return build_config(data)


def config_hash(config: RunConfig) -> str:
    """sha256 of the canonical JSON of the effective config."""
    canon = json.dumps(config.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()


# ── Threads ────────────────────────────────────────────────────────────────────


def worker_count() -> int:
    """Worker threads allowed by ``GCM_THREADS`` (default 1, never below 1)."""
    raw = os.environ.get("GCM_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


# ── Verbosity mode ─────────────────────────────────────────────────────────────

# Compact by default: one line per epoch.  Verbose adds one line per step.
_verbose: bool = False


def set_verbose(v: bool) -> None:
    """Switch the global log verbosity mode."""
    global _verbose
    _verbose = v


def is_verbose() -> bool:
    return _verbose
