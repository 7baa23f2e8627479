"""Validate a GCM run config (JSON, sections model/train/data).

Used standalone (``python helpers/check_config.py gcm.json``) and by the CLI
before any command runs.  Keep in sync with the dataclasses in gcm/config.py
when adding or renaming config keys.
"""

from __future__ import annotations

import argparse
import json
import sys
import typing
from dataclasses import MISSING, fields
from pathlib import Path
from typing import NamedTuple

# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

POSITIVE_MODEL_KEYS: tuple[str, ...] = (
    "d_leaf",
    "d_entity",
    "d_map",
    "n_obj_max",
    "n_hum_max",
    "n_classes",
)

VALID_OPTIMIZERS: frozenset[str] = frozenset({"sgd", "adam"})


# ---------------------------------------------------------------------------
# Data model
# ---------------------------------------------------------------------------


class Issue(NamedTuple):
    level: str  # "ERROR" | "WARNING"
    where: str  # "model.d_map", "train", ...
    message: str


def _defaults(section: str) -> dict:
    from gcm.config import SECTIONS  # noqa: PLC0415

    out = {}
    for f in fields(SECTIONS[section]):
        if f.default is not MISSING:
            out[f.name] = f.default
        elif f.default_factory is not MISSING:  # type: ignore[misc]
            out[f.name] = f.default_factory()  # type: ignore[misc]
    return out


def _with_defaults(section: str, values: dict) -> dict:
    merged = _defaults(section)
    merged.update(values)
    return merged


# ---------------------------------------------------------------------------
# Individual checks -- each returns a list[Issue]
# ---------------------------------------------------------------------------


def check_sections(data: dict) -> list[Issue]:
    from gcm.config import SECTIONS  # noqa: PLC0415

    issues: list[Issue] = []
    if not isinstance(data, dict):
        return [Issue("ERROR", "config", "top level must be an object")]
    for key, value in data.items():
        if key not in SECTIONS:
            issues.append(
                Issue("ERROR", key, f"Unknown section '{key}'; known: {sorted(SECTIONS)}")
            )
        elif not isinstance(value, dict):
            issues.append(Issue("ERROR", key, f"Section '{key}' must be an object"))
    return issues


def _type_ok(expected, value) -> bool:
    origin = typing.get_origin(expected)
    if origin is tuple or expected is tuple:
        return isinstance(value, (list, tuple))
    if expected is bool:
        return isinstance(value, bool)
    if expected is int:
        return isinstance(value, int) and not isinstance(value, bool)
    if expected is float:
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if expected is str:
        return isinstance(value, str)
    return True


def check_keys(data: dict) -> list[Issue]:
    """Reject unknown keys and values of the wrong JSON type."""
    from gcm.config import SECTIONS, section_fields  # noqa: PLC0415

    issues: list[Issue] = []
    for section, values in data.items():
        if section not in SECTIONS or not isinstance(values, dict):
            continue
        known = section_fields(section)
        for key, value in values.items():
            where = f"{section}.{key}"
            if key not in known:
                issues.append(Issue("ERROR", where, f"Unknown key; known: {sorted(known)}"))
            elif not _type_ok(known[key], value):
                issues.append(
                    Issue("ERROR", where, f"Expected {known[key]}, got {type(value).__name__}")
                )
    return issues


def model_issues(model: dict) -> list[Issue]:
    """Structural checks of the And-Or graph description."""
    from gcm.config import INTERACTIVE_TYPES, LAYER_ORDER  # noqa: PLC0415

    m = _with_defaults("model", model)
    issues: list[Issue] = []
    for key in POSITIVE_MODEL_KEYS:
        if not isinstance(m[key], int) or m[key] <= 0:
            issues.append(Issue("ERROR", f"model.{key}", f"must be a positive integer, got {m[key]!r}"))
    if not isinstance(m["t_window"], int) or m["t_window"] < 0:
        issues.append(Issue("ERROR", "model.t_window", "must be a non-negative integer"))

    layers = tuple(m["layers_enabled"])
    unknown = [layer for layer in layers if layer not in LAYER_ORDER]
    if unknown:
        issues.append(Issue("ERROR", "model.layers_enabled", f"Unknown layers {unknown}"))
    elif layers != LAYER_ORDER[: len(layers)]:
        issues.append(
            Issue(
                "ERROR",
                "model.layers_enabled",
                f"Layers must be a prefix of {list(LAYER_ORDER)}, got {list(layers)}",
            )
        )

    types = tuple(m["interactive_types"])
    n = m["n_classes"]
    if types:
        if len(types) != n:
            issues.append(
                Issue("ERROR", "model.interactive_types", f"{len(types)} tags for {n} classes")
            )
        bad = sorted({t for t in types if t not in INTERACTIVE_TYPES})
        if bad:
            issues.append(
                Issue("ERROR", "model.interactive_types", f"Unknown tags {bad}; known: {list(INTERACTIVE_TYPES)}")
            )
    names = tuple(m["class_names"])
    if names and len(names) != n:
        issues.append(Issue("ERROR", "model.class_names", f"{len(names)} names for {n} classes"))
    if names and len(set(names)) != len(names):
        issues.append(Issue("ERROR", "model.class_names", "Class names must be unique"))

    if not 0.0 <= m["dropout"] < 1.0:
        issues.append(Issue("ERROR", "model.dropout", "must be in [0, 1)"))
    if m["d_entity"] > m["d_leaf"]:
        issues.append(
            Issue("WARNING", "model.d_entity", "Entity dim exceeds leaf dim; embedding expands features")
        )
    return issues


def check_model(data: dict) -> list[Issue]:
    model = data.get("model", {})
    return model_issues(model) if isinstance(model, dict) else []


def check_train(data: dict) -> list[Issue]:
    t = data.get("train", {})
    if not isinstance(t, dict):
        return []
    t = _with_defaults("train", t)
    issues: list[Issue] = []
    if not isinstance(t["epochs"], int) or t["epochs"] < 1:
        issues.append(Issue("ERROR", "train.epochs", "must be >= 1"))
    if not isinstance(t["batch_size"], int) or t["batch_size"] < 1:
        issues.append(Issue("ERROR", "train.batch_size", "must be >= 1"))
    if t["optimizer"] not in VALID_OPTIMIZERS:
        issues.append(
            Issue("ERROR", "train.optimizer", f"Unknown optimizer; known: {sorted(VALID_OPTIMIZERS)}")
        )
    schedule = list(t["lr_schedule"])
    if not schedule:
        issues.append(Issue("ERROR", "train.lr_schedule", "must list at least one (epoch, lr) pair"))
    else:
        try:
            starts = [int(e) for e, _ in schedule]
            rates = [float(lr) for _, lr in schedule]
        except (TypeError, ValueError):
            issues.append(Issue("ERROR", "train.lr_schedule", "entries must be [epoch, lr] pairs"))
        else:
            if starts[0] != 0:
                issues.append(Issue("ERROR", "train.lr_schedule", "first entry must start at epoch 0"))
            if starts != sorted(starts):
                issues.append(Issue("ERROR", "train.lr_schedule", "epochs must be increasing"))
            if any(r < 0 for r in rates):
                issues.append(Issue("ERROR", "train.lr_schedule", "learning rates must be >= 0"))
    if not 0.0 < t["eval_threshold"] < 1.0:
        issues.append(Issue("ERROR", "train.eval_threshold", "must be in (0, 1)"))
    if t["bank_refresh"] < 0:
        issues.append(Issue("ERROR", "train.bank_refresh", "must be >= 0"))
    if t["eval_every"] < 0:
        issues.append(Issue("ERROR", "train.eval_every", "must be >= 0"))
    return issues


def check_data(data: dict) -> list[Issue]:
    d = data.get("data", {})
    if not isinstance(d, dict):
        return []
    d = _with_defaults("data", d)
    issues: list[Issue] = []
    for key in ("n_videos", "clips_per_video", "n_candidates", "segment_length"):
        if d[key] < 1:
            issues.append(Issue("ERROR", f"data.{key}", "must be >= 1"))
    for key in ("n_body", "n_object", "n_human", "n_long_range"):
        if d[key] < 0:
            issues.append(Issue("ERROR", f"data.{key}", "must be >= 0"))
    if d["n_body"] + d["n_object"] + d["n_human"] + d["n_long_range"] == 0:
        issues.append(Issue("ERROR", "data", "vocabulary is empty"))
    if d["n_body"] < 1:
        issues.append(Issue("ERROR", "data.n_body", "at least one body class is sampled per clip"))
    for key in ("p_object", "p_human", "p_long_range"):
        if not 0.0 <= d[key] <= 1.0:
            issues.append(Issue("ERROR", f"data.{key}", "must be a probability"))
    if not 0.0 <= d["val_fraction"] < 1.0:
        issues.append(Issue("ERROR", "data.val_fraction", "must be in [0, 1)"))
    if d["noise_sigma"] < 0:
        issues.append(Issue("ERROR", "data.noise_sigma", "must be >= 0"))
    return issues


CHECKS = [
    ("Sections", check_sections),
    ("Keys and types", check_keys),
    ("Model structure", check_model),
    ("Training schedule", check_train),
    ("Synthetic data", check_data),
]


def collect_issues(data: dict) -> list[Issue]:
    """Run every check; later checks are skipped once the layout itself is broken."""
    issues: list[Issue] = []
    for _name, fn in CHECKS:
        found = fn(data)
        issues.extend(found)
        if fn in (check_sections, check_keys) and any(i.level == "ERROR" for i in found):
            break
    return issues


# ---------------------------------------------------------------------------
# Runner
# ---------------------------------------------------------------------------


def run_checks(path: Path) -> int:
    """Validate *path* and print a report; return 0 (clean) or 1 (errors found)."""
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        print(f"ERROR: Invalid JSON in {path}: {exc}")
        return 1

    print(f"Checking : {path}")
    print()

    all_issues: list[Issue] = []
    broken = False
    for name, fn in CHECKS:
        if broken:
            print(f"  [skip] {name:<30}  (SKIPPED)")
            continue
        issues = fn(data)
        errors_in = [i for i in issues if i.level == "ERROR"]
        warnings_in = [i for i in issues if i.level == "WARNING"]
        if errors_in:
            status, symbol = "FAIL", "FAIL"
        elif warnings_in:
            status, symbol = "WARN", "WARN"
        else:
            status, symbol = "PASS", "ok  "
        print(f"  [{symbol}] {name:<30}  ({status})")
        for issue in issues:
            print(f"        [{issue.level:7s}] {issue.where}: {issue.message}")
        all_issues.extend(issues)
        if fn in (check_sections, check_keys) and errors_in:
            broken = True

    errors = sum(1 for i in all_issues if i.level == "ERROR")
    warnings = sum(1 for i in all_issues if i.level == "WARNING")

    print()
    print("-" * 50)
    if errors == 0 and warnings == 0:
        print("[ok  ] All checks passed.")
    elif errors == 0:
        print(f"[WARN] Passed with {warnings} warning(s).")
    else:
        print(f"[FAIL] FAILED -- {errors} error(s), {warnings} warning(s).")
    print("-" * 50)

    return 1 if errors else 0


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def main() -> None:
    parser = argparse.ArgumentParser(
        description="Validate a GCM run config against the model/train/data schema.",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="Exit 0 = clean/warnings only, 1 = errors found, 2 = file not found.",
    )
    parser.add_argument(
        "config",
        nargs="?",
        help="Path to a config JSON (default: gcm.json at the repo root)",
    )
    args = parser.parse_args()

    path = Path(args.config) if args.config else Path(__file__).parent.parent / "gcm.json"
    if not path.exists():
        print(f"File not found: {path}", file=sys.stderr)
        sys.exit(2)

    sys.exit(run_checks(path))


if __name__ == "__main__":
    # Allow `python helpers/check_config.py` from the repo root.
    sys.path.insert(0, str(Path(__file__).parent.parent))
    main()
