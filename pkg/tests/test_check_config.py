"""Tests for helpers.check_config -- run-config structural validator."""

import json
from pathlib import Path

import pytest

from helpers.check_config import (
    check_data,
    check_keys,
    check_model,
    check_sections,
    check_train,
    collect_issues,
    run_checks,
)

# -- Helpers -------------------------------------------------------------------


def _config(**sections) -> dict:
    """Return a minimal valid run config, with optional section overrides."""
    base = {
        "model": {"d_leaf": 16, "d_entity": 8, "d_map": 12, "n_classes": 2},
        "train": {"epochs": 1},
        "data": {"n_videos": 2},
    }
    base.update(sections)
    return base


def _write(path: Path, data: dict) -> Path:
    f = path / "run.json"
    f.write_text(json.dumps(data, indent=2), encoding="utf-8")
    return f


def _errors(issues) -> list[str]:
    return [i.where for i in issues if i.level == "ERROR"]


# -- Sections and keys ---------------------------------------------------------


class TestSections:
    def test_known_sections(self) -> None:
        assert check_sections(_config()) == []

    def test_unknown_section(self) -> None:
        assert _errors(check_sections(_config(optimizer={}))) == ["optimizer"]

    def test_section_not_object(self) -> None:
        assert _errors(check_sections(_config(train=[1]))) == ["train"]

    def test_top_level_not_object(self) -> None:
        assert _errors(check_sections([])) == ["config"]


class TestKeys:
    def test_unknown_key(self) -> None:
        assert _errors(check_keys(_config(train={"epoch": 1}))) == ["train.epoch"]

    def test_bool_is_not_int(self) -> None:
        assert _errors(check_keys(_config(train={"epochs": True}))) == ["train.epochs"]

    def test_int_accepted_for_float(self) -> None:
        assert check_keys(_config(model={"dropout": 0})) == []

    def test_list_for_tuple(self) -> None:
        assert check_keys(_config(model={"layers_enabled": ["primitive"]})) == []


# -- Model -----------------------------------------------------------------------


class TestModel:
    def test_valid(self) -> None:
        assert _errors(check_model(_config())) == []

    @pytest.mark.parametrize("key", ["d_leaf", "d_map", "n_classes"])
    def test_non_positive(self, key: str) -> None:
        model = _config()["model"] | {key: 0}
        assert f"model.{key}" in _errors(check_model({"model": model}))

    def test_negative_window(self) -> None:
        model = _config()["model"] | {"t_window": -1}
        assert _errors(check_model({"model": model})) == ["model.t_window"]

    def test_zero_window_allowed(self) -> None:
        model = _config()["model"] | {"t_window": 0}
        assert _errors(check_model({"model": model})) == []

    def test_layers_out_of_order(self) -> None:
        model = _config()["model"] | {"layers_enabled": ["primitive", "lrci"]}
        assert _errors(check_model({"model": model})) == ["model.layers_enabled"]

    def test_unknown_layer(self) -> None:
        model = _config()["model"] | {"layers_enabled": ["attention"]}
        assert _errors(check_model({"model": model})) == ["model.layers_enabled"]

    def test_duplicate_class_names(self) -> None:
        model = _config()["model"] | {"class_names": ["a", "a"]}
        assert _errors(check_model({"model": model})) == ["model.class_names"]

    def test_wide_entity_warns(self) -> None:
        model = _config()["model"] | {"d_entity": 32}
        issues = check_model({"model": model})
        assert [i.level for i in issues] == ["WARNING"]


# -- Train / data ----------------------------------------------------------------


class TestTrain:
    def test_valid(self) -> None:
        assert check_train(_config()) == []

    def test_schedule_must_start_at_zero(self) -> None:
        assert _errors(check_train(_config(train={"lr_schedule": [[1, 0.1]]}))) == ["train.lr_schedule"]

    def test_schedule_must_increase(self) -> None:
        bad = {"lr_schedule": [[0, 0.1], [5, 0.05], [3, 0.01]]}
        assert _errors(check_train(_config(train=bad))) == ["train.lr_schedule"]

    def test_negative_rate(self) -> None:
        assert _errors(check_train(_config(train={"lr_schedule": [[0, -0.1]]}))) == ["train.lr_schedule"]

    def test_zero_rate_allowed(self) -> None:
        assert check_train(_config(train={"lr_schedule": [[0, 0.0]]})) == []

    def test_unknown_optimizer(self) -> None:
        assert _errors(check_train(_config(train={"optimizer": "lbfgs"}))) == ["train.optimizer"]

    def test_threshold_range(self) -> None:
        assert _errors(check_train(_config(train={"eval_threshold": 1.0}))) == ["train.eval_threshold"]


class TestData:
    def test_valid(self) -> None:
        assert check_data(_config()) == []

    def test_probability_range(self) -> None:
        assert _errors(check_data(_config(data={"p_object": 1.5}))) == ["data.p_object"]

    def test_needs_a_body_class(self) -> None:
        assert _errors(check_data(_config(data={"n_body": 0}))) == ["data.n_body"]

    def test_val_fraction(self) -> None:
        assert _errors(check_data(_config(data={"val_fraction": 1.0}))) == ["data.val_fraction"]


# -- collect_issues / run_checks (integration) -----------------------------------


class TestCollectIssues:
    def test_stops_after_layout_errors(self) -> None:
        issues = collect_issues(_config(train={"epochs": "x"}, model={"d_map": 0}))
        assert _errors(issues) == ["train.epochs"]


class TestRunChecks:
    def test_clean_config_returns_zero(self, tmp_path: Path) -> None:
        assert run_checks(_write(tmp_path, _config())) == 0

    def test_errors_return_one(self, tmp_path: Path) -> None:
        assert run_checks(_write(tmp_path, _config(train={"epochs": 0}))) == 1

    def test_invalid_json(self, tmp_path: Path) -> None:
        f = tmp_path / "run.json"
        f.write_text("{bad json", encoding="utf-8")
        assert run_checks(f) == 1

    def test_repo_presets_are_clean(self) -> None:
        from gcm.config import DEFAULT_CONFIG, PRESETS_DIR

        for path in [DEFAULT_CONFIG, *sorted(PRESETS_DIR.glob("*.json"))]:
            assert run_checks(path) == 0, path
