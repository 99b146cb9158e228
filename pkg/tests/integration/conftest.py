"""Shared fixtures for end-to-end tests."""

from __future__ import annotations

from typing import TYPE_CHECKING

import pytest
from typer.testing import CliRunner

from covfilt.cli import app

if TYPE_CHECKING:
    from collections.abc import Callable
    from pathlib import Path

runner = CliRunner()

COMMANDS = ("generate", "train", "evaluate")


@pytest.fixture
def run_pipeline(tmp_path: Path) -> Callable[..., Path]:
    """Factory: write a config, run generate, train and evaluate into ``tmp_path/<name>``.

    Returns the output directory.
    """

    def _run(toml: str, name: str = "run") -> Path:
        config = tmp_path / f"{name}.toml"
        config.write_text(toml, encoding="utf-8")
        out = tmp_path / name
        for command in COMMANDS:
            result = runner.invoke(app, [command, "--config", str(config), "--out", str(out)])
            assert result.exit_code == 0, f"{command} failed: {result.output}"
        return out

    return _run
