"""Rich terminal output for training progress and metrics tables."""

from __future__ import annotations

import math
from typing import TYPE_CHECKING

from rich.progress import BarColumn, MofNCompleteColumn, Progress, SpinnerColumn, TextColumn, TimeElapsedColumn
from rich.table import Table
from rich.text import Text

from covfilt.evaluation import BASELINE

if TYPE_CHECKING:
    from collections.abc import Callable, Sequence
    from pathlib import Path

    from rich.console import Console

    from covfilt.evaluation import MetricsTable

__all__ = [
    "RunProgress",
    "format_ratio",
    "format_value",
    "print_artifacts",
    "print_metrics_table",
]

_BETTER_STYLE = "green"
_WORSE_STYLE = "red"


class RunProgress:
    """Rich progress display for epochs or evaluated method rows.

    When the console is not a terminal (piped output), all display
    operations are silently skipped.
    """

    def __init__(self, console: Console, total: int, description: str) -> None:
        self._console = console
        self._total = total
        self._description = description
        self._is_terminal = console.is_terminal
        self._progress: Progress | None = None
        self._task_id: object = None

    def __enter__(self) -> RunProgress:
        if not self._is_terminal:
            return self
        self._progress = Progress(
            SpinnerColumn(),
            TextColumn("[bold blue]{task.description}"),
            BarColumn(),
            MofNCompleteColumn(),
            TextColumn("[dim]{task.fields[status]}"),
            TimeElapsedColumn(),
            console=self._console,
            transient=True,
        )
        self._progress.start()
        self._task_id = self._progress.add_task(self._description, total=self._total, status="")
        return self

    def __exit__(self, *_args: object) -> None:
        if self._progress is not None:
            self._progress.stop()
            self._progress = None

    def advance(self, completed: int, status: str) -> None:
        if self._progress is not None and self._task_id is not None:
            self._progress.update(self._task_id, completed=completed, status=status)  # type: ignore[arg-type]

    def epoch_callback(self) -> Callable[[int, float], None]:
        """Callback for ``train_mle`` / ``train_kalman(on_epoch=...)``."""
        return lambda epoch, loss: self.advance(epoch, f"loss {loss:.4f}")

    def row_callback(self) -> Callable[[str, int, int], None]:
        """Callback for ``evaluate_sources(on_progress=...)``."""
        return lambda name, done, _total: self.advance(done, name)


def format_value(value: float) -> str:
    return "n/a" if not math.isfinite(value) else f"{value:.2f}"


def format_ratio(value: float) -> Text:
    """Relative value colored against the baseline's 1.00."""
    if not math.isfinite(value):
        return Text("n/a", style="dim")
    style = _BETTER_STYLE if value < 1.0 else _WORSE_STYLE if value > 1.0 else ""
    return Text(f"{value:.2f}", style=style)


def print_metrics_table(table: MetricsTable, console: Console) -> None:
    """Print one split's final-step velocity errors (mm/s) as a rich table."""
    view = Table(title=f"Velocity error, {table.split} split (mm/s)")
    view.add_column("Method", min_width=24)
    view.add_column("Mean", justify="right")
    view.add_column("Median", justify="right")
    view.add_column("Rel. mean", justify="right")
    view.add_column("Rel. median", justify="right")
    view.add_column("Ratio mean", justify="right")
    view.add_column("Ratio median", justify="right")
    view.add_column("Tracks", justify="right")
    for row in table.rows:
        name = Text(row.method, style="bold" if row.method == BASELINE else "")
        view.add_row(
            name,
            format_value(row.mean),
            format_value(row.median),
            format_ratio(row.relative_mean),
            format_ratio(row.relative_median),
            format_ratio(row.ratio_mean),
            format_ratio(row.ratio_median),
            str(row.n_tracks),
        )
    console.print(view)


def print_artifacts(paths: Sequence[Path], console: Console, *, elapsed: float | None = None) -> None:
    """List the files a command wrote."""
    elapsed_part = f" in {elapsed:.1f}s" if elapsed is not None else ""
    console.print(f"[green]✔ Wrote {len(paths)} file(s){elapsed_part}[/green]")
    for path in paths:
        console.print(f"  {path}")
