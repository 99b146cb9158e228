"""Output formatting for covfilt."""

from covfilt.output.report import (
    ReportMetadata,
    file_sha256,
    generate_manifest,
    generate_metrics_report,
    write_curves_csv,
    write_metrics_csv,
    write_rainbow_csv,
    write_report,
)
from covfilt.output.terminal import (
    RunProgress,
    format_ratio,
    format_value,
    print_artifacts,
    print_metrics_table,
)

__all__ = [
    "ReportMetadata",
    "RunProgress",
    "file_sha256",
    "format_ratio",
    "format_value",
    "generate_manifest",
    "generate_metrics_report",
    "print_artifacts",
    "print_metrics_table",
    "write_curves_csv",
    "write_metrics_csv",
    "write_rainbow_csv",
    "write_report",
]
