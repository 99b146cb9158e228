"""CLI entry point for covfilt."""

import json
import time
from collections.abc import Callable
from dataclasses import replace
from pathlib import Path
from typing import Annotated, Any

import numpy as np
import typer
from rich.console import Console

from covfilt import __version__
from covfilt.autodiff import Array
from covfilt.config import (
    CovarianceSource,
    ExperimentConfig,
    Method,
    TrackConfig,
    TrainMode,
    config_hash,
    load_config,
)
from covfilt.datasets import load_tracks, save_tracks
from covfilt.epistemic import epistemic_offsets
from covfilt.evaluation import MetricsTable, build_sources, evaluate_sources, residual_ar1
from covfilt.exceptions import CovfiltError, MissingArtifactError, ModelFileError
from covfilt.kalman import FilterSpec, constant_velocity_spec
from covfilt.log import configure_logging
from covfilt.model import CovarianceLayout, ModelParams, init_params, load_model, predict_gaussian, save_model
from covfilt.output import (
    ReportMetadata,
    RunProgress,
    generate_manifest,
    generate_metrics_report,
    print_artifacts,
    print_metrics_table,
    write_curves_csv,
    write_metrics_csv,
    write_rainbow_csv,
    write_report,
)
from covfilt.simulator import (
    INPUT_DIM,
    MEASUREMENT_DIM,
    TrackDataset,
    apply_ood_shift,
    generate_rainbow,
    generate_tracks,
    regression_arrays,
)
from covfilt.training import (
    AdamSettings,
    TrainReport,
    fixed_covariance_for,
    train_kalman,
    train_mle,
    write_loss_curve,
    write_train_report,
)

app = typer.Typer(
    name="covfilt",
    help="Learned measurement covariances for Kalman filtering.\n\nExit codes: 0 = success, 2 = error.",
    no_args_is_help=True,
)

ConfigOption = Annotated[Path | None, typer.Option("--config", help="Experiment TOML file (default: covfilt.toml)")]
SeedOption = Annotated[int | None, typer.Option("--seed", min=0, help="Override the config seed")]
OutOption = Annotated[Path | None, typer.Option("--out", help="Override the output directory")]
ThreadsOption = Annotated[int, typer.Option("--threads", min=1, help="Worker threads for per-track work")]


def _version_callback(value: bool) -> None:
    """Print version and exit."""
    if value:
        typer.echo(f"covfilt {__version__}")
        raise typer.Exit()


@app.callback()
def main(
    _version: Annotated[
        bool,
        typer.Option("--version", callback=_version_callback, is_eager=True, help="Show version and exit"),
    ] = False,
) -> None:
    """Learned measurement covariances for Kalman filtering.

    Exit codes: 0 = success, 2 = error, 130 = interrupted.
    """


def _run(command: Callable[[], None]) -> None:
    """Run a command body, turning library errors into one stderr line and an exit code."""
    try:
        configure_logging()
        command()
    except CovfiltError as exc:
        message = " ".join(str(exc).split())
        typer.echo(f"error: {type(exc).__name__}: {message}", err=True)
        raise typer.Exit(code=2) from None
    except KeyboardInterrupt:
        typer.echo("error: KeyboardInterrupt: interrupted", err=True)
        raise typer.Exit(code=130) from None


def _load(config_path: Path | None, seed: int | None, out: Path | None) -> ExperimentConfig:
    config = load_config(config_path)
    updates: dict[str, Any] = {}
    if seed is not None:
        updates["seed"] = seed
    if out is not None:
        updates["out_dir"] = str(out)
    return config.model_copy(update=updates) if updates else config


def _metadata(command: str, config: ExperimentConfig) -> ReportMetadata:
    return ReportMetadata(command=command, config_hash=config_hash(config), seed=config.seed)


def _write_manifest(command: str, config: ExperimentConfig, files: list[Path]) -> Path:
    root = config.output_path
    manifest = generate_manifest(_metadata(command, config), files, root, config=config.model_dump(mode="json"))
    path = root / f"manifest-{command}.json"
    write_report(manifest, path)
    return path


def _track_config(config: ExperimentConfig, offset: int) -> TrackConfig:
    return config.data.track.model_copy(update={"seed": config.seed + offset})


def _data_path(config: ExperimentConfig, split: str) -> Path:
    return config.output_path / "data" / f"{split}.csv"


def _model_path(config: ExperimentConfig, name: str) -> Path:
    return config.output_path / "models" / f"{name}.json"


def _require(path: Path, hint: str) -> Path:
    if not path.exists():
        msg = f"{path} not found; run '{hint}' first"
        raise MissingArtifactError(msg)
    return path


def _filter_spec(config: ExperimentConfig) -> FilterSpec:
    return constant_velocity_spec(
        MEASUREMENT_DIM,
        config.data.track.dt,
        velocity_std_max=config.filter.velocity_std_max,
        joseph=config.filter.joseph,
    )


def _adam(config: ExperimentConfig) -> AdamSettings:
    training = config.training
    return AdamSettings(
        learning_rate=training.learning_rate,
        beta1=training.beta1,
        beta2=training.beta2,
        epsilon=training.epsilon,
    )


@app.command()
def generate(
    config_path: ConfigOption = None,
    seed: SeedOption = None,
    out: OutOption = None,
    threads: ThreadsOption = 1,
) -> None:
    """Generate the train, in-domain test and out-of-domain test track sets."""

    def body() -> None:
        config = _load(config_path, seed, out)
        started = time.monotonic()
        data = config.data
        splits = {
            "train": generate_tracks(_track_config(config, 0), data.n_train_tracks, threads=threads),
            "test": generate_tracks(_track_config(config, 1), data.n_test_tracks, threads=threads),
            "ood": apply_ood_shift(
                generate_tracks(_track_config(config, 2), data.n_test_tracks, threads=threads),
                data.ood,
                config.seed + 2,
            ),
        }
        files = []
        for split, tracks in splits.items():
            path = _data_path(config, split)
            save_tracks(tracks, path)
            files.append(path)
        files.append(_write_manifest("generate", config, files))
        print_artifacts(files, Console(), elapsed=time.monotonic() - started)

    _run(body)


class _Trainer:
    """Runs the per-method training recipes of one ``train`` command."""

    def __init__(
        self, config: ExperimentConfig, tracks: list[TrackDataset], console: Console, threads: int = 1
    ) -> None:
        self.config = config
        self.threads = threads
        self.tracks = tracks
        self.console = console
        self.inputs, self.labels = regression_arrays(tracks)
        self.settings = _adam(config)
        self.reports: dict[str, TrainReport] = {}

    def _mle(
        self, name: str, params: ModelParams, mode: TrainMode, epochs: int, seed: int, **extra: Any
    ) -> ModelParams:
        training = self.config.training
        with RunProgress(self.console, epochs, f"Training {name}") as progress:
            params, report = train_mle(
                params,
                self.inputs,
                self.labels,
                mode=mode,
                epochs=epochs,
                batch_size=training.batch_size,
                seed=seed,
                settings=self.settings,
                on_epoch=progress.epoch_callback(),
                **extra,
            )
        report.config = self.config.model_dump(mode="json")
        self.reports[name] = report
        return params

    def base(self) -> ModelParams:
        model = self.config.model
        params = init_params(
            INPUT_DIM,
            MEASUREMENT_DIM,
            hidden_sizes=tuple(model.hidden_sizes),
            dropout_rate=model.dropout_rate,
            rho_scale=model.rho_scale,
            layout=CovarianceLayout.FULL,
            seed=self.config.seed,
            inputs=self.inputs,
            labels=self.labels,
        )
        return self._mle("base", params, TrainMode.JOINT, self.config.training.epochs, self.config.seed)

    def covariance_head(self, name: str, base: ModelParams, layout: CovarianceLayout, seed: int) -> ModelParams:
        """Tune only the covariance branch on top of the frozen base mean."""
        training = self.config.training
        params = self._mle(name, replace(base, layout=layout), TrainMode.COV_ONLY, training.cov_epochs, seed)
        if training.residual_tuning and params.dropout_rate > 0.0:
            offsets = epistemic_offsets(params, self.inputs, self.config.epistemic.samples, seed)
            if layout is CovarianceLayout.DIAGONAL:
                offsets = offsets * np.eye(MEASUREMENT_DIM)
            params = self._mle(
                f"{name}-residual", params, TrainMode.COV_ONLY, training.cov_epochs, seed, offsets=offsets
            )
        return params

    def kalman(self, start: ModelParams, seed: int) -> ModelParams:
        training = self.config.training
        with RunProgress(self.console, training.kalman_epochs, "Training kalman-covariance") as progress:
            params, report = train_kalman(
                start,
                self.tracks,
                _filter_spec(self.config),
                subset=training.subset,
                epochs=training.kalman_epochs,
                truncation=training.truncation,
                burn_in=training.burn_in,
                seed=seed,
                batch_tracks=training.batch_tracks,
                clip_norm=training.clip_norm,
                train_mean=training.train_mean_in_kalman,
                settings=self.settings,
                threads=self.threads,
                on_epoch=progress.epoch_callback(),
            )
        report.config = self.config.model_dump(mode="json")
        self.reports[Method.KALMAN_COVARIANCE.value] = report
        return params


@app.command()
def train(
    config_path: ConfigOption = None,
    seed: SeedOption = None,
    out: OutOption = None,
    threads: ThreadsOption = 1,
) -> None:
    """Train the base model and every configured covariance method."""

    def body() -> None:
        config = _load(config_path, seed, out)
        started = time.monotonic()
        tracks = load_tracks(_require(_data_path(config, "train"), "covfilt generate"))
        console = Console(stderr=True)
        trainer = _Trainer(config, tracks, console, threads)
        stamp = {"config_hash": config_hash(config), "seed": config.seed}

        base = trainer.base()
        models: dict[str, ModelParams] = {"base": base}
        fixed = fixed_covariance_for(base, trainer.inputs, trainer.labels)
        methods = config.methods
        if Method.MLE_VARIANCE in methods:
            models[Method.MLE_VARIANCE.value] = trainer.covariance_head(
                Method.MLE_VARIANCE.value, base, CovarianceLayout.DIAGONAL, config.seed + 1
            )
        full_head: ModelParams | None = None
        if Method.MLE_COVARIANCE in methods or (Method.KALMAN_COVARIANCE in methods and config.training.pretrain):
            full_head = trainer.covariance_head(
                Method.MLE_COVARIANCE.value, base, CovarianceLayout.FULL, config.seed + 2
            )
            if Method.MLE_COVARIANCE in methods:
                models[Method.MLE_COVARIANCE.value] = full_head
        if Method.KALMAN_COVARIANCE in methods:
            start = full_head if full_head is not None else base
            models[Method.KALMAN_COVARIANCE.value] = trainer.kalman(start, config.seed + 3)

        files = []
        for name, params in models.items():
            path = _model_path(config, name)
            save_model(params, path, metadata=stamp)
            files.append(path)
        fixed_path = _model_path(config, Method.FIXED.value)
        write_report({"covariance": fixed.tolist(), **stamp}, fixed_path)
        files.append(fixed_path)
        for name, report in trainer.reports.items():
            json_path = config.output_path / "reports" / f"{name}.json"
            csv_path = config.output_path / "reports" / f"{name}-loss.csv"
            write_train_report(report, json_path)
            write_loss_curve(report, csv_path)
            files.extend([json_path, csv_path])
        files.append(_write_manifest("train", config, files))
        print_artifacts(files, Console(), elapsed=time.monotonic() - started)

    _run(body)


def _load_fixed(path: Path) -> Array:
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
        covariance = np.asarray(data["covariance"], dtype=np.float64)
    except (OSError, ValueError, KeyError, TypeError) as exc:
        msg = f"Could not read fixed covariance {path}: {exc}"
        raise ModelFileError(msg) from exc
    if covariance.shape != (MEASUREMENT_DIM, MEASUREMENT_DIM):
        msg = f"Fixed covariance in {path} has shape {covariance.shape}"
        raise ModelFileError(msg)
    return covariance


@app.command()
def evaluate(
    config_path: ConfigOption = None,
    seed: SeedOption = None,
    out: OutOption = None,
    threads: ThreadsOption = 1,
) -> None:
    """Filter the test and out-of-domain tracks with every method and tabulate velocity errors."""

    def body() -> None:
        config = _load(config_path, seed, out)
        hint = "covfilt train"
        base = load_model(_require(_model_path(config, "base"), hint))
        fixed = _load_fixed(_require(_model_path(config, Method.FIXED.value), hint))
        learned = {
            method: load_model(_require(_model_path(config, method.value), hint))
            for method in config.methods
            if method is not Method.FIXED
        }
        spec = _filter_spec(config)
        ar1 = None
        if config.filter.kind == "time-correlated":
            train_tracks = load_tracks(_require(_data_path(config, "train"), "covfilt generate"))
            ar1 = residual_ar1(base, train_tracks)
        sources = list(config.epistemic.sources) if config.epistemic.enabled else [CovarianceSource.ALEATORIC]

        console = Console()
        progress_console = Console(stderr=True)
        tables: list[MetricsTable] = []
        for split in ("test", "ood"):
            tracks = load_tracks(_require(_data_path(config, split), "covfilt generate"))
            rows = build_sources(
                base,
                fixed,
                learned,
                tracks,
                sources=sources,
                epistemic_samples=config.epistemic.samples,
                seed=config.seed,
            )
            with RunProgress(progress_console, len(rows), f"Evaluating {split}") as progress:
                table = evaluate_sources(
                    spec,
                    rows,
                    tracks,
                    split=split,
                    ar1=ar1,
                    threads=threads,
                    on_progress=progress.row_callback(),
                )
            tables.append(table)
            print_metrics_table(table, console)

        metadata = _metadata("evaluate", config)
        root = config.output_path
        files = [root / "metrics.csv", root / "metrics.json", root / "curves.csv"]
        write_metrics_csv(tables, files[0], metadata)
        write_report(generate_metrics_report(tables, metadata), files[1])
        write_curves_csv(tables, files[2], metadata)
        files.append(_write_manifest("evaluate", config, files))
        print_artifacts(files, console)

    _run(body)


@app.command("demo-rainbow")
def demo_rainbow(
    config_path: ConfigOption = None,
    seed: SeedOption = None,
    out: OutOption = None,
) -> None:
    """Fit a covariance head to the 2D rainbow curve and export per-point ellipse axes."""

    def body() -> None:
        config = _load(config_path, seed, out)
        rainbow = config.rainbow
        dataset = generate_rainbow(
            rainbow.n_points,
            config.seed,
            noise_scale=rainbow.noise_scale,
            heteroscedastic=rainbow.heteroscedastic,
        )
        params = init_params(
            1,
            2,
            hidden_sizes=tuple(config.model.hidden_sizes),
            dropout_rate=0.0,
            rho_scale=config.model.rho_scale,
            seed=config.seed,
            inputs=dataset.inputs,
            labels=dataset.samples,
        )
        with RunProgress(Console(stderr=True), rainbow.epochs, "Training rainbow head") as progress:
            params, _ = train_mle(
                params,
                dataset.inputs,
                dataset.samples,
                epochs=rainbow.epochs,
                batch_size=config.training.batch_size,
                seed=config.seed,
                settings=_adam(config),
                on_epoch=progress.epoch_callback(),
            )
        means, covariances = predict_gaussian(params, dataset.inputs)
        path = config.output_path / "rainbow.csv"
        write_rainbow_csv(dataset, means, covariances, path, _metadata("demo-rainbow", config))
        files = [path, _write_manifest("demo-rainbow", config, [path])]
        print_artifacts(files, Console())

    _run(body)
