"""
PrefSynth - Report Stage
Collects eval metrics and experiment reports from run directories into one
long-format CSV (plot data) plus a structured JSON summary.
"""
from pathlib import Path
from typing import Any, Sequence

import pandas as pd

from prefsynth.core import get_logger
from prefsynth.core.errors import MissingArtifactError
from prefsynth.schemas import ExperimentReport, MetricsReport, RunConfig
from prefsynth.services.experiments import REPORT_COLUMNS, experiment_frame
from prefsynth.services.metrics import METRIC_FIELDS
from prefsynth.services.orchestrator import MANIFEST_DIR, RunDirectory, write_json
from stages.base import ArtifactStage, StageConfig

logger = get_logger(__name__)


def _has_manifest(folder: Path) -> bool:
    return any((folder / MANIFEST_DIR).glob("*.json"))


def _metrics_frame(run_dir: RunDirectory, metrics_path: Path) -> pd.DataFrame:
    report = MetricsReport.model_validate_json(metrics_path.read_text(encoding="utf-8"))
    manifest = next(m for m in run_dir.manifests() if m.command == "eval")
    rows = [
        {
            "experiment": manifest.run_name,
            "arm": "eval",
            "value": None,
            "seed": str(manifest.seed),
            "metric": name,
            "mean": getattr(report, name),
        }
        for name in METRIC_FIELDS
        if getattr(report, name) is not None
    ]
    return pd.DataFrame(rows, columns=REPORT_COLUMNS)


class ReportStage(ArtifactStage):
    """Summarises finished runs; needs every listed directory to carry manifests."""

    def __init__(self, run_config: RunConfig, run_dirs: Sequence[str | Path]) -> None:
        super().__init__(
            StageConfig(name="report", description="Collect run results into CSV and JSON"),
            run_config,
        )
        self.run_dirs = [Path(d) for d in run_dirs]

    def run_directory(self) -> RunDirectory:
        return RunDirectory(self.output_root / f"{self.run_config.name}.report")

    def inputs(self, run_dir: RunDirectory) -> dict[str, Path]:
        found: dict[str, Path] = {}
        for folder in self.run_dirs:
            metrics = folder / "metrics.json"
            report = folder / "report.json"
            if metrics.is_file() and _has_manifest(folder):
                found[metrics.as_posix()] = metrics
            elif report.is_file() and any(_has_manifest(sub) for sub in folder.iterdir() if sub.is_dir()):
                found[report.as_posix()] = report
            else:
                raise MissingArtifactError(f"{folder}/{MANIFEST_DIR}", "eval or an experiment command")
        return found

    def execute(self, run_dir: RunDirectory, inputs: dict[str, Path]) -> tuple[list[Path], dict[str, Any]]:
        frames: list[pd.DataFrame] = []
        for path in inputs.values():
            if path.name == "metrics.json":
                frames.append(_metrics_frame(RunDirectory(path.parent), path))
            else:
                report = ExperimentReport.model_validate_json(path.read_text(encoding="utf-8"))
                frames.append(experiment_frame(report))

        frames = [f for f in frames if not f.empty]
        if frames:
            table = pd.concat(frames, ignore_index=True)
            # one contiguous block per experiment, rows inside a block keep their order
            table = table.sort_values("experiment", kind="stable").reset_index(drop=True)
        else:
            table = pd.DataFrame(columns=REPORT_COLUMNS)

        csv_path = run_dir.path("report.csv")
        csv_path.parent.mkdir(parents=True, exist_ok=True)
        table.to_csv(csv_path, index=False)

        means = table[table["seed"] == "mean"] if not table.empty else table
        blocks: dict[str, dict[str, dict[str, float]]] = {}
        for row in means.itertuples(index=False):
            blocks.setdefault(row.experiment, {}).setdefault(row.arm, {})[row.metric] = float(row.mean)
        summary_path = write_json(run_dir.path("report.json"), {"experiments": blocks})
        logger.info("report written", rows=len(table), experiments=len(blocks))
        return [csv_path, summary_path], {"rows": int(len(table)), "experiments": sorted(blocks)}
