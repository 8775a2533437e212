"""
PrefSynth - Orchestrator Service

Run-directory bookkeeping shared by every stage: the out/<experiment>/<seed>/
layout, manifests with content checksums, no-op detection, upstream
artifact resolution, JSONL step logs, and the worker pool that runs seeds
or arms in parallel.
"""
import asyncio
import hashlib
import json
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Optional, Sequence, TypeVar

from pydantic import BaseModel, ValidationError

from prefsynth.core import get_logger, get_settings
from prefsynth.core.errors import ConfigError, MissingArtifactError
from prefsynth.schemas import Manifest, RunConfig

logger = get_logger(__name__)

T = TypeVar("T")

MANIFEST_DIR = "manifests"

# artifact file name -> command that produces it
ARTIFACTS: dict[str, str] = {
    "corpus.jsonl": "gen-data",
    "rank_model.json": "train-rm",
    "calibrator.json": "reflect",
    "reflection_steps.jsonl": "reflect",
    "metrics.json": "eval",
    "metrics.csv": "eval",
}


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with path.open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def canonical_json(data: Any) -> str:
    return json.dumps(data, sort_keys=True, separators=(",", ":"))


class RunDirectory:
    """One out/<experiment>/<seed>/ directory."""

    def __init__(self, root: Path) -> None:
        self.root = root

    @classmethod
    def for_run(
        cls, experiment: str, seed: int, output_root: Optional[str | Path] = None
    ) -> "RunDirectory":
        base = Path(output_root) if output_root is not None else get_settings().output_root
        return cls(Path(base) / experiment / str(seed))

    def path(self, name: str) -> Path:
        return self.root / name

    def manifest_path(self, command: str) -> Path:
        return self.root / MANIFEST_DIR / f"{command}.json"

    def manifests(self) -> list[Manifest]:
        folder = self.root / MANIFEST_DIR
        if not folder.is_dir():
            return []
        found = []
        for path in sorted(folder.glob("*.json")):
            found.append(_read_manifest(path))
        return found

    def require(self, name: str, override: Optional[str] = None) -> Path:
        """Path of an upstream artifact, or MissingArtifactError naming its producer."""
        path = Path(override) if override else self.path(name)
        if not path.is_file():
            raise MissingArtifactError(str(path), ARTIFACTS.get(name, "the producing command"))
        return path

    def write_text(self, name: str, text: str) -> Path:
        path = self.path(name)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text, encoding="utf-8")
        return path


def _read_manifest(path: Path) -> Manifest:
    try:
        return Manifest.model_validate_json(path.read_text(encoding="utf-8"))
    except (OSError, ValidationError) as exc:
        raise ConfigError(f"{path}: unreadable manifest ({exc})") from exc


class ManifestRecorder:
    """Writes a command's manifest before its results and completes it after."""

    def __init__(
        self,
        run_dir: RunDirectory,
        command: str,
        config: RunConfig,
        seed: int,
        inputs: Mapping[str, Path] | None = None,
    ) -> None:
        self.run_dir = run_dir
        self.command = command
        self.manifest = Manifest(
            command=command,
            run_name=config.name,
            seed=seed,
            config=config.model_dump(mode="json"),
            inputs={name: sha256_file(p) for name, p in sorted((inputs or {}).items())},
        )

    def is_noop(self) -> bool:
        """True when a completed manifest with identical config and inputs exists
        and every recorded output still matches its checksum."""
        path = self.run_dir.manifest_path(self.command)
        if not path.is_file():
            return False
        previous = _read_manifest(path)
        if previous.status != "completed":
            return False
        if canonical_json(previous.config) != canonical_json(self.manifest.config):
            return False
        if previous.inputs != self.manifest.inputs or previous.seed != self.manifest.seed:
            return False
        for name, digest in previous.outputs.items():
            out = self.run_dir.path(name)
            if not out.is_file() or sha256_file(out) != digest:
                return False
        self.manifest = previous
        return True

    def _write(self) -> None:
        path = self.run_dir.manifest_path(self.command)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(
            json.dumps(self.manifest.model_dump(mode="json"), indent=2, sort_keys=True) + "\n",
            encoding="utf-8",
        )

    def begin(self) -> None:
        self.manifest = self.manifest.model_copy(update={"status": "running", "outputs": {}})
        self._write()

    def complete(self, outputs: Iterable[Path]) -> Manifest:
        digests = {
            p.relative_to(self.run_dir.root).as_posix(): sha256_file(p) for p in sorted(outputs)
        }
        self.manifest = self.manifest.model_copy(update={"status": "completed", "outputs": digests})
        self._write()
        logger.info(
            "manifest completed",
            command=self.command,
            run_dir=str(self.run_dir.root),
            outputs=len(digests),
        )
        return self.manifest


def write_jsonl(path: Path, records: Iterable[BaseModel | Mapping[str, Any]]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for record in records:
            data = record.model_dump(mode="json") if isinstance(record, BaseModel) else dict(record)
            fh.write(canonical_json(data) + "\n")
    return path


def write_json(path: Path, data: BaseModel | Mapping[str, Any]) -> Path:
    payload = data.model_dump(mode="json") if isinstance(data, BaseModel) else dict(data)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


# =============================================================================
# Worker pool
# =============================================================================

async def _gather_limited(tasks: Sequence[Callable[[], T]], jobs: int) -> list[T]:
    semaphore = asyncio.Semaphore(jobs)

    async def run_one(index: int, task: Callable[[], T]) -> T:
        async with semaphore:
            logger.debug("worker slot acquired", task=index, max_concurrent=jobs)
            return await asyncio.to_thread(task)

    return list(await asyncio.gather(*(run_one(i, t) for i, t in enumerate(tasks))))


def run_parallel(tasks: Sequence[Callable[[], T]], jobs: Optional[int] = None) -> list[T]:
    """Run independent tasks in up to ``jobs`` worker slots; results keep task order.

    Each task must own its outputs, so the combined result does not depend on
    the number of slots.
    """
    jobs = jobs or get_settings().jobs
    if jobs < 1:
        raise ConfigError(f"jobs must be >= 1, got {jobs}")
    if jobs == 1 or len(tasks) <= 1:
        return [task() for task in tasks]
    return asyncio.run(_gather_limited(tasks, jobs))
