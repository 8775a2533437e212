"""
PrefSynth - Checkpoints

JSON container for calibrator and ranking-model parameters. Arrays are
stored with explicit shapes; floats go through ``repr`` so a save/load
round trip reproduces every value bit for bit.
"""
import json
from pathlib import Path
from typing import Any

import numpy as np
from pydantic import ValidationError

from prefsynth.core.errors import CheckpointError, DomainError
from prefsynth.core.logging import get_logger
from prefsynth.schemas import CHECKPOINT_FORMAT_VERSION, ArrayRecord, CheckpointDocument
from prefsynth.services.preference import CalibratorParams
from prefsynth.services.ranker import RANK_ARRAYS, RankModelParams

logger = get_logger(__name__)


def _array_record(arr: np.ndarray) -> ArrayRecord:
    return ArrayRecord(shape=list(arr.shape), values=[float(x) for x in np.asarray(arr).ravel()])


def _array(name: str, record: ArrayRecord) -> np.ndarray:
    size = int(np.prod(record.shape)) if record.shape else 1
    if size != len(record.values):
        raise CheckpointError(
            f"array {name}: shape {record.shape} needs {size} values, found {len(record.values)}"
        )
    return np.asarray(record.values, dtype=np.float64).reshape(record.shape)


def calibrator_document(params: CalibratorParams) -> CheckpointDocument:
    return CheckpointDocument(
        kind="calibrator",
        arrays={name: _array_record(arr) for name, arr in params.arrays.items()},
        scalars={"depth": params.depth},
    )


def rank_model_document(params: RankModelParams) -> CheckpointDocument:
    return CheckpointDocument(
        kind="rank_model",
        arrays={name: _array_record(getattr(params, name)) for name in RANK_ARRAYS},
        scalars={
            "fusion_weight": params.fusion_weight,
            "training_auc": list(params.training_auc),
        },
    )


def dumps(document: CheckpointDocument) -> str:
    # json writes floats with repr, which round-trips float64 exactly;
    # array order is part of the parameter layout and is kept as given
    return json.dumps(document.model_dump(), separators=(",", ":")) + "\n"


def _read_document(path: Path, kind: str) -> CheckpointDocument:
    try:
        raw: Any = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable checkpoint ({exc})") from exc
    try:
        document = CheckpointDocument.model_validate(raw)
    except ValidationError as exc:
        raise CheckpointError(f"{path}: invalid checkpoint ({exc.errors()[0]['msg']})") from exc
    if document.format_version != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: format_version {document.format_version} is not supported "
            f"(expected {CHECKPOINT_FORMAT_VERSION})"
        )
    if document.kind != kind:
        raise CheckpointError(f"{path}: expected a {kind} checkpoint, found {document.kind}")
    return document


def save_calibrator(params: CalibratorParams, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps(calibrator_document(params)), encoding="utf-8")
    logger.debug("calibrator checkpoint written", path=str(path), checksum=params.checksum())
    return path


def load_calibrator(path: str | Path) -> CalibratorParams:
    path = Path(path)
    document = _read_document(path, "calibrator")
    depth = document.scalars.get("depth")
    if not isinstance(depth, int):
        raise CheckpointError(f"{path}: calibrator checkpoint lacks an integer depth")
    layout = CalibratorParams.layout(depth)
    unexpected = sorted(set(document.arrays) - set(layout))
    if unexpected:
        raise CheckpointError(f"{path}: unexpected calibrator arrays {', '.join(unexpected)}")
    missing = [name for name in layout if name not in document.arrays]
    if missing:
        raise CheckpointError(f"{path}: calibrator checkpoint lacks {', '.join(missing)}")
    arrays = {name: _array(name, document.arrays[name]) for name in layout}
    params = CalibratorParams(arrays=arrays, depth=depth)
    try:
        params.validate()
    except (DomainError, KeyError) as exc:
        raise CheckpointError(f"{path}: {exc}") from exc
    return params


def save_rank_model(params: RankModelParams, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps(rank_model_document(params)), encoding="utf-8")
    logger.debug("rank model checkpoint written", path=str(path))
    return path


def load_rank_model(path: str | Path) -> RankModelParams:
    path = Path(path)
    document = _read_document(path, "rank_model")
    missing = [name for name in RANK_ARRAYS if name not in document.arrays]
    if missing:
        raise CheckpointError(f"{path}: rank model checkpoint lacks {', '.join(missing)}")
    arrays = {name: _array(name, document.arrays[name]) for name in RANK_ARRAYS}
    try:
        return RankModelParams(
            **arrays,
            fusion_weight=float(document.scalars.get("fusion_weight", 0.7)),
            training_auc=[float(x) for x in document.scalars.get("training_auc", [])],
        )
    except DomainError as exc:
        raise CheckpointError(f"{path}: {exc}") from exc
