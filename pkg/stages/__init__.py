"""
PrefSynth - Stages Module
Exports one stage class per CLI subcommand.
"""
from stages.ablate import AblateStage
from stages.auxiliary import AuxiliaryStage
from stages.base import ArtifactStage, BaseStage, ExperimentStage, StageConfig
from stages.evaluate import EvaluateStage
from stages.gen_data import GenDataStage
from stages.reflect import ReflectStage
from stages.report import ReportStage
from stages.train_rm import TrainRankModelStage
from stages.validate_retrieval import ValidateRetrievalStage

__all__ = [
    "StageConfig",
    "BaseStage",
    "ArtifactStage",
    "ExperimentStage",
    "GenDataStage",
    "TrainRankModelStage",
    "ReflectStage",
    "EvaluateStage",
    "ValidateRetrievalStage",
    "AblateStage",
    "AuxiliaryStage",
    "ReportStage",
]
