"""
PrefSynth - Auxiliary Generation Stage
Retrains the ranker with generated images in place of reference images.
"""
from prefsynth.schemas import ObservationRecord, RunConfig
from prefsynth.services.experiments import AUXILIARY_ARMS, auxiliary_seed
from stages.base import ExperimentStage, StageConfig


class AuxiliaryStage(ExperimentStage):
    def __init__(self, run_config: RunConfig) -> None:
        super().__init__(
            StageConfig(
                name="auxiliary",
                description="Recall/NDCG of rankers trained on reference, generated and global images",
            ),
            run_config,
        )

    def arm_order(self) -> list[str]:
        return list(AUXILIARY_ARMS)

    def observe(self, seed: int) -> list[ObservationRecord]:
        return auxiliary_seed(self.run_config, seed)
