"""
PrefSynth - Retrieval Validation Stage
Compares Ret, ExpRet and Random sequence construction by preference alignment.
"""
from prefsynth.core.errors import ConfigError
from prefsynth.schemas import ObservationRecord, RunConfig
from prefsynth.services.experiments import strategy_arms, validate_retrieval_seed
from stages.base import ExperimentStage, StageConfig


class ValidateRetrievalStage(ExperimentStage):
    def __init__(self, run_config: RunConfig) -> None:
        super().__init__(
            StageConfig(
                name="validate-retrieval",
                description="Preference alignment of retrieved vs expanded vs random sequences",
            ),
            run_config,
        )

    def validate_input(self) -> None:
        k = self.run_config.retrieval.k
        if k < 1:
            raise ConfigError("validate-retrieval needs retrieval.k >= 1")
        if not self.run_config.corpus_path and 2 * k > self.run_config.corpus.history_length:
            raise ConfigError(
                f"validate-retrieval needs 2k <= history length "
                f"({2 * k} > {self.run_config.corpus.history_length})"
            )

    def arm_order(self) -> list[str]:
        return strategy_arms(self.run_config.experiment.strategies)

    def observe(self, seed: int) -> list[ObservationRecord]:
        return validate_retrieval_seed(self.run_config, seed)
