"""
PrefSynth - Ablation Stage
Sweeps retrieval k, perturbation count r, or the rank reward on/off.
"""
from prefsynth.schemas import ObservationRecord, RunConfig
from prefsynth.services.experiments import ablation_arm, ablation_seed, apply_ablation
from stages.base import ExperimentStage, StageConfig


class AblateStage(ExperimentStage):
    def __init__(self, run_config: RunConfig) -> None:
        super().__init__(
            StageConfig(name="ablate", description="Metric-vs-value curves over one ablation axis"),
            run_config,
        )

    def experiment_name(self) -> str:
        axis = self.run_config.experiment.ablation_axis.value
        return f"{self.run_config.name}.ablate.{axis}"

    def validate_input(self) -> None:
        exp = self.run_config.experiment
        for value in exp.ablation_values:
            apply_ablation(self.run_config, exp.ablation_axis, value)

    def arm_order(self) -> list[str]:
        exp = self.run_config.experiment
        return [ablation_arm(exp.ablation_axis, v) for v in exp.ablation_values]

    def arm_values(self) -> dict[str, float]:
        exp = self.run_config.experiment
        return {ablation_arm(exp.ablation_axis, v): float(v) for v in exp.ablation_values}

    def observe(self, seed: int) -> list[ObservationRecord]:
        return ablation_seed(self.run_config, seed)
