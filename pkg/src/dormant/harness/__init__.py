from .config import ExperimentConfig, derive_seed
from .pipeline import Pipeline, RunRecord, StageError, pearson, read_results_csv, run_pipeline, write_results_csv

__all__ = ["ExperimentConfig", "Pipeline", "RunRecord", "StageError", "derive_seed", "pearson",
           "read_results_csv", "run_pipeline", "write_results_csv"]
