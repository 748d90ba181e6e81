"""Experiment runner: configuration, train/eval cells, sweeps and the CLI."""
from .config import DataConfig, ResolvedConfig, resolve
from .experiments import (ABLATION_ROWS, AXES, RESULT_COLUMNS, ExperimentSpec, ResultTable, check_table,
                          export_embeddings, read_embeddings, run_ablation_grid, run_cell, run_experiment,
                          run_sweep)

__all__ = [
    "ABLATION_ROWS", "AXES", "RESULT_COLUMNS", "DataConfig", "ExperimentSpec", "ResolvedConfig", "ResultTable",
    "check_table", "export_embeddings", "read_embeddings", "resolve", "run_ablation_grid", "run_cell",
    "run_experiment", "run_sweep",
]
