from .matrix import (CONDITION_KINDS, CONFIG_VERSION, Cell, check_version, expand_grid, load_dataset_spec,
                     plan_cells, run_matrix)
from .projection import METHOD as PROJECTION_METHOD, Projection, feature_projection, pca_2d
from .report import COLUMNS, EvalReport, EvalRow, error_row, read_csv, scored_row, strip_timing

__all__ = [
    "CONDITION_KINDS", "CONFIG_VERSION", "Cell", "check_version", "expand_grid", "load_dataset_spec",
    "plan_cells", "run_matrix", "PROJECTION_METHOD", "Projection", "feature_projection", "pca_2d",
    "COLUMNS", "EvalReport", "EvalRow", "error_row", "read_csv", "scored_row", "strip_timing",
]
