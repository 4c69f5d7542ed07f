from .data import (FAKE, MARKERS, MAX_LEN, REAL, Dataset, GenConfig, NewsSample, generate_synthetic,
                   motif_patch, split_event_disjoint)
from .io import load_dataset, save_dataset
from .ppm import from_uint8, read_ppm, to_uint8, write_ppm

__all__ = [
    "FAKE", "MARKERS", "MAX_LEN", "REAL", "Dataset", "GenConfig", "NewsSample", "generate_synthetic",
    "motif_patch", "split_event_disjoint", "load_dataset", "save_dataset", "from_uint8", "read_ppm",
    "to_uint8", "write_ppm",
]
