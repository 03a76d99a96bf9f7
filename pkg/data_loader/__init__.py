"""
PSMT — Data Loader Package

Synthetic dataset generation, partition protocol and batch loading.
"""

from .dataset import Batch, CyclicSampler, DatasetIndex, load_batch
from .partition import split_partition
from .synthetic import SyntheticSpec, generate_dataset, generate_synthetic

__all__ = [
    "Batch",
    "CyclicSampler",
    "DatasetIndex",
    "SyntheticSpec",
    "generate_dataset",
    "generate_synthetic",
    "load_batch",
    "split_partition",
]
