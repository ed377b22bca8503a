"""Datasets, training, evaluation, checkpoints, benchmarks and the CLI."""
from .bench import BenchMatrix, benchmark, load_matrix
from .config import RunConfig, load_config
from .data import DatasetBundle, load_keypoint_depths, load_synthetic_dataset, low_view_split
from .fixtures import attach_keypoints, make_bundle, make_fixture
from .train import MetricsRow, evaluate, read_metrics_csv, run_training, train
