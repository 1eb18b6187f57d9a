"""Continual test-time adaptation for point cloud segmentation under corruption streams."""
from .adapt import AdaptConfig, AdaptState, apcotta_step, baseline_step, step
from .cloud import IGNORE, PointCloud, SubCloudBatch, load_cloud, save_cloud
from .corrupt import BenchmarkManifest, CorruptionKind, build_benchmark, corrupt, default_manifest
from .estimators import CloudCorruptor, ContinualAdapter, PointSegmenter
from .harness import PipelineConfig, RunConfig, StreamSpec, run_ablation, run_pipeline, run_stream, run_sweep
from .metrics import ConfusionMatrix, MetricsReport, StreamReport, miou, overall_accuracy
from .net import NetSpec, Network, load_checkpoint, save_checkpoint
from .scenes import SyntheticSceneSpec, synth_scene

__version__ = "0.1.0"
