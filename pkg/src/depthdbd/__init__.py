"""Defocus blur detection with depth feature distillation and a DOF-edge loss."""
from .data import LensParams, SampleRecord, load_dataset, synth_dataset, synth_scene
from .distillation import (DistillConfig, Projector, TeacherBundle, TrainConfig,
                           make_depth_teacher, train_rdffnet, train_stage1, train_stage2)
from .estimator import DefocusBlurDetector
from .evaluation import MetricConfig, MetricsReport, evaluate_dataset
from .exceptions import ConfigurationError, DatasetError, DimensionError, NonFiniteLossError
from .losses import LossWeights, beta_schedule
from .model import ModelConfig, build_model, load_checkpoint, save_checkpoint

__version__ = "0.1.0"
