"""Probabilistic forecasting of characteristic 3D human poses from one observed pose."""
from . import data, evaluate, heatmap, kernels, model, refine, sampler, skeleton, train
from .data import DatasetRecord, load_dataset, save_dataset, synth_generate
from .evaluate import min_of_k, mpjpe, nll
from .heatmap import GridTransform
from .refine import RefinementProblem, RefinementWeights, refine as refine_pose
from .sampler import PoseModels, SampleSet, sample_pose_set, sample_poses
from .train import TrainingConfig, stage_configs

__version__ = "0.1.0"
