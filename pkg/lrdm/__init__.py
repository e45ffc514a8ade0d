"""
Representation-Learning Diffusion Package

This package contains modular services for diffusion models with learned
representations, including:
- State and run-config management
- Reverse-mode autodiff on numpy arrays
- Noise schedules and the forward process
- Denoiser, representation encoder and first-stage networks
- Training objectives (DM, LRDM, t-LRDM, LVAE) and the variational bound
- Ancestral and DDIM samplers
- Training with Adam, EMA and the timestep curriculum
- Datasets and checkpoints
- Analyses (distortion, KL curves, interpolation, PCA grids, energy distance)
- Output generation
- Pipeline orchestration
"""

from .lrdm_state import ConfigError, LRDMState, RunConfig, load_run_config
from .lrdm_schedule import Parameterization, Schedule, Weighting, build_linear
from .lrdm_process import DiffusionProcess
from .lrdm_models import DenoiserNet, FirstStage, ReprEncoder
from .lrdm_objectives import ObjectiveService
from .lrdm_samplers import SamplerConfig, SamplerService
from .lrdm_trainer import ModelBundle, TrainConfig, TrainerService, build_bundle
from .lrdm_data import Dataset, load_checkpoint, make_mixture, save_checkpoint
from .lrdm_output import OutputService
from .lrdm_pipeline import ModeMismatchError, PipelineService

__all__ = [
    'ConfigError',
    'LRDMState',
    'RunConfig',
    'load_run_config',
    'Parameterization',
    'Schedule',
    'Weighting',
    'build_linear',
    'DiffusionProcess',
    'DenoiserNet',
    'FirstStage',
    'ReprEncoder',
    'ObjectiveService',
    'SamplerConfig',
    'SamplerService',
    'ModelBundle',
    'TrainConfig',
    'TrainerService',
    'build_bundle',
    'Dataset',
    'load_checkpoint',
    'make_mixture',
    'save_checkpoint',
    'OutputService',
    'ModeMismatchError',
    'PipelineService'
]
