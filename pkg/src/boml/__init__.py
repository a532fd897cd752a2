"""Bayesian online meta-learning on a small reverse-mode autodiff core."""
from .diffcore import CapabilityError, DimensionError, InputError, Network, ParamSet
from .episodic import DatasetSource, EpisodicTask, TaskStream, make_synthetic_stream, sample_task
from .maml import AdamConfig, EvalConfig, InnerLoopConfig, evaluate, inner_adapt, maml_loss

__version__ = "0.1.0"
