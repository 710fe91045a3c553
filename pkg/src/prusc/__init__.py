"""Subnetwork extraction against spurious features, on a small numpy autodiff core."""
from .autodiff import DenseNetwork, Tensor, backward, forward
from .config import PipelineConfig, RunConfig, load_config
from .datasets import LabeledDataset, gen_synthetic_images, gen_two_moons
from .kernels import BACKEND
from .pipeline import run_pipeline

__version__ = "0.1.0"

__all__ = ["BACKEND", "DenseNetwork", "LabeledDataset", "PipelineConfig", "RunConfig", "Tensor", "backward",
           "forward", "gen_synthetic_images", "gen_two_moons", "load_config", "run_pipeline"]
