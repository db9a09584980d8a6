"""Age-conditioned atlas segmentation with diffeomorphic registration."""
from .atlas import GlobalAtlas, age_group, init_global_atlas, update_global_atlas
from .config import ConfigError, TrainConfig
from .diffeo import IntegrationConfig, compose, exp_svf, invert_svf, jacobian_det
from .estimator import CASNetSegmenter
from .losses import LossWeights
from .pipeline import CASNet, EvalReport, evaluate, segment, train
from .volume import DeformationField, GridSpec, trilinear_sample, warp

__all__ = [
    "CASNet", "CASNetSegmenter", "ConfigError", "DeformationField", "EvalReport", "GlobalAtlas",
    "GridSpec", "IntegrationConfig", "LossWeights", "TrainConfig", "age_group", "compose",
    "evaluate", "exp_svf", "init_global_atlas", "invert_svf", "jacobian_det", "segment", "train",
    "trilinear_sample", "update_global_atlas", "warp",
]
__version__ = "0.1.0"
