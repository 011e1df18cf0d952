"""Depth from a single image, trained from rectified stereo pairs without depth labels."""
from .data import CameraModel, SceneConfig, StereoSample, generate_dataset, generate_scene
from .evaluate import MetricsReport, d1_all, depth_metrics, disparity_to_depth, evaluate, postprocess
from .loss import LossWeights, total_loss
from .model import NetConfig, forward, init, load_checkpoint, save_checkpoint
from .train import AugmentConfig, TrainConfig, train

__version__ = "0.1.0"
