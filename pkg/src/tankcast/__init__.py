"""Endpoint heatmap prediction for tank battles: rasterised map input,
vehicle-context attention and a conditioned nested U-Net."""

from .battle import ScenarioConfig, load_replay, save_replay, synth_battle
from .endpoints import ClusterConfig, dbscan_endpoints, rel_fde
from .geometry import GridGeometry, KernelSpec, make_velocity_kernel
from .model import EndpointPredictor, ModelConfig
from .train import TrainConfig, evaluate, predict, train

__version__ = "0.1.0"
