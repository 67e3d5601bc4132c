"""Camera-style adaptation and collaborative clustering for cross-domain person re-ID."""

from .backbone import ReIDNet
from .camstyle import CamStyleGAN, generate_transferred_set
from .cluster import ClusterResult, dbscan, select_eps
from .cmfc import CollaborativeClustering, PseudoLabelSet, assign_pseudo_labels
from .config import TrainConfig, load_config
from .data import Dataset, ImageSample, SynthConfig, generate_synthetic, load_manifest, make_benchmark
from .evaluate import MetricsReport, cmc_map
from .losses import LossWeights, batch_hard_triplet, cmfc_loss, smoothed_cross_entropy
from .reid import ReIDModel

__version__ = "0.1.0"

__all__ = [
    "CamStyleGAN", "ClusterResult", "CollaborativeClustering", "Dataset", "ImageSample", "LossWeights",
    "MetricsReport", "PseudoLabelSet", "ReIDModel", "ReIDNet", "SynthConfig", "TrainConfig",
    "assign_pseudo_labels", "batch_hard_triplet", "cmc_map", "cmfc_loss", "dbscan", "generate_synthetic",
    "generate_transferred_set", "load_config", "load_manifest", "make_benchmark", "select_eps",
    "smoothed_cross_entropy",
]
