"""Cross-view geo-localization: street queries matched against satellite tiles,
with drone scenes as a 3D bridge during training."""

from .config import RunConfig, load_config, toy_config
from .evaluate import MetricsReport, RetrievalResult, compute_metrics, rank
from .losses import LossConfig, contrastive_objective, info_nce
from .train import GeoModel, Trainer, lr_at

__all__ = [
    "RunConfig", "load_config", "toy_config",
    "MetricsReport", "RetrievalResult", "compute_metrics", "rank",
    "LossConfig", "contrastive_objective", "info_nce",
    "GeoModel", "Trainer", "lr_at",
]
__version__ = "0.1.0"
