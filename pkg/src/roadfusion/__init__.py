"""RoadFusion: pavement-defect anomaly detection and localization.

Pipeline stages: dataset ingestion -> multi-scale patch feature extraction
-> dual feature adaptation -> synthetic-anomaly discriminator training ->
pixel-level anomaly localization -> evaluation.
"""

__version__ = "0.1.0"

from .config import ConfigError, RunConfig, config_digest, load_config

__all__ = [
    "ConfigError",
    "RunConfig",
    "config_digest",
    "load_config",
    "__version__",
]
