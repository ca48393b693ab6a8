"""Site-generalizing lesion segmentation: masked normalization, hemisphere
augmentation and an adversarial site classifier around a U-Net."""

from .errors import DataError, SitegenError, TrainingError
from .model import SiteGeneralizingSegmenter
from .trainer import Checkpoint, TrainConfig, evaluate, train
from .volumes import DatasetManifest, SiteParams, Volume, generate_synthetic_site, read_manifest

__version__ = "0.1.0"
