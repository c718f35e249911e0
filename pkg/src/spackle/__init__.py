"""Gene-expression completion for spatial transcriptomics slides.

The package bundles preprocessing (filtering, TPM/log2 normalisation,
Moran's I gene ranking, ComBat), a hop-based median fill, a small numpy
transformer trained to reconstruct masked neighbourhoods, and a masked
multi-assay evaluation harness. ``spackle.cli`` exposes all of it on the
command line.
"""

from .data import Slide, SlideDataset, load_dataset, save_dataset
from .engine import TrainConfig, infer_complete, train
from .errors import SpackleError
from .median import MedianConfig, median_complete
from .model import SpackleModel, load_checkpoint, save_checkpoint

__version__ = "0.1.0"

__all__ = [
    "Slide", "SlideDataset", "load_dataset", "save_dataset", "TrainConfig", "train", "infer_complete",
    "SpackleError", "MedianConfig", "median_complete", "SpackleModel", "load_checkpoint", "save_checkpoint",
]
