"""protoscope: interpretable fish-sex classification at desk scale.

Pipeline: raster I/O and primitive transforms -> heuristic foreground ROI
extraction -> seeded augmentation presets -> frozen convolutional feature
extraction (or externally supplied FMAP files) -> a trainable soft
prototype decision tree whose every prediction reads as a chain of
prototype-similarity decisions.
"""

__version__ = "0.1.0"

from .raster import Mask, NormalizedTensor, RasterImage  # noqa: F401
from .roi import BoundingBox, SegmentationResult  # noqa: F401
from .features import FeatureMap, FrozenBackbone  # noqa: F401
from .prototree import Prediction, PrototypeTree, RoutingTrace  # noqa: F401
from .train import ConfusionMatrix, SplitPlan, TrainConfig  # noqa: F401
