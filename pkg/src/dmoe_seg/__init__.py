"""Attribute-routed mixture-of-experts segmentation toolkit."""

__version__ = "0.1.0"

from .tensor import Tensor, grad_check  # noqa: F401
from .moe import DMoEConfig, DMoELayer, GatingDecision  # noqa: F401
from .backbone import BackboneConfig, SegmentationModel  # noqa: F401
from .metrics import SampleScore, SubgroupReport, aggregate, dice, essp, iou  # noqa: F401
from .data import Dataset, DatasetSpec, Sample  # noqa: F401
from .training import AdamW, TrainConfig, evaluate, seg_loss, train  # noqa: F401
