"""Full detector: restoration front end, guided backbone, detection head.

One parameter set serves both the clear and blurred passes during
training; at inference only a blurred image is consumed. The restoration
front end and the frequency guidance block are each optional so ablation
arms reuse the same class.
"""

from dataclasses import dataclass, field

import torch.nn as nn

from .backbone import BackboneConfig, DetectionBackbone, DetectionHead, decode_detections
from .errors import ConfigError
from .fdd import FddConfig, FddNet, count_parameters
from .fsgm import FrequencyStructureGuidance, FsgmConfig


@dataclass
class ModelConfig:
    fdd: FddConfig = field(default_factory=FddConfig)
    fsgm: FsgmConfig = field(default_factory=FsgmConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    use_fdd: bool = True
    use_fsgm: bool = True


class DeblurDetector(nn.Module):
    """Restoration network feeding a guided detection backbone and head."""

    def __init__(self, config: ModelConfig | None = None):
        super().__init__()
        self.config = config or ModelConfig()
        if self.config.use_fsgm and not self.config.use_fdd:
            raise ConfigError("frequency guidance needs the restoration branch for its prior")

        in_channels = self.config.fdd.in_channels
        self.fdd = FddNet(self.config.fdd) if self.config.use_fdd else None

        fsgm = None
        if self.config.use_fsgm:
            fsgm = FrequencyStructureGuidance(
                prior_channels=4 * self.config.fdd.base_channels,
                feat_channels=self.config.backbone.stem_channels,
                config=self.config.fsgm,
            )
        self.backbone = DetectionBackbone(self.config.backbone, in_channels=in_channels, fsgm=fsgm)
        self.head = DetectionHead(stage_channels=self.config.backbone.stage_channels)

    def extract(self, image):
        """Backbone features for one image batch; taps are None without FDD."""
        if self.fdd is not None:
            taps = self.fdd(image)
            prior = taps.prior if self.config.use_fsgm else None
            stages = self.backbone(taps.restored, prior=prior)
        else:
            taps = None
            stages = self.backbone(image)
        return taps, stages

    def forward(self, image):
        taps, stages = self.extract(image)
        return taps, stages, self.head(stages)

    def detect(self, image, score_threshold=0.3, iou_nms=0.5):
        _, _, predictions = self.forward(image)
        return decode_detections(predictions, image.shape[-2:], score_threshold, iou_nms)

    def param_counts(self):
        counts = {
            "fdd": count_parameters(self.fdd) if self.fdd is not None else 0,
            "fsgm": count_parameters(self.backbone.fsgm) if self.backbone.fsgm is not None else 0,
            "backbone": count_parameters(self.backbone),
            "head": count_parameters(self.head),
        }
        counts["backbone"] -= counts["fsgm"]  # fsgm lives inside the backbone module tree
        counts["total"] = count_parameters(self)
        return counts
