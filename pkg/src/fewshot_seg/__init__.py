"""Few-shot volumetric segmentation: conditioner and segmenter arms joined by squeeze-and-excite gates."""
from .network import FewShotConfig, NetworkParams, PRESETS, forward, backward, preset
from .training import TrainHyperparams, LabelUniverse, SliceDataset, train, dice_loss
from .volumetric import SliceRange, build_pairing, segment_volume, dice_score, avg_surface_distance

__all__ = [
    "FewShotConfig", "NetworkParams", "PRESETS", "forward", "backward", "preset",
    "TrainHyperparams", "LabelUniverse", "SliceDataset", "train", "dice_loss",
    "SliceRange", "build_pairing", "segment_volume", "dice_score", "avg_surface_distance",
]
