"""Settlement-extent mapping from 10-band reflectance rasters.

A small fully convolutional network (hand-derived gradients, numpy only)
plus the raster plumbing around it: BSQF file I/O, cubic band upsampling,
patch extraction, Nesterov-Adam training with early stopping, seam-free
tiled inference, and a confusion-matrix assessment battery.
"""

from .assess import (AGREEMENT_CODES, CheckPointSet, ConfusionMatrix, aa, agreement_map,
                     building_recall, cme, confusion_from_points, f1, kappa, metrics_dict,
                     mlgcp_grid, recall, report)
from .mosaic import TilePlan, plan_tiles, predict_map
from .net import ArchSpec, Model, build, forward, load_checkpoint, param_count, save_checkpoint
from .nn import IGNORE, ConvLayer, DropoutLayer
from .raster import (Raster, SampleSet, SynthSpec, extract_patches, load_raster,
                     normalize_reflectance, save_raster, stack_and_normalize, synth_scene,
                     upsample_cubic)
from .training import EarlyStopping, NadamState, TrainConfig, nadam_step, split_dataset, train

__all__ = [
    "AGREEMENT_CODES", "ArchSpec", "CheckPointSet", "ConfusionMatrix", "ConvLayer",
    "DropoutLayer", "EarlyStopping", "IGNORE", "Model", "NadamState", "Raster",
    "SampleSet", "SynthSpec", "TilePlan", "TrainConfig", "aa", "agreement_map", "build",
    "building_recall", "cme", "confusion_from_points", "extract_patches", "f1", "forward",
    "kappa", "load_checkpoint", "load_raster", "metrics_dict", "mlgcp_grid", "nadam_step",
    "normalize_reflectance", "param_count", "plan_tiles", "predict_map", "recall",
    "report", "save_checkpoint", "save_raster", "split_dataset", "stack_and_normalize",
    "synth_scene", "train", "upsample_cubic",
]

__version__ = "0.1.0"
