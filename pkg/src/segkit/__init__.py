"""U-Net style semantic segmentation of satellite imagery on a numpy autodiff core."""

from .architectures import ModelSpec, build_model, build_modified_unet, build_vgg_unet, describe, model_forward, shape_plan
from .data import SceneSpec, encode_labels, split_dataset, stitch_tiles, synth_scene, tile_raster
from .engine import TrainConfig, evaluate, load_checkpoint, predict_scene, save_checkpoint, train
from .errors import *  # noqa: F401,F403
from .objectives import confusion, jaccard_index, metrics_report
from .optim import adam_init, adam_step
from .rng import RngStream
from .tensor import Tape, Tensor

__version__ = "0.1.0"
