"""Sparse 3D convolution engine and point-cloud place-recognition stack."""

from .autodiff import Adam, LrSchedule, Tape, Var, adam_update, lr_at
from .data import (
    AugmentConfig,
    LabelConfig,
    SubmapRecord,
    augment,
    generate_synthetic,
    label_pairs,
    load_dataset,
    load_submap_bin,
    sample_batch,
    write_dataset,
    write_submap_bin,
)
from .loss import LossConfig, tsap_loss, tsap_loss_tape
from .model import ArchConfig, Model, build_model
from .retrieval import (
    DescriptorDB,
    RecallReport,
    embed_dataset,
    evaluate_protocol,
    recall_at,
    recall_at_one_percent,
    retrieve,
)
from .training import TrainConfig, load_model, preset, save_model, train
from .voxels import (
    CoordinateMap,
    KernelMap,
    SparseTensor,
    build_coordinate_map,
    build_kernel_map,
    quantize,
    quantize_batch,
    stride_coords,
)

__version__ = "0.1.0"
