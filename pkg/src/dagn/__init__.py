"""JPEG compression artifacts reduction with decoupled compression-insensitive and
compression-sensitive guidance."""

from .data import ImagePair, QfLabel, batch_stream, jpeg_roundtrip, load_image, make_pair, sample_patch
from .encoders import DecoupleEncoders, StageOneLosses, stage1_step
from .metrics import MetricsReport, evaluate_model, psnr, psnr_b, ssim
from .network import DAGN, DAGNConfig, ablation_variant
from .training import TrainConfig, train_stage1, train_stage2
from .checkpoint import CheckpointBundle, load_checkpoint, save_checkpoint

__version__ = "0.1.0"
