"""Portrait blemish retouching with a style-based generator prior."""
from .bafs import BAFS, StrengthSpec, bafs_fuse, strength_adjust
from .data import BlemishSpec, PairedSample, augment, dataset_build, dataset_iterate, synth_pair
from .gp_backbone import GPBackbone, GPConfig, gp_unit_forward
from .metrics import changed_pixel_ratio, evaluate_dataset, perceptual_distance, psnr, ssim
from .model import ModelConfig, Retoucher, retouch, retouch_variant
from .semantic_encoder import EncoderConfig, SemanticEncoder, leh_forward, se_forward

__version__ = "0.1.0"
