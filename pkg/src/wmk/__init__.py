"""Blind multi-bit image watermarking with tiled overlays and geometric sync."""

__version__ = "0.1.0"

from .encoder import (DEFAULT_ALPHA, EncoderParams, MESSAGE_BITS, MASK_H, MASK_W,
                      build_overlay, embed, generate_pattern, init_encoder_params,
                      message_from_hex, message_to_hex, precompute_overlay)
from .decoder import (DecoderParams, crop_to_grid, decode_logits, decode_message,
                      init_decoder_params, threshold, tiled_pool)
from .distortions import (DistortionConfig, diff_jpeg, gaussian_noise, rand_crop,
                          sample_training_distortion, scale_translate)
from .metrics import bit_accuracy, psnr, transform_error
from .rng import Rng
from .sync import (SearchGrid, SyncNetParams, TransformEstimate, estimate_transform,
                   init_syncnet_params, rectify, syncnet_forward, universal_template)
from .tensor import Tape, Tensor, grad_check
from .training import (ModelState, SyncTrainConfig, TrainConfig, load_state,
                       loss_joint, save_state, train_joint, train_syncnet)

__all__ = [name for name in dir() if not name.startswith("_")]
