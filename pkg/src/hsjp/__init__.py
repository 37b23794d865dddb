"""Heatmap-style jigsaw puzzles: self-supervised pretraining for keypoint heatmap networks.

Modules
-------
imaging     affine augmentation, resampling, colour jitter
puzzle      patch grids, Fisher-Yates permutations, shuffled images
heatmap     Gaussian targets, masked MSE, sub-pixel peak decoding
model       small stride-4 residual CNN with manual backprop
checkpoint  binary weight files
train       Adam, step schedules, pretraining and finetuning loops
evaluation  jigsaw precision, OKS / mAP, transfer sweeps
synthdata   procedural person-like corpora with exact keypoints
config      key = value configuration files
cli         command-line entry point
"""

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, parse_config
from .evaluation import (evaluate_hsjp, evaluate_pose, map_over_thresholds, oks, patch_correct,
                         precision, puzzle_solved)
from .heatmap import HeatmapStack, decode_peaks, masked_mse, render_targets, sigma_bound
from .imaging import AffineTransform, bilinear_sample, color_augment, warp_image
from .model import ModelState, backward, build_network, forward, set_freeze_prefix, swap_head
from .puzzle import Permutation, fisher_yates, make_grid, shuffle_image
from .rng import Rng
from .synthdata import DEFAULT_SKELETON, gen_keypoint_corpus, gen_pretext_corpus
from .train import PAPER_SCHEDULE, Schedule, TrainConfig, finetune, lr_at_epoch, pretrain

__version__ = "0.1.0"
