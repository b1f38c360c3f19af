"""Unsupervised domain adaptation with a gradient-reversal domain classifier.

A small reverse-mode autodiff engine drives a conv feature extractor with a
label head and a domain head.  Training uses a scheduled domain-loss weight,
per-sample clamping of the domain loss and balanced multi-domain batches.
"""
from .autodiff import Tape, Tensor, backward, grad_reverse
from .data import DomainDataset, DomainShift, generate_synthetic, load_datasets, make_epoch, save_datasets
from .errors import GradrevError
from .model import ModelConfig, forward, init_params
from .schedule import ScheduleState, clamp_domain_loss, combine_losses, factor
from .training import (Checkpoint, TrainConfig, domain_probe_accuracy, evaluate, load_checkpoint,
                       run_protocol, save_checkpoint, train_step)

__version__ = "0.1.0"
