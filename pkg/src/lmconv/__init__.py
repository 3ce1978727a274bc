"""Locally masked convolutions for autoregressive image models with arbitrary generation orders."""
from .conv import ConvParams, lmconv_backward, lmconv_forward, lmconv_forward_ctx
from .engine import Adam, TrainConfig, Trainer, complete, conditional_nll, evaluate, sample
from .errors import ContractViolation, FormatError, InvalidArgument, NumericFailure, Unsupported
from .likelihood import ensemble_nll, joint_bpd, joint_nll, sequential_nll
from .masks import MaskCache, MaskMatrix, build_mask_matrix
from .net import ModelConfig, Network
from .orders import (GenerationOrder, ObservedSet, hilbert_order, max_context_order, raster_order,
                     s_curve_order)

__version__ = "0.1.0"
