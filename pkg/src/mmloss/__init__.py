"""MultiModal proxy-subgrouping loss with per-modality MLP training and a synthetic benchmark."""

from .losses import (FusionHead, LossGrad, MultiModalConfig, SoftTripleConfig, fusion_ce_forward_backward,
                     mm_attended_output, mm_attention, mm_class_similarity, mm_loss_backward, mm_loss_forward,
                     mm_similarity, mm_simplified_grads, softtriple_forward_backward)
from .model import LossSpec, TrainConfig, TrainedModel, lr_grid_search, train
from .synthdata import SynthConfig, SynthDataset, generate

__version__ = "0.1.0"
