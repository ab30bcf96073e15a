"""Attention with position-dependent tangent transforms and locality-focused scores.

Everything runs on numpy with a small reverse-mode autodiff tape.
"""

from .attention import (AttentionConfig, AttenuationParams, MultiHeadSelfAttention, attenuation_matrix,
                        lf_attention, read_matrix_csv, write_matrix_csv, write_matrix_pgm)
from .data import (DataError, Dataset, Sample, Splits, augment, load_cifar10, load_cifar100,
                   synthetic_position_task, synthetic_splits)
from .geometry import (Metric, ScaleSchedule, TangentTransform, compatibility_residual, inverse_transform_matrix,
                       metric_inner, metric_matrix, parallel_transport, relative_transform, transform_matrix)
from .model import Classifier, SeqConfig, ViTConfig, model_forward, param_count
from .positional import Layout, MechanismConfig, apply_tangent_alignment
from .tensor import Parameter, ShapeError, Tensor, backward, grad_check
from .training import (AdamW, Checkpoint, CheckpointError, TrainConfig, TrainingDiverged, load_checkpoint,
                       save_checkpoint, train)

__version__ = "0.1.0"
