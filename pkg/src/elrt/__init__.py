"""Low-rank (Tucker-2) training of convolutional networks from scratch, in numpy."""

from .autodiff import Tape, backward, grad_check
from .decomposition import approx_error_study, hooi_tucker2, truncated_svd_approx
from .flops import LayerGeometry, model_reduction, resnet_cifar_geometry, training_reduction
from .models import (
    RankConfig,
    apply_rank_config,
    build_mnist_cnn,
    build_resnet_cifar,
    builtin_rank_config,
    parse_rank_config,
)
from .ortho import RegConfig, RegKind, dso, mc, so, srip
from .tensor import ConvGeometry, conv2d, verification_mode
from .trainer import TrainConfig, evaluate, train
from .tucker import DenseConv, Tucker2Conv

__version__ = "0.1.0"

__all__ = [
    "ConvGeometry", "DenseConv", "LayerGeometry", "RankConfig", "RegConfig", "RegKind", "Tape",
    "TrainConfig", "Tucker2Conv", "apply_rank_config", "approx_error_study", "backward",
    "build_mnist_cnn", "build_resnet_cifar", "builtin_rank_config", "conv2d", "dso", "evaluate",
    "grad_check", "hooi_tucker2", "mc", "model_reduction", "parse_rank_config", "resnet_cifar_geometry",
    "so", "srip", "train", "training_reduction", "truncated_svd_approx", "verification_mode",
]
