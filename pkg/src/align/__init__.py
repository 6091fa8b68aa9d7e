"""Explanation-guided training with a learned masker, on a small numpy autodiff engine."""

from .tensor import Tensor, grad, no_grad
from .models import ClassifierNet, MaskerNet, init_classifier, init_masker
from .gradcam import explain
from .losses import LossConfig
from .data import SyntheticSpec, build_splits
from .trainer import TrainSchedule, train_align
from .metrics import MetricsReport, TopKSelector, evaluate, ood_eval, perturbation_eval

__version__ = "0.1.0"
