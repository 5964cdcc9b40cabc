"""Unsupervised change detection between two point clouds with implicit height fields."""

from .change import ChangeField, ChangeLabels, decode_dz, fit_gmm3, label_changes
from .core_types import Normalizer, PointCloud, fit_normalizer, load_xyz, split_train_val
from .encoding import Encoding, encode
from .metrics import EvalResult, auc, evaluate, iou
from .network import FieldModel, build_model, forward
from .synth import SceneSpec, generate, preset
from .training import FitResult, TrainConfig, fit

__version__ = "0.1.0"
