"""Audio-visual inconsistency detection on synthetic clips, built on a small numpy autograd."""

from .detector import Detector, ModelConfig
from .pseudofake import AugmentConfig, PseudoFakeSpec, augment_pair
from .synthdata import ClipPair, CorpusSpec, build_corpus, generate_fake, generate_real
from .tensor import Tensor
from .train import TrainConfig, evaluate, roc_auc, train

__all__ = [
    "AugmentConfig",
    "ClipPair",
    "CorpusSpec",
    "Detector",
    "ModelConfig",
    "PseudoFakeSpec",
    "Tensor",
    "TrainConfig",
    "augment_pair",
    "build_corpus",
    "evaluate",
    "generate_fake",
    "generate_real",
    "roc_auc",
    "train",
]

__version__ = "0.1.0"
