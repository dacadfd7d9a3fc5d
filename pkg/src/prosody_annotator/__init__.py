"""Multimodal prosodic boundary annotation: text + audio fusion with a synthetic test bed."""

from .core import BoundaryLabel, Corpus, ProsodyTree, Utterance, labels_to_tree, read_corpus, tree_to_labels, write_corpus
from .fusion import ProsodyAnnotator, annotate
from .synth import GenConfig, generate_corpus
from .training import TrainConfig, train

__all__ = [
    "BoundaryLabel", "Corpus", "GenConfig", "ProsodyAnnotator", "ProsodyTree", "TrainConfig", "Utterance",
    "annotate", "generate_corpus", "labels_to_tree", "read_corpus", "train", "tree_to_labels", "write_corpus",
]
__version__ = "0.1.0"
