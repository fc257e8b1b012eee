"""Subword segmentation (BPE, BPE-dropout, unigram LM Viterbi and sampling)
and multi-view subword regularization on a small softmax model."""

from .lattice import (
    LatticeSampler,
    LatticeTooLarge,
    Segmentation,
    SegmentationLattice,
    build_lattice,
    enumerate_all,
    forward_log_sums,
    viterbi,
)
from .models import (
    BpeModel,
    CorpusStats,
    ModelFormatError,
    UnigramModel,
    count_corpus,
    load_model,
    save_model,
    train_bpe,
    train_unigram,
)
from .segment import (
    BpeSegmenter,
    SegmenterConfig,
    TokenSeq,
    UnigramSegmenter,
    bpe_dropout_encode,
    bpe_encode,
    make_segmenter,
    ulm_encode,
    ulm_sample,
)
from .trainer import (
    Example,
    ExampleViews,
    ToyModel,
    TrainConfig,
    flatten,
    forward,
    kl_divergence,
    mvr_loss,
    predict,
    sr_loss,
    train,
)

__version__ = "0.1.0"
