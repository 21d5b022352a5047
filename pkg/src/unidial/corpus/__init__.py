"""Synthetic corpus, file formats, sequence encoding, masking and negative sampling."""
from .encoding import (
    EncodedPair,
    EncodedSequence,
    MaskingPlan,
    SequenceOverflowError,
    apply_mlm_masks,
    context_ids,
    decode_answer,
    encode_discriminative,
    encode_generative,
    encode_pair,
)
from .io import attach_dense, load_dense, load_dialogs, load_features, save_dense, save_dialogs, save_features
from .negatives import BatchItem, NegativeSamplingError, NegativeSet, build_negative_sets
from .synthetic import ANSWERS, generate_synthetic_corpus, world_vocab
from .types import Dialog, ImageFeatures, Round
from .vocab import OOVError, Vocab, tokenize
