"""seqlab: classical structured-prediction losses for seq2seq models.

A desk-scale laboratory: synthetic transduction corpora, a minimal attentional
encoder-decoder with exact reverse-mode gradients, candidate generation by
beam search or sampling, token/sequence objectives and their combinations,
BLEU/ROUGE metrics, and a two-phase training harness.
"""

from ._accel import NUMBA_ENABLED
from .corpus import (
    BOS_ID,
    EOS_ID,
    PAD_ID,
    UNK_ID,
    SentencePair,
    Vocab,
    batch_by_tokens,
    build_vocab,
    decode_ids,
    encode_line,
    gen_synthetic,
)
from .generate import (
    CandidateSet,
    GenerationConfig,
    Hypothesis,
    beam_search,
    candidate_provider,
    make_candidate_set,
    sample_k,
)
from .metrics import MetricKind, corpus_bleu, cost, rescale_set_costs, rouge, sentence_bleu
from .model import Model, ScoredCandidate, grad_check
from .objectives import (
    LossResult,
    constrained,
    max_margin,
    multi_margin,
    risk,
    seq_nll,
    softmax_margin,
    tok_ls,
    tok_nll,
    weighted,
)
from .trainer import (
    Checkpoint,
    MetricLog,
    NesterovSGD,
    TrainConfig,
    anneal,
    evaluate,
    load_checkpoint,
    renorm_grads,
    save_checkpoint,
    train_sequence,
    train_token,
)

__version__ = "0.1.0"
