"""Entity alignment between knowledge graphs via textual entailment.

Triples are serialized into per-entity text sequences; cross-KG entity pairs
are scored by a pair encoder under three attention masks (whole pair, first
entity only, second entity only) with sentence-pair and mask-filling heads.
Training combines an embedding margin objective with bi-directional entailment
objectives; inference retrieves candidates by embedding cosine and re-ranks
low-confidence queries by entailment probability.
"""

from .config import ExperimentConfig
from .embeddings import EmbeddingIndex, encode_entities
from .encoder import (
    AlignerScores,
    EncoderOutput,
    ReferenceEncoder,
    SequenceEncoder,
    Verbalizer,
    build_encoder,
    load_checkpoint,
    register_encoder,
    save_checkpoint,
)
from .inference import (
    EntailmentScorer,
    EvalReport,
    RankingResult,
    align_queries,
    evaluate,
    read_predictions,
    rerank,
    select_candidates,
    write_predictions,
)
from .kg import (
    AlignmentSeeds,
    KnowledgeGraph,
    PerturbationConfig,
    generate_synthetic_pair,
    load_kg,
    load_links,
    save_kg,
    save_links,
    split_seeds,
)
from .objectives import (
    LossConfig,
    TrainingTriple,
    entailment_bce,
    margin_ranking_loss,
    prompt_margin_loss,
    total_loss,
)
from .sequence import (
    AttentionMasks,
    PairInput,
    Template,
    TextSequence,
    build_masks,
    build_pair_input,
    build_sequence,
    build_single_input,
)
from .tokenizer import Tokenizer
from .trainer import (
    Adam,
    NegativePool,
    TrainState,
    build_negative_pool,
    check_early_stop,
    sample_training_set,
    train_epoch,
    train_model,
)

__version__ = "0.1.0"

__all__ = [
    "AlignerScores",
    "AlignmentSeeds",
    "AttentionMasks",
    "Adam",
    "EmbeddingIndex",
    "EncoderOutput",
    "EntailmentScorer",
    "EvalReport",
    "ExperimentConfig",
    "KnowledgeGraph",
    "LossConfig",
    "NegativePool",
    "PairInput",
    "PerturbationConfig",
    "RankingResult",
    "ReferenceEncoder",
    "SequenceEncoder",
    "Template",
    "TextSequence",
    "Tokenizer",
    "TrainState",
    "TrainingTriple",
    "Verbalizer",
    "align_queries",
    "build_encoder",
    "build_masks",
    "build_negative_pool",
    "build_pair_input",
    "build_sequence",
    "build_single_input",
    "check_early_stop",
    "encode_entities",
    "entailment_bce",
    "evaluate",
    "generate_synthetic_pair",
    "load_checkpoint",
    "load_kg",
    "load_links",
    "margin_ranking_loss",
    "prompt_margin_loss",
    "read_predictions",
    "register_encoder",
    "rerank",
    "sample_training_set",
    "save_checkpoint",
    "save_kg",
    "save_links",
    "select_candidates",
    "split_seeds",
    "total_loss",
    "train_epoch",
    "train_model",
    "write_predictions",
]
