"""Session embeddings with categorical side information, and their evaluation."""

from .corpus import (
    MetadataMap,
    Session,
    SplitCorpus,
    Vocabulary,
    build_vocabulary,
    load_metadata,
    load_sessions,
    split_sessions,
)
from .evaluation import (
    EvalReport,
    SpmiMatrix,
    ablation_run,
    cold_start_report,
    compute_spmi,
    evaluate,
    hit_ratio_at_k,
    ndcg_at_k,
    tune_alpha,
)
from .pairs import (
    NegativeSampler,
    PairKind,
    SamplingRng,
    TrainingPair,
    build_negative_sampler,
    generate_pairs,
    sample_negatives,
)
from .scorers import (
    BestOfScorer,
    CoCountMatrix,
    CoCountScorer,
    EmbeddingScorer,
    MixScorer,
    UnknownItemError,
    build_cocounts,
    cosine,
    mix_top_k,
    top_k,
)
from .trainer import (
    EmbeddingModel,
    HyperParams,
    TrainingDiverged,
    init_model,
    load_embeddings,
    pair_loss,
    save_embeddings,
    sgns_step,
    train,
)

__version__ = "0.1.0"
