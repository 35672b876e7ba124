"""Continual-learning engine with prototype-guided prompt selection.

Per-class prototype rows form a cosine "vision classifier"; a learnable
prompt block per class, routed by prototype similarity and encoded with each
class-name token, forms the "text classifier". Tasks expand both banks and
freeze everything learned earlier.
"""

from .encoder import ToyTextEncoder, encode_text, make_encoder
from .errors import (
    ConfigError,
    DegenerateClassError,
    DuplicateClassError,
    EmptyEvalError,
    EngineError,
    FormatError,
    MissingTokenError,
    NoClassesError,
    NoDataError,
    ShapeError,
    ZeroNormError,
)
from .evaluator import (
    EvalReport,
    forward_transfer,
    gen_avg_accuracy,
    predict,
    prototype_similarity_matrix,
)
from .losses import LossBreakdown, Selection, loss_c1, loss_c2, loss_pp, supcon_variant, total_loss
from .model import (
    Banks,
    TextClassifier,
    aggregate_scores,
    build_text_classifier,
    expand,
    init_prototypes,
    load_checkpoint,
    sample_old_classes,
    save_checkpoint,
    select_prompt,
)
from .numerics import LrSchedule, cosine_lr, cosine_sim, fd_check, l2_normalize, masked_softmax_ce, seeded_orthogonal
from .records import (
    ClassTokenTable,
    EmbeddingRecord,
    Task,
    TaskStream,
    read_dataset,
    stream_from_records,
    write_dataset,
)
from .scenarios import prototypes_only_baseline, run_cdc, run_cdi, run_ci, transfer_init_prompts
from .synth import SynthConfig, gen_synthetic
from .trainer import TrainConfig, snapshot, train_task

__version__ = "0.1.0"
