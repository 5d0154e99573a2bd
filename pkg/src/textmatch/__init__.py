"""Deep text matching on a small self-contained autodiff core."""

from .autodiff import Graph, Parameter, backward, forward, grad_check
from .dataprep import (
    Batch,
    Corpus,
    CorpusEntry,
    RelationRecord,
    Vocabulary,
    batches_listwise,
    batches_pairwise,
    batches_pointwise,
    build_vocabulary,
    encode_corpus,
    load_embeddings,
    load_relations,
)
from .evaluation import RankedRun, average_precision, evaluate_run, mrr, ndcg_at_k, precision_at_k, write_trec_run
from .models import Model, ModelConfig, build_model, load_model, save_model
from .training import Objective, OptimizerConfig, train

__version__ = "0.1.0"
