"""Meta-learned soft-prompt initializations on a tiny frozen decoder."""

from .backbone import FrozenBackbone, init_backbone
from .evaluation import average_relative_gain, relative_gain, score_task
from .metalearn import MetaConfig, fomaml_step, maml_step, meta_train, mtl_train, reptile_step
from .pipeline import EvalReport, PipelineConfig, run_pipeline
from .prompting import PromptEmbeddings, PTConfig, init_prompt_from_vocab, prompt_tune
from .similarity import prompt_subspace, rank_sources_by_similarity, subspace_correlation
from .taskgen import Partition, generate_task, make_partition, sample_fewshot

__all__ = [
    "EvalReport", "FrozenBackbone", "MetaConfig", "PTConfig", "Partition", "PipelineConfig",
    "PromptEmbeddings", "average_relative_gain", "fomaml_step", "generate_task",
    "init_backbone", "init_prompt_from_vocab", "make_partition", "maml_step", "meta_train",
    "mtl_train", "prompt_subspace", "prompt_tune", "rank_sources_by_similarity",
    "relative_gain", "reptile_step", "run_pipeline", "sample_fewshot", "score_task",
    "subspace_correlation",
]
