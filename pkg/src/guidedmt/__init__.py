"""Guided self-attention multimodal translation with frozen-backbone adapters, in plain numpy."""

from .adapters import POLICIES, ParameterRegistry, partition_parameters
from .data import (ContrastiveItem, ImageBundle, MultimodalExample, SyntheticSpec, Vocabulary, build_input,
                   generate_synthetic_corpus, load_dataset, save_dataset)
from .evaluation import contrastive_evaluate, corpus_bleu, normalized_attention_scores, perplexity
from .guidance import AlignmentRecord, GuidanceMatrix, ValidationError, build_guidance, degrade_guidance
from .model import ModelConfig, MultimodalInput, MultimodalTransformer, load_checkpoint, save_checkpoint
from .training import ABLATION_PRESETS, DivergenceError, TrainConfig, preset_config, pretrain_backbone, train

__version__ = "0.1.0"
