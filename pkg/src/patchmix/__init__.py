"""Grid-mask pairwise image interpolation with patch-level supervision.

Images are mixed pairwise under a binary patch-grid mask, the mixing
ratio doubles as the soft image label, and each patch carries the label
of whichever source it came from.  An evolutionary search over per-pair
mask configurations, scored against a frozen reference model, produces a
guided augmentation set for final training.
"""

from .data import (
    Dataset,
    load_cifar_binary,
    load_dataset,
    one_hot,
    save_dataset,
    sniff_and_load,
    synth_shapes,
    toy_2d_three_class,
)
from .errors import ConfigError, FormatError, NumericError
from .evolution import (
    Individual,
    SearchConfig,
    all_pairs,
    evaluate_fitness,
    index_to_pair,
    load_individual,
    load_population,
    pair_count,
    pair_to_index,
    run_search,
    save_individual,
    save_population,
)
from .losses import (
    ModelOutputs,
    combined_loss,
    image_loss,
    log_softmax,
    patch_accuracy,
    patch_loss,
    softmax,
    total_loss,
)
from .masks import (
    PatchMask,
    PixelMask,
    expand_to_pixel_mask,
    full_mask,
    mixing_ratio,
    parse_mask,
    reduce_to_patch_mask,
    sample_random_mask,
    serialize_mask,
)
from .mixing import MixedSample, cutmix, mixup, patchmix
from .model import (
    ReferenceModel,
    TrainConfig,
    adversarial_accuracy,
    cosine_lr,
    evaluate_model,
    fgsm_attack,
    fgsm_attack_batch,
    forward,
    forward_batch,
    load_metrics,
    load_model,
    save_metrics,
    save_model,
    sgd_nesterov_step,
    train_random_patchmix,
)
from .rng import RngKey
from .workflow import (
    GuidedPlan,
    PipelineResult,
    ablation_grid,
    generate_guided_set,
    run_guided_pipeline,
    train_final,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "Dataset",
    "FormatError",
    "GuidedPlan",
    "Individual",
    "MixedSample",
    "ModelOutputs",
    "NumericError",
    "PatchMask",
    "PipelineResult",
    "PixelMask",
    "ReferenceModel",
    "RngKey",
    "SearchConfig",
    "TrainConfig",
    "ablation_grid",
    "adversarial_accuracy",
    "all_pairs",
    "combined_loss",
    "cosine_lr",
    "cutmix",
    "evaluate_fitness",
    "evaluate_model",
    "expand_to_pixel_mask",
    "fgsm_attack",
    "fgsm_attack_batch",
    "forward",
    "forward_batch",
    "full_mask",
    "generate_guided_set",
    "image_loss",
    "index_to_pair",
    "load_cifar_binary",
    "load_dataset",
    "load_individual",
    "load_metrics",
    "load_model",
    "load_population",
    "log_softmax",
    "mixing_ratio",
    "mixup",
    "one_hot",
    "pair_count",
    "pair_to_index",
    "parse_mask",
    "patch_accuracy",
    "patch_loss",
    "patchmix",
    "reduce_to_patch_mask",
    "run_guided_pipeline",
    "run_search",
    "sample_random_mask",
    "save_dataset",
    "save_individual",
    "save_metrics",
    "save_model",
    "save_population",
    "serialize_mask",
    "sgd_nesterov_step",
    "sniff_and_load",
    "softmax",
    "synth_shapes",
    "total_loss",
    "toy_2d_three_class",
    "train_final",
    "train_random_patchmix",
]
