"""roomdiff: desk-scale controllable latent diffusion for room layouts.

A self-contained numpy implementation of a latent denoising diffusion engine
with two control channels (appearance-context attention over a reference
image and design-specification attention over dimension tokens), trained on
a procedurally generated interior-layout dataset whose prompts carry
numerically verifiable constraints.
"""

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .control_denoiser import (
    ConditioningBundle,
    DenoiserConfig,
    DenoiserParams,
    appearance_context_attention,
    design_control_block,
    desk_config,
    init_params,
    predict_noise,
    refresh_reference,
    tiny_config,
)
from .designhelper_mini import (
    SceneSpec,
    describe_scene,
    generate_record,
    generate_scene,
    measure_layout,
    rasterize,
)
from .diffusion_process import (
    ElboReport,
    NoiseSchedule,
    build_schedule,
    elbo,
    forward_marginal,
    posterior_params,
    reverse_params,
)
from .errors import (
    ConfigError,
    DomainError,
    FormatError,
    GenerationError,
    RoomdiffError,
    ShapeError,
    TrainingAbort,
)
from .evaluator import (
    frechet_distance,
    inception_proxy,
    retrieval_recall,
    similarity_score,
    train_dual_encoder,
    train_space_classifier,
)
from .latent_codec import Codec, LatentGrid, read_ppm, write_ppm
from .prompt_encoder import (
    PatchScorer,
    PromptFeatures,
    Vocabulary,
    make_embedding_table,
    tokenize_and_embed,
    train_patch_scorer,
    weight_prompt,
)
from .sampler import SampleRequest, ancestral_sample, write_samples
from .tensor_core import Rng, derive_seed, gaussian, psd_sqrt, softmax_rows
from .trainer import ConditioningBuilder, TrainConfig, gradient_check, train

__version__ = "0.1.0"

__all__ = [
    "Checkpoint",
    "load_checkpoint",
    "save_checkpoint",
    "ConditioningBundle",
    "DenoiserConfig",
    "DenoiserParams",
    "appearance_context_attention",
    "design_control_block",
    "desk_config",
    "init_params",
    "predict_noise",
    "refresh_reference",
    "tiny_config",
    "SceneSpec",
    "describe_scene",
    "generate_record",
    "generate_scene",
    "measure_layout",
    "rasterize",
    "ElboReport",
    "NoiseSchedule",
    "build_schedule",
    "elbo",
    "forward_marginal",
    "posterior_params",
    "reverse_params",
    "ConfigError",
    "DomainError",
    "FormatError",
    "GenerationError",
    "RoomdiffError",
    "ShapeError",
    "TrainingAbort",
    "frechet_distance",
    "inception_proxy",
    "retrieval_recall",
    "similarity_score",
    "train_dual_encoder",
    "train_space_classifier",
    "Codec",
    "LatentGrid",
    "read_ppm",
    "write_ppm",
    "PatchScorer",
    "PromptFeatures",
    "Vocabulary",
    "make_embedding_table",
    "tokenize_and_embed",
    "train_patch_scorer",
    "weight_prompt",
    "SampleRequest",
    "ancestral_sample",
    "write_samples",
    "Rng",
    "derive_seed",
    "gaussian",
    "psd_sqrt",
    "softmax_rows",
    "ConditioningBuilder",
    "TrainConfig",
    "gradient_check",
    "train",
    "__version__",
]
