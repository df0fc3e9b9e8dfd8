"""Few-shot paired image editing.

Learns a user-defined edit from a handful of (source, target) image
pairs by training on directed transformations among samples instead of
on the pairs themselves, with a conditioned diffusion generator
producing the edited result.
"""

from .autoencoder import (
    AutoencoderConfig,
    ImageDecoder,
    ImageEncoder,
    SkipStack,
    decode,
    encode,
    kl_loss,
    reparameterize,
)
from .config import RunConfig
from .editor import (
    AblationFlags,
    ConditionEmbedder,
    EditorNetConfig,
    LossWeights,
    ModelSet,
    NoiseSchedule,
    TargetPredictor,
    TrainingFault,
    add_noise,
    embed_condition,
    make_linear_schedule,
    predict_target,
    sample_edit,
    train_step,
)
from .metrics import (
    FeatureGaussian,
    diou,
    edit_mask,
    frechet_distance,
    frequency_loss,
    pixel_features,
    psnr,
)
from .sampling import (
    AugmentConfig,
    AugmentParams,
    PairedDataset,
    SampleGroup,
    apply_augment,
    draw_augment_params,
    expansion_count,
    paired_augment,
    sample_group,
    seeded_rng,
)
from .source_net import SourceNetConfig, SourceTransformNet, predict_transform, source_loss
from .synth import SynthSpec, generate, load_pair_folder, save_pair_folder
from .trainer import Trainer, evaluate, load_checkpoint, save_checkpoint, train_dataset
from .transforms import (
    TransformPack,
    apply_color_affine,
    apply_flow,
    compose_transform,
    hflip_flow,
    identity_flow,
    identity_pack,
)

__version__ = "0.1.0"
