"""Self-inverse image-to-image translation: one generator for both directions."""

__version__ = "0.1.0"

from .data import (
    AugmentConfig,
    Batch,
    PairedDataset,
    PairedSample,
    SyntheticTaskSpec,
    augment_pair,
    batch_iter,
    generate_synthetic,
    load_paired_dataset,
    save_paired_dataset,
)
from .losses import LossBreakdown, LossConfig
from .models import (
    Checkpoint,
    DiscriminatorSpec,
    GeneratorSpec,
    PatchDiscriminator,
    UnetGenerator,
    build_discriminator,
    build_generator,
    load_checkpoint,
    parameter_count,
    save_checkpoint,
)
from .metrics import MetricReport, evaluate, psnr, self_inverse_score, ssim
from .sensitivity import SensitivityConfig, SensitivityReport, run_sensitivity, sensitivity_summary
from .training import TrainConfig, TrainResult, train, train_step

__all__ = [name for name in dir() if not name.startswith("_")]
