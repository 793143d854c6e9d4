"""Domain-invariant feature learning for retrieval-based visual localization.

Multi-domain encoder/decoder banks trained with adversarial, cycle and
feature-consistency objectives; encoded features feed a slice-wise
nearest-neighbor index evaluated under nested 6-DOF pose-error regimes.
"""

from .bank import (DiscriminatorBank, DomainId, GeneratorBank, LatentFeature,
                   NetworkConfig, init_bank)
from .data import (DatasetManifest, ImageRecord, Pose, ToySceneSpec,
                   generate_toy_dataset, load_manifest, save_manifest)
from .evaluate import (LocalizationReport, PrecisionRegimes, classify,
                       evaluate, position_error, rotation_error)
from .index import (Descriptor, FeatureIndex, PcaModel, build_index,
                    build_index_from_descriptors, cosine_distance,
                    l2_distance, load_index, retrieve, save_index, search)
from .losses import (LossBreakdown, LossWeights, cycle_loss,
                     feature_consistency_loss, gan_loss_discriminator,
                     gan_loss_generator, total_loss)
from .trainer import (TrainConfig, Trainer, TrainState, fit, lambda2_schedule,
                      lr_schedule, preprocess, sample_domain_pair)

__version__ = "0.1.0"
