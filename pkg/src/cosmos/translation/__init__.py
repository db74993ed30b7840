from .losses import (TranslationLossWeights, adversarial_losses, cycle_loss, generator_objective,
                     identity_loss, segmentor_loss, soft_dice)
from .networks import Generator, PatchDiscriminator, TranslationModels
from .training import (ContractError, TrainingDivergedError, TranslationConfig, load_translation_models,
                       train_translation, train_translation_on_volumes, translate, translate_dataset)
