from .inference import postprocess_vs, predict, sliding_window_probs, tta_variants
from .losses import deep_supervision_loss, seg_loss, seg_loss_from_logits
from .training import (FoldResult, SegTrainingError, fold_split, load_seg_model, preprocess, preprocess_label,
                       save_seg_model, train_folds, train_segmentation)
from .unet import SegConfig, SegUNet
