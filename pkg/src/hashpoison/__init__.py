"""Clean-label gradient-matching data poisoning toolkit for deep-hashing retrieval."""

__version__ = "0.1.0"

from .attack import (GradientVector, PerturbationSet, PoisonConfig,
                     matching_delta_grad, optimize_perturbations,
                     poison_gradient, select_base_images, strict_matching_loss,
                     target_gradient)
from .campaign import (CampaignPlan, EnsembleSurrogate, LocalTarget,
                       RecordedTarget, build_ensemble_surrogate, inject_poison,
                       run_campaign, run_trial, sample_surrogate_dataset)
from .data import (DatasetHandle, Sample, load_cifar10, load_dataset,
                   load_image_folder, one_hot, save_dataset, synth_dataset)
from .errors import (DegenerateGradientError, FormatError, HashPoisonError,
                     InputError, NumericError, StageError, TrainingError)
from .metrics import (AttackReport, asr, psnr, robustness_eval, ssim,
                      threshold_sweep)
from .models import ClassCodeTable, HashModel, HashModelConfig, binarize
from .retrieval import (HashCode, RetrievalIndex, build_index, hamming_distance,
                        map_score, query_topk)
from .training import load_checkpoint, new_model, save_checkpoint, train
