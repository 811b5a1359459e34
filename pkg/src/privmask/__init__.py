"""privmask: practical privacy-risk measurement and feature masking.

Measures a dataset's membership-inference risk under a model via the offline
likelihood-ratio attack's success rate, and reduces that risk with
explainer-guided, utility-optimized feature masking so DP-SGD can run at a
relaxed privacy budget with equivalent practical protection.
"""

from .attack import (AsrReport, GaussianNull, ShadowEnsemble, TrainerSpec,
                     build_shadow_ensemble, compute_asr, dataset_sensitivity,
                     find_equivalent_epsilon, fit_null, lira_decide, lira_score,
                     logit_confidence)
from .data import (DualTaskDataset, PlantedStructure, gen_random_dataset,
                   gen_synthetic_dual_task, load_idx_subset, randomize_labels,
                   split_train_test)
from .dp import (AccountingReport, PrivacySpec, account_epsilon, calibrate_noise,
                 clip_per_sample, dp_sgd_step, train_dp)
from .explain import (SensitivityVector, class_aggregate, clip_positive,
                      local_surrogate, shapley_exact, shapley_sampled)
from .harness import ExperimentConfig, SweepResult, emit_outputs
from .masking import (ClassMaskSet, MaskSolution, apply_mask,
                      feature_masking_pipeline, optimize_mask, random_mask,
                      top_k_mask)
from .models import (MlpModel, ModelSpec, TrainConfig, accuracy, forward,
                     loss_and_per_sample_grads, train_plain)

__version__ = "0.1.0"
