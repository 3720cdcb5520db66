"""Data-free universal adversarial perturbations from class impressions.

Pipeline: train or load a small frozen classifier, synthesize class
impressions from its parameters, train a latent-to-UAP generator on them,
then evaluate fooling rates, transfer, diversity, and the adversarial
training response on real held-out data.
"""

from .classifier_zoo import (ClassifierHandle, EnsembleHandle,
                             constant_logits_handle, ensemble_presoftmax,
                             load_handle, predict_label, save_handle,
                             tap_embedding, tap_presoftmax, tap_softmax,
                             toy_linear_handle, train_classifier)
from .data import ArrayDataset, dataset_ids, load_dataset
from .evaluation import (EvalReport, InterpolationPoint, RetrainPlan,
                         RetrainResult, TransferMatrix, adversarial_finetune,
                         evaluate_uap, interpolate_eval, label_diversity,
                         random_noise_baseline, retrain_against, success_rate,
                         transfer_matrix)
from .generator import (GeneratorModel, GeneratorSpec, Perturbation,
                        TrainConfig, build_generator, diversity_loss,
                        embedding_distance, fooling_loss, generate_uap,
                        generate_uaps, load_generator, sample_latent,
                        save_generator, total_loss, train_generator)
from .impressions import (ClassImpressionRecord, ImpressionConfig,
                          ImpressionDataset, augment, build_impression_dataset,
                          load_impressions, sample_stop_confidence,
                          save_impressions, synth_impression)
from .seeding import substream_seed

__all__ = [
    "ArrayDataset", "ClassImpressionRecord", "ClassifierHandle",
    "EnsembleHandle", "EvalReport", "GeneratorModel", "GeneratorSpec",
    "ImpressionConfig", "ImpressionDataset", "InterpolationPoint",
    "Perturbation", "RetrainPlan", "RetrainResult", "TrainConfig",
    "TransferMatrix", "adversarial_finetune", "augment", "build_generator",
    "build_impression_dataset", "constant_logits_handle", "dataset_ids",
    "diversity_loss", "embedding_distance", "ensemble_presoftmax",
    "evaluate_uap", "fooling_loss", "generate_uap", "generate_uaps",
    "interpolate_eval", "label_diversity", "load_dataset", "load_generator",
    "load_handle", "load_impressions", "predict_label",
    "random_noise_baseline", "retrain_against", "sample_latent",
    "sample_stop_confidence", "save_generator", "save_handle",
    "save_impressions", "substream_seed", "success_rate", "synth_impression",
    "tap_embedding", "tap_presoftmax", "tap_softmax", "total_loss",
    "toy_linear_handle", "train_classifier", "train_generator",
    "transfer_matrix",
]

__version__ = "0.1.0"
